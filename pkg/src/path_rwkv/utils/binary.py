"""
Little-endian binary helpers shared by the bag and checkpoint codecs.

Layout conventions:
- Magic: 4 ASCII bytes "PRWK"
- Integers: unsigned/signed 32-bit little-endian
- Reals: IEEE-754 32-bit little-endian
"""
import struct

import numpy as np

from path_rwkv.utils.errors import FormatError

MAGIC = b"PRWK"

U32 = struct.Struct("<I")


class ByteReader:
    """
    Sequential reader over an in-memory buffer that reports the failing offset.

    Example:
        reader = ByteReader(data)
        reader.expect_magic()
        version = reader.u32("version")
    """

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.offset + n > len(self.data):
            raise FormatError(
                f"Truncated file while reading {what}: need {n} bytes, {len(self.data) - self.offset} left",
                offset=self.offset,
            )
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def expect_magic(self) -> None:
        start = self.offset
        magic = self.take(len(MAGIC), "magic")
        if magic != MAGIC:
            raise FormatError(f"Bad magic {magic!r}, expected {MAGIC!r}", offset=start)

    def u32(self, what: str) -> int:
        return U32.unpack(self.take(U32.size, what))[0]

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        """Read `count` little-endian values of numpy `dtype` ('<f4', '<i4')."""
        itemsize = np.dtype(dtype).itemsize
        raw = self.take(count * itemsize, what)
        return np.frombuffer(raw, dtype=dtype, count=count).copy()

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(
                f"{len(self.data) - self.offset} trailing bytes after payload", offset=self.offset
            )
