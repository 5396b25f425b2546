"""
On-disk tile bag codec.

Layout (little-endian):
    magic "PRWK" | version u32 | N u32 | D_in u32 | N*D_in float32 (row-major) | N*2 int32 coords
"""
import logging
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from path_rwkv.data.tiles import TileBag
from path_rwkv.utils.binary import MAGIC, U32, ByteReader
from path_rwkv.utils.errors import EmptySlideError, FormatError

logger = logging.getLogger(__name__)

BAG_VERSION = 1
BAG_SUFFIX = ".prwk"
HEADER_BYTES = len(MAGIC) + 3 * U32.size


def encode_bag(bag: TileBag) -> bytes:
    if len(bag) == 0:
        raise EmptySlideError(f"Refusing to write empty bag {bag.slide_id!r}")
    if not np.isfinite(bag.features).all():
        raise FormatError(f"Bag {bag.slide_id!r} has non-finite features")
    return b"".join([
        MAGIC,
        U32.pack(BAG_VERSION),
        U32.pack(len(bag)),
        U32.pack(bag.in_dim),
        bag.features.astype("<f4").tobytes(),
        bag.coords.astype("<i4").tobytes(),
    ])


def _read_header(reader: ByteReader) -> Tuple[int, int, int]:
    reader.expect_magic()
    version_offset = reader.offset
    version = reader.u32("version")
    if version != BAG_VERSION:
        raise FormatError(f"Unsupported bag version {version}", offset=version_offset)
    count_offset = reader.offset
    n = reader.u32("tile count")
    d_in = reader.u32("feature width")
    if n == 0 or d_in == 0:
        raise FormatError(f"Bag header declares N={n}, D_in={d_in}", offset=count_offset)
    return version, n, d_in


def decode_bag(data: bytes, slide_id: str = "") -> TileBag:
    """
    Raises:
        FormatError: Bad magic or version, truncation or trailing bytes (with byte offset)
    """
    reader = ByteReader(data)
    _, n, d_in = _read_header(reader)
    features = reader.array("<f4", n * d_in, "features").reshape(n, d_in)
    coords = reader.array("<i4", n * 2, "coords").reshape(n, 2)
    reader.expect_end()
    return TileBag(features, coords, slide_id)


def write_bag(path: str, bag: TileBag) -> None:
    full_path = Path(path)
    full_path.parent.mkdir(parents=True, exist_ok=True)
    full_path.write_bytes(encode_bag(bag))


def read_bag(path: str, slide_id: Optional[str] = None) -> TileBag:
    """Read a bag file; slide_id defaults to the file stem."""
    full_path = Path(path)
    if not full_path.exists():
        raise FormatError(f"Bag file not found: {full_path}")
    return decode_bag(full_path.read_bytes(), slide_id if slide_id is not None else full_path.stem)


def read_bag_header(path: str) -> Tuple[int, int, int]:
    """(version, N, D_in) without reading the payload."""
    with open(path, "rb") as f:
        head = f.read(HEADER_BYTES)
    return _read_header(ByteReader(head))


def bag_file_size(n: int, d_in: int) -> int:
    return HEADER_BYTES + 4 * n * d_in + 8 * n
