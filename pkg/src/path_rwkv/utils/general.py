"""
General utility functions: seeding, timing, run summaries.
"""
import hashlib
import json
import random
import time
from pathlib import Path
from typing import Any, Dict

import numpy as np
import torch


def derive_seed(*parts: Any) -> int:
    """
    Derive a 32-bit seed from any sequence of printable parts.

    Examples:
        >>> derive_seed(0, "epoch", 3) == derive_seed(0, "epoch", 3)
        True
    """
    text = "/".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "little")


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch global generators."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


class Stopwatch:
    """
    Context manager measuring wall time.

    Example:
        with Stopwatch() as sw:
            work()
        print(sw.seconds)
    """

    def __enter__(self) -> "Stopwatch":
        self._start = time.perf_counter()
        self.seconds = 0.0
        return self

    def __exit__(self, *exc) -> None:
        self.seconds = time.perf_counter() - self._start


def append_summary(path: str, record: Dict[str, Any]) -> None:
    """
    Append one JSON record to a line-delimited run summary file.
    """
    full_path = Path(path)
    full_path.parent.mkdir(parents=True, exist_ok=True)
    with open(full_path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(value: Any) -> Any:
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, torch.Tensor):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    return str(value)
