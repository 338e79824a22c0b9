"""Checkpoint files: named float64 arrays in an uncompressed ``.npz`` archive.

Layout (format version 1):

* one ``.npy`` member per parameter, member name == parameter name, dtype
  ``<f8``, shape as stored;
* a member ``__poftlab_format__`` holding the int64 array ``[1]``.

NumPy's ``.npy`` encoding stores raw little-endian float64 bytes, so a
save/load cycle reproduces every value bit for bit. Pickle is never used.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_KEY = "__poftlab_format__"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {name: np.ascontiguousarray(arr, dtype="<f8") for name, arr in arrays.items()}
    if FORMAT_KEY in payload:
        raise CheckpointError(f"reserved parameter name {FORMAT_KEY}")
    payload[FORMAT_KEY] = np.array([FORMAT_VERSION], dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_arrays(path) -> dict[str, np.ndarray]:
    with np.load(Path(path), allow_pickle=False) as archive:
        if FORMAT_KEY not in archive.files:
            raise CheckpointError(f"{path}: not a poftlab checkpoint")
        version = int(archive[FORMAT_KEY][0])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        return {k: archive[k].astype(np.float64) for k in archive.files if k != FORMAT_KEY}


def arrays_digest(arrays: Mapping[str, np.ndarray]) -> str:
    """Content hash over sorted names, shapes and raw float64 bytes."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
