"""Flat binary container shared by the prior, transfer-operator and mouth-database files.

Layout: ASCII magic, int64 count of dims, the dims (little-endian int64), then each
array as little-endian float64 in row-major order. Array shapes are not stored; the
reader reconstructs them from the dims, so every format declares its own field order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class ContainerError(ValueError):
    pass


def write_container(path, magic: str, dims: list[int], arrays: list[np.ndarray]) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(magic.encode("ascii"))
        fh.write(struct.pack("<q", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}q", *[int(d) for d in dims]))
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C"))


def read_container(path, magic: str, shapes_from_dims):
    """Read a container and return ``(dims, arrays)``.

    ``shapes_from_dims`` maps the dims list to the ordered list of array shapes.
    """
    data = Path(path).read_bytes()
    m = magic.encode("ascii")
    if not data.startswith(m):
        raise ContainerError(f"{path}: bad magic, expected {magic!r}")
    off = len(m)
    (ndims,) = struct.unpack_from("<q", data, off)
    off += 8
    dims = list(struct.unpack_from(f"<{ndims}q", data, off))
    off += 8 * ndims
    arrays = []
    for shape in shapes_from_dims(dims):
        count = int(np.prod(shape)) if len(shape) else 1
        nbytes = 8 * count
        if off + nbytes > len(data):
            raise ContainerError(f"{path}: truncated payload")
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64))
        off += nbytes
    if off != len(data):
        raise ContainerError(f"{path}: {len(data) - off} trailing bytes")
    return dims, arrays
