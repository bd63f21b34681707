"""Binary dataset files and CSV export.

File layout (all little-endian)::

    b"AKNETDS1"                        magic
    uint32 m, n, T, count              dimensions
    uint8 family, uint8 split, 2 pad   0=gaussian/1=exponential, 0=full/1=pseudo-stationary
    float64 arrays, C order:           x (count,T,m), y (count,T,n), sow, q2, r2 (count,T),
                                       x0 (count,m), pair (count,2)
"""
from __future__ import annotations

import csv
import struct

import numpy as np

from .ssm import Dataset, NoiseFamily

__all__ = ["save_dataset", "load_dataset", "export_csv"]

MAGIC = b"AKNETDS1"
_HEADER = struct.Struct("<4I2B2x")
_FAMILIES = [NoiseFamily.GAUSSIAN, NoiseFamily.EXPONENTIAL]
_SPLITS = ["full", "pseudo-stationary"]


def save_dataset(path, ds: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(ds.m, ds.n, ds.T, len(ds),
                              _FAMILIES.index(ds.family), _SPLITS.index(ds.split)))
        for arr in (ds.x, ds.y, ds.sow, ds.q2, ds.r2, ds.x0, ds.pair):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not an aknet dataset file")
    m, n, T, N, fam, split = _HEADER.unpack_from(raw, 8)
    pos = 8 + _HEADER.size
    shapes = [(N, T, m), (N, T, n), (N, T), (N, T), (N, T), (N, m), (N, 2)]
    arrays = []
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, "<f8", size, pos).reshape(shape).astype(np.float64))
        pos += 8 * size
    if pos != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")
    x, y, sow, q2, r2, x0, pair = arrays
    return Dataset(x, y, sow, x0, q2, r2, _FAMILIES[fam], _SPLITS[split], pair)


def export_csv(path, ds: Dataset) -> None:
    """One row per (trajectory, step): traj, t, x_0.., y_0.., sow."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj", "t"] + [f"x{i}" for i in range(ds.m)]
                   + [f"y{i}" for i in range(ds.n)] + ["sow"])
        for i in range(len(ds)):
            for t in range(ds.T):
                w.writerow([i, t] + [repr(float(v)) for v in ds.x[i, t]]
                           + [repr(float(v)) for v in ds.y[i, t]] + [repr(float(ds.sow[i, t]))])
