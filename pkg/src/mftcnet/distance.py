"""Exact Euclidean distance transforms on voxel grids.

The transform is the separable lower-envelope-of-parabolas method: one exact 1D
squared-distance pass per axis, each pass O(n) per line.
"""
from __future__ import annotations

from typing import Sequence

import numba
import numpy as np

_FAR = 1e20


@numba.njit(cache=True)
def _envelope_1d(f, spacing, out, v, z):
    n = f.shape[0]
    s2 = spacing * spacing
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        p = v[k]
        s = ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p))
        while s <= z[k]:
            k -= 1
            p = v[k]
            s = ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d = q - v[k]
        out[q] = s2 * d * d + f[v[k]]


@numba.njit(cache=True)
def _edt_sq_axis(a, axis, spacing):
    n0, n1, n2 = a.shape
    n = a.shape[axis]
    f = np.empty(n)
    out = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    if axis == 0:
        for j in range(n1):
            for k in range(n2):
                for i in range(n0):
                    f[i] = a[i, j, k]
                _envelope_1d(f, spacing, out, v, z)
                for i in range(n0):
                    a[i, j, k] = out[i]
    elif axis == 1:
        for i in range(n0):
            for k in range(n2):
                for j in range(n1):
                    f[j] = a[i, j, k]
                _envelope_1d(f, spacing, out, v, z)
                for j in range(n1):
                    a[i, j, k] = out[j]
    else:
        for i in range(n0):
            for j in range(n1):
                for k in range(n2):
                    f[k] = a[i, j, k]
                _envelope_1d(f, spacing, out, v, z)
                for k in range(n2):
                    a[i, j, k] = out[k]


def distance_to_set(mask: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """Euclidean distance from every voxel to the nearest ``True`` voxel of ``mask``.

    Returns ``inf`` everywhere if ``mask`` is empty.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError("expected a 3D mask")
    if not mask.any():
        return np.full(mask.shape, np.inf)
    a = np.where(mask, 0.0, _FAR)
    for axis in range(3):
        _edt_sq_axis(a, axis, float(spacing[axis]))
    return np.sqrt(a)


_FACE_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with a 6-neighbour outside it; the volume border counts as outside."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = mask.copy()
    for off in _FACE_OFFSETS:
        shifted = tuple(slice(1 + o, padded.shape[d] - 1 + o) for d, o in enumerate(off))
        interior &= padded[shifted]
    return mask & ~interior


def surface_indicator(labels: np.ndarray, class_index: int) -> np.ndarray:
    return boundary(np.asarray(labels) == class_index)


def signed_distance_transform(mask: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """Signed distance to the 6-connected boundary of ``mask``; negative inside, zero on it.

    A mask that is entirely foreground or entirely background has no surface to
    measure against and yields ``+inf`` everywhere.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.all() or not mask.any():
        return np.full(mask.shape, np.inf)
    d = distance_to_set(boundary(mask), spacing)
    return np.where(mask, -d, d)


def normalized_abs_sdt(mask: np.ndarray) -> np.ndarray | None:
    """``|SDT|`` scaled to a maximum of 1, or ``None`` when the field is degenerate."""
    sdt = signed_distance_transform(mask)
    if not np.isfinite(sdt).all():
        return None
    d = np.abs(sdt)
    peak = d.max()
    if peak <= 0:
        return None
    return d / peak
