"""Pure numpy/scipy fallback for the compiled mask kernels.

Same contracts and bit-identical outputs as ``mzs._kernels._core``; used when
the extension is not built (or when MZS_KERNELS=fallback).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

_STRUCT_26 = np.ones((3, 3, 3), dtype=bool)


def _axis_filter(arr: np.ndarray, radius: int, axis: int, reducer) -> np.ndarray:
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, constant_values=0)
    windows = sliding_window_view(padded, 2 * radius + 1, axis=axis)
    return reducer(windows, axis=-1)


def box_erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary erosion by a box of side 2*radius+1; outside counts as 0."""
    out = np.ascontiguousarray(mask, dtype=np.uint8)
    for axis in range(3):
        out = _axis_filter(out, radius, axis, np.min)
    return out


def box_dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a box of side 2*radius+1, clipped to the volume."""
    out = np.ascontiguousarray(mask, dtype=np.uint8)
    for axis in range(3):
        out = _axis_filter(out, radius, axis, np.max)
    return out


def label_components_26(mask: np.ndarray):
    """26-connected component labels, numbered by first raster occurrence."""
    a = np.asarray(mask, dtype=np.uint8)
    raw, n = ndimage.label(a, structure=_STRUCT_26)
    if n == 0:
        return raw.astype(np.int32), 0
    # canonicalize: scipy's numbering is not contractual, ours is
    flat = raw.ravel()
    values, first = np.unique(flat, return_index=True)
    keep = values != 0
    values, first = values[keep], first[keep]
    order = np.argsort(first, kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[values[order]] = np.arange(1, n + 1, dtype=np.int32)
    return remap[raw], int(n)


def window_counts(mask2d: np.ndarray, patch: int, stride: int) -> np.ndarray:
    """Set-bit counts of each patch x patch window at the given stride."""
    a = np.asarray(mask2d, dtype=np.uint8)
    ny, nx = a.shape
    if patch > ny or patch > nx:
        return np.zeros((0, 0), dtype=np.int64)
    integral = np.zeros((ny + 1, nx + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(a, axis=0, dtype=np.int64), axis=1)
    ys = np.arange(0, ny - patch + 1, stride)
    xs = np.arange(0, nx - patch + 1, stride)
    return (integral[np.ix_(ys + patch, xs + patch)]
            - integral[np.ix_(ys, xs + patch)]
            - integral[np.ix_(ys + patch, xs)]
            + integral[np.ix_(ys, xs)])
