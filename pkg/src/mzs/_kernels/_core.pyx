# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled mask kernels: box morphology, 26-connected labeling, window sums.

All kernels are integer/boolean valued, so results are bit-identical to the
numpy fallback in ``mzs._kernels.fallback``. Out-of-volume voxels count as
background (zero) everywhere.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef cnp.uint8_t u8
ctypedef cnp.int32_t i32
ctypedef cnp.int64_t i64


cdef void _pass_axis2(u8[:, :, ::1] src, u8[:, :, ::1] dst, int r, bint erode) noexcept nogil:
    cdef Py_ssize_t nz = src.shape[0], ny = src.shape[1], nx = src.shape[2]
    cdef Py_ssize_t z, y, x, k, lo, hi
    cdef u8 acc
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if erode and (x < r or x >= nx - r):
                    dst[z, y, x] = 0
                    continue
                lo = x - r if x - r > 0 else 0
                hi = x + r if x + r < nx - 1 else nx - 1
                acc = 1 if erode else 0
                for k in range(lo, hi + 1):
                    if erode:
                        if src[z, y, k] == 0:
                            acc = 0
                            break
                    else:
                        if src[z, y, k] != 0:
                            acc = 1
                            break
                dst[z, y, x] = acc


cdef void _pass_axis1(u8[:, :, ::1] src, u8[:, :, ::1] dst, int r, bint erode) noexcept nogil:
    cdef Py_ssize_t nz = src.shape[0], ny = src.shape[1], nx = src.shape[2]
    cdef Py_ssize_t z, y, x, k, lo, hi
    cdef u8 acc
    for z in range(nz):
        for y in range(ny):
            if erode and (y < r or y >= ny - r):
                for x in range(nx):
                    dst[z, y, x] = 0
                continue
            lo = y - r if y - r > 0 else 0
            hi = y + r if y + r < ny - 1 else ny - 1
            for x in range(nx):
                acc = 1 if erode else 0
                for k in range(lo, hi + 1):
                    if erode:
                        if src[z, k, x] == 0:
                            acc = 0
                            break
                    else:
                        if src[z, k, x] != 0:
                            acc = 1
                            break
                dst[z, y, x] = acc


cdef void _pass_axis0(u8[:, :, ::1] src, u8[:, :, ::1] dst, int r, bint erode) noexcept nogil:
    cdef Py_ssize_t nz = src.shape[0], ny = src.shape[1], nx = src.shape[2]
    cdef Py_ssize_t z, y, x, k, lo, hi
    cdef u8 acc
    for z in range(nz):
        if erode and (z < r or z >= nz - r):
            for y in range(ny):
                for x in range(nx):
                    dst[z, y, x] = 0
            continue
        lo = z - r if z - r > 0 else 0
        hi = z + r if z + r < nz - 1 else nz - 1
        for y in range(ny):
            for x in range(nx):
                acc = 1 if erode else 0
                for k in range(lo, hi + 1):
                    if erode:
                        if src[k, y, x] == 0:
                            acc = 0
                            break
                    else:
                        if src[k, y, x] != 0:
                            acc = 1
                            break
                dst[z, y, x] = acc


def _box_filter(object mask, int radius, bint erode):
    a = np.ascontiguousarray(mask, dtype=np.uint8)
    if a.ndim != 3:
        raise ValueError("mask must be 3D")
    buf = np.empty_like(a)
    out = np.empty_like(a)
    cdef u8[:, :, ::1] v_in = a
    cdef u8[:, :, ::1] v_buf = buf
    cdef u8[:, :, ::1] v_out = out
    with nogil:
        _pass_axis0(v_in, v_buf, radius, erode)
        _pass_axis1(v_buf, v_out, radius, erode)
        _pass_axis2(v_out, v_buf, radius, erode)
    return buf


def box_erode(mask, int radius):
    """Binary erosion by a box of side 2*radius+1; outside counts as 0."""
    return _box_filter(mask, radius, True)


def box_dilate(mask, int radius):
    """Binary dilation by a box of side 2*radius+1, clipped to the volume."""
    return _box_filter(mask, radius, False)


cdef i32 _find(i32[::1] parent, i32 i) noexcept nogil:
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def label_components_26(object mask):
    """26-connected component labels, numbered by first raster occurrence.

    Returns (labels int32 array, component count). Background stays 0.
    """
    a = np.ascontiguousarray(mask, dtype=np.uint8)
    if a.ndim != 3:
        raise ValueError("mask must be 3D")
    cdef Py_ssize_t nz = a.shape[0], ny = a.shape[1], nx = a.shape[2]
    labels = np.zeros((nz, ny, nx), dtype=np.int32)
    cdef u8[:, :, ::1] m = a
    cdef i32[:, :, ::1] lab = labels
    # provisional labels, 1-based; parent[0] unused
    parent_arr = np.zeros(a.size + 1, dtype=np.int32)
    cdef i32[::1] parent = parent_arr
    cdef i32 next_label = 1, cur, root_a, root_b
    cdef Py_ssize_t z, y, x, dz, dy, dx, zz, yy, xx
    with nogil:
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    if m[z, y, x] == 0:
                        continue
                    cur = 0
                    # backward half of the 26-neighborhood in raster order
                    for dz in range(-1, 1):
                        for dy in range(-1, 2):
                            for dx in range(-1, 2):
                                if dz == 0 and (dy > 0 or (dy == 0 and dx >= 0)):
                                    continue
                                zz = z + dz
                                yy = y + dy
                                xx = x + dx
                                if zz < 0 or yy < 0 or yy >= ny or xx < 0 or xx >= nx:
                                    continue
                                if m[zz, yy, xx] == 0:
                                    continue
                                root_b = _find(parent, lab[zz, yy, xx])
                                if cur == 0:
                                    cur = root_b
                                elif root_b != cur:
                                    root_a = _find(parent, cur)
                                    if root_b < root_a:
                                        parent[root_a] = root_b
                                        cur = root_b
                                    else:
                                        parent[root_b] = root_a
                                        cur = root_a
                    if cur == 0:
                        cur = next_label
                        parent[cur] = cur
                        next_label += 1
                    lab[z, y, x] = cur
    # second pass: roots renumbered in first-occurrence order
    remap_arr = np.zeros(next_label, dtype=np.int32)
    cdef i32[::1] remap = remap_arr
    cdef i32 n_out = 0, r
    with nogil:
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    if lab[z, y, x] == 0:
                        continue
                    r = _find(parent, lab[z, y, x])
                    if remap[r] == 0:
                        n_out += 1
                        remap[r] = n_out
                    lab[z, y, x] = remap[r]
    return labels, int(n_out)


def window_counts(object mask2d, int patch, int stride):
    """Set-bit counts of each patch x patch window at the given stride.

    Output shape is ((ny-patch)//stride+1, (nx-patch)//stride+1).
    """
    a = np.ascontiguousarray(mask2d, dtype=np.uint8)
    if a.ndim != 2:
        raise ValueError("mask2d must be 2D")
    cdef Py_ssize_t ny = a.shape[0], nx = a.shape[1]
    if patch > ny or patch > nx:
        return np.zeros((0, 0), dtype=np.int64)
    cdef Py_ssize_t oy = (ny - patch) // stride + 1
    cdef Py_ssize_t ox = (nx - patch) // stride + 1
    integral = np.zeros((ny + 1, nx + 1), dtype=np.int64)
    cdef i64[:, ::1] ii = integral
    cdef u8[:, ::1] m = a
    out = np.empty((oy, ox), dtype=np.int64)
    cdef i64[:, ::1] o = out
    cdef Py_ssize_t y, x, i, j, y0, x0
    with nogil:
        for y in range(ny):
            for x in range(nx):
                ii[y + 1, x + 1] = ii[y + 1, x] + ii[y, x + 1] - ii[y, x] + m[y, x]
        for i in range(oy):
            y0 = i * stride
            for j in range(ox):
                x0 = j * stride
                o[i, j] = (ii[y0 + patch, x0 + patch] - ii[y0, x0 + patch]
                           - ii[y0 + patch, x0] + ii[y0, x0])
    return out
