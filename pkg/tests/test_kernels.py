import os
import subprocess
import sys

import numpy as np
import pytest

from mzs import _kernels
from mzs._kernels import fallback

HAVE_COMPILED = _kernels.HAVE_COMPILED
if HAVE_COMPILED:
    from mzs._kernels import _core


def dense_erode(mask, r):
    # direct window minimum; outside the volume counts as 0
    nz, ny, nx = mask.shape
    padded = np.pad(mask.astype(np.uint8), r, constant_values=0)
    out = np.zeros_like(mask, dtype=np.uint8)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                out[z, y, x] = padded[z:z + 2 * r + 1,
                                      y:y + 2 * r + 1,
                                      x:x + 2 * r + 1].min()
    return out


def dense_dilate(mask, r):
    nz, ny, nx = mask.shape
    padded = np.pad(mask.astype(np.uint8), r, constant_values=0)
    out = np.zeros_like(mask, dtype=np.uint8)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                out[z, y, x] = padded[z:z + 2 * r + 1,
                                      y:y + 2 * r + 1,
                                      x:x + 2 * r + 1].max()
    return out


def dense_label_26(mask):
    # flood fill from first raster occurrence, 26 neighbors
    nz, ny, nx = mask.shape
    labels = np.zeros(mask.shape, dtype=np.int32)
    next_label = 0
    offsets = [(dz, dy, dx)
               for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
               if (dz, dy, dx) != (0, 0, 0)]
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not mask[z, y, x] or labels[z, y, x]:
                    continue
                next_label += 1
                stack = [(z, y, x)]
                labels[z, y, x] = next_label
                while stack:
                    cz, cy, cx = stack.pop()
                    for dz, dy, dx in offsets:
                        tz, ty, tx = cz + dz, cy + dy, cx + dx
                        if (0 <= tz < nz and 0 <= ty < ny and 0 <= tx < nx
                                and mask[tz, ty, tx] and not labels[tz, ty, tx]):
                            labels[tz, ty, tx] = next_label
                            stack.append((tz, ty, tx))
    return labels, next_label


def dense_window_counts(mask2d, patch, stride):
    a = np.asarray(mask2d, dtype=np.uint8)
    ny, nx = a.shape
    if patch > ny or patch > nx:
        return np.zeros((0, 0), dtype=np.int64)
    ys = range(0, ny - patch + 1, stride)
    xs = range(0, nx - patch + 1, stride)
    out = np.zeros((len(ys), len(xs)), dtype=np.int64)
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            out[i, j] = int(a[y:y + patch, x:x + patch].sum())
    return out


def random_mask(rng, shape, p=0.5):
    return (rng.random(shape) < p).astype(np.uint8)


def test_erode_matches_dense_oracle():
    rng = np.random.default_rng(31)
    for _ in range(6):
        shape = tuple(int(rng.integers(4, 33)) for _ in range(3))
        mask = random_mask(rng, shape)
        for r in (1, 2):
            want = dense_erode(mask, r)
            assert np.array_equal(_kernels.box_erode(mask, r), want)
            assert np.array_equal(fallback.box_erode(mask, r), want)


def test_dilate_matches_dense_oracle():
    rng = np.random.default_rng(41)
    for _ in range(6):
        shape = tuple(int(rng.integers(4, 33)) for _ in range(3))
        mask = random_mask(rng, shape, p=0.2)
        for r in (1, 2):
            want = dense_dilate(mask, r)
            assert np.array_equal(_kernels.box_dilate(mask, r), want)
            assert np.array_equal(fallback.box_dilate(mask, r), want)


def test_morphology_edge_cases():
    empty = np.zeros((5, 5, 5), dtype=np.uint8)
    full = np.ones((5, 5, 5), dtype=np.uint8)
    assert np.array_equal(_kernels.box_erode(empty, 1), empty)
    assert np.array_equal(_kernels.box_dilate(empty, 1), empty)
    assert np.array_equal(_kernels.box_dilate(full, 1), full)
    # full cube erodes to its interior
    eroded = _kernels.box_erode(full, 1)
    want = np.zeros_like(full)
    want[1:-1, 1:-1, 1:-1] = 1
    assert np.array_equal(eroded, want)
    # radius 0 is the identity
    rng = np.random.default_rng(51)
    m = random_mask(rng, (6, 7, 8))
    assert np.array_equal(_kernels.box_erode(m, 0), m)
    assert np.array_equal(_kernels.box_dilate(m, 0), m)


def test_label_components_matches_flood_fill():
    rng = np.random.default_rng(61)
    for _ in range(8):
        shape = tuple(int(rng.integers(3, 15)) for _ in range(3))
        mask = random_mask(rng, shape, p=float(rng.uniform(0.1, 0.5)))
        want_labels, want_n = dense_label_26(mask)
        got_labels, got_n = _kernels.label_components_26(mask)
        assert got_n == want_n
        assert np.array_equal(got_labels, want_labels)


def test_label_components_diagonal_connectivity():
    mask = np.zeros((3, 3, 3), dtype=np.uint8)
    mask[0, 0, 0] = 1
    mask[1, 1, 1] = 1       # corner contact only
    labels, n = _kernels.label_components_26(mask)
    assert n == 1
    assert labels[0, 0, 0] == 1 and labels[1, 1, 1] == 1


def test_label_components_numbering_is_raster_order():
    mask = np.zeros((1, 3, 7), dtype=np.uint8)
    mask[0, 0, 5] = 1       # encountered first in raster order
    mask[0, 2, 0] = 1
    labels, n = _kernels.label_components_26(mask)
    assert n == 2
    assert labels[0, 0, 5] == 1
    assert labels[0, 2, 0] == 2


def test_label_components_empty():
    labels, n = _kernels.label_components_26(np.zeros((4, 4, 4), dtype=np.uint8))
    assert n == 0
    assert not labels.any()


def test_window_counts_matches_dense_oracle():
    rng = np.random.default_rng(71)
    for _ in range(10):
        ny = int(rng.integers(4, 60))
        nx = int(rng.integers(4, 60))
        mask = random_mask(rng, (ny, nx))
        patch = int(rng.integers(2, 9))
        stride = int(rng.integers(1, 6))
        want = dense_window_counts(mask, patch, stride)
        got = _kernels.window_counts(mask, patch, stride)
        assert got.shape == want.shape
        assert np.array_equal(got, want)


def test_window_counts_patch_larger_than_image():
    mask = np.ones((4, 4), dtype=np.uint8)
    out = _kernels.window_counts(mask, 8, 1)
    assert out.shape == (0, 0)


@pytest.mark.skipif(not HAVE_COMPILED, reason="extension not built")
def test_compiled_and_fallback_agree_bitwise():
    rng = np.random.default_rng(81)
    for _ in range(10):
        shape = tuple(int(rng.integers(4, 40)) for _ in range(3))
        mask = random_mask(rng, shape, p=float(rng.uniform(0.2, 0.7)))
        for r in (1, 2, 3):
            assert np.array_equal(_core.box_erode(mask, r), fallback.box_erode(mask, r))
            assert np.array_equal(_core.box_dilate(mask, r), fallback.box_dilate(mask, r))
        la, na = _core.label_components_26(mask)
        lb, nb = fallback.label_components_26(mask)
        assert na == nb
        assert np.array_equal(la, lb)
        sl = mask[shape[0] // 2]
        pa = _core.window_counts(sl, 4, 2)
        pb = fallback.window_counts(sl, 4, 2)
        assert np.array_equal(pa, pb)


def test_backend_env_selection():
    code = "from mzs import _kernels; print(_kernels.BACKEND)"
    for requested in ("fallback",) + (("compiled",) if HAVE_COMPILED else ()):
        env = dict(os.environ, MZS_KERNELS=requested)
        out = subprocess.run([sys.executable, "-c", code], env=env,
                             capture_output=True, text=True)
        assert out.returncode == 0, out.stderr
        assert out.stdout.strip() == requested
    env = dict(os.environ, MZS_KERNELS="nonsense")
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True)
    assert out.returncode != 0
