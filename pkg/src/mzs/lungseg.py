"""Binary lung mask extraction from an intensity volume.

Pipeline: threshold below -400 HU, drop components that touch the in-plane
(x/y) boundary (exterior air), keep the two largest 26-connected components,
then close and open with a radius-1 box. Morphology uses zero extension
outside the volume; closing is computed on a radius-padded copy so that
``m <= close(m)`` holds up to the boundary. The final mask is intersected
with the boundary-filtered threshold mask, so segmentation never includes a
voxel the threshold rejected.

All functions are pure; callers may parallelize across volumes freely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .volume import HuVolume

THRESHOLD_HU = -400
MORPH_RADIUS = 1
KEEP_COMPONENTS = 2

_MORPH_OPS = ("erode", "dilate", "open", "close")


def threshold_mask(vol: HuVolume, hu_cutoff: int = THRESHOLD_HU) -> np.ndarray:
    """Mask of voxels strictly below the cutoff, as uint8 0/1."""
    return (vol.voxels < hu_cutoff).astype(np.uint8)


def morph(mask: np.ndarray, op: str, radius: int) -> np.ndarray:
    """Binary morphology with a box structuring element of side 2*radius+1.

    open = erode then dilate; close = dilate then erode. Outside the volume
    counts as background, except that close pads by the radius first so it
    stays extensive at the boundary.
    """
    if op not in _MORPH_OPS:
        raise ValueError(f"op must be one of {_MORPH_OPS}, got {op!r}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    if op == "erode":
        return _kernels.box_erode(m, radius)
    if op == "dilate":
        return _kernels.box_dilate(m, radius)
    if op == "open":
        return _kernels.box_dilate(_kernels.box_erode(m, radius), radius)
    r = radius
    padded = np.pad(m, r, constant_values=0)
    closed = _kernels.box_erode(_kernels.box_dilate(padded, r), r)
    return np.ascontiguousarray(closed[r:-r, r:-r, r:-r])


def _drop_boundary_components(mask: np.ndarray) -> np.ndarray:
    """Remove 26-connected components that touch the x/y boundary."""
    labels, n = _kernels.label_components_26(mask)
    if n == 0:
        return mask.copy()
    touching = np.zeros(n + 1, dtype=bool)
    for face in (labels[:, 0, :], labels[:, -1, :], labels[:, :, 0], labels[:, :, -1]):
        touching[np.unique(face)] = True
    touching[0] = False
    keep = ~touching[labels]
    return (mask.astype(bool) & keep).astype(np.uint8)


def _keep_largest(mask: np.ndarray, count: int) -> np.ndarray:
    labels, n = _kernels.label_components_26(mask)
    if n == 0:
        return np.zeros_like(mask)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    # stable under ties: larger size first, then earlier label
    order = sorted(range(1, n + 1), key=lambda i: (-sizes[i], i))
    chosen = np.zeros(n + 1, dtype=bool)
    for i in order[:count]:
        chosen[i] = True
    return chosen[labels].astype(np.uint8)


@dataclass(frozen=True)
class LungSegmentation:
    """Result of segment_lungs; degenerate means no lung candidate was found."""

    mask: np.ndarray  # uint8, same dims as the source volume
    degenerate: bool


def segment_lungs(vol: HuVolume) -> LungSegmentation:
    """Threshold, strip exterior air, keep two largest components, smooth."""
    thresholded = threshold_mask(vol)
    interior = _drop_boundary_components(thresholded)
    _, n = _kernels.label_components_26(interior)
    if n == 0:
        return LungSegmentation(mask=np.zeros_like(interior), degenerate=True)
    lungs = _keep_largest(interior, KEEP_COMPONENTS)
    smoothed = morph(morph(lungs, "close", MORPH_RADIUS), "open", MORPH_RADIUS)
    final = (smoothed.astype(bool) & interior.astype(bool)).astype(np.uint8)
    return LungSegmentation(mask=final, degenerate=False)


def lung_fraction(mask: np.ndarray, z: int, rect: tuple[int, int, int, int]) -> float:
    """Fraction of set mask bits inside rect=(y0, x0, h, w) at plane z."""
    nz, ny, nx = mask.shape
    y0, x0, h, w = rect
    if not 0 <= z < nz:
        raise IndexError(f"z={z} out of range")
    if y0 < 0 or x0 < 0 or h < 1 or w < 1 or y0 + h > ny or x0 + w > nx:
        raise IndexError(f"rect {rect} out of slice bounds ({ny}, {nx})")
    window = mask[z, y0:y0 + h, x0:x0 + w]
    return float(np.count_nonzero(window)) / float(h * w)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap 2|A∩B|/(|A|+|B|); 1.0 when both masks are empty."""
    a = a.astype(bool)
    b = b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total
