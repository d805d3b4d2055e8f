"""Display windowing and bilinear resampling for 2D intensity grids.

Every embedding backend sees images prepared the same way: HU values are
mapped to [0, 1] through a fixed lung window, then the grid is resized to
the backend resolution with bilinear interpolation (half-pixel centers,
edge clamped). Resizing to the source size returns the input bit-exactly.
"""

from __future__ import annotations

import numpy as np

WINDOW_LO = -1024.0
WINDOW_HI = 200.0


def window_normalize(pixels: np.ndarray, lo: float = WINDOW_LO, hi: float = WINDOW_HI) -> np.ndarray:
    """Map intensities to [0,1] linearly over [lo, hi], clamping outside."""
    if hi <= lo:
        raise ValueError(f"window must satisfy hi > lo, got [{lo}, {hi}]")
    out = (np.asarray(pixels, dtype=np.float32) - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


def _sample_axis(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source indices and weights for one axis, half-pixel convention."""
    # src = (dst + 0.5) * n_src / n_dst - 0.5, clamped to the valid range
    pos = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    i0 = np.minimum(i0, n_src - 2) if n_src > 1 else np.zeros_like(i0)
    frac = pos - i0
    return i0, i0 + 1 if n_src > 1 else i0, frac


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2D float32 grid; identity when the size already matches."""
    img = np.asarray(pixels, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D grid, got shape {img.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    y0, y1, fy = _sample_axis(h, out_h)
    x0, x1, fx = _sample_axis(w, out_w)
    fy = fy[:, None].astype(np.float64)
    fx = fx[None, :].astype(np.float64)
    src = img.astype(np.float64)
    top = src[np.ix_(y0, x0)] * (1.0 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1.0 - fx) + src[np.ix_(y1, x1)] * fx
    return (top * (1.0 - fy) + bot * fy).astype(np.float32)
