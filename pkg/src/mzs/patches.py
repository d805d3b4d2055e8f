"""Patch candidacy, ranking, and montage assembly.

Candidates are axial sliding windows whose lung-mask coverage meets the
filter threshold. Selection is either seeded-uniform ("random" mode) or by
descending positive-prompt probability ("retrieved" mode). A montage packs
K = N*N window-normalized patches row major: retrieved montages in
descending-score order, random montages in sample order.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .embedder import EmbedderBackend, EmbeddingCache, cosine, embed_image, embed_text, prepare_image
from .imaging import resize_bilinear, window_normalize
from .volume import HuVolume
from .zeroshot import PromptPair, pn_softmax


@dataclass(frozen=True)
class PatchCandidate:
    study_id: str
    z: int
    rect: tuple[int, int, int, int]  # y0, x0, h, w
    lung_fraction: float


@dataclass(frozen=True)
class ScoredPatch:
    candidate: PatchCandidate
    p_pos: float


@dataclass(frozen=True)
class Montage:
    n: int
    cell_px: int
    image: np.ndarray  # (n*cell_px, n*cell_px) float32 in [0,1]
    patches: tuple[PatchCandidate, ...]  # row-major; cell (r,c) = index r*n+c


class SelectionError(ValueError):
    """Raised when fewer candidates exist than requested."""

    def __init__(self, requested: int, available: int) -> None:
        self.requested = requested
        self.available = available
        super().__init__(
            f"requested {requested} patches but only {available} candidates "
            f"(short by {requested - available})")


def enumerate_candidates(vol: HuVolume, mask: np.ndarray, patch_px: int,
                         stride: int, filter_threshold: float,
                         study_id: str = "") -> list[PatchCandidate]:
    """All windows with lung coverage >= threshold, ordered by (z, y0, x0)."""
    if patch_px < 8:
        raise ValueError(f"patch_px must be >= 8, got {patch_px}")
    if not 1 <= stride <= patch_px:
        raise ValueError(f"stride must be in [1, patch_px], got {stride}")
    if not 0.0 <= filter_threshold <= 1.0:
        raise ValueError(f"filter_threshold must be in [0,1], got {filter_threshold}")
    if mask.shape != vol.voxels.shape:
        raise ValueError("mask dims differ from volume dims")
    nz, ny, nx = mask.shape
    if ny < patch_px or nx < patch_px:
        return []
    area = float(patch_px * patch_px)
    out: list[PatchCandidate] = []
    mask_u8 = np.ascontiguousarray(mask, dtype=np.uint8)
    for z in range(nz):
        counts = _kernels.window_counts(mask_u8[z], patch_px, stride)
        fractions = counts / area
        ys, xs = np.nonzero(fractions >= filter_threshold)
        for yi, xi in zip(ys.tolist(), xs.tolist()):
            out.append(PatchCandidate(
                study_id=study_id, z=z,
                rect=(yi * stride, xi * stride, patch_px, patch_px),
                lung_fraction=float(fractions[yi, xi])))
    return out


def select_random(cands: list[PatchCandidate], k: int, seed: int) -> list[PatchCandidate]:
    """Uniform sample without replacement, in drawn order."""
    if k > len(cands):
        raise SelectionError(k, len(cands))
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(cands), size=k, replace=False)
    return [cands[i] for i in idx.tolist()]


def extract_patch(vol: HuVolume, cand: PatchCandidate) -> np.ndarray:
    y0, x0, h, w = cand.rect
    return np.asarray(vol.voxels[cand.z, y0:y0 + h, x0:x0 + w])


def score_patches(backend: EmbedderBackend, vol: HuVolume,
                  cands: list[PatchCandidate], prompt_pair: PromptPair,
                  logit_scale: float = 100.0,
                  cache: EmbeddingCache | None = None) -> list[ScoredPatch]:
    """Positive-prompt probability per candidate; input order preserved."""
    e_pos = (cache.text(backend, prompt_pair.positive) if cache
             else embed_text(backend, prompt_pair.positive))
    e_neg = (cache.text(backend, prompt_pair.negative) if cache
             else embed_text(backend, prompt_pair.negative))
    out: list[ScoredPatch] = []
    for cand in cands:
        try:
            img = prepare_image(extract_patch(vol, cand), backend.resolution)
            e_img = cache.image(backend, img) if cache else embed_image(backend, img)
            p = pn_softmax(logit_scale * cosine(e_img, e_pos),
                           logit_scale * cosine(e_img, e_neg))
        except Exception as exc:
            raise RuntimeError(
                f"scoring failed for study {cand.study_id!r} z={cand.z} "
                f"rect={cand.rect}: {exc}") from exc
        out.append(ScoredPatch(candidate=cand, p_pos=p))
    return out


def select_top(scored: list[ScoredPatch], k: int) -> list[PatchCandidate]:
    """k highest p_pos, descending; ties by (z, y0, x0) ascending."""
    if k > len(scored):
        raise SelectionError(k, len(scored))
    ranked = sorted(scored, key=lambda s: (-s.p_pos, s.candidate.z, s.candidate.rect))
    return [s.candidate for s in ranked[:k]]


def assemble_montage(vol: HuVolume, patches: list[PatchCandidate], n: int,
                     cell_px: int) -> Montage:
    """Window-normalize each patch, resize to the cell size, pack row-major."""
    if len(patches) != n * n:
        raise ValueError(f"montage of n={n} needs {n * n} patches, got {len(patches)}")
    canvas = np.zeros((n * cell_px, n * cell_px), dtype=np.float32)
    for i, cand in enumerate(patches):
        cell = resize_bilinear(window_normalize(extract_patch(vol, cand)),
                               cell_px, cell_px)
        r, c = divmod(i, n)
        canvas[r * cell_px:(r + 1) * cell_px, c * cell_px:(c + 1) * cell_px] = cell
    return Montage(n=n, cell_px=cell_px, image=canvas, patches=tuple(patches))


def montage_to_png_bytes(montage: Montage) -> bytes:
    """8-bit grayscale PNG encoding of the montage image."""
    pixels = np.clip(np.rint(montage.image * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(pixels, mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def save_montage(montage: Montage, png_path: str | Path, meta_path: str | Path,
                 study_id: str, mode: str, config_digest: str,
                 scores: list[float] | None = None) -> dict:
    """Write the PNG and its JSON sidecar; returns the sidecar record."""
    png = montage_to_png_bytes(montage)
    Path(png_path).write_bytes(png)
    meta = {
        "study_id": study_id,
        "mode": mode,
        "grid_n": montage.n,
        "cell_px": montage.cell_px,
        "config_digest": config_digest,
        "png_sha256": hashlib.sha256(png).hexdigest(),
        "patches": [
            {"z": p.z, "rect": list(p.rect), "lung_fraction": p.lung_fraction}
            for p in montage.patches
        ],
    }
    if scores is not None:
        meta["scores"] = scores
    Path(meta_path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                               encoding="utf-8")
    return meta
