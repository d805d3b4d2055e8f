"""Positive-negative prompt softmax classification of montages.

The two-logit softmax is computed so that pn_softmax(a, b) and
pn_softmax(b, a) are exact floating-point complements: the smaller-side
probability is evaluated as 1/(1+exp(delta)) with delta <= 0, and the
larger side as its Sterbenz-exact complement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .embedder import EmbedderBackend, EmbeddingCache, cosine, embed_image, embed_text
from .imaging import resize_bilinear

DEFAULT_LOGIT_SCALE = 100.0


@dataclass(frozen=True)
class PromptPair:
    positive: str
    negative: str


def build_prompt_pair(disease_name: str, negative: str | None = None) -> PromptPair:
    """("X", "no X") by default; an explicit negative overrides."""
    if not disease_name or not disease_name.strip():
        raise ValueError("disease name must be non-empty")
    neg = negative if negative is not None else f"no {disease_name}"
    return PromptPair(positive=disease_name, negative=neg)


def pn_softmax(logit_pos: float, logit_neg: float) -> float:
    """exp(lp) / (exp(lp) + exp(ln)), overflow-safe and complement-exact."""
    lp = float(logit_pos)
    ln = float(logit_neg)
    if not (math.isfinite(lp) and math.isfinite(ln)):
        raise ValueError(f"logits must be finite, got ({logit_pos}, {logit_neg})")
    if lp >= ln:
        return 1.0 / (1.0 + math.exp(ln - lp))
    return 1.0 - 1.0 / (1.0 + math.exp(lp - ln))


@dataclass(frozen=True)
class Adapter:
    """Projection heads applied on top of a frozen backend embedding."""

    w_img: np.ndarray  # (d, d)
    w_txt: np.ndarray  # (d, d)
    model_id: str

    def project_image(self, vec: np.ndarray) -> np.ndarray:
        out = vec.astype(np.float64) @ self.w_img
        return out / np.linalg.norm(out)

    def project_text(self, vec: np.ndarray) -> np.ndarray:
        out = vec.astype(np.float64) @ self.w_txt
        return out / np.linalg.norm(out)


@dataclass(frozen=True)
class ZeroShotResult:
    study_id: str
    disease: str
    p_pos: float
    model_ids: tuple[str, ...] = field(default_factory=tuple)


def _montage_embedding(backend: EmbedderBackend, montage_image: np.ndarray,
                       cache: EmbeddingCache | None) -> np.ndarray:
    """Montage pixels are already windowed to [0,1]; only resize is needed."""
    img = resize_bilinear(np.asarray(montage_image, dtype=np.float32),
                          backend.resolution, backend.resolution)
    return cache.image(backend, img) if cache else embed_image(backend, img)


def classify(backend: EmbedderBackend, montage_image: np.ndarray,
             prompt_pair: PromptPair, study_id: str = "",
             logit_scale: float = DEFAULT_LOGIT_SCALE,
             adapter: Adapter | None = None,
             cache: EmbeddingCache | None = None) -> ZeroShotResult:
    e_img = _montage_embedding(backend, montage_image, cache)
    e_pos = cache.text(backend, prompt_pair.positive) if cache else embed_text(backend, prompt_pair.positive)
    e_neg = cache.text(backend, prompt_pair.negative) if cache else embed_text(backend, prompt_pair.negative)
    if adapter is not None:
        e_img = adapter.project_image(e_img)
        e_pos = adapter.project_text(e_pos)
        e_neg = adapter.project_text(e_neg)
        ids: tuple[str, ...] = (adapter.model_id,)
    else:
        ids = (backend.name,)
    p = pn_softmax(logit_scale * cosine(e_img, e_pos),
                   logit_scale * cosine(e_img, e_neg))
    return ZeroShotResult(study_id=study_id, disease=prompt_pair.positive,
                          p_pos=p, model_ids=ids)


def classify_ensemble(backend: EmbedderBackend, adapters: list[Adapter],
                      montage_image: np.ndarray, prompt_pair: PromptPair,
                      study_id: str = "",
                      logit_scale: float = DEFAULT_LOGIT_SCALE,
                      cache: EmbeddingCache | None = None) -> ZeroShotResult:
    """Arithmetic mean of member probabilities."""
    if not adapters:
        raise ValueError("ensemble needs at least one adapter")
    members = [
        classify(backend, montage_image, prompt_pair, study_id=study_id,
                 logit_scale=logit_scale, adapter=a, cache=cache)
        for a in adapters
    ]
    mean_p = float(np.mean([m.p_pos for m in members]))
    ids = tuple(a.model_id for a in adapters)
    return ZeroShotResult(study_id=study_id, disease=prompt_pair.positive,
                          p_pos=mean_p, model_ids=ids)
