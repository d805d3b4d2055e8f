"""End-to-end orchestration: extract montages, zero-shot scoring, DAPT,
and evaluation, with content-digest provenance on every artifact.

Artifacts under out_dir:
    montages/<mode>/<study>.png|.json      (extract)
    zeroshot_<mode>[_<split>].jsonl|.json  (zero-shot scores and metrics)
    checkpoints/step*.ckpt, dapt_log.jsonl, dapt_summary.json
    eval_report.json

Montage artifacts embed the extraction digest; checkpoints embed the DAPT
digest (a superset of the extraction digest fields). Consumers refuse
artifacts whose digest differs from the active config. Classification
always reads pixels back from the persisted 8-bit PNG so results are a pure
function of the stored artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import dapt as dapt_mod
from .dapt import DaptConfig, PairDataset, load_checkpoint, lr_search, save_checkpoint, select_top_checkpoints, split_pairs, train
from .embedder import DEFAULT_DIM, DEFAULT_REF_SEED, DEFAULT_RESOLUTION, EmbeddingCache, ReferenceEmbedder, RemoteBackend
from .lungseg import segment_lungs
from .metrics import auprc, auroc, f1_at
from .patches import assemble_montage, enumerate_candidates, save_montage, score_patches, select_random, select_top
from .phantom import StudyManifest, StudyRecord, load_manifest
from .reports import extract_text, parse_report
from .volume import load_volume
from .zeroshot import Adapter, build_prompt_pair, classify, classify_ensemble

ALLOWED_N = (4, 8, 16)
ALLOWED_F = (0.2, 0.5, 0.8)


@dataclass(frozen=True)
class PipelineConfig:
    manifest_path: str
    cache_dir: str
    out_dir: str
    montage_n: int = 4
    filter_threshold: float = 0.5
    patch_px: int = 64
    stride: int = 32
    backend: str = "reference"           # reference | remote
    backend_seed: int = DEFAULT_REF_SEED
    backend_dim: int = DEFAULT_DIM
    backend_resolution: int = DEFAULT_RESOLUTION
    backend_url: str = ""
    montage_mode: str = "retrieved"      # random | retrieved
    text_mode: str = "impression"        # impression | lung_sections
    diseases: tuple[str, ...] = ("interstitial lung disease",)
    logit_scale: float = 100.0
    seed: int = 0
    eval_split: str = "test"
    f1_threshold: float = 0.5
    workers: int = 1
    dapt_lr: float | None = None         # None -> learning-rate grid search
    dapt_batch_size: int = 64
    dapt_max_epochs: int = 10
    dapt_patience: int = 1000
    dapt_interval: int = 100
    dapt_holdout: float = 0.10
    ensemble_size: int = 5

    def validate_restricted(self) -> None:
        """Montage size and filter threshold restrictions (CLI default)."""
        if self.montage_n not in ALLOWED_N:
            raise ValueError(f"montage_n must be one of {ALLOWED_N} (or pass --unsafe-config)")
        if self.filter_threshold not in ALLOWED_F:
            raise ValueError(f"filter_threshold must be one of {ALLOWED_F} (or pass --unsafe-config)")

    def make_backend(self):
        if self.backend == "reference":
            return ReferenceEmbedder(seed=self.backend_seed, dim=self.backend_dim,
                                     resolution=self.backend_resolution)
        if self.backend == "remote":
            if not self.backend_url:
                raise ValueError("remote backend requires backend_url")
            return RemoteBackend(self.backend_url, dim=self.backend_dim,
                                 resolution=self.backend_resolution)
        raise ValueError(f"unknown backend {self.backend!r}")

    def _digest_of(self, fields: dict) -> str:
        return hashlib.sha256(json.dumps(fields, sort_keys=True).encode()).hexdigest()[:16]

    def digest_extract(self) -> str:
        """Identity of montage artifacts: everything that shapes their bytes."""
        return self._digest_of({
            "montage_n": self.montage_n,
            "filter_threshold": self.filter_threshold,
            "patch_px": self.patch_px,
            "stride": self.stride,
            "backend": [self.backend, self.backend_seed, self.backend_dim,
                        self.backend_resolution, self.backend_url],
            "montage_mode": self.montage_mode,
            "retrieval_prompt": self.diseases[0],
            "logit_scale": self.logit_scale,
            "seed": self.seed,
        })

    def digest_dapt(self) -> str:
        """Identity of trained checkpoints: montage identity + training knobs."""
        return self._digest_of({
            "extract": self.digest_extract(),
            "text_mode": self.text_mode,
            "lr": self.dapt_lr,
            "batch": self.dapt_batch_size,
            "epochs": self.dapt_max_epochs,
            "patience": self.dapt_patience,
            "interval": self.dapt_interval,
            "holdout": self.dapt_holdout,
            "seed": self.seed,
        })


def config_from_json(path: str | Path) -> PipelineConfig:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if "diseases" in raw:
        raw["diseases"] = tuple(raw["diseases"])
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return PipelineConfig(**raw)


def _study_seed(master_seed: int, study_id: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{study_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def montage_paths(config: PipelineConfig, mode: str, study_id: str) -> tuple[Path, Path]:
    base = Path(config.out_dir) / "montages" / mode
    return base / f"{study_id}.png", base / f"{study_id}.json"


def load_montage_pixels(png_path: str | Path) -> np.ndarray:
    """Persisted montage back to float32 [0,1]."""
    img = Image.open(png_path)
    return np.asarray(img, dtype=np.float32) / 255.0


@dataclass
class ExtractSummary:
    mode: str
    digest: str
    ok: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)


def run_extract(config: PipelineConfig, force: bool = False) -> ExtractSummary:
    """Segment, enumerate, select, and persist one montage per study."""
    manifest = load_manifest(config.manifest_path)
    backend = config.make_backend()
    cache = EmbeddingCache(config.cache_dir)
    digest = config.digest_extract()
    mode = config.montage_mode
    pair = build_prompt_pair(config.diseases[0])
    summary = ExtractSummary(mode=mode, digest=digest)
    k = config.montage_n * config.montage_n

    def one(rec: StudyRecord) -> tuple[str, str, str]:
        png_path, meta_path = montage_paths(config, mode, rec.study_id)
        if not force and meta_path.exists() and png_path.exists():
            try:
                meta = json.loads(meta_path.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                meta = {}
            if meta.get("config_digest") == digest:
                return rec.study_id, "skipped", ""
        try:
            vol = load_volume(rec.volume_path)
            seg = segment_lungs(vol)
            if seg.degenerate:
                raise RuntimeError("lung segmentation found no candidate component")
            cands = enumerate_candidates(vol, seg.mask, config.patch_px,
                                         config.stride, config.filter_threshold,
                                         study_id=rec.study_id)
            scores = None
            if mode == "retrieved":
                scored = score_patches(backend, vol, cands, pair,
                                       logit_scale=config.logit_scale, cache=cache)
                chosen = select_top(scored, k)
                by_key = {(s.candidate.z, s.candidate.rect): s.p_pos for s in scored}
                scores = [by_key[(c.z, c.rect)] for c in chosen]
            elif mode == "random":
                chosen = select_random(cands, k, _study_seed(config.seed, rec.study_id))
            else:
                raise ValueError(f"unknown montage mode {mode!r}")
            montage = assemble_montage(vol, chosen, config.montage_n, config.patch_px)
            png_path.parent.mkdir(parents=True, exist_ok=True)
            save_montage(montage, png_path, meta_path, rec.study_id, mode,
                         digest, scores=scores)
            return rec.study_id, "ok", ""
        except Exception as exc:
            return rec.study_id, "failed", str(exc)

    if config.workers > 1 and backend.concurrent_safe:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(one, manifest.records))
    else:
        outcomes = [one(rec) for rec in manifest.records]
    for study_id, status, message in outcomes:
        if status == "ok":
            summary.ok.append(study_id)
        elif status == "skipped":
            summary.skipped.append(study_id)
        else:
            summary.failed[study_id] = message
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"extract_summary_{mode}.json").write_text(
        json.dumps(dataclasses.asdict(summary), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    return summary


def _records_for_split(manifest: StudyManifest, split: str | None) -> list[StudyRecord]:
    if split is None or split == "all":
        return list(manifest.records)
    return manifest.by_split(split)


def _require_montage(config: PipelineConfig, mode: str, study_id: str) -> tuple[Path, dict]:
    png_path, meta_path = montage_paths(config, mode, study_id)
    if not png_path.exists() or not meta_path.exists():
        raise FileNotFoundError(f"montage missing for study {study_id} (mode {mode}); run extract")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    expected = config.digest_extract()
    if meta.get("config_digest") != expected:
        raise RuntimeError(
            f"montage for {study_id} was built under digest {meta.get('config_digest')}, "
            f"current config digest is {expected}; refusing to mix artifacts")
    return png_path, meta


def _score_montages(config: PipelineConfig, records: list[StudyRecord],
                    disease: str, adapters: list[Adapter] | None = None
                    ) -> list[dict]:
    backend = config.make_backend()
    cache = EmbeddingCache(config.cache_dir)
    pair = build_prompt_pair(disease)
    rows = []
    for rec in records:
        png_path, _ = _require_montage(config, config.montage_mode, rec.study_id)
        pixels = load_montage_pixels(png_path)
        if adapters:
            result = classify_ensemble(backend, adapters, pixels, pair,
                                       study_id=rec.study_id,
                                       logit_scale=config.logit_scale, cache=cache)
        else:
            result = classify(backend, pixels, pair, study_id=rec.study_id,
                              logit_scale=config.logit_scale, cache=cache)
        rows.append({
            "study_id": rec.study_id,
            "disease": disease,
            "p_pos": result.p_pos,
            "model_ids": list(result.model_ids),
            "label": rec.label,
        })
    return rows


def _metric_block(rows: list[dict], threshold: float) -> dict:
    labels = [r["label"] for r in rows]
    if any(lab is None for lab in labels):
        return {"note": "labels missing; metrics skipped", "n": len(rows)}
    scores = [r["p_pos"] for r in rows]
    block = {"n": len(rows), "f1_threshold": threshold}
    try:
        block["auroc"] = auroc(scores, labels)
        block["auprc"] = auprc(scores, labels)
    except ValueError as exc:
        block["note"] = f"rank metrics unavailable: {exc}"
    block["f1"] = f1_at(scores, labels, threshold)
    return block


def run_zeroshot(config: PipelineConfig, split: str | None = None) -> dict:
    """Score montages with the bare backend; metrics when labels exist."""
    manifest = load_manifest(config.manifest_path)
    records = _records_for_split(manifest, split)
    if not records:
        raise ValueError(f"no studies in split {split!r}")
    report: dict = {
        "config_digest": config.digest_extract(),
        "mode": config.montage_mode,
        "split": split or "all",
        "diseases": {},
    }
    tag = f"{config.montage_mode}_{split or 'all'}"
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for disease in config.diseases:
        rows = _score_montages(config, records, disease)
        for r in rows:
            lines.append(json.dumps({**r, "config_digest": report["config_digest"]},
                                    sort_keys=True))
        report["diseases"][disease] = {
            "metrics": _metric_block(rows, config.f1_threshold),
            "scores": {r["study_id"]: r["p_pos"] for r in rows},
        }
    (out / f"zeroshot_{tag}.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / f"zeroshot_{tag}.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


def _build_pairs(config: PipelineConfig, records: list[StudyRecord]):
    """(montage embedding, text embedding) rows for DAPT; missing text or
    missing montages exclude the study and are reported."""
    backend = config.make_backend()
    cache = EmbeddingCache(config.cache_dir)
    from .imaging import resize_bilinear
    img_rows, txt_rows, ids, excluded = [], [], [], {}
    for rec in records:
        try:
            png_path, _ = _require_montage(config, config.montage_mode, rec.study_id)
        except (FileNotFoundError, RuntimeError) as exc:
            excluded[rec.study_id] = str(exc)
            continue
        sections = parse_report(Path(rec.report_path).read_text(encoding="utf-8"))
        extracted = extract_text(sections, config.text_mode)
        if extracted.missing:
            excluded[rec.study_id] = f"no {config.text_mode} text in report"
            continue
        pixels = load_montage_pixels(png_path)
        prepared = resize_bilinear(pixels, backend.resolution, backend.resolution)
        img_rows.append(cache.image(backend, prepared))
        txt_rows.append(cache.text(backend, extracted.text))
        ids.append(rec.study_id)
    if not img_rows:
        raise dapt_mod.TrainingError("no usable (montage, text) pairs")
    return np.stack(img_rows), np.stack(txt_rows), ids, excluded


def run_dapt(config: PipelineConfig) -> dict:
    """Build pairs from the pretrain split, search the LR grid (unless an lr
    is pinned), train, and persist checkpoints plus logs.

    Validation pairs come from the manifest's val split when it has one
    (stratified by construction); otherwise a study-level holdout is carved
    out of the training pairs at the configured fraction."""
    manifest = load_manifest(config.manifest_path)
    records = manifest.by_split("pretrain")
    img, txt, ids, excluded = _build_pairs(config, records)
    if len(ids) < 2 * config.dapt_batch_size:
        raise dapt_mod.TrainingError(
            f"insufficient pairs: {len(ids)} < 2 x batch size {config.dapt_batch_size}")
    digest = config.digest_dapt()
    dcfg = DaptConfig(
        lr=config.dapt_lr if config.dapt_lr is not None else 1e-4,
        batch_size=config.dapt_batch_size, max_epochs=config.dapt_max_epochs,
        patience_steps=config.dapt_patience, checkpoint_interval=config.dapt_interval,
        holdout_fraction=config.dapt_holdout, seed=config.seed,
        text_mode=config.text_mode, montage_mode=config.montage_mode,
        dim=config.backend_dim, config_digest=digest)
    val_records = manifest.by_split("val")
    if val_records:
        v_img, v_txt, v_ids, v_excluded = _build_pairs(config, val_records)
        for sid, why in v_excluded.items():
            excluded[sid] = why
        train_set = PairDataset(img, txt, ids, split="train")
        holdout_set = PairDataset(v_img, v_txt, v_ids, split="holdout")
    else:
        train_set, holdout_set = split_pairs(img, txt, ids, dcfg.holdout_fraction,
                                             dcfg.seed)
    if config.dapt_lr is None:
        best_lr, losses, results = lr_search(dcfg, train_set, holdout_set)
        result = results[best_lr]
        lr_table = {f"{lr:.2e}": losses.get(lr) for lr in dapt_mod.LR_GRID}
    else:
        best_lr = config.dapt_lr
        result = train(dcfg, train_set, holdout_set)
        lr_table = {f"{best_lr:.2e}": result.best.val_loss}

    out = Path(config.out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for old in ckpt_dir.glob("step*.ckpt"):
        old.unlink()
    for ckpt in result.checkpoints:
        save_checkpoint(ckpt_dir / f"step{ckpt.step:06d}.ckpt", ckpt)
    log_lines = [json.dumps(row, sort_keys=True) for row in result.log_rows]
    (out / "dapt_log.jsonl").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    summary = {
        "config_digest": digest,
        "best_lr": best_lr,
        "lr_losses": lr_table,
        "best_step": result.best.step,
        "best_val_loss": result.best.val_loss,
        "n_pairs": len(ids),
        "n_train_pairs": len(train_set),
        "n_holdout_pairs": len(holdout_set),
        "excluded": excluded,
        "stopped_early": result.stopped_early,
        "n_checkpoints": len(result.checkpoints),
    }
    (out / "dapt_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def load_checkpoints(config: PipelineConfig) -> list:
    ckpt_dir = Path(config.out_dir) / "checkpoints"
    paths = sorted(ckpt_dir.glob("step*.ckpt"))
    if not paths:
        raise FileNotFoundError(f"no checkpoints under {ckpt_dir}; run dapt")
    ckpts = [load_checkpoint(p) for p in paths]
    digest = config.digest_dapt()
    for c in ckpts:
        if c.config_digest != digest:
            raise RuntimeError(
                f"checkpoint digest {c.config_digest} differs from config digest "
                f"{digest}; refusing to mix artifacts")
    return ckpts


def run_eval(config: PipelineConfig, use_ensemble: bool = True) -> dict:
    """Adapted (single or ensemble) vs baseline classification on a split."""
    manifest = load_manifest(config.manifest_path)
    records = _records_for_split(manifest, config.eval_split)
    if not records:
        raise ValueError(f"no studies in split {config.eval_split!r}")
    ckpts = load_checkpoints(config)
    n = config.ensemble_size if use_ensemble else 1
    chosen, short = select_top_checkpoints(ckpts, n)
    adapters = [Adapter(w_img=c.w_img, w_txt=c.w_txt, model_id=c.model_id)
                for c in chosen]
    report: dict = {
        "config_digest": config.digest_dapt(),
        "split": config.eval_split,
        "ensemble_size": len(adapters),
        "ensemble_truncated": short,
        "mode": config.montage_mode,
        "diseases": {},
    }
    for disease in config.diseases:
        base_rows = _score_montages(config, records, disease)
        adapted_rows = _score_montages(config, records, disease, adapters=adapters)
        report["diseases"][disease] = {
            "baseline": {
                "metrics": _metric_block(base_rows, config.f1_threshold),
                "scores": {r["study_id"]: r["p_pos"] for r in base_rows},
            },
            "adapted": {
                "metrics": _metric_block(adapted_rows, config.f1_threshold),
                "scores": {r["study_id"]: r["p_pos"] for r in adapted_rows},
            },
        }
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report
