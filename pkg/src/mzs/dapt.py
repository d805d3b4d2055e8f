"""Contrastive adaptation of projection heads over frozen embeddings.

Trains two d x d matrices (image, text), initialized to identity, plus a
learnable scalar log temperature, with symmetric InfoNCE over (montage
embedding, report-text embedding) pairs. Gradients are analytic; the
optimizer is Adam. The schedule is checkpoint-every-100-steps with early
stopping on holdout loss (patience in steps) and a five-point learning-rate
grid search.

All math runs in float64 for determinism; checkpoints store float32.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

LR_GRID = (1e-5, 3.16e-5, 1e-4, 3.16e-4, 1e-3)
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
INIT_LOG_T = math.log(1.0 / 0.07)
LOSS_EXPLOSION = 1e6


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DaptConfig:
    lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 10
    patience_steps: int = 1000
    checkpoint_interval: int = 100
    holdout_fraction: float = 0.10
    seed: int = 0
    text_mode: str = "impression"        # impression | lung_sections
    montage_mode: str = "retrieved"      # random | retrieved
    dim: int = 512
    config_digest: str = ""

    def __post_init__(self) -> None:
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError(f"holdout_fraction must be in (0,1), got {self.holdout_fraction}")
        if self.patience_steps < 1 or self.checkpoint_interval < 1:
            raise ValueError("patience and checkpoint interval must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass
class PairDataset:
    img: np.ndarray          # (n, d) frozen montage embeddings
    txt: np.ndarray          # (n, d) frozen text embeddings
    study_ids: list[str]
    split: str = "train"     # train | holdout

    def __post_init__(self) -> None:
        if self.img.ndim != 2 or self.img.shape != self.txt.shape:
            raise ValueError(f"img/txt shape mismatch: {self.img.shape} vs {self.txt.shape}")
        if len(self.study_ids) != self.img.shape[0]:
            raise ValueError("study_ids length differs from pair count")

    def __len__(self) -> int:
        return self.img.shape[0]


def split_pairs(img: np.ndarray, txt: np.ndarray, study_ids: list[str],
                holdout_fraction: float, seed: int) -> tuple[PairDataset, PairDataset]:
    """Study-level split: every pair of a held-out study goes to holdout."""
    unique = sorted(set(study_ids))
    if len(unique) < 3:
        raise TrainingError(f"need >= 3 studies to split, got {len(unique)}")
    rng = np.random.default_rng([seed, 0xD5])
    order = [unique[i] for i in rng.permutation(len(unique))]
    n_hold = max(1, round(len(unique) * holdout_fraction))
    if n_hold >= len(unique) - 1:
        n_hold = len(unique) - 2
    held = set(order[:n_hold])
    hold_idx = [i for i, s in enumerate(study_ids) if s in held]
    train_idx = [i for i, s in enumerate(study_ids) if s not in held]
    train = PairDataset(img[train_idx], txt[train_idx],
                        [study_ids[i] for i in train_idx], split="train")
    hold = PairDataset(img[hold_idx], txt[hold_idx],
                       [study_ids[i] for i in hold_idx], split="holdout")
    return train, hold


def _normalize_rows(x: np.ndarray, side: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    bad = ~np.isfinite(norms) | (norms == 0.0)
    if bad.any():
        idx = int(np.nonzero(bad)[0][0])
        raise TrainingError(f"non-finite {side} projection at pair index {idx}")
    return x / norms[:, None], norms


def infonce_forward(img: np.ndarray, txt: np.ndarray, w_img: np.ndarray,
                    w_txt: np.ndarray, log_t: float):
    """Loss plus intermediates needed for the backward pass."""
    u_raw = img @ w_img
    v_raw = txt @ w_txt
    u_hat, u_norm = _normalize_rows(u_raw, "image")
    v_hat, v_norm = _normalize_rows(v_raw, "text")
    t = math.exp(log_t)
    s = t * (u_hat @ v_hat.T)
    if not np.all(np.isfinite(s)):
        i, j = np.argwhere(~np.isfinite(s))[0]
        raise TrainingError(f"non-finite similarity at pair index {int(i)},{int(j)}")
    b = s.shape[0]
    row_max = s.max(axis=1)
    col_max = s.max(axis=0)
    lse_row = np.log(np.exp(s - row_max[:, None]).sum(axis=1)) + row_max
    lse_col = np.log(np.exp(s - col_max[None, :]).sum(axis=0)) + col_max
    diag = np.diag(s)
    loss = float(((lse_row - diag).mean() + (lse_col - diag).mean()) / 2.0)
    if not math.isfinite(loss):
        raise TrainingError("non-finite loss")
    return loss, (u_raw, v_raw, u_hat, v_hat, u_norm, v_norm, s, t, b)


def infonce_loss(img: np.ndarray, txt: np.ndarray, log_t: float,
                 w_img: np.ndarray | None = None,
                 w_txt: np.ndarray | None = None) -> float:
    """Symmetric InfoNCE against the diagonal; B=1 gives exactly 0."""
    img = np.asarray(img, dtype=np.float64)
    txt = np.asarray(txt, dtype=np.float64)
    if img.ndim != 2 or img.shape != txt.shape or img.shape[0] < 1:
        raise ValueError(f"need matching B x d batches, got {img.shape} vs {txt.shape}")
    d = img.shape[1]
    w_img = np.eye(d) if w_img is None else w_img
    w_txt = np.eye(d) if w_txt is None else w_txt
    loss, _ = infonce_forward(img, txt, w_img, w_txt, log_t)
    return loss


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=1)[:, None])
    return e / e.sum(axis=1)[:, None]


def infonce_grads(img: np.ndarray, txt: np.ndarray, w_img: np.ndarray,
                  w_txt: np.ndarray, log_t: float):
    """Analytic gradients of infonce_loss w.r.t. w_img, w_txt, log_t."""
    loss, (u_raw, v_raw, u_hat, v_hat, u_norm, v_norm, s, t, b) = \
        infonce_forward(img, txt, w_img, w_txt, log_t)
    p_row = _softmax_rows(s)
    p_col = _softmax_rows(s.T).T
    eye = np.eye(b)
    dl_ds = (p_row - eye + p_col - eye) / (2.0 * b)
    dl_dlogt = float((dl_ds * s).sum())  # dS/dlog_t = S
    dl_du_hat = t * (dl_ds @ v_hat)
    dl_dv_hat = t * (dl_ds.T @ u_hat)
    # normalize backward: u = x / |x|;  dL/dx = (dL/du - u (u . dL/du)) / |x|
    dl_du_raw = (dl_du_hat - u_hat * (u_hat * dl_du_hat).sum(axis=1)[:, None]) / u_norm[:, None]
    dl_dv_raw = (dl_dv_hat - v_hat * (v_hat * dl_dv_hat).sum(axis=1)[:, None]) / v_norm[:, None]
    dl_dw_img = img.T @ dl_du_raw
    dl_dw_txt = txt.T @ dl_dv_raw
    return loss, dl_dw_img, dl_dw_txt, dl_dlogt


@dataclass
class TrainState:
    w_img: np.ndarray
    w_txt: np.ndarray
    log_t: float
    step: int = 0
    m: dict = field(default_factory=dict)   # Adam first moments
    v: dict = field(default_factory=dict)   # Adam second moments

    @classmethod
    def initial(cls, dim: int) -> "TrainState":
        zeros = lambda: {"w_img": np.zeros((dim, dim)), "w_txt": np.zeros((dim, dim)),
                         "log_t": 0.0}
        return cls(w_img=np.eye(dim), w_txt=np.eye(dim), log_t=INIT_LOG_T,
                   m=zeros(), v=zeros())


def _adam_update(param, grad, m, v, step, lr):
    m_new = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
    v_new = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (grad * grad if isinstance(grad, np.ndarray) else grad ** 2)
    m_hat = m_new / (1.0 - ADAM_BETA1 ** step)
    v_hat = v_new / (1.0 - ADAM_BETA2 ** step)
    if isinstance(param, np.ndarray):
        return param - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS), m_new, v_new
    return param - lr * m_hat / (math.sqrt(v_hat) + ADAM_EPS), m_new, v_new


def train_step(state: TrainState, batch_img: np.ndarray, batch_txt: np.ndarray,
               lr: float) -> float:
    """One Adam update in place; returns the batch loss."""
    loss, g_wi, g_wt, g_lt = infonce_grads(
        np.asarray(batch_img, dtype=np.float64),
        np.asarray(batch_txt, dtype=np.float64),
        state.w_img, state.w_txt, state.log_t)
    if loss > LOSS_EXPLOSION:
        raise TrainingError(
            f"loss exploded to {loss:.3e} at step {state.step + 1} (lr={lr})")
    state.step += 1
    state.w_img, state.m["w_img"], state.v["w_img"] = _adam_update(
        state.w_img, g_wi, state.m["w_img"], state.v["w_img"], state.step, lr)
    state.w_txt, state.m["w_txt"], state.v["w_txt"] = _adam_update(
        state.w_txt, g_wt, state.m["w_txt"], state.v["w_txt"], state.step, lr)
    state.log_t, state.m["log_t"], state.v["log_t"] = _adam_update(
        state.log_t, g_lt, state.m["log_t"], state.v["log_t"], state.step, lr)
    return loss


@dataclass(frozen=True)
class Checkpoint:
    step: int
    w_img: np.ndarray
    w_txt: np.ndarray
    log_t: float
    val_loss: float
    config_digest: str = ""

    @property
    def model_id(self) -> str:
        tag = self.config_digest[:8] if self.config_digest else "dapt"
        return f"{tag}-step{self.step}"


@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]
    best_index: int
    log_rows: list[dict]     # {"step", "train_loss", "holdout_loss"}
    stopped_early: bool

    @property
    def best(self) -> Checkpoint:
        return self.checkpoints[self.best_index]


def train(config: DaptConfig, train_set: PairDataset,
          holdout_set: PairDataset) -> TrainResult:
    """Epoch loop with seeded shuffling, periodic holdout evals, checkpoints
    at exact interval multiples, and strict-improvement early stopping."""
    n_train_studies = len(set(train_set.study_ids))
    if n_train_studies < 2:
        raise TrainingError(f"need >= 2 training studies, got {n_train_studies}")
    if len(holdout_set) < 1:
        raise TrainingError("holdout set is empty")
    if len(train_set) < config.batch_size:
        raise TrainingError(
            f"{len(train_set)} training pairs cannot fill a batch of {config.batch_size}")
    img = np.asarray(train_set.img, dtype=np.float64)
    txt = np.asarray(train_set.txt, dtype=np.float64)
    h_img = np.asarray(holdout_set.img, dtype=np.float64)
    h_txt = np.asarray(holdout_set.txt, dtype=np.float64)
    d = img.shape[1]
    if d != config.dim:
        raise TrainingError(f"embedding dim {d} differs from config dim {config.dim}")

    state = TrainState.initial(d)
    checkpoints: list[Checkpoint] = []
    log_rows: list[dict] = []
    best_val = math.inf
    last_improve_step = 0
    stopped = False

    for epoch in range(config.max_epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        n_batches = len(train_set) // config.batch_size
        for bi in range(n_batches):
            idx = order[bi * config.batch_size:(bi + 1) * config.batch_size]
            loss = train_step(state, img[idx], txt[idx], config.lr)
            row = {"step": state.step, "train_loss": loss, "holdout_loss": None}
            if state.step % config.checkpoint_interval == 0:
                val = infonce_loss(h_img, h_txt, state.log_t,
                                   w_img=state.w_img, w_txt=state.w_txt)
                row["holdout_loss"] = val
                checkpoints.append(Checkpoint(
                    step=state.step, w_img=state.w_img.copy(),
                    w_txt=state.w_txt.copy(), log_t=state.log_t,
                    val_loss=val, config_digest=config.config_digest))
                if val < best_val:
                    best_val = val
                    last_improve_step = state.step
                if state.step - last_improve_step >= config.patience_steps:
                    stopped = True
            log_rows.append(row)
            if stopped:
                break
        if stopped:
            break

    if not checkpoints:
        raise TrainingError(
            f"no checkpoint reached: {state.step} total steps < "
            f"interval {config.checkpoint_interval}; add data or epochs")
    best_index = min(range(len(checkpoints)),
                     key=lambda i: (checkpoints[i].val_loss, checkpoints[i].step))
    return TrainResult(checkpoints=checkpoints, best_index=best_index,
                       log_rows=log_rows, stopped_early=stopped)


def lr_search(base_config: DaptConfig, train_set: PairDataset,
              holdout_set: PairDataset):
    """Train once per grid value; lowest best-checkpoint loss wins.
    Returns (best_lr, {lr: best val loss}, {lr: TrainResult})."""
    results: dict[float, TrainResult] = {}
    losses: dict[float, float] = {}
    failures: dict[float, str] = {}
    for lr in LR_GRID:
        config = replace(base_config, lr=lr)
        try:
            results[lr] = train(config, train_set, holdout_set)
            losses[lr] = results[lr].best.val_loss
        except TrainingError as exc:
            failures[lr] = str(exc)
    if not results:
        raise TrainingError(f"all learning rates failed: {failures}")
    best_lr = min(losses, key=lambda lr: (losses[lr], lr))
    return best_lr, losses, results


def select_top_checkpoints(checkpoints: list[Checkpoint], n: int = 5
                           ) -> tuple[list[Checkpoint], bool]:
    """n lowest-validation-loss checkpoints (ties by earlier step); second
    element warns that fewer than n were available."""
    if not checkpoints:
        raise ValueError("checkpoint set is empty")
    ranked = sorted(checkpoints, key=lambda c: (c.val_loss, c.step))
    if n > len(ranked):
        return list(ranked), True
    return ranked[:n], False


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    header = {
        "step": ckpt.step,
        "d": int(ckpt.w_img.shape[0]),
        "log_t": ckpt.log_t,
        "val_loss": ckpt.val_loss,
        "config_digest": ckpt.config_digest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    blob += np.ascontiguousarray(ckpt.w_img, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(ckpt.w_txt, dtype="<f4").tobytes()
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise ValueError(f"malformed checkpoint {path}: missing header line")
    header = json.loads(blob[:nl].decode("utf-8"))
    d = int(header["d"])
    body = blob[nl + 1:]
    expected = 2 * d * d * 4
    if len(body) != expected:
        raise ValueError(
            f"malformed checkpoint {path}: payload {len(body)} bytes, expected {expected}")
    w_img = np.frombuffer(body[:d * d * 4], dtype="<f4").reshape(d, d).astype(np.float64)
    w_txt = np.frombuffer(body[d * d * 4:], dtype="<f4").reshape(d, d).astype(np.float64)
    return Checkpoint(step=int(header["step"]), w_img=w_img, w_txt=w_txt,
                      log_t=float(header["log_t"]), val_loss=float(header["val_loss"]),
                      config_digest=str(header.get("config_digest", "")))
