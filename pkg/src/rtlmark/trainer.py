"""Training loop for the landmark heatmap network.

Per step: augment, encode heatmaps, run the frozen teacher for whatever the
active regularizers need, run the student, combine losses, backprop, Adam.
Per epoch: validation pass; the parameters with the lowest validation loss
are kept.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from . import diffcore as dc
from . import heatmap
from .model import FREEZE_POLICIES, Model, apply_freeze, forward
from .optim import AdamState, NumericError, adam_step, lr_at
from .regularizers import RegularizerSpec, loss_regression, total_loss
from .synthdata import Dataset, sample_rng

__all__ = ["TrainConfig", "TrainHistory", "NumericError", "augment", "train", "predict",
           "adam_step", "lr_at", "AdamState"]

MAX_SCALE_ATTEMPTS = 10
_SHUFFLE_KEY = 4_000_037
_AUG_KEY = 4_000_039


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-4
    decoupled_weight_decay: bool = False
    batch_size: int = 2
    epochs: int = 60
    decay_power: float = 0.9
    seed: int = 0
    flip_prob: float = 0.5
    scale_range: tuple = (0.8, 1.25)
    sigma: float = 1.5
    spec: RegularizerSpec = field(default_factory=RegularizerSpec)
    freeze: str = "FT"
    train_limit: Optional[int] = None     # use only the first n train-split indices
    eval_batch: int = 25

    def __post_init__(self):
        if isinstance(self.spec, dict):
            self.spec = RegularizerSpec.from_dict(self.spec)
        self.scale_range = tuple(float(s) for s in self.scale_range)
        self.validate()

    def validate(self) -> None:
        for k in ("lr0", "epsilon", "decay_power", "sigma"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_batch < 1:
            raise ValueError("batch_size, epochs and eval_batch must be at least 1")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lower <= upper")
        if self.freeze not in FREEZE_POLICIES:
            raise ValueError(f"freeze must be one of {FREEZE_POLICIES}")
        if self.train_limit is not None and self.train_limit < 1:
            raise ValueError("train_limit must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class TrainHistory:
    terms: tuple
    rows: list = field(default_factory=list)
    best_epoch: int = -1
    lrs: list = field(default_factory=list)     # every step

    @property
    def columns(self) -> list:
        return ["epoch", "lr", "train_loss", "val_loss"] + [f"train_{t}" for t in self.terms]

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for r in self.rows:
            lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in self.columns))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @property
    def val_losses(self) -> list:
        return [r["val_loss"] for r in self.rows]

    @property
    def train_losses(self) -> list:
        return [r["train_loss"] for r in self.rows]


# ---------------------------------------------------------------- augmentation

def flip(image: np.ndarray, landmarks: np.ndarray, perm) -> tuple:
    W = image.shape[1]
    lm = landmarks.copy()
    lm[:, 0] = (W - 1) - lm[:, 0]
    return image[:, ::-1].copy(), lm[list(perm)]


def scale(image: np.ndarray, landmarks: np.ndarray, s: float) -> tuple:
    """Isotropic bilinear zoom by ``s`` about the image center; outside is filled with 0."""
    if s == 1.0:
        return image.copy(), landmarks.copy()
    H, W = image.shape[:2]
    center = np.array([(W - 1) / 2, (H - 1) / 2])
    inv = np.diag([1 / s, 1 / s, 1.0])
    offset = np.array([center[1], center[0], 0.0]) * (1 - 1 / s)
    out = ndimage.affine_transform(image, inv, offset=offset, order=1, mode="constant", cval=0.0)
    return out.astype(image.dtype), center + s * (landmarks - center)


def augment(image: np.ndarray, landmarks: np.ndarray, rng: np.random.Generator,
            flip_prob: float = 0.5, scale_range=(0.8, 1.25), perm=None) -> tuple:
    """Random mirror plus random zoom. Zooms that push a landmark off the
    frame are redrawn; after ``MAX_SCALE_ATTEMPTS`` the zoom is skipped."""
    H, W = image.shape[:2]
    if rng.random() < flip_prob:
        if perm is None:
            raise ValueError("flipping needs the landmark permutation table")
        image, landmarks = flip(image, landmarks, perm)
    lo, hi = scale_range
    s = 1.0
    for _ in range(MAX_SCALE_ATTEMPTS):
        cand = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        lm = (np.array([(W - 1) / 2, (H - 1) / 2]) + cand * (landmarks - [(W - 1) / 2, (H - 1) / 2]))
        if np.all(lm >= 0) and np.all(lm[:, 0] <= W - 1) and np.all(lm[:, 1] <= H - 1):
            s = cand
            break
    return scale(image, landmarks, s)


# ---------------------------------------------------------------- loop

def _batch_loss(student, teacher, x, hm, spec, train):
    need = {"heatmaps"} | spec.needs()
    art_t = forward(teacher, x, need=spec.needs(), train=False) if spec.needs() else None
    art_s = forward(student, x, need=need, train=train)
    l_r = loss_regression(art_s.heatmaps, hm)
    return total_loss(l_r, spec, art_s, art_t)


def _snapshot(model: Model) -> tuple:
    return ({n: p.data.copy() for n, p in model.params.items()},
            {k: (s.mean.copy(), s.var.copy()) for k, s in model.bn.items()})


def _restore(model: Model, snap) -> None:
    params, bn = snap
    for n, a in params.items():
        model.params[n].data[...] = a
    for k, (m, v) in bn.items():
        model.bn[k].mean[...] = m
        model.bn[k].var[...] = v


def validation_loss(student, teacher, x, hm, spec, batch: int) -> float:
    total = 0.0
    with dc.no_grad():
        for i in range(0, len(x), batch):
            loss, _ = _batch_loss(student, teacher, x[i:i + batch], hm[i:i + batch], spec, train=False)
            total += loss.item() * len(x[i:i + batch])
    return total / len(x)


def train(student: Model, teacher: Optional[Model], dataset: Dataset, cfg: TrainConfig,
          log: Optional[Callable[[str], None]] = None) -> tuple:
    """Optimize ``student`` in place and leave it at its best-validation state.

    Returns ``(student, history)``.
    """
    spec = cfg.spec
    if spec.needs():
        if teacher is None:
            raise ValueError("active regularizers need a teacher")
        if teacher.trainable():
            raise ValueError("teacher must be fully frozen")
    if dataset.landmarks is None:
        raise ValueError("dataset carries no landmarks")
    apply_freeze(student, cfg.freeze)
    H = W = dataset.size
    tr_idx = dataset.split("train")
    if cfg.train_limit is not None:
        tr_idx = tr_idx[:cfg.train_limit]
    va_idx = dataset.split("val")
    if not tr_idx or not va_idx:
        raise ValueError("train and val splits must be non-empty")
    dtype = student.config.dtype
    x_tr = dataset.normalized(tr_idx).astype(dtype)
    lm_tr = dataset.landmarks[tr_idx]
    x_va = dataset.normalized(va_idx).astype(dtype)
    hm_va = heatmap.encode_batch(dataset.landmarks[va_idx], H, W, cfg.sigma).astype(dtype)

    n = len(tr_idx)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    state = AdamState(cfg.beta1, cfg.beta2, cfg.epsilon)
    trainable = student.trainable()
    history = TrainHistory(terms=spec.weighted_terms())
    best_val, best = math.inf, None
    step = 0
    for epoch in range(cfg.epochs):
        order = sample_rng(cfg.seed, _SHUFFLE_KEY, epoch).permutation(n)
        sums = {"total": 0.0, **{t: 0.0 for t in history.terms}}
        epoch_lr = lr_at(step, total_steps, cfg.lr0, cfg.decay_power)
        for b in range(steps_per_epoch):
            sel = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xs, lms = [], []
            for i in sel:
                rng = sample_rng(cfg.seed, _AUG_KEY, epoch, int(tr_idx[i]))
                xi, li = augment(x_tr[i], lm_tr[i], rng, cfg.flip_prob, cfg.scale_range, dataset.flip_perm)
                xs.append(xi)
                lms.append(li)
            xb = np.stack(xs).astype(dtype)
            hm = heatmap.encode_batch(np.stack(lms), H, W, cfg.sigma).astype(dtype)
            for p in trainable.values():
                p.grad = None
            with dc.Tape() as tape:
                loss, parts = _batch_loss(student, teacher, xb, hm, spec, train=True)
            if not math.isfinite(loss.item()):
                bad = [k for k, v in parts.items() if not math.isfinite(v)] or ["total"]
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}: term {bad[0]}")
            dc.backward(loss, tape)
            lr = lr_at(step, total_steps, cfg.lr0, cfg.decay_power)
            adam_step(trainable, state, lr, cfg.weight_decay, frozen=student.frozen,
                      decoupled=cfg.decoupled_weight_decay)
            history.lrs.append(lr)
            step += 1
            sums["total"] += loss.item() * len(sel)
            for t in history.terms:
                sums[t] += parts[t] * len(sel)
        val = validation_loss(student, teacher, x_va, hm_va, spec, cfg.eval_batch)
        row = {"epoch": epoch, "lr": epoch_lr, "train_loss": sums["total"] / n, "val_loss": val}
        row.update({f"train_{t}": sums[t] / n for t in history.terms})
        history.rows.append(row)
        if val < best_val:
            best_val, best = val, _snapshot(student)
            history.best_epoch = epoch
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} train {row['train_loss']:.4f} val {val:.4f}")
    _restore(student, best)
    return student, history


def predict(model: Model, images: np.ndarray, batch: int = 25) -> np.ndarray:
    """Decoded ``(N, K, 2)`` landmarks for already-normalized images."""
    out = []
    x = images.astype(model.config.dtype)
    for i in range(0, len(x), batch):
        hm = forward(model, x[i:i + batch], need={"heatmaps"}, train=False).heatmaps.data
        out.append(heatmap.decode_batch(hm))
    return np.concatenate(out)
