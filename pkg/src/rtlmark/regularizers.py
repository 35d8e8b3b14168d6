"""Heatmap regression loss and the four teacher-matching constraint losses.

Every constraint compares student artifacts against those of a frozen
teacher on the same batch; teacher tensors carry no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from . import diffcore as dc
from .diffcore import DegenerateInputError, DimensionError, Tensor

TERMS = ("CO", "EO", "SAM", "CAM")
DEFAULT_LAMBDA = 0.002
DEFAULT_MU = 2.0

# artifact each term reads from a forward pass
NEEDS = {"CO": "logits", "EO": "embedding", "SAM": "activation", "CAM": "activation"}


class MissingArtifactError(ValueError):
    pass


@dataclass
class RegularizerSpec:
    """Active constraint terms with their weights and the softmax temperature.

    ``lam`` is either one weight shared by every active term or a per-term map.
    """

    active: tuple = ()
    lam: Union[float, Mapping[str, float]] = DEFAULT_LAMBDA
    mu: float = DEFAULT_MU

    def __post_init__(self):
        self.active = tuple(str(t).upper() for t in self.active)
        unknown = [t for t in self.active if t not in TERMS]
        if unknown:
            raise ValueError(f"unknown regularizer terms {unknown}")
        if len(set(self.active)) != len(self.active):
            raise ValueError("duplicate regularizer terms")
        self.active = tuple(t for t in TERMS if t in self.active)
        if isinstance(self.lam, Mapping):
            self.lam = {str(k).upper(): float(v) for k, v in self.lam.items()}
            extra = set(self.lam) - set(self.active)
            if extra:
                raise ValueError(f"weights given for inactive terms {sorted(extra)}")
            weights = list(self.lam.values())
        else:
            self.lam = float(self.lam)
            weights = [self.lam]
        if any(not np.isfinite(w) or w < 0 for w in weights):
            raise ValueError("regularizer weights must be finite and non-negative")
        if not (np.isfinite(self.mu) and self.mu > 0):
            raise ValueError("temperature mu must be positive")

    def weight(self, term: str) -> float:
        if isinstance(self.lam, dict):
            return self.lam.get(term, DEFAULT_LAMBDA)
        return self.lam

    def weighted_terms(self) -> tuple:
        """Active terms whose weight is strictly positive."""
        return tuple(t for t in self.active if self.weight(t) > 0)

    def needs(self) -> set:
        return {NEEDS[t] for t in self.active}

    def to_dict(self) -> dict:
        lam = dict(self.lam) if isinstance(self.lam, dict) else self.lam
        return {"active": list(self.active), "lambda": lam, "mu": self.mu}

    @classmethod
    def from_dict(cls, d: dict) -> "RegularizerSpec":
        unknown = set(d) - {"active", "lambda", "mu"}
        if unknown:
            raise ValueError(f"unknown reg keys: {sorted(unknown)}")
        return cls(active=tuple(d.get("active", ())), lam=d.get("lambda", DEFAULT_LAMBDA),
                   mu=d.get("mu", DEFAULT_MU))


def _batched(t: Tensor, ndim: int) -> Tensor:
    return dc.reshape(t, (1,) + t.shape) if t.ndim == ndim - 1 else t


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def loss_regression(pred: Tensor, gt) -> Tensor:
    """Batch mean of the squared Frobenius distance between heatmap stacks."""
    gt = _const(gt, pred)
    if pred.shape != gt.shape:
        raise DimensionError(f"heatmaps {pred.shape} vs ground truth {gt.shape}")
    return dc.scale(dc.mse_frobenius(pred, gt), 1.0 / pred.shape[0])


def loss_co(student_logits: Tensor, teacher_logits, mu: float = DEFAULT_MU) -> Tensor:
    s = _batched(student_logits, 2)
    t = _batched(_const(teacher_logits, s), 2)
    if s.shape != t.shape or s.shape[1] < 2:
        raise DimensionError(f"logits {s.shape} vs {t.shape}; need C >= 2")
    if not (np.all(np.isfinite(s.data)) and np.all(np.isfinite(t.data))):
        raise ValueError("non-finite logits")
    if mu <= 0:
        raise ValueError("mu must be positive")
    ps = dc.softmax(dc.scale(s, 1.0 / mu))
    pt = dc.softmax(dc.scale(t, 1.0 / mu))
    return dc.scale(dc.mse_frobenius(pt, ps), 1.0 / s.shape[0])


def loss_eo(student_embed: Tensor, teacher_embed) -> Tensor:
    """One minus cosine similarity, averaged over the batch."""
    s = _batched(student_embed, 2)
    t = _batched(_const(teacher_embed, s), 2)
    if s.shape != t.shape:
        raise DimensionError(f"embeddings {s.shape} vs {t.shape}")
    cos = dc.cosine_similarity(s, t, axis=-1)
    return dc.sub(Tensor(np.ones((), dtype=s.dtype)), dc.mean(cos))


def spatial_attention(E: Tensor) -> Tensor:
    """Per-location sum over channels of squared activations."""
    # |e|^2 == e^2 for real activations
    return dc.sum(dc.square(E), axis=-1)


def loss_sam(E_s: Tensor, E_t) -> Tensor:
    s = _batched(E_s, 4)
    t = _batched(_const(E_t, s), 4)
    if s.shape[:3] != t.shape[:3]:
        raise DimensionError(f"activation extents {s.shape[:3]} vs {t.shape[:3]}")
    n, h, w = s.shape[:3]
    a_s = dc.reshape(spatial_attention(s), (n, h * w))
    a_t = dc.reshape(spatial_attention(t), (n, h * w))
    try:
        diff = dc.mse_frobenius(dc.l2_normalize(a_s), dc.l2_normalize(a_t))
    except DegenerateInputError as e:
        raise DegenerateInputError("spatial attention map is all zero") from e
    return dc.scale(diff, 1.0 / n)


def channel_context(E: Tensor) -> Tensor:
    """Per-channel spatial mean of absolute activations."""
    axes = (0, 1) if E.ndim == 3 else (1, 2)
    return dc.mean(dc.abs(E), axis=axes)


def loss_cam(E_s: Tensor, E_t) -> Tensor:
    s = _batched(E_s, 4)
    t = _batched(_const(E_t, s), 4)
    if s.shape[0] != t.shape[0] or s.shape[3] != t.shape[3]:
        raise DimensionError(f"channel attention needs equal batch and channels: {s.shape} vs {t.shape}")
    q_s, q_t = channel_context(s), channel_context(t)
    try:
        diff = dc.mse_frobenius(dc.l2_normalize(q_s), dc.l2_normalize(q_t))
    except DegenerateInputError as e:
        raise DegenerateInputError("channel context vector is all zero") from e
    return dc.scale(diff, 1.0 / s.shape[0])


def term_loss(term: str, art_s, art_t, mu: float) -> Tensor:
    key = NEEDS[term]
    s, t = getattr(art_s, key, None), getattr(art_t, key, None)
    if s is None or t is None:
        raise MissingArtifactError(f"{term} needs '{key}' from both student and teacher")
    if term == "CO":
        return loss_co(s, t, mu)
    if term == "EO":
        return loss_eo(s, t)
    if term == "SAM":
        return loss_sam(s, t)
    return loss_cam(s, t)


def total_loss(l_r: Tensor, spec: RegularizerSpec, art_s=None, art_t=None) -> tuple:
    """Regression loss plus the weighted active terms.

    Returns ``(loss, breakdown)`` where ``breakdown`` maps ``"R"`` and each
    active term to its unweighted float value.
    """
    total = l_r
    breakdown = {"R": l_r.item()}
    for term in spec.active:
        value = term_loss(term, art_s, art_t, spec.mu)
        breakdown[term] = value.item()
        total = dc.add(total, dc.scale(value, spec.weight(term)))
    return total, breakdown
