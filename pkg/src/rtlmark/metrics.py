"""Landmark localization metrics: mean error, CED curve, AUC and failure rate.

Errors are unnormalized distances in input pixels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_THRESHOLDS = (1.0, 1.2, 1.4)
CED_MAX = 2.0
CED_POINTS = 200
AUC_NOTE = "AUC = trapezoidal area under the CED on [0, t], divided by t (1.0 = all errors zero)"


def landmark_distances(pred, gt) -> np.ndarray:
    p, g = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.shape[-1] != 2:
        raise ValueError(f"landmark sets differ: {p.shape} vs {g.shape}")
    return np.sqrt(((p - g) ** 2).sum(axis=-1))


def per_image_error(pred, gt) -> float:
    """Mean over the K landmarks of the point-to-point Euclidean error."""
    return float(landmark_distances(pred, gt).mean())


def mse(errors) -> tuple:
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no errors to summarize")
    return float(e.mean()), float(e.std())


def ced(errors, max_error: float = CED_MAX, n_grid: int = CED_POINTS) -> list:
    """Empirical CDF on a uniform grid over [0, max_error] plus every observed error."""
    e = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    grid = np.unique(np.concatenate([np.linspace(0.0, max_error, n_grid), e]))
    frac = np.searchsorted(e, grid, side="right") / e.size
    return list(zip(grid.tolist(), frac.tolist()))


def failure_rate(errors, threshold: float) -> float:
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    e = np.asarray(errors, dtype=np.float64).ravel()
    return float(np.count_nonzero(e > threshold) / e.size)


def auc(curve, max_threshold: float) -> float:
    """Normalized trapezoidal area under a CED curve from 0 to ``max_threshold``."""
    if max_threshold <= 0:
        raise ValueError("max_threshold must be positive")
    t = np.array([c[0] for c in curve], dtype=np.float64)
    f = np.array([c[1] for c in curve], dtype=np.float64)
    keep = t <= max_threshold
    t, f = t[keep], f[keep]
    if t.size == 0 or t[0] > 0:
        raise ValueError("CED curve must start at threshold 0")
    if t[-1] < max_threshold:
        t = np.append(t, max_threshold)
        f = np.append(f, f[-1])
    # summation rounding can push a perfect curve a hair above 1
    return float(np.clip(np.trapezoid(f, t) / max_threshold, 0.0, 1.0))


@dataclass
class EvalReport:
    n_images: int
    mse_mean: float
    mse_std: float
    per_landmark_mse: list
    failure_rate: dict
    auc: dict
    ced: list = field(repr=False)
    failure_mode: str = "image"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["failure_rate"] = {f"{k:.1f}": v for k, v in self.failure_rate.items()}
        d["auc"] = {f"{k:.1f}": v for k, v in self.auc.items()}
        d["ced"] = [list(p) for p in self.ced]
        d["auc_definition"] = AUC_NOTE
        return d

    def summary(self) -> str:
        fr = " ".join(f"FR@{k}={v:.3f}" for k, v in self.failure_rate.items())
        au = " ".join(f"AUC@{k}={v:.3f}" for k, v in self.auc.items())
        return f"MSE {self.mse_mean:.2f} ± {self.mse_std:.2f} | {fr} | {au}"


def evaluate(preds, gts, thresholds=DEFAULT_THRESHOLDS, per_landmark_failure: bool = False) -> EvalReport:
    """Score ``(N, K, 2)`` predictions against ground truth."""
    d = landmark_distances(preds, gts)
    if d.ndim != 2:
        raise ValueError("expected (N, K, 2) landmark arrays")
    per_image = d.mean(axis=1)
    mean, std = mse(per_image)
    curve = ced(per_image)
    judged = d.ravel() if per_landmark_failure else per_image
    return EvalReport(
        n_images=int(d.shape[0]),
        mse_mean=mean,
        mse_std=std,
        per_landmark_mse=d.mean(axis=0).tolist(),
        failure_rate={float(t): failure_rate(judged, t) for t in thresholds},
        auc={float(t): auc(curve, t) for t in thresholds},
        ced=curve,
        failure_mode="landmark" if per_landmark_failure else "image",
    )


def write_report(report: EvalReport, json_path, ced_path=None, extra: dict = None) -> None:
    d = report.to_dict()
    if extra:
        d.update(extra)
    Path(json_path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    if ced_path is not None:
        lines = ["threshold,fraction"] + [f"{t!r},{f!r}" for t, f in report.ced]
        Path(ced_path).write_text("\n".join(lines) + "\n")
