"""Desk-scale transfer experiments: method comparison and source-task effect."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import synthdata
from .metrics import evaluate
from .model import ModelConfig, student_from_teacher
from .regularizers import DEFAULT_LAMBDA, DEFAULT_MU, RegularizerSpec
from .trainer import TrainConfig, predict, train

DESK_MODEL = ModelConfig(H=64, W=64, stage_widths=(16, 32, 64, 128), deconv_channels=64, C=8, K=14)

# method name -> (freeze policy, active regularizers)
METHODS = {
    "FE": ("FE", ()),
    "FTP": ("FTP", ()),
    "FT": ("FT", ()),
    "RTL-CO": ("FT", ("CO",)),
    "RTL-EO": ("FT", ("EO",)),
    "RTL-SAM": ("FT", ("SAM",)),
    "RTL-CAM": ("FT", ("CAM",)),
}


@dataclass
class DeskSetup:
    target_n: int = 600
    target_seed: int = 7
    source_n: int = 500
    source_seed: int = 101
    texture_seed: int = 202
    C: int = 8
    teacher_epochs: int = 10
    epochs: int = 60
    train_limit: int = 50
    lam: float = DEFAULT_LAMBDA
    sigma: float = 1.5
    mu: float = DEFAULT_MU
    model: ModelConfig = field(default_factory=lambda: replace(DESK_MODEL))


def build_teacher(setup: DeskSetup, variant: str = "faces", seed: int = 0):
    data_seed = setup.source_seed if variant == "faces" else setup.texture_seed
    return synthdata.make_alternate_teacher(variant, setup.model, n=setup.source_n, image_size=setup.model.H,
                                            C=setup.C, epochs=setup.teacher_epochs, seed=seed,
                                            data_seed=data_seed)


def target_dataset(setup: DeskSetup):
    return synthdata.generate(setup.target_n, setup.model.H, setup.C, setup.target_seed)


def run_method(method: str, teacher, dataset, seed: int, setup: DeskSetup,
               lam: Optional[float] = None, sigma: Optional[float] = None):
    """Train one student and score it on the test split. Returns ``(report, history)``."""
    freeze, active = METHODS[method]
    spec = RegularizerSpec(active=active, lam=setup.lam if lam is None else lam, mu=setup.mu)
    cfg = TrainConfig(epochs=setup.epochs, train_limit=setup.train_limit, spec=spec, freeze=freeze,
                      seed=seed, sigma=setup.sigma if sigma is None else sigma)
    student = student_from_teacher(teacher, seed=seed)
    student, hist = train(student, teacher, dataset, cfg)
    test = dataset.split("test")
    report = evaluate(predict(student, dataset.normalized(test)), dataset.landmarks[test])
    return report, hist


def compare_methods(methods, teacher, dataset, seeds, setup: DeskSetup,
                    log: Optional[Callable[[str], None]] = None) -> dict:
    """Test MSE per method, one entry per seed."""
    out = {m: [] for m in methods}
    for seed in seeds:
        for m in methods:
            report, _ = run_method(m, teacher, dataset, seed, setup)
            out[m].append(report.mse_mean)
            if log:
                log(f"{m} seed {seed}: {report.mse_mean:.4f}")
    return out


def summarize(results: dict) -> dict:
    return {m: (float(np.mean(v)), float(np.std(v))) for m, v in results.items()}
