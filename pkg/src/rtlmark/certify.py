"""Finite-difference certification of every differentiable op and the full training loss."""

from __future__ import annotations

import time

import numpy as np

from . import diffcore as dc
from . import heatmap
from .diffcore import Tensor, grad_check, params_grad_check
from .model import ModelConfig, build, forward, student_from_teacher
from .regularizers import TERMS, RegularizerSpec, loss_regression, total_loss

TOLERANCE = 1e-4
# 64x64 is the smallest input the five stride-2 stages accept with a 2x2 top map
CERT_MODEL = ModelConfig(H=64, W=64, stage_widths=(4, 8, 8, 16), deconv_channels=8, C=4, K=3,
                         precision="float64")


def _t(rng, shape, grad=True, away_from_zero=False):
    a = rng.standard_normal(shape)
    if away_from_zero:
        a = np.sign(a) * (np.abs(a) + 0.1)
    return Tensor(a, requires_grad=grad)


def op_checks(seed: int = 0) -> dict:
    """Max relative error per op (float64, central differences)."""
    rng = np.random.default_rng(seed)
    out = {}

    def check(name, fn, *inputs, **kw):
        out[name] = grad_check(fn, list(inputs), **kw)

    a, b = _t(rng, (3, 4)), _t(rng, (3, 4))
    check("add", dc.add, a, b)
    check("add_broadcast", dc.add, _t(rng, (3, 4)), _t(rng, (4,)))
    check("sub", dc.sub, a, b)
    check("mul", dc.mul, a, b)
    check("scale", lambda x: dc.scale(x, -2.5), a)
    check("abs", dc.abs, _t(rng, (3, 4), away_from_zero=True))
    check("square", dc.square, a)
    check("relu", dc.relu, _t(rng, (3, 4), away_from_zero=True))
    check("sum", lambda x: dc.sum(x, axis=1), a)
    check("mean", lambda x: dc.mean(x, axis=0, keepdims=True), a)
    check("reshape", lambda x: dc.reshape(x, (4, 3)), a)
    check("getitem", lambda x: x[1:, ::2], a)
    check("concat", lambda x, y: dc.concat([x, y], axis=-1), a, b)
    check("linear", dc.linear, _t(rng, (2, 5)), _t(rng, (5, 3)), _t(rng, (3,)))
    check("softmax", dc.softmax, _t(rng, (2, 5)))
    check("cross_entropy", lambda x: dc.cross_entropy(x, np.array([1, 4])), _t(rng, (2, 5)))
    check("global_avgpool", dc.global_avgpool, _t(rng, (2, 3, 3, 4)))
    check("l2_normalize", dc.l2_normalize, _t(rng, (2, 5)))
    check("cosine_similarity", dc.cosine_similarity, _t(rng, (2, 5)), _t(rng, (2, 5)))
    check("mse_frobenius", lambda x: dc.mse_frobenius(x, np.ones((2, 3))), _t(rng, (2, 3)))
    x = _t(rng, (2, 7, 7, 3))
    check("conv2d_s1_p1", lambda x, k: dc.conv2d(x, k, 1, 1), x, _t(rng, (3, 3, 3, 4)))
    check("conv2d_s2_p1", lambda x, k: dc.conv2d(x, k, 2, 1), x, _t(rng, (3, 3, 3, 2)))
    check("conv2d_1x1", lambda x, k: dc.conv2d(x, k), x, _t(rng, (1, 1, 3, 2)))
    check("deconv2d_4x4_s2_p1", lambda x, k: dc.deconv2d(x, k, 2, 1),
          _t(rng, (2, 3, 3, 3)), _t(rng, (4, 4, 2, 3)))
    state = dc.BatchNormState.fresh(3, np.float64)
    check("batchnorm_train", lambda x, g, b: dc.batchnorm(x, g, b, state, train=True, update_stats=False),
          _t(rng, (2, 3, 3, 3)), _t(rng, (3,)), _t(rng, (3,)))
    check("batchnorm_infer", lambda x, g, b: dc.batchnorm(x, g, b, state, train=False),
          _t(rng, (2, 3, 3, 3)), _t(rng, (3,)), _t(rng, (3,)))
    return out


FULL_LOSS_EPS = 1e-5


def full_loss_check(seed: int = 0, n_params: int = 250, config: ModelConfig = CERT_MODEL,
                    eps: float = FULL_LOSS_EPS) -> tuple:
    """Regression loss plus all four constraint terms (weight 1) through a student network.

    Returns ``(max_rel_error, n_checked, n_skipped)`` over randomly drawn
    parameter entries; entries whose probes straddle a relu/abs kink are
    skipped and redrawn. The loss is O(1e3) here, so the step is larger than
    the per-op default to keep cancellation error well below the tolerance.
    """
    rng = np.random.default_rng(seed)
    teacher = build(config)
    x = rng.standard_normal((2, config.H, config.W, 3))
    forward(teacher, x, need={"logits"}, train=True)      # non-trivial running statistics
    teacher.freeze_all()
    student = student_from_teacher(teacher, seed=seed + 1)
    lm = rng.uniform(0, config.H - 1, (2, config.K, 2))
    gt = heatmap.encode_batch(lm, config.H, config.W, 1.5)
    spec = RegularizerSpec(active=TERMS, lam=1.0, mu=2.0)
    with dc.no_grad():
        art_t = forward(teacher, x, need=spec.needs())

    def loss_fn():
        art_s = forward(student, x, need={"heatmaps"} | spec.needs(), train=True)
        total, _ = total_loss(loss_regression(art_s.heatmaps, gt), spec, art_s, art_t)
        return total

    return params_grad_check(loss_fn, student.params, n_params, eps=eps, seed=seed)


def run_suite(seed: int = 0, n_params: int = 250) -> dict:
    start = time.perf_counter()
    ops = op_checks(seed)
    full, n, skipped = full_loss_check(seed, n_params)
    return {
        "ops": ops,
        "full_loss": full,
        "full_loss_entries": n,
        "full_loss_kink_skips": skipped,
        "max_error": max(max(ops.values()), full),
        "tolerance": TOLERANCE,
        "passed": max(max(ops.values()), full) < TOLERANCE,
        "seconds": time.perf_counter() - start,
    }
