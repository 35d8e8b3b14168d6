"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .ops import mul, sum, watch_kinks
from .tensor import Tape, Tensor, backward, no_grad


def _scalarize(out: Tensor, probe: Optional[np.ndarray]) -> Tensor:
    if out.size == 1:
        return out
    return sum(mul(out, Tensor(probe)))


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
               max_entries: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps ``inputs`` to a tensor; non-scalar outputs are contracted with
    a fixed random probe. With ``max_entries`` only a random subset of the
    entries of each input is perturbed.
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    probe = None if out.size == 1 else rng.standard_normal(out.shape).astype(out.dtype)
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = _scalarize(fn(*inputs), probe)
    backward(loss, tape)

    def value() -> float:
        with no_grad():
            return _scalarize(fn(*inputs), probe).item()

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad.reshape(-1)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def params_grad_check(loss_fn: Callable[[], Tensor], params: dict, n_params: int,
                      eps: float = 1e-6, seed: int = 0, skip_kinks: bool = True) -> tuple:
    """Check ``n_params`` randomly drawn scalar entries across a parameter dict.

    Returns ``(max_rel_error, n_checked, n_skipped)``. ``loss_fn`` must be
    deterministic and read the parameter tensors in place. With
    ``skip_kinks`` an entry is replaced by another draw when its two probes
    see different relu/abs sign patterns, since the loss is not
    differentiable across that interval.
    """
    names = [k for k, p in params.items() if p.requires_grad]
    for k in names:
        params[k].grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    sizes = np.array([params[k].size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = np.random.default_rng(seed).permutation(int(offsets[-1]))
    worst, checked, skipped = 0.0, 0, 0
    for flat_idx in order:
        if checked == n_params:
            break
        j = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        p = params[names[j]]
        i = int(flat_idx - offsets[j])
        flat = p.data.reshape(-1)
        orig = flat[i]
        with no_grad():
            with watch_kinks() as up_kinks:
                flat[i] = orig + eps
                up = loss_fn().item()
            with watch_kinks() as down_kinks:
                flat[i] = orig - eps
                down = loss_fn().item()
            flat[i] = orig
        if skip_kinks and not _same_pattern(up_kinks, down_kinks):
            skipped += 1
            continue
        numeric = (up - down) / (2 * eps)
        a = float(p.grad.reshape(-1)[i])
        worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
        checked += 1
    return worst, checked, skipped
