import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtlmark import diffcore as dc
from rtlmark.diffcore import Tensor, grad_check
from rtlmark.model import ForwardArtifacts
from rtlmark.regularizers import (MissingArtifactError, RegularizerSpec,
                                  channel_context, loss_cam, loss_co, loss_eo,
                                  loss_regression, loss_sam, spatial_attention,
                                  total_loss)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- regression

def test_regression_identity_and_unit_offset():
    g = np.random.default_rng(0).random((2, 4, 4, 3))
    assert loss_regression(T(g), g).item() == 0.0
    gt = np.zeros((1, 2, 2, 1))
    assert loss_regression(T(gt + 1), gt).item() == 4.0


def test_regression_matches_loop():
    rng = np.random.default_rng(1)
    p, g = rng.standard_normal((3, 4, 5, 2)), rng.standard_normal((3, 4, 5, 2))
    ref = 0.0
    for i in range(3):
        s = 0.0
        for a in range(4):
            for b in range(5):
                for k in range(2):
                    s += (g[i, a, b, k] - p[i, a, b, k]) ** 2
        ref += s
    assert abs(loss_regression(T(p), g).item() - ref / 3) < 1e-10


def test_regression_shape_mismatch():
    with pytest.raises(dc.DimensionError):
        loss_regression(T(np.zeros((1, 2, 2, 1))), np.zeros((1, 2, 2, 2)))


# ---------------------------------------------------------------- CO

def test_co_hand_value():
    # softmax([0, ln 3]) = [0.25, 0.75]; distance to [0.5, 0.5] squared = 0.125
    v = loss_co(T([[0.0, math.log(3.0)]]), T([[0.0, 0.0]]), mu=1.0).item()
    assert abs(v - 0.125) < 1e-9


def test_co_identity_and_temperature_limit():
    s = T(np.random.default_rng(2).standard_normal((4, 6)))
    assert loss_co(s, s, 2.0).item() == 0.0
    t = T(np.random.default_rng(3).standard_normal((4, 6)) * 5)
    assert loss_co(s, t, 1e6).item() < 1e-9


def test_co_rejects_nonfinite():
    with pytest.raises(ValueError):
        loss_co(T([[np.nan, 0.0]]), T([[0.0, 0.0]]))


# ---------------------------------------------------------------- EO

def test_eo_values():
    u = T([1.0, 2.0, -1.0])
    assert abs(loss_eo(u, u).item()) < 1e-15
    assert abs(loss_eo(T([1.0, 0.0]), T([0.0, 3.0])).item() - 1.0) < 1e-15
    assert abs(loss_eo(u, T([-1.0, -2.0, 1.0])).item() - 2.0) < 1e-15


def test_eo_batch_average():
    s = T([[1.0, 0.0], [1.0, 0.0]])
    t = T([[0.0, 1.0], [1.0, 0.0]])
    assert abs(loss_eo(s, t).item() - 0.5) < 1e-15


def test_eo_zero_vector():
    with pytest.raises(dc.DegenerateInputError):
        loss_eo(T([0.0, 0.0]), T([1.0, 0.0]))


# ---------------------------------------------------------------- attention maps

def test_spatial_attention_examples():
    np.testing.assert_array_equal(spatial_attention(T(np.ones((3, 3, 1)))).data, np.ones((3, 3)))
    E = np.stack([np.ones((2, 2)), -2 * np.ones((2, 2))], axis=-1)
    np.testing.assert_array_equal(spatial_attention(T(E)).data, np.full((2, 2), 5.0))


def test_spatial_attention_matches_loop():
    E = np.random.default_rng(4).standard_normal((3, 4, 5))
    ref = np.zeros((3, 4))
    for h in range(3):
        for w in range(4):
            for b in range(5):
                ref[h, w] += abs(E[h, w, b]) ** 2
    np.testing.assert_allclose(spatial_attention(T(E)).data, ref, atol=1e-12, rtol=0)


def test_channel_context_examples():
    E = np.array([[1.0, -1.0], [2.0, 2.0]]).reshape(2, 2, 1)
    np.testing.assert_allclose(channel_context(T(E)).data, [1.5], atol=1e-15)
    np.testing.assert_array_equal(channel_context(T(np.full((3, 3, 2), -4.0))).data, [4.0, 4.0])


def test_channel_context_matches_loop():
    E = np.random.default_rng(5).standard_normal((3, 4, 5))
    ref = np.zeros(5)
    for b in range(5):
        for h in range(3):
            for w in range(4):
                ref[b] += abs(E[h, w, b])
    np.testing.assert_allclose(channel_context(T(E)).data, ref / 12, atol=1e-12, rtol=0)


def test_sam_examples():
    E = np.random.default_rng(6).standard_normal((2, 3, 3, 4))
    assert loss_sam(T(E), T(E)).item() == 0.0
    assert abs(loss_sam(T(E), T(3 * E)).item()) < 1e-12
    assert abs(loss_sam(T(np.full((1, 1, 1, 2), 0.3)), T(np.full((1, 1, 1, 5), -7.0))).item()) < 1e-15


def test_sam_allows_different_channels_but_not_extents():
    rng = np.random.default_rng(7)
    v = loss_sam(T(rng.standard_normal((1, 2, 2, 3))), T(rng.standard_normal((1, 2, 2, 5)))).item()
    assert 0 <= v <= 2
    with pytest.raises(dc.DimensionError):
        loss_sam(T(rng.standard_normal((1, 2, 2, 3))), T(rng.standard_normal((1, 3, 2, 3))))


def test_sam_degenerate():
    with pytest.raises(dc.DegenerateInputError):
        loss_sam(T(np.zeros((1, 2, 2, 3))), T(np.ones((1, 2, 2, 3))))


def test_cam_examples():
    E = np.random.default_rng(8).standard_normal((2, 3, 3, 4))
    assert loss_cam(T(E), T(E)).item() == 0.0
    assert abs(loss_cam(T(E), T(5 * E)).item()) < 1e-12
    es = np.zeros((1, 2, 2, 2)); es[..., 0] = 1.0
    et = np.zeros((1, 2, 2, 2)); et[..., 1] = -3.0
    assert abs(loss_cam(T(es), T(et)).item() - 2.0) < 1e-15


def test_cam_requires_equal_channels_and_nonzero():
    with pytest.raises(dc.DimensionError):
        loss_cam(T(np.ones((1, 2, 2, 3))), T(np.ones((1, 2, 2, 4))))
    with pytest.raises(dc.DegenerateInputError):
        loss_cam(T(np.zeros((1, 2, 2, 3))), T(np.ones((1, 2, 2, 3))))


finite = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(1e-3, 1e3))
def test_positive_scale_invariance_and_bounds(seed, c):
    rng = np.random.default_rng(seed)
    Es, Et = rng.standard_normal((2, 3, 3, 4)), rng.standard_normal((2, 3, 3, 4))
    fs, ft = rng.standard_normal((2, 6)), rng.standard_normal((2, 6))
    for fn, a, b in ((loss_sam, Es, Et), (loss_cam, Es, Et), (loss_eo, fs, ft)):
        base = fn(T(a), T(b)).item()
        assert abs(fn(T(a), T(c * b)).item() - base) <= 1e-9
        assert -1e-12 <= base <= 2 + 1e-12
    co = loss_co(T(fs * 5), T(ft * 5), 2.0).item()
    assert 0 <= co <= 2


@pytest.mark.parametrize("fn,shape", [(loss_co, (3, 5)), (loss_eo, (3, 6)),
                                      (loss_sam, (2, 3, 3, 4)), (loss_cam, (2, 3, 3, 4))])
def test_regularizer_gradcheck(fn, shape):
    rng = np.random.default_rng(9)
    s = T(rng.standard_normal(shape), grad=True)
    t = T(rng.standard_normal(shape))
    assert grad_check(lambda a: fn(a, t), [s], eps=1e-6) < 1e-4


# ---------------------------------------------------------------- total loss

def _arts(rng):
    return ForwardArtifacts(
        heatmaps=None,
        embedding=T(rng.standard_normal((2, 6))),
        logits=T(rng.standard_normal((2, 4))),
        activation=T(rng.standard_normal((2, 2, 2, 6))),
    )


def test_total_empty_set_is_regression_loss():
    lr = T(3.25)
    total, parts = total_loss(lr, RegularizerSpec(active=()))
    assert total is lr and parts == {"R": 3.25}


def test_total_eo_linear_composition():
    s = ForwardArtifacts(embedding=T([[1.0, 0.0]]))
    t = ForwardArtifacts(embedding=T([[0.0, 1.0]]))
    total, parts = total_loss(T(1.5), RegularizerSpec(active=("EO",), lam=0.002), s, t)
    assert parts["EO"] == 1.0
    assert total.item() == 1.5 + 0.002


def test_total_co_sam_combination_sums_two_terms():
    rng = np.random.default_rng(10)
    s, t = _arts(rng), _arts(rng)
    spec = RegularizerSpec(active=("CO", "SAM"), lam=0.002, mu=2.0)
    total, parts = total_loss(T(1.0), spec, s, t)
    assert set(parts) == {"R", "CO", "SAM"}
    expected = 1.0 + 0.002 * loss_co(s.logits, t.logits, 2.0).item() + 0.002 * loss_sam(s.activation, t.activation).item()
    assert abs(total.item() - expected) < 1e-15


def test_total_zero_at_identity_all_terms():
    a = _arts(np.random.default_rng(11))
    total, parts = total_loss(T(0.0), RegularizerSpec(active=("CO", "EO", "SAM", "CAM"), lam=1.0), a, a)
    for k in ("CO", "EO", "SAM", "CAM"):
        assert abs(parts[k]) <= 1e-9


def test_total_per_term_weights():
    rng = np.random.default_rng(12)
    s, t = _arts(rng), _arts(rng)
    spec = RegularizerSpec(active=("EO", "CAM"), lam={"EO": 0.5, "CAM": 0.0})
    total, parts = total_loss(T(2.0), spec, s, t)
    assert total.item() == pytest.approx(2.0 + 0.5 * parts["EO"], abs=1e-15)
    assert spec.weighted_terms() == ("EO",)


def test_total_missing_artifact():
    with pytest.raises(MissingArtifactError):
        total_loss(T(1.0), RegularizerSpec(active=("SAM",)), ForwardArtifacts(), ForwardArtifacts())


def test_spec_validation_and_serialization():
    with pytest.raises(ValueError):
        RegularizerSpec(active=("XX",))
    with pytest.raises(ValueError):
        RegularizerSpec(active=("EO",), lam=-1.0)
    with pytest.raises(ValueError):
        RegularizerSpec(active=("EO",), mu=0.0)
    spec = RegularizerSpec(active=("co", "sam"), lam=0.002, mu=2)
    assert spec.active == ("CO", "SAM")
    assert spec.needs() == {"logits", "activation"}
    assert RegularizerSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        RegularizerSpec.from_dict({"active": [], "lamda": 1})
