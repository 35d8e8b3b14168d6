import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtlmark import diffcore as dc
from rtlmark import synthdata as sd
from rtlmark.experiments import DESK_MODEL
from rtlmark.model import ModelConfig, build, student_from_teacher
from rtlmark.optim import AdamState, NumericError, adam_step, lr_at
from rtlmark.regularizers import RegularizerSpec
from rtlmark.trainer import TrainConfig, augment, flip, scale, train, predict

TINY = ModelConfig(H=64, W=64, stage_widths=(4, 8, 8, 16), deconv_channels=8, C=4, K=14)


def P(a):
    return dc.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- optimizer

def test_adam_first_step_hand_value():
    w = P([1.0])
    w.grad = np.array([2.0])
    adam_step({"w": w}, AdamState(), lr=0.001)
    # m_hat = 2, v_hat = 4 -> step = lr * 2 / (2 + eps)
    assert abs(w.data[0] - (1 - 0.001 * 2 / (2 + 1e-8))) < 1e-15
    assert abs(w.data[0] - 0.999) < 1e-8


def test_adam_zero_grad_and_frozen():
    w, f = P([0.3, -0.2]), P([1.5])
    w.grad, f.grad = np.zeros(2), np.array([5.0])
    before = f.data.copy()
    adam_step({"w": w, "f": f}, AdamState(), lr=0.1, frozen={"f"})
    assert np.array_equal(w.data, [0.3, -0.2])
    assert np.array_equal(f.data, before)


def test_adam_coupled_vs_decoupled_weight_decay():
    a, b = P([2.0]), P([2.0])
    a.grad = b.grad = np.array([0.0])
    adam_step({"a": a}, AdamState(), lr=0.01, weight_decay=0.1)
    adam_step({"b": b}, AdamState(), lr=0.01, weight_decay=0.1, decoupled=True)
    # coupled: g = 0.2 -> normalized step of lr; decoupled: only lr * wd * w
    assert abs(a.data[0] - (2.0 - 0.01 * 0.2 / (0.2 + 1e-8))) < 1e-12
    assert abs(b.data[0] - (2.0 - 0.01 * 0.1 * 2.0)) < 1e-12


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    w = P(rng.standard_normal(3))
    ref = w.data.copy()
    m = v = np.zeros(3)
    state = AdamState()
    for t in range(1, 6):
        g = rng.standard_normal(3)
        w.grad = g.copy()
        adam_step({"w": w}, state, lr=0.01, weight_decay=1e-4)
        g = g + 1e-4 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(w.data, ref, rtol=0, atol=1e-14)


def test_adam_rejects_nonfinite():
    w = P([1.0])
    w.grad = np.array([np.nan])
    with pytest.raises(NumericError, match="w"):
        adam_step({"w": w}, AdamState(), lr=0.1)


def test_lr_schedule_examples():
    assert lr_at(0, 1000) == 0.001
    assert lr_at(500, 1000, 0.001, power=1.0) == 0.0005
    assert abs(lr_at(999, 1000) - 0.001 * 0.001 ** 0.9) < 1e-18
    assert abs(lr_at(999, 1000) - 1.995e-6) < 1e-9
    with pytest.raises(ValueError):
        lr_at(1000, 1000)


@given(st.integers(2, 5000), st.floats(0.1, 3.0))
def test_lr_positive_and_non_increasing(total, power):
    lrs = [lr_at(s, total, 1e-3, power) for s in range(0, total, max(1, total // 50))]
    assert all(x > 0 for x in lrs)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


# ---------------------------------------------------------------- augmentation

def test_flip_example_and_involution():
    img = np.zeros((256, 256, 3))
    lm = np.tile([[10.0, 40.0]], (14, 1))
    lm[3] = [100.0, 41.0]
    img2, lm2 = flip(img, lm, sd.FLIP_PERM)
    assert lm2[0].tolist() == [256 - 1 - 100.0, 41.0]   # landmark 3 became its partner 0
    assert lm2[3].tolist() == [245.0, 40.0]
    img3, lm3 = flip(img2, lm2, sd.FLIP_PERM)
    assert np.array_equal(lm3, lm) and np.array_equal(img3, img)


def test_flip_mirrors_pixels():
    img = np.arange(2 * 4 * 1, dtype=float).reshape(2, 4, 1)
    out, _ = flip(img, np.zeros((14, 2)), sd.FLIP_PERM)
    assert out[:, :, 0].tolist() == [[3, 2, 1, 0], [7, 6, 5, 4]]


def test_scale_identity():
    rng = np.random.default_rng(0)
    img, lm = rng.standard_normal((16, 16, 3)), rng.uniform(0, 15, (14, 2))
    out, lm2 = scale(img, lm, 1.0)
    assert np.array_equal(out, img) and np.array_equal(lm2, lm)
    out, lm2 = augment(img, lm, rng, flip_prob=0.0, scale_range=(1.0, 1.0))
    assert np.array_equal(out, img) and np.array_equal(lm2, lm)


def test_scale_moves_a_bright_dot_with_its_landmark():
    img = np.zeros((64, 64, 1))
    img[20, 40] = 1.0
    lm = np.array([[40.0, 20.0]])
    out, lm2 = scale(img, lm, 1.25)
    r, c = np.unravel_index(np.argmax(out[..., 0]), out.shape[:2])
    assert abs(c - lm2[0, 0]) <= 1 and abs(r - lm2[0, 1]) <= 1
    assert np.allclose(lm2, [31.5 + 1.25 * 8.5, 31.5 - 1.25 * 11.5])


def test_augment_keeps_landmarks_in_frame_and_is_seeded():
    ds = sd.generate_arrays(8, 64, 2, seed=1)
    x = ds.normalized()
    for i in range(8):
        for rep in range(2):
            a = augment(x[i], ds.landmarks[i], np.random.default_rng([i, 5]), 0.5, (0.5, 2.0), ds.flip_perm)
            if rep:
                assert np.array_equal(a[0], prev[0]) and np.array_equal(a[1], prev[1])
            prev = a
            assert np.all(a[1] >= 0) and np.all(a[1] <= 63)


def test_augment_falls_back_to_no_scale():
    lm = np.array([[0.0, 0.0], [63.0, 63.0]])
    img = np.random.default_rng(0).standard_normal((64, 64, 3))
    out, lm2 = augment(img, lm, np.random.default_rng(0), 0.0, (1.5, 2.0))
    assert np.array_equal(out, img) and np.array_equal(lm2, lm)


# ---------------------------------------------------------------- training loop

@pytest.fixture(scope="module")
def tiny_setup():
    ds = sd.generate_arrays(60, 64, 4, seed=21)
    teacher = build(TINY)
    x = ds.normalized(ds.split("train")).astype(np.float32)
    from rtlmark.model import forward
    forward(teacher, x, need={"logits"}, train=True)     # populate running stats
    teacher.freeze_all()
    return ds, teacher


def _run(ds, teacher, spec, seed=0, epochs=2, freeze="FT"):
    cfg = TrainConfig(epochs=epochs, spec=spec, seed=seed, freeze=freeze, train_limit=12)
    st = student_from_teacher(teacher, seed=seed)
    return train(st, teacher, ds, cfg)


def test_training_is_deterministic(tiny_setup):
    ds, teacher = tiny_setup
    spec = RegularizerSpec(active=("SAM", "CO"), lam=0.002)
    s1, h1 = _run(ds, teacher, spec)
    s2, h2 = _run(ds, teacher, spec)
    assert h1.to_csv() == h2.to_csv()
    for n in s1.params:
        assert np.array_equal(s1.params[n].data, s2.params[n].data)
    assert h1.columns[-2:] == ["train_CO", "train_SAM"]


def test_zero_lambda_matches_plain_finetuning(tiny_setup):
    ds, teacher = tiny_setup
    _, plain = _run(ds, teacher, RegularizerSpec())
    _, zero = _run(ds, teacher, RegularizerSpec(active=("EO",), lam=0.0))
    assert plain.to_csv() == zero.to_csv()
    assert plain.train_losses == zero.train_losses


def test_teacher_and_frozen_params_untouched(tiny_setup):
    ds, teacher = tiny_setup
    before = {n: p.data.copy() for n, p in teacher.params.items()}
    bn_before = {k: s.mean.copy() for k, s in teacher.bn.items()}
    st, _ = _run(ds, teacher, RegularizerSpec(active=("EO", "CAM")), freeze="FE")
    for n, p in teacher.params.items():
        assert np.array_equal(p.data, before[n])
    for k, s in teacher.bn.items():
        assert np.array_equal(s.mean, bn_before[k])
    for n in st.encoder_names:
        assert np.array_equal(st.params[n].data, teacher.params[n].data)


def test_history_invariants(tiny_setup):
    ds, teacher = tiny_setup
    st, h = _run(ds, teacher, RegularizerSpec(active=("SAM",)), epochs=3)
    assert all(b <= a for a, b in zip(h.lrs, h.lrs[1:]))
    assert len(h.lrs) == 3 * 6
    best = h.val_losses[h.best_epoch]
    assert all(best <= v for v in h.val_losses)
    from rtlmark.trainer import validation_loss
    from rtlmark import heatmap
    va = ds.split("val")
    hm = heatmap.encode_batch(ds.landmarks[va], 64, 64, 1.5).astype(np.float32)
    v = validation_loss(st, teacher, ds.normalized(va), hm, RegularizerSpec(active=("SAM",)), 25)
    assert abs(v - best) <= 1e-5 * abs(best)


def test_regularizers_require_frozen_teacher(tiny_setup):
    ds, teacher = tiny_setup
    live = build(TINY)
    with pytest.raises(ValueError):
        train(build(TINY), live, ds, TrainConfig(epochs=1, spec=RegularizerSpec(active=("EO",))))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=0)
    with pytest.raises(ValueError):
        TrainConfig(scale_range=(1.2, 0.9))
    with pytest.raises(ValueError):
        TrainConfig(flip_prob=1.5)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epohcs": 3})
    cfg = TrainConfig(spec=RegularizerSpec(active=("SAM",)))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_smoke_run_halves_training_loss():
    ds = sd.generate_arrays(120, 64, 8, seed=31)
    teacher = build(DESK_MODEL)
    teacher.freeze_all()
    st = student_from_teacher(teacher, seed=0)
    cfg = TrainConfig(epochs=60, train_limit=50, seed=0)
    st, h = train(st, teacher, ds, cfg)
    assert h.train_losses[-1] <= 0.5 * h.train_losses[0]
    pred = predict(st, ds.normalized(ds.split("test")))
    assert pred.shape == (len(ds.split("test")), 14, 2)
