import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtlmark.heatmap import (decode_argmax, encode, read_landmarks_csv,
                             write_landmarks_csv)


def test_unit_peak_at_aligned_center():
    g = encode([[4.0, 4.0]], 256, 256, 1.5)
    assert g.shape == (64, 64, 1)
    assert g[1, 1, 0] == 1.0
    assert g.max() == 1.0


def test_neighbor_value():
    g = encode([[4.0, 4.0]], 256, 256, 1.5)
    expected = 0.8007374029168081  # exp(-1 / (2 * 1.5**2))
    assert abs(expected - math.exp(-1 / 4.5)) < 1e-15
    for a, b in [(0, 1), (2, 1), (1, 0), (1, 2)]:
        assert abs(g[a, b, 0] - expected) < 1e-9
    assert abs(g[2, 2, 0] - math.exp(-2 / 4.5)) < 1e-12


def test_maps_are_independent():
    both = encode([[8.0, 12.0], [40.0, 20.0]], 64, 64, 1.5)
    assert both.shape == (16, 16, 2)
    np.testing.assert_array_equal(both[..., 0], encode([[8.0, 12.0]], 64, 64, 1.5)[..., 0])
    np.testing.assert_array_equal(both[..., 1], encode([[40.0, 20.0]], 64, 64, 1.5)[..., 0])
    assert both[3, 2, 0] == 1.0 and both[5, 10, 1] == 1.0


def test_x_is_column_y_is_row():
    g = encode([[20.0, 8.0]], 64, 64, 1.0)
    assert np.unravel_index(g[..., 0].argmax(), (16, 16)) == (2, 5)


@pytest.mark.parametrize("pt", [[-1.0, 3.0], [64.0, 3.0], [3.0, 64.0]])
def test_landmark_outside_rejected(pt):
    with pytest.raises(ValueError):
        encode([pt], 64, 64, 1.5)


def test_bad_size_or_sigma_rejected():
    with pytest.raises(ValueError):
        encode([[1.0, 1.0]], 62, 64, 1.5)
    with pytest.raises(ValueError):
        encode([[1.0, 1.0]], 64, 64, 0.0)


def test_decode_delta_map():
    m = np.zeros((16, 32, 1))
    m[10, 20, 0] = 1.0
    np.testing.assert_array_equal(decode_argmax(m), [[80.0, 40.0]])


def test_decode_tie_rule():
    np.testing.assert_array_equal(decode_argmax(np.full((8, 8, 2), 0.3)), [[0, 0], [0, 0]])


def test_exhaustive_aligned_round_trip():
    for y in range(0, 64, 4):
        for x in range(0, 64, 4):
            p = np.array([[float(x), float(y)]])
            np.testing.assert_array_equal(decode_argmax(encode(p, 64, 64, 1.5)), p)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 63.999), st.floats(0, 63.999))
def test_round_trip_error_bounded(x, y):
    p = np.array([[x, y]])
    g = encode(p, 64, 64, 1.5)
    assert np.all(g > 0) and np.all(g <= 1)
    q = decode_argmax(g)
    assert np.all(np.abs(q - p) <= 4.0)


def test_csv_round_trip(tmp_path):
    pts = np.array([[1.25, 3.0], [0.1 + 0.2, 63.5]])
    write_landmarks_csv(tmp_path / "l.csv", pts)
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "0,1.25,3.0"
    back = read_landmarks_csv(tmp_path / "l.csv")
    assert back.tobytes() == pts.tobytes()
