import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crowdflow.core import (FrameError, PredictionSet, TrajectoryWindow, finite_differences,
                            history_velocities, to_absolute, to_relative)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def window_at(origin, t_fut=3):
    hist = np.zeros((1, 8, 2))
    hist[0, -1] = origin
    return TrajectoryWindow("s", (7,), hist, np.zeros((1, t_fut, 2)))


def test_origin_is_last_history_frame(make_window):
    w = make_window()
    assert np.array_equal(w.origin, w.history[:, -1])


def test_window_rejects_bad_input():
    with pytest.raises(ValueError):
        TrajectoryWindow("s", (1,), np.zeros((1, 8, 2)), np.full((1, 12, 2), np.nan))
    with pytest.raises(ValueError):
        TrajectoryWindow("s", (1, 2), np.zeros((1, 8, 2)), np.zeros((1, 12, 2)))
    with pytest.raises(ValueError):
        TrajectoryWindow("s", (1,), np.zeros((1, 8, 2)), np.zeros((1, 12, 2)), dt=0.0)


def test_window_arrays_are_read_only(make_window):
    w = make_window()
    with pytest.raises(ValueError):
        w.history[0, 0, 0] = 1.0


def test_to_absolute_zero_sample_lands_on_origin():
    w = window_at((3.0, 4.0))
    out = to_absolute(PredictionSet(np.zeros((1, 2, 3, 2))), w)
    assert out.frame == "absolute"
    assert np.all(out.samples == np.array([3.0, 4.0]))


def test_to_absolute_zero_origin():
    w = window_at((0.0, 0.0))
    s = np.zeros((1, 1, 3, 2))
    s[0, 0, 0] = (1.0, 0.0)
    assert tuple(to_absolute(PredictionSet(s), w).samples[0, 0, 0]) == (1.0, 0.0)


def test_to_absolute_matches_elementwise_oracle(rng, make_window):
    w = make_window(n_agents=2)
    s = rng.normal(size=(2, 5, 12, 2))
    out = to_absolute(PredictionSet(s), w).samples
    for a in range(2):
        for k in range(5):
            for t in range(12):
                for c in range(2):
                    assert out[a, k, t, c] == s[a, k, t, c] + w.origin[a, c]


def test_frame_tag_blocks_double_shift(make_window):
    w = make_window()
    pred = to_absolute(PredictionSet(np.zeros((3, 1, 12, 2))), w)
    with pytest.raises(FrameError):
        to_absolute(pred, w)
    with pytest.raises(FrameError):
        to_relative(to_relative(pred, w), w)


def test_to_absolute_shape_mismatch(make_window):
    w = make_window(n_agents=3)
    with pytest.raises(ValueError):
        to_absolute(PredictionSet(np.zeros((2, 1, 12, 2))), w)
    with pytest.raises(ValueError):
        to_absolute(PredictionSet(np.zeros((3, 1, 11, 2))), w)


@given(arrays(np.float64, (2, 3, 12, 2), elements=finite), arrays(np.float64, (2, 8, 2), elements=finite))
def test_round_trip_subtracting_origin_is_exact(samples, hist):
    w = TrajectoryWindow("s", (0, 1), hist, np.zeros((2, 12, 2)))
    back = to_absolute(PredictionSet(samples), w).samples - w.origin[:, None, None, :]
    # x + o - o is exact only when no rounding occurs, so compare against the same float ops
    assert np.array_equal(back, (samples + w.origin[:, None, None, :]) - w.origin[:, None, None, :])
    assert np.allclose(back, samples, atol=1e-9)


def test_finite_differences_examples():
    assert np.all(finite_differences(np.ones((5, 2))) == 0.0)
    out = finite_differences(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]))
    assert out.tolist() == [[1.0, 0.0], [1.0, 0.0]]
    with pytest.raises(ValueError):
        finite_differences(np.zeros((1, 2)))


def test_finite_differences_loop_oracle(rng):
    traj = rng.normal(size=(12, 2))
    out = finite_differences(traj)
    for t in range(11):
        assert np.array_equal(out[t], traj[t + 1] - traj[t])


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-2, 2), st.floats(-2, 2))
@settings(max_examples=50)
def test_linear_trajectory_has_constant_differences(x0, y0, vx, vy):
    t = np.arange(10, dtype=np.float64)[:, None]
    traj = np.array([x0, y0]) + t * np.array([vx, vy])
    d = finite_differences(traj)
    assert np.allclose(d, d[0], atol=1e-9)


def test_history_velocities_reuses_first_step():
    hist = np.array([[[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]]])
    v = history_velocities(hist)
    assert v[0].tolist() == [[1.0, 0.0], [1.0, 0.0], [2.0, 0.0]]
