import numpy as np
import pytest

from mfmpc.environments import (ConstVelocityReference, EvalWeights,
                                TRACK_SHAPES, TrackReference, TrackSpec,
                                eval_cost, place_along_track, rise_time)


@pytest.fixture(params=TRACK_SHAPES)
def track(request):
    return TrackReference(TrackSpec(shape=request.param, extents=(15.0, 8.0),
                                    period=12.0, z_amplitude=0.4, z0=1.0))


def test_track_periodicity(track):
    for t in (0.0, 1.7, 5.3):
        p1, v1, a1 = track.reference_at(t)
        p2, v2, a2 = track.reference_at(t + 12.0)
        np.testing.assert_allclose(p1, p2, atol=1e-9)
        np.testing.assert_allclose(v1, v2, atol=1e-9)
        np.testing.assert_allclose(a1, a2, atol=1e-8)


def test_track_velocity_matches_fd(track):
    h = 1e-5
    for t in np.linspace(0.0, 12.0, 17):
        p_m, _, _ = track.reference_at(t - h)
        p_p, _, _ = track.reference_at(t + h)
        _, v, _ = track.reference_at(t)
        np.testing.assert_allclose(v, (p_p - p_m) / (2 * h), atol=1e-6)


def test_track_acceleration_matches_fd(track):
    h = 1e-5
    for t in np.linspace(0.0, 12.0, 9):
        _, v_m, _ = track.reference_at(t - h)
        _, v_p, _ = track.reference_at(t + h)
        _, _, a = track.reference_at(t)
        np.testing.assert_allclose(a, (v_p - v_m) / (2 * h), atol=1e-5)


def test_track_extents(track):
    ts = np.linspace(0.0, 12.0, 4000)
    p, _, _ = track.reference_at(ts)
    assert np.max(np.abs(p[:, 0])) == pytest.approx(7.5, rel=1e-3)
    assert np.max(np.abs(p[:, 1])) == pytest.approx(4.0, rel=1e-3)


def test_track_smooth_across_period_seam(track):
    # second-derivative continuity at the seam
    eps = 1e-6
    _, _, a_before = track.reference_at(12.0 - eps)
    _, _, a_after = track.reference_at(eps)
    np.testing.assert_allclose(a_before, a_after, atol=1e-3)


def test_figure_eight_fits_arena():
    tr = TrackReference(TrackSpec(shape="figure_eight", extents=(15.0, 8.0),
                                  period=20.0))
    ts = np.linspace(0, 20, 2000)
    p, _, _ = tr.reference_at(ts)
    assert np.all(np.abs(p[:, 0]) <= 7.5 + 1e-6)
    assert np.all(np.abs(p[:, 1]) <= 4.0 + 1e-6)


def test_const_velocity_reference():
    ref = ConstVelocityReference([15.0, 0.0, 0.0], p0=[0.0, 0.0, 2.0])
    for t in (0.0, 1.0, 7.3):
        p, v, a = ref.reference_at(t)
        np.testing.assert_allclose(v, [15.0, 0.0, 0.0])
        np.testing.assert_allclose(p, [15.0 * t, 0.0, 2.0])
        np.testing.assert_allclose(a, 0.0)


# ---------------------------------------------------------------------------
# evaluation cost
# ---------------------------------------------------------------------------

def test_eval_cost_perfect_tracking():
    Y = np.random.default_rng(0).normal(size=(50, 20))
    ew = EvalWeights(w=np.ones(20), t_sim=0.04)
    assert eval_cost(Y, Y.copy(), ew) == 0.0


def test_eval_cost_single_step_unit_position_error():
    ew = EvalWeights.positions_only(0.02)
    Y = np.zeros((1, 20))
    Y[0, 0] = 1.0
    assert eval_cost(Y, np.zeros((1, 20)), ew) == pytest.approx(0.02)


def test_eval_cost_quadratic_oracle(rng):
    w = rng.random(20)
    ew = EvalWeights(w=w, t_sim=0.04)
    Y = rng.normal(size=(30, 20))
    Y_ref = rng.normal(size=(30, 20))
    expected = 0.04 * sum(float(np.sum(w * (Y[k] - Y_ref[k]) ** 2))
                          for k in range(30))
    assert eval_cost(Y, Y_ref, ew) == pytest.approx(expected, rel=1e-12)


def test_eval_cost_segmentation_invariance(rng):
    w = rng.random(20)
    ew = EvalWeights(w=w, t_sim=0.02)
    Y = rng.normal(size=(40, 20))
    Y_ref = rng.normal(size=(40, 20))
    whole = eval_cost(Y, Y_ref, ew)
    parts = sum(eval_cost(Y[a:b], Y_ref[a:b], ew)
                for a, b in ((0, 13), (13, 25), (25, 40)))
    assert whole == pytest.approx(parts, rel=1e-12)


def test_eval_cost_length_mismatch():
    ew = EvalWeights(w=np.ones(20), t_sim=0.04)
    with pytest.raises(ValueError):
        eval_cost(np.zeros((3, 20)), np.zeros((4, 20)), ew)


# ---------------------------------------------------------------------------
# obstacle placement and step helper
# ---------------------------------------------------------------------------

def test_place_along_track_near_path():
    tr = TrackReference(TrackSpec(shape="figure_eight", extents=(15.0, 8.0),
                                  period=20.0))
    obs = place_along_track(tr, [1.0] * 10, seed=3, displacement=1.0)
    assert len(obs) == 10
    ts = np.linspace(0, 20, 2000)
    p, _, _ = tr.reference_at(ts)
    for o in obs:
        d = np.min(np.linalg.norm(p - o.center, axis=1))
        assert d <= np.sqrt(3.0) + 1e-6      # at most the jitter radius away
    # deterministic under the seed
    obs2 = place_along_track(tr, [1.0] * 10, seed=3, displacement=1.0)
    for a, b in zip(obs, obs2):
        np.testing.assert_array_equal(a.center, b.center)


def test_rise_time():
    ts = np.linspace(0.0, 5.0, 51)
    v = np.clip(ts, 0.0, 2.0)
    assert rise_time(ts, v, 2.0) == pytest.approx(1.8)
    assert rise_time(ts, v, 0.0) == 0.0
    assert rise_time(ts, np.zeros_like(ts), 2.0) == float("inf")
