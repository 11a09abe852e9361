import numpy as np
import pytest

from switchsde.model import (
    HybridModel,
    ObservationSet,
    TimeGrid,
    drift_from_rate_setpoint,
    rate_setpoint_from_drift,
    snap_observations,
    validate_model,
)

from conftest import two_mode_model


def test_valid_model_has_no_violations():
    assert validate_model(two_mode_model()) == []


def test_rate_row_sum_violation_names_the_row():
    m = two_mode_model()
    bad = m.replace(rates=np.array([[-0.1, 0.2], [0.2, -0.2]]))
    v = validate_model(bad)
    assert len(v) == 1
    assert "row 0" in v[0]


def test_negative_offdiagonal_rate_flagged():
    m = two_mode_model()
    bad = m.replace(rates=np.array([[0.1, -0.1], [0.2, -0.2]]))
    v = validate_model(bad)
    assert any("negative off-diagonal" in s for s in v)


def test_non_spd_dispersion_flagged():
    m = two_mode_model()
    bad = m.replace(D=np.array([[[0.25]], [[-0.1]]]))
    v = validate_model(bad)
    assert any("D (mode 1)" in s for s in v)


def test_p0_must_sum_to_one():
    m = two_mode_model(p0=(0.3, 0.3))
    assert any("p0" in s for s in validate_model(m))


def test_shape_mismatch_raises_at_construction():
    with pytest.raises(ValueError, match="b_p"):
        HybridModel(
            rates=np.array([[-0.2, 0.2], [0.2, -0.2]]),
            A_p=np.zeros((2, 1, 1)),
            b_p=np.zeros(2),
            D=np.ones((2, 1, 1)),
            p0=np.array([0.5, 0.5]),
            mu0=np.zeros((2, 1)),
            Sigma0=np.ones((2, 1, 1)),
            Sigma_obs=np.eye(1),
        )


def test_rate_setpoint_roundtrip():
    rng = np.random.default_rng(0)
    alpha = rng.normal(size=(3, 2, 2))
    alpha = alpha @ np.swapaxes(alpha, 1, 2) + 0.5 * np.eye(2)
    beta = rng.normal(size=(3, 2))
    A_p, b_p = drift_from_rate_setpoint(alpha, beta)
    al2, be2 = rate_setpoint_from_drift(A_p, b_p)
    np.testing.assert_allclose(al2, alpha, atol=1e-12)
    np.testing.assert_allclose(be2, beta, atol=1e-12)


# ---- time grid ----


def test_grid_requires_integer_multiple():
    with pytest.raises(ValueError, match="integer multiple"):
        TimeGrid(T=1.0, h=0.3)


def test_grid_nodes_and_times():
    g = TimeGrid(T=2.0, h=0.5)
    assert g.M == 4
    np.testing.assert_allclose(g.times, [0.0, 0.5, 1.0, 1.5, 2.0])


def test_snap_basic():
    g = TimeGrid(T=10.0, h=0.01)
    obs = ObservationSet(times=np.array([3.004]), values=np.array([[0.0]]))
    assert snap_observations(obs, g).obs_nodes[0] == 300


def test_snap_tie_goes_to_later_node():
    g = TimeGrid(T=1.0, h=0.1)
    obs = ObservationSet(times=np.array([0.25, 0.85]), values=np.zeros((2, 1)))
    np.testing.assert_array_equal(snap_observations(obs, g).obs_nodes, [3, 9])


def test_snap_collision_is_an_error():
    g = TimeGrid(T=1.0, h=0.1)
    obs = ObservationSet(times=np.array([0.26, 0.29]), values=np.zeros((2, 1)))
    with pytest.raises(ValueError, match="grid too coarse"):
        snap_observations(obs, g)


def test_snap_never_moves_more_than_half_step():
    rng = np.random.default_rng(7)
    g = TimeGrid(T=5.0, h=0.05)
    t = np.sort(rng.uniform(0.2, 4.8, size=40))
    t = t[np.diff(np.concatenate([[0.0], t])) > 0.06]
    obs = ObservationSet(times=t, values=np.zeros((t.size, 1)))
    nodes = snap_observations(obs, g).obs_nodes
    assert np.max(np.abs(nodes * g.h - t)) <= 0.5 * g.h * (1 + 1e-12)


def test_snap_rejects_beyond_horizon():
    g = TimeGrid(T=1.0, h=0.1)
    obs = ObservationSet(times=np.array([1.2]), values=np.zeros((1, 1)))
    with pytest.raises(ValueError, match="beyond horizon"):
        snap_observations(obs, g)


def test_observation_times_must_increase():
    with pytest.raises(ValueError, match="strictly increasing"):
        ObservationSet(times=np.array([0.2, 0.2]), values=np.zeros((2, 1)))
