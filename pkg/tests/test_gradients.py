"""Finite-difference validation of every smoother gradient.

The discretized ELBO is an ordinary function of the control arrays, so
each analytic gradient entry must match a central difference of the
objective.  Control gradients are densities: multiplying by the step h
gives the derivative with respect to a single interval's constant
control value.
"""

import numpy as np
import pytest

from switchsde.model import (
    HybridModel,
    ObservationSet,
    TimeGrid,
    drift_from_rate_setpoint,
    snap_observations,
)
from switchsde import learn, smoother
from switchsde.smoother import VariationalControls

H = 1e-3
EPS = 1e-6
TOL = 1e-4


def _model():
    alpha = np.array([[[1.5]], [[1.2]]])
    beta = np.array([[-1.0], [0.8]])
    A_p, b_p = drift_from_rate_setpoint(alpha, beta)
    return HybridModel(
        rates=np.array([[-0.2, 0.2], [0.3, -0.3]]),
        A_p=A_p,
        b_p=b_p,
        D=np.array([[[0.25]], [[0.4]]]),
        p0=np.array([0.35, 0.65]),
        mu0=np.array([[-0.5], [0.6]]),
        Sigma0=np.array([[[0.2]], [[0.3]]]),
        Sigma_obs=np.array([[0.1]]),
    )


@pytest.fixture(scope="module", params=["interior", "with_boundary"])
def setup(request):
    """Perturbed controls on a 10-interval grid with three observations.

    The boundary variant puts observations on the first and last node to
    exercise the reset bookkeeping at both ends of the sweep.
    """
    model = _model()
    grid = TimeGrid(T=10 * H, h=H)
    if request.param == "interior":
        t_obs = np.array([3 * H, 6 * H, 9 * H])
    else:
        t_obs = np.array([0.4 * H, 5 * H, 10 * H])  # snaps to nodes 0, 5, 10
    obs = ObservationSet(times=t_obs, values=np.array([[0.4], [-0.3], [0.8]]))
    grid = snap_observations(obs, grid)

    rng = np.random.default_rng(7)
    M, K, n = grid.M, model.K, model.n
    A = np.tile(model.A_p, (M, 1, 1, 1)) + 0.25 * rng.standard_normal((M, K, n, n))
    b = np.tile(model.b_p, (M, 1, 1)) + 0.3 * rng.standard_normal((M, K, n))
    rates = np.tile(model.rates, (M, 1, 1))
    off = ~np.eye(K, dtype=bool)
    rates[:, off] = rates[:, off] * rng.uniform(0.5, 1.8, size=(M, K * (K - 1)))
    di = np.arange(K)
    rates[:, di, di] = 0.0
    rates[:, di, di] = -rates.sum(axis=2)
    controls = VariationalControls(
        A=A,
        b=b,
        rates=rates,
        q0=np.array([0.45, 0.55]),
        mu0=model.mu0 + 0.3 * rng.standard_normal((K, n)),
        Sigma0=model.Sigma0 * rng.uniform(0.7, 1.4, size=(K, 1, 1)),
    )

    marg = smoother.propagate(controls, model, grid)
    mult = smoother.backward_multipliers(controls, model, grid, obs, marg)
    gc = smoother.grad_controls(controls, model, grid, marg, mult)
    gi = smoother.grad_initials(controls, model, mult)

    def objective(c):
        m = smoother.propagate(c, model, grid)
        return smoother.elbo(c, model, grid, obs, m).elbo

    return model, grid, controls, gc, gi, objective, obs


def _rel(an, fd):
    return abs(an - fd) / max(abs(an), abs(fd), 1e-7)


def _fd(objective, controls, plus, minus):
    return (objective(plus) - objective(minus)) / (2.0 * EPS)


def test_grad_drift_matrix(setup):
    model, grid, controls, gc, gi, f, obs = setup
    worst = 0.0
    for k in range(controls.M):
        for z in range(controls.K):
            Ap = controls.A.copy()
            Am = controls.A.copy()
            Ap[k, z, 0, 0] += EPS
            Am[k, z, 0, 0] -= EPS
            fd = _fd(f, controls, controls.replace(A=Ap), controls.replace(A=Am))
            worst = max(worst, _rel(gc.A[k, z, 0, 0] * grid.h, fd))
    assert worst < TOL, f"drift matrix gradient: worst relative error {worst:.3e}"


def test_grad_drift_offset(setup):
    model, grid, controls, gc, gi, f, obs = setup
    worst = 0.0
    for k in range(controls.M):
        for z in range(controls.K):
            bp = controls.b.copy()
            bm = controls.b.copy()
            bp[k, z, 0] += EPS
            bm[k, z, 0] -= EPS
            fd = _fd(f, controls, controls.replace(b=bp), controls.replace(b=bm))
            worst = max(worst, _rel(gc.b[k, z, 0] * grid.h, fd))
    assert worst < TOL, f"drift offset gradient: worst relative error {worst:.3e}"


def _with_rate(controls, k, z, w, value):
    rates = controls.rates.copy()
    rates[k, z, w] = value
    K = rates.shape[1]
    di = np.arange(K)
    rates[k, di, di] = 0.0
    rates[k, di, di] = -rates[k].sum(axis=1)
    return controls.replace(rates=rates)


def test_grad_rates(setup):
    model, grid, controls, gc, gi, f, obs = setup
    K = controls.K
    worst = 0.0
    for k in range(controls.M):
        for z in range(K):
            for w in range(K):
                if w == z:
                    continue
                r = controls.rates[k, z, w]
                fd = _fd(
                    f,
                    controls,
                    _with_rate(controls, k, z, w, r + EPS),
                    _with_rate(controls, k, z, w, r - EPS),
                )
                worst = max(worst, _rel(gc.rates[k, z, w] * grid.h, fd))
    assert worst < TOL, f"rate gradient: worst relative error {worst:.3e}"


def test_grad_initial_mean(setup):
    model, grid, controls, gc, gi, f, obs = setup
    worst = 0.0
    for z in range(controls.K):
        mp = controls.mu0.copy()
        mm = controls.mu0.copy()
        mp[z, 0] += EPS
        mm[z, 0] -= EPS
        fd = _fd(f, controls, controls.replace(mu0=mp), controls.replace(mu0=mm))
        worst = max(worst, _rel(gi.mu0[z, 0], fd))
    assert worst < TOL, f"initial mean gradient: worst relative error {worst:.3e}"


def test_grad_initial_cholesky(setup):
    model, grid, controls, gc, gi, f, obs = setup
    C = np.linalg.cholesky(controls.Sigma0)
    worst = 0.0
    for z in range(controls.K):
        Cp = C.copy()
        Cm = C.copy()
        Cp[z, 0, 0] += EPS
        Cm[z, 0, 0] -= EPS
        fd = _fd(
            f,
            controls,
            controls.replace(Sigma0=Cp @ np.swapaxes(Cp, 1, 2)),
            controls.replace(Sigma0=Cm @ np.swapaxes(Cm, 1, 2)),
        )
        worst = max(worst, _rel(gi.C0[z, 0, 0], fd))
    assert worst < TOL, f"initial factor gradient: worst relative error {worst:.3e}"


def test_grad_initial_weights(setup):
    model, grid, controls, gc, gi, f, obs = setup
    worst = 0.0
    for z in range(controls.K - 1):
        qp = controls.q0.copy()
        qm = controls.q0.copy()
        qp[z] += EPS
        qp[-1] -= EPS
        qm[z] -= EPS
        qm[-1] += EPS
        fd = _fd(f, controls, controls.replace(q0=qp), controls.replace(q0=qm))
        worst = max(worst, _rel(gi.q0_red[z], fd))
    assert worst < TOL, f"initial weight gradient: worst relative error {worst:.3e}"


# ---------------------------------------------------------------------------
# prior-parameter (M-step) gradients
# ---------------------------------------------------------------------------


def _model_objective(controls, grid, obs):
    def f(m):
        marg = smoother.propagate(controls, m, grid)
        return smoother.elbo(controls, m, grid, obs, marg).elbo

    return f


def test_grad_dispersion(setup):
    model, grid, controls, gc, gi, f, obs = setup
    marg = smoother.propagate(controls, model, grid)
    g = learn.grad_dispersion(marg, controls, model, grid, obs)
    fm = _model_objective(controls, grid, obs)
    worst = 0.0
    for z in range(model.K):
        Dp = model.D.copy()
        Dm = model.D.copy()
        Dp[z, 0, 0] += EPS
        Dm[z, 0, 0] -= EPS
        fd = (fm(model.replace(D=Dp)) - fm(model.replace(D=Dm))) / (2.0 * EPS)
        worst = max(worst, _rel(g[z, 0, 0], fd))
    assert worst < TOL, f"dispersion gradient: worst relative error {worst:.3e}"


def test_grad_dispersion_long_horizon():
    """The dispersion gradient is a near-cancellation of the explicit
    drift-KL term against the covariance pullback, and both grow with
    the horizon.  A short grid hides integrator-order slack in the
    pullback, so this check runs long enough for any such slack to
    dominate the difference and flip the sign."""
    model = _model()
    grid = TimeGrid(T=10.0, h=0.05)
    t_obs = np.linspace(0.5, 9.5, 19)
    rng = np.random.default_rng(3)
    obs = ObservationSet(times=t_obs, values=rng.standard_normal((19, 1)))
    grid = snap_observations(obs, grid)

    M, K, n = grid.M, model.K, model.n
    A = np.tile(model.A_p, (M, 1, 1, 1)) + 0.1 * rng.standard_normal((M, K, n, n))
    b = np.tile(model.b_p, (M, 1, 1)) + 0.1 * rng.standard_normal((M, K, n))
    controls = VariationalControls(
        A=A,
        b=b,
        rates=np.tile(model.rates, (M, 1, 1)),
        q0=np.array([0.45, 0.55]),
        mu0=model.mu0.copy(),
        Sigma0=model.Sigma0.copy(),
    )
    marg = smoother.propagate(controls, model, grid)
    g = learn.grad_dispersion(marg, controls, model, grid, obs)
    fm = _model_objective(controls, grid, obs)
    worst = 0.0
    for z in range(model.K):
        Dp = model.D.copy()
        Dm = model.D.copy()
        Dp[z, 0, 0] += EPS
        Dm[z, 0, 0] -= EPS
        fd = (fm(model.replace(D=Dp)) - fm(model.replace(D=Dm))) / (2.0 * EPS)
        worst = max(worst, _rel(g[z, 0, 0], fd))
    assert worst < 1e-5, (
        f"long-horizon dispersion gradient: worst relative error {worst:.3e}"
    )


def test_grad_prior_drift_matrix(setup):
    model, grid, controls, gc, gi, f, obs = setup
    marg = smoother.propagate(controls, model, grid)
    gA, gb = learn.grad_prior_drift(marg, controls, model, grid)
    fm = _model_objective(controls, grid, obs)
    worst = 0.0
    for z in range(model.K):
        Ap = model.A_p.copy()
        Am = model.A_p.copy()
        Ap[z, 0, 0] += EPS
        Am[z, 0, 0] -= EPS
        fd = (fm(model.replace(A_p=Ap)) - fm(model.replace(A_p=Am))) / (2.0 * EPS)
        worst = max(worst, _rel(gA[z, 0, 0], fd))
    assert worst < TOL, f"prior drift matrix gradient: worst relative error {worst:.3e}"


def test_grad_prior_drift_offset(setup):
    model, grid, controls, gc, gi, f, obs = setup
    marg = smoother.propagate(controls, model, grid)
    gA, gb = learn.grad_prior_drift(marg, controls, model, grid)
    fm = _model_objective(controls, grid, obs)
    worst = 0.0
    for z in range(model.K):
        bp = model.b_p.copy()
        bm = model.b_p.copy()
        bp[z, 0] += EPS
        bm[z, 0] -= EPS
        fd = (fm(model.replace(b_p=bp)) - fm(model.replace(b_p=bm))) / (2.0 * EPS)
        worst = max(worst, _rel(gb[z, 0], fd))
    assert worst < TOL, f"prior drift offset gradient: worst relative error {worst:.3e}"
