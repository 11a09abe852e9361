"""Variational EM for hybrid switching diffusions.

The E-step is :func:`switchsde.smoother.smooth`.  The M-step updates the
prior parameters at fixed variational controls:

* jump rates and observation covariance have closed forms (ratio of
  trapezoidal integrals, respectively a weighted residual average);
* dispersion and prior drift take one backtracked gradient ascent step;
* prior initial law is matched to the variational initial law exactly.

Every accepted update is verified against the re-evaluated objective,
so the interleaved E/M trace is non-decreasing up to the stated
tolerance.  Closed-form updates optimize their own term at fixed
controls and marginals; they are still re-checked because the objective
couples terms through floors and clamps.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .model import (
    HybridModel,
    NumericalError,
    ObservationSet,
    TimeGrid,
    drift_from_rate_setpoint,
    snap_observations,
)
from .smoother import (
    SmootherOptions,
    SmoothResult,
    VariationalControls,
    VariationalMarginals,
    elbo,
    propagate,
    smooth,
    _backward_sweep,
    _lyap_op,
    _p4,
    _r4,
)
from .simulate import rng_from

__all__ = [
    "LearnOptions",
    "VemResult",
    "update_rates",
    "update_obs_covariance",
    "grad_dispersion",
    "grad_prior_drift",
    "update_prior_initials",
    "init_kmeans",
    "vem",
]


# ---------------------------------------------------------------------------
# options and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LearnOptions:
    """Outer-loop controls.

    The learn_* flags enable parameter blocks individually; with all of
    them off, vem reduces to a single smoothing pass.  gamma and
    max_backtracks drive the M-step line searches; the E-step has its
    own knobs in `smoother`.  m_cycles bounds how many times the block
    updates are swept per outer iteration: sweeps are cheap next to an
    E-step, and repeating them lets the parameter phase reach its own
    stall instead of advancing one notch per smoothing pass.

    accel turns on Anderson mixing over the parameter iterates.
    Alternating schemes inch along a flat curved valley when most
    latent nodes sit between observations; mixing the last few
    fixed-point residuals proposes a candidate that follows the
    valley, each candidate verified by a warm-started smoothing pass
    and accepted only on strict improvement, so the trace stays
    monotone.  Convergence additionally requires the parameter vector
    to stall (tol_theta), because on such valleys the objective can
    stagnate many iterations before the parameters settle.
    """

    max_outer: int = 30
    tol_outer: float = 1e-6
    tol_theta: float = 1e-5
    learn_rates: bool = True
    learn_obs_cov: bool = True
    learn_dispersion: bool = True
    learn_drift: bool = True
    learn_initials: bool = True
    gamma: float = 0.5
    max_backtracks: int = 20
    rate_floor: float = 1e-8
    m_cycles: int = 8
    accel: bool = True
    accel_window: int = 5
    smoother: SmootherOptions = field(default_factory=SmootherOptions)

    def __post_init__(self):
        if self.max_outer < 1:
            raise ValueError("LearnOptions: max_outer must be >= 1")
        if self.tol_outer <= 0.0:
            raise ValueError("LearnOptions: tol_outer must be > 0")
        if self.tol_theta <= 0.0:
            raise ValueError("LearnOptions: tol_theta must be > 0")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("LearnOptions: gamma must lie in (0, 1)")
        if self.m_cycles < 1:
            raise ValueError("LearnOptions: m_cycles must be >= 1")
        if self.accel_window < 1:
            raise ValueError("LearnOptions: accel_window must be >= 1")


@dataclass(frozen=True)
class VemResult:
    """Learned model, final E-step result, and the accepted-step trace."""

    model: HybridModel
    result: SmoothResult
    elbo_trace: np.ndarray
    n_outer: int
    converged: bool
    flags: tuple = ()


# ---------------------------------------------------------------------------
# closed-form M-steps
# ---------------------------------------------------------------------------


def update_rates(
    marginals: VariationalMarginals,
    controls: VariationalControls,
    grid: TimeGrid,
    rates_prev: np.ndarray,
    rate_floor: float = 1e-8,
) -> tuple:
    """Closed-form prior rate update Lambda_zw = int q_z L~_zw / int q_z.

    Both integrals use the same trapezoidal weights as the objective's
    jump KL term, so the update zeroes the exact discrete gradient.
    Off-diagonal entries with positive mass are floored at rate_floor;
    entries whose numerator vanishes stay zero (the controls never use
    that transition).  A mode with total occupancy below 1e-12 keeps
    its previous row and is flagged.

    Returns (rates, flags).
    """
    q = marginals.qZ
    w = q[:-1] + q[1:]  # (M, K) trapezoid weights per interval
    h = grid.h
    num = 0.5 * h * np.einsum("mz,mzw->zw", w, controls.rates)
    den = 0.5 * h * w.sum(axis=0)  # (K,)
    K = den.shape[0]
    rates = np.array(rates_prev, dtype=float, copy=True)
    flags = []
    for z in range(K):
        if den[z] < 1e-12:
            flags.append(f"unidentifiable mode {z}")
            continue
        row = num[z] / den[z]
        row[row > 0.0] = np.maximum(row[row > 0.0], rate_floor)
        rates[z] = row
        rates[z, z] = 0.0
    np.fill_diagonal(rates, 0.0)
    np.fill_diagonal(rates, -rates.sum(axis=1))
    return rates, tuple(flags)


def update_obs_covariance(
    marginals: VariationalMarginals,
    obs: ObservationSet,
    grid: TimeGrid,
    eig_floor: float = 1e-12,
) -> np.ndarray:
    """Closed-form observation covariance.

    Sigma_obs = (1/N) sum_i sum_z q_Z(z, t_i) [(x_i - mu)(x_i - mu)^T
    + Sigma(z, t_i)], symmetrized and eigenvalue-floored.  This is the
    stationary point of the expected log-likelihood term at fixed
    marginals.
    """
    if grid.obs_nodes is None:
        raise ValueError("update_obs_covariance: grid has no observation nodes")
    nodes = np.asarray(grid.obs_nodes, dtype=np.int64)
    if nodes.size != len(obs):
        raise ValueError("update_obs_covariance: obs/grid node count mismatch")
    if len(obs) < 1:
        raise ValueError("update_obs_covariance: need at least one observation")
    q = marginals.qZ[nodes]  # (N, K)
    mu = marginals.mu[nodes]  # (N, K, n)
    Sig = marginals.Sigma[nodes]  # (N, K, n, n)
    r = obs.values[:, None, :] - mu  # (N, K, n)
    outer = np.einsum("ik,ika,ikb->ab", q, r, r)
    S = (outer + np.einsum("ik,ikab->ab", q, Sig)) / len(obs)
    return _pd_floor(S, eig_floor)


def _pd_floor(S: np.ndarray, floor: float) -> np.ndarray:
    """Symmetrize and floor the eigenvalues of a square matrix."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    return (V * np.maximum(w, floor)) @ V.T


def update_prior_initials(
    controls: VariationalControls, model: HybridModel
) -> HybridModel:
    """Match the prior initial law to the variational one exactly.

    Sets p0 = q_Z(0), mu0 = mu(0, z), Sigma0 = Sigma(0, z), which zeroes
    the initial KL term; applying it twice is a no-op.
    """
    p0 = np.maximum(controls.q0, 0.0)
    p0 = p0 / p0.sum()
    return model.replace(p0=p0, mu0=controls.mu0, Sigma0=controls.Sigma0)


# ---------------------------------------------------------------------------
# gradient M-steps
# ---------------------------------------------------------------------------


def _covariance_pullback(
    marginals: VariationalMarginals,
    controls: VariationalControls,
    model: HybridModel,
    grid: TimeGrid,
    obs: ObservationSet,
) -> np.ndarray:
    """Exact sensitivity of the objective to D(z) through the covariance
    recursion, shape (K, n, n).

    The forward pass is affine per interval, vec(Sigma)' = P4 vec(Sigma)
    + h R4 vec(D), and the objective touches the covariances only
    through the trapezoid drift-KL quadrature and the observation
    moment-matching terms.  Accumulating those node-local derivatives
    backward through the transposed interval maps therefore gives the
    derivative of the exact discrete objective, not a continuum
    approximation of it.  That distinction matters: the dispersion
    gradient is a near-cancellation of this term against the explicit
    drift-KL term, so integrator-order slack that is harmless elsewhere
    can flip its sign on long horizons.
    """
    if len(obs) and grid.obs_nodes is None:
        raise ValueError(
            "covariance pullback: grid.obs_nodes must be set (use snap_observations)"
        )
    h = grid.h
    M, K, n = controls.M, controls.K, controls.n
    q = marginals.qZ
    Dinv = np.linalg.inv(model.D)
    Ab = controls.A - model.A_p[None]
    AtDA = np.einsum("mkji,kjl,mklr->mkir", Ab, Dinv, Ab)  # (M, K, n, n)

    loc = np.zeros((M + 1, K, n, n))
    loc[:-1] -= 0.25 * h * q[:-1, :, None, None] * AtDA
    loc[1:] -= 0.25 * h * q[1:, :, None, None] * AtDA
    if len(obs):
        Rinv = np.linalg.inv(model.Sigma_obs)
        nodes = grid.obs_nodes
        loc[nodes] -= 0.5 * q[nodes][:, :, None, None] * Rinv[None, None]

    Lop = _lyap_op(controls.A)
    F = np.swapaxes(_p4(h * Lop), -1, -2)
    _, psi = _backward_sweep(
        F, np.zeros((M, K, n * n)), loc.reshape(M + 1, K, n * n)
    )
    R = _r4(h * Lop)
    pull = h * np.einsum("mkba,mkb->ka", R, psi[1:]).reshape(K, n, n)
    return 0.5 * (pull + np.swapaxes(pull, -1, -2))


def grad_dispersion(
    marginals: VariationalMarginals,
    controls: VariationalControls,
    model: HybridModel,
    grid: TimeGrid,
    obs: ObservationSet,
) -> np.ndarray:
    """Ascent direction for the per-mode dispersion D(z), shape (K, n, n).

    Two contributions: the explicit drift-KL dependence
    (1/2) int q_z D^-1 S_z D^-1 dt with S_z the second moment of the
    drift mismatch, quadratured like the objective; and the exact
    pullback of the covariance-recursion dependence (see
    _covariance_pullback).  Symmetric by construction (up to float
    noise, which is symmetrized away).
    """
    h = grid.h
    Dinv = np.linalg.inv(model.D)
    Ab = controls.A - model.A_p[None]  # (M, K, n, n)
    bb = controls.b - model.b_p[None]  # (M, K, n)
    q = marginals.qZ

    def explicit(mu, Sigma, qn):
        # q-weighted D^-1 E[(drift gap)(drift gap)^T] D^-1 at one
        # quadrature point per interval
        r = np.einsum("mkij,mkj->mki", Ab, mu) + bb
        S = np.einsum("mka,mkb->mkab", r, r) + np.einsum(
            "mkia,mkab,mkjb->mkij", Ab, Sigma, Ab
        )
        W = np.einsum("kia,mkab,kbj->mkij", Dinv, S, Dinv)
        return np.einsum("mk,mkij->kij", qn, W)

    G = 0.25 * h * (
        explicit(marginals.mu[:-1], marginals.Sigma[:-1], q[:-1])
        + explicit(marginals.mu[1:], marginals.Sigma[1:], q[1:])
    )
    G = G + _covariance_pullback(marginals, controls, model, grid, obs)
    return 0.5 * (G + np.swapaxes(G, -1, -2))


def grad_prior_drift(
    marginals: VariationalMarginals,
    controls: VariationalControls,
    model: HybridModel,
    grid: TimeGrid,
) -> tuple:
    """Ascent directions for the prior drift blocks A_p(z) and b_p(z).

    The prior drift appears only in the drift KL, so the gradients are
    explicit quadratures; the marginals do not move when A_p or b_p
    change at fixed controls.  Returns (G_A (K, n, n), G_b (K, n)).
    """
    h = grid.h
    Dinv = np.linalg.inv(model.D)
    Ab = controls.A - model.A_p[None]
    bb = controls.b - model.b_p[None]
    q = marginals.qZ

    def pieces(mu, Sigma, qn):
        r = np.einsum("mkij,mkj->mki", Ab, mu) + bb
        T = np.einsum("mkia,mkab->mkib", Ab, Sigma) + np.einsum(
            "mki,mkj->mkij", r, mu
        )
        GA = np.einsum("mk,kia,mkaj->kij", qn, Dinv, T)
        Gb = np.einsum("mk,kia,mka->ki", qn, Dinv, r)
        return GA, Gb

    GA_l, Gb_l = pieces(marginals.mu[:-1], marginals.Sigma[:-1], q[:-1])
    GA_r, Gb_r = pieces(marginals.mu[1:], marginals.Sigma[1:], q[1:])
    return 0.5 * h * (GA_l + GA_r), 0.5 * h * (Gb_l + Gb_r)


# ---------------------------------------------------------------------------
# conditional-optimum candidates for the gradient blocks
# ---------------------------------------------------------------------------


def _solve_prior_drift(
    marginals: VariationalMarginals, controls: VariationalControls, grid: TimeGrid
):
    """Exact conditional optimum of (A_p, b_p) at fixed controls.

    The drift KL is a positive quadratic in the prior drift, so the
    per-mode weighted least squares below maximizes the objective over
    this block outright (marginals do not depend on A_p, b_p).  Returns
    (A_p, b_p) or None when a mode's moment system is singular.
    """
    h = grid.h
    q = marginals.qZ
    mu, Sig = marginals.mu, marginals.Sigma
    K, n = mu.shape[1], mu.shape[2]

    def moments(mu_k, Sig_k, qn):
        E2 = Sig_k + np.einsum("mki,mkj->mkij", mu_k, mu_k)
        W2 = np.einsum("mk,mkij->kij", qn, E2)
        W1 = np.einsum("mk,mki->ki", qn, mu_k)
        W0 = qn.sum(axis=0)
        Amu = np.einsum("mkij,mkj->mki", controls.A, mu_k) + controls.b
        Y2 = np.einsum("mk,mkia,mkaj->kij", qn, controls.A, E2) + np.einsum(
            "mk,mki,mkj->kij", qn, controls.b, mu_k
        )
        Y1 = np.einsum("mk,mki->ki", qn, Amu)
        return W2, W1, W0, Y2, Y1

    left = moments(mu[:-1], Sig[:-1], q[:-1])
    right = moments(mu[1:], Sig[1:], q[1:])
    W2, W1, W0, Y2, Y1 = (0.5 * h * (a + b) for a, b in zip(left, right))

    A_p = np.empty((K, n, n))
    b_p = np.empty((K, n))
    for z in range(K):
        Phi = np.empty((n + 1, n + 1))
        Phi[:n, :n] = W2[z]
        Phi[:n, n] = W1[z]
        Phi[n, :n] = W1[z]
        Phi[n, n] = W0[z]
        Y = np.concatenate([Y2[z], Y1[z][:, None]], axis=1)  # (n, n+1)
        try:
            X = np.linalg.solve(Phi.T, Y.T).T
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(X)):
            return None
        A_p[z] = X[:, :n]
        b_p[z] = X[:, n]
    return A_p, b_p


def _solve_dispersion(
    marginals: VariationalMarginals,
    controls: VariationalControls,
    model: HybridModel,
    grid: TimeGrid,
    obs: ObservationSet,
):
    """Stationarity candidate for D(z): solve D P D = C/2 per mode,
    where C is the drift-mismatch second-moment quadrature and P the
    (negated) exact covariance pullback.  Returns a (K, n, n) stack or
    None when P is not positive definite; the caller verifies the
    candidate against the re-propagated objective."""
    h = grid.h
    Ab = controls.A - model.A_p[None]
    bb = controls.b - model.b_p[None]
    q = marginals.qZ

    def second_moment(mu, Sigma, qn):
        r = np.einsum("mkij,mkj->mki", Ab, mu) + bb
        S = np.einsum("mka,mkb->mkab", r, r) + np.einsum(
            "mkia,mkab,mkjb->mkij", Ab, Sigma, Ab
        )
        return np.einsum("mk,mkij->kij", qn, S)

    C = 0.5 * h * (
        second_moment(marginals.mu[:-1], marginals.Sigma[:-1], q[:-1])
        + second_moment(marginals.mu[1:], marginals.Sigma[1:], q[1:])
    )

    P = -_covariance_pullback(marginals, controls, model, grid, obs)

    D = np.empty_like(model.D)
    for z in range(model.K):
        w, V = np.linalg.eigh(P[z])
        if w.min() <= 1e-14:
            return None
        Ph = (V * np.sqrt(w)) @ V.T  # P^{1/2}
        Pmh = (V / np.sqrt(w)) @ V.T  # P^{-1/2}
        X = 0.5 * Ph @ (0.5 * (C[z] + C[z].T)) @ Ph
        wx, Vx = np.linalg.eigh(X)
        root = (Vx * np.sqrt(np.maximum(wx, 0.0))) @ Vx.T
        D[z] = _pd_floor(Pmh @ root @ Pmh, 1e-10)
    return D


# ---------------------------------------------------------------------------
# empirical initialization
# ---------------------------------------------------------------------------


def _kmeans_once(x: np.ndarray, K: int, rng) -> tuple:
    """One k-means run (k-means++ seeding, Lloyd iterations).

    Returns (centers, labels) or None when a cluster empties.
    """
    N = x.shape[0]
    centers = np.empty((K, x.shape[1]))
    centers[0] = x[rng.integers(N)]
    for j in range(1, K):
        d2 = np.min(
            ((x[:, None, :] - centers[None, :j, :]) ** 2).sum(axis=2), axis=1
        )
        tot = d2.sum()
        p = None if tot <= 0.0 else d2 / tot
        centers[j] = x[rng.choice(N, p=p)]
    labels = np.zeros(N, dtype=np.int64)
    for _ in range(100):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d2, axis=1)
        counts = np.bincount(new, minlength=K)
        if counts.min() == 0:
            return None
        for z in range(K):
            centers[z] = x[new == z].mean(axis=0)
        if np.array_equal(new, labels):
            break
        labels = new
    return centers, labels


def init_kmeans(
    obs: ObservationSet, K: int, seed, rate_init: float = 1.0
) -> HybridModel:
    """Empirical starting model from a k-means clustering of the data.

    Cluster means become the per-mode set points (alpha_z = identity)
    and prior initial means; intra-cluster covariances become Sigma0;
    their size-weighted average seeds both Sigma_obs and every D(z).
    Rates start at rate_init off the diagonal and p0 uniform.  An empty
    cluster triggers a re-seed, ten attempts at most.
    """
    x = np.asarray(obs.values, dtype=float)
    N, n = x.shape
    if N < K:
        raise ValueError(f"init_kmeans: need at least K={K} observations, got {N}")
    rng = rng_from(seed)
    fit = None
    for _ in range(10):
        fit = _kmeans_once(x, K, rng)
        if fit is not None:
            break
    if fit is None:
        raise NumericalError("init_kmeans: empty cluster in 10 seeding attempts")
    centers, labels = fit

    Sigma0 = np.empty((K, n, n))
    counts = np.bincount(labels, minlength=K).astype(float)
    pooled = np.zeros((n, n))
    for z in range(K):
        r = x[labels == z] - centers[z]
        S = (r.T @ r) / max(r.shape[0], 1)
        Sigma0[z] = _pd_floor(S, 1e-6)
        pooled += counts[z] * Sigma0[z]
    pooled = _pd_floor(pooled / N, 1e-6)

    alpha = np.broadcast_to(np.eye(n), (K, n, n))
    A_p, b_p = drift_from_rate_setpoint(alpha, centers)
    rates = np.full((K, K), float(rate_init))
    np.fill_diagonal(rates, 0.0)
    np.fill_diagonal(rates, -rates.sum(axis=1))
    return HybridModel(
        rates=rates,
        A_p=A_p,
        b_p=b_p,
        D=np.broadcast_to(pooled, (K, n, n)).copy(),
        p0=np.full(K, 1.0 / K),
        mu0=centers,
        Sigma0=Sigma0,
        Sigma_obs=pooled.copy(),
    )


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------


def _score(controls, model, grid, obs, sm_opts, marginals=None):
    """Objective at (controls, model); re-propagates unless marginals
    are supplied (valid when the trial model leaves propagation alone)."""
    marg = propagate(controls, model, grid) if marginals is None else marginals
    bd = elbo(controls, model, grid, obs, marg, sm_opts)
    return bd.elbo, marg


def _backtracked_model_step(
    controls, model, grid, obs, sm_opts, val, apply_step, options, marginals=None
):
    """Try model + kappa * direction for kappa = 1, gamma, gamma^2, ...

    apply_step(kappa) builds the candidate model.  Pass marginals when
    the trial model cannot move them (saves the re-propagation);
    otherwise each candidate is propagated afresh.  Accepts the first
    candidate whose objective does not fall below val; returns
    (model, val, marginals, accepted).
    """
    for i in range(options.max_backtracks + 1):
        kappa = options.gamma**i
        trial = apply_step(kappa)
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                val2, marg2 = _score(
                    controls, trial, grid, obs, sm_opts, marginals=marginals
                )
        except (NumericalError, np.linalg.LinAlgError):
            continue
        if np.isfinite(val2) and val2 >= val:
            return trial, val2, marg2, True
    return model, val, None, False


def _log_chol(S):
    """Cholesky factor entries with logged diagonal, flattened.

    Linear combinations of these coordinates always map back to a
    positive definite matrix, which makes them safe to mix."""
    L = np.linalg.cholesky(S)
    n = S.shape[-1]
    i, j = np.tril_indices(n)
    v = L[..., i, j]
    diag = i == j
    v[..., diag] = np.log(v[..., diag])
    return v


def _from_log_chol(v, n):
    i, j = np.tril_indices(n)
    diag = i == j
    w = v.copy()
    w[..., diag] = np.exp(w[..., diag])
    L = np.zeros(v.shape[:-1] + (n, n))
    L[..., i, j] = w
    return L @ np.swapaxes(L, -1, -2)


def _theta_vec(model, options, rate_mask):
    """Learnable blocks as one flat vector (PD blocks in log-Cholesky
    coordinates, rates as logs of the structurally positive entries)."""
    parts = []
    if options.learn_drift:
        parts += [model.A_p.ravel(), model.b_p.ravel()]
    if options.learn_dispersion:
        parts.append(_log_chol(model.D).ravel())
    if options.learn_obs_cov:
        parts.append(_log_chol(model.Sigma_obs).ravel())
    if options.learn_rates and rate_mask.any():
        parts.append(np.log(np.maximum(model.rates[rate_mask], options.rate_floor)))
    return np.concatenate(parts) if parts else np.empty(0)


def _theta_model(vec, template, options, rate_mask):
    """Inverse of _theta_vec against a template model."""
    K, n = template.K, template.n
    m = n * (n + 1) // 2
    kw = {}
    pos = 0
    if options.learn_drift:
        kw["A_p"] = vec[pos : pos + K * n * n].reshape(K, n, n).copy()
        pos += K * n * n
        kw["b_p"] = vec[pos : pos + K * n].reshape(K, n).copy()
        pos += K * n
    if options.learn_dispersion:
        kw["D"] = _from_log_chol(vec[pos : pos + K * m].reshape(K, m), n)
        pos += K * m
    if options.learn_obs_cov:
        kw["Sigma_obs"] = _from_log_chol(vec[pos : pos + m], n)
        pos += m
    if options.learn_rates and rate_mask.any():
        rates = np.zeros((K, K))
        rates[rate_mask] = np.exp(vec[pos:])
        np.fill_diagonal(rates, -rates.sum(axis=1))
        kw["rates"] = rates
    return template.replace(**kw) if kw else None


def _anderson_candidate(hist_x, hist_g, window):
    """Anderson mixing proposal from the residual history, or None.

    hist_x holds parameter vectors, hist_g the fixed-point residuals
    F(x) - x.  The correction is capped at 50x the current residual
    so a degenerate least-squares solve cannot fling the iterate."""
    if len(hist_x) < 2:
        return None
    m_t = min(window, len(hist_x) - 1)
    dG = np.stack(
        [hist_g[-(m_t - i)] - hist_g[-(m_t - i + 1)] for i in range(m_t)], axis=1
    )
    dX = np.stack(
        [hist_x[-(m_t - i)] - hist_x[-(m_t - i + 1)] for i in range(m_t)], axis=1
    )
    g = hist_g[-1]
    gam, *_ = np.linalg.lstsq(dG, g, rcond=None)
    corr = (dX + dG) @ gam
    cap = 50.0 * max(float(np.max(np.abs(g))), 1e-15)
    mx = float(np.max(np.abs(corr)))
    if not np.isfinite(mx) or mx == 0.0:
        return None
    return (hist_x[-1] + g) - min(1.0, cap / mx) * corr


def vem(
    obs: ObservationSet,
    grid: TimeGrid,
    K: int,
    options: LearnOptions = LearnOptions(),
    seed=0,
    init_model: HybridModel | None = None,
    rate_init: float = 1.0,
) -> VemResult:
    """Variational EM: k-means init, then alternate smoothing E-steps
    with the enabled M-step blocks until the objective stalls.

    The returned trace concatenates every accepted inner and outer step
    and is non-decreasing within 1e-9 per step.  M-step order per
    sweep: rates and observation covariance (closed form), dispersion
    and prior drift (stationarity candidates with a backtracked
    interpolation, gradient fallback), prior initial law (exact
    match).  Sweeps repeat up to m_cycles times per outer iteration,
    stopping early once a full sweep stops improving.  E-steps after
    the first warm-start from the previous controls.
    """
    if grid.obs_nodes is None:
        grid = snap_observations(obs, grid)
    model = init_kmeans(obs, K, seed, rate_init=rate_init) if init_model is None else init_model
    if model.K != K:
        raise ValueError(f"vem: init model has K={model.K}, expected {K}")
    sm = options.smoother
    flags: set = set()
    trace: list = []
    controls = None
    res = None
    val = -np.inf
    val_prev = None
    converged = False
    rate_mask = (model.rates > 0.0) & ~np.eye(K, dtype=bool)
    hist_x: list = []
    hist_g: list = []
    theta_prev = None

    for outer in range(1, options.max_outer + 1):
        theta_in = _theta_vec(model, options, rate_mask)
        try:
            res = smooth(model, grid, obs, sm, init=controls)
        except NumericalError as e:
            raise NumericalError(f"vem: E-step failed at outer iteration {outer}: {e}") from e
        controls = res.controls
        marg = res.marginals
        flags.update(res.flags)
        trace.extend(res.elbo_trace if outer == 1 else res.elbo_trace[1:])
        val = res.breakdown.elbo

        for _cycle in range(options.m_cycles):
            val_sweep = val

            if options.learn_rates:
                rates, rflags = update_rates(
                    marg, controls, grid, model.rates, rate_floor=options.rate_floor
                )
                flags.update(rflags)
                trial = model.replace(rates=rates)
                val2, _ = _score(controls, trial, grid, obs, sm, marginals=marg)
                if val2 >= val - 1e-9:
                    model, val = trial, val2
                    trace.append(val)
                else:
                    flags.add("rate update rejected")

            if options.learn_obs_cov and len(obs) >= 1:
                trial = model.replace(Sigma_obs=update_obs_covariance(marg, obs, grid))
                val2, _ = _score(controls, trial, grid, obs, sm, marginals=marg)
                if val2 >= val - 1e-9:
                    model, val = trial, val2
                    trace.append(val)
                else:
                    flags.add("observation covariance update rejected")

            if options.learn_dispersion:
                ok = False
                cand = _solve_dispersion(marg, controls, model, grid, obs)
                if cand is not None:
                    # stationarity candidate, backtracking toward current D
                    def step_cand(kappa, _c=cand, _m=model):
                        D = np.stack(
                            [
                                _pd_floor((1 - kappa) * _m.D[z] + kappa * _c[z], 1e-10)
                                for z in range(_m.K)
                            ]
                        )
                        return _m.replace(D=D)

                    model, val, marg2, ok = _backtracked_model_step(
                        controls, model, grid, obs, sm, val, step_cand, options
                    )
                if not ok:
                    gD = grad_dispersion(marg, controls, model, grid, obs)

                    def step_D(kappa, _g=gD, _m=model):
                        D = np.stack(
                            [
                                _pd_floor(_m.D[z] + kappa * _g[z], 1e-10)
                                for z in range(_m.K)
                            ]
                        )
                        return _m.replace(D=D)

                    model, val, marg2, ok = _backtracked_model_step(
                        controls, model, grid, obs, sm, val, step_D, options
                    )
                if ok:
                    marg = marg2
                    trace.append(val)
                else:
                    flags.add("dispersion update stalled")

            if options.learn_drift:
                ok = False
                sol = _solve_prior_drift(marg, controls, grid)
                if sol is not None:
                    # exact conditional optimum; marginals unaffected
                    def step_sol(kappa, _m=model, _s=sol):
                        return _m.replace(
                            A_p=(1 - kappa) * _m.A_p + kappa * _s[0],
                            b_p=(1 - kappa) * _m.b_p + kappa * _s[1],
                        )

                    model, val, _, ok = _backtracked_model_step(
                        controls, model, grid, obs, sm, val, step_sol, options,
                        marginals=marg,
                    )
                if not ok:
                    gA, gb = grad_prior_drift(marg, controls, model, grid)

                    def step_drift(kappa, _m=model):
                        return _m.replace(
                            A_p=_m.A_p + kappa * gA, b_p=_m.b_p + kappa * gb
                        )

                    model, val, _, ok = _backtracked_model_step(
                        controls, model, grid, obs, sm, val, step_drift, options,
                        marginals=marg,
                    )
                if ok:
                    trace.append(val)
                else:
                    flags.add("prior drift update stalled")

            if options.learn_initials:
                trial = update_prior_initials(controls, model)
                val2, _ = _score(controls, trial, grid, obs, sm, marginals=marg)
                if val2 >= val - 1e-9:
                    model, val = trial, val2
                    trace.append(val)
                else:
                    flags.add("prior initial update rejected")

            if val - val_sweep <= 1e-12 * max(1.0, abs(val)):
                break

        theta_out = _theta_vec(model, options, rate_mask)
        if options.accel and theta_in.size:
            hist_x.append(theta_in)
            hist_g.append(theta_out - theta_in)
            if len(hist_x) > options.accel_window + 1:
                hist_x.pop(0)
                hist_g.pop(0)
            cand_vec = _anderson_candidate(hist_x, hist_g, options.accel_window)
            if cand_vec is not None and np.all(np.isfinite(cand_vec)):
                trial = _theta_model(cand_vec, model, options, rate_mask)
                try:
                    with np.errstate(
                        over="ignore", invalid="ignore", divide="ignore"
                    ):
                        r_s = smooth(trial, grid, obs, sm, init=controls)
                    v_s = r_s.breakdown.elbo
                except (NumericalError, np.linalg.LinAlgError):
                    v_s = -np.inf
                if np.isfinite(v_s) and v_s > val:
                    model, val, res = trial, v_s, r_s
                    controls, marg = res.controls, res.marginals
                    trace.append(val)
                    theta_out = cand_vec

        stalled_obj = val_prev is not None and abs(
            val - val_prev
        ) <= options.tol_outer * max(1.0, abs(val))
        stalled_theta = theta_prev is None or theta_out.size == 0 or (
            np.max(np.abs(theta_out - theta_prev) / np.maximum(1.0, np.abs(theta_out)))
            <= options.tol_theta
        )
        if stalled_obj and stalled_theta:
            converged = True
            break
        val_prev = val
        theta_prev = theta_out

    return VemResult(
        model=model,
        result=res,
        elbo_trace=np.asarray(trace),
        n_outer=outer,
        converged=converged,
        flags=tuple(sorted(flags)),
    )
