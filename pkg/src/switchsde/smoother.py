"""Variational smoothing for jump-modulated switching diffusions.

The posterior process is approximated by a factorized law: a mode
marginal q_Z driven by time-varying rates, and per-mode Gaussian state
marginals N(mu(z,t), Sigma(z,t)) driven by time-varying linear drifts
A(z,t) y + b(z,t).  The controls (A, b, rates, initial law) maximize an
evidence lower bound; the constrained marginals follow their moment and
master equations.

Discretization contract (the objective every gradient matches):

  - controls are constant on each grid interval [t_k, t_{k+1})
  - the linear constraint ODEs advance with the closed-form degree-4
    polynomial map in the interval generator, which is algebraically
    one classical RK4 step (exact to O(h^5) per interval)
  - running costs use the trapezoid rule with the interval's own
    control at both endpoints
  - observation terms enter at their grid node; initial KL terms are
    separate additive terms

Multiplier convention: the costates are sensitivities of the maximized
objective, nu = dL/dq_Z, lambda = dL/dmu, Psi = dL/dSigma.  They are
discontinuous at observation nodes, so both one-sided values are
stored: *_after is the right limit (used by the interval to the right)
and *_before the left limit (used by the interval to the left).
Control gradients are returned as per-interval densities (the nodewise
integrands averaged over the interval endpoints), so ascent steps are
grid-independent; finite differences of the objective correspond to
density times interval length.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .model import HybridModel, NumericalError, ObservationSet, TimeGrid, snap_observations
from .oracle import MarginalSummary
from .simulate import sample_mjp_inhomogeneous, split_rngs

__all__ = [
    "VariationalControls",
    "VariationalMarginals",
    "Multipliers",
    "ElboBreakdown",
    "ControlGradients",
    "InitialGradients",
    "SmootherOptions",
    "SmoothResult",
    "affine_prefix_scan",
    "propagate_master",
    "propagate_moments",
    "propagate",
    "drift_mismatch",
    "elbo",
    "backward_multipliers",
    "grad_controls",
    "grad_initials",
    "line_search_step",
    "smooth",
    "map_path",
    "summarize",
    "sample_posterior",
]

_LOG2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VariationalControls:
    """Piecewise-constant posterior controls on a grid with M intervals.

    A: (M, K, n, n), b: (M, K, n), rates: (M, K, K) full generators
    (diagonal = minus row sum), plus the posterior initial law.
    """

    A: np.ndarray
    b: np.ndarray
    rates: np.ndarray
    q0: np.ndarray
    mu0: np.ndarray
    Sigma0: np.ndarray

    @property
    def M(self) -> int:
        return self.A.shape[0]

    @property
    def K(self) -> int:
        return self.A.shape[1]

    @property
    def n(self) -> int:
        return self.A.shape[3]

    @classmethod
    def from_prior(cls, model: HybridModel, grid: TimeGrid) -> "VariationalControls":
        M = grid.M
        return cls(
            A=np.tile(model.A_p, (M, 1, 1, 1)),
            b=np.tile(model.b_p, (M, 1, 1)),
            rates=np.tile(model.rates, (M, 1, 1)),
            q0=model.p0.copy(),
            mu0=model.mu0.copy(),
            Sigma0=model.Sigma0.copy(),
        )

    def replace(self, **kw) -> "VariationalControls":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class VariationalMarginals:
    """Constraint trajectories at grid nodes: qZ (M+1, K), mu
    (M+1, K, n), Sigma (M+1, K, n, n)."""

    qZ: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray


@dataclass(frozen=True)
class Multipliers:
    """Costates at grid nodes, both one-sided limits (see module docstring)."""

    nu_after: np.ndarray
    nu_before: np.ndarray
    lam_after: np.ndarray
    lam_before: np.ndarray
    Psi_after: np.ndarray
    Psi_before: np.ndarray


@dataclass(frozen=True)
class ElboBreakdown:
    """Objective value and its pieces: elbo = loglik - kl_diffusion
    - kl_jump - kl_init.  flags records numerical clamps applied."""

    loglik: float
    kl_diffusion: float
    kl_jump: float
    kl_init: float
    elbo: float
    flags: tuple = ()


@dataclass(frozen=True)
class ControlGradients:
    A: np.ndarray
    b: np.ndarray
    rates: np.ndarray  # off-diagonal entries; diagonal rows are zero


@dataclass(frozen=True)
class InitialGradients:
    mu0: np.ndarray
    C0: np.ndarray  # lower-triangular factor gradient, Sigma0 = C0 C0^T
    q0_red: np.ndarray  # reduced simplex coordinates (first K-1 modes)


@dataclass(frozen=True)
class SmootherOptions:
    """Knobs for the inner optimization loop.

    use_fixed_point enables the stationarity-condition candidate step
    before the backtracked gradient step.  It typically converges in
    far fewer sweeps, but on instances where the mode posterior is
    genuinely ambiguous it commits harder to a single mode (a property
    of the objective's optima, not of the optimizer); disable it to
    follow the plain gradient ascent path.
    """

    tol_inner: float = 1e-6
    max_inner: int = 500
    gamma: float = 0.5
    max_backtracks: int = 20
    rate_floor: float = 1e-8
    q_floor: float = 1e-10
    use_fixed_point: bool = True


@dataclass(frozen=True)
class SmoothResult:
    controls: VariationalControls
    marginals: VariationalMarginals
    breakdown: ElboBreakdown
    multipliers: Multipliers | None
    elbo_trace: np.ndarray
    converged: bool
    n_iter: int
    flags: tuple = ()


# ---------------------------------------------------------------------------
# interval maps and scans
# ---------------------------------------------------------------------------


def _p4(X):
    """I + X + X^2/2 + X^3/6 + X^4/24, batched over leading axes."""
    d = X.shape[-1]
    X2 = X @ X
    return np.eye(d) + X + X2 / 2.0 + (X2 @ X) / 6.0 + (X2 @ X2) / 24.0


def _r4(X):
    """I + X/2 + X^2/6 + X^3/24 (so that h*R4(hA) b integrates the
    constant source over one RK4 step)."""
    d = X.shape[-1]
    X2 = X @ X
    return np.eye(d) + X / 2.0 + X2 / 6.0 + (X2 @ X) / 24.0


def _lyap_op(A):
    """Operator matrix of X -> A X + X A^T acting on row-major vec(X).

    A: (..., n, n) -> (..., n^2, n^2).
    """
    n = A.shape[-1]
    eye = np.eye(n)
    k1 = np.einsum("...ij,kl->...ikjl", A, eye)
    k2 = np.einsum("ij,...kl->...ikjl", eye, A)
    shape = A.shape[:-2] + (n * n, n * n)
    return (k1 + k2).reshape(shape)


def _lyap_op_T(A):
    """Operator matrix of X -> A^T X + X A on row-major vec(X)."""
    return _lyap_op(np.swapaxes(A, -1, -2))


def affine_prefix_scan(F, g):
    """Inclusive prefix composition of affine maps x -> F x + g along
    axis 0 (map 0 applied first).  Returns (PF, Pg) with
    x_{j+1} = PF[j] x_0 + Pg[j].
    """
    PF = F.copy()
    Pg = g.copy()
    M = F.shape[0]
    off = 1
    while off < M:
        newF = PF[off:] @ PF[:-off]
        newg = (PF[off:] @ Pg[:-off][..., None])[..., 0] + Pg[off:]
        PF = np.concatenate([PF[:off], newF], axis=0)
        Pg = np.concatenate([Pg[:off], newg], axis=0)
        off *= 2
    return PF, Pg


def _scan_states(F, g, x0):
    """All node states of x_{k+1} = F[k] x_k + g[k] from x_0."""
    PF, Pg = affine_prefix_scan(F, g)
    states = np.empty((F.shape[0] + 1,) + x0.shape)
    states[0] = x0
    states[1:] = np.einsum("m...ij,...j->m...i", PF, x0) + Pg
    return states


def propagate_master(controls: VariationalControls, grid: TimeGrid) -> np.ndarray:
    """Mode marginals q_Z at all nodes under the posterior rates.

    Raises NumericalError if a marginal dips below -1e-8 before
    clamping (a symptom of too coarse a grid for the rates involved);
    otherwise clamps and renormalizes, which is a float-level no-op
    because the interval maps preserve total mass exactly.
    """
    h = grid.h
    F = _p4(h * np.swapaxes(controls.rates, 1, 2))
    q = _scan_states(F, np.zeros((controls.M, controls.K)), controls.q0)
    if q.min() < -1e-8:
        k, z = np.unravel_index(np.argmin(q), q.shape)
        raise NumericalError(
            f"propagate_master: q_Z[{z}] = {q[k, z]:.3e} at node {k}; "
            "use a smaller grid step h"
        )
    q = np.maximum(q, 0.0)
    return q / q.sum(axis=1, keepdims=True)


def propagate_moments(
    controls: VariationalControls, model: HybridModel, grid: TimeGrid
) -> tuple:
    """Per-mode Gaussian moments (mu, Sigma) at all nodes.

    Dispersion comes from the model; drift from the controls.  Raises
    NumericalError naming the node and mode if Sigma loses positive
    definiteness (min eigenvalue < 1e-12).
    """
    h = grid.h
    n = controls.n
    F_mu = _p4(h * controls.A)
    g_mu = h * np.einsum("mkij,mkj->mki", _r4(h * controls.A), controls.b)
    mu = _scan_states(F_mu, g_mu, controls.mu0)

    Lop = _lyap_op(controls.A)
    F_S = _p4(h * Lop)
    dvec = np.broadcast_to(
        model.D.reshape(1, controls.K, n * n), (controls.M, controls.K, n * n)
    )
    g_S = h * np.einsum("mkij,mkj->mki", _r4(h * Lop), dvec)
    Svec = _scan_states(F_S, g_S, controls.Sigma0.reshape(controls.K, n * n))
    Sigma = Svec.reshape(-1, controls.K, n, n)
    Sigma = 0.5 * (Sigma + np.swapaxes(Sigma, 2, 3))

    if n == 1:
        min_eig = Sigma[..., 0, 0]
    else:
        min_eig = np.linalg.eigvalsh(Sigma)[..., 0]
    if min_eig.min() < 1e-12:
        k, z = np.unravel_index(np.argmin(min_eig), min_eig.shape)
        raise NumericalError(
            f"propagate_moments: Sigma lost positive definiteness at node {k}, "
            f"mode {z} (min eigenvalue {min_eig[k, z]:.3e})"
        )
    return mu, Sigma


def propagate(
    controls: VariationalControls, model: HybridModel, grid: TimeGrid
) -> VariationalMarginals:
    """Master and moment propagation bundled."""
    qZ = propagate_master(controls, grid)
    mu, Sigma = propagate_moments(controls, model, grid)
    return VariationalMarginals(qZ=qZ, mu=mu, Sigma=Sigma)


# ---------------------------------------------------------------------------
# objective pieces
# ---------------------------------------------------------------------------


def _mismatch_batch(A_k, b_k, model, mu, Sigma):
    """Squared drift mismatch m_z per interval and mode: (M, K).

    A_k, b_k: interval controls; mu, Sigma: states at one quadrature
    point per interval, shapes (M, K, n) and (M, K, n, n).
    """
    Dinv = np.linalg.inv(model.D)
    Ab = A_k - model.A_p[None]
    bb = b_k - model.b_p[None]
    DAb = np.einsum("kij,mkjl->mkil", Dinv, Ab)
    AtDA = np.einsum("mkji,mkjl->mkil", Ab, DAb)
    tr = np.einsum("mkij,mkji->mk", AtDA, Sigma)
    r = np.einsum("mkij,mkj->mki", Ab, mu) + bb
    quad = np.einsum("mki,kij,mkj->mk", r, Dinv, r)
    return tr + quad


def drift_mismatch(
    controls: VariationalControls,
    model: HybridModel,
    marginals: VariationalMarginals,
    node: int,
) -> np.ndarray:
    """m_z at one grid node, per mode, using the controls of the
    interval to the left of the node (interval node-1; node 0 uses
    interval 0).  Zero when the controls equal the prior drift."""
    k = min(max(node - 1, 0), controls.M - 1)
    return _mismatch_batch(
        controls.A[k : k + 1],
        controls.b[k : k + 1],
        model,
        marginals.mu[node : node + 1],
        marginals.Sigma[node : node + 1],
    )[0]


def _jump_kl(controls: VariationalControls, model: HybridModel, floor: float):
    """Per-interval, per-mode rate KL integrand j_z: (M, K), plus a
    flag when entries were floored inside the logarithms."""
    K = controls.K
    di = np.arange(K)
    lt = controls.rates.copy()
    lt[:, di, di] = 0.0
    lp = np.broadcast_to(model.rates, lt.shape).copy()
    lp[:, di, di] = 0.0
    off = ~np.eye(K, dtype=bool)
    lt_off, lp_off = lt[:, off], lp[:, off]
    floored = bool(
        np.any((lt_off < floor) & (lt_off > 0))
        or np.any((lp_off < floor) & (lt_off > 0))
    )
    log_ratio = np.zeros_like(lt)
    log_ratio[:, off] = np.log(
        np.maximum(lt_off, floor) / np.maximum(lp_off, floor)
    )
    terms = lt * log_ratio - lt + lp
    terms[:, di, di] = 0.0
    return terms.sum(axis=2), floored


def _obs_terms(model: HybridModel, obs: ObservationSet, nodes, mu, Sigma):
    """Gaussian observation fit terms E_i(z): (N, K), given node-indexed
    posterior moments at the observation nodes."""
    Rinv = np.linalg.inv(model.Sigma_obs)
    logdet = np.linalg.slogdet(model.Sigma_obs)[1]
    d = obs.values[:, None, :] - mu[nodes]  # (N, K, n)
    quad = np.einsum("nki,ij,nkj->nk", d, Rinv, d)
    tr = np.einsum("ij,nkji->nk", Rinv, Sigma[nodes])
    return -0.5 * (model.n * _LOG2PI + logdet + quad + tr)


def _gauss_kl_init(controls: VariationalControls, model: HybridModel):
    """Per-mode Gaussian KL between posterior and prior initial laws: (K,)."""
    K, n = controls.K, controls.n
    out = np.empty(K)
    for z in range(K):
        Spi = np.linalg.inv(model.Sigma0[z])
        d = controls.mu0[z] - model.mu0[z]
        out[z] = 0.5 * (
            np.trace(Spi @ controls.Sigma0[z])
            + d @ Spi @ d
            - n
            + np.linalg.slogdet(model.Sigma0[z])[1]
            - np.linalg.slogdet(controls.Sigma0[z])[1]
        )
    return out


def elbo(
    controls: VariationalControls,
    model: HybridModel,
    grid: TimeGrid,
    obs: ObservationSet,
    marginals: VariationalMarginals,
    options: SmootherOptions = SmootherOptions(),
) -> ElboBreakdown:
    """Evidence lower bound under the discretization contract.

    With controls equal to the prior all KL terms vanish and the value
    reduces to the expected observation fit.
    """
    if len(obs) and grid.obs_nodes is None:
        raise ValueError("elbo: grid.obs_nodes must be set (use snap_observations)")
    h = grid.h
    q, mu, S = marginals.qZ, marginals.mu, marginals.Sigma
    flags = []

    m_left = _mismatch_batch(controls.A, controls.b, model, mu[:-1], S[:-1])
    m_right = _mismatch_batch(controls.A, controls.b, model, mu[1:], S[1:])
    kl_diff = 0.5 * (h / 2.0) * float(
        np.sum(q[:-1] * m_left) + np.sum(q[1:] * m_right)
    )

    j, floored = _jump_kl(controls, model, options.rate_floor)
    if floored:
        flags.append("rate_floor")
    kl_jump = (h / 2.0) * float(np.sum(q[:-1] * j) + np.sum(q[1:] * j))

    loglik = 0.0
    if len(obs):
        nodes = grid.obs_nodes
        E = _obs_terms(model, obs, nodes, mu, S)
        loglik = float(np.sum(q[nodes] * E))

    q0 = np.maximum(controls.q0, options.q_floor)
    p0 = np.maximum(model.p0, options.q_floor)
    if np.any(controls.q0 < options.q_floor) or np.any(model.p0 < options.q_floor):
        flags.append("q_floor")
    kl_mode = float(np.sum(controls.q0 * np.log(q0 / p0)))
    kl_init = kl_mode + float(controls.q0 @ _gauss_kl_init(controls, model))

    value = loglik - kl_diff - kl_jump - kl_init
    return ElboBreakdown(
        loglik=loglik,
        kl_diffusion=kl_diff,
        kl_jump=kl_jump,
        kl_init=kl_init,
        elbo=value,
        flags=tuple(flags),
    )


# ---------------------------------------------------------------------------
# multipliers
# ---------------------------------------------------------------------------


def _half_states(controls, model, grid, marginals):
    """States at interval midpoints via half-step maps: (q_h, mu_h, S_h)."""
    hh = grid.h / 2.0
    K, n, M = controls.K, controls.n, controls.M
    Fq = _p4(hh * np.swapaxes(controls.rates, 1, 2))
    q_h = np.einsum("mij,mj->mi", Fq, marginals.qZ[:-1])
    F_mu = _p4(hh * controls.A)
    mu_h = np.einsum("mkij,mkj->mki", F_mu, marginals.mu[:-1]) + hh * np.einsum(
        "mkij,mkj->mki", _r4(hh * controls.A), controls.b
    )
    Lop = _lyap_op(controls.A)
    dvec = np.broadcast_to(model.D.reshape(1, K, n * n), (M, K, n * n))
    Svec = np.einsum(
        "mkij,mkj->mki", _p4(hh * Lop), marginals.Sigma[:-1].reshape(M, K, n * n)
    ) + hh * np.einsum("mkij,mkj->mki", _r4(hh * Lop), dvec)
    return q_h, mu_h, Svec.reshape(M, K, n, n)


def _rk4_backward_maps(B, s0, sm, s1, h):
    """Affine map of one backward RK4 step for x' = B x + s(t), from
    the right node to the left node of an interval.

    B: (M, ..., d, d); s0/sm/s1: sources at the left node, midpoint and
    right node, shape (M, ..., d).  Returns (F, g) with
    x_left = F x_right + g.
    """
    mv = lambda X, v: np.einsum("...ij,...j->...i", X, v)
    k1 = s1
    k2 = sm - 0.5 * h * mv(B, k1)
    k3 = sm - 0.5 * h * mv(B, k2)
    k4 = s0 - h * mv(B, k3)
    g = -(h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return _p4(-h * B), g


def _reset_jumps(controls, model, grid, obs, marginals):
    """Observation-node jumps of (nu, lam, Psi): arrays over all nodes,
    zero away from observations."""
    M, K, n = controls.M, controls.K, controls.n
    j_nu = np.zeros((M + 1, K))
    j_lam = np.zeros((M + 1, K, n))
    j_Psi = np.zeros((M + 1, K, n, n))
    if len(obs):
        if grid.obs_nodes is None:
            raise ValueError(
                "backward_multipliers: grid.obs_nodes must be set "
                "(use snap_observations)"
            )
        nodes = grid.obs_nodes
        q, mu, S = marginals.qZ, marginals.mu, marginals.Sigma
        Rinv = np.linalg.inv(model.Sigma_obs)
        E = _obs_terms(model, obs, nodes, mu, S)
        j_nu[nodes] = E
        d = obs.values[:, None, :] - mu[nodes]
        j_lam[nodes] = q[nodes, :, None] * np.einsum("ij,nkj->nki", Rinv, d)
        j_Psi[nodes] = -0.5 * q[nodes, :, None, None] * Rinv[None, None]
    return j_nu, j_lam, j_Psi


def _backward_sweep(F, g, jumps):
    """after-values at all nodes for x_after(k) = F_k (x(k+1)+jump(k+1)) + g_k,
    with x_after(M) = 0 exactly; returns (after, before)."""
    M = F.shape[0]
    g_fold = g + np.einsum("m...ij,m...j->m...i", F, jumps[1:])
    PF, Pg = affine_prefix_scan(F[::-1], g_fold[::-1])
    after = np.empty(jumps.shape)
    after[M] = 0.0
    after[M - 1 :: -1] = Pg  # x0 = 0, so the affine part is the state
    return after, after + jumps


def backward_multipliers(
    controls: VariationalControls,
    model: HybridModel,
    grid: TimeGrid,
    obs: ObservationSet,
    marginals: VariationalMarginals,
    options: SmootherOptions = SmootherOptions(),
) -> Multipliers:
    """Costates by backward RK4 sweeps with exact observation resets.

    Terminal values are exactly zero; at observation nodes the stored
    *_before values include the jump (before = after + jump), matching
    the forward-time convention that the node value is the jump plus
    the left limit.
    """
    h = grid.h
    M, K, n = controls.M, controls.K, controls.n
    q, mu, S = marginals.qZ, marginals.mu, marginals.Sigma
    q_h, mu_h, S_h = _half_states(controls, model, grid, marginals)

    Dinv = np.linalg.inv(model.D)
    Ab = controls.A - model.A_p[None]
    bb = controls.b - model.b_p[None]
    W = np.einsum("mkji,kjl->mkil", Ab, Dinv)  # Abar^T D^-1
    AtDA = np.einsum("mkij,mkjl->mkil", W, Ab)

    j, _ = _jump_kl(controls, model, options.rate_floor)
    m0 = _mismatch_batch(controls.A, controls.b, model, mu[:-1], S[:-1])
    mh = _mismatch_batch(controls.A, controls.b, model, mu_h, S_h)
    m1 = _mismatch_batch(controls.A, controls.b, model, mu[1:], S[1:])

    def s_lam(qq, muq):
        r = np.einsum("mkij,mkj->mki", Ab, muq) + bb
        return qq[:, :, None] * np.einsum("mkij,mkj->mki", W, r)

    def s_Psi(qq):
        return (0.5 * qq[:, :, None, None] * AtDA).reshape(M, K, n * n)

    j_nu, j_lam, j_Psi = _reset_jumps(controls, model, grid, obs, marginals)

    B_nu = -controls.rates
    F_nu, g_nu = _rk4_backward_maps(B_nu, 0.5 * m0 + j, 0.5 * mh + j, 0.5 * m1 + j, h)
    nu_after, nu_before = _backward_sweep(F_nu, g_nu, j_nu)

    B_lam = -np.swapaxes(controls.A, 2, 3)
    F_lam, g_lam = _rk4_backward_maps(
        B_lam, s_lam(q[:-1], mu[:-1]), s_lam(q_h, mu_h), s_lam(q[1:], mu[1:]), h
    )
    lam_after, lam_before = _backward_sweep(F_lam, g_lam, j_lam)

    B_Psi = -_lyap_op_T(controls.A)
    F_Psi, g_Psi = _rk4_backward_maps(
        B_Psi, s_Psi(q[:-1]), s_Psi(q_h), s_Psi(q[1:]), h
    )
    Psi_after_v, Psi_before_v = _backward_sweep(
        F_Psi, g_Psi, j_Psi.reshape(M + 1, K, n * n)
    )

    return Multipliers(
        nu_after=nu_after,
        nu_before=nu_before,
        lam_after=lam_after,
        lam_before=lam_before,
        Psi_after=Psi_after_v.reshape(M + 1, K, n, n),
        Psi_before=Psi_before_v.reshape(M + 1, K, n, n),
    )


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def grad_controls(
    controls: VariationalControls,
    model: HybridModel,
    grid: TimeGrid,
    marginals: VariationalMarginals,
    multipliers: Multipliers,
    options: SmootherOptions = SmootherOptions(),
) -> ControlGradients:
    """Ascent gradient densities per interval for (A, b, rates)."""
    M, K = controls.M, controls.K
    q, mu, S = marginals.qZ, marginals.mu, marginals.Sigma
    Dinv = np.linalg.inv(model.D)
    Ab = controls.A - model.A_p[None]
    bb = controls.b - model.b_p[None]

    def g_Ab(nodes, lam, Psi):
        muq, Sq, qq = mu[nodes], S[nodes], q[nodes]
        r = np.einsum("mkij,mkj->mki", Ab, muq) + bb
        Dr = np.einsum("kij,mkj->mki", Dinv, r)
        second = Sq + np.einsum("mki,mkj->mkij", muq, muq)
        gA = (
            -qq[:, :, None, None]
            * (
                np.einsum("kij,mkjl->mkil", Dinv, np.einsum("mkij,mkjl->mkil", Ab, second))
                + np.einsum("kij,mkj,mkl->mkil", Dinv, bb, muq)
            )
            + np.einsum("mki,mkj->mkij", lam, muq)
            + 2.0 * np.einsum("mkij,mkjl->mkil", Psi, Sq)
        )
        gb = -qq[:, :, None] * Dr + lam
        return gA, gb

    left_idx = np.arange(M)
    gA0, gb0 = g_Ab(left_idx, multipliers.lam_after[:-1], multipliers.Psi_after[:-1])
    gA1, gb1 = g_Ab(left_idx + 1, multipliers.lam_before[1:], multipliers.Psi_before[1:])
    gA = 0.5 * (gA0 + gA1)
    gb = 0.5 * (gb0 + gb1)

    off = ~np.eye(K, dtype=bool)
    lt = np.maximum(controls.rates, options.rate_floor)
    lp = np.maximum(model.rates, options.rate_floor)
    log_ratio = np.where(off[None], np.log(lt / lp[None]), 0.0)

    def g_rates(qq, nu):
        # entry (z, w): q_z (-log ratio + nu_w - nu_z)
        dnu = nu[:, None, :] - nu[:, :, None]  # (M, z, w) -> nu_w - nu_z
        return qq[:, :, None] * (-log_ratio + dnu)

    gL = 0.5 * (
        g_rates(q[:-1], multipliers.nu_after[:-1])
        + g_rates(q[1:], multipliers.nu_before[1:])
    )
    gL[:, np.arange(K), np.arange(K)] = 0.0
    return ControlGradients(A=gA, b=gb, rates=gL)


def grad_initials(
    controls: VariationalControls,
    model: HybridModel,
    multipliers: Multipliers,
    options: SmootherOptions = SmootherOptions(),
) -> InitialGradients:
    """Ascent gradients for the posterior initial law (mu0, C0, reduced q0).

    The Sigma0 gradient is reported against the lower Cholesky factor C
    (Sigma0 = C C^T), projected onto the lower triangle; the mode
    weights use reduced simplex coordinates (mode K absorbs changes).
    At controls equal to the prior initial law with zero multipliers,
    all three gradients vanish.
    """
    K, n = controls.K, controls.n
    lam0 = multipliers.lam_before[0]
    Psi0 = multipliers.Psi_before[0]
    nu0 = multipliers.nu_before[0]
    gmu = np.empty((K, n))
    gC = np.empty((K, n, n))
    klg = _gauss_kl_init(controls, model)
    C = np.linalg.cholesky(controls.Sigma0)
    for z in range(K):
        Spi = np.linalg.inv(model.Sigma0[z])
        gmu[z] = -controls.q0[z] * (Spi @ (controls.mu0[z] - model.mu0[z])) + lam0[z]
        Sfree = -0.5 * controls.q0[z] * (Spi - np.linalg.inv(controls.Sigma0[z])) + Psi0[z]
        gC[z] = np.tril((Sfree + Sfree.T) @ C[z])
    q0 = np.maximum(controls.q0, options.q_floor)
    p0 = np.maximum(model.p0, options.q_floor)
    lr = np.log(q0 / p0)
    gq = -(lr[:-1] - lr[-1] + klg[:-1] - klg[-1]) + nu0[:-1] - nu0[-1]
    return InitialGradients(mu0=gmu, C0=gC, q0_red=gq)


# ---------------------------------------------------------------------------
# fixed-point candidates
# ---------------------------------------------------------------------------
#
# Setting the gradient densities to zero and solving for the controls
# gives closed forms in the multipliers (A = A_p + 2 D Psi / q and so
# on).  Iterating those is far faster than first-order ascent, but a
# synchronous fixed-point step is not guaranteed to increase the
# objective, so candidates are only accepted when the ELBO does not
# decrease, backtracking along the straight line toward the current
# controls; the validated gradient line search remains the fallback.
# Rate candidates are additionally trust-regioned to one e-fold per
# iteration: an unrestricted exp(nu) update early in the optimization
# can commit the mode marginal to a poor basin that later sweeps
# cannot leave (the objective is only locally concave).

_DEAD_MODE_Q = 1e-6
_RATE_TRUST = 1.0  # max |log change| of a rate entry per iteration


def _fixed_point_controls(controls, model, marginals, multipliers, options):
    """Stationarity candidate for (A, b, rates) from interval-averaged
    multipliers.  Modes with negligible interval mass keep their
    current drift controls (their objective weight is that mass)."""
    q, mu = marginals.qZ, marginals.mu
    q_bar = 0.5 * (q[:-1] + q[1:])
    mu_bar = 0.5 * (mu[:-1] + mu[1:])
    lam_bar = 0.5 * (multipliers.lam_after[:-1] + multipliers.lam_before[1:])
    Psi_bar = 0.5 * (multipliers.Psi_after[:-1] + multipliers.Psi_before[1:])
    nu_bar = 0.5 * (multipliers.nu_after[:-1] + multipliers.nu_before[1:])

    qs = np.maximum(q_bar, _DEAD_MODE_Q)[:, :, None]
    A_fp = model.A_p[None] + 2.0 * np.einsum("kij,mkjl->mkil", model.D, Psi_bar) / qs[..., None]
    b_fp = (
        model.b_p[None]
        - np.einsum("mkij,mkj->mki", A_fp - model.A_p[None], mu_bar)
        + np.einsum("kij,mkj->mki", model.D, lam_bar) / qs
    )
    dead = q_bar < _DEAD_MODE_Q
    A_fp[dead] = controls.A[dead]
    b_fp[dead] = controls.b[dead]

    dnu = np.clip(nu_bar[:, None, :] - nu_bar[:, :, None], -30.0, 30.0)
    raw = model.rates[None] * np.exp(dnu)
    cur = np.maximum(controls.rates, options.rate_floor)
    step = np.clip(np.log(np.maximum(raw, options.rate_floor) / cur), -_RATE_TRUST, _RATE_TRUST)
    rates = cur * np.exp(step)
    rates[np.broadcast_to(model.rates[None] <= 0.0, rates.shape)] = 0.0
    K = controls.K
    di = np.arange(K)
    rates[:, di, di] = 0.0
    rates[:, di, di] = -rates.sum(axis=2)
    return controls.replace(A=A_fp, b=b_fp, rates=rates)


def _fixed_point_initials(controls, model, multipliers, options):
    """Stationarity candidate for the posterior initial law."""
    K = controls.K
    lam0 = multipliers.lam_before[0]
    Psi0 = multipliers.Psi_before[0]
    nu0 = multipliers.nu_before[0]
    q0s = np.maximum(controls.q0, _DEAD_MODE_Q)
    mu0 = np.empty_like(controls.mu0)
    Sigma0 = controls.Sigma0.copy()
    for z in range(K):
        mu0[z] = model.mu0[z] + model.Sigma0[z] @ lam0[z] / q0s[z]
        prec = np.linalg.inv(model.Sigma0[z]) - 2.0 * Psi0[z] / q0s[z]
        prec = 0.5 * (prec + prec.T)
        if np.linalg.eigvalsh(prec)[0] > 1e-12:
            Sigma0[z] = np.linalg.inv(prec)
    cand = controls.replace(mu0=mu0, Sigma0=Sigma0)
    klg = _gauss_kl_init(cand, model)
    logw = np.log(np.maximum(model.p0, options.q_floor)) + nu0 - klg
    logw -= logw.max()
    q0 = np.exp(logw)
    q0 = np.maximum(q0 / q0.sum(), options.q_floor)
    return cand.replace(q0=q0 / q0.sum())


def _interp_controls(cur, cand, kappa):
    return cur.replace(
        A=(1.0 - kappa) * cur.A + kappa * cand.A,
        b=(1.0 - kappa) * cur.b + kappa * cand.b,
        rates=(1.0 - kappa) * cur.rates + kappa * cand.rates,
    )


def _interp_initials(cur, cand, kappa):
    C = (1.0 - kappa) * np.linalg.cholesky(cur.Sigma0) + kappa * np.linalg.cholesky(
        cand.Sigma0
    )
    q0 = (1.0 - kappa) * cur.q0 + kappa * cand.q0
    return cur.replace(
        mu0=(1.0 - kappa) * cur.mu0 + kappa * cand.mu0,
        Sigma0=C @ np.swapaxes(C, 1, 2),
        q0=q0 / q0.sum(),
    )


def _candidate_search(controls, candidate, interp, elbo_fn, current, options):
    """Backtrack from the full candidate toward the current controls,
    accepting the first ELBO-non-decreasing interpolate."""
    for i in range(options.max_backtracks + 1):
        cand = interp(controls, candidate, options.gamma**i)
        val = elbo_fn(cand)
        if np.isfinite(val) and val >= current:
            return cand, val, i
    return controls, current, None


# ---------------------------------------------------------------------------
# line search and the smoothing loop
# ---------------------------------------------------------------------------


def _apply_control_step(controls, grads, kappa, options):
    rates = controls.rates + kappa * grads.rates
    K = controls.K
    off = ~np.eye(K, dtype=bool)
    rates[:, off] = np.maximum(rates[:, off], options.rate_floor)
    rates[:, np.arange(K), np.arange(K)] = 0.0
    rates[:, np.arange(K), np.arange(K)] = -rates.sum(axis=2)
    return controls.replace(
        A=controls.A + kappa * grads.A,
        b=controls.b + kappa * grads.b,
        rates=rates,
    )


def _apply_initial_step(controls, grads, kappa, options):
    C = np.linalg.cholesky(controls.Sigma0) + kappa * grads.C0
    diag = np.arange(controls.n)
    C[:, diag, diag] = np.maximum(C[:, diag, diag], 1e-10)
    q0 = controls.q0.copy()
    q0[:-1] = q0[:-1] + kappa * grads.q0_red
    q0[-1] = 1.0 - q0[:-1].sum()
    q0 = np.maximum(q0, options.q_floor)
    q0 = q0 / q0.sum()
    return controls.replace(
        mu0=controls.mu0 + kappa * grads.mu0,
        Sigma0=C @ np.swapaxes(C, 1, 2),
        q0=q0,
    )


def line_search_step(
    controls: VariationalControls,
    grads,
    elbo_fn,
    current: float,
    options: SmootherOptions = SmootherOptions(),
):
    """Backtracking ascent step: try kappa = gamma^i, accept the first
    candidate whose ELBO does not decrease.

    grads may be ControlGradients (joint step in A, b, rates) or
    InitialGradients (step in the initial law).  Returns (controls,
    value, exponent); exponent is None when every candidate failed, in
    which case the inputs are returned unchanged (a stall).
    """
    apply = (
        _apply_control_step if isinstance(grads, ControlGradients) else _apply_initial_step
    )
    for i in range(options.max_backtracks + 1):
        cand = apply(controls, grads, options.gamma**i, options)
        val = elbo_fn(cand)
        if np.isfinite(val) and val >= current:
            return cand, val, i
    return controls, current, None


def smooth(
    model: HybridModel,
    grid: TimeGrid,
    obs: ObservationSet,
    options: SmootherOptions = SmootherOptions(),
    init: VariationalControls | None = None,
) -> SmoothResult:
    """Variational smoothing: alternate backward multiplier sweeps with
    monotone control updates until the ELBO stalls or its relative
    change drops below tol_inner.

    Each iteration updates the dynamics controls (A, b, rates) and then
    the initial law.  Both updates first try the fixed-point candidate
    implied by the stationarity conditions, backtracking toward the
    current controls, and fall back to a backtracked gradient ascent
    step; every accepted candidate must not decrease the ELBO, so the
    trace is non-decreasing by construction.  Controls start at the
    prior (all KL terms zero) unless init is given.
    """
    if grid.obs_nodes is None:
        grid = snap_observations(obs, grid)
    controls = VariationalControls.from_prior(model, grid) if init is None else init

    # evaluate() stashes the marginals and breakdown of the candidate it
    # just scored; the line search accepts the last candidate it scored,
    # so "last" always belongs to the accepted controls.
    last = {}

    def evaluate(c):
        # Rejected line-search candidates may overflow before their
        # ELBO is scored; treat any non-finite outcome as -inf rather
        # than letting warnings or LinAlgError escape.
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            try:
                marg = propagate(c, model, grid)
                bd = elbo(c, model, grid, obs, marg, options)
            except (NumericalError, np.linalg.LinAlgError):
                return -np.inf
        if not np.isfinite(bd.elbo):
            return -np.inf
        last["state"] = (marg, bd)
        return bd.elbo

    val = evaluate(controls)
    if not np.isfinite(val):
        raise NumericalError("smooth: initial controls are not evaluable")
    marg, bd = last["state"]
    trace = [val]
    converged = False
    flags = set(bd.flags)
    mult = None
    it = 0
    for it in range(1, options.max_inner + 1):
        val_start = val

        # dynamics controls: fixed-point candidate, gradient fallback
        mult = backward_multipliers(controls, model, grid, obs, marg, options)
        exp_c = None
        if options.use_fixed_point:
            fp = _fixed_point_controls(controls, model, marg, mult, options)
            controls2, val2, exp_c = _candidate_search(
                controls, fp, _interp_controls, evaluate, val, options
            )
        if exp_c is None:
            g = grad_controls(controls, model, grid, marg, mult, options)
            controls2, val2, exp_c = line_search_step(controls, g, evaluate, val, options)
        if exp_c is not None:
            controls = controls2
            marg, bd = last["state"]
            val = val2
            trace.append(val)

        # initial law: fixed-point candidate, gradient fallback
        mult = backward_multipliers(controls, model, grid, obs, marg, options)
        exp_i = None
        if options.use_fixed_point:
            fpi = _fixed_point_initials(controls, model, mult, options)
            controls3, val3, exp_i = _candidate_search(
                controls, fpi, _interp_initials, evaluate, val, options
            )
        if exp_i is None:
            gi = grad_initials(controls, model, mult, options)
            controls3, val3, exp_i = line_search_step(controls, gi, evaluate, val, options)
        if exp_i is not None:
            controls = controls3
            marg, bd = last["state"]
            val = val3
            trace.append(val)

        flags.update(bd.flags)
        if exp_c is None and exp_i is None:
            converged = True
            break
        if abs(val - val_start) <= options.tol_inner * max(1.0, abs(val)):
            converged = True
            break

    return SmoothResult(
        controls=controls,
        marginals=marg,
        breakdown=bd,
        multipliers=mult,
        elbo_trace=np.array(trace),
        converged=converged,
        n_iter=it,
        flags=tuple(sorted(flags)),
    )


# ---------------------------------------------------------------------------
# posterior summaries and sampling
# ---------------------------------------------------------------------------


def map_path(
    marginals: VariationalMarginals, q_floor: float = 1e-10
) -> tuple:
    """Most probable mode and its mean at every node.

    The mode maximizes q_Z(z, t) times the Gaussian density height
    (2 pi)^(-n/2) |Sigma|^(-1/2); ties resolve to the lower index.
    """
    n = marginals.mu.shape[-1]
    logdet = np.linalg.slogdet(marginals.Sigma)[1]
    logw = np.log(np.maximum(marginals.qZ, q_floor)) - 0.5 * (n * _LOG2PI + logdet)
    z = np.argmax(logw, axis=1)
    idx = np.arange(z.size)
    return z, marginals.mu[idx, z]


def summarize(marginals: VariationalMarginals, grid: TimeGrid) -> MarginalSummary:
    """Mixture-level summary (mode probabilities, overall mean and
    covariance) for comparison against grid-density references."""
    q = marginals.qZ
    mean = np.einsum("mk,mki->mi", q, marginals.mu)
    second = np.einsum(
        "mk,mkij->mij",
        q,
        marginals.Sigma + np.einsum("mki,mkj->mkij", marginals.mu, marginals.mu),
    )
    var = second - np.einsum("mi,mj->mij", mean, mean)
    return MarginalSummary(times=grid.times, mode_probs=q, mean=mean, var=var)


def sample_posterior(
    controls: VariationalControls,
    model: HybridModel,
    grid: TimeGrid,
    n_samples: int,
    seed,
) -> tuple:
    """Joint posterior draws: mode paths from the posterior rates by
    thinning, then Euler-Maruyama under the posterior drift with the
    model dispersion.  Returns (modes, states) with shapes
    (n_samples, M+1) and (n_samples, M+1, n)."""
    M, n = controls.M, controls.n
    h = grid.h
    chol_h = np.linalg.cholesky(model.D) * np.sqrt(h)
    modes = np.empty((n_samples, M + 1), dtype=np.int64)
    states = np.empty((n_samples, M + 1, n))
    node_t = grid.times
    for s, rng in enumerate(split_rngs(seed, n_samples)):
        zp = sample_mjp_inhomogeneous(controls.rates, grid, controls.q0, rng)
        z_nodes = zp.mode_at(node_t)
        modes[s] = z_nodes
        z0 = int(z_nodes[0])
        y = controls.mu0[z0] + np.linalg.cholesky(controls.Sigma0[z0]) @ rng.standard_normal(n)
        states[s, 0] = y
        noise = rng.standard_normal((M, n))
        for k in range(M):
            z = z_nodes[k]
            y = y + (controls.A[k, z] @ y + controls.b[k, z]) * h + chol_h[z] @ noise[k]
            states[s, k + 1] = y
    return modes, states
