"""Model containers and validation for jump-modulated switching diffusions.

A hybrid process pairs a continuous-time Markov jump process z(t) on
{1..K} with a diffusion y(t) in R^n whose drift switches with the mode:

    dy = f(y, z, t) dt + Q(z) dW,        D(z) = Q(z) Q(z)^T.

The prior drift is linear per mode, f = A_p(z) y + b_p(z), often more
naturally written in rate/set-point form f = -alpha_z (y - beta_z).
Observations are noisy snapshots of y at discrete times.

Shape conventions used across the package (K modes, state dimension n):

    rates             (K, K)     off-diagonals >= 0, rows sum to zero
    A_p, D, Sigma0    (K, n, n)
    b_p, mu0          (K, n)
    p0                (K,)
    Sigma_obs         (n, n)

Model containers are frozen dataclasses; arrays are copied on
construction and marked read-only, so instances behave as values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NumericalError",
    "TimeGrid",
    "ObservationSet",
    "HybridModel",
    "drift_from_rate_setpoint",
    "rate_setpoint_from_drift",
    "validate_model",
    "raise_if_invalid",
    "snap_observations",
]


class NumericalError(RuntimeError):
    """Raised when an integration or linear-algebra step leaves the
    region where the computation is trustworthy (negative probability
    mass, loss of positive definiteness, unstable step size)."""


def _frozen_array(x, dtype=float) -> np.ndarray:
    a = np.array(x, dtype=dtype)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# time grid and observations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with step h and optional observation nodes.

    Parameters
    ----------
    T, h : float
        Horizon and step.  T must be an integer multiple of h (to within
        a 1e-9 relative tolerance).
    obs_nodes : array of int, optional
        Strictly increasing node indices in [0, M] where observations
        sit.  Usually produced by :func:`snap_observations`.
    """

    T: float
    h: float
    obs_nodes: np.ndarray | None = None

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0.0):
            raise ValueError("TimeGrid: T must be positive and finite")
        if not (np.isfinite(self.h) and self.h > 0.0):
            raise ValueError("TimeGrid: h must be positive and finite")
        m = round(self.T / self.h)
        if m < 1 or abs(m * self.h - self.T) > 1e-9 * max(1.0, abs(self.T)):
            raise ValueError(
                f"TimeGrid: T={self.T!r} is not an integer multiple of h={self.h!r}"
            )
        if self.obs_nodes is not None:
            nodes = _frozen_array(self.obs_nodes, dtype=np.int64)
            if nodes.ndim != 1:
                raise ValueError("TimeGrid: obs_nodes must be one-dimensional")
            if nodes.size:
                if nodes.min() < 0 or nodes.max() > m:
                    raise ValueError("TimeGrid: obs_nodes outside [0, M]")
                if np.any(np.diff(nodes) <= 0):
                    raise ValueError("TimeGrid: obs_nodes must be strictly increasing")
            object.__setattr__(self, "obs_nodes", nodes)

    @property
    def M(self) -> int:
        """Number of intervals."""
        return round(self.T / self.h)

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.M + 1)


@dataclass(frozen=True)
class ObservationSet:
    """Observation times in (0, T] and values, one row per observation.

    values has shape (N, n).  Times must be strictly increasing and
    positive; whether they fit a given grid is checked at snap time.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = _frozen_array(self.times)
        x = _frozen_array(self.values)
        if t.ndim != 1:
            raise ValueError("ObservationSet: times must be one-dimensional")
        if x.ndim != 2 or x.shape[0] != t.shape[0]:
            raise ValueError("ObservationSet: values must have shape (N, n)")
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(x)):
            raise ValueError("ObservationSet: non-finite entries")
        if t.size and t[0] <= 0.0:
            raise ValueError("ObservationSet: times must be positive")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("ObservationSet: times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", x)

    def __len__(self) -> int:
        return self.times.shape[0]


def snap_observations(obs: ObservationSet, grid: TimeGrid) -> TimeGrid:
    """Snap observation times to the nearest grid node.

    Ties within 1e-9*h go to the later node.  Returns a copy of the
    grid with obs_nodes set, in observation order.  Raises ValueError
    if two observations land on the same node or one falls outside
    [0, T].
    """
    t = obs.times
    if t.size and t[-1] > grid.T + 1e-9 * grid.h:
        raise ValueError("snap_observations: observation beyond horizon T")
    r = t / grid.h
    lo = np.clip(np.floor(r), 0, grid.M).astype(np.int64)
    hi = np.clip(np.ceil(r), 0, grid.M).astype(np.int64)
    d_lo = np.abs(t - lo * grid.h)
    d_hi = np.abs(hi * grid.h - t)
    nodes = np.where(d_lo < d_hi - 1e-9 * grid.h, lo, hi)
    if np.unique(nodes).size != nodes.size:
        raise ValueError("grid too coarse for observation density")
    return dataclasses.replace(grid, obs_nodes=nodes)


# ---------------------------------------------------------------------------
# hybrid model
# ---------------------------------------------------------------------------


def drift_from_rate_setpoint(alpha, beta):
    """Convert rate/set-point drift -alpha (y - beta) to (A_p, b_p).

    alpha: (K, n, n), beta: (K, n).  Returns A_p = -alpha and
    b_p = alpha @ beta.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    return -alpha, np.einsum("kij,kj->ki", alpha, beta)


def rate_setpoint_from_drift(A_p, b_p):
    """Inverse of :func:`drift_from_rate_setpoint`; requires A_p invertible."""
    A_p = np.asarray(A_p, dtype=float)
    b_p = np.asarray(b_p, dtype=float)
    alpha = -A_p
    beta = np.linalg.solve(alpha, b_p[..., None])[..., 0]
    return alpha, beta


@dataclass(frozen=True)
class HybridModel:
    """Complete generative model: jump rates, per-mode linear drift and
    dispersion, initial law, and the Gaussian observation channel.

    rates[i, j] for i != j is the jump intensity i -> j; diagonals are
    the negative exit rates.  The observation map is the identity
    (observations live in state space) with noise covariance Sigma_obs.
    """

    rates: np.ndarray
    A_p: np.ndarray
    b_p: np.ndarray
    D: np.ndarray
    p0: np.ndarray
    mu0: np.ndarray
    Sigma0: np.ndarray
    Sigma_obs: np.ndarray

    def __post_init__(self):
        for name in ("rates", "A_p", "b_p", "D", "p0", "mu0", "Sigma0", "Sigma_obs"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))
        K = self.rates.shape[0]
        if self.rates.shape != (K, K):
            raise ValueError("HybridModel: rates must be square (K, K)")
        if self.b_p.ndim != 2 or self.b_p.shape[0] != K:
            raise ValueError("HybridModel: b_p must have shape (K, n)")
        n = self.b_p.shape[1]
        shapes = {
            "A_p": (K, n, n),
            "D": (K, n, n),
            "p0": (K,),
            "mu0": (K, n),
            "Sigma0": (K, n, n),
            "Sigma_obs": (n, n),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ValueError(f"HybridModel: {name} has shape {got}, expected {want}")

    @property
    def K(self) -> int:
        return self.rates.shape[0]

    @property
    def n(self) -> int:
        return self.b_p.shape[1]

    def setpoints(self) -> np.ndarray:
        """Per-mode drift fixed points beta_z = -A_p(z)^{-1} b_p(z)."""
        return rate_setpoint_from_drift(self.A_p, self.b_p)[1]

    def replace(self, **kw) -> "HybridModel":
        return dataclasses.replace(self, **kw)


def _check_spd(name: str, mat: np.ndarray, out: list, sym_tol: float = 1e-9):
    if not np.all(np.isfinite(mat)):
        out.append(f"{name}: non-finite entries")
        return
    if np.max(np.abs(mat - mat.T)) > sym_tol * max(1.0, np.max(np.abs(mat))):
        out.append(f"{name}: not symmetric")
        return
    w = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    if w.min() <= 0.0:
        out.append(f"{name}: not positive definite (min eigenvalue {w.min():.3e})")


def validate_model(model: HybridModel) -> list:
    """Check model invariants; return a list of violation strings.

    An empty list means the model is valid.  Each entry names the
    offending component (and mode index where that applies).
    """
    v: list = []
    K = model.K
    R = model.rates
    if not np.all(np.isfinite(R)):
        v.append("rates: non-finite entries")
    else:
        off = R - np.diag(np.diag(R))
        if off.min() < 0.0:
            i, j = np.unravel_index(np.argmin(off), off.shape)
            v.append(f"rates: negative off-diagonal entry at ({i}, {j})")
        rowsum = R.sum(axis=1)
        bad = np.abs(rowsum) > 1e-9 * max(1.0, np.max(np.abs(R)))
        for i in np.nonzero(bad)[0]:
            v.append(f"rates: row {i} sums to {rowsum[i]:.6g}, expected 0")
    if not np.all(np.isfinite(model.A_p)):
        v.append("A_p: non-finite entries")
    if not np.all(np.isfinite(model.b_p)):
        v.append("b_p: non-finite entries")
    for z in range(K):
        _check_spd(f"D (mode {z})", model.D[z], v)
        _check_spd(f"Sigma0 (mode {z})", model.Sigma0[z], v)
    if not np.all(np.isfinite(model.mu0)):
        v.append("mu0: non-finite entries")
    if not np.all(np.isfinite(model.p0)):
        v.append("p0: non-finite entries")
    else:
        if model.p0.min() < 0.0:
            v.append(f"p0: negative entry {model.p0.min():.6g}")
        if abs(model.p0.sum() - 1.0) > 1e-9:
            v.append(f"p0: sums to {model.p0.sum():.12g}, expected 1")
    _check_spd("Sigma_obs", model.Sigma_obs, v)
    return v


def raise_if_invalid(model: HybridModel) -> None:
    problems = validate_model(model)
    if problems:
        raise ValueError("invalid model:\n  " + "\n  ".join(problems))
