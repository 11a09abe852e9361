"""Forward simulation of hybrid processes.

Mode paths are drawn exactly (Gillespie for constant rates, thinning
for time-varying rates); state paths use Euler-Maruyama with an
optional internal refinement, recorded on the reporting grid.  The two
benchmark multiwell potentials live here as well, with hand-derived
gradients, so nonlinear ground-truth trajectories can be generated and
observed.

All samplers are deterministic given a seed: pass either an integer or
a numpy Generator.  Composite pipelines derive independent per-task
generators from one seed via numpy's SeedSequence spawning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import HybridModel, ObservationSet, TimeGrid

__all__ = [
    "JumpPath",
    "StatePath",
    "rng_from",
    "split_rngs",
    "sample_mjp",
    "sample_mjp_inhomogeneous",
    "sample_ssde",
    "sample_nonlinear_sde",
    "sample_observation_times",
    "regular_observation_times",
    "observe",
    "four_well_potential",
    "four_well_drift",
    "three_well_potential",
    "three_well_drift",
]


def rng_from(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def split_rngs(seed, k: int) -> list:
    """k independent generators derived from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(k)]


# ---------------------------------------------------------------------------
# jump process
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JumpPath:
    """Piecewise-constant mode path on [0, T].

    modes[i] holds on [switch_times[i-1], switch_times[i]) with
    switch_times[-1] capped by T; modes has one more entry than
    switch_times.  The path is right-continuous.
    """

    T: float
    switch_times: np.ndarray
    modes: np.ndarray

    def __post_init__(self):
        if self.modes.shape[0] != self.switch_times.shape[0] + 1:
            raise ValueError("JumpPath: need len(modes) == len(switch_times) + 1")

    def mode_at(self, t) -> np.ndarray:
        """Mode at times t (right-continuous)."""
        idx = np.searchsorted(self.switch_times, np.asarray(t), side="right")
        return self.modes[idx]


def _draw_categorical(rng, p):
    return int(np.searchsorted(np.cumsum(p), rng.uniform() * np.sum(p)))


def sample_mjp(rates, p0, T: float, seed) -> JumpPath:
    """Exact (Gillespie) draw of the Markov jump process on [0, T].

    Holding times are exponential with the exit rate of the current
    mode; the next mode is chosen proportionally to the outgoing
    rates.  A mode with zero exit rate is absorbing.
    """
    rates = np.asarray(rates, dtype=float)
    rng = rng_from(seed)
    z = _draw_categorical(rng, np.asarray(p0, dtype=float))
    t = 0.0
    switch_times, modes = [], [z]
    while True:
        exit_rate = -rates[z, z]
        if exit_rate <= 0.0:
            break
        t = t + rng.exponential(1.0 / exit_rate)
        if t >= T:
            break
        out = rates[z].copy()
        out[z] = 0.0
        z = _draw_categorical(rng, out)
        switch_times.append(t)
        modes.append(z)
    return JumpPath(T=T, switch_times=np.array(switch_times), modes=np.array(modes))


def sample_mjp_inhomogeneous(rates_t, grid: TimeGrid, p0, seed) -> JumpPath:
    """Thinning draw of a jump process with piecewise-constant rates.

    rates_t has shape (M, K, K): one rate matrix per grid interval.
    Candidate events come from a per-mode dominating rate (the max exit
    rate of that mode over all intervals) and are accepted with
    probability actual/dominating, which reproduces the exact law.
    """
    rates_t = np.asarray(rates_t, dtype=float)
    M = grid.M
    if rates_t.shape[0] != M:
        raise ValueError("sample_mjp_inhomogeneous: need one rate matrix per interval")
    rng = rng_from(seed)
    K = rates_t.shape[1]
    exit_t = -rates_t[:, np.arange(K), np.arange(K)]  # (M, K)
    omega = exit_t.max(axis=0)  # per-mode dominating rate
    z = _draw_categorical(rng, np.asarray(p0, dtype=float))
    t = 0.0
    switch_times, modes = [], [z]
    while True:
        if omega[z] <= 0.0:
            break
        t = t + rng.exponential(1.0 / omega[z])
        if t >= grid.T:
            break
        k = min(int(t / grid.h), M - 1)
        if rng.uniform() * omega[z] <= exit_t[k, z]:
            out = rates_t[k, z].copy()
            out[z] = 0.0
            z = _draw_categorical(rng, out)
            switch_times.append(t)
            modes.append(z)
    return JumpPath(T=grid.T, switch_times=np.array(switch_times), modes=np.array(modes))


# ---------------------------------------------------------------------------
# diffusion given the mode path
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StatePath:
    """State trajectory on a uniform grid; modes is the mode at each
    node (or None for mode-free nonlinear simulations)."""

    times: np.ndarray
    y: np.ndarray
    modes: np.ndarray | None = None

    def nearest_node(self, t) -> np.ndarray:
        h = self.times[1] - self.times[0]
        idx = np.rint(np.asarray(t) / h).astype(np.int64)
        return np.clip(idx, 0, self.times.size - 1)


def sample_ssde(
    model: HybridModel, jump_path: JumpPath, grid: TimeGrid, seed, substeps: int = 1
) -> StatePath:
    """Euler-Maruyama draw of the switching diffusion along a mode path.

    Integrates at step h/substeps and records every h.  The initial
    state is drawn from the model's initial law conditional on the
    path's starting mode.
    """
    rng = rng_from(seed)
    n, M = model.n, grid.M
    h_fine = grid.h / substeps
    chol_h = np.linalg.cholesky(model.D) * np.sqrt(h_fine)  # (K, n, n)
    z0 = int(jump_path.modes[0])
    L0 = np.linalg.cholesky(model.Sigma0[z0])
    y = model.mu0[z0] + L0 @ rng.standard_normal(n)
    out = np.empty((M + 1, n))
    out[0] = y
    fine_times = h_fine * np.arange(M * substeps)
    z_fine = jump_path.mode_at(fine_times)
    noise = rng.standard_normal((M * substeps, n))
    for j in range(M * substeps):
        z = z_fine[j]
        drift = model.A_p[z] @ y + model.b_p[z]
        y = y + drift * h_fine + chol_h[z] @ noise[j]
        if (j + 1) % substeps == 0:
            out[(j + 1) // substeps] = y
    return StatePath(times=grid.times, y=out, modes=jump_path.mode_at(grid.times))


def sample_nonlinear_sde(
    drift_fn, D, y0, grid: TimeGrid, seed, substeps: int = 1
) -> StatePath:
    """Euler-Maruyama draw of dy = drift_fn(y) dt + Q dW, D = Q Q^T.

    drift_fn maps an (n,) state to an (n,) drift.  Used for the
    multiwell ground-truth trajectories; there is no mode here.
    """
    rng = rng_from(seed)
    y = np.asarray(y0, dtype=float).copy()
    n = y.shape[0]
    D = np.asarray(D, dtype=float).reshape(n, n)
    h_fine = grid.h / substeps
    L = np.linalg.cholesky(D) * np.sqrt(h_fine)
    M = grid.M
    out = np.empty((M + 1, n))
    out[0] = y
    noise = rng.standard_normal((M * substeps, n))
    for j in range(M * substeps):
        y = y + drift_fn(y) * h_fine + L @ noise[j]
        if (j + 1) % substeps == 0:
            out[(j + 1) // substeps] = y
    return StatePath(times=grid.times, y=out)


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------


def sample_observation_times(T: float, rate: float, seed) -> np.ndarray:
    """Poisson observation times on (0, T] with the given intensity."""
    rng = rng_from(seed)
    count = rng.poisson(rate * T)
    for _ in range(100):
        t = np.sort(rng.uniform(0.0, T, size=count))
        if t.size == 0 or (t[0] > 0.0 and np.all(np.diff(t) > 0.0)):
            return t
    raise RuntimeError("sample_observation_times: could not draw distinct times")


def regular_observation_times(T: float, spacing: float) -> np.ndarray:
    """Evenly spaced times spacing, 2*spacing, ... up to T."""
    count = int(np.floor(T / spacing + 1e-9))
    return spacing * np.arange(1, count + 1)


def observe(path: StatePath, t_obs, Sigma_obs, seed) -> ObservationSet:
    """Noisy observations of the path at the nodes nearest to t_obs."""
    t_obs = np.asarray(t_obs, dtype=float)
    Sigma_obs = np.asarray(Sigma_obs, dtype=float)
    rng = rng_from(seed)
    idx = path.nearest_node(t_obs)
    L = np.linalg.cholesky(Sigma_obs)
    noise = rng.standard_normal((t_obs.size, L.shape[0])) @ L.T
    return ObservationSet(times=t_obs, values=path.y[idx] + noise)


# ---------------------------------------------------------------------------
# benchmark potentials (drift = -grad V)
# ---------------------------------------------------------------------------


def four_well_potential(y):
    """1-D quartic-plus-bumps landscape with four metastable wells."""
    y = np.asarray(y, dtype=float)
    return 4.0 * (
        y**8
        + 3.0 * np.exp(-80.0 * y**2)
        + 2.5 * np.exp(-80.0 * (y - 0.5) ** 2)
        + 2.5 * np.exp(-80.0 * (y + 0.5) ** 2)
    )


def four_well_drift(y):
    """Negative gradient of :func:`four_well_potential`."""
    y = np.asarray(y, dtype=float)
    dV = 4.0 * (
        8.0 * y**7
        - 3.0 * 160.0 * y * np.exp(-80.0 * y**2)
        - 2.5 * 160.0 * (y - 0.5) * np.exp(-80.0 * (y - 0.5) ** 2)
        - 2.5 * 160.0 * (y + 0.5) * np.exp(-80.0 * (y + 0.5) ** 2)
    )
    return -dV


def three_well_potential(y):
    """2-D landscape with two deep wells at (+-1, 0) and a shallow one
    near (0, 5/3); y has shape (..., 2)."""
    y = np.asarray(y, dtype=float)
    y1, y2 = y[..., 0], y[..., 1]
    return (
        3.0 * np.exp(-(y1**2) - (y2 - 1.0 / 3.0) ** 2)
        - 3.0 * np.exp(-(y1**2) - (y2 - 5.0 / 3.0) ** 2)
        - 5.0 * np.exp(-((y1 - 1.0) ** 2) - y2**2)
        - 5.0 * np.exp(-((y1 + 1.0) ** 2) - y2**2)
        + 0.2 * y1**4
        + 0.2 * (y2 - 1.0 / 3.0) ** 4
    )


def three_well_drift(y):
    """Negative gradient of :func:`three_well_potential`, shape (..., 2)."""
    y = np.asarray(y, dtype=float)
    y1, y2 = y[..., 0], y[..., 1]
    e1 = np.exp(-(y1**2) - (y2 - 1.0 / 3.0) ** 2)
    e2 = np.exp(-(y1**2) - (y2 - 5.0 / 3.0) ** 2)
    e3 = np.exp(-((y1 - 1.0) ** 2) - y2**2)
    e4 = np.exp(-((y1 + 1.0) ** 2) - y2**2)
    dV1 = (
        3.0 * (-2.0 * y1) * e1
        - 3.0 * (-2.0 * y1) * e2
        - 5.0 * (-2.0 * (y1 - 1.0)) * e3
        - 5.0 * (-2.0 * (y1 + 1.0)) * e4
        + 0.8 * y1**3
    )
    dV2 = (
        3.0 * (-2.0 * (y2 - 1.0 / 3.0)) * e1
        - 3.0 * (-2.0 * (y2 - 5.0 / 3.0)) * e2
        - 5.0 * (-2.0 * y2) * e3
        - 5.0 * (-2.0 * y2) * e4
        + 0.8 * (y2 - 1.0 / 3.0) ** 3
    )
    return np.stack([-dV1, -dV2], axis=-1)
