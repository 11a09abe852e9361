"""Batch command-line interface: configuration-driven simulation,
fitting, posterior sampling, oracle comparison, and evaluation.

Subcommands write plot-ready CSVs plus a structured-text run report
into the output directory; nothing is interactive.  Exit codes: 0 on
success (for ``fit``: converged), 2 on non-convergence, 3 on invalid
configuration or input files, 4 on numerical failure.

The seed is taken from ``--seed`` if given, else from the
``SWITCHSDE_SEED`` environment variable, else from the config file.
Sub-streams (jump path, diffusion noise, observation times, observation
noise, posterior draws) are derived from it deterministically, so a
rerun with the same config and seed reproduces every artifact bit for
bit (wall-clock aside).
"""

import argparse
import concurrent.futures
import os
import sys
import time

import numpy as np
from scipy.special import ndtr

from .fileio import (
    ExperimentConfig,
    ParseError,
    RunReport,
    load_config,
    load_report,
    model_text,
    read_csv,
    save_model,
    save_report,
    sha256_text,
    write_csv,
)
from .learn import LearnOptions, vem
from .model import (
    HybridModel,
    NumericalError,
    ObservationSet,
    TimeGrid,
    rate_setpoint_from_drift,
    snap_observations,
)
from .oracle import MarginalSummary, compare_marginals, gfpe_smoother
from .simulate import (
    observe,
    regular_observation_times,
    sample_mjp,
    sample_observation_times,
    sample_ssde,
    split_rngs,
)
from .smoother import (
    VariationalControls,
    VariationalMarginals,
    map_path,
    sample_posterior,
    smooth,
    summarize,
)

__all__ = [
    "run_simulate",
    "run_fit",
    "run_sample_posterior",
    "run_oracle",
    "run_eval",
    "main",
]

SEED_ENV = "SWITCHSDE_SEED"

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_BAD_CONFIG = 3
EXIT_NUMERICAL = 4


# ---------------------------------------------------------------------------
# column layouts
# ---------------------------------------------------------------------------


def _obs_header(n):
    return ["t"] + [f"x_{i + 1}" for i in range(n)]


def _trajectory_header(n):
    return ["t", "z"] + [f"y_{i + 1}" for i in range(n)]


def _marginals_header(K, n):
    cols = ["t"] + [f"qZ_{z + 1}" for z in range(K)]
    cols += [f"mu_{z + 1}_{i + 1}" for z in range(K) for i in range(n)]
    cols += [
        f"Sigma_{z + 1}_{i + 1}_{j + 1}"
        for z in range(K)
        for i in range(n)
        for j in range(n)
    ]
    return cols

def _controls_header(K, n):
    cols = ["t"]
    cols += [
        f"A_{z + 1}_{i + 1}_{j + 1}"
        for z in range(K)
        for i in range(n)
        for j in range(n)
    ]
    cols += [f"b_{z + 1}_{i + 1}" for z in range(K) for i in range(n)]
    cols += [f"rate_{z + 1}_{w + 1}" for z in range(K) for w in range(K)]
    return cols


def _write_marginals(path, grid, marginals):
    M1, K, n = marginals.mu.shape
    data = np.concatenate(
        [
            grid.times[:, None],
            marginals.qZ,
            marginals.mu.reshape(M1, K * n),
            marginals.Sigma.reshape(M1, K * n * n),
        ],
        axis=1,
    )
    write_csv(path, _marginals_header(K, n), data)


def _read_marginals(path, grid, K, n):
    header, data = read_csv(path)
    if header != _marginals_header(K, n):
        raise ValueError(f"{path}: marginals columns do not match K={K}, n={n}")
    if data.shape[0] != grid.M + 1 or not np.array_equal(data[:, 0], grid.times):
        raise ValueError(f"{path}: time nodes do not match the configured grid")
    M1 = grid.M + 1
    qZ = data[:, 1 : 1 + K]
    mu = data[:, 1 + K : 1 + K + K * n].reshape(M1, K, n)
    Sigma = data[:, 1 + K + K * n :].reshape(M1, K, n, n)
    return VariationalMarginals(qZ=qZ, mu=mu, Sigma=Sigma)


def _write_controls(path, grid, controls):
    M, K, n = controls.M, controls.K, controls.n
    data = np.concatenate(
        [
            grid.times[:-1, None],
            controls.A.reshape(M, K * n * n),
            controls.b.reshape(M, K * n),
            controls.rates.reshape(M, K * K),
        ],
        axis=1,
    )
    write_csv(path, _controls_header(K, n), data)


def _read_controls(path, grid, K, n, marginals):
    header, data = read_csv(path)
    if header != _controls_header(K, n):
        raise ValueError(f"{path}: controls columns do not match K={K}, n={n}")
    if data.shape[0] != grid.M or not np.array_equal(data[:, 0], grid.times[:-1]):
        raise ValueError(f"{path}: time nodes do not match the configured grid")
    M = grid.M
    A = data[:, 1 : 1 + K * n * n].reshape(M, K, n, n)
    b = data[:, 1 + K * n * n : 1 + K * n * n + K * n].reshape(M, K, n)
    rates = data[:, 1 + K * n * n + K * n :].reshape(M, K, K)
    # the variational initial law equals the node-0 marginals exactly
    return VariationalControls(
        A=A, b=b, rates=rates,
        q0=marginals.qZ[0], mu0=marginals.mu[0], Sigma0=marginals.Sigma[0],
    )


def _load_observations(path, n):
    header, data = read_csv(path)
    if header != _obs_header(n):
        raise ValueError(f"{path}: expected columns {_obs_header(n)}")
    if data.shape[0] == 0:
        raise ValueError(f"{path}: no observations")
    return ObservationSet(times=data[:, 0], values=data[:, 1:])


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _model_hash(config):
    return sha256_text(model_text(config.model, config.grid))


def _simulate_data(config, seed):
    """Ground-truth draw for a config whose observation source is
    synthetic; returns (jump path, state path, observations)."""
    model, grid = config.model, config.grid
    r_jump, r_diff, r_times, r_noise = split_rngs(seed, 4)
    jp = sample_mjp(model.rates, model.p0, grid.T, r_jump)
    path = sample_ssde(model, jp, grid, r_diff, substeps=10)
    if config.obs_gap is not None:
        t_obs = regular_observation_times(grid.T, config.obs_gap)
    else:
        t_obs = sample_observation_times(grid.T, config.obs_intensity, r_times)
    if t_obs.size == 0:
        raise ValueError("simulated observation set is empty; raise the horizon")
    obs = observe(path, t_obs, model.Sigma_obs, r_noise)
    return jp, path, obs


def _obtain_observations(config, seed, out_dir):
    """Observations per the config source; synthetic sources also write
    the ground truth (trajectory.csv) and the observations themselves."""
    if config.obs_file is not None:
        return _load_observations(config.obs_file, config.model.n)
    jp, path, obs = _simulate_data(config, seed)
    traj = np.concatenate(
        [path.times[:, None], path.modes[:, None].astype(float), path.y], axis=1
    )
    write_csv(os.path.join(out_dir, "trajectory.csv"), _trajectory_header(config.model.n), traj)
    obs_tab = np.concatenate([obs.times[:, None], obs.values], axis=1)
    write_csv(os.path.join(out_dir, "observations.csv"), _obs_header(config.model.n), obs_tab)
    return obs


def _fitted_model(config, out_dir):
    """Model a completed fit in out_dir ran under: the learned one when
    the fit learned parameters, otherwise the configured model."""
    report_path = os.path.join(out_dir, "fit_report.txt")
    if os.path.exists(report_path):
        report = load_report(report_path)
        if report.learned is not None:
            return report.learned
    return config.model


def _parameter_rows(model):
    """Scalar (key, value) rows for the learned-parameter table, using
    the rate/set-point view when the drift matrices are invertible."""
    rows = []
    try:
        alpha, beta = rate_setpoint_from_drift(model.A_p, model.b_p)
        for z in range(model.K):
            for i in range(model.n):
                for j in range(model.n):
                    rows.append((f"alpha_{z + 1}_{i + 1}_{j + 1}", alpha[z, i, j]))
            for i in range(model.n):
                rows.append((f"beta_{z + 1}_{i + 1}", beta[z, i]))
    except np.linalg.LinAlgError:
        for z in range(model.K):
            for i in range(model.n):
                for j in range(model.n):
                    rows.append((f"A_p_{z + 1}_{i + 1}_{j + 1}", model.A_p[z, i, j]))
            for i in range(model.n):
                rows.append((f"b_p_{z + 1}_{i + 1}", model.b_p[z, i]))
    for z in range(model.K):
        for i in range(model.n):
            for j in range(model.n):
                rows.append((f"D_{z + 1}_{i + 1}_{j + 1}", model.D[z, i, j]))
    for z in range(model.K):
        for w in range(model.K):
            if w != z:
                rows.append((f"rate_{z + 1}_{w + 1}", model.rates[z, w]))
    for i in range(model.n):
        for j in range(model.n):
            rows.append((f"Sigma_obs_{i + 1}_{j + 1}", model.Sigma_obs[i, j]))
    return rows


def _write_parameter_table(path, learned, truth=None):
    """Learned parameters, one scalar per line, with a ground-truth
    column appended when the generating model is known."""
    rows = _parameter_rows(learned)
    truth_map = dict(_parameter_rows(truth)) if truth is not None else {}
    with open(path, "w", encoding="utf-8") as f:
        f.write("[parameters]\n")
        if truth is not None:
            f.write("# columns: learned truth\n")
        for key, value in rows:
            line = f"{key} = {format(value, '.17g')}"
            if key in truth_map:
                line += f" {format(truth_map[key], '.17g')}"
            f.write(line + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def run_simulate(config, seed, out_dir, args=None):
    """Draw ground truth and observations; write both plus metadata."""
    t0 = time.perf_counter()
    if config.obs_file is not None:
        raise ValueError("simulate: config's observation source is a file, nothing to draw")
    jp, path, obs = _simulate_data(config, seed)
    n = config.model.n
    traj = np.concatenate(
        [path.times[:, None], path.modes[:, None].astype(float), path.y], axis=1
    )
    write_csv(os.path.join(out_dir, "trajectory.csv"), _trajectory_header(n), traj)
    obs_tab = np.concatenate([obs.times[:, None], obs.values], axis=1)
    write_csv(os.path.join(out_dir, "observations.csv"), _obs_header(n), obs_tab)
    save_model(os.path.join(out_dir, "model.sde"), config.model, config.grid)
    report = RunReport(
        command="simulate",
        config_hash=config.config_hash,
        model_hash=_model_hash(config),
        seed=seed,
        wall_clock=time.perf_counter() - t0,
        converged=True,
        elbo_trace=np.empty(0),
        metrics={
            "n_observations": float(len(obs)),
            "n_jumps": float(jp.switch_times.size),
        },
    )
    save_report(os.path.join(out_dir, "simulate_report.txt"), report)
    print(
        f"simulate[{config.name}]: {len(obs)} observations, "
        f"{jp.switch_times.size} jumps -> {out_dir}"
    )
    return EXIT_OK


_LEARN_BLOCKS = {
    "rates": "learn_rates",
    "obs-cov": "learn_obs_cov",
    "dispersion": "learn_dispersion",
    "drift": "learn_drift",
    "initials": "learn_initials",
}


def _apply_learn_flag(config, learn_flag):
    """Resolve --learn against the config; returns (learn?, options)."""
    opts = config.learn_options
    if learn_flag is None:
        return config.fit_learn, opts
    if learn_flag == "none":
        return False, opts
    if learn_flag == "all":
        blocks = set(_LEARN_BLOCKS)
    else:
        blocks = {b.strip() for b in learn_flag.split(",") if b.strip()}
        unknown = blocks - set(_LEARN_BLOCKS)
        if unknown:
            raise ValueError(
                f"--learn: unknown block(s) {sorted(unknown)}; "
                f"choose from {sorted(_LEARN_BLOCKS)}, 'all', or 'none'"
            )
    import dataclasses

    kw = {field: (name in blocks) for name, field in _LEARN_BLOCKS.items()}
    return True, dataclasses.replace(opts, **kw)


def run_fit(config, seed, out_dir, args=None):
    """Smooth (or learn, per flags) and write marginals, controls, the
    objective trace, and the convergence report."""
    t0 = time.perf_counter()
    learn_flag = getattr(args, "learn", None)
    do_learn, opts = _apply_learn_flag(config, learn_flag)
    obs = _obtain_observations(config, seed, out_dir)
    grid = snap_observations(obs, config.grid)

    flags = ()
    learned = None
    if do_learn:
        init_model = config.model if config.fit_init == "model" else None
        out = vem(
            obs, grid, config.fit_K, options=opts, seed=seed,
            init_model=init_model, rate_init=config.rate_init,
        )
        result, converged = out.result, out.converged
        trace, flags, learned = out.elbo_trace, out.flags, out.model
        n_steps = out.n_outer
        save_model(os.path.join(out_dir, "learned_model.sde"), learned, config.grid)
        truth = config.model if config.obs_file is None else None
        _write_parameter_table(os.path.join(out_dir, "parameters.txt"), learned, truth)
    else:
        result = smooth(config.model, grid, obs, opts.smoother)
        converged = result.converged
        trace, flags = result.elbo_trace, result.flags
        n_steps = result.n_iter

    _write_marginals(os.path.join(out_dir, "marginals.csv"), grid, result.marginals)
    _write_controls(os.path.join(out_dir, "controls.csv"), grid, result.controls)
    write_csv(
        os.path.join(out_dir, "elbo_trace.csv"),
        ["step", "elbo"],
        np.column_stack([np.arange(len(trace), dtype=float), trace]),
    )
    bd = result.breakdown
    report = RunReport(
        command="fit",
        config_hash=config.config_hash,
        model_hash=_model_hash(config),
        seed=seed,
        wall_clock=time.perf_counter() - t0,
        converged=bool(converged),
        elbo_trace=np.asarray(trace),
        metrics={
            "elbo": bd.elbo,
            "loglik_term": bd.loglik,
            "kl_diffusion": bd.kl_diffusion,
            "kl_jump": bd.kl_jump,
            "kl_init": bd.kl_init,
            "n_steps": float(n_steps),
        },
        learned=learned,
        flags=tuple(flags),
    )
    save_report(os.path.join(out_dir, "fit_report.txt"), report)
    print(
        f"fit[{config.name}]: elbo {bd.elbo:.6f}, "
        f"{'converged' if converged else 'NOT converged'} "
        f"after {n_steps} {'outer iterations' if do_learn else 'sweeps'} -> {out_dir}"
    )
    return EXIT_OK if converged else EXIT_NOT_CONVERGED


def run_sample_posterior(config, seed, out_dir, args=None):
    """Draw joint posterior paths from a completed fit's controls."""
    t0 = time.perf_counter()
    n_samples = getattr(args, "samples", None) or 200
    model = _fitted_model(config, out_dir)
    grid = config.grid
    marg_path = os.path.join(out_dir, "marginals.csv")
    ctrl_path = os.path.join(out_dir, "controls.csv")
    for p in (marg_path, ctrl_path):
        if not os.path.exists(p):
            raise ValueError(f"sample-posterior: missing {p} (run fit first)")
    marginals = _read_marginals(marg_path, grid, model.K, model.n)
    controls = _read_controls(ctrl_path, grid, model.K, model.n, marginals)
    modes, states = sample_posterior(controls, model, grid, n_samples, seed)

    M1 = grid.M + 1
    rows = np.concatenate(
        [
            np.repeat(np.arange(n_samples, dtype=float), M1)[:, None],
            np.tile(grid.times, n_samples)[:, None],
            modes.reshape(-1, 1).astype(float),
            states.reshape(n_samples * M1, model.n),
        ],
        axis=1,
    )
    header = ["sample", "t", "z"] + [f"y_{i + 1}" for i in range(model.n)]
    write_csv(os.path.join(out_dir, "posterior_samples.csv"), header, rows)
    report = RunReport(
        command="sample-posterior",
        config_hash=config.config_hash,
        model_hash=_model_hash(config),
        seed=seed,
        wall_clock=time.perf_counter() - t0,
        converged=True,
        elbo_trace=np.empty(0),
        metrics={"n_samples": float(n_samples)},
    )
    save_report(os.path.join(out_dir, "sample_report.txt"), report)
    print(f"sample-posterior[{config.name}]: {n_samples} joint draws -> {out_dir}")
    return EXIT_OK


def run_oracle(config, seed, out_dir, args=None):
    """Dense-grid exact smoother on the fitted model, compared against
    the variational marginals of a completed fit."""
    t0 = time.perf_counter()
    model = _fitted_model(config, out_dir)
    if model.n != 1:
        raise ValueError("oracle supports 1D only")
    grid = config.grid
    marg_path = os.path.join(out_dir, "marginals.csv")
    if not os.path.exists(marg_path):
        raise ValueError(f"oracle: missing {marg_path} (run fit first)")
    marginals = _read_marginals(marg_path, grid, model.K, model.n)
    obs_path = os.path.join(out_dir, "observations.csv")
    if config.obs_file is not None:
        obs_path = config.obs_file
    obs = _load_observations(obs_path, model.n)
    grid = snap_observations(obs, grid)

    sd = np.sqrt(marginals.Sigma[:, :, 0, 0])
    pad = config.oracle_pad
    anchors = np.concatenate(
        [
            (marginals.mu[:, :, 0] - pad * sd).ravel(),
            (marginals.mu[:, :, 0] + pad * sd).ravel(),
            obs.values.ravel(),
            model.setpoints().ravel(),
        ]
    )
    y = np.linspace(anchors.min(), anchors.max(), config.oracle_cells)
    gd = gfpe_smoother(model, grid, obs, y)

    stride = config.oracle_stride
    keep = np.arange(0, grid.M + 1, stride)
    cells = y.size
    t_col = np.repeat(gd.times[keep], model.K * cells)
    z_col = np.tile(np.repeat(np.arange(1.0, model.K + 1), cells), keep.size)
    y_col = np.tile(y, keep.size * model.K)
    d_col = gd.density[keep].reshape(-1)
    write_csv(
        os.path.join(out_dir, "oracle_density.csv"),
        ["t", "y", "z", "density"],
        np.column_stack([t_col, y_col, z_col, d_col]),
    )

    gaps = compare_marginals(
        MarginalSummary.from_grid_density(gd), summarize(marginals, grid)
    )
    metrics = dict(gaps)
    metrics["mass_error"] = float(np.max(np.abs(gd.masses - 1.0)))
    report = RunReport(
        command="oracle",
        config_hash=config.config_hash,
        model_hash=_model_hash(config),
        seed=seed,
        wall_clock=time.perf_counter() - t0,
        converged=True,
        elbo_trace=np.empty(0),
        metrics=metrics,
    )
    save_report(os.path.join(out_dir, "oracle_report.txt"), report)
    print(
        f"oracle[{config.name}]: argmax agreement {gaps['argmax_agreement']:.3f}, "
        f"mean gap {gaps['mean_sup']:.3e} -> {out_dir}"
    )
    return EXIT_OK


def _mixture_central_interval(qZ, mu, sd, level=0.95):
    """Per-node central interval of a scalar Gaussian mixture by
    bisection on its CDF; returns (lo, hi) arrays."""
    tail = 0.5 * (1.0 - level)

    def quantile(p):
        lo = np.min(mu - 10.0 * sd, axis=1)
        hi = np.max(mu + 10.0 * sd, axis=1)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            cdf = np.sum(qZ * ndtr((mid[:, None] - mu) / sd), axis=1)
            below = cdf < p
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    return quantile(tail), quantile(1.0 - tail)


def run_eval(config, seed, out_dir, args=None):
    """Reconstruction metrics for a completed fit: mode accuracy and
    state RMSE against ground truth when available, observation RMSE
    and 95% coverage always computable from the stored artifacts."""
    t0 = time.perf_counter()
    model = _fitted_model(config, out_dir)
    grid = config.grid
    marg_path = os.path.join(out_dir, "marginals.csv")
    if not os.path.exists(marg_path):
        raise ValueError(f"eval: missing {marg_path} (run fit first)")
    marginals = _read_marginals(marg_path, grid, model.K, model.n)
    z_map, _ = map_path(marginals)
    mean = np.einsum("mk,mki->mi", marginals.qZ, marginals.mu)

    metrics = {}
    obs_path = os.path.join(out_dir, "observations.csv")
    if config.obs_file is not None:
        obs_path = config.obs_file
    if os.path.exists(obs_path):
        obs = _load_observations(obs_path, model.n)
        sg = snap_observations(obs, grid)
        resid = obs.values - mean[sg.obs_nodes]
        metrics["obs_rmse"] = float(np.sqrt(np.mean(resid**2)))

    traj_path = os.path.join(out_dir, "trajectory.csv")
    if os.path.exists(traj_path):
        header, traj = read_csv(traj_path)
        if header != _trajectory_header(model.n):
            raise ValueError(f"{traj_path}: unexpected columns")
        if traj.shape[0] != grid.M + 1 or not np.array_equal(traj[:, 0], grid.times):
            raise ValueError(f"{traj_path}: time nodes do not match the configured grid")
        z_true = traj[:, 1].astype(int)
        y_true = traj[:, 2:]
        metrics["mode_accuracy"] = float(np.mean(z_map == z_true))
        metrics["state_rmse"] = float(np.sqrt(np.mean((mean - y_true) ** 2)))
        if model.n == 1:
            lo, hi = _mixture_central_interval(
                marginals.qZ, marginals.mu[:, :, 0],
                np.sqrt(marginals.Sigma[:, :, 0, 0]),
            )
            inside = (y_true[:, 0] >= lo) & (y_true[:, 0] <= hi)
            metrics["coverage_95"] = float(np.mean(inside))

    report = RunReport(
        command="eval",
        config_hash=config.config_hash,
        model_hash=_model_hash(config),
        seed=seed,
        wall_clock=time.perf_counter() - t0,
        converged=True,
        elbo_trace=np.empty(0),
        metrics=metrics,
    )
    save_report(os.path.join(out_dir, "eval_report.txt"), report)
    print(f"eval[{config.name}]:")
    for key, value in metrics.items():
        print(f"  {key} = {value:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

_COMMANDS = {
    "simulate": run_simulate,
    "fit": run_fit,
    "sample-posterior": run_sample_posterior,
    "oracle": run_oracle,
    "eval": run_eval,
}


def _resolve_seed(flag_seed, config):
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"{SEED_ENV}={env!r} is not an integer") from None
    return config.seed


def _resolve_out(flag_out, config):
    out = flag_out if flag_out is not None else config.out_dir
    if out is None:
        out = os.path.join("runs", config.name)
    os.makedirs(out, exist_ok=True)
    return out


def _run_single(command, config_path, args):
    try:
        config = load_config(config_path)
        seed = _resolve_seed(args.seed, config)
        out_dir = _resolve_out(args.out, config)
        return _COMMANDS[command](config, seed, out_dir, args)
    except (ParseError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except (NumericalError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


def _worker(payload):
    command, config_path, args_dict = payload
    args = argparse.Namespace(**args_dict)
    return _run_single(command, config_path, args)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="switchsde",
        description="Simulation, variational smoothing, and parameter "
        "learning for jump-modulated switching diffusions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0].lower())
        p.add_argument(
            "--config", action="append", required=True, metavar="PATH",
            help="experiment config file (repeatable)",
        )
        p.add_argument("--seed", type=int, default=None, metavar="U64",
                       help=f"seed override (beats {SEED_ENV} and the config)")
        p.add_argument("--out", default=None, metavar="DIR",
                       help="output directory (beats the config)")
        p.add_argument("--jobs", type=int, default=1, metavar="N",
                       help="run multiple configs in N parallel processes")
        if name == "fit":
            p.add_argument(
                "--learn", default=None, metavar="BLOCKS",
                help="override learned blocks: 'all', 'none', or a comma "
                "list from rates, obs-cov, dispersion, drift, initials",
            )
        if name == "sample-posterior":
            p.add_argument("--samples", type=int, default=200, metavar="N",
                           help="number of joint posterior draws")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_BAD_CONFIG
    configs = args.config
    if args.jobs == 1 or len(configs) == 1:
        codes = [_run_single(args.command, path, args) for path in configs]
        return max(codes)
    args_dict = dict(vars(args))
    del args_dict["config"]
    payloads = [(args.command, path, args_dict) for path in configs]
    with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
        codes = list(pool.map(_worker, payloads))
    return max(codes)


if __name__ == "__main__":
    sys.exit(main())
