"""Structured-text and CSV persistence for models, experiment configs,
and run reports.

The text format is deliberately small: ``[section]`` headers, ``key =
value`` lines, ``#`` comments.  Vectors are whitespace-separated
numbers, matrices separate rows with ``;``.  Every parse problem is
reported with the file, line, and field it came from.  Numeric CSV
artifacts are written with 17 significant digits so reruns and
round-trips are bit-exact.
"""

import dataclasses
import hashlib
import io
import os
import re

import numpy as np

from .model import (
    HybridModel,
    TimeGrid,
    drift_from_rate_setpoint,
    validate_model,
)
from .learn import LearnOptions
from .smoother import SmootherOptions

__all__ = [
    "ParseError",
    "Document",
    "parse_document",
    "load_model",
    "save_model",
    "model_text",
    "ExperimentConfig",
    "load_config",
    "RunReport",
    "save_report",
    "load_report",
    "write_csv",
    "read_csv",
    "sha256_text",
    "sha256_file",
]


class ParseError(ValueError):
    """Structured-text parse or validation failure, located by line."""


# ---------------------------------------------------------------------------
# line-tracked document
# ---------------------------------------------------------------------------

_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class Document:
    """Parsed key/value sections with the line each entry came from.

    sections maps section name -> key -> (raw value, line number); the
    implicit section before any header is named "".  Typed getters
    raise ParseError with file/line/field context.
    """

    def __init__(self, path="<text>"):
        self.path = path
        self.sections = {}
        self._section_lines = {}

    # -- construction ------------------------------------------------

    def _add_section(self, name, line):
        if name in self.sections:
            self._fail(line, name, "", "duplicate section")
        self.sections[name] = {}
        self._section_lines[name] = line

    def _add_key(self, section, key, value, line):
        if key in self.sections[section]:
            self._fail(line, section, key, "duplicate key")
        self.sections[section][key] = (value, line)

    # -- errors --------------------------------------------------------

    def _fail(self, line, section, key, problem):
        field = f"[{section}] {key}".strip()
        raise ParseError(f"{self.path}:{line}: {field}: {problem}")

    def fail_key(self, section, key, problem):
        """Raise a ParseError pointing at an existing key (or its section)."""
        if key and self.has(section, key):
            self._fail(self.sections[section][key][1], section, key, problem)
        self._fail(self._section_lines.get(section, 0), section, key, problem)

    # -- queries -------------------------------------------------------

    def has_section(self, name):
        return name in self.sections

    def has(self, section, key):
        return key in self.sections.get(section, {})

    def keys(self, section):
        return tuple(self.sections.get(section, {}))

    def require_section(self, name):
        if name not in self.sections:
            raise ParseError(f"{self.path}: missing required section [{name}]")
        return self

    def check_known(self, section, allowed, patterns=()):
        for key, (_, line) in self.sections.get(section, {}).items():
            if key in allowed:
                continue
            if any(re.fullmatch(pat, key) for pat in patterns):
                continue
            self._fail(line, section, key, "unknown key")

    # -- typed getters ---------------------------------------------------

    _REQUIRED = object()

    def get_str(self, section, key, default=_REQUIRED):
        entry = self.sections.get(section, {}).get(key)
        if entry is None:
            if default is Document._REQUIRED:
                self._fail(
                    self._section_lines.get(section, 0), section, key, "missing key"
                )
            return default
        return entry[0]

    def get_bool(self, section, key, default=_REQUIRED):
        raw = self.get_str(section, key, default)
        if not isinstance(raw, str):
            return raw
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        self.fail_key(section, key, f"expected a boolean, got {raw!r}")

    def get_int(self, section, key, default=_REQUIRED):
        raw = self.get_str(section, key, default)
        if not isinstance(raw, str):
            return raw
        try:
            return int(raw)
        except ValueError:
            self.fail_key(section, key, f"expected an integer, got {raw!r}")

    def get_float(self, section, key, default=_REQUIRED):
        raw = self.get_str(section, key, default)
        if not isinstance(raw, str):
            return raw
        try:
            return float(raw)
        except ValueError:
            self.fail_key(section, key, f"expected a number, got {raw!r}")

    def get_vector(self, section, key, length=None, default=_REQUIRED):
        raw = self.get_str(section, key, default)
        if not isinstance(raw, str):
            return raw
        try:
            v = np.array([float(tok) for tok in raw.replace(",", " ").split()])
        except ValueError:
            self.fail_key(section, key, f"expected numbers, got {raw!r}")
        if length is not None and v.size != length:
            self.fail_key(section, key, f"expected {length} numbers, got {v.size}")
        return v

    def get_matrix(self, section, key, shape=None, default=_REQUIRED):
        raw = self.get_str(section, key, default)
        if not isinstance(raw, str):
            return raw
        rows = []
        for part in raw.split(";"):
            try:
                rows.append([float(tok) for tok in part.replace(",", " ").split()])
            except ValueError:
                self.fail_key(section, key, f"expected numbers, got {part.strip()!r}")
        if len({len(r) for r in rows}) > 1:
            self.fail_key(section, key, "rows have unequal lengths")
        m = np.array(rows)
        if shape is not None and m.shape != shape:
            self.fail_key(
                section, key,
                f"expected a {shape[0]}x{shape[1]} matrix, got {m.shape[0]}x{m.shape[1]}",
            )
        return m


def parse_document(text, path="<text>"):
    """Parse structured text into a Document, tracking line numbers."""
    doc = Document(path)
    doc._add_section("", 0)
    section = ""
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                doc._fail(lineno, section, line, "unterminated section header")
            name = line[1:-1].strip()
            if not name:
                doc._fail(lineno, section, line, "empty section name")
            doc._add_section(name, lineno)
            section = name
            continue
        if "=" not in line:
            doc._fail(lineno, section, line, "expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if not _KEY_RE.match(key):
            doc._fail(lineno, section, key, "invalid key name")
        doc._add_key(section, key, value.strip(), lineno)
    return doc


def _load_document(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ParseError(f"{path}: cannot read: {e.strerror}") from e
    return parse_document(text, path=str(path))


# ---------------------------------------------------------------------------
# number formatting
# ---------------------------------------------------------------------------


def _fmt(x):
    return format(float(x), ".17g")


def _fmt_vector(v):
    return " ".join(_fmt(x) for x in np.asarray(v).ravel())


def _fmt_matrix(m):
    m = np.asarray(m)
    return " ; ".join(" ".join(_fmt(x) for x in row) for row in m)


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

_MODEL_FIXED_KEYS = ("K", "n", "rates", "p0", "Sigma_obs")
_MODE_KEY_PATTERNS = (
    r"alpha_\d+",
    r"beta_\d+",
    r"A_p_\d+",
    r"b_p_\d+",
    r"D_\d+",
    r"mu0_\d+",
    r"Sigma0_\d+",
)


def _read_model_section(doc, section="model"):
    doc.require_section(section)
    doc.check_known(section, set(_MODEL_FIXED_KEYS), patterns=_MODE_KEY_PATTERNS)
    K = doc.get_int(section, "K")
    n = doc.get_int(section, "n")
    if K < 1:
        doc.fail_key(section, "K", "must be >= 1")
    if n < 1:
        doc.fail_key(section, "n", "must be >= 1")
    rates = doc.get_matrix(section, "rates", shape=(K, K))
    p0 = doc.get_vector(section, "p0", length=K)
    Sigma_obs = doc.get_matrix(section, "Sigma_obs", shape=(n, n))

    use_setpoint = doc.has(section, "alpha_1")
    use_drift = doc.has(section, "A_p_1")
    if use_setpoint and use_drift:
        doc.fail_key(section, "A_p_1", "give either alpha_z/beta_z or A_p_z/b_p_z, not both")
    if not use_setpoint and not use_drift:
        doc.fail_key(section, "", "missing drift: give alpha_1/beta_1 or A_p_1/b_p_1")

    def mode_stack(prefix, shape):
        out = np.empty((K,) + shape)
        for z in range(K):
            key = f"{prefix}_{z + 1}"
            if not doc.has(section, key):
                doc.fail_key(section, key, "missing key")
            if len(shape) == 2:
                out[z] = doc.get_matrix(section, key, shape=shape)
            else:
                out[z] = doc.get_vector(section, key, length=shape[0])
        return out

    if use_setpoint:
        alpha = mode_stack("alpha", (n, n))
        beta = mode_stack("beta", (n,))
        A_p, b_p = drift_from_rate_setpoint(alpha, beta)
    else:
        A_p = mode_stack("A_p", (n, n))
        b_p = mode_stack("b_p", (n,))
    D = mode_stack("D", (n, n))
    mu0 = mode_stack("mu0", (n,))
    Sigma0 = mode_stack("Sigma0", (n, n))

    try:
        model = HybridModel(
            rates=rates, A_p=A_p, b_p=b_p, D=D,
            p0=p0, mu0=mu0, Sigma0=Sigma0, Sigma_obs=Sigma_obs,
        )
    except ValueError as e:
        raise ParseError(f"{doc.path}: [{section}]: {e}") from e
    problems = validate_model(model)
    if problems:
        doc.fail_key(section, "", "; ".join(problems))
    return model


def _read_grid_section(doc, section="grid"):
    doc.require_section(section)
    doc.check_known(section, {"T", "h"})
    T = doc.get_float(section, "T")
    h = doc.get_float(section, "h")
    try:
        return TimeGrid(T=T, h=h)
    except ValueError as e:
        raise ParseError(f"{doc.path}: [{section}]: {e}") from e


def load_model(path):
    """Read a model file; returns (HybridModel, TimeGrid)."""
    doc = _load_document(path)
    return _read_model_section(doc), _read_grid_section(doc)


def model_text(model, grid=None, section="model"):
    """Canonical structured-text form of a model (17 significant digits)."""
    out = io.StringIO()
    out.write(f"[{section}]\n")
    out.write(f"K = {model.K}\nn = {model.n}\n")
    out.write(f"rates = {_fmt_matrix(model.rates)}\n")
    out.write(f"p0 = {_fmt_vector(model.p0)}\n")
    out.write(f"Sigma_obs = {_fmt_matrix(model.Sigma_obs)}\n")
    for z in range(model.K):
        out.write(f"A_p_{z + 1} = {_fmt_matrix(model.A_p[z])}\n")
        out.write(f"b_p_{z + 1} = {_fmt_vector(model.b_p[z])}\n")
        out.write(f"D_{z + 1} = {_fmt_matrix(model.D[z])}\n")
        out.write(f"mu0_{z + 1} = {_fmt_vector(model.mu0[z])}\n")
        out.write(f"Sigma0_{z + 1} = {_fmt_matrix(model.Sigma0[z])}\n")
    if grid is not None:
        out.write(f"[grid]\nT = {_fmt(grid.T)}\nh = {_fmt(grid.h)}\n")
    return out.getvalue()


def save_model(path, model, grid):
    with open(path, "w", encoding="utf-8") as f:
        f.write(model_text(model, grid))


# ---------------------------------------------------------------------------
# experiment configs
# ---------------------------------------------------------------------------

_FIT_KEYS = {
    "K", "init", "rate_init", "learn",
    "learn_rates", "learn_obs_cov", "learn_dispersion", "learn_drift",
    "learn_initials",
    "tol_inner", "max_inner", "gamma", "max_backtracks", "rate_floor",
    "max_outer", "tol_outer", "tol_theta", "m_cycles", "accel",
}


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: model, grid, observation source, fit settings.

    Exactly one observation source is set: a CSV file, a regular
    spacing, or a Poisson intensity (the latter two mean "simulate").
    """

    name: str
    seed: int
    out_dir: str | None
    model: HybridModel
    grid: TimeGrid
    obs_file: str | None
    obs_gap: float | None
    obs_intensity: float | None
    fit_learn: bool
    fit_K: int
    fit_init: str
    rate_init: float
    learn_options: LearnOptions
    oracle_cells: int
    oracle_pad: float
    oracle_stride: int
    config_hash: str
    path: str

    def __post_init__(self):
        sources = [
            s for s in (self.obs_file, self.obs_gap, self.obs_intensity)
            if s is not None
        ]
        if len(sources) != 1:
            raise ValueError(
                "ExperimentConfig: exactly one observation source required"
            )
        if self.fit_init not in ("kmeans", "model"):
            raise ValueError("ExperimentConfig: init must be 'kmeans' or 'model'")


def sha256_text(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def load_config(path):
    """Read an experiment config; resolves file references relative to it."""
    doc = _load_document(path)
    base = os.path.dirname(os.path.abspath(path))

    doc.require_section("experiment")
    doc.check_known("experiment", {"name", "seed", "out"})
    name = doc.get_str("experiment", "name")
    seed = doc.get_int("experiment", "seed", 0)
    out_dir = doc.get_str("experiment", "out", None)
    if out_dir is not None:
        out_dir = os.path.join(base, out_dir)

    if doc.has("model", "file"):
        doc.check_known("model", {"file"})
        ref = os.path.join(base, doc.get_str("model", "file"))
        if not os.path.exists(ref):
            doc.fail_key("model", "file", f"referenced file does not exist: {ref}")
        model, grid = load_model(ref)
        if doc.has_section("grid"):
            grid = _read_grid_section(doc)
    else:
        model = _read_model_section(doc)
        grid = _read_grid_section(doc)

    doc.require_section("observations")
    doc.check_known("observations", {"file", "gap", "intensity"})
    obs_file = doc.get_str("observations", "file", None)
    if obs_file is not None:
        obs_file = os.path.join(base, obs_file)
        if not os.path.exists(obs_file):
            doc.fail_key("observations", "file", f"referenced file does not exist: {obs_file}")
    obs_gap = doc.get_float("observations", "gap", None)
    obs_intensity = doc.get_float("observations", "intensity", None)

    doc.check_known("fit", _FIT_KEYS)
    fit_learn = doc.get_bool("fit", "learn", False)
    fit_K = doc.get_int("fit", "K", model.K)
    fit_init = doc.get_str("fit", "init", "kmeans")
    rate_init = doc.get_float("fit", "rate_init", 1.0)
    sm = SmootherOptions(
        tol_inner=doc.get_float("fit", "tol_inner", SmootherOptions.tol_inner),
        max_inner=doc.get_int("fit", "max_inner", SmootherOptions.max_inner),
        gamma=doc.get_float("fit", "gamma", SmootherOptions.gamma),
        max_backtracks=doc.get_int("fit", "max_backtracks", SmootherOptions.max_backtracks),
        rate_floor=doc.get_float("fit", "rate_floor", SmootherOptions.rate_floor),
    )
    defaults = LearnOptions(smoother=sm)
    try:
        opts = LearnOptions(
            max_outer=doc.get_int("fit", "max_outer", defaults.max_outer),
            tol_outer=doc.get_float("fit", "tol_outer", defaults.tol_outer),
            tol_theta=doc.get_float("fit", "tol_theta", defaults.tol_theta),
            learn_rates=doc.get_bool("fit", "learn_rates", defaults.learn_rates),
            learn_obs_cov=doc.get_bool("fit", "learn_obs_cov", defaults.learn_obs_cov),
            learn_dispersion=doc.get_bool("fit", "learn_dispersion", defaults.learn_dispersion),
            learn_drift=doc.get_bool("fit", "learn_drift", defaults.learn_drift),
            learn_initials=doc.get_bool("fit", "learn_initials", defaults.learn_initials),
            gamma=sm.gamma,
            max_backtracks=sm.max_backtracks,
            rate_floor=sm.rate_floor,
            m_cycles=doc.get_int("fit", "m_cycles", defaults.m_cycles),
            accel=doc.get_bool("fit", "accel", defaults.accel),
            smoother=sm,
        )
    except ValueError as e:
        raise ParseError(f"{doc.path}: [fit]: {e}") from e

    doc.check_known("oracle", {"cells", "pad", "stride"})
    oracle_cells = doc.get_int("oracle", "cells", 200)
    oracle_pad = doc.get_float("oracle", "pad", 6.0)
    oracle_stride = doc.get_int("oracle", "stride", 1)

    known = {"experiment", "model", "grid", "observations", "fit", "oracle", ""}
    for sec in doc.sections:
        if sec not in known:
            raise ParseError(f"{doc.path}: unknown section [{sec}]")

    try:
        return ExperimentConfig(
            name=name, seed=seed, out_dir=out_dir, model=model, grid=grid,
            obs_file=obs_file, obs_gap=obs_gap, obs_intensity=obs_intensity,
            fit_learn=fit_learn, fit_K=fit_K, fit_init=fit_init,
            rate_init=rate_init, learn_options=opts,
            oracle_cells=oracle_cells, oracle_pad=oracle_pad,
            oracle_stride=oracle_stride,
            config_hash=sha256_file(path), path=str(path),
        )
    except ValueError as e:
        raise ParseError(f"{doc.path}: {e}") from e


# ---------------------------------------------------------------------------
# run reports
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class RunReport:
    """Everything a finished run wants to persist: provenance (config
    hash, seed), the objective trace, metrics, and learned parameters.
    Serialization round-trips losslessly through save/load."""

    command: str
    config_hash: str
    seed: int
    wall_clock: float
    converged: bool
    elbo_trace: np.ndarray
    metrics: dict
    learned: HybridModel | None = None
    flags: tuple = ()
    model_hash: str = ""

    def replace(self, **kw) -> "RunReport":
        return dataclasses.replace(self, **kw)

    def __eq__(self, other):
        if not isinstance(other, RunReport):
            return NotImplemented
        same_model = (self.learned is None) == (other.learned is None) and (
            self.learned is None
            or all(
                np.array_equal(getattr(self.learned, f), getattr(other.learned, f))
                for f in ("rates", "A_p", "b_p", "D", "p0", "mu0", "Sigma0", "Sigma_obs")
            )
        )
        return (
            same_model
            and self.command == other.command
            and self.config_hash == other.config_hash
            and self.model_hash == other.model_hash
            and self.seed == other.seed
            and self.wall_clock == other.wall_clock
            and self.converged == other.converged
            and np.array_equal(self.elbo_trace, other.elbo_trace)
            and self.metrics == other.metrics
            and self.flags == other.flags
        )


def save_report(path, report):
    with open(path, "w", encoding="utf-8") as f:
        f.write("[report]\n")
        f.write(f"command = {report.command}\n")
        f.write(f"config_hash = {report.config_hash}\n")
        if report.model_hash:
            f.write(f"model_hash = {report.model_hash}\n")
        f.write(f"seed = {report.seed}\n")
        f.write(f"wall_clock = {_fmt(report.wall_clock)}\n")
        f.write(f"converged = {'true' if report.converged else 'false'}\n")
        for i, flag in enumerate(report.flags, start=1):
            f.write(f"flag_{i} = {flag}\n")
        if len(report.elbo_trace):
            f.write(f"elbo_trace = {_fmt_vector(report.elbo_trace)}\n")
        if report.metrics:
            f.write("[metrics]\n")
            for key, value in report.metrics.items():
                f.write(f"{key} = {_fmt(value)}\n")
        if report.learned is not None:
            f.write(model_text(report.learned, section="learned"))


def load_report(path):
    doc = _load_document(path)
    doc.require_section("report")
    flags = []
    i = 1
    while doc.has("report", f"flag_{i}"):
        flags.append(doc.get_str("report", f"flag_{i}"))
        i += 1
    trace = doc.get_vector("report", "elbo_trace", default=None)
    metrics = {}
    for key in doc.keys("metrics"):
        metrics[key] = doc.get_float("metrics", key)
    learned = None
    if doc.has_section("learned"):
        learned = _read_model_section(doc, section="learned")
    return RunReport(
        command=doc.get_str("report", "command"),
        config_hash=doc.get_str("report", "config_hash"),
        model_hash=doc.get_str("report", "model_hash", ""),
        seed=doc.get_int("report", "seed"),
        wall_clock=doc.get_float("report", "wall_clock"),
        converged=doc.get_bool("report", "converged"),
        elbo_trace=trace if trace is not None else np.empty(0),
        metrics=metrics,
        learned=learned,
        flags=tuple(flags),
    )


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_csv(path, header, data):
    """Write a numeric table with a mandatory header row, %.17g cells."""
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise ValueError("write_csv: data must be two-dimensional")
    if data.shape[1] != len(header):
        raise ValueError(
            f"write_csv: {len(header)} header names for {data.shape[1]} columns"
        )
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in data:
            f.write(",".join(_fmt(x) for x in row) + "\n")


def read_csv(path):
    """Read a numeric table written by write_csv; returns (header, data)."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{path}:1: empty CSV (missing header)")
    header = [c.strip() for c in lines[0].split(",")]
    rows = np.empty((len(lines) - 1, len(header)))
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(header):
            raise ParseError(f"{path}:{i}: expected {len(header)} columns, got {len(parts)}")
        try:
            rows[i - 2] = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"{path}:{i}: non-numeric cell") from None
    return header, rows
