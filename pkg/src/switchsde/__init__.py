"""switchsde: simulation, variational smoothing, and variational-EM
learning for continuous-time hybrid processes (a Markov jump process
modulating a switching diffusion), with exact small-scale oracles."""

from .model import (
    HybridModel,
    NumericalError,
    ObservationSet,
    TimeGrid,
    drift_from_rate_setpoint,
    rate_setpoint_from_drift,
    snap_observations,
    validate_model,
)
from .smoother import (
    ElboBreakdown,
    SmootherOptions,
    SmoothResult,
    VariationalControls,
    VariationalMarginals,
    elbo,
    map_path,
    sample_posterior,
    smooth,
    summarize,
)
from .learn import (
    LearnOptions,
    VemResult,
    init_kmeans,
    vem,
)

__version__ = "0.1.0"

__all__ = [
    "ElboBreakdown",
    "HybridModel",
    "LearnOptions",
    "NumericalError",
    "ObservationSet",
    "SmoothResult",
    "SmootherOptions",
    "TimeGrid",
    "VariationalControls",
    "VariationalMarginals",
    "VemResult",
    "drift_from_rate_setpoint",
    "elbo",
    "init_kmeans",
    "map_path",
    "rate_setpoint_from_drift",
    "sample_posterior",
    "smooth",
    "snap_observations",
    "summarize",
    "validate_model",
    "vem",
    "__version__",
]
