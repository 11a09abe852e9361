import numpy as np

from switchsde.model import HybridModel, drift_from_rate_setpoint


def two_mode_model(
    rate=0.2,
    alpha=(1.5, 1.5),
    beta=(-1.0, 1.0),
    D=0.25,
    Sigma_obs=0.1,
    p0=(0.0, 1.0),
    Sigma0=0.2,
):
    """Metastable two-mode 1-D benchmark model used throughout the tests."""
    al = np.array([[[alpha[0]]], [[alpha[1]]]], dtype=float)
    be = np.array([[beta[0]], [beta[1]]], dtype=float)
    A_p, b_p = drift_from_rate_setpoint(al, be)
    return HybridModel(
        rates=np.array([[-rate, rate], [rate, -rate]]),
        A_p=A_p,
        b_p=b_p,
        D=np.array([[[D]], [[D]]]),
        p0=np.array(p0, dtype=float),
        mu0=be.copy(),
        Sigma0=np.array([[[Sigma0]], [[Sigma0]]]),
        Sigma_obs=np.array([[Sigma_obs]]),
    )


def ou_model(alpha=1.2, beta=0.4, D=0.6, mu0=0.2, Sigma0=0.3, Sigma_obs=0.25):
    """Single-mode 1-D OU model (the exactly solvable case)."""
    A_p, b_p = drift_from_rate_setpoint(
        np.array([[[alpha]]]), np.array([[beta]])
    )
    return HybridModel(
        rates=np.zeros((1, 1)),
        A_p=A_p,
        b_p=b_p,
        D=np.array([[[D]]]),
        p0=np.array([1.0]),
        mu0=np.array([[mu0]]),
        Sigma0=np.array([[[Sigma0]]]),
        Sigma_obs=np.array([[Sigma_obs]]),
    )
