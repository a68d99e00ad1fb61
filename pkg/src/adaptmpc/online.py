"""Streaming transition moments with exponential forgetting and adaptive strength."""

import json
from dataclasses import dataclass, replace

import numpy as np

from adaptmpc.gaussian import (
    InvalidInputError,
    JointGaussian,
    condition_dynamics,
    symmetrize,
)

RHO_FLOOR = 1e-8


@dataclass(frozen=True)
class AdaptConfig:
    eta0: float = 8.0
    nu0: float = 1.0
    beta_min: float = 0.0
    beta_max: float = 0.9995
    n_min: float = 1.0
    n_max: float = 50.0

    def __post_init__(self):
        if not (self.eta0 > 0 and self.nu0 > 0):
            raise ValueError("eta0 and nu0 must be positive")
        if not (0.0 <= self.beta_min <= self.beta_max < 1.0):
            raise ValueError("need 0 <= beta_min <= beta_max < 1")
        if not (0.0 < self.n_min <= self.n_max):
            raise ValueError("need 0 < n_min <= n_max")


@dataclass(frozen=True)
class RunningMoments:
    """Exponentially forgotten first and second moments of transition vectors.

    ``delta`` is the running second moment, so the empirical covariance is
    ``delta - outer(mu_hat, mu_hat)``.
    """

    mu_hat: np.ndarray
    delta: np.ndarray
    beta: float
    n_eff: float
    last_obs: np.ndarray = None

    @property
    def dim(self):
        return self.mu_hat.size

    @property
    def cov(self):
        return symmetrize(self.delta - np.outer(self.mu_hat, self.mu_hat))

    def gaussian(self):
        return JointGaussian(self.mu_hat, self.cov)

    def to_json(self):
        return json.dumps({
            "mean": self.mu_hat.tolist(),
            "delta": self.delta.ravel().tolist(),
            "beta": self.beta,
            "n_eff": self.n_eff,
        })

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        mean = np.asarray(doc["mean"], dtype=float)
        delta = np.asarray(doc["delta"], dtype=float).reshape(mean.size, mean.size)
        return cls(mean, delta, float(doc["beta"]), float(doc["n_eff"]))


def observe(moments, p_t):
    """Fold one stacked transition ``[x_{t-1}; u_{t-1}; x_t]`` into the moments."""
    p = np.asarray(p_t, dtype=float)
    if p.shape != (moments.dim,):
        raise InvalidInputError(f"observation shape {p.shape}, expected ({moments.dim},)")
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("non-finite observation")
    b = moments.beta
    mu = b * moments.mu_hat + (1.0 - b) * p
    delta = symmetrize(b * moments.delta + (1.0 - b) * np.outer(p, p))
    return replace(moments, mu_hat=mu, delta=delta, last_obs=p)


def strength_from_ratio(rho, cfg):
    """Map the error ratio to clamped (beta, N)."""
    rho = max(rho, 0.0)
    beta = float(np.clip(1.0 - cfg.eta0 * rho, cfg.beta_min, cfg.beta_max))
    n_eff = cfg.n_max if rho == 0.0 else float(np.clip(cfg.nu0 / rho, cfg.n_min, cfg.n_max))
    return beta, n_eff


def prediction_error_ratio(moments, prior_gaussian, x_prev, u_prev, x_t):
    """Squared one-step prediction error of the empirical model over the prior's."""
    d_x = np.size(x_t)
    d_u = np.size(u_prev)
    z = np.concatenate([x_prev, u_prev])
    emp = condition_dynamics(moments.gaussian(), d_x, d_u)
    pri = condition_dynamics(prior_gaussian, d_x, d_u)
    x_t = np.asarray(x_t, dtype=float)
    emp_err = np.sum((emp.f_xu @ z + emp.f_c - x_t) ** 2)
    pri_err = np.sum((pri.f_xu @ z + pri.f_c - x_t) ** 2)
    if pri_err == 0.0:
        return RHO_FLOOR
    return emp_err / pri_err


def adapt(moments, prior_gaussian, x_prev, u_prev, x_t, cfg):
    """Refresh the forgetting factor and effective sample size.

    Both the empirical Gaussian and ``prior_gaussian`` are conditioned on
    ``(x_prev, u_prev)`` and their predictions of ``x_t`` compared.

    :returns: (beta, n_eff, rho)
    """
    rho = prediction_error_ratio(moments, prior_gaussian, x_prev, u_prev, x_t)
    beta, n_eff = strength_from_ratio(rho, cfg)
    return beta, n_eff, rho


def initialize_from_dataset(dataset, cfg=None):
    """Seed the moments with a single Gaussian fitted to the prior data."""
    cfg = cfg or AdaptConfig()
    P = dataset.stacked() if hasattr(dataset, "stacked") else np.asarray(dataset, dtype=float)
    if P.ndim != 2 or P.shape[0] == 0:
        raise InvalidInputError("cannot initialize moments from an empty dataset")
    mu = P.mean(axis=0)
    delta = symmetrize(P.T @ P / P.shape[0])
    return RunningMoments(mu, delta, cfg.beta_max, cfg.n_min)
