"""Joint Gaussians over transition vectors, NIW fusion and conditioning.

A transition vector is the stack ``[x; u; x']`` of dimension
``D = 2 * d_x + d_u``. Everything in this module is value-semantic: inputs are
never modified in place.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

REG_SCALE = 1e-6
MAX_COND = 1e8


class InvalidInputError(ValueError):
    pass


class ConditioningError(np.linalg.LinAlgError):
    """Raised when the state-action block cannot be inverted."""

    def __init__(self, message, condition_number):
        super().__init__(f"{message} (condition number {condition_number:.3e})")
        self.condition_number = condition_number


def symmetrize(a):
    return 0.5 * (a + a.T)


def psd_floor(a, floor=0.0):
    """Symmetrize and clip eigenvalues from below."""
    a = symmetrize(a)
    w, v = np.linalg.eigh(a)
    if w[0] >= floor:
        return a
    w = np.maximum(w, floor)
    return symmetrize((v * w) @ v.T)


def _finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidInputError(f"{name}: non-finite input")


@dataclass(frozen=True)
class JointGaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise InvalidInputError(
                f"covariance shape {cov.shape} does not match mean size {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.size


@dataclass(frozen=True)
class NIWParams:
    """Normal-inverse-Wishart prior: scale matrix, mean, and the two strengths."""

    Phi: np.ndarray
    mu0: np.ndarray
    m: float
    n0: float

    def __post_init__(self):
        if not (self.m > 0 and self.n0 > 0):
            raise InvalidInputError("NIW strengths m and n0 must be positive")
        object.__setattr__(self, "Phi", np.asarray(self.Phi, dtype=float))
        object.__setattr__(self, "mu0", np.asarray(self.mu0, dtype=float))

    def prior_gaussian(self):
        """The point Gaussian N(mu0, Phi / n0) used for accuracy comparisons."""
        return JointGaussian(self.mu0, self.Phi / self.n0)


@dataclass(frozen=True)
class LinearGaussianDynamics:
    """p(x' | x, u) = N(f_x x + f_u u + f_c, F)."""

    f_x: np.ndarray
    f_u: np.ndarray
    f_c: np.ndarray
    F: np.ndarray

    @property
    def d_x(self):
        return self.f_x.shape[0]

    @property
    def d_u(self):
        return self.f_u.shape[1]

    @property
    def f_xu(self):
        return np.hstack([self.f_x, self.f_u])

    def predict(self, x, u):
        return self.f_x @ x + self.f_u @ u + self.f_c


def niw_map_update(prior, emp_mean, emp_cov, N, mean_rule="strengths"):
    """MAP mean and covariance under a normal-inverse-Wishart prior.

    :param prior: NIWParams (Phi, mu0, m, n0).
    :param emp_mean: empirical mean of the transition vectors.
    :param emp_cov: empirical covariance.
    :param N: effective sample size (a positive real, not necessarily integer).
    :param mean_rule: ``"strengths"`` weights the two means by the prior strengths m and n0,
        ``"standard"`` uses the textbook posterior weight N.
    :returns: JointGaussian with symmetrized covariance.
    """
    emp_mean = np.asarray(emp_mean, dtype=float)
    emp_cov = np.asarray(emp_cov, dtype=float)
    _finite("niw_map_update", prior.Phi, prior.mu0, emp_mean, emp_cov, np.float64(N))
    if not N > 0:
        raise ValueError(f"effective sample size must be positive, got {N}")
    m, n0 = prior.m, prior.n0
    diff = emp_mean - prior.mu0
    cov = (prior.Phi + N * emp_cov + (N * m / (N + m)) * np.outer(diff, diff)) / (N + n0)
    if mean_rule == "strengths":
        mean = (m * prior.mu0 + n0 * emp_mean) / (m + n0)
    elif mean_rule == "standard":
        mean = (m * prior.mu0 + N * emp_mean) / (m + N)
    else:
        raise ValueError(f"unknown mean_rule {mean_rule!r}")
    return JointGaussian(mean, symmetrize(cov))


def condition_dynamics(joint, d_x, d_u):
    """Condition N(mean, cov) over [x; u; x'] on [x; u].

    When the state-action block is numerically ill-conditioned (condition
    number above 1e8) it is regularized by ``1e-6 * trace / dim`` before
    inversion; well-conditioned blocks are inverted exactly. An all-zero
    state-action block is the degenerate independence case and yields a zero
    linear map.
    """
    dz = d_x + d_u
    if joint.dim != dz + d_x:
        raise InvalidInputError(
            f"joint dimension {joint.dim} != 2*d_x + d_u = {dz + d_x}")
    _finite("condition_dynamics", joint.mean, joint.cov)
    mu, S = joint.mean, joint.cov
    S_zz = S[:dz, :dz]
    S_zy = S[:dz, dz:]
    S_yy = S[dz:, dz:]

    tr = np.trace(S_zz)
    if tr == 0.0 and not np.any(S_zz):
        f_xu = np.zeros((d_x, dz))
    else:
        A = symmetrize(S_zz)
        eig = np.linalg.eigvalsh(A)
        if eig[0] <= eig[-1] / MAX_COND:
            A = A + (REG_SCALE * tr / dz) * np.eye(dz)
        try:
            cho = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise ConditioningError("state-action covariance not positive definite",
                                    np.linalg.cond(A)) from None
        f_xu = scipy.linalg.cho_solve(cho, S_zy, check_finite=False).T
        if not np.all(np.isfinite(f_xu)):
            raise ConditioningError("non-finite conditional map", np.linalg.cond(A))

    f_c = mu[dz:] - f_xu @ mu[:dz]
    F = psd_floor(S_yy - f_xu @ S_zz @ f_xu.T)
    return LinearGaussianDynamics(f_xu[:, :d_x].copy(), f_xu[:, d_x:].copy(), f_c, F)


def fit_joint_gaussian(samples):
    """Maximum-likelihood (biased) mean and covariance of row samples."""
    samples = np.asarray(samples, dtype=float)
    mean = samples.mean(axis=0)
    diff = samples - mean
    return JointGaussian(mean, symmetrize(diff.T @ diff / samples.shape[0]))
