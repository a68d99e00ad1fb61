"""Dynamics priors producing NIW parameters for the current transition context.

Three families are provided: a single global Gaussian, a Gaussian mixture
fitted by EM, and a linearized neural network.
"""

import json
import logging
import warnings

import numpy as np
from scipy.special import logsumexp

from adaptmpc.gaussian import (
    JointGaussian,
    NIWParams,
    fit_joint_gaussian,
    psd_floor,
    symmetrize,
)
from adaptmpc.nn import MLPModel

logger = logging.getLogger(__name__)

PRIOR_FORMAT = "adaptmpc.prior"
PRIOR_VERSION = 1
RANK_RIDGE = 1e-8


class PriorFitError(RuntimeError):
    pass


class PriorEvaluationError(RuntimeError):
    pass


def _samples(data):
    if hasattr(data, "stacked"):
        return data.stacked()
    a = np.asarray(data, dtype=float)
    return a.reshape(-1, 1) if a.ndim == 1 else a


class PriorModel:
    """Common surface: ``evaluate`` returns NIWParams for a transition context."""

    n0 = 1.0
    m = 1.0

    def evaluate(self, x_prev, u_prev, x, u):
        raise NotImplementedError

    def prior_gaussian(self, x_prev, u_prev, x, u):
        return self.evaluate(x_prev, u_prev, x, u).prior_gaussian()

    def to_dict(self):
        raise NotImplementedError


class GaussianPrior(PriorModel):
    def __init__(self, base, n0=1.0, m=1.0):
        self.base = base
        self.n0, self.m = float(n0), float(m)
        self._params = NIWParams(self.n0 * base.cov, base.mean, self.m, self.n0)

    def evaluate(self, x_prev=None, u_prev=None, x=None, u=None):
        return self._params

    def to_dict(self):
        return {"type": "gaussian", "n0": self.n0, "m": self.m,
                "mean": self.base.mean.tolist(), "cov": self.base.cov.ravel().tolist()}

    @classmethod
    def from_dict(cls, doc):
        mean = np.asarray(doc["mean"], dtype=float)
        cov = np.asarray(doc["cov"], dtype=float).reshape(mean.size, mean.size)
        return cls(JointGaussian(mean, cov), doc["n0"], doc["m"])


def fit_gaussian_prior(dataset, n0=1.0, m=1.0):
    """Global Gaussian over ``[x; u; x']``; Phi = n0 * cov, mu0 = mean."""
    P = _samples(dataset)
    if P.shape[0] < P.shape[1] + 1:
        raise ValueError(f"need at least {P.shape[1] + 1} rows, got {P.shape[0]}")
    g = fit_joint_gaussian(P)
    ridge = _rank_ridge(g.cov)
    if ridge:
        warnings.warn("rank-deficient prior dataset; adding 1e-8 I to covariance")
        g = JointGaussian(g.mean, g.cov + ridge * np.eye(g.dim))
    prior = GaussianPrior(g, n0, m)
    prior.regularized = bool(ridge)
    return prior


def _rank_ridge(cov, rel_tol=1e-10):
    """1e-8 if ``cov`` is numerically rank-deficient, else 0."""
    w = np.linalg.eigvalsh(cov)
    return RANK_RIDGE if w[0] <= rel_tol * max(w[-1], 1.0) else 0.0


# -- Gaussian mixture --------------------------------------------------------

def _log_gauss(P, mean, cov):
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, (P - mean).T)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (np.sum(z * z, axis=0) + logdet + mean.size * np.log(2.0 * np.pi))


def _component_logpdf(P, means, covs):
    return np.column_stack([_log_gauss(P, mu, S) for mu, S in zip(means, covs)])


def _kmeans_pp(P, K, rng):
    centers = [P[rng.integers(P.shape[0])]]
    d2 = np.sum((P - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.integers(P.shape[0]) if total == 0 else rng.choice(P.shape[0], p=d2 / total)
        centers.append(P[idx])
        d2 = np.minimum(d2, np.sum((P - P[idx]) ** 2, axis=1))
    return np.array(centers)


class GmmPrior(PriorModel):
    def __init__(self, weights, means, covs, n0=1.0, m=1.0, soft=False):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.asarray(means, dtype=float)
        self.covs = np.asarray(covs, dtype=float)
        self.n0, self.m = float(n0), float(m)
        self.soft = soft
        self.log_likelihood = []

    @property
    def K(self):
        return self.weights.size

    def log_responsibilities(self, p):
        """Normalized log posterior over components for one stacked vector."""
        logp = _component_logpdf(np.atleast_2d(p), self.means, self.covs)[0] + np.log(self.weights)
        if not np.any(np.isfinite(logp)):
            return None
        return logp - logsumexp(logp)

    def responsibilities(self, p):
        lr = self.log_responsibilities(p)
        return None if lr is None else np.exp(lr)

    def component_moments(self, x_prev, u_prev, x):
        p = np.concatenate([x_prev, u_prev, x])
        r = self.responsibilities(p)
        if r is None:
            k = int(np.argmax(self.weights))
            return self.means[k], self.covs[k]
        if not self.soft:
            k = int(np.argmax(r))
            return self.means[k], self.covs[k]
        mean = r @ self.means
        diff = self.means - mean
        cov = np.einsum("k,kij->ij", r, self.covs) + (diff.T * r) @ diff
        return mean, symmetrize(cov)

    def evaluate(self, x_prev, u_prev, x, u=None):
        mean, cov = self.component_moments(x_prev, u_prev, x)
        return NIWParams(self.n0 * cov, mean, self.m, self.n0)

    def to_dict(self):
        return {"type": "gmm", "n0": self.n0, "m": self.m, "soft": self.soft,
                "K": self.K, "dim": self.means.shape[1],
                "weights": self.weights.tolist(), "means": self.means.ravel().tolist(),
                "covs": self.covs.ravel().tolist()}

    @classmethod
    def from_dict(cls, doc):
        K, D = doc["K"], doc["dim"]
        return cls(doc["weights"], np.reshape(doc["means"], (K, D)),
                   np.reshape(doc["covs"], (K, D, D)), doc["n0"], doc["m"], doc.get("soft", False))


def fit_gmm(dataset, K=8, seed=0, n0=1.0, m=1.0, max_iter=200, tol=1e-6,
            max_reseeds=5, soft=False):
    """EM fit of a K-component full-covariance mixture over ``[x; u; x']``.

    Seeding is k-means++ followed by one hard assignment. Each component
    covariance gets the same rank ridge as a single Gaussian fit, so
    near-deterministic directions in the data do not count as collapse. A
    component that is empty or still has an eigenvalue below 1e-10 is
    re-seeded at a random datum with the global covariance.
    """
    P = _samples(dataset)
    n, D = P.shape
    if K < 1:
        raise ValueError("K must be >= 1")
    if n < 10 * K:
        raise ValueError(f"need at least {10 * K} rows for K={K}, got {n}")
    rng = np.random.default_rng(seed)
    global_cov = fit_joint_gaussian(P).cov
    ridge = _rank_ridge(global_cov)
    eye = np.eye(D)
    global_cov = global_cov + ridge * eye

    centers = _kmeans_pp(P, K, rng)
    assign = np.argmin(((P[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((n, K))
    resp[np.arange(n), assign] = 1.0

    reseeds = 0
    history = []
    ridges = [0.0] * K
    weights = means = covs = None
    for it in range(max_iter):
        # M-step
        Nk = resp.sum(axis=0)
        weights = Nk / n
        means = np.zeros((K, D))
        covs = np.zeros((K, D, D))
        bad = []
        for k in range(K):
            if Nk[k] <= 0:
                bad.append(k)
                continue
            means[k] = resp[:, k] @ P / Nk[k]
            diff = P - means[k]
            covs[k] = symmetrize((diff.T * resp[:, k]) @ diff / Nk[k])
            # once a component needs the ridge it keeps it, so EM sees a fixed model
            ridges[k] = max(ridges[k], _rank_ridge(covs[k]))
            covs[k] += ridges[k] * eye
            if not np.all(np.isfinite(covs[k])) or np.linalg.eigvalsh(covs[k])[0] < 1e-10:
                bad.append(k)
        if bad:
            reseeds += 1
            if reseeds > max_reseeds:
                raise PriorFitError(f"component collapse persisted after {max_reseeds} reseeds")
            logger.warning("reseeding collapsed GMM components %s", bad)
            for k in bad:
                ridges[k] = 0.0
                means[k] = P[rng.integers(n)]
                covs[k] = global_cov.copy()
                weights[k] = 1.0 / K
            weights /= weights.sum()
            history = []

        # E-step
        logp = _component_logpdf(P, means, covs) + np.log(weights)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.mean())
        resp = np.exp(logp - norm[:, None])
        if history and not bad and ll - history[-1] < tol:
            history.append(ll)
            break
        history.append(ll)

    prior = GmmPrior(weights, means, covs, n0, m, soft)
    prior.log_likelihood = history
    prior.reseeds = reseeds
    return prior


# -- Neural network ------------------------------------------------------------

class NeuralNetPrior(PriorModel):
    """Local Gaussian obtained by linearizing a trained dynamics network.

    :param alpha: scale of the state-action prior covariance ``alpha * I``.
    :param residual_cov: next-state covariance left unexplained by the net.
    """

    def __init__(self, net, alpha=1.0, residual_cov=None, n0=1.0, m=1.0):
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        self.net = net
        self.alpha = float(alpha)
        d_x = net.d_x
        self.residual_cov = np.zeros((d_x, d_x)) if residual_cov is None else np.asarray(residual_cov, float)
        self.n0, self.m = float(n0), float(m)

    def local_gaussian(self, x_prev, u_prev, x, u):
        net = self.net
        inp = net.make_input(x_prev, u_prev, x, u)
        f_bar = net.predict(inp)
        jac = net.jacobian(inp)
        off = net.state_offset
        J = jac[:, off:off + net.d_x + net.d_u]
        if not (np.all(np.isfinite(f_bar)) and np.all(np.isfinite(J))):
            raise PriorEvaluationError("network produced non-finite output")
        dz = net.d_x + net.d_u
        a = self.alpha
        cov = np.empty((dz + net.d_x, dz + net.d_x))
        cov[:dz, :dz] = a * np.eye(dz)
        cov[:dz, dz:] = a * J.T
        cov[dz:, :dz] = a * J
        cov[dz:, dz:] = a * J @ J.T + self.residual_cov
        mean = np.concatenate([x, u, f_bar])
        return JointGaussian(mean, symmetrize(cov))

    def evaluate(self, x_prev, u_prev, x, u):
        g = self.local_gaussian(x_prev, u_prev, x, u)
        return NIWParams(self.n0 * g.cov, g.mean, self.m, self.n0)

    def to_dict(self):
        return {"type": "nn", "n0": self.n0, "m": self.m, "alpha": self.alpha,
                "residual_cov": self.residual_cov.ravel().tolist(), "net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, doc):
        net = MLPModel.from_dict(doc["net"])
        R = np.asarray(doc["residual_cov"], dtype=float).reshape(net.d_x, net.d_x)
        return cls(net, doc["alpha"], R, doc["n0"], doc["m"])


def estimate_residual_cov(net, dataset):
    """Covariance of ``x' - net(x, u)`` over the dataset, PSD-floored."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    R = np.asarray(dataset.x_next, dtype=float) - net.predict(net.dataset_inputs(dataset))
    R = R - R.mean(axis=0)
    return psd_floor(R.T @ R / R.shape[0])


# -- serialization -------------------------------------------------------------

_TYPES = {"gaussian": GaussianPrior, "gmm": GmmPrior, "nn": NeuralNetPrior}


def prior_to_json(prior, extra=None):
    doc = {"format": PRIOR_FORMAT, "version": PRIOR_VERSION, "prior": prior.to_dict()}
    if extra:
        doc["info"] = extra
    return json.dumps(doc, sort_keys=True)


def prior_from_json(text):
    doc = json.loads(text)
    if doc.get("format") != PRIOR_FORMAT or doc.get("version") != PRIOR_VERSION:
        raise ValueError("unsupported prior document")
    body = doc["prior"]
    return _TYPES[body["type"]].from_dict(body)
