import numpy as np
import pytest
from scipy.stats import multivariate_normal

from adaptmpc.data import TransitionDataset
from adaptmpc.gaussian import condition_dynamics
from adaptmpc.nn import MLPModel
from adaptmpc.priors import (GaussianPrior, GmmPrior, NeuralNetPrior, estimate_residual_cov,
                             fit_gaussian_prior, fit_gmm, prior_from_json, prior_to_json)

DT = 0.05


def linear_records(rng, n=10_000, noise=0.01):
    A = np.array([[0.9, 0.1], [-0.2, 0.95]])
    B = np.array([[0.0], [0.5]])
    x = rng.normal(size=(n, 2))
    u = rng.normal(size=(n, 1))
    y = x @ A.T + u @ B.T + noise * rng.normal(size=(n, 2))
    ds = TransitionDataset(rng.normal(size=(n, 2)), rng.normal(size=(n, 1)), x, u, y,
                           np.array(["lin"] * n, dtype=object))
    return ds, A, B


def embedded_linear_net(A_acc):
    """A rectifier net whose units never switch off, so accel = A_acc @ [x; u]."""
    net = MLPModel(4, 2, DT)
    shift = 100.0
    W1 = np.zeros((60, 6))
    W1[:6] = np.eye(6)
    W2 = np.zeros((40, 60))
    W2[:6, :6] = np.eye(6)
    W3 = np.zeros((2, 40))
    W3[:, :6] = A_acc
    net.weights = [W1, W2, W3]
    net.biases = [np.full(60, shift), np.zeros(40), -A_acc @ np.full(6, shift)]
    return net


# -- Gaussian prior ------------------------------------------------------------

def test_gaussian_prior_recovers_linear_system():
    ds, A, B = linear_records(np.random.default_rng(0))
    prior = fit_gaussian_prior(ds)
    assert (prior.n0, prior.m) == (1.0, 1.0)
    dyn = condition_dynamics(prior.evaluate().prior_gaussian(), 2, 1)
    np.testing.assert_allclose(dyn.f_x, A, atol=0.05 * np.abs(A).max())
    np.testing.assert_allclose(dyn.f_u, B, atol=0.05 * np.abs(B).max())


def test_gaussian_prior_is_context_free():
    ds, _, _ = linear_records(np.random.default_rng(1), n=200)
    prior = fit_gaussian_prior(ds, n0=2.0, m=3.0)
    a = prior.evaluate(np.ones(2), np.ones(1), np.ones(2), np.ones(1))
    b = prior.evaluate(-np.ones(2), np.zeros(1), 5 * np.ones(2), np.zeros(1))
    assert a is b
    np.testing.assert_allclose(a.Phi, 2.0 * prior.base.cov)
    assert a.m == 3.0


def test_rank_deficient_dataset_gets_ridge():
    ds, _, _ = linear_records(np.random.default_rng(2), n=200)
    ds.u[:] = 1.0
    with pytest.warns(UserWarning):
        prior = fit_gaussian_prior(ds)
    assert prior.regularized
    assert np.linalg.eigvalsh(prior.base.cov)[0] > 0


def test_too_few_rows():
    ds, _, _ = linear_records(np.random.default_rng(3), n=4)
    with pytest.raises(ValueError):
        fit_gaussian_prior(ds)


# -- mixture prior -------------------------------------------------------------

def two_clusters(rng, n=1000):
    return np.concatenate([rng.normal(-10.0, 1.0, n), rng.normal(10.0, 1.0, n)])[:, None]


def test_gmm_single_component_equals_gaussian():
    ds, _, _ = linear_records(np.random.default_rng(4), n=2000)
    g = fit_gaussian_prior(ds)
    m = fit_gmm(ds, K=1)
    rng = np.random.default_rng(5)
    for _ in range(10):
        q = [rng.normal(size=2), rng.normal(size=1), rng.normal(size=2), rng.normal(size=1)]
        a, b = g.evaluate(*q), m.evaluate(*q)
        np.testing.assert_allclose(b.Phi, a.Phi, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(b.mu0, a.mu0, rtol=1e-8, atol=1e-12)


def test_gmm_separates_clusters():
    P = two_clusters(np.random.default_rng(6))
    prior = fit_gmm(P, K=2, seed=0)
    means = np.sort(prior.means[:, 0])
    assert means[0] == pytest.approx(-10.0, abs=0.2)
    assert means[1] == pytest.approx(10.0, abs=0.2)
    np.testing.assert_allclose(prior.weights, 0.5, atol=0.01)


def test_gmm_log_likelihood_monotone():
    rng = np.random.default_rng(7)
    P = np.vstack([rng.normal(c, 1.0, size=(300, 2)) for c in (-3.0, 0.0, 4.0)])
    prior = fit_gmm(P, K=3, seed=1)
    ll = np.array(prior.log_likelihood)
    assert len(ll) > 2
    assert np.all(np.diff(ll) >= -1e-10)


def test_gmm_responsibilities_match_densities():
    rng = np.random.default_rng(8)
    P = np.vstack([rng.normal(c, 1.0, size=(200, 3)) for c in (-2.0, 2.0)])
    prior = fit_gmm(P, K=2, seed=0)
    for p in rng.normal(size=(20, 3)):
        dens = np.array([w * multivariate_normal(mu, S).pdf(p)
                         for w, mu, S in zip(prior.weights, prior.means, prior.covs)])
        np.testing.assert_allclose(prior.responsibilities(p), dens / dens.sum(), rtol=1e-10)


def test_gmm_selects_component_at_its_mean():
    prior = GmmPrior([0.3, 0.7], [[-10.0, -10.0, -10.0], [10.0, 10.0, 10.0]],
                     [np.eye(3), np.eye(3)])
    niw = prior.evaluate(np.array([-10.0]), np.array([-10.0]), np.array([-10.0]))
    np.testing.assert_array_equal(niw.mu0, [-10.0, -10.0, -10.0])


def test_gmm_underflow_falls_back_to_heaviest():
    prior = GmmPrior([0.3, 0.7], [[0.0] * 3, [1.0] * 3], [1e-3 * np.eye(3)] * 2)
    assert prior.responsibilities(np.full(3, 1e200)) is None
    niw = prior.evaluate(np.array([1e200]), np.array([1e200]), np.array([1e200]))
    np.testing.assert_array_equal(niw.mu0, [1.0] * 3)


def test_gmm_soft_moments():
    means = np.array([[0.0] * 3, [2.0] * 3])
    covs = np.array([np.eye(3), 2 * np.eye(3)])
    prior = GmmPrior([0.5, 0.5], means, covs, soft=True)
    x = [np.array([1.0])] * 3
    r = prior.responsibilities(np.ones(3))
    niw = prior.evaluate(*x)
    mean = r @ means
    cov = r[0] * covs[0] + r[1] * covs[1] + sum(r[k] * np.outer(means[k] - mean, means[k] - mean)
                                                for k in range(2))
    np.testing.assert_allclose(niw.mu0, mean, rtol=1e-12)
    np.testing.assert_allclose(niw.Phi, cov, rtol=1e-12)


def test_gmm_needs_enough_rows():
    with pytest.raises(ValueError):
        fit_gmm(np.zeros((15, 2)), K=2)


def test_gmm_is_deterministic():
    P = two_clusters(np.random.default_rng(9), n=200)
    a, b = fit_gmm(P, K=2, seed=3), fit_gmm(P, K=2, seed=3)
    np.testing.assert_array_equal(a.means, b.means)


# -- network prior ---------------------------------------------------------------

def test_linear_network_prior():
    rng = np.random.default_rng(10)
    A_acc = rng.normal(size=(2, 6))
    net = embedded_linear_net(A_acc)
    prior = NeuralNetPrior(net, alpha=2.0)
    x, u = rng.normal(size=4), rng.normal(size=2)
    g = prior.local_gaussian(np.zeros(4), np.zeros(2), x, u)
    acc = A_acc @ np.concatenate([x, u])
    v = x[2:] + DT * acc
    np.testing.assert_allclose(g.mean[6:], np.concatenate([x[:2] + DT * v, v]), rtol=1e-12)
    # composite Jacobian of the symplectic Euler step
    J = np.zeros((4, 6))
    J[:, :4] = np.eye(4)
    J[2:] += DT * A_acc
    J[:2, 2:4] += DT * np.eye(2)
    J[:2] += DT * DT * A_acc
    np.testing.assert_allclose(g.cov[6:, :6], 2.0 * J, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(g.cov[:6, :6], 2.0 * np.eye(6))


def test_network_prior_psd_and_exact_conditioning():
    rng = np.random.default_rng(11)
    net = MLPModel(4, 2, DT, context=True, seed=4)
    net.biases = [rng.normal(0.0, 0.3, b.shape) for b in net.biases]
    prior = NeuralNetPrior(net, alpha=1.0, residual_cov=1e-4 * np.eye(4))
    for _ in range(100):
        q = [rng.normal(size=4), rng.normal(size=2), rng.normal(size=4), rng.normal(size=2)]
        niw = prior.evaluate(*q)
        assert np.linalg.eigvalsh(niw.Phi)[0] >= -1e-8
        dyn = condition_dynamics(niw.prior_gaussian(), 4, 2)
        f_bar = net.predict(net.make_input(*q))
        np.testing.assert_allclose(dyn.predict(q[2], q[3]), f_bar, rtol=1e-8, atol=1e-10)


def test_alpha_must_be_positive():
    with pytest.raises(ValueError):
        NeuralNetPrior(MLPModel(4, 2, DT), alpha=0.0)


def _coasting_records(rng, n, accel_noise):
    x = rng.normal(size=(n, 4))
    a = accel_noise * rng.normal(size=(n, 2))
    nxt = x.copy()
    nxt[:, 2:] += DT * a
    nxt[:, :2] += DT * nxt[:, 2:]
    return TransitionDataset(x, rng.normal(size=(n, 2)), x, rng.normal(size=(n, 2)), nxt,
                             np.array(["c"] * n, dtype=object))


def test_residual_cov_zero_for_perfect_net():
    net = MLPModel(4, 2, DT)
    net.weights = [np.zeros_like(W) for W in net.weights]
    ds = _coasting_records(np.random.default_rng(12), 500, 0.0)
    np.testing.assert_allclose(estimate_residual_cov(net, ds), 0.0, atol=1e-20)


def test_residual_cov_matches_noise():
    net = MLPModel(4, 2, DT)
    net.weights = [np.zeros_like(W) for W in net.weights]
    sigma = 2.0
    ds = _coasting_records(np.random.default_rng(13), 10_000, sigma)
    R = estimate_residual_cov(net, ds)
    G = np.array([[DT * DT, 0], [0, DT * DT], [DT, 0], [0, DT]])
    expect = sigma ** 2 * G @ G.T
    np.testing.assert_allclose(np.diag(R), np.diag(expect), rtol=0.1)
    perm = np.random.default_rng(14).permutation(len(ds))
    np.testing.assert_allclose(estimate_residual_cov(net, ds.select(perm)), R, rtol=1e-10)


# -- serialization -----------------------------------------------------------------

def test_json_roundtrip_all_families():
    rng = np.random.default_rng(15)
    ds, _, _ = linear_records(rng, n=500)
    net = MLPModel(2, 1, DT, seed=1, pos_idx=[0], vel_idx=[1])
    priors = [fit_gaussian_prior(ds), fit_gmm(ds, K=2),
              NeuralNetPrior(net, 0.5, 1e-3 * np.eye(2))]
    q = [rng.normal(size=2), rng.normal(size=1), rng.normal(size=2), rng.normal(size=1)]
    for p in priors:
        text = prior_to_json(p, {"note": "x"})
        back = prior_from_json(text)
        assert type(back) is type(p)
        a, b = p.evaluate(*q), back.evaluate(*q)
        np.testing.assert_array_equal(a.Phi, b.Phi)
        np.testing.assert_array_equal(a.mu0, b.mu0)
        assert prior_to_json(back, {"note": "x"}) == text


def test_rejects_foreign_document():
    with pytest.raises(ValueError):
        prior_from_json('{"format": "other", "version": 1}')


def test_every_prior_gives_valid_niw():
    rng = np.random.default_rng(16)
    ds, _, _ = linear_records(rng, n=800)
    for p in (fit_gaussian_prior(ds), fit_gmm(ds, K=3)):
        for _ in range(1000 // 2):
            niw = p.evaluate(rng.normal(size=2), rng.normal(size=1), rng.normal(size=2),
                             rng.normal(size=1))
            assert np.allclose(niw.Phi, niw.Phi.T)
            assert np.linalg.eigvalsh(niw.Phi)[0] >= -1e-10
            assert niw.m > 0 and niw.n0 > 0
    assert isinstance(fit_gaussian_prior(ds), GaussianPrior)
