"""Discounted iterative LQR.

Dynamics oracles expose ``step(x, u) -> x_next`` and optionally
``jacobians(x, u) -> (f_x, f_u)``; cost oracles expose ``value(x, u)`` and
optionally ``derivatives(x, u) -> (l, l_xu, l_xuxu)`` over the stacked
vector ``[x; u]``. Missing derivatives fall back to central differences.

The total cost of a trajectory is ``sum_t gamma**t * l(x_t, u_t)`` for
``t = 0 .. T-1``; the value beyond the last step is zero.
"""

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

logger = logging.getLogger(__name__)

UU_FLOOR = 1e-6
FD_STEP = 1e-5


class BackwardPassError(np.linalg.LinAlgError):
    def __init__(self, step):
        super().__init__(f"Q_uu not positive definite at step {step}")
        self.step = step


class CostExpansionError(ValueError):
    def __init__(self, step):
        super().__init__(f"non-finite cost derivative at step {step}")
        self.step = step


@dataclass
class QuadraticCostExpansion:
    """Per-step second-order cost model; arrays indexed by step first."""

    l_xuxu: np.ndarray  # (T, n, n)
    l_xu: np.ndarray  # (T, n)
    const: np.ndarray  # (T,)

    def __len__(self):
        return self.l_xu.shape[0]


@dataclass
class TimeVaryingLinearPolicy:
    """u_t = u_hat_t + k_t + K_t (x_t - x_hat_t)."""

    x_hat: np.ndarray  # (T, d_x)
    u_hat: np.ndarray  # (T, d_u)
    K: np.ndarray  # (T, d_u, d_x)
    k: np.ndarray  # (T, d_u)
    Q_uu: np.ndarray  # (T, d_u, d_u)
    info: dict = field(default_factory=dict)

    @property
    def horizon(self):
        return self.k.shape[0]

    def action(self, t, x):
        return self.u_hat[t] + self.k[t] + self.K[t] @ (x - self.x_hat[t])

    def shifted(self):
        """Drop the first step and repeat the last one (MPC warm start)."""
        def sh(a):
            return np.concatenate([a[1:], a[-1:]], axis=0)
        return TimeVaryingLinearPolicy(sh(self.x_hat), sh(self.u_hat), sh(self.K),
                                       sh(self.k), sh(self.Q_uu))


@dataclass
class IlqrOptions:
    max_iters: int = 50
    tol_rel: float = 1e-6
    mu_min: float = 1e-6
    mu_max: float = 1e6
    mu_factor: float = 10.0
    alphas: tuple = tuple(0.5 ** i for i in range(7))
    trace_path: str = None
    u_limit: float = None
    psd_cost: bool = False


# -- derivatives ---------------------------------------------------------------

def _fd_jacobians(model, x, u):
    nx, nu = x.size, u.size
    z = np.concatenate([x, u])
    cols = []
    for i in range(nx + nu):
        h = FD_STEP * max(1.0, abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        cols.append((model.step(zp[:nx], zp[nx:]) - model.step(zm[:nx], zm[nx:])) / (2 * h))
    J = np.column_stack(cols)
    return J[:, :nx], J[:, nx:]


def _fd_cost(cost, x, u):
    nx = x.size
    z = np.concatenate([x, u])
    n = z.size

    def f(zz):
        return cost.value(zz[:nx], zz[nx:])

    def grad(zz):
        g = np.empty(n)
        for i in range(n):
            h = FD_STEP * max(1.0, abs(zz[i]))
            zp, zm = zz.copy(), zz.copy()
            zp[i] += h
            zm[i] -= h
            g[i] = (f(zp) - f(zm)) / (2 * h)
        return g

    H = np.empty((n, n))
    for i in range(n):
        h = 1e-4 * max(1.0, abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        H[:, i] = (grad(zp) - grad(zm)) / (2 * h)
    return f(z), grad(z), 0.5 * (H + H.T)


def expand_cost(cost, xs, us, psd=False):
    """Quadratic expansion of the cost at each (x_t, u_t) of a trajectory.

    The control block of every Hessian is eigenvalue-floored at 1e-6. With
    ``psd`` the whole Hessian is first projected onto the PSD cone, which
    keeps planning stable when the cost has negative curvature.
    """
    T = us.shape[0]
    nx, nu = xs.shape[1], us.shape[1]
    n = nx + nu
    H = np.empty((T, n, n))
    g = np.empty((T, n))
    c = np.empty(T)
    analytic = hasattr(cost, "derivatives")
    for t in range(T):
        if analytic:
            c[t], g[t], H[t] = cost.derivatives(xs[t], us[t])
        else:
            c[t], g[t], H[t] = _fd_cost(cost, xs[t], us[t])
        if not (np.isfinite(c[t]) and np.all(np.isfinite(g[t])) and np.all(np.isfinite(H[t]))):
            raise CostExpansionError(t)
        if psd:
            w, v = np.linalg.eigh(0.5 * (H[t] + H[t].T))
            H[t] = (v * np.maximum(w, 0.0)) @ v.T
        Huu = 0.5 * (H[t, nx:, nx:] + H[t, nx:, nx:].T)
        w, v = np.linalg.eigh(Huu)
        if w[0] < UU_FLOOR:
            H[t, nx:, nx:] = (v * np.maximum(w, UU_FLOOR)) @ v.T
    return QuadraticCostExpansion(H, g, c)


# -- backward pass -------------------------------------------------------------

def lqr_backward(dynamics, cost, gamma, mu=0.0, x_hat=None, u_hat=None):
    """Discounted Riccati recursion in deviation coordinates.

    :param dynamics: sequence of (f_x, f_u) pairs or objects with ``f_x``/``f_u``.
    :param cost: QuadraticCostExpansion of the same length.
    :param gamma: discount on the next-step value.
    :param mu: additive regularization on the Q_uu block.
    :returns: TimeVaryingLinearPolicy; ``info["expected"]`` holds the
        linear and quadratic expected-improvement coefficients.
    """
    T = len(cost)
    if T < 1 or len(dynamics) != T:
        raise ValueError("dynamics and cost sequences must have equal length >= 1")
    n = cost.l_xu.shape[1]
    fx0 = _fx_fu(dynamics[0])[0]
    nx = fx0.shape[0]
    nu = n - nx
    K = np.empty((T, nu, nx))
    k = np.empty((T, nu))
    Quu_all = np.empty((T, nu, nu))
    Vxx = np.zeros((nx, nx))
    Vx = np.zeros(nx)
    lin = quad = 0.0
    disc = np.ones(T)
    for t in range(1, T):
        disc[t] = disc[t - 1] * gamma
    eye_u = np.eye(nu)
    for t in range(T - 1, -1, -1):
        f_x, f_u = _fx_fu(dynamics[t])
        fxu = np.hstack([f_x, f_u])
        Q = cost.l_xuxu[t] + gamma * fxu.T @ Vxx @ fxu
        q = cost.l_xu[t] + gamma * fxu.T @ Vx
        Quu = 0.5 * (Q[nx:, nx:] + Q[nx:, nx:].T) + mu * eye_u
        Qux = Q[nx:, :nx]
        try:
            L = np.linalg.cholesky(Quu)
        except np.linalg.LinAlgError:
            raise BackwardPassError(t) from None
        sol = _cho_solve(L, np.column_stack([Qux, q[nx:]]))
        K[t] = -sol[:, :nx]
        k[t] = -sol[:, nx]
        Quu_all[t] = Quu
        Vxx = Q[:nx, :nx] - Qux.T @ sol[:, :nx]
        Vxx = 0.5 * (Vxx + Vxx.T)
        Vx = q[:nx] - Qux.T @ sol[:, nx]
        lin += disc[t] * (k[t] @ q[nx:])
        quad += disc[t] * 0.5 * (k[t] @ Quu @ k[t])
    if x_hat is None:
        x_hat = np.zeros((T, nx))
    if u_hat is None:
        u_hat = np.zeros((T, nu))
    return TimeVaryingLinearPolicy(np.asarray(x_hat)[:T].copy(), np.asarray(u_hat).copy(),
                                   K, k, Quu_all, info={"expected": (lin, quad)})


def _fx_fu(d):
    if isinstance(d, tuple):
        return d
    return d.f_x, d.f_u


def _cho_solve(L, B):
    y = np.linalg.solve(L, B)
    return np.linalg.solve(L.T, y)


# -- full solver ---------------------------------------------------------------

def rollout(model, cost, x0, policy=None, controls=None, alpha=1.0, gamma=1.0, u_limit=None):
    """Simulate open-loop ``controls`` or a feedback ``policy`` scaled by ``alpha``.

    With ``u_limit`` every control is clipped to ``[-u_limit, u_limit]``
    before it is applied and costed.
    """
    T = policy.horizon if policy is not None else controls.shape[0]
    x0 = np.asarray(x0, dtype=float)
    xs = np.empty((T + 1, x0.size))
    xs[0] = x0
    nu = policy.k.shape[1] if policy is not None else controls.shape[1]
    us = np.empty((T, nu))
    total = 0.0
    w = 1.0
    for t in range(T):
        if policy is not None:
            us[t] = policy.u_hat[t] + alpha * policy.k[t] + policy.K[t] @ (xs[t] - policy.x_hat[t])
        else:
            us[t] = controls[t]
        if u_limit is not None:
            us[t] = np.clip(us[t], -u_limit, u_limit)
        total += w * cost.value(xs[t], us[t])
        w *= gamma
        xs[t + 1] = model.step(xs[t], us[t])
    return xs, us, total


def linearize(model, xs, us):
    if hasattr(model, "jacobians"):
        return [model.jacobians(xs[t], us[t]) for t in range(us.shape[0])]
    return [_fd_jacobians(model, xs[t], us[t]) for t in range(us.shape[0])]


def ilqr_solve(model, cost, x0, init_controls, T=None, gamma=0.95, opts=None):
    """Optimize controls from ``x0`` by iLQR with line search and regularization.

    :returns: ``(policy, total_cost)``. Rolling ``policy`` forward from ``x0``
        reproduces ``total_cost``. ``policy.info`` records the cost trace,
        accepted iterations, and whether the solver converged or stalled.
    """
    opts = opts or IlqrOptions()
    us = np.array(init_controls, dtype=float)
    if T is not None:
        us = us[:T]
    if us.shape[0] < 1:
        raise ValueError("horizon must be >= 1")
    xs, us, J = rollout(model, cost, x0, controls=us, gamma=gamma, u_limit=opts.u_limit)
    if not np.isfinite(J):
        raise ValueError("initial rollout cost is not finite")
    mu = 0.0
    policy = None
    last_bwd = None
    trace = [{"iter": 0, "cost": J, "mu": mu, "alpha": None}]
    accepted = 0
    status = "max_iters"
    lin_cache = None

    def bump(m):
        return opts.mu_min if m == 0.0 else m * opts.mu_factor

    for it in range(1, opts.max_iters + 1):
        if lin_cache is None:
            lin_cache = (linearize(model, xs, us), expand_cost(cost, xs, us, opts.psd_cost))
        dyn, exp = lin_cache
        bwd = None
        while bwd is None and mu <= opts.mu_max:
            try:
                bwd = lqr_backward(dyn, exp, gamma, mu, x_hat=xs[:-1], u_hat=us)
            except BackwardPassError:
                mu = bump(mu)
        if bwd is None:
            status = "stalled"
            break
        last_bwd = bwd
        lin, quad = bwd.info["expected"]
        expected = -(lin + quad)
        if expected < opts.tol_rel * abs(J):
            policy = replace(bwd, k=np.zeros_like(bwd.k), info={})
            status = "converged"
            break
        step = None
        for a in opts.alphas:
            xn, un, Jn = rollout(model, cost, x0, policy=bwd, alpha=a, gamma=gamma,
                                 u_limit=opts.u_limit)
            if np.isfinite(Jn) and Jn < J:
                step = (a, xn, un, Jn)
                break
        if step is None:
            mu = bump(mu)
            trace.append({"iter": it, "cost": J, "mu": mu, "alpha": None})
            if mu > opts.mu_max:
                status = "stalled"
                break
            continue
        a, xn, un, Jn = step
        policy = replace(bwd, k=a * bwd.k, info={})
        improvement = J - Jn
        J_old = J
        xs, us, J = xn, un, Jn
        lin_cache = None
        accepted += 1
        mu = mu / opts.mu_factor
        if mu < opts.mu_min:
            mu = 0.0
        trace.append({"iter": it, "cost": J, "mu": mu, "alpha": a})
        if improvement < opts.tol_rel * abs(J_old):
            status = "converged"
            break

    if policy is None:
        if last_bwd is None:
            raise BackwardPassError(-1)
        policy = replace(last_bwd, k=np.zeros_like(last_bwd.k), info={})
    policy.info = {"trace": trace, "accepted": accepted, "status": status,
                   "stalled": status == "stalled", "x": xs, "u": us}
    if opts.trace_path:
        with open(opts.trace_path, "a") as fh:
            for rec in trace:
                fh.write(json.dumps(rec) + "\n")
    return policy, J


class LinearModel:
    """Dynamics oracle for a fixed linear-Gaussian model (mean prediction)."""

    def __init__(self, dyn):
        self.dyn = dyn
        self._jac = (dyn.f_x, dyn.f_u)

    def step(self, x, u):
        return self.dyn.f_x @ x + self.dyn.f_u @ u + self.dyn.f_c

    def jacobians(self, x, u):
        return self._jac
