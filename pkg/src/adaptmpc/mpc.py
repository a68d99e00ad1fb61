"""Adaptive model-predictive control loop.

Each tick folds the latest transition into the running moments, evaluates
the dynamics prior, refreshes the forgetting factor and sample size, fuses
prior and empirical moments, conditions the result into a local linear
model, plans with a few iLQR iterations, and samples an action with
covariance proportional to the inverse control Hessian.
"""

import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from adaptmpc.gaussian import ConditioningError, condition_dynamics, niw_map_update
from adaptmpc.ilqr import BackwardPassError, IlqrOptions, LinearModel, ilqr_solve, rollout
from adaptmpc.online import AdaptConfig, adapt, observe

logger = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e6


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 15
    rate: float = 20.0
    gamma: float = 0.95
    ilqr_iters: int = 2
    noise_scale: float = 1.0
    adapt: bool = True
    seed: int = 0
    mean_rule: str = "strengths"
    u_limit: float = None
    psd_cost: bool = False
    adapt_cfg: AdaptConfig = field(default_factory=AdaptConfig)

    def __post_init__(self):
        if self.horizon < 1 or self.rate <= 0 or self.noise_scale < 0:
            raise ValueError("need horizon >= 1, rate > 0, noise_scale >= 0")


@dataclass
class ControllerState:
    moments: object
    prior: object
    d_x: int
    d_u: int
    x_prev: np.ndarray = None
    u_prev: np.ndarray = None
    policy: object = None
    rng: np.random.Generator = None
    tick: int = 0


def make_controller(prior, moments, d_x, d_u, cfg):
    return ControllerState(moments, prior, d_x, d_u, rng=np.random.default_rng([cfg.seed, 2]))


def _sample(mean, Q_uu, scale, rng):
    if scale == 0.0:
        return mean.copy()
    cov = scale * np.linalg.inv(Q_uu)
    L = np.linalg.cholesky(0.5 * (cov + cov.T))
    return mean + L @ rng.standard_normal(mean.size)


def local_dynamics(ctrl, x_t, u_lin, cfg):
    """Moment update, prior evaluation, strength adaptation, fusion, conditioning.

    :returns: (dynamics, new moments, rho)
    """
    moments = ctrl.moments
    rho = float("nan")
    first = ctrl.x_prev is None
    x_prev = x_t if first else ctrl.x_prev
    u_prev = u_lin if first else ctrl.u_prev
    niw = ctrl.prior.evaluate(x_prev, u_prev, x_t, u_lin)
    if not cfg.adapt:
        return condition_dynamics(niw.prior_gaussian(), ctrl.d_x, ctrl.d_u), moments, rho
    if not first:
        moments = observe(moments, np.concatenate([ctrl.x_prev, ctrl.u_prev, x_t]))
        beta, n_eff, rho = adapt(moments, niw.prior_gaussian(), ctrl.x_prev, ctrl.u_prev,
                                 x_t, cfg.adapt_cfg)
        moments = replace(moments, beta=beta, n_eff=n_eff)
    joint = niw_map_update(niw, moments.mu_hat, moments.cov, moments.n_eff, cfg.mean_rule)
    return condition_dynamics(joint, ctrl.d_x, ctrl.d_u), moments, rho


def step(ctrl, x_t, cost, cfg):
    """One control tick.

    :returns: ``(u_t, new ControllerState, diagnostics dict)``
    """
    start = time.perf_counter()
    x_t = np.asarray(x_t, dtype=float)
    if not np.all(np.isfinite(x_t)):
        raise ValueError("non-finite state")
    H = cfg.horizon
    warm = ctrl.policy.shifted() if ctrl.policy is not None else None
    if warm is not None:
        u_lin = warm.u_hat[0] + warm.k[0]
    elif ctrl.u_prev is not None:
        u_lin = ctrl.u_prev
    else:
        u_lin = np.zeros(ctrl.d_u)

    degraded = False
    moments = ctrl.moments
    rho = float("nan")
    dyn = None
    policy = None
    planned = float("nan")
    try:
        dyn, moments, rho = local_dynamics(ctrl, x_t, u_lin, cfg)
        model = LinearModel(dyn)
        if warm is not None:
            _, init, _ = rollout(model, cost, x_t, policy=warm, gamma=cfg.gamma,
                                 u_limit=cfg.u_limit)
        else:
            init = np.tile(u_lin, (H, 1))
        opts = IlqrOptions(max_iters=cfg.ilqr_iters, u_limit=cfg.u_limit, psd_cost=cfg.psd_cost)
        policy, planned = ilqr_solve(model, cost, x_t, init, H, cfg.gamma, opts)
        mean = policy.action(0, x_t)
        u = _sample(mean, policy.Q_uu[0], cfg.noise_scale, ctrl.rng)
    except (BackwardPassError, ConditioningError, np.linalg.LinAlgError) as err:
        logger.warning("tick %d degraded: %s", ctrl.tick, err)
        degraded = True
        if warm is not None:
            u = warm.action(0, x_t)
            policy = warm
        else:
            u = u_lin.copy()
    if cfg.u_limit is not None:
        u = np.clip(u, -cfg.u_limit, cfg.u_limit)

    new = replace(ctrl, moments=moments, x_prev=x_t, u_prev=u, policy=policy, tick=ctrl.tick + 1)
    diag = {
        "rho": rho,
        "beta": moments.beta,
        "n_eff": moments.n_eff,
        "planned_cost": planned,
        "wall_ms": 1e3 * (time.perf_counter() - start),
        "degraded": degraded,
        "dynamics": dyn,
    }
    return u, new, diag


@dataclass
class EpisodeResult:
    states: np.ndarray
    actions: np.ndarray
    records: list
    success: bool
    final_distance: float
    time_to_success: float
    aborted: bool = False


def run_episode(env, ctrl, cost, cfg, x0, T_max=None, success=None, log_path=None):
    """Run the controller in ``env`` from ``x0`` for ``T_max`` ticks.

    ``success`` is a predicate on the final state; the default checks the
    distance to the environment's true target against its threshold.
    """
    T_max = int(round(cfg.rate * 10.0)) if T_max is None else T_max
    if success is None:
        def success(x):
            return env.distance(x) < env.success_threshold
    if cfg.u_limit is None:
        cfg = replace(cfg, u_limit=env.u_limit)
    x = np.asarray(x0, dtype=float)
    xs, us, records = [x], [], []
    first_hit = None
    aborted = False
    for t in range(T_max):
        u, ctrl, diag = step(ctrl, x, cost, cfg)
        records.append({
            "t": t, "x": x.tolist(), "u": u.tolist(), "rho": _num(diag["rho"]),
            "beta": diag["beta"], "n_eff": diag["n_eff"],
            "planned_cost": _num(diag["planned_cost"]), "wall_ms": diag["wall_ms"],
        })
        x = env.transition(x, u)
        xs.append(x)
        us.append(u)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
            aborted = True
            break
        if first_hit is None and env.distance(x) < env.success_threshold:
            first_hit = (t + 1) / cfg.rate
    final_d = env.distance(x) if np.all(np.isfinite(x)) else float("inf")
    ok = (not aborted) and bool(success(x))
    if log_path is not None:
        with open(log_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return EpisodeResult(np.array(xs), np.array(us), records, ok, final_d,
                         first_hit if first_hit is not None else float("nan"), aborted)


def _num(v):
    return None if v is None or not np.isfinite(v) else float(v)
