"""Desk-scale ground-truth environments, task costs and data collection.

All environments step at ``dt = 0.05`` s (20 Hz). The arm environments
integrate internally with semi-implicit Euler substeps so that stiff contact
penalties stay stable.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from adaptmpc.data import TransitionDataset

DT = 0.05


# -- base ----------------------------------------------------------------------

class Environment:
    """Common surface. Subclasses implement ``_step`` and ``position``."""

    env_id = "base"
    d_x = 4
    d_u = 2

    def __init__(self, dt=DT, u_limit=1.0, noise_frac=0.01, target=(0.0, 0.0),
                 success_threshold=0.02):
        self.dt = float(dt)
        self.u_limit = float(u_limit)
        self.noise_std = noise_frac * self.u_limit
        self.target = np.asarray(target, dtype=float)
        self.success_threshold = float(success_threshold)
        self.rng = np.random.default_rng(0)

    def reset(self, seed=0):
        """Return an initial state; also reseeds the actuation-noise stream."""
        self.rng = np.random.default_rng([int(seed), 1])
        return self.initial_state(np.random.default_rng([int(seed), 0]))

    def initial_state(self, rng):
        raise NotImplementedError

    def clamp(self, u):
        return np.clip(u, -self.u_limit, self.u_limit)

    def transition(self, x, u, noise=None):
        """Advance one control step with clamped, noise-corrupted actuation."""
        if noise is None:
            noise = self.rng.normal(0.0, self.noise_std, self.d_u) if self.noise_std > 0 else 0.0
        return self._step(np.asarray(x, dtype=float), self.clamp(np.asarray(u, dtype=float)) + noise)

    def _step(self, x, u):
        raise NotImplementedError

    def position(self, x):
        raise NotImplementedError

    def distance(self, x, target=None):
        t = self.target if target is None else target
        return float(np.linalg.norm(self.position(x) - t))

    def sq_distance_derivs(self, x, target):
        """Squared task-space distance with its gradient and Hessian in x."""
        raise NotImplementedError

    def describe(self):
        return {"env_id": self.env_id, "dt": self.dt}


# -- point mass ------------------------------------------------------------------

class PointMassEnv(Environment):
    """2-D point mass with viscous drag; state ``[q; v]``, force input."""

    env_id = "point_mass"

    def __init__(self, mass=1.0, drag=0.5, u_limit=5.0, noise_frac=0.01,
                 target=(0.3, 0.2), success_threshold=0.01, start_spread=0.05, dt=DT):
        super().__init__(dt, u_limit, noise_frac, target, success_threshold)
        self.mass = float(mass)
        self.drag = float(drag)
        self.start_spread = start_spread

    def initial_state(self, rng):
        q = rng.uniform(-self.start_spread, self.start_spread, 2)
        return np.concatenate([q, np.zeros(2)])

    def _step(self, x, u):
        q, v = x[:2], x[2:]
        a = (u - self.drag * v) / self.mass
        v_new = v + a * self.dt
        return np.concatenate([q + v_new * self.dt, v_new])

    def position(self, x):
        return np.asarray(x[:2])

    def sq_distance_derivs(self, x, target):
        diff = x[:2] - target
        g = np.zeros(4)
        g[:2] = 2.0 * diff
        H = np.zeros((4, 4))
        H[0, 0] = H[1, 1] = 2.0
        return float(diff @ diff), g, H


# -- two-link arm ------------------------------------------------------------------

@dataclass
class ArmParams:
    l1: float = 0.5
    l2: float = 0.5
    m1: float = 1.0
    m2: float = 1.0
    gravity: float = 9.81
    damping: float = 2.0
    armature: float = 0.5
    torque_limit: float = 20.0
    substeps: int = 50

    @property
    def lc1(self):
        return 0.5 * self.l1

    @property
    def lc2(self):
        return 0.5 * self.l2

    @property
    def i1(self):
        return self.m1 * self.l1 ** 2 / 12.0

    @property
    def i2(self):
        return self.m2 * self.l2 ** 2 / 12.0


class TwoLinkArmEnv(Environment):
    """Planar 2-link arm in a vertical plane; state ``[th1, th2, w1, w2]``.

    Angles are measured from the horizontal, counter-clockwise, with gravity
    acting along -y.
    """

    env_id = "reach"

    def __init__(self, params=None, target=(0.35, 0.45), home=(-0.3, 1.2),
                 start_spread=0.15, noise_frac=0.01, success_threshold=0.02, dt=DT):
        self.p = params or ArmParams()
        super().__init__(dt, self.p.torque_limit, noise_frac, target, success_threshold)
        self.home = np.asarray(home, dtype=float)
        self.start_spread = start_spread

    # kinematics
    def fk(self, th):
        p = self.p
        return np.array([p.l1 * math.cos(th[0]) + p.l2 * math.cos(th[0] + th[1]),
                         p.l1 * math.sin(th[0]) + p.l2 * math.sin(th[0] + th[1])])

    def jacobian(self, th):
        p = self.p
        s1, c1 = math.sin(th[0]), math.cos(th[0])
        s12, c12 = math.sin(th[0] + th[1]), math.cos(th[0] + th[1])
        return np.array([[-p.l1 * s1 - p.l2 * s12, -p.l2 * s12],
                         [p.l1 * c1 + p.l2 * c12, p.l2 * c12]])

    def position(self, x):
        return self.fk(x[:2])

    def ik(self, point, elbow=1.0):
        p = self.p
        x, y = point
        c2 = (x * x + y * y - p.l1 ** 2 - p.l2 ** 2) / (2 * p.l1 * p.l2)
        th2 = elbow * math.acos(max(-1.0, min(1.0, c2)))
        th1 = math.atan2(y, x) - math.atan2(p.l2 * math.sin(th2), p.l1 + p.l2 * math.cos(th2))
        return np.array([th1, th2])

    def sq_distance_derivs(self, x, target):
        p = self.p
        th1, th2 = x[0], x[1]
        s1, c1 = math.sin(th1), math.cos(th1)
        s12, c12 = math.sin(th1 + th2), math.cos(th1 + th2)
        px = p.l1 * c1 + p.l2 * c12
        py = p.l1 * s1 + p.l2 * s12
        ex, ey = px - target[0], py - target[1]
        J = np.array([[-p.l1 * s1 - p.l2 * s12, -p.l2 * s12],
                      [p.l1 * c1 + p.l2 * c12, p.l2 * c12]])
        # second derivatives of px and py w.r.t. (th1, th2)
        Hx = -np.array([[px, p.l2 * c12], [p.l2 * c12, p.l2 * c12]])
        Hy = -np.array([[py, p.l2 * s12], [p.l2 * s12, p.l2 * s12]])
        g = np.zeros(4)
        g[:2] = 2.0 * (J.T @ np.array([ex, ey]))
        H = np.zeros((4, 4))
        H[:2, :2] = 2.0 * (J.T @ J + ex * Hx + ey * Hy)
        return ex * ex + ey * ey, g, H

    # dynamics
    def mass_matrix(self, th):
        p = self.p
        c2 = math.cos(th[1])
        m11 = p.i1 + p.i2 + p.m1 * p.lc1 ** 2 + p.m2 * (p.l1 ** 2 + p.lc2 ** 2 + 2 * p.l1 * p.lc2 * c2)
        m12 = p.i2 + p.m2 * (p.lc2 ** 2 + p.l1 * p.lc2 * c2)
        m22 = p.i2 + p.m2 * p.lc2 ** 2
        return np.array([[m11 + p.armature, m12], [m12, m22 + p.armature]])

    def gravity_torque(self, th):
        p = self.p
        c1, c12 = math.cos(th[0]), math.cos(th[0] + th[1])
        g2 = p.m2 * p.lc2 * p.gravity * c12
        return np.array([(p.m1 * p.lc1 + p.m2 * p.l1) * p.gravity * c1 + g2, g2])

    def energy(self, x):
        p = self.p
        th, w = x[:2], x[2:]
        ke = 0.5 * w @ self.mass_matrix(th) @ w
        y1 = p.lc1 * math.sin(th[0])
        y2 = p.l1 * math.sin(th[0]) + p.lc2 * math.sin(th[0] + th[1])
        return ke + p.gravity * (p.m1 * y1 + p.m2 * y2)

    def contact_force(self, pos, vel):
        """Task-space contact force on the end effector (none in free space)."""
        return 0.0, 0.0

    def _step(self, x, u):
        p = self.p
        h = self.dt / p.substeps
        th1, th2, w1, w2 = (float(v) for v in x)
        t1, t2 = float(u[0]), float(u[1])
        l1, l2, lc1, lc2, m1, m2, g, b = p.l1, p.l2, p.lc1, p.lc2, p.m1, p.m2, p.gravity, p.damping
        a22 = p.i2 + m2 * lc2 * lc2
        a11 = p.i1 + p.i2 + m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2)
        g1c = (m1 * lc1 + m2 * l1) * g
        g2c = m2 * lc2 * g
        m22 = a22 + p.armature
        contact = type(self).contact_force is not TwoLinkArmEnv.contact_force
        for _ in range(p.substeps):
            s1, c1 = math.sin(th1), math.cos(th1)
            s2, c2 = math.sin(th2), math.cos(th2)
            s12, c12 = math.sin(th1 + th2), math.cos(th1 + th2)
            m11 = a11 + p.armature + 2 * m2 * l1 * lc2 * c2
            m12 = a22 + m2 * l1 * lc2 * c2
            hh = m2 * l1 * lc2 * s2
            r1 = t1 + hh * (2 * w1 * w2 + w2 * w2) - g1c * c1 - g2c * c12 - b * w1
            r2 = t2 - hh * w1 * w1 - g2c * c12 - b * w2
            if contact:
                j11, j12 = -l1 * s1 - l2 * s12, -l2 * s12
                j21, j22 = l1 * c1 + l2 * c12, l2 * c12
                pos = (l1 * c1 + l2 * c12, l1 * s1 + l2 * s12)
                vel = (j11 * w1 + j12 * w2, j21 * w1 + j22 * w2)
                fx, fy = self.contact_force(pos, vel)
                r1 += j11 * fx + j21 * fy
                r2 += j12 * fx + j22 * fy
            det = m11 * m22 - m12 * m12
            acc1 = (m22 * r1 - m12 * r2) / det
            acc2 = (m11 * r2 - m12 * r1) / det
            w1 += acc1 * h
            w2 += acc2 * h
            th1 += w1 * h
            th2 += w2 * h
        return np.array([th1, th2, w1, w2])

    def initial_state(self, rng):
        th = self.home + rng.uniform(-self.start_spread, self.start_spread, 2)
        return np.concatenate([th, np.zeros(2)])

    def describe(self):
        d = super().describe()
        d["params"] = vars(self.p).copy()
        d["target"] = self.target.tolist()
        return d


@dataclass
class ContactParams:
    surface_y: float = -0.35
    channel_x: float = 0.6
    channel_half_width: float = 0.01
    channel_depth: float = 0.06
    stiffness: float = 1e4
    damping: float = 100.0
    damping_ramp: float = 1e-3
    friction: float = 0.3
    slip_velocity: float = 0.05


def _wedge(p1, p2):
    """Penetration into the quarter-plane {p1 > 0, p2 > 0} and its gradient.

    Uses the R-conjunction ``p1 + p2 - |(p1, p2)|`` which is positive only
    inside, vanishes on both faces and has a bounded gradient, so the
    resulting penalty force is continuous everywhere.
    """
    if p1 <= 0.0 or p2 <= 0.0:
        return 0.0, 0.0, 0.0
    r = math.hypot(p1, p2)
    return p1 + p2 - r, 1.0 - p1 / r, 1.0 - p2 / r


class InsertionEnv(TwoLinkArmEnv):
    """Arm whose end effector must enter a narrow channel cut into a surface.

    The solid is two blocks either side of the channel plus the channel
    floor. Each penetrated region pushes back with a spring-damper normal
    force and a regularized Coulomb tangential force.
    """

    env_id = "insertion"

    def __init__(self, params=None, contact=None, target_depth=0.04, home=None,
                 start_spread=0.1, noise_frac=0.01, success_threshold=0.02, dt=DT):
        self.c = contact or ContactParams()
        target = (self.c.channel_x, self.c.surface_y - target_depth)
        super().__init__(params, target, (0.0, 0.0), start_spread, noise_frac,
                         success_threshold, dt)
        self.home = self.ik((self.c.channel_x - 0.15, self.c.surface_y + 0.15)) if home is None \
            else np.asarray(home, dtype=float)

    def contact_force(self, pos, vel):
        c = self.c
        x, y = pos
        vx, vy = vel
        fx = fy = 0.0
        left = c.channel_x - c.channel_half_width
        right = c.channel_x + c.channel_half_width
        regions = (
            # (penetration, d pen/dx, d pen/dy)
            _block(left - x, c.surface_y - y, -1.0),
            _block(x - right, c.surface_y - y, 1.0),
            (max(0.0, c.surface_y - c.channel_depth - y), 0.0, -1.0),
        )
        for pen, gx, gy in regions:
            if pen <= 0.0:
                continue
            gn = math.hypot(gx, gy)
            nx, ny = -gx / gn, -gy / gn  # outward normal
            rate = -(nx * vx + ny * vy)  # inward normal speed
            # spring term is -grad(k pen^2 / 2); damping fades in over the first mm
            ramp = min(1.0, pen / c.damping_ramp)
            fn = max(0.0, c.stiffness * pen * gn + c.damping * ramp * rate)
            vt = -ny * vx + nx * vy
            ft = -c.friction * fn * math.tanh(vt / c.slip_velocity)
            fx += fn * nx - ft * ny
            fy += fn * ny + ft * nx
        return fx, fy

    def describe(self):
        d = super().describe()
        d["contact"] = vars(self.c).copy()
        return d


def _block(p_side, p_top, side_sign):
    pen, d1, d2 = _wedge(p_side, p_top)
    # p_side = side_sign * x + const, p_top = -y + const
    return pen, side_sign * d1, -d2


# -- factories ---------------------------------------------------------------------

def point_mass_env(**cfg):
    return PointMassEnv(**cfg)


def two_link_arm_env(params=None, **cfg):
    if isinstance(params, dict):
        params = ArmParams(**params)
    return TwoLinkArmEnv(params, **cfg)


def insertion_env(params=None, contact=None, **cfg):
    if isinstance(params, dict):
        params = ArmParams(**params)
    if isinstance(contact, dict):
        contact = ContactParams(**contact)
    return InsertionEnv(params, contact, **cfg)


def high_friction_insertion_env(params=None, contact=None, **cfg):
    contact = dict(contact or {})
    contact.setdefault("friction", 1.0)
    env = insertion_env(params, contact, **cfg)
    env.env_id = "insertion_hf"
    return env


ENVS = {
    "point_mass": point_mass_env,
    "reach": two_link_arm_env,
    "insertion": insertion_env,
    "insertion_hf": high_friction_insertion_env,
}


def make_env(env_id, **cfg):
    try:
        factory = ENVS[env_id]
    except KeyError:
        raise ValueError(f"unknown environment {env_id!r}; choose from {sorted(ENVS)}") from None
    env = factory(**cfg)
    env.env_id = env_id
    return env


# -- cost ------------------------------------------------------------------------

@dataclass
class TaskCost:
    """``w d^2 + v log(d^2 + alpha) + torque_weight |u|^2`` with d the task distance."""

    env: Environment
    target: np.ndarray = None
    w: float = 1.0
    v: float = 0.01
    alpha: float = 1e-5
    torque_weight: float = 1e-3

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.torque_weight < 0:
            raise ValueError("torque_weight must be nonnegative")
        self.target = np.asarray(self.env.target if self.target is None else self.target, float)

    def value(self, x, u):
        d2 = float(np.sum((self.env.position(x) - self.target) ** 2))
        return self.w * d2 + self.v * math.log(d2 + self.alpha) + self.torque_weight * float(u @ u)

    def derivatives(self, x, u):
        """Value, gradient and Hessian over ``[x; u]``."""
        s, gs, Hs = self.env.sq_distance_derivs(np.asarray(x, float), self.target)
        r1 = self.w + self.v / (s + self.alpha)
        r2 = -self.v / (s + self.alpha) ** 2
        nx, nu = gs.size, np.size(u)
        g = np.empty(nx + nu)
        H = np.zeros((nx + nu, nx + nu))
        g[:nx] = r1 * gs
        g[nx:] = 2.0 * self.torque_weight * u
        H[:nx, :nx] = r2 * np.outer(gs, gs) + r1 * Hs
        H[nx:, nx:] = 2.0 * self.torque_weight * np.eye(nu)
        val = self.w * s + self.v * math.log(s + self.alpha) + self.torque_weight * float(u @ u)
        return val, g, H


def eval_cost(cost, x, u):
    return cost.derivatives(np.asarray(x, float), np.asarray(u, float))


# -- data collection -------------------------------------------------------------

@dataclass
class PolicySpec:
    """Data-collection behaviour.

    ``random``: smoothed random torques around gravity compensation.
    ``scripted``: task-space PD reaches toward jittered goals near the target,
    via a waypoint above it when ``via_offset`` is set.
    """

    kind: str = "random"
    smoothing: float = 0.8
    scale: float = 0.3
    kp: float = 150.0
    kd: float = 25.0
    goal_jitter: float = 0.05
    via_offset: float = 0.0
    noise: float = 0.1
    extra: dict = field(default_factory=dict)


def _gravity_comp(env, x):
    return env.gravity_torque(x[:2]) if hasattr(env, "gravity_torque") else np.zeros(env.d_u)


def _make_policy(env, spec, rng):
    if callable(spec):
        return spec
    if spec.kind == "random":
        state = {"u": np.zeros(env.d_u)}

        def pol(x, t):
            state["u"] = spec.smoothing * state["u"] + (1 - spec.smoothing) * rng.normal(
                0.0, spec.scale * env.u_limit / math.sqrt(1 - spec.smoothing), env.d_u)
            return _gravity_comp(env, x) + state["u"]
        return pol
    if spec.kind == "scripted":
        goal = env.target + rng.uniform(-spec.goal_jitter, spec.goal_jitter, 2)
        via = goal + np.array([0.0, spec.via_offset]) if spec.via_offset else None

        def pol(x, t):
            pos = env.position(x)
            g = goal
            if via is not None and np.linalg.norm(pos - via) > 0.02 and t < 80:
                g = via
            if hasattr(env, "jacobian"):
                J = env.jacobian(x[:2])
                vel = J @ x[2:]
                f = spec.kp * (g - pos) - spec.kd * vel
                u = J.T @ f - 0.5 * x[2:]
            else:
                u = spec.kp * (g - pos) - spec.kd * x[2:]
            u = u + _gravity_comp(env, x)
            return u + rng.normal(0.0, spec.noise * env.u_limit, env.d_u)
        return pol
    raise ValueError(f"unknown policy kind {spec.kind!r}")


def collect_dataset(env, policy, episodes, seed=0, steps=200, tag=None):
    """Roll out ``episodes`` episodes of ``steps`` actions each.

    Each episode contributes ``steps - 1`` records, since a record needs a
    previous and a next state around the current one.
    """
    tag = tag or env.env_id
    rng = np.random.default_rng(seed)
    spec = policy if callable(policy) else (PolicySpec(**policy) if isinstance(policy, dict) else policy)
    cols = {k: [] for k in ("x_prev", "u_prev", "x", "u", "x_next")}
    for ep in range(episodes):
        ep_seed = int(rng.integers(2 ** 31))
        x = env.reset(ep_seed)
        pol = _make_policy(env, spec, np.random.default_rng(ep_seed))
        xs, us = [x], []
        for t in range(steps):
            u = env.clamp(pol(x, t))
            x = env.transition(x, u)
            us.append(u)
            xs.append(x)
        for t in range(1, steps):
            cols["x_prev"].append(xs[t - 1])
            cols["u_prev"].append(us[t - 1])
            cols["x"].append(xs[t])
            cols["u"].append(us[t])
            cols["x_next"].append(xs[t + 1])
    meta = {"env_id": env.env_id, "dt": env.dt, "seed": seed, "episodes": episodes,
            "steps": steps, "policy": spec.kind if not callable(spec) else "callable"}
    if not cols["x"]:
        return TransitionDataset.empty(env.d_x, env.d_u, meta)
    n = len(cols["x"])
    return TransitionDataset(*(np.array(cols[k]) for k in ("x_prev", "u_prev", "x", "u", "x_next")),
                             np.array([tag] * n, dtype=object), meta)
