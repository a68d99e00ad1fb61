"""Feed-forward acceleration model with a semi-implicit integrator.

The network maps either ``[x_t; u_t]`` (no context) or
``[x_{t-1}; u_{t-1}; x_t; u_t]`` (temporal context) to accelerations of the
velocity block of the state, which are then integrated over one step::

    v' = v + a * dt
    q' = q + v' * dt
"""

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

HIDDEN = (60, 40)
FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 200
    weight_decay: float = 1e-5
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.batch_size > 0 and self.epochs > 0):
            raise ValueError("learning_rate, batch_size and epochs must be positive")
        if self.weight_decay < 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("bad weight_decay or momentum")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


def _relu(a):
    return np.maximum(a, 0.0)


class MLPModel:
    """Two-hidden-layer rectifier network predicting accelerations.

    :param d_x: state dimension, positions then velocities unless
        ``pos_idx``/``vel_idx`` say otherwise.
    :param d_u: action dimension.
    :param dt: integration step in seconds.
    :param context: if True the input also carries the previous state/action.
    """

    def __init__(self, d_x, d_u, dt, context=False, hidden=HIDDEN,
                 pos_idx=None, vel_idx=None, seed=0):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.d_x, self.d_u, self.dt = int(d_x), int(d_u), float(dt)
        self.context = bool(context)
        half = self.d_x // 2
        self.pos_idx = np.arange(half) if pos_idx is None else np.asarray(pos_idx, dtype=int)
        self.vel_idx = np.arange(half, self.d_x) if vel_idx is None else np.asarray(vel_idx, dtype=int)
        if self.pos_idx.size != self.vel_idx.size:
            raise ValueError("position and velocity blocks must have equal size")
        self.d_accel = self.vel_idx.size
        self.in_dim = (2 if self.context else 1) * (self.d_x + self.d_u)
        self.sizes = [self.in_dim, *hidden, self.d_accel]

        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        self.in_mean = np.zeros(self.in_dim)
        self.in_std = np.ones(self.in_dim)
        self.acc_mean = np.zeros(self.d_accel)
        self.acc_std = np.ones(self.d_accel)

    # -- structure ---------------------------------------------------------
    @property
    def state_offset(self):
        """Index in the input vector where the current state starts."""
        return self.d_x + self.d_u if self.context else 0

    def copy(self):
        new = object.__new__(MLPModel)
        new.__dict__.update(self.__dict__)
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        for name in ("in_mean", "in_std", "acc_mean", "acc_std", "pos_idx", "vel_idx"):
            setattr(new, name, getattr(self, name).copy())
        new.sizes = list(self.sizes)
        return new

    def make_input(self, x_prev, u_prev, x, u):
        if self.context:
            return np.concatenate([x_prev, u_prev, x, u])
        return np.concatenate([x, u])

    def dataset_inputs(self, dataset):
        if self.context:
            return np.hstack([dataset.x_prev, dataset.u_prev, dataset.x, dataset.u])
        return np.hstack([dataset.x, dataset.u])

    # -- evaluation --------------------------------------------------------
    def _hidden(self, X):
        Z = (X - self.in_mean) / self.in_std
        acts = [Z]
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            Z = _relu(Z @ W.T + b)
            acts.append(Z)
        out = Z @ self.weights[-1].T + self.biases[-1]
        return acts, out

    def integrate(self, x, accel):
        x = np.asarray(x, dtype=float)
        nxt = x.copy()
        v_new = x[..., self.vel_idx] + accel * self.dt
        nxt[..., self.vel_idx] = v_new
        nxt[..., self.pos_idx] = x[..., self.pos_idx] + v_new * self.dt
        return nxt

    def forward(self, inp):
        """Return ``(accel, next_state)``; accepts one input or a batch of rows."""
        inp = np.asarray(inp, dtype=float)
        if inp.shape[-1] != self.in_dim:
            raise ValueError(f"input dimension {inp.shape[-1]} != {self.in_dim}")
        _, out = self._hidden(inp)
        accel = self.acc_mean + self.acc_std * out
        x = inp[..., self.state_offset:self.state_offset + self.d_x]
        return accel, self.integrate(x, accel)

    def predict(self, inp):
        return self.forward(inp)[1]

    def jacobian(self, inp):
        """Analytic d next_state / d input, shape ``(d_x, in_dim)``."""
        inp = np.asarray(inp, dtype=float)
        if inp.shape != (self.in_dim,):
            raise ValueError(f"expected input of shape ({self.in_dim},)")
        acts, _ = self._hidden(inp)
        # Backward through the layers; rectifier slope at 0 is 0.
        J = self.weights[-1] * self.acc_std[:, None]
        for W, a in zip(self.weights[-2::-1], acts[:0:-1]):
            J = (J * (a > 0.0)) @ W
        J_acc = J / self.in_std

        off = self.state_offset
        jac = np.zeros((self.d_x, self.in_dim))
        jac[np.arange(self.d_x), off + np.arange(self.d_x)] = 1.0
        jac[self.vel_idx] += self.dt * J_acc
        jac[self.pos_idx, off + self.vel_idx] += self.dt
        jac[self.pos_idx] += self.dt * self.dt * J_acc
        return jac

    # -- serialization -----------------------------------------------------
    def to_dict(self):
        return {
            "type": "mlp",
            "version": FORMAT_VERSION,
            "d_x": self.d_x,
            "d_u": self.d_u,
            "dt": self.dt,
            "context": self.context,
            "pos_idx": self.pos_idx.tolist(),
            "vel_idx": self.vel_idx.tolist(),
            "layer_shapes": [list(W.shape) for W in self.weights],
            "weights": [W.ravel().tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "in_mean": self.in_mean.tolist(),
            "in_std": self.in_std.tolist(),
            "acc_mean": self.acc_mean.tolist(),
            "acc_std": self.acc_std.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("type") != "mlp" or doc.get("version") != FORMAT_VERSION:
            raise ValueError("not a version-%d mlp document" % FORMAT_VERSION)
        shapes = [tuple(s) for s in doc["layer_shapes"]]
        net = cls(doc["d_x"], doc["d_u"], doc["dt"], context=doc["context"],
                  hidden=tuple(s[0] for s in shapes[:-1]),
                  pos_idx=doc["pos_idx"], vel_idx=doc["vel_idx"])
        net.weights = [np.asarray(w, dtype=float).reshape(s) for w, s in zip(doc["weights"], shapes)]
        net.biases = [np.asarray(b, dtype=float) for b in doc["biases"]]
        for name in ("in_mean", "in_std", "acc_mean", "acc_std"):
            setattr(net, name, np.asarray(doc[name], dtype=float))
        return net


def _std(a, floor=1e-8):
    return np.maximum(a.std(axis=0), floor)


def _loss_and_grads(net, X, Y, scale, weight_decay):
    acts, out = net._hidden(X)
    accel = net.acc_mean + net.acc_std * out
    x = X[:, net.state_offset:net.state_offset + net.d_x]
    pred = net.integrate(x, accel)
    err = (pred - Y) / scale
    n = X.shape[0]
    loss = np.mean(err ** 2)

    g_pred = 2.0 * err / scale / (n * net.d_x)
    g_acc = g_pred[:, net.vel_idx] * net.dt + g_pred[:, net.pos_idx] * net.dt ** 2
    g = g_acc * net.acc_std
    gW, gb = [None] * len(net.weights), [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        gW[i] = g.T @ acts[i] + weight_decay * net.weights[i]
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ net.weights[i]) * (acts[i] > 0.0)
    return loss, gW, gb


def _eval_loss(net, X, Y, scale):
    return float(np.mean(((net.predict(X) - Y) / scale) ** 2)) if len(X) else float("nan")


def train(net, dataset, cfg=TrainConfig()):
    """Fit ``net`` to predict ``x_next`` from the dataset by minibatch SGD with momentum.

    The loss is the mean squared next-state error, each state dimension scaled
    by the spread of its one-step change in the training split. Normalization
    statistics are computed on the training split and stored in the model.

    :returns: (trained copy of net, final train loss, validation loss)
    """
    X_all = net.dataset_inputs(dataset)
    Y_all = np.asarray(dataset.x_next, dtype=float)
    n = X_all.shape[0]
    if n < 2 * cfg.batch_size:
        raise ValueError(f"need at least {2 * cfg.batch_size} records, got {n}")

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    X, Y = X_all[tr_idx], Y_all[tr_idx]
    Xv, Yv = X_all[val_idx], Y_all[val_idx]

    net = MLPModel(net.d_x, net.d_u, net.dt, context=net.context,
                   hidden=tuple(net.sizes[1:-1]), pos_idx=net.pos_idx,
                   vel_idx=net.vel_idx, seed=cfg.seed)
    x_cur = X[:, net.state_offset:net.state_offset + net.d_x]
    accel_target = (Y[:, net.vel_idx] - x_cur[:, net.vel_idx]) / net.dt
    net.in_mean, net.in_std = X.mean(axis=0), _std(X)
    net.acc_mean, net.acc_std = accel_target.mean(axis=0), _std(accel_target)
    scale = _std(Y - x_cur)

    vel_W = [np.zeros_like(W) for W in net.weights]
    vel_b = [np.zeros_like(b) for b in net.biases]
    initial = _eval_loss(net, X, Y, scale)
    history = []
    bs = cfg.batch_size
    for epoch in range(cfg.epochs):
        order = rng.permutation(X.shape[0])
        total, count = 0.0, 0
        for start in range(0, X.shape[0] - bs + 1, bs):
            idx = order[start:start + bs]
            loss, gW, gb = _loss_and_grads(net, X[idx], Y[idx], scale, cfg.weight_decay)
            for i in range(len(net.weights)):
                vel_W[i] = cfg.momentum * vel_W[i] - cfg.learning_rate * gW[i]
                vel_b[i] = cfg.momentum * vel_b[i] - cfg.learning_rate * gb[i]
                net.weights[i] += vel_W[i]
                net.biases[i] += vel_b[i]
            total += loss
            count += 1
        epoch_loss = total / count
        history.append(epoch_loss)
        if not np.isfinite(epoch_loss) or epoch_loss > 1e3 * max(initial, 1e-12):
            raise TrainingDivergedError(
                f"epoch {epoch}: loss {epoch_loss:.3e} vs initial {initial:.3e}")
    net.loss_history = history
    train_loss = _eval_loss(net, X, Y, scale)
    val_loss = _eval_loss(net, Xv, Yv, scale)
    logger.info("trained %s net: train %.4g val %.4g", "context" if net.context else "plain",
                train_loss, val_loss)
    return net, train_loss, val_loss
