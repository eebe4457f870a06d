"""Small numpy MLP stack: forward/backward, Jacobians, spectral-norm control, training.

Hidden layers use a 1-Lipschitz activation; the output layer is affine. With each
weight matrix capped at ``K ** (1 / n_layers)`` the whole network is K-Lipschitz.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError, TrainingError

FORMAT_ID = "ccil.mlp/1"

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
}


@dataclass
class Mlp:
    """Feed-forward network ``W_n act(... act(W_1 x + b_1)) + b_n``.

    Weights are stored as ``(out, in)`` matrices.
    """

    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigurationError("need one bias per weight matrix and at least one layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigurationError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ConfigurationError(f"layer {i} input {w.shape[1]} != previous output")

    @classmethod
    def init(cls, sizes: Sequence[int], seed: int = 0, activation: str = "tanh",
             zero_output: bool = False) -> "Mlp":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.

        ``zero_output`` starts the output layer at zero so the network is
        initially the constant function 0.
        """
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        if zero_output:
            weights[-1][:] = 0.0
            biases[-1][:] = 0.0
        return cls(weights, biases, activation)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def params(self) -> list:
        return [*self.weights, *self.biases]

    # -- serialisation -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": FORMAT_ID,
            "activation": self.activation,
            "layers": [{"shape": list(w.shape), "W": w.tolist(), "b": b.tolist()}
                       for w, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        if d.get("format") != FORMAT_ID:
            raise ConfigurationError(f"not an MLP record (format={d.get('format')!r})")
        weights = [np.array(layer["W"], dtype=np.float64).reshape(layer["shape"]) for layer in d["layers"]]
        biases = [np.array(layer["b"], dtype=np.float64) for layer in d["layers"]]
        return cls(weights, biases, d["activation"])


def _as_batch(model: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != model.n_inputs:
        raise ConfigurationError(f"input has {x.shape[-1]} features, network expects {model.n_inputs}")
    return x, single


def _forward_cache(model: Mlp, x: np.ndarray):
    act, _ = _ACTIVATIONS[model.activation]
    pre, post = [], [x]
    h = x
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = z if i == model.n_layers - 1 else act(z)
        post.append(h)
    return pre, post


def forward(model: Mlp, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    xb, single = _as_batch(model, x)
    out = _forward_cache(model, xb)[1][-1]
    return out[0] if single else out


def backward(model: Mlp, x, output_grad) -> tuple[list, list]:
    """Gradients of ``sum(output_grad * forward(x))`` w.r.t. weights and biases.

    Batched inputs have their per-sample gradients summed.
    """
    xb, _ = _as_batch(model, x)
    g = np.atleast_2d(np.asarray(output_grad, dtype=np.float64))
    if g.shape != (xb.shape[0], model.n_outputs):
        raise ConfigurationError(f"output_grad shape {g.shape} != {(xb.shape[0], model.n_outputs)}")
    _, dact = _ACTIVATIONS[model.activation]
    pre, post = _forward_cache(model, xb)
    gw = [None] * model.n_layers
    gb = [None] * model.n_layers
    for i in range(model.n_layers - 1, -1, -1):
        if i < model.n_layers - 1:
            g = g * dact(pre[i])
        gw[i] = g.T @ post[i]
        gb[i] = g.sum(axis=0)
        if i:
            g = g @ model.weights[i]
    return gw, gb


def jacobian(model: Mlp, x) -> np.ndarray:
    """Exact input Jacobian, shape ``(out, in)`` or ``(batch, out, in)``."""
    xb, single = _as_batch(model, x)
    _, dact = _ACTIVATIONS[model.activation]
    pre, _ = _forward_cache(model, xb)
    jac = np.broadcast_to(model.weights[0], (xb.shape[0],) + model.weights[0].shape)
    for i in range(1, model.n_layers):
        jac = np.einsum("oh,nh,nhi->noi", model.weights[i], dact(pre[i - 1]), jac)
    jac = np.array(jac)
    return jac[0] if single else jac


# -- spectral control ---------------------------------------------------

def _start_vector(n: int) -> np.ndarray:
    v = np.random.default_rng(12345).standard_normal(n)
    return v / np.linalg.norm(v)


def spectral_norm(w, power_iters: int = 100, v0: Optional[np.ndarray] = None) -> float:
    """Largest singular value by power iteration on ``W^T W``.

    The estimate never exceeds the true norm and does not decrease with more
    iterations.
    """
    if power_iters < 1:
        raise ConfigurationError("power_iters must be >= 1")
    w = np.asarray(w, dtype=np.float64)
    return _power_iteration(w, power_iters, v0)[0]


def _power_iteration(w: np.ndarray, iters: int, v0: Optional[np.ndarray]):
    v = _start_vector(w.shape[1]) if v0 is None else v0
    sigma = 0.0
    for _ in range(iters):
        u = w @ v
        sigma = float(np.linalg.norm(u))
        if sigma == 0.0:
            return 0.0, v
        v_next = w.T @ u
        nv = np.linalg.norm(v_next)
        if nv == 0.0:
            break
        v = v_next / nv
    return max(sigma, float(np.linalg.norm(w @ v))), v


@dataclass
class SpectralConstraint:
    """Network-level Lipschitz cap ``K``; ``cap=None`` means unbounded."""

    cap: Optional[float] = None
    power_iters: int = 20
    applies_to: str = "all"

    def __post_init__(self):
        if self.cap is not None and math.isinf(self.cap):
            self.cap = None
        if self.cap is not None and not self.cap > 0:
            raise ConfigurationError(f"Lipschitz cap must be positive, got {self.cap}")
        if self.power_iters < 1:
            raise ConfigurationError("power_iters must be >= 1")
        if self.applies_to != "all":
            raise ConfigurationError("only applies_to='all' is supported")

    @property
    def bounded(self) -> bool:
        return self.cap is not None

    def layer_cap(self, n_layers: int) -> float:
        return self.cap ** (1.0 / n_layers)


def _effective(model: Mlp, i: int, scales) -> np.ndarray:
    w = model.weights[i]
    if scales is None:
        return w
    in_scale, out_scale = scales
    if i == 0:
        w = w / np.asarray(in_scale, dtype=np.float64)[None, :]
    if i == model.n_layers - 1:
        w = np.asarray(out_scale, dtype=np.float64)[:, None] * w
    return w


def spectral_project(model: Mlp, constraint: SpectralConstraint, exact: bool = False,
                     state: Optional[list] = None, scales=None) -> Mlp:
    """Rescale every ``W_i`` in place so ``||W_i||_2 <= K ** (1 / n)``.

    Matrices already under the cap are left untouched. ``state`` holds
    warm-start vectors for the power iteration across calls; ``exact`` uses an SVD.
    ``scales=(in_scale, out_scale)`` says the network is used as
    ``x -> out_scale * net(x / in_scale)``; the first and last layers are then
    measured with those diagonal scalings folded in, so the cap holds for the
    composed map.
    """
    if not constraint.bounded:
        raise ConfigurationError("spectral_project needs a bounded constraint")
    cap = constraint.layer_cap(model.n_layers)
    for i, w in enumerate(model.weights):
        eff = _effective(model, i, scales)
        if exact:
            sigma = float(np.linalg.norm(eff, 2))
        else:
            v0 = state[i] if state is not None and state[i] is not None else None
            sigma, v = _power_iteration(eff, constraint.power_iters, v0)
            if state is not None:
                state[i] = v
        if sigma > cap:
            w *= cap / sigma
    return model


# -- training ------------------------------------------------------------

@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 500
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    weight_decay: float = 0.0
    lr_decay: bool = True

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigurationError("epochs, batch_size and learning_rate must be positive")


@dataclass
class _Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads, lr):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


LossFn = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple]


def mse_loss(pred: np.ndarray, target: np.ndarray, weight: np.ndarray):
    """Weighted mean over samples of the squared error summed over outputs."""
    diff = pred - target
    wsum = weight.sum()
    loss = float((weight * (diff ** 2).sum(axis=1)).sum() / wsum)
    grad = 2.0 * diff * (weight / wsum)[:, None]
    return loss, grad


def train(model: Mlp, x, y, config: TrainConfig, loss_fn: LossFn = mse_loss,
          constraint: Optional[SpectralConstraint] = None,
          sample_weight: Optional[np.ndarray] = None, scales=None) -> list:
    """Mini-batch training in place, projecting onto the spectral cap after every step.

    Returns the per-epoch mean loss history. Deterministic given ``config.seed``.
    ``scales`` is forwarded to :func:`spectral_project`.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ConfigurationError("empty training set")
    w_all = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    opt = _Adam(config.learning_rate)
    project = constraint is not None and constraint.bounded
    pi_state = [None] * model.n_layers
    if project:
        spectral_project(model, constraint, state=pi_state, scales=scales)
    history = []
    bs = min(config.batch_size, n)
    for epoch in range(config.epochs):
        lr = config.learning_rate
        if config.lr_decay:
            lr *= 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs)) * 0.99 + 0.01
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            xb = x[idx]
            pred = forward(model, xb)
            loss, grad = loss_fn(pred, y[idx], w_all[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch offset {start}")
            gw, gb = backward(model, xb, grad)
            grads = [*gw, *gb]
            if config.weight_decay:
                for g, p in zip(grads[:model.n_layers], model.weights):
                    g += config.weight_decay * p
            if config.optimizer == "adam":
                opt.step(model.params(), grads, lr)
            else:
                for p, g in zip(model.params(), grads):
                    p -= lr * g
            if project:
                spectral_project(model, constraint, state=pi_state, scales=scales)
            total += loss * len(idx)
        history.append(total / n)
    if project:
        spectral_project(model, constraint, exact=True, scales=scales)
    if not all(np.isfinite(w).all() for w in model.params()):
        raise TrainingError("non-finite weights after training")
    return history


def dumps(record: dict) -> str:
    """JSON text with exact float round-trip."""
    return json.dumps(record, sort_keys=True, allow_nan=False)
