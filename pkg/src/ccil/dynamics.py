"""Demonstration data and the residual dynamics model ``s' = s + f(s, a)``."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import nn
from .exceptions import ConfigurationError, InputError

MODEL_FORMAT = "ccil.dynamics/1"


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    contact: Optional[bool] = None

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.s_next = np.asarray(self.s_next, dtype=np.float64)
        if self.s.shape != self.s_next.shape or self.s.ndim != 1 or self.a.ndim != 1:
            raise InputError(f"inconsistent transition shapes {self.s.shape}, {self.a.shape}, {self.s_next.shape}")
        if not (np.isfinite(self.s).all() and np.isfinite(self.a).all() and np.isfinite(self.s_next).all()):
            raise InputError("transition contains non-finite values")


@dataclass
class TrajectoryDataset:
    """Ordered trajectories of chained transitions."""

    trajectories: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        dims = None
        for k, traj in enumerate(self.trajectories):
            if not traj:
                raise InputError(f"trajectory {k} is empty")
            for t, tr in enumerate(traj):
                d = (tr.s.shape[0], tr.a.shape[0])
                if dims is None:
                    dims = d
                elif d != dims:
                    raise InputError(f"trajectory {k} step {t}: dims {d} differ from {dims}")
                if t and not np.array_equal(traj[t - 1].s_next, tr.s):
                    raise InputError(f"trajectory {k} breaks chaining at step {t}")

    def __len__(self) -> int:
        return sum(len(t) for t in self.trajectories)

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectories)

    @property
    def state_dim(self) -> int:
        return self.trajectories[0][0].s.shape[0]

    @property
    def action_dim(self) -> int:
        return self.trajectories[0][0].a.shape[0]

    def _stack(self, attr):
        return np.array([getattr(tr, attr) for traj in self.trajectories for tr in traj])

    @property
    def states(self) -> np.ndarray:
        return self._stack("s")

    @property
    def actions(self) -> np.ndarray:
        return self._stack("a")

    @property
    def next_states(self) -> np.ndarray:
        return self._stack("s_next")

    @property
    def index(self) -> list:
        """``(trajectory, step)`` for every transition in stacking order."""
        return [(k, t) for k, traj in enumerate(self.trajectories) for t in range(len(traj))]

    @property
    def contact(self) -> np.ndarray:
        return np.array([bool(tr.contact) for traj in self.trajectories for tr in traj])

    def normalization_stats(self) -> dict:
        return {"s": _standardizer(self.states), "a": _standardizer(self.actions)}

    def xy(self) -> tuple:
        """Model inputs ``[s | a]`` and targets ``s_next``."""
        return np.hstack([self.states, self.actions]), self.next_states

    def head(self, n_traj: int) -> "TrajectoryDataset":
        return TrajectoryDataset(self.trajectories[:n_traj])

    # -- line-delimited JSON ------------------------------------------
    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for k, traj in enumerate(self.trajectories):
                for t, tr in enumerate(traj):
                    rec = {"traj": k, "t": t, "s": tr.s.tolist(), "a": tr.a.tolist(),
                           "s_next": tr.s_next.tolist()}
                    if tr.contact is not None:
                        rec["contact"] = bool(tr.contact)
                    fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TrajectoryDataset":
        if not os.path.exists(path):
            raise InputError(f"no such trajectory file: {path}")
        grouped: dict = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    key, t = int(rec["traj"]), int(rec["t"])
                    tr = Transition(rec["s"], rec["a"], rec["s_next"], rec.get("contact"))
                except (KeyError, TypeError, ValueError) as exc:
                    raise InputError(f"{path}:{lineno}: bad transition record ({exc})") from exc
                grouped.setdefault(key, {})
                if t in grouped[key]:
                    raise InputError(f"{path}:{lineno}: duplicate step {t} in trajectory {key}")
                grouped[key][t] = tr
        trajs = []
        for key in sorted(grouped):
            steps = grouped[key]
            if sorted(steps) != list(range(len(steps))):
                raise InputError(f"{path}: trajectory {key} has missing steps")
            trajs.append([steps[t] for t in range(len(steps))])
        if not trajs:
            raise InputError(f"{path}: no transitions")
        return cls(trajs)


def _standardizer(x: np.ndarray) -> dict:
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 1e-8, scale, 1.0)
    return {"mean": mean, "scale": scale}


class ResidualDynamics(BaseEstimator, RegressorMixin):
    """MLP residual dynamics model with an optional global Lipschitz cap.

    ``fit(X, y)`` takes ``X = [s | a]`` and ``y = s_next``; the state dimension
    is read off ``y``. Inputs and residuals are standardised internally and the
    statistics are stored with the model, so every public method works in raw
    units. ``lipschitz_cap`` bounds the raw-unit map ``[s | a] -> f(s, a)``.
    """

    def __init__(self, hidden_sizes=(64, 64), lipschitz_cap=None, power_iters=20,
                 epochs=300, batch_size=64, learning_rate=3e-3, optimizer="adam",
                 weight_decay=0.0, normalize=True, holdout=0.0, seed=0):
        self.hidden_sizes = hidden_sizes
        self.lipschitz_cap = lipschitz_cap
        self.power_iters = power_iters
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.normalize = normalize
        self.holdout = holdout
        self.seed = seed

    def _constraint(self) -> nn.SpectralConstraint:
        return nn.SpectralConstraint(self.lipschitz_cap, self.power_iters)

    def fit(self, X, y):
        if np.shape(X)[0] == 0:
            raise InputError("empty dataset")
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        if y.shape[0] != X.shape[0] or y.shape[1] >= X.shape[1]:
            raise InputError(f"X {X.shape} and y {y.shape} are inconsistent for [s|a] -> s'")
        if not 0.0 <= self.holdout < 1.0:
            raise ConfigurationError("holdout must be in [0, 1)")
        self.state_dim_ = y.shape[1]
        self.action_dim_ = X.shape[1] - y.shape[1]
        self.n_features_in_ = X.shape[1]
        resid = y - X[:, :self.state_dim_]

        train_idx = np.arange(X.shape[0])
        hold_idx = np.array([], dtype=int)
        if self.holdout:
            perm = np.random.default_rng(self.seed + 1).permutation(X.shape[0])
            n_hold = int(round(self.holdout * X.shape[0]))
            hold_idx, train_idx = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])

        if self.normalize:
            xs, ys = _standardizer(X[train_idx]), _standardizer(resid[train_idx])
        else:
            xs = {"mean": np.zeros(X.shape[1]), "scale": np.ones(X.shape[1])}
            ys = {"mean": np.zeros(y.shape[1]), "scale": np.ones(y.shape[1])}
        self.x_mean_, self.x_scale_ = xs["mean"], xs["scale"]
        self.y_mean_, self.y_scale_ = ys["mean"], ys["scale"]

        sizes = [X.shape[1], *self.hidden_sizes, self.state_dim_]
        self.net_ = nn.Mlp.init(sizes, seed=self.seed, zero_output=True)
        config = nn.TrainConfig(seed=self.seed, epochs=self.epochs, batch_size=self.batch_size,
                                learning_rate=self.learning_rate, optimizer=self.optimizer,
                                weight_decay=self.weight_decay)
        xn = (X[train_idx] - self.x_mean_) / self.x_scale_
        yn = (resid[train_idx] - self.y_mean_) / self.y_scale_
        # the cap is enforced on the raw-unit map s, a -> f(s, a)
        self.loss_history_ = nn.train(self.net_, xn, yn, config, constraint=self._constraint(),
                                      scales=(self.x_scale_, self.y_scale_))

        err = self.residual_norms(X[train_idx], y[train_idx])
        self.eps_train_ = float(err.mean())
        self.eps_max_ = float(err.max())
        self.eps_holdout_ = float(self.residual_norms(X[hold_idx], y[hold_idx]).mean()) if len(hold_idx) else None
        return self

    # -- prediction ---------------------------------------------------
    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features_in_:
            raise InputError(f"expected {self.n_features_in_} features ([s|a]), got {X.shape[-1]}")
        return X

    def predict_residual(self, X) -> np.ndarray:
        """``f(s, a)`` in raw units for rows of ``[s | a]``."""
        X = self._check(X)
        return self.y_mean_ + self.y_scale_ * nn.forward(self.net_, (X - self.x_mean_) / self.x_scale_)

    def predict(self, X) -> np.ndarray:
        X = self._check(X)
        return X[..., :self.state_dim_] + self.predict_residual(X)

    def residual_norms(self, X, y) -> np.ndarray:
        """Per-sample ``||s + f(s, a) - s'||``, the quantity the training loss squares."""
        return np.linalg.norm(self.predict(X) - np.asarray(y, dtype=np.float64), axis=-1)

    def jacobian(self, X) -> np.ndarray:
        """Raw-unit Jacobian of ``f`` w.r.t. ``[s | a]``."""
        X = self._check(X)
        jn = nn.jacobian(self.net_, (X - self.x_mean_) / self.x_scale_)
        return self.y_scale_[:, None] * jn / self.x_scale_

    def state_jacobian(self, X) -> np.ndarray:
        return self.jacobian(X)[..., :self.state_dim_]

    def local_lipschitz(self, s, a) -> np.ndarray:
        """Spectral norm of the state block of the Jacobian at ``(s, a)``.

        Actions are held fixed since corrective labels reuse the expert action.
        Accepts single vectors or batches of rows.
        """
        X = np.concatenate([np.asarray(s, dtype=np.float64), np.asarray(a, dtype=np.float64)], axis=-1)
        J = self.state_jacobian(X)
        if J.ndim == 2:
            return float(np.linalg.norm(J, 2))
        return np.linalg.norm(J, 2, axis=(1, 2))

    def network_lipschitz_bound(self) -> float:
        """Product of layer spectral norms with the standardisation folded in (raw units)."""
        check_is_fitted(self, "net_")
        scales = (self.x_scale_, self.y_scale_)
        return float(np.prod([np.linalg.norm(nn._effective(self.net_, i, scales), 2)
                              for i in range(self.net_.n_layers)]))

    # -- serialisation ------------------------------------------------
    def to_dict(self) -> dict:
        check_is_fitted(self, "net_")
        return {
            "format": MODEL_FORMAT,
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()},
            "state_dim": self.state_dim_,
            "action_dim": self.action_dim_,
            "lipschitz_cap": self.lipschitz_cap,
            "normalization": {"x_mean": self.x_mean_.tolist(), "x_scale": self.x_scale_.tolist(),
                              "y_mean": self.y_mean_.tolist(), "y_scale": self.y_scale_.tolist()},
            "eps_train": self.eps_train_,
            "eps_max": self.eps_max_,
            "eps_holdout": self.eps_holdout_,
            "net": self.net_.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResidualDynamics":
        if d.get("format") != MODEL_FORMAT:
            raise InputError(f"not a dynamics model record (format={d.get('format')!r})")
        params = dict(d["params"])
        params["hidden_sizes"] = tuple(params["hidden_sizes"])
        model = cls(**params)
        model.state_dim_ = d["state_dim"]
        model.action_dim_ = d["action_dim"]
        model.n_features_in_ = model.state_dim_ + model.action_dim_
        norm = d["normalization"]
        model.x_mean_, model.x_scale_ = np.array(norm["x_mean"]), np.array(norm["x_scale"])
        model.y_mean_, model.y_scale_ = np.array(norm["y_mean"]), np.array(norm["y_scale"])
        model.eps_train_, model.eps_max_ = d["eps_train"], d["eps_max"]
        model.eps_holdout_ = d.get("eps_holdout")
        model.net_ = nn.Mlp.from_dict(d["net"])
        return model

    @classmethod
    def from_network(cls, net: nn.Mlp, state_dim: int) -> "ResidualDynamics":
        """Wrap a raw-unit network ``[s | a] -> f(s, a)`` without training it."""
        if not 0 < state_dim < net.n_inputs or net.n_outputs != state_dim:
            raise InputError(f"network {net.n_inputs} -> {net.n_outputs} does not fit state_dim={state_dim}")
        model = cls(hidden_sizes=tuple(w.shape[0] for w in net.weights[:-1]), normalize=False)
        model.state_dim_, model.action_dim_ = state_dim, net.n_inputs - state_dim
        model.n_features_in_ = net.n_inputs
        model.x_mean_, model.x_scale_ = np.zeros(net.n_inputs), np.ones(net.n_inputs)
        model.y_mean_, model.y_scale_ = np.zeros(state_dim), np.ones(state_dim)
        model.net_ = net
        model.eps_train_ = model.eps_max_ = 0.0
        model.eps_holdout_ = None
        return model

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(nn.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ResidualDynamics":
        if not os.path.exists(path):
            raise InputError(f"no such model file: {path}")
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except (json.JSONDecodeError, KeyError) as exc:
                raise InputError(f"{path}: malformed dynamics model ({exc})") from exc


def train_dynamics(data: TrajectoryDataset, constraint: Optional[nn.SpectralConstraint] = None,
                   config: Optional[nn.TrainConfig] = None, **kwargs) -> ResidualDynamics:
    """Fit a :class:`ResidualDynamics` on every transition in ``data``."""
    if len(data) == 0:
        raise InputError("empty dataset")
    constraint = constraint or nn.SpectralConstraint()
    config = config or nn.TrainConfig(epochs=300, learning_rate=3e-3)
    model = ResidualDynamics(lipschitz_cap=constraint.cap, power_iters=constraint.power_iters,
                             epochs=config.epochs, batch_size=config.batch_size,
                             learning_rate=config.learning_rate, optimizer=config.optimizer,
                             seed=config.seed, **kwargs)
    return model.fit(*data.xy())


def quantile_summary(values: Iterable[float], bins: int = 20) -> dict:
    values = np.asarray(list(values), dtype=np.float64)
    counts, edges = np.histogram(values, bins=bins)
    return {
        "n": int(values.size),
        "mean": float(values.mean()),
        "q025": float(np.quantile(values, 0.025)),
        "q50": float(np.quantile(values, 0.5)),
        "q975": float(np.quantile(values, 0.975)),
        "hist_counts": counts.tolist(),
        "hist_edges": edges.tolist(),
    }


def lipschitz_distribution(model: ResidualDynamics, data: TrajectoryDataset, bins: int = 20) -> dict:
    """Local Lipschitz coefficient of every demonstration transition, summarised."""
    values = model.local_lipschitz(data.states, data.actions)
    summary = quantile_summary(values, bins)
    summary["values"] = values.tolist()
    return summary
