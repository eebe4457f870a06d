"""Behaviour-cloning policies trained on expert data plus accepted corrective labels."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import nn
from .exceptions import InputError

MODEL_FORMAT = "ccil.policy/1"
DEFAULT_POSE_WEIGHTS = (10.0, 1.0, 10.0)
POSE_DIM = 8  # xyz position, unit quaternion, gripper scalar


def _split_pose(a: np.ndarray):
    return a[..., 0:3], a[..., 3:7], a[..., 7]


def quaternion_angle(q, q_hat) -> np.ndarray:
    """Rotation angle between two orientations, in ``[0, pi]``.

    Uses ``|<q, q_hat>|`` so ``q`` and ``-q`` describe the same rotation.
    """
    q = np.asarray(q, dtype=np.float64)
    q_hat = np.asarray(q_hat, dtype=np.float64)
    nq = np.linalg.norm(q, axis=-1)
    nh = np.linalg.norm(q_hat, axis=-1)
    if np.any(nq == 0) or np.any(nh == 0):
        raise InputError("zero-norm quaternion")
    d = np.abs(np.sum(q * q_hat, axis=-1)) / (nq * nh)
    return 2.0 * np.arccos(np.clip(d, 0.0, 1.0))


def action_loss(a_target, a_pred, weights=DEFAULT_POSE_WEIGHTS, action_space: str = "pose"):
    """Per-sample action loss.

    Pose mode: ``w1 |x - x_hat|^2 + w2 theta^2 + w3 (c - c_hat)^2``. Raw mode:
    squared error weighted per action dimension (``weights=None`` means all ones).
    """
    a_target = np.asarray(a_target, dtype=np.float64)
    a_pred = np.asarray(a_pred, dtype=np.float64)
    if a_target.shape != a_pred.shape:
        raise InputError(f"target {a_target.shape} and prediction {a_pred.shape} differ")
    if action_space == "raw":
        w = np.ones(a_target.shape[-1]) if weights is None else np.asarray(weights, dtype=np.float64)
        return np.sum(w * (a_target - a_pred) ** 2, axis=-1)
    if action_space != "pose":
        raise InputError(f"unknown action space {action_space!r}")
    if a_target.shape[-1] != POSE_DIM:
        raise InputError(f"pose actions have {POSE_DIM} components, got {a_target.shape[-1]}")
    w1, w2, w3 = weights
    x, q, c = _split_pose(a_target)
    xh, qh, ch = _split_pose(a_pred)
    theta = quaternion_angle(q, qh)
    return w1 * np.sum((x - xh) ** 2, axis=-1) + w2 * theta ** 2 + w3 * (c - ch) ** 2


def _pose_loss(weights):
    w1, w2, w3 = weights

    def loss_fn(pred, target, sw):
        x, q, c = _split_pose(target)
        xh, qh, ch = _split_pose(pred)
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        nh = np.linalg.norm(qh, axis=1, keepdims=True)
        if np.any(nh == 0):
            raise InputError("predicted quaternion has zero norm")
        qn = qh / nh
        dot = np.sum(q * qn, axis=1)
        sign = np.where(dot < 0, -1.0, 1.0)
        d = np.clip(np.abs(dot), 0.0, 1.0)
        theta = 2.0 * np.arccos(d)
        per = w1 * np.sum((x - xh) ** 2, axis=1) + w2 * theta ** 2 + w3 * (c - ch) ** 2
        scale = sw / sw.sum()
        loss = float(np.sum(per * scale))

        s = np.sqrt(np.maximum(1.0 - d * d, 0.0))
        # d(theta^2)/dd tends to -8 as d -> 1
        dtheta2 = np.where(s > 1e-6, -4.0 * theta / np.where(s > 1e-6, s, 1.0), -8.0)
        dd_dqh = (sign[:, None] * q - d[:, None] * qn) / nh
        grad = np.zeros_like(pred)
        grad[:, 0:3] = -2.0 * w1 * (x - xh)
        grad[:, 3:7] = w2 * dtheta2[:, None] * dd_dqh
        grad[:, 7] = -2.0 * w3 * (c - ch)
        return loss, grad * scale[:, None]

    return loss_fn


@dataclass
class AugmentedDataset:
    """Expert pairs unioned with generated pairs (no deduplication)."""

    expert_states: np.ndarray
    expert_actions: np.ndarray
    generated_states: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    generated_actions: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    generated_weight: float = 1.0

    @classmethod
    def from_labels(cls, data, labels=(), generated_weight: float = 1.0) -> "AugmentedDataset":
        labels = list(labels)
        ds, da = data.state_dim, data.action_dim
        gs = np.array([lab.s_g for lab in labels]).reshape(-1, ds)
        ga = np.array([lab.a_g for lab in labels]).reshape(-1, da)
        return cls(data.states, data.actions, gs, ga, generated_weight)

    def __len__(self) -> int:
        return len(self.expert_states) + len(self.generated_states)

    def xy(self) -> tuple:
        n_gen = len(self.generated_states)
        if n_gen:
            X = np.vstack([self.expert_states, self.generated_states])
            y = np.vstack([self.expert_actions, self.generated_actions])
        else:
            X, y = self.expert_states, self.expert_actions
        w = np.concatenate([np.ones(len(self.expert_states)), np.full(n_gen, self.generated_weight)])
        return X, y, w


class BCPolicy(BaseEstimator, RegressorMixin):
    """MLP policy ``state -> action`` fit by weighted action-loss regression.

    Raw-vector actions are standardised for training and trained with plain
    squared error; pose actions use the composite position/rotation/gripper loss.
    """

    def __init__(self, hidden_sizes=(64, 64), action_space="raw", loss_weights=None,
                 epochs=300, batch_size=64, learning_rate=3e-3, weight_decay=0.0, seed=0):
        self.hidden_sizes = hidden_sizes
        self.action_space = action_space
        self.loss_weights = loss_weights
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, X, y, sample_weight=None):
        if np.shape(X)[0] == 0:
            raise InputError("empty policy dataset")
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        if X.shape[0] != y.shape[0]:
            raise InputError(f"need matching non-empty X {X.shape} and y {y.shape}")
        if self.action_space not in ("raw", "pose"):
            raise InputError(f"unknown action space {self.action_space!r}")
        self.n_features_in_ = X.shape[1]
        self.action_dim_ = y.shape[1]
        self.x_mean_ = X.mean(axis=0)
        self.x_scale_ = np.where(X.std(axis=0) > 1e-8, X.std(axis=0), 1.0)
        if self.action_space == "raw":
            self.y_mean_ = y.mean(axis=0)
            self.y_scale_ = np.where(y.std(axis=0) > 1e-8, y.std(axis=0), 1.0)
            w = np.ones(y.shape[1]) if self.loss_weights is None else np.asarray(self.loss_weights, dtype=float)
            loss_fn = _weighted_mse(w)
        else:
            if y.shape[1] != POSE_DIM:
                raise InputError(f"pose actions have {POSE_DIM} components, got {y.shape[1]}")
            self.y_mean_ = np.zeros(POSE_DIM)
            self.y_scale_ = np.ones(POSE_DIM)
            loss_fn = _pose_loss(self.loss_weights or DEFAULT_POSE_WEIGHTS)
        sizes = [X.shape[1], *self.hidden_sizes, y.shape[1]]
        self.net_ = nn.Mlp.init(sizes, seed=self.seed)
        config = nn.TrainConfig(seed=self.seed, epochs=self.epochs, batch_size=self.batch_size,
                                learning_rate=self.learning_rate, weight_decay=self.weight_decay)
        self.loss_history_ = nn.train(self.net_, (X - self.x_mean_) / self.x_scale_,
                                      (y - self.y_mean_) / self.y_scale_, config, loss_fn=loss_fn,
                                      sample_weight=sample_weight)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features_in_:
            raise InputError(f"expected {self.n_features_in_} state features, got {X.shape[-1]}")
        out = self.y_mean_ + self.y_scale_ * nn.forward(self.net_, (X - self.x_mean_) / self.x_scale_)
        if self.action_space == "pose":
            out = np.array(out, copy=True)
            q = out[..., 3:7]
            out[..., 3:7] = q / np.linalg.norm(q, axis=-1, keepdims=True)
        return out

    def act(self, s) -> np.ndarray:
        return self.predict(s)

    __call__ = act

    def score(self, X, y, sample_weight=None) -> float:
        """Negative mean action loss."""
        weights = self.loss_weights
        if self.action_space == "pose":
            weights = weights or DEFAULT_POSE_WEIGHTS
        loss = action_loss(y, self.predict(X), weights, self.action_space)
        return -float(np.average(loss, weights=sample_weight))

    def to_dict(self) -> dict:
        check_is_fitted(self, "net_")
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()}
        return {
            "format": MODEL_FORMAT,
            "params": params,
            "action_space": self.action_space,
            "normalization": {"x_mean": self.x_mean_.tolist(), "x_scale": self.x_scale_.tolist(),
                              "y_mean": self.y_mean_.tolist(), "y_scale": self.y_scale_.tolist()},
            "net": self.net_.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BCPolicy":
        if d.get("format") != MODEL_FORMAT:
            raise InputError(f"not a policy record (format={d.get('format')!r})")
        params = dict(d["params"])
        params["hidden_sizes"] = tuple(params["hidden_sizes"])
        if params.get("loss_weights") is not None:
            params["loss_weights"] = tuple(params["loss_weights"])
        pol = cls(**params)
        norm = d["normalization"]
        pol.x_mean_, pol.x_scale_ = np.array(norm["x_mean"]), np.array(norm["x_scale"])
        pol.y_mean_, pol.y_scale_ = np.array(norm["y_mean"]), np.array(norm["y_scale"])
        pol.net_ = nn.Mlp.from_dict(d["net"])
        pol.n_features_in_ = pol.net_.n_inputs
        pol.action_dim_ = pol.net_.n_outputs
        return pol

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(nn.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "BCPolicy":
        if not os.path.exists(path):
            raise InputError(f"no such policy file: {path}")
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except (json.JSONDecodeError, KeyError) as exc:
                raise InputError(f"{path}: malformed policy ({exc})") from exc


def _weighted_mse(dim_weights: np.ndarray):
    def loss_fn(pred, target, sw):
        diff = pred - target
        scale = sw / sw.sum()
        loss = float(np.sum(scale * np.sum(dim_weights * diff ** 2, axis=1)))
        return loss, 2.0 * dim_weights * diff * scale[:, None]
    return loss_fn


def train_policy(data: AugmentedDataset, config: Optional[nn.TrainConfig] = None, **kwargs) -> BCPolicy:
    """Fit a :class:`BCPolicy` on the union of expert and generated pairs."""
    if len(data) == 0:
        raise InputError("empty policy dataset")
    config = config or nn.TrainConfig(epochs=300, learning_rate=3e-3)
    X, y, w = data.xy()
    pol = BCPolicy(epochs=config.epochs, batch_size=config.batch_size, learning_rate=config.learning_rate,
                   weight_decay=config.weight_decay, seed=config.seed, **kwargs)
    return pol.fit(X, y, sample_weight=w)
