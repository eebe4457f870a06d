"""BackTrack corrective labels and error-bound filtering."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dynamics import ResidualDynamics, TrajectoryDataset
from .exceptions import ConfigurationError, InputError


@dataclass
class CorrectiveLabel:
    s_g: np.ndarray
    a_g: np.ndarray
    source_index: tuple
    label_distance: float
    error_bound: float
    lipschitz: float
    accepted: Optional[bool] = None
    contact: Optional[bool] = None

    def to_record(self) -> dict:
        rec = {
            "traj": int(self.source_index[0]),
            "t": int(self.source_index[1]),
            "s": self.s_g.tolist(),
            "a": self.a_g.tolist(),
            "distance": self.label_distance,
            "lipschitz": self.lipschitz,
            "bound": self.error_bound,
            "accepted": self.accepted,
            "source": [int(self.source_index[0]), int(self.source_index[1])],
        }
        if self.contact is not None:
            rec["contact"] = bool(self.contact)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "CorrectiveLabel":
        return cls(np.asarray(rec["s"], dtype=np.float64), np.asarray(rec["a"], dtype=np.float64),
                   tuple(rec["source"]), float(rec["distance"]), float(rec["bound"]),
                   float(rec["lipschitz"]), rec.get("accepted"), rec.get("contact"))


def gen_labels(model: ResidualDynamics, data: TrajectoryDataset) -> list:
    """One BackTrack label per expert transition: ``s_g = s* - f(s*, a*)``, ``a_g = a*``.

    ``error_bound`` is the local Lipschitz coefficient at the source times the
    label distance.
    """
    if data.state_dim != model.state_dim_ or data.action_dim != model.action_dim_:
        raise InputError(f"data dims ({data.state_dim}, {data.action_dim}) do not match model "
                         f"({model.state_dim_}, {model.action_dim_})")
    S, A = data.states, data.actions
    # row by row, so recomputing one label from its source transition is bit-exact
    delta = np.array([model.predict_residual(np.concatenate([s, a])) for s, a in zip(S, A)])
    s_g = S - delta
    dist = np.linalg.norm(delta, axis=1)
    lip = model.local_lipschitz(S, A)
    bound = lip * dist
    contact = [tr.contact for traj in data.trajectories for tr in traj]
    return [CorrectiveLabel(s_g[i], A[i].copy(), idx, float(dist[i]), float(bound[i]), float(lip[i]),
                            None, contact[i])
            for i, idx in enumerate(data.index)]


@dataclass
class FilterConfig:
    """Exactly one of ``quantile`` or ``threshold`` is set."""

    quantile: Optional[float] = None
    threshold: Optional[float] = None
    strict_eps: float = 0.0

    def __post_init__(self):
        if (self.quantile is None) == (self.threshold is None):
            raise ConfigurationError("set exactly one of quantile / threshold")
        if self.quantile is not None and not 0.0 <= self.quantile <= 1.0:
            raise InputError(f"quantile must lie in [0, 1], got {self.quantile}")
        if self.threshold is not None and not self.threshold > 0:
            raise InputError(f"threshold must be positive, got {self.threshold}")


def _sort_order(bounds: np.ndarray, index: list) -> np.ndarray:
    keys = [(b, k, t) for b, (k, t) in zip(bounds.tolist(), index)]
    return np.array(sorted(range(len(keys)), key=keys.__getitem__), dtype=int)


class LabelFilter(BaseEstimator):
    """Quantile or absolute threshold on label error bounds.

    In quantile mode ``fit`` ranks the bounds by ``(bound, trajectory, step)``
    and sets ``threshold_`` to the bound ranked just after the first
    ``ceil(q * n)`` (``inf`` when that covers everything). Acceptance is
    ``bound < threshold_``, so a tie at the cut rejects the whole tied group.
    Non-finite bounds are always rejected.
    """

    def __init__(self, quantile=None, threshold=None, strict_eps=0.0):
        self.quantile = quantile
        self.threshold = threshold
        self.strict_eps = strict_eps

    def fit(self, bounds, index=None):
        cfg = FilterConfig(self.quantile, self.threshold, self.strict_eps)
        bounds = np.asarray(bounds, dtype=np.float64) + cfg.strict_eps
        if bounds.size == 0:
            raise InputError("no labels to filter")
        index = index if index is not None else [(0, i) for i in range(bounds.size)]
        finite = np.isfinite(bounds)
        if cfg.threshold is not None:
            self.threshold_ = float(cfg.threshold)
            self.accepted_ = finite & (bounds < self.threshold_)
            return self
        order = [i for i in _sort_order(np.where(finite, bounds, np.inf), index) if finite[i]]
        n_accept = min(math.ceil(cfg.quantile * bounds.size - 1e-9), len(order))
        self.threshold_ = float(bounds[order[n_accept]]) if n_accept < len(order) else math.inf
        # ties straddling the cut are all rejected
        self.accepted_ = finite & (bounds < self.threshold_)
        return self

    def predict(self, bounds) -> np.ndarray:
        check_is_fitted(self, "threshold_")
        bounds = np.asarray(bounds, dtype=np.float64) + self.strict_eps
        return np.isfinite(bounds) & (bounds < self.threshold_)


def filter_labels(labels: list, cfg: FilterConfig) -> tuple:
    """Mark each label accepted or rejected; return ``(accepted, rejected)``.

    Labels with non-finite states are rejected unconditionally.
    """
    if not labels:
        raise InputError("no labels to filter")
    bounds = np.array([lab.error_bound if np.isfinite(lab.s_g).all() else np.nan for lab in labels])
    filt = LabelFilter(cfg.quantile, cfg.threshold, cfg.strict_eps)
    mask = filt.fit(bounds, [lab.source_index for lab in labels]).accepted_
    accepted, rejected = [], []
    for lab, ok in zip(labels, mask):
        lab.accepted = bool(ok)
        (accepted if ok else rejected).append(lab)
    return accepted, rejected


def label_error_cdf(labels: list, quantiles=(0.1, 0.25, 0.5, 0.75, 0.8, 0.9, 0.95, 1.0)) -> dict:
    """Empirical CDF of label error bounds plus a quantile table."""
    if not labels:
        raise InputError("no labels")
    bounds = np.sort(np.array([lab.error_bound for lab in labels], dtype=np.float64))
    cdf = np.arange(1, bounds.size + 1) / bounds.size
    return {
        "bounds": bounds.tolist(),
        "cdf": cdf.tolist(),
        "quantiles": {f"{q:g}": float(np.quantile(bounds, q)) for q in quantiles},
        "mean": float(bounds.mean()),
    }


def write_labels(labels: list, path) -> None:
    with open(path, "w") as fh:
        for lab in labels:
            fh.write(json.dumps(lab.to_record()) + "\n")


def read_labels(path) -> list:
    if not os.path.exists(path):
        raise InputError(f"no such label file: {path}")
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(CorrectiveLabel.from_record(json.loads(line)))
                except (KeyError, TypeError, ValueError) as exc:
                    raise InputError(f"{path}:{lineno}: bad label record ({exc})") from exc
    return out
