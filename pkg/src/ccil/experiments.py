"""Ablation harness: paired BC vs BC+CCIL evaluation over data size, quantile and cap grids."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from . import __version__, nn
from .dynamics import ResidualDynamics, TrajectoryDataset, quantile_summary
from .envs import collect, evaluate, make_env, scripted_expert
from .exceptions import CCILError, ConfigurationError, InputError
from .labeler import FilterConfig, filter_labels, gen_labels, label_error_cdf
from .policy import AugmentedDataset, BCPolicy

SIGNIFICANCE_LEVELS = ((0.001, "****"), (0.01, "***"), (0.05, "**"), (0.1, "*"))
TRIAL_CAVEAT = ("trials from a shared initial-condition grid are treated as independent "
                "Bernoulli draws in the z-test")
SEED_SCHEME = "sha256(json([master_seed, *cell_coordinates, stage]))[:8] big-endian mod 2**32"

# weight decay picks a consistent state/action attribution when expert actions are
# (nearly) a function of the state, which keeps Lipschitz estimates comparable across caps
DEFAULT_DYNAMICS = {"weight_decay": 1e-2}
_DYNAMICS_KEYS = {"hidden_sizes", "epochs", "batch_size", "learning_rate", "weight_decay", "power_iters"}
_POLICY_KEYS = {"hidden_sizes", "epochs", "batch_size", "learning_rate", "weight_decay"}


def derive_seed(master_seed: int, *coords) -> int:
    """Stable 32-bit sub-seed for one stage of one cell; see ``SEED_SCHEME``."""
    blob = json.dumps([int(master_seed), *coords], separators=(",", ":")).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") % (2 ** 32)


def _cap_key(cap: Optional[float]):
    return None if cap is None else float(cap)


def _cap_label(cap: Optional[float]) -> str:
    return "inf" if cap is None else f"{cap:g}"


def _parse_cap(value):
    if value is None or (isinstance(value, str) and value.lower() in ("inf", "none", "unbounded")):
        return None
    value = float(value)
    if math.isinf(value):
        return None
    if not value > 0:
        raise ConfigurationError(f"Lipschitz caps must be positive or unbounded, got {value}")
    return value


@dataclass
class AblationConfig:
    """Everything a run depends on. ``caps`` entries of ``None`` mean unbounded."""

    env: str = "wallgrasp"
    sizes: list = field(default_factory=lambda: [5])
    quantiles: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.8, 1.0])
    caps: list = field(default_factory=lambda: [1.0, 4.0, None])
    trials: int = 48
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    master_seed: int = 0
    noise_scale: float = 1.0
    dynamics: dict = field(default_factory=lambda: dict(DEFAULT_DYNAMICS))
    policy: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("sizes", "quantiles", "caps", "seeds"):
            value = getattr(self, name)
            if not isinstance(value, (list, tuple)) or len(value) == 0:
                raise ConfigurationError(f"{name} must be a non-empty list")
        self.sizes = [int(n) for n in self.sizes]
        self.seeds = [int(s) for s in self.seeds]
        self.quantiles = [float(q) for q in self.quantiles]
        self.caps = [_parse_cap(c) for c in self.caps]
        if any(n < 1 for n in self.sizes):
            raise ConfigurationError("data sizes must be >= 1 trajectory")
        if any(not 0.0 <= q <= 1.0 for q in self.quantiles):
            raise ConfigurationError("quantiles must lie in [0, 1]")
        if int(self.trials) < 30:
            raise ConfigurationError(f"trials per cell must be >= 30 for the z-test, got {self.trials}")
        self.trials = int(self.trials)
        if self.noise_scale < 0:
            raise ConfigurationError("noise_scale must be non-negative")
        self.dynamics = {**DEFAULT_DYNAMICS, **self.dynamics}
        for name, allowed in (("dynamics", _DYNAMICS_KEYS), ("policy", _POLICY_KEYS)):
            extra = set(getattr(self, name)) - allowed
            if extra:
                raise ConfigurationError(f"unknown {name} hyperparameters: {sorted(extra)}")
        make_env(self.env)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AblationConfig":
        if not isinstance(d, dict):
            raise ConfigurationError("config must be a JSON object")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, CCILError):
                raise
            raise ConfigurationError(f"bad config value: {exc}") from exc

    @classmethod
    def load(cls, path) -> "AblationConfig":
        if not os.path.exists(path):
            raise InputError(f"no such config file: {path}")
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc

    def canonical_json(self) -> str:
        return nn.dumps(self.to_dict())

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


# -- statistics -------------------------------------------------------------

def z_test(successes_a: int, successes_b: int, n: int) -> tuple:
    """Pooled two-proportion z statistic and two-sided p-value, ``n`` trials per arm.

    Positive ``z`` means arm ``a`` succeeded more often.
    """
    for v in (successes_a, successes_b, n):
        if int(v) != v:
            raise InputError(f"counts must be integers, got {v!r}")
    if n < 1:
        raise InputError("z-test needs n >= 1 trials per arm")
    if not (0 <= successes_a <= n and 0 <= successes_b <= n):
        raise InputError(f"success counts ({successes_a}, {successes_b}) must lie in [0, {n}]")
    pa, pb = successes_a / n, successes_b / n
    pooled = (successes_a + successes_b) / (2 * n)
    se = math.sqrt(pooled * (1.0 - pooled) * 2.0 / n)
    if se == 0.0:
        return 0.0, 1.0
    z = (pa - pb) / se
    return z, math.erfc(abs(z) / math.sqrt(2.0))


def significance_stars(p: float) -> str:
    for level, stars in SIGNIFICANCE_LEVELS:
        if p < level:
            return stars
    return "ns"


# -- continuity analysis ---------------------------------------------------

def analyze_continuity(model: ResidualDynamics, data: TrajectoryDataset, bins: int = 20) -> dict:
    """Local Lipschitz and label-bound distributions, split by the contact flag when present."""
    labels = gen_labels(model, data)
    lip = np.array([lab.lipschitz for lab in labels])
    bound = np.array([lab.error_bound for lab in labels])
    out = {
        "lipschitz": quantile_summary(lip, bins),
        "label_bounds": quantile_summary(bound, bins),
        "label_cdf": label_error_cdf(labels),
        "eps_train": model.eps_train_,
        "eps_max": model.eps_max_,
        "contact_split": None,
    }
    contact = data.contact
    if contact.any() and (~contact).any():
        split = {}
        for name, values in (("lipschitz", lip), ("bound", bound)):
            c, f = values[contact], values[~contact]
            welch = stats.ttest_ind(c, f, equal_var=False) if min(len(c), len(f)) > 1 else None
            split[name] = {
                "contact_mean": float(c.mean()),
                "free_mean": float(f.mean()),
                "welch_t": None if welch is None else float(welch.statistic),
                "welch_p": None if welch is None else float(welch.pvalue),
            }
        split["n_contact"] = int(contact.sum())
        split["n_free"] = int((~contact).sum())
        out["contact_split"] = split
    return out


# -- cells ----------------------------------------------------------------

class _SeedRun:
    """All stages for one (seed, data size), memoised so cells share what they should.

    Demonstrations, the BC policy and the evaluation noise depend only on
    (seed, size); dynamics and labels add the cap; the augmented policy adds
    the quantile. Both policies use the same training seed, so a cell with no
    accepted labels reproduces BC exactly.
    """

    def __init__(self, config: AblationConfig, seed: int, size: int):
        self.config = config
        self.env = make_env(config.env)
        self.seed, self.size = seed, size
        self._labels = {}
        self._dyn = {}
        coords = (seed, size)
        self.data = collect(self.env, scripted_expert(self.env), size,
                            seed=derive_seed(config.master_seed, *coords, "collect"))
        self.policy_seed = derive_seed(config.master_seed, *coords, "policy")
        self.eval_seed = derive_seed(config.master_seed, *coords, "evaluate")
        bc = self._policy(self.data.states, self.data.actions)
        self.bc_successes = self._evaluate(bc)

    def _policy(self, X, y, w=None) -> BCPolicy:
        return BCPolicy(seed=self.policy_seed, **self._hp(self.config.policy)).fit(X, y, sample_weight=w)

    @staticmethod
    def _hp(d: dict) -> dict:
        d = dict(d)
        if "hidden_sizes" in d:
            d["hidden_sizes"] = tuple(d["hidden_sizes"])
        return d

    def _evaluate(self, policy) -> int:
        res = evaluate(self.env, policy, self.config.trials, self.config.noise_scale, self.eval_seed)
        return res.successes

    def dynamics(self, cap):
        key = _cap_key(cap)
        if key not in self._dyn:
            seed = derive_seed(self.config.master_seed, self.seed, self.size, _cap_label(cap), "dynamics")
            model = ResidualDynamics(lipschitz_cap=cap, seed=seed, **self._hp(self.config.dynamics))
            self._dyn[key] = model.fit(*self.data.xy())
            self._labels[key] = gen_labels(self._dyn[key], self.data)
        return self._dyn[key], self._labels[key]

    def cell(self, cap, q) -> dict:
        _, labels = self.dynamics(cap)
        accepted, _ = filter_labels(labels, FilterConfig(quantile=q))
        if accepted:
            X, y, w = AugmentedDataset.from_labels(self.data, accepted).xy()
            ccil = self._evaluate(self._policy(X, y, w))
        else:
            ccil = self.bc_successes
        return {"seed": self.seed, "bc": self.bc_successes, "ccil": ccil,
                "n_labels": len(labels), "n_accepted": len(accepted)}

    def summaries(self, cap) -> dict:
        model, labels = self.dynamics(cap)
        lip = np.array([lab.lipschitz for lab in labels])
        bound = np.array([lab.error_bound for lab in labels])
        contact = self.data.contact
        return {"lipschitz": lip, "bounds": bound, "contact": contact,
                "eps_train": model.eps_train_, "eps_max": model.eps_max_}


def _wrap(exc: Exception, context: str) -> CCILError:
    new = type(exc)(f"[{context}] {exc}") if isinstance(exc, CCILError) else CCILError(f"[{context}] {exc}")
    new.__cause__ = exc
    return new


def run_cell(env: str, n_traj: int, cap: Optional[float], q: float, config: AblationConfig) -> tuple:
    """Pooled ``(bc_successes, ccil_successes, trials)`` for one cell over ``config.seeds``."""
    cfg = AblationConfig.from_dict({**config.to_dict(), "env": env, "sizes": [n_traj],
                                    "caps": [cap], "quantiles": [q]})
    bc = ccil = 0
    for seed in cfg.seeds:
        try:
            row = _SeedRun(cfg, seed, n_traj).cell(cfg.caps[0], q)
        except CCILError as exc:
            raise _wrap(exc, f"cell env={env} n={n_traj} K={_cap_label(cap)} q={q:g} seed={seed}") from exc
        bc += row["bc"]
        ccil += row["ccil"]
    return bc, ccil, cfg.trials * len(cfg.seeds)


def _run_unit(args) -> dict:
    config_dict, seed, size = args
    config = AblationConfig.from_dict(config_dict)
    context = f"env={config.env} n={size} seed={seed}"
    try:
        run = _SeedRun(config, seed, size)
        cells = {}
        summaries = {}
        for cap in config.caps:
            summaries[_cap_label(cap)] = run.summaries(cap)
            for q in config.quantiles:
                cells[(_cap_label(cap), q)] = run.cell(cap, q)
    except CCILError as exc:
        raise _wrap(exc, context) from exc
    return {"seed": seed, "size": size, "cells": cells, "summaries": summaries}


# -- report -----------------------------------------------------------------

@dataclass
class AblationReport:
    config: dict
    cells: list
    lipschitz: list
    label_cdfs: list
    provenance: dict

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AblationReport":
        try:
            return cls(d["config"], d["cells"], d["lipschitz"], d["label_cdfs"], d["provenance"])
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed report ({exc})") from exc

    def to_json(self) -> str:
        return nn.dumps(self.to_dict())

    @classmethod
    def load(cls, path) -> "AblationReport":
        if not os.path.exists(path):
            raise InputError(f"no such report: {path}")
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: not valid JSON ({exc})") from exc

    def cell(self, size: int, quantile: float, cap) -> dict:
        cap = _parse_cap(cap)
        for c in self.cells:
            if c["size"] == size and c["quantile"] == quantile and _parse_cap(c["cap"]) == cap:
                return c
        raise KeyError((size, quantile, cap))


def _contact_split(lip, bound, contact) -> Optional[dict]:
    if not contact.any() or contact.all():
        return None
    return {"n_contact": int(contact.sum()), "n_free": int((~contact).sum()),
            "lipschitz_contact_mean": float(lip[contact].mean()),
            "lipschitz_free_mean": float(lip[~contact].mean()),
            "bound_contact_mean": float(bound[contact].mean()),
            "bound_free_mean": float(bound[~contact].mean())}


def _assemble(config: AblationConfig, units: list) -> AblationReport:
    by_key = {(u["seed"], u["size"]): u for u in units}
    pooled_n = config.trials * len(config.seeds)
    cells, lipschitz, cdfs = [], [], []
    for size in config.sizes:
        for cap in config.caps:
            label = _cap_label(cap)
            per_seed = [by_key[(seed, size)]["summaries"][label] for seed in config.seeds]
            lip = np.concatenate([s["lipschitz"] for s in per_seed])
            bound = np.concatenate([s["bounds"] for s in per_seed])
            contact = np.concatenate([s["contact"] for s in per_seed])
            entry = {"size": size, "cap": cap, "summary": quantile_summary(lip),
                     "per_seed_mean": [float(s["lipschitz"].mean()) for s in per_seed],
                     "per_seed_eps_train": [s["eps_train"] for s in per_seed],
                     "per_seed_eps_max": [s["eps_max"] for s in per_seed],
                     "contact_split": _contact_split(lip, bound, contact),
                     "per_seed_contact_split": [_contact_split(s["lipschitz"], s["bounds"], s["contact"])
                                                for s in per_seed]}
            lipschitz.append(entry)
            b = np.sort(bound)
            cdfs.append({"size": size, "cap": cap, "bounds": b.tolist(),
                         "cdf": (np.arange(1, b.size + 1) / b.size).tolist(),
                         "mean": float(b.mean())})
            for q in config.quantiles:
                rows = [by_key[(seed, size)]["cells"][(label, q)] for seed in config.seeds]
                bc = sum(r["bc"] for r in rows)
                ccil = sum(r["ccil"] for r in rows)
                z, p = z_test(ccil, bc, pooled_n)
                cells.append({"size": size, "cap": cap, "quantile": q, "trials": pooled_n,
                              "bc_successes": bc, "ccil_successes": ccil,
                              "bc_rate": bc / pooled_n, "ccil_rate": ccil / pooled_n,
                              "z": z, "p": p, "stars": significance_stars(p),
                              "per_seed": rows})
    provenance = {"config_sha256": config.sha256(), "seeds": list(config.seeds),
                  "master_seed": config.master_seed, "version": f"ccil {__version__}",
                  "seed_scheme": SEED_SCHEME, "caveat": TRIAL_CAVEAT,
                  "initial_conditions": make_env(config.env).initial_grid().tolist()}
    return AblationReport(config.to_dict(), cells, lipschitz, cdfs, provenance)


def run_ablation(config: AblationConfig, workers: int = 1) -> AblationReport:
    """Run every cell of ``config``; the report is a pure function of the config.

    ``workers > 1`` spreads (seed, size) units over processes; results are
    merged in a fixed order so the report does not depend on ``workers``.
    """
    jobs = [(config.to_dict(), seed, size) for size in config.sizes for seed in config.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            units = list(pool.map(_run_unit, jobs))
    else:
        units = [_run_unit(job) for job in jobs]
    return _assemble(config, units)


CSV_COLUMNS = ("size", "cap", "quantile", "trials", "bc_successes", "ccil_successes",
               "bc_rate", "ccil_rate", "z", "p", "stars")


def emit_report(report: AblationReport, path) -> list:
    """Write ``report.json``, ``cells.csv`` and per-(size, cap) CDF / histogram files into ``path``."""
    os.makedirs(path, exist_ok=True)
    written = []

    def target(name):
        p = os.path.join(path, name)
        written.append(p)
        return p

    with open(target("report.json"), "w") as fh:
        fh.write(report.to_json())
    with open(target("cells.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for c in report.cells:
            w.writerow([_cap_label(c["cap"]) if k == "cap" else c[k] for k in CSV_COLUMNS])
    for cdf in report.label_cdfs:
        with open(target(f"label_cdf_n{cdf['size']}_K{_cap_label(cdf['cap'])}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("bound", "cdf"))
            w.writerows(zip(cdf["bounds"], cdf["cdf"]))
    for entry in report.lipschitz:
        s = entry["summary"]
        with open(target(f"lipschitz_hist_n{entry['size']}_K{_cap_label(entry['cap'])}.csv"), "w",
                  newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("bin_left", "bin_right", "count"))
            edges = s["hist_edges"]
            w.writerows(zip(edges[:-1], edges[1:], s["hist_counts"]))
    with open(target("lipschitz_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("size", "cap", "n", "mean", "q025", "q50", "q975"))
        for entry in report.lipschitz:
            s = entry["summary"]
            w.writerow((entry["size"], _cap_label(entry["cap"]), s["n"], s["mean"], s["q025"], s["q50"], s["q975"]))
    return written


def format_table(report: AblationReport) -> str:
    lines = [f"{'size':>5} {'cap':>5} {'q':>5} {'BC':>9} {'CCIL':>9} {'z':>7} {'p':>9}  sig"]
    for c in report.cells:
        n = c["trials"]
        lines.append(f"{c['size']:>5} {_cap_label(c['cap']):>5} {c['quantile']:>5g} "
                     f"{c['bc_successes']:>4}/{n:<4} {c['ccil_successes']:>4}/{n:<4} "
                     f"{c['z']:>7.2f} {c['p']:>9.2e}  {c['stars']}")
    lines.append(f"note: {report.provenance['caveat']}")
    return "\n".join(lines)
