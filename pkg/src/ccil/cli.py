"""Command-line entry point; every stage reads and writes files only."""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import nn
from .dynamics import ResidualDynamics, TrajectoryDataset, lipschitz_distribution
from .envs import collect, evaluate, make_env, scripted_expert
from .exceptions import (CCILError, ConfigurationError, EnvironmentMisconfigured, InputError,
                         TrainingError)
from .experiments import (AblationConfig, AblationReport, analyze_continuity, emit_report,
                          format_table, run_ablation)
from .labeler import FilterConfig, filter_labels, gen_labels, read_labels, write_labels
from .policy import AugmentedDataset, BCPolicy

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_CONFIG = 4
EXIT_TRAINING = 5
EXIT_ENV = 6
EXIT_IO = 7


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: usage error: {message}\n")


def _hidden(text: str) -> tuple:
    try:
        sizes = tuple(int(h) for h in text.split(",") if h.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"hidden sizes must be comma-separated integers, got {text!r}")
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError("hidden sizes must be positive")
    return sizes


def _cap(text: str):
    if text.lower() in ("inf", "none"):
        return None
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"cap must be a positive number or 'inf', got {text!r}")
    if not value > 0:
        raise argparse.ArgumentTypeError("cap must be positive")
    return None if np.isinf(value) else value


def _existing(path: str) -> str:
    if not os.path.exists(path):
        raise InputError(f"input file not found: {path}")
    return path


def _out_dir_ok(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise OSError(f"output directory does not exist: {parent}")


def _write_json(path, record) -> None:
    with open(path, "w") as fh:
        fh.write(nn.dumps(record))


# -- subcommands ----------------------------------------------------------

def cmd_collect(args) -> None:
    env = make_env(args.env)
    if args.n < 1:
        raise InputError("--n must be >= 1")
    _out_dir_ok(args.out)
    data = collect(env, scripted_expert(env), args.n, seed=args.seed)
    data.to_jsonl(args.out)
    print(f"wrote {data.n_trajectories} trajectories ({len(data)} transitions) to {args.out}")


def cmd_train_dynamics(args) -> None:
    data = TrajectoryDataset.from_jsonl(_existing(args.data))
    _out_dir_ok(args.out)
    model = ResidualDynamics(hidden_sizes=args.hidden, lipschitz_cap=args.cap, epochs=args.epochs,
                             learning_rate=args.lr, weight_decay=args.weight_decay, seed=args.seed)
    model.fit(*data.xy())
    model.save(args.out)
    print(f"eps_train={model.eps_train_:.6g} eps_max={model.eps_max_:.6g} -> {args.out}")


def cmd_analyze_continuity(args) -> None:
    model = ResidualDynamics.load(_existing(args.model))
    data = TrajectoryDataset.from_jsonl(_existing(args.data))
    _out_dir_ok(args.out)
    result = analyze_continuity(model, data, bins=args.bins)
    result["lipschitz_values"] = lipschitz_distribution(model, data, bins=args.bins)["values"]
    _write_json(args.out, result)
    lip = result["lipschitz"]
    print(f"local Lipschitz mean={lip['mean']:.4g} [q2.5={lip['q025']:.4g}, q97.5={lip['q975']:.4g}]")
    split = result["contact_split"]
    if split:
        for key in ("lipschitz", "bound"):
            s = split[key]
            print(f"{key}: contact={s['contact_mean']:.4g} free={s['free_mean']:.4g} welch p={s['welch_p']:.3g}")


def cmd_gen_labels(args) -> None:
    model = ResidualDynamics.load(_existing(args.model))
    data = TrajectoryDataset.from_jsonl(_existing(args.data))
    cfg = FilterConfig(quantile=args.quantile, threshold=args.threshold)
    _out_dir_ok(args.out)
    labels = gen_labels(model, data)
    accepted, _ = filter_labels(labels, cfg)
    write_labels(labels, args.out)
    print(f"accepted {len(accepted)}/{len(labels)} labels -> {args.out}")


def cmd_train_policy(args) -> None:
    data = TrajectoryDataset.from_jsonl(_existing(args.data))
    labels = []
    if args.labels:
        labels = [lab for lab in read_labels(_existing(args.labels)) if lab.accepted]
    _out_dir_ok(args.out)
    aug = AugmentedDataset.from_labels(data, labels, generated_weight=args.generated_weight)
    X, y, w = aug.xy()
    policy = BCPolicy(hidden_sizes=args.hidden, epochs=args.epochs, learning_rate=args.lr,
                      weight_decay=args.weight_decay, seed=args.seed)
    policy.fit(X, y, sample_weight=w)
    policy.save(args.out)
    print(f"trained on {len(data)} expert + {len(labels)} generated pairs -> {args.out}")


def cmd_evaluate(args) -> None:
    env = make_env(args.env)
    policy = BCPolicy.load(_existing(args.policy))
    if policy.n_features_in_ != env.state_dim or policy.action_dim_ != env.action_dim:
        raise InputError(f"policy dims ({policy.n_features_in_} -> {policy.action_dim_}) do not fit "
                         f"{env.name} ({env.state_dim} -> {env.action_dim})")
    if args.trials < 1:
        raise InputError("--trials must be >= 1")
    if args.noise < 0:
        raise InputError("--noise must be non-negative")
    if args.out:
        _out_dir_ok(args.out)
    res = evaluate(env, policy, args.trials, args.noise, args.seed)
    record = {"env": env.name, "trials": res.n_trials, "successes": res.successes,
              "success_rate": res.success_rate, "noise_scale": args.noise, "seed": args.seed,
              "per_trial": [{"initial_condition": r.initial_condition, "noise_seed": r.noise_seed,
                             "success": r.success} for r in res.rollouts]}
    if args.out:
        _write_json(args.out, record)
    print(f"success {res.successes}/{res.n_trials} ({res.success_rate:.3f})")


def cmd_ablate(args) -> None:
    config = AblationConfig.load(args.config)
    if args.workers < 1:
        raise InputError("--workers must be >= 1")
    report = run_ablation(config, workers=args.workers)
    emit_report(report, args.out)
    print(format_table(report))


def cmd_report(args) -> None:
    report = AblationReport.load(args.report)
    if args.out:
        emit_report(report, args.out)
    print(format_table(report))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ccil", description="Corrective-label imitation learning pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("collect", help="record successful scripted-expert demonstrations")
    c.add_argument("--env", required=True)
    c.add_argument("--n", type=int, required=True, help="number of trajectories")
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_collect)

    c = sub.add_parser("train-dynamics", help="fit the residual dynamics model")
    c.add_argument("--data", required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--cap", type=_cap, default=None, help="global Lipschitz cap K (default: unbounded)")
    c.add_argument("--hidden", type=_hidden, default=(64, 64))
    c.add_argument("--epochs", type=int, default=300)
    c.add_argument("--lr", type=float, default=3e-3)
    c.add_argument("--weight-decay", type=float, default=1e-2)
    c.set_defaults(func=cmd_train_dynamics)

    c = sub.add_parser("analyze-continuity", help="local Lipschitz and label-bound distributions")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--bins", type=int, default=20)
    c.set_defaults(func=cmd_analyze_continuity)

    c = sub.add_parser("gen-labels", help="generate and filter corrective labels")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    g = c.add_mutually_exclusive_group(required=True)
    g.add_argument("--quantile", type=float)
    g.add_argument("--threshold", type=float)
    c.set_defaults(func=cmd_gen_labels)

    c = sub.add_parser("train-policy", help="behaviour cloning on demonstrations plus accepted labels")
    c.add_argument("--data", required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--labels", help="label file; only accepted labels are used")
    c.add_argument("--generated-weight", type=float, default=1.0)
    c.add_argument("--hidden", type=_hidden, default=(64, 64))
    c.add_argument("--epochs", type=int, default=300)
    c.add_argument("--lr", type=float, default=3e-3)
    c.add_argument("--weight-decay", type=float, default=0.0)
    c.set_defaults(func=cmd_train_policy)

    c = sub.add_parser("evaluate", help="noisy rollouts from the fixed initial-condition grid")
    c.add_argument("--env", required=True)
    c.add_argument("--policy", required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--trials", type=int, default=48)
    c.add_argument("--noise", type=float, default=1.0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("ablate", help="run an ablation grid from a JSON config")
    c.add_argument("--config", required=True)
    c.add_argument("--out", required=True, help="report directory")
    c.add_argument("--workers", type=int, default=1, help="parallel (seed, size) units")
    c.set_defaults(func=cmd_ablate)

    c = sub.add_parser("report", help="print a saved report and optionally re-emit its tables")
    c.add_argument("--report", required=True, help="report.json")
    c.add_argument("--out", help="directory for CSV / CDF files")
    c.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except InputError as exc:
        print(f"ccil {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigurationError as exc:
        print(f"ccil {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"ccil {args.command}: training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except EnvironmentMisconfigured as exc:
        print(f"ccil {args.command}: environment error: {exc}", file=sys.stderr)
        return EXIT_ENV
    except CCILError as exc:
        print(f"ccil {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ccil {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
