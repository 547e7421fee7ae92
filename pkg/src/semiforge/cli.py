"""Command-line harness: ``gen``, ``train`` and ``report``.

Exit codes: 0 success, 2 usage or config error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import dump_config, load_config, set_value
from .datagen import ClassProfile, DatasetParseError, InvalidProfileError, class_counts, load_dataset, save_dataset, synth_dataset
from .model import save_checkpoint
from .report import MetricsParseError, build_report, read_metrics
from .semi import ConfigError, DivergenceError
from .trainer import ABLATION_FLAGS, TrainConfig, headline_acc, run_experiment

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3
SEED_ENV = "SEMIFORGE_SEED"

# command-line switch -> TrainConfig flag
ABLATION_SWITCHES = {
    "no_bank": "use_bank",
    "no_oheml": "use_oheml",
    "no_ea": "use_ea",
    "no_plce": "use_plce",
    "no_bc": "use_balanced",
}

log = logging.getLogger("semiforge")


class UsageError(Exception):
    pass


def _env_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def cmd_gen(args) -> int:
    seed = args.seed if args.seed is not None else _env_seed()
    seed = 0 if seed is None else seed
    try:
        profile = ClassProfile(args.K, args.N1, args.M1, args.gamma_l, args.gamma_u)
        n_lab, n_unl = class_counts(profile)
        ds = synth_dataset(profile, args.d, args.class_sep, args.test_per_class, seed,
                           hide_gamma_u=args.hide_gamma_u)
    except InvalidProfileError as exc:
        raise UsageError(str(exc)) from None
    save_dataset(ds, args.out)
    print(f"{'class':>5} {'labeled':>9} {'unlabeled':>10} {'test':>6}")
    for k in range(profile.K):
        unl = "?" if args.hide_gamma_u else str(n_unl[k])
        print(f"{k + 1:>5} {n_lab[k]:>9} {unl:>10} {args.test_per_class:>6}")
    print(f"wrote {args.out} (K={profile.K}, d={args.d}, seed={seed})")
    return EXIT_OK


def build_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config is not None:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = load_config(args.config, cfg)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        set_value(cfg, key.strip(), value)
    if args.ablate == "all":
        for flag in ABLATION_FLAGS:
            setattr(cfg, flag, False)
        cfg.semi.tau = cfg.warmup_tau
    for switch, flag in ABLATION_SWITCHES.items():
        if getattr(args, switch):
            setattr(cfg, flag, False)
    env = _env_seed()
    if args.seed is not None:
        cfg.seed = args.seed
    elif env is not None:
        cfg.seed = env
    cfg.validate()
    return cfg


def _write_run(cfg, ds, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        def emit(m):
            fh.write(m.to_json() + "\n")
            fh.flush()

        result = run_experiment(cfg, ds, on_epoch=emit)
    save_checkpoint(result.final_params, out / "final.ckpt")
    save_checkpoint(result.best_params, out / "best.ckpt")
    best = result.best
    summary = {"seed": cfg.seed, "head": cfg.headline, "epochs": len(result.history)}
    if best is not None:
        conf = np.asarray(best.confusion)
        np.savetxt(out / "confusion.csv", conf, fmt="%d", delimiter=",",
                   header=",".join(f"pred_{k}" for k in range(conf.shape[1])), comments="")
        summary.update(
            best_epoch=best.epoch,
            best_acc=headline_acc(best, cfg),
            acc_std=best.acc_std,
            acc_bal=best.acc_bal,
            acc_per_class=best.acc_per_class,
        )
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary


def cmd_train(args) -> int:
    if not Path(args.data).is_file():
        raise UsageError(f"dataset not found: {args.data}")
    try:
        ds = load_dataset(args.data)
    except DatasetParseError as exc:
        raise UsageError(f"{args.data}: {exc}") from None
    cfg = build_config(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    out = Path(args.out)
    base_seed = cfg.seed
    summaries = []
    for i in range(args.seeds):
        cfg.seed = base_seed + i
        run_dir = out if args.seeds == 1 else out / f"seed_{cfg.seed}"
        summary = _write_run(cfg, ds, run_dir)
        summaries.append(summary)
        _print_summary(summary)
    if args.seeds > 1:
        accs = np.array([s["best_acc"] for s in summaries if "best_acc" in s])
        per_class = np.array([s["acc_per_class"] for s in summaries if "acc_per_class" in s])
        agg = {
            "seeds": [s["seed"] for s in summaries],
            "head": cfg.headline,
            "best_acc_mean": float(accs.mean()) if accs.size else None,
            "best_acc_std": float(accs.std()) if accs.size else None,
            "acc_per_class_mean": per_class.mean(0).tolist() if per_class.size else None,
            "acc_per_class_std": per_class.std(0).tolist() if per_class.size else None,
        }
        (out / "summary.json").write_text(json.dumps(agg, indent=2) + "\n", encoding="utf-8")
        if accs.size:
            print(f"{args.seeds} seeds: best {cfg.headline}-head accuracy "
                  f"{100 * accs.mean():.1f} ± {100 * accs.std():.2f}")
    return EXIT_OK


def _print_summary(s: dict) -> None:
    if "best_acc" not in s:
        print(f"seed {s['seed']}: no epochs run")
        return
    per_class = " ".join(f"{100 * a:.1f}" for a in s["acc_per_class"])
    print(f"seed {s['seed']}: best epoch {s['best_epoch']}, {s['head']}-head accuracy "
          f"{100 * s['best_acc']:.1f} (per class: {per_class})")


def cmd_report(args) -> int:
    runs = []
    for path in args.metrics:
        if not Path(path).is_file():
            raise UsageError(f"metrics file not found: {path}")
        runs.append(read_metrics(path))
    paths = build_report(runs, args.out)
    made = list(paths.values())
    if not args.no_figures:
        from .plotting import render_figures

        made += render_figures(paths, args.out)
    for p in made:
        print(p)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semiforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="synthesize a long-tailed dataset file")
    g.add_argument("--K", type=int, default=10)
    g.add_argument("--N1", type=int, default=500)
    g.add_argument("--M1", type=int, default=4000)
    g.add_argument("--gamma-l", type=float, default=100.0)
    g.add_argument("--gamma-u", type=float, default=100.0,
                   help="unlabeled imbalance ratio; values below 1 give a reversed profile")
    g.add_argument("--d", type=int, default=8)
    g.add_argument("--class-sep", type=float, default=3.0)
    g.add_argument("--test-per-class", type=int, default=200)
    g.add_argument("--hide-gamma-u", action="store_true",
                   help="do not print the unlabeled class counts")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train on a dataset file")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to run")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    t.add_argument("--ablate", choices=["all"], default=None,
                   help="'all' disables every component (plain FixMatch)")
    for switch in ABLATION_SWITCHES:
        t.add_argument("--" + switch.replace("_", "-"), dest=switch, action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("report", help="CSV tables and figures from metrics files")
    r.add_argument("metrics", nargs="+")
    r.add_argument("--out", required=True)
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, MetricsParseError) as exc:
        print(f"semiforge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"semiforge {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
