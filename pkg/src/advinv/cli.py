"""Command-line entry point: ``advinv <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .dataio import SynthConfig, read_dataset, synth_generate, write_dataset
from .model import load_checkpoint
from .trainer import TrainConfig, evaluate


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _train_overrides(path):
    if path is None:
        return {}, None
    cfg = ex.load_config(path, TrainConfig, extra=("widths",))
    widths = ex.parse_widths(cfg.pop("widths", None))
    if {"lam", "seed"} & set(cfg):
        raise ValueError(f"{path}: set lam and seed on the command line")
    return cfg, widths


def _spec(args, mode, lambdas):
    overrides, widths = _train_overrides(args.config)
    return ex.ExperimentSpec(mode=mode, data=args.data, session=args.test_session,
                             lambdas=lambdas, train=overrides, reps=args.reps,
                             base_seed=args.seed, out=args.out, widths=widths,
                             swap_sessions=getattr(args, "swap_sessions", False))


def cmd_gen(args):
    kwargs = ex.load_config(args.config, SynthConfig) if args.config else {}
    if args.seed is not None:
        kwargs["seed"] = args.seed
    cfg = SynthConfig(**kwargs)
    ds = synth_generate(cfg)
    write_dataset(args.out, ds)
    print(f"wrote {len(ds)} epochs ({ds.n_subjects} subjects, {ds.n_sessions} sessions, "
          f"{ds.n_channels}x{ds.n_samples}) to {args.out}")
    return 0


def cmd_train(args):
    spec = _spec(args, "loso" if args.mode == "loso" else "within", [args.lam])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "loso":
        runs = ex.loso_runs(spec, out_dir=out)
    else:
        runs = ex.within_runs(spec, out_dir=out)
    ex.write_raw_csv(out / "runs.csv", runs)
    rows = ex.aggregate(runs)
    ex.write_table_csv(out / "result.csv", rows)
    ex.write_manifest(out / "manifest.txt", spec)
    _print_rows(rows)
    return 0


def cmd_sweep(args):
    spec = _spec(args, "sweep", args.lambdas)
    runs = ex.loso_runs(spec)
    paths = ex.run_sweep_report(runs, args.out)
    ex.write_manifest(Path(args.out) / "manifest.txt", spec)
    _print_rows(ex.aggregate(runs))
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


def cmd_baseline(args):
    spec = _spec(args, f"baseline-{args.method}", [0.0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = ex.baseline_runs(spec, (args.method,))
    ex.write_raw_csv(out / f"baseline_{args.method}_runs.csv", runs)
    rows = ex.aggregate(runs)
    ex.write_table_csv(out / f"baseline_{args.method}.csv", rows)
    ex.write_manifest(out / "manifest.txt", spec)
    _print_rows(rows)
    return 0


def cmd_gradcheck(args):
    return ex.cmd_gradcheck()


def cmd_eval(args):
    net = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    ds = ds if ds.normalized else ds.normalize()
    acc, loss = evaluate(net, ds, "identifier")
    print(f"identifier accuracy={acc:.4f} loss={loss:.4f} n={len(ds)}")
    if net.adversary is not None:
        known = np.isin(ds.sessions, net.session_map)
        if known.any():
            adv_acc, _ = evaluate(net, ds.subset(np.flatnonzero(known)), "adversary")
            print(f"adversary accuracy={adv_acc:.4f} n={int(known.sum())} "
                  f"(training sessions {list(net.session_map)} only)")
    return 0


def _print_rows(rows):
    for r in rows:
        print(f"{r.method:<22s} lambda={r.lam:<6g} id_val={r.id_val_mean:.3f}+-{r.id_val_sd:.3f} "
              f"adv_val={r.adv_val_mean:.3f}+-{r.adv_val_sd:.3f} "
              f"test={r.test_mean:.3f}+-{r.test_sd:.3f} reps={r.reps}")


def build_parser():
    p = argparse.ArgumentParser(prog="advinv", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log every training pass")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", help="key = value file of SynthConfig fields")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    def common(sp, default_out):
        sp.add_argument("--data", required=True)
        sp.add_argument("--test-session", type=int, default=0)
        sp.add_argument("--seed", type=int, default=0, help="base seed")
        sp.add_argument("--reps", type=int, default=1)
        sp.add_argument("--config", help="key = value file of TrainConfig fields and widths")
        sp.add_argument("--out", default=default_out)

    t = sub.add_parser("train", help="train one model per repetition")
    common(t, "runs/train")
    t.add_argument("--mode", choices=("loso", "within"), default="loso")
    t.add_argument("--lambda", dest="lam", type=float, default=0.0)
    t.add_argument("--swap-session-labels", dest="swap_sessions", action="store_true",
                   help="reverse the adversary's session label order")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="leave-one-session-out runs over a lambda grid")
    common(s, "runs/sweep")
    s.add_argument("--lambdas", type=_floats, default=[0, 0.005, 0.01, 0.02, 0.05, 0.2])
    s.add_argument("--swap-session-labels", dest="swap_sessions", action="store_true",
                   help="reverse the adversary's session label order")
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("baseline", help="classical feature + QDA baselines")
    common(b, "runs/baseline")
    b.add_argument("--method", choices=("spectral", "pca"), required=True)
    b.set_defaults(func=cmd_baseline)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"advinv {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
