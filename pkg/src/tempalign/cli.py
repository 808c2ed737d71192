"""Command-line entry point: ``tempalign <command> [flags]``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import checks
from .synth import export_dataset, gen_dataset
from .train import VARIANTS, TrainConfig, ablate, evaluate, summarize, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


class ConfigError(Exception):
    pass


def _window(text: str) -> tuple:
    try:
        vals = tuple(int(v) for v in text.replace("{", "").replace("}", "").split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad window {text!r}; expected e.g. -2,-1,1,2") from exc
    if 0 in vals:
        raise argparse.ArgumentTypeError("window offsets must be non-zero")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tempalign", description="Temporal feature alignment toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_default):
        sp.add_argument("--config", help="JSON training config (see README)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default=out_default)
        sp.add_argument("--variant", choices=VARIANTS)
        sp.add_argument("--window", type=_window, help="comma-separated offsets, e.g. --window=-2,-1,1,2")

    g = sub.add_parser("gradcheck", help="run all gradient and identity suites")
    g.add_argument("--out")
    g.add_argument("--skip-end-to-end", action="store_true")
    b = sub.add_parser("mi-bench", help="contrastive estimator vs. exact Gaussian MI")
    b.add_argument("--out")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--steps", type=int, default=2000)
    common(sub.add_parser("gen-data", help="generate and export the synthetic dataset"), "data")
    common(sub.add_parser("train", help="train one model"), "runs/train")
    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e, None)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "val"), default="val")
    a = sub.add_parser("ablate", help="component and window ablations")
    common(a, "runs/ablation")
    a.add_argument("--seeds", type=int, default=3, help="number of seeds (0..N-1)")
    return p


def load_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg = TrainConfig.from_json(json.load(fh))
        except (OSError, ValueError, TypeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "variant", None):
        cfg = replace(cfg, variant=args.variant)
    if getattr(args, "window", None) is not None:
        cfg = replace(cfg, window=args.window)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _write_resolved(out, cfg: TrainConfig, extra=None):
    os.makedirs(out, exist_ok=True)
    d = cfg.resolved().to_json()
    d.update(extra or {})
    with open(os.path.join(out, "resolved_config.json"), "w") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"tempalign: error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "gradcheck":
        ok, results = checks.run_all(include_end_to_end=not args.skip_end_to_end)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, "gradcheck.json"), "w") as fh:
                json.dump([r.__dict__ for r in results], fh, indent=2)
        return 0 if ok else 1
    if args.command == "mi-bench":
        rows = checks.mi_bench(seed=args.seed, steps=args.steps)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, "mi_bench.json"), "w") as fh:
                json.dump([dict(r.__dict__, passed=r.passed) for r in rows], fh, indent=2)
        return 0 if all(r.passed for r in rows) else 1

    cfg = load_config(args)
    if args.command == "gen-data":
        ds = gen_dataset(cfg.synth, cfg.n_clips, cfg.data_seed)
        export_dataset(ds, args.out)
        _write_resolved(args.out, cfg)
        print(f"wrote {len(ds.clips)} clips to {args.out}")
        return 0
    if args.command == "train":
        cfg = replace(cfg, out_dir=args.out)
        _write_resolved(args.out, cfg)
        res = train(cfg)
        print(f"best val PCK@0.1 {res.best_val_pck:.4f} (epoch {res.best_epoch}); "
              f"checkpoint {res.checkpoint}")
        return 0
    if args.command == "eval":
        try:
            report = evaluate(args.checkpoint, split=args.split,
                              data_config=cfg if args.config else None)
        except (OSError, ValueError) as exc:
            print(f"tempalign: error: {exc}", file=sys.stderr)
            return 1
        text = json.dumps(report, indent=2, sort_keys=True)
        if args.out:
            _write_resolved(args.out, cfg)
            with open(os.path.join(args.out, "report.json"), "w") as fh:
                fh.write(text)
        print(text)
        return 0
    if args.command == "ablate":
        if args.seeds < 3:
            raise ConfigError("--seeds must be at least 3")
        _write_resolved(args.out, cfg, {"seeds": list(range(args.seeds))})
        rows = ablate(replace(cfg, out_dir=None), range(args.seeds), out_dir=args.out, log=print)
        for s in summarize(rows):
            print(f"{s['table']:10s} {s['cell']:14s} {s['mean']:.4f} ± {s['std']:.4f}  (n={s['n']})")
        return 0 if all(r["status"] == "ok" for r in rows) else 1
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
