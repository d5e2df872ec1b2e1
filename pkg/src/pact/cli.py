"""Command-line harness: ``pact {train,eval,sweep-tau,variance,ponder-demo}``.

Exit codes: 0 success, 1 runtime failure (divergence, I/O), 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

from .blocks import MODES, ponder_demo, write_ponder_csv
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .models import CheckpointError, GridModelSpec, load_checkpoint
from .train import (EVAL_COLUMNS, SWEEP_COLUMNS, VARIANCE_COLUMNS, DivergenceError, estimator_config,
                    evaluate, make_dataset, sweep_tau, train, variance_bench, write_rows)

OUT_ENV = "PACT_OUT"
DEFAULT_OUT = "pact-out"
ESTIMATOR_FOR_MODE = {"relaxed": "concrete", "concrete": "concrete", "discrete": "reinforce",
                      "reinforce": "reinforce", "act": "act"}

log = logging.getLogger("pact")


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pact", description="Adaptive computation blocks: training and evaluation harness.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", type=Path, help="experiment YAML document")
        sp.add_argument("--seed", type=_seed, help="overrides train.seed")
        sp.add_argument("--out", type=Path, help=f"output directory (default: config output, ${OUT_ENV}, ./{DEFAULT_OUT})")

    sp = sub.add_parser("train", help="train one model, write checkpoint, metrics and resolved config")
    common(sp)
    sp.add_argument("--mode", help="relaxed|concrete, discrete|reinforce, or act")
    sp.add_argument("--tau", type=_floats, help="computation penalty")
    sp.add_argument("--steps", type=int, help="overrides train.steps")

    sp = sub.add_parser("eval", help="evaluate a checkpoint in one or more block modes")
    common(sp, config=False)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--mode", default="relaxed,discrete,thresholded,act", help="comma-separated block modes")
    sp.add_argument("--size", type=int, default=2000, help="number of test examples")

    sp = sub.add_parser("sweep-tau", help="train once per penalty value and evaluate")
    common(sp)
    sp.add_argument("--tau", type=_floats, default=[1e-3, 1e-2, 1e-1])
    sp.add_argument("--mode", default="discrete", help="evaluation mode")
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("variance", help="gradient variance of REINFORCE vs Concrete on the grid model")
    common(sp)
    sp.add_argument("--groupings", type=_ints, default=[1, 2, 4])
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("ponder-demo", help="ACT ponder cost as a function of the first halting probability")
    common(sp, config=False)
    sp.add_argument("--tail", type=_floats, default=[1 / 3, 1 / 3, 1 / 3])
    sp.add_argument("--points", type=int, default=200)
    sp.add_argument("--eps", type=float, default=0.01)
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    train_cfg = cfg.train
    if getattr(args, "seed", None) is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    if getattr(args, "steps", None) is not None:
        if args.steps < 1:
            raise UsageError("--steps must be positive")
        train_cfg = dataclasses.replace(train_cfg, steps=args.steps)
    return dataclasses.replace(cfg, train=train_cfg)


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    out = args.out or (Path(cfg.output) if cfg and cfg.output else None) or Path(os.environ.get(OUT_ENV) or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, cfg: ExperimentConfig, notes: dict | None = None):
    (out / "resolved_config.yaml").write_text(dump_config(cfg, notes))


def _optimizer_note(tc, kind: str) -> str:
    r = tc.resolved(kind)
    how = "automatic" if tc.optimizer == "auto" else "configured"
    if r.optimizer == "adam":
        return f"adam lr={r.lr} beta1=0.9 beta2=0.999 eps=1e-8 ({how})"
    return f"sgd momentum={r.momentum} lr={r.lr} ({how})"


def cmd_train(args) -> int:
    cfg = _load(args)
    tc = cfg.train
    if args.mode is not None:
        if args.mode not in ESTIMATOR_FOR_MODE:
            raise UsageError(f"--mode {args.mode!r} cannot be trained; use one of {sorted(ESTIMATOR_FOR_MODE)}")
        tc = dataclasses.replace(tc, estimator=ESTIMATOR_FOR_MODE[args.mode])
    if args.tau is not None:
        if len(args.tau) != 1:
            raise UsageError("train takes a single --tau value; use sweep-tau for several")
        tc = dataclasses.replace(tc, tau=args.tau[0])
    cfg = dataclasses.replace(cfg, train=tc.resolved(cfg.model.kind))
    out = _out_dir(args, cfg)
    _write_resolved(out, cfg, {"optimizer": _optimizer_note(tc, cfg.model.kind)})
    meta = {"block": {"temperature": tc.temperature, "clip": tc.clip, "act_eps": tc.act_eps}}
    run = train(cfg.model, cfg.train, metrics_path=out / "metrics.csv", checkpoint_path=out / "checkpoint.pact",
                extra_meta=meta)
    last = run.metrics[-1]
    print(f"trained {cfg.train.steps} steps: loss={last.loss:.4f} accuracy={last.accuracy:.4f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint.is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    modes = [m.strip() for m in args.mode.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise UsageError(f"unknown mode(s) {bad}; choose from {list(MODES)}")
    model, meta = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else int(meta.get("seed", 0))
    block = meta.get("block", {})
    ds = make_dataset(model.spec, seed, 250)
    rows = [evaluate(model, m, ds, args.size, seed=seed, trained_with=meta.get("estimator"), **block) for m in modes]
    out = _out_dir(args)
    write_rows(out / "eval.csv", EVAL_COLUMNS, rows)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for r in rows:
        w.writerow([r[c] for c in EVAL_COLUMNS])
    return 0


def cmd_sweep_tau(args) -> int:
    cfg = _load(args)
    if args.mode not in MODES:
        raise UsageError(f"unknown evaluation mode {args.mode!r}")
    if not args.tau or any(t < 0 for t in args.tau):
        raise UsageError("--tau needs one or more non-negative values")
    out = _out_dir(args, cfg)
    kind = cfg.model.kind
    _write_resolved(out, dataclasses.replace(cfg, train=cfg.train.resolved(kind)),
                    {"optimizer": _optimizer_note(cfg.train, kind), "taus": list(args.tau), "eval_mode": args.mode})
    rows = sweep_tau(cfg.model, cfg.train, args.tau, eval_mode=args.mode, eval_size=cfg.eval.size)
    write_rows(out / "sweep_tau.csv", SWEEP_COLUMNS, rows)
    print(f"{len(rows)} sweep rows -> {out / 'sweep_tau.csv'}")
    return 0


def cmd_variance(args) -> int:
    cfg = _load(args) if args.config else dataclasses.replace(_load(args), model=GridModelSpec())
    if cfg.model.kind != "grid":
        raise UsageError(f"variance needs a grid model, config has kind {cfg.model.kind!r}")
    out = _out_dir(args, cfg)
    tc = cfg.train
    notes = {est: _optimizer_note(estimator_config(tc, est), "grid") for est in ("reinforce", "concrete")}
    notes["groupings"] = list(args.groupings)
    _write_resolved(out, cfg, notes)
    try:
        rows = variance_bench(cfg.model, args.groupings, tc, eval_size=min(cfg.eval.size, 1000))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_rows(out / "variance.csv", VARIANCE_COLUMNS, rows)
    print(f"{len(rows)} variance rows -> {out / 'variance.csv'}")
    return 0


def cmd_ponder_demo(args) -> int:
    if not args.tail or any(not 0 <= t <= 1 for t in args.tail):
        raise UsageError("--tail values must lie in [0, 1]")
    if args.points < 2:
        raise UsageError("--points must be at least 2")
    out = _out_dir(args)
    rows = ponder_demo(tuple(args.tail), args.points, args.eps)
    write_ponder_csv(out / "ponder_demo.csv", rows)
    print(f"{len(rows)} rows -> {out / 'ponder_demo.csv'}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep-tau": cmd_sweep_tau, "variance": cmd_variance,
            "ponder-demo": cmd_ponder_demo}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, CheckpointError) as exc:
        print(f"pact {args.command}: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"pact {args.command}: diverged: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"pact {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
