"""Command-line entry point: synth, train, backtest, gradcheck, repeat.

Exit codes: 0 success, 1 computation failure, 2 input/config error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import backtest as bt
from . import gradcheck
from . import marketdata as md
from .config import ConfigError, RunConfig, load_config
from .model import MODEL_KINDS
from .trainer import (NonFiniteLoss, aggregate, assemble_baseline, run_walk_forward,
                      stream_metrics)

logger = logging.getLogger("clvsa")

EXIT_OK, EXIT_FAILURE, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def _dump_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepare_out(out) -> Path:
    out = Path(out)
    for sub in ("logs", "checkpoints", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _load_bars(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"data file not found: {path}")
    try:
        return md.parse_csv(path)
    except md.DataError as exc:
        raise InputError(str(exc)) from None


def _write_rows(path: Path, header, rows):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    md.write_csv(md.generate_synthetic(cfg.synth), out)
    print(f"wrote {cfg.synth.days * cfg.synth.frames_per_day * md.BARS_PER_FRAME} bars to {out}")
    return EXIT_OK


def train_run(cfg: RunConfig, bars, out: Path, data_paths: list[str], config_path) -> dict:
    """Walk-forward training into ``out``; returns the run summary."""
    _dump_json(out / "manifest.json", {
        "config_path": str(config_path) if config_path else None,
        "data": data_paths,
        "output": str(out),
        "seeds": [cfg.train.seed],
        "resolved": cfg.to_dict(),
    })
    days = md.build_frames(bars, cfg.data.frames_per_day)
    plan = md.plan_walk_forward([d.date for d in days], cfg.data.train_days, cfg.data.val_days,
                                cfg.data.test_days, cfg.data.shift_days)
    result = run_walk_forward(days, plan, cfg.train, cfg.data, cfg.cost, out_dir=out)
    for rec in result.records:
        report = rec.summary()
        if report.get("checkpoint"):
            # relative, so reports do not depend on where the run directory lives
            report["checkpoint"] = Path(report["checkpoint"]).relative_to(out).as_posix()
        _dump_json(out / "reports" / f"session{rec.session:03d}_seed{rec.seed}.json", report)
    rows = result.predictions
    _write_rows(out / "reports" / "predictions.csv", ["timestamp", "prediction", "truth"],
                [[r.time.isoformat(), r.prediction, r.truth] for r in rows])
    _write_rows(out / "reports" / "prices.csv", ["timestamp", "close"],
                [[r.time.isoformat(), repr(r.close)] for r in rows])
    summary = {"seed": cfg.train.seed, "model": cfg.model.kind,
               "sessions": len(result.records), "iterations": cfg.train.iterations}
    if rows:
        summary.update(stream_metrics(rows, cfg.cost))
    _dump_json(out / "reports" / "summary.json", summary)
    return summary


def _with_model(cfg: RunConfig, kind: str | None) -> RunConfig:
    if kind is None:
        kind = cfg.model.kind
    model = assemble_baseline(kind, cfg.model)
    return replace(cfg, model=model, train=replace(cfg.train, model=model))


def cmd_train(args) -> int:
    cfg = _with_model(load_config(args.config), args.model)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    bars = _load_bars(args.data)
    summary = train_run(cfg, bars, _prepare_out(args.out), [str(args.data)], args.config)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _read_csv(path, columns):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:len(columns)] != list(columns):
            raise InputError(f"{path}: header must start with {','.join(columns)}")
        return [row for row in reader if row]


def cmd_backtest(args) -> int:
    if args.cost_preset not in bt.COST_PRESETS:
        raise InputError(f"unknown cost preset {args.cost_preset!r}; "
                         f"choose from {sorted(bt.COST_PRESETS)}")
    cost = bt.COST_PRESETS[args.cost_preset]
    preds = _read_csv(args.predictions, ["timestamp", "prediction"])
    prices = _read_csv(args.prices, ["timestamp", "close"])
    if len(preds) != len(prices):
        raise InputError(f"misaligned inputs: {len(preds)} predictions vs {len(prices)} prices")
    for p, q in zip(preds, prices):
        if p[0] != q[0]:
            raise InputError(f"misaligned inputs at timestamp {p[0]} (prices have {q[0]})")
    try:
        times = [dt.datetime.fromisoformat(p[0]) for p in preds]
        signals = [int(p[1]) for p in preds]
        truth = [int(p[2]) if len(p) > 2 else md.NO_LABEL for p in preds]
        closes = [float(q[1]) for q in prices]
    except ValueError as exc:
        raise InputError(f"unparseable value: {exc}") from None

    out = _prepare_out(args.out)
    _dump_json(out / "manifest.json", {
        "predictions": str(args.predictions), "prices": str(args.prices),
        "cost_preset": args.cost_preset,
        "cost": {"cost": cost.cost, "multiplier": cost.multiplier,
                 "instrument": cost.instrument},
    })
    try:
        report = bt.evaluate(times, closes, signals, truth, cost)
    except bt.BacktestError as exc:
        raise InputError(str(exc)) from None
    _dump_json(out / "reports" / "backtest.json", bt.report_to_dict(report, cost))
    _write_rows(out / "reports" / "equity.csv", ["timestamp", "equity"],
                [[t.isoformat(), repr(float(e))] for t, e in zip(report.times, report.equity)])
    _write_rows(out / "reports" / "monthly_returns.csv", ["month", "return"],
                [[m, repr(r)] for m, r in bt.monthly_returns(report)])
    print(json.dumps(report.metrics, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = gradcheck.run(args.scale, seeds=args.seeds)
    width = max(len(r.component) for r in rows)
    print(f"{'component':<{width}}  max_rel_error  status")
    for r in rows:
        print(f"{r.component:<{width}}  {r.max_error:13.3e}  {'ok' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in rows)
    print(f"{'all components within' if ok else 'FAILED: tolerance'} {gradcheck.TOLERANCE:g}")
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_repeat(args) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise InputError(f"bad --seeds value {args.seeds!r}") from None
    if len(seeds) < 2:
        raise InputError("--seeds needs at least two seeds")
    cfg = _with_model(load_config(args.config), args.model)
    if args.data:
        bars, sources = _load_bars(args.data), [str(args.data)]
    else:
        bars, sources = md.generate_synthetic(cfg.synth), ["synthetic"]
    out = Path(args.out)
    _dump_json(out / "manifest.json", {"config_path": str(args.config), "data": sources,
                                       "seeds": seeds, "resolved": cfg.to_dict()})
    per_seed = []
    for i, seed in enumerate(seeds):
        run_cfg = replace(cfg, train=replace(cfg.train, seed=seed))
        run_dir = _prepare_out(out / "runs" / f"{i:02d}_seed{seed}")
        per_seed.append(train_run(run_cfg, bars, run_dir, sources, args.config))
    agg = {"seeds": seeds, "per_seed": per_seed, "metrics": aggregate(per_seed)}
    _dump_json(out / "aggregate.json", agg)
    print(json.dumps(agg["metrics"], indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clvsa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic OHLCV CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="walk-forward training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("backtest", help="backtest a prediction stream")
    p.add_argument("--predictions", required=True)
    p.add_argument("--prices", required=True)
    p.add_argument("--cost-preset", default="CL")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--scale", choices=("toy", "full"), default="toy")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("repeat", help="repeat training over seeds and aggregate")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--data")
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_repeat)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, md.DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
