"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also repeated in the pytest terminal summary. The three training
criteria (overfit, learnability, regularizer direction) take several minutes.
"""
import json
import math
import shutil
import time
from pathlib import Path

import numpy as np

from clvsa import backtest as bt
from clvsa import diffcore as dc
from clvsa import gradcheck
from clvsa import marketdata as md
from clvsa.cli import main
from clvsa.config import load_config
from clvsa.model import Batch, ModelConfig, bind, forward_pass, init_params
from clvsa.objective import AnnealSchedule, beta_at, kld_diag_gaussian
from clvsa.trainer import (TrainConfig, assemble_baseline, prepare_session, run_walk_forward,
                           stream_metrics, train_session)

from helpers import brute_force, direction_changes, hourly

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
RESULTS: list[str] = []


def report(number: int, name: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# 1 ------------------------------------------------------------------------------------

def test_gradient_fidelity():
    t0 = time.perf_counter()
    rows = gradcheck.run("toy", seeds=10)
    elapsed = time.perf_counter() - t0
    covered = {r.component for r in rows}
    worst = max(rows, key=lambda r: r.max_error)
    ok = (all(r.passed for r in rows) and elapsed < 60
          and covered >= set(dc.GRAD_RULES) | {"objective"})
    report(1, "gradient fidelity", ok,
           f"{len(rows)} components, worst {worst.component} {worst.max_error:.2e} "
           f"(tol 1e-4), {elapsed:.1f}s (limit 60s)")


# 2 ------------------------------------------------------------------------------------

def _kld(mu_q, var_q, mu_p, var_p):
    t = dc.Tape()
    c = lambda v: t.leaf(np.atleast_2d(np.asarray(v, dtype=np.float64)))
    return float(kld_diag_gaussian(c(mu_q), c(np.log(var_q)), c(mu_p), c(np.log(var_p))).value)


def test_variational_correctness():
    hand = [_kld([0.2, -0.7], [1.5, 0.3], [0.2, -0.7], [1.5, 0.3]),
            _kld([1.0], [1.0], [0.0], [1.0]),
            _kld([0.0], [4.0], [0.0], [1.0])]
    expected = [0.0, 0.5, 0.5 * (3 - math.log(4))]
    hand_ok = all(abs(a - b) <= 1e-9 for a, b in zip(hand, expected))
    rng = np.random.default_rng(0)
    lowest = math.inf
    for _ in range(10_000):
        mq, mp = rng.normal(0, 2, (1, 4)), rng.normal(0, 2, (1, 4))
        lq, lp = rng.uniform(-5, 5, (1, 4)), rng.uniform(-5, 5, (1, 4))
        t = dc.Tape()
        lowest = min(lowest, float(kld_diag_gaussian(*(t.constant(v) for v in (mq, lq, mp, lp))).value))
    s = AnnealSchedule(1000)
    beta_ok = beta_at(0, s) == 0.0 and beta_at(1000, s) == 1.0 and beta_at(5000, s) == 1.0
    report(2, "variational correctness", hand_ok and lowest >= 0 and beta_ok,
           f"hand values {[round(v, 6) for v in hand]}, min KLD over 1e4 draws {lowest:.3e}, "
           f"beta endpoints {beta_at(0, s)}/{beta_at(1000, s)}")


# 3 ------------------------------------------------------------------------------------

def test_attention_and_softmax_invariants():
    rng = np.random.default_rng(7)
    worst_attn, checked = 0.0, 0
    for kind in ("clvsa", "clsa", "seq2seq"):
        cfg = assemble_baseline(kind, ModelConfig(channels=2, z_dim=3, classifier_units=(8, 6),
                                                  prior_units=8, posterior_units=8))
        for trial in range(5):
            t = dc.Tape()
            batch = Batch(rng.standard_normal((2, 4, 5, 6)), rng.standard_normal((2, 4, 5, 6)),
                          rng.integers(0, 3, (2, 4)))
            out = forward_pass(bind(t, init_params(cfg, trial)), batch, cfg,
                               "train" if trial % 2 else "eval", np.random.default_rng(trial))
            for w in out.attention_weights:
                worst_attn = max(worst_attn, float(np.max(np.abs(np.asarray(w).sum(-1) - 1))))
                checked += 1
    worst_shift = 0.0
    for _ in range(200):
        x = rng.normal(0, 5, (3, 7))
        c = rng.normal(0, 50)
        t = dc.Tape()
        a = dc.softmax_last(t.constant(x)).value
        b = dc.softmax_last(t.constant(x + c)).value
        worst_shift = max(worst_shift, float(np.max(np.abs(a - b))))
    report(3, "attention/softmax invariants", checked > 0 and worst_attn <= 1e-9
           and worst_shift <= 1e-12,
           f"{checked} weight sets, max |sum-1| {worst_attn:.1e}; "
           f"max shift deviation {worst_shift:.1e}")


# 4 ------------------------------------------------------------------------------------

SMALL = ModelConfig(channels=4, z_dim=8, dropout=0.0, classifier_units=(128, 64),
                    prior_units=64, posterior_units=64)


def test_overfit_small_config():
    L = 8
    bars = md.generate_synthetic(md.SynthConfig(seed=3, days=10, frames_per_day=L,
                                                session_start="09:00", drift=0.001,
                                                volatility=0.0002, reversion=0.1))
    days = md.build_frames(bars, L)
    days = md.apply_normalizer(md.label(days, md.calibrate_lambda(days, min_transitions=50)),
                               md.fit_normalizer(days))
    pairs = md.make_day_pairs(days)[:8]
    cfg = TrainConfig(iterations=300, batch=16, seed=0, model=SMALL, lr=0.002,
                      anneal_iterations=300, val_every=50)
    t0 = time.perf_counter()
    rec = train_session(pairs, pairs, cfg)
    elapsed = time.perf_counter() - t0
    acc = [v[2] for v in rec.validation]
    best = max(acc)
    report(4, "overfit", len(pairs) == 8 and best >= 0.95 and elapsed < 600,
           f"train accuracy by check {[round(a, 3) for a in acc]}, best {best:.3f} "
           f"(need 0.95), {elapsed:.0f}s")


# 5 ------------------------------------------------------------------------------------

def _walk_forward_setup(name):
    cfg = load_config(CONFIGS / f"{name}.json")
    market = md.simulate_market(cfg.synth)
    days = md.build_frames(market.bars, cfg.data.frames_per_day)
    d = cfg.data
    plan = md.plan_walk_forward([x.date for x in days], d.train_days, d.val_days, d.test_days,
                                d.shift_days)
    return cfg, market, days, plan


def test_learnability_above_chance():
    cfg, market, days, plan = _walk_forward_setup("learnability")
    thresholds = prepare_session(days, plan.sessions[0], cfg.data).thresholds
    oracle = md.regime_oracle_accuracy(market, cfg.data.frames_per_day, thresholds)
    accs = []
    for seed in range(1, 6):
        tcfg = TrainConfig(**{**cfg.train.to_dict(), "seed": seed, "model": cfg.model})
        res = run_walk_forward(days, plan, tcfg, cfg.data, cfg.cost)
        accs.append(stream_metrics(res.predictions, cfg.cost)["accuracy"])
    wins = sum(a >= 0.45 for a in accs)
    report(5, "learnability", oracle >= 0.55 and wins >= 4,
           f"regime oracle {oracle:.3f} (need 0.55); test accuracy "
           f"{[round(a, 3) for a in accs]}, {wins}/5 at or above 0.45 (need 4)")


# 6 ------------------------------------------------------------------------------------

def test_regularizer_direction():
    cfg, _, days, plan = _walk_forward_setup("high_noise")
    prep = prepare_session(days, plan.sessions[0], cfg.data)
    ces = {}
    for kind in ("clvsa", "clsa"):
        model = assemble_baseline(kind, cfg.model)
        ces[kind] = []
        for seed in range(1, 6):
            tcfg = TrainConfig(**{**cfg.train.to_dict(), "seed": seed, "model": model})
            rec = train_session(prep.train_pairs, prep.val_pairs, tcfg)
            ces[kind].append(rec.final_validation_ce)
    med = {k: float(np.median(v)) for k, v in ces.items()}
    cv = {k: bt.coefficient_of_variation(v) for k, v in ces.items()}
    ok = med["clvsa"] <= med["clsa"] and cv["clvsa"] <= cv["clsa"]
    report(6, "regularizer direction", ok,
           f"median val CE clvsa {med['clvsa']:.4f} vs clsa {med['clsa']:.4f}; "
           f"seed CV clvsa {cv['clvsa']:.4f} vs clsa {cv['clsa']:.4f}; "
           f"per seed {json.dumps({k: [round(x, 4) for x in v] for k, v in ces.items()})}")


# 7 ------------------------------------------------------------------------------------

def test_backtest_oracle():
    rng = np.random.default_rng(2024)
    cost = bt.COST_PRESETS["CL"]
    mismatches = count_errors = 0
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        prices = np.round(70 + np.cumsum(rng.normal(0, 0.5, n)), 2)
        preds = rng.choice([-1, 0, 1], size=n, p=rng.dirichlet([1, 1, 1]))
        r = bt.simulate(hourly(n), prices, preds, cost)
        expect, count = brute_force(prices, preds, cost)
        mismatches += r.final_equity != expect
        count_errors += not len(r.trades) == count == direction_changes(list(preds))
    worked = bt.simulate(hourly(4), [100.0, 101.0, 102.0, 101.0], [1, 0, -1, 0]).final_equity
    report(7, "backtest oracle", mismatches == 0 and count_errors == 0 and worked == 102829.0,
           f"{mismatches} equity mismatches and {count_errors} trade-count mismatches "
           f"in 1000 sequences; worked example {worked}")


# 8 ------------------------------------------------------------------------------------

def test_labeling_balance():
    cfg = md.SynthConfig(seed=3, days=30, frames_per_day=48, drift=0.0)
    days = md.build_frames(md.generate_synthetic(cfg), 48)
    th = md.calibrate_lambda(days, min_transitions=1000)
    labels = np.concatenate([d.labels for d in md.label(days, th)])
    labels = labels[labels != md.NO_LABEL]
    shares = [float(np.mean(labels == c)) for c in (1, 0, -1)]
    report(8, "labeling balance", all(abs(s - 1 / 3) <= 0.05 for s in shares),
           f"up/flat/down shares {[round(s, 4) for s in shares]} (each 0.333 +/- 0.05)")


# 9 ------------------------------------------------------------------------------------

def _snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def test_determinism(tmp_path, capsys):
    toy = str(CONFIGS / "toy.json")
    data = tmp_path / "bars.csv"
    run = tmp_path / "run"
    commands = {
        "synth": (["synth", "--config", toy, "--out", str(data)], data.parent, "bars.csv"),
        "train": (["train", "--config", toy, "--data", str(data), "--out", str(run)], run, None),
        "backtest": (["backtest", "--predictions", str(run / "reports" / "predictions.csv"),
                      "--prices", str(run / "reports" / "prices.csv"),
                      "--out", str(tmp_path / "bt")], tmp_path / "bt", None),
        "gradcheck": (["gradcheck", "--seeds", "2"], None, None),
    }
    identical = {}
    for name, (argv, where, only) in commands.items():
        outputs = []
        for _ in range(2):
            if where is not None and where.is_dir() and only is None:
                shutil.rmtree(where)
            capsys.readouterr()
            code = main(argv)
            stdout = capsys.readouterr().out
            files = {} if where is None else _snapshot(where)
            if only:
                files = {only: files[only]}
            outputs.append((code, stdout, files))
        identical[name] = outputs[0] == outputs[1] and outputs[0][0] == 0
    rep = tmp_path / "rep"
    assert main(["repeat", "--config", toy, "--data", str(data), "--seeds", "3,3",
                 "--out", str(rep)]) == 0
    cv = json.loads((rep / "aggregate.json").read_text())["metrics"]["map"]["cv"]
    report(9, "determinism", all(identical.values()) and cv == 0.0,
           f"byte-identical reruns {identical}; repeat with seeds 3,3 gives MAP CV {cv}")


# 10 -----------------------------------------------------------------------------------

def test_leak_freedom():
    cfg = load_config(CONFIGS / "toy.json")
    bars = md.generate_synthetic(cfg.synth)
    days = md.build_frames(bars, cfg.data.frames_per_day)
    d = cfg.data
    plan = md.plan_walk_forward([x.date for x in days], d.train_days, d.val_days, d.test_days,
                                d.shift_days)
    same = []
    for s in plan.sessions:
        full = prepare_session(days, s, d)
        trimmed_bars = [b for b in bars if s.in_train(b.date)]
        trimmed = prepare_session(md.build_frames(trimmed_bars, d.frames_per_day), s, d)
        same.append(full.stats == trimmed.stats and full.thresholds == trimmed.thresholds
                    and np.array_equal(full.stats.mean, trimmed.stats.mean)
                    and np.array_equal(full.stats.std, trimmed.stats.std))
    report(10, "leak-freedom", len(same) >= 2 and all(same),
           f"{sum(same)}/{len(same)} sessions give bitwise-equal stats and thresholds "
           "after deleting validation/test bars")
