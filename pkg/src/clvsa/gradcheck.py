"""Finite-difference audit of every tape op, one convLSTM step and the full
training objective."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .model import (Batch, ModelConfig, N_CLASSES, convlstm_step, forward_pass,
                    init_params, zero_state)
from .objective import AnnealSchedule, total_objective

TOLERANCE = 1e-4
STEP = 1e-5


def _project(node: dc.Node, rng) -> dc.Node:
    """Reduce to a scalar through a fixed random linear functional."""
    tape = node.tape
    flat = dc.reshape(node, (node.value.size,))
    w = tape.constant(rng.standard_normal((1, node.value.size)))
    return dc.reshape(dc.affine(w, flat), ())


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (f, params) for each registered gradient rule."""
    R = np.random.default_rng(rng.integers(1 << 32))
    proj_seed = int(rng.integers(1 << 32))

    def proj(node):
        return _project(node, np.random.default_rng(proj_seed))

    def unary(op):
        return lambda t, p: proj(op(p["x"]))

    labels = R.integers(0, N_CLASSES, size=4)
    labels[0] = dc.IGNORE_INDEX
    eps = R.standard_normal(4)

    cases = {
        "add": (lambda t, p: proj(dc.add(p["a"], p["b"])),
                {"a": R.standard_normal((3, 4)), "b": R.standard_normal((3, 4))}),
        "hadamard": (lambda t, p: proj(dc.hadamard(p["a"], p["b"])),
                     {"a": R.standard_normal((3, 4)), "b": R.standard_normal((3, 4))}),
        "sigmoid": (unary(dc.sigmoid), {"x": 3 * R.standard_normal((4, 3))}),
        "tanh": (unary(dc.tanh), {"x": 2 * R.standard_normal((4, 3))}),
        "relu": (unary(dc.relu), {"x": _away_from_zero(R, (4, 3))}),
        "scale": (lambda t, p: proj(dc.scale(p["x"], -1.7)), {"x": R.standard_normal((5,))}),
        "add_n": (lambda t, p: proj(dc.add_n([p["a"], p["b"], p["a"]])),
                  {"a": R.standard_normal((2, 3)), "b": R.standard_normal((2, 3))}),
        "clip": (lambda t, p: proj(dc.clip(p["x"], -1.0, 1.0)),
                 {"x": np.concatenate([R.uniform(-0.9, 0.9, 4), R.uniform(1.1, 3, 2),
                                       -R.uniform(1.1, 3, 2)])}),
        "affine": (lambda t, p: proj(dc.affine(p["W"], p["x"], p["b"])),
                   {"W": R.standard_normal((4, 3)), "x": R.standard_normal((2, 3)),
                    "b": R.standard_normal(4)}),
        "conv1d_row_shared": (
            lambda t, p: proj(dc.conv1d_row_shared(p["x"], dc.Kernel(p["w"], p["b"]))),
            {"x": R.standard_normal((2, 5, 6, 2)), "w": R.standard_normal((3, 2, 3)),
             "b": R.standard_normal(3)}),
        "reshape": (lambda t, p: proj(dc.reshape(p["x"], (6, 2))),
                    {"x": R.standard_normal((3, 4))}),
        "concat_last": (lambda t, p: proj(dc.concat_last(p["a"], p["b"])),
                        {"a": R.standard_normal((2, 3)), "b": R.standard_normal((2, 2))}),
        "stack": (lambda t, p: proj(dc.stack([p["a"], p["b"]], axis=-2)),
                  {"a": R.standard_normal((2, 3)), "b": R.standard_normal((2, 3))}),
        "dot_last": (lambda t, p: proj(dc.dot_last(p["k"], p["q"])),
                     {"k": R.standard_normal((2, 4, 3)), "q": R.standard_normal((2, 3))}),
        "weighted_sum": (lambda t, p: proj(dc.weighted_sum(p["w"], p["v"])),
                         {"w": R.standard_normal((2, 4)), "v": R.standard_normal((2, 4, 3))}),
        "softmax_last": (unary(dc.softmax_last), {"x": R.standard_normal((3, 4))}),
        "cross_entropy": (
            lambda t, p: dc.cross_entropy(dc.softmax_last(p["x"]), labels),
            {"x": R.standard_normal((4, N_CLASSES))}),
        "reparameterize": (
            lambda t, p: proj(dc.reparameterize(p["mu"], p["lv"], eps)),
            {"mu": R.standard_normal(4), "lv": R.standard_normal(4)}),
        "dropout": (
            lambda t, p: proj(dc.dropout(p["x"], 0.3, True, np.random.default_rng(proj_seed))),
            {"x": R.standard_normal((4, 5))}),
        "gaussian_kl": (
            lambda t, p: dc.gaussian_kl(p["mq"], p["lq"], p["mp"], p["lp"]),
            {"mq": R.standard_normal((2, 3)), "lq": R.standard_normal((2, 3)),
             "mp": R.standard_normal((2, 3)), "lp": R.standard_normal((2, 3))}),
        "sum_squares": (lambda t, p: dc.sum_squares(p["x"]), {"x": R.standard_normal((3, 3))}),
    }
    return cases


def toy_config(scale: str = "toy") -> ModelConfig:
    if scale == "toy":
        return ModelConfig(channels=2, z_dim=3, dropout=0.0, classifier_units=(8, 6),
                           prior_units=8, posterior_units=8)
    if scale == "full":
        return ModelConfig(dropout=0.0)
    raise ValueError(f"unknown scale {scale!r}")


def model_cases(rng: np.random.Generator, scale: str = "toy") -> dict:
    cfg = toy_config(scale)
    B, L = 2, 2
    data_seed, init_seed, noise_seed = (int(s) for s in rng.integers(1 << 32, size=3))
    R = np.random.default_rng(data_seed)
    batch = Batch(R.standard_normal((B, L, 5, 6)), R.standard_normal((B, L, 5, 6)),
                  R.integers(0, N_CLASSES, size=(B, L)))
    params = init_params(cfg, init_seed)
    # zero biases put ReLU pre-activations exactly on the kink; move off it
    for k, v in params.items():
        if v.ndim == 1:
            params[k] = v + 0.1 * R.standard_normal(v.shape)

    cell = {k: v for k, v in params.items() if k.startswith("enc.l0.cell.")}
    x = R.standard_normal((B, 5, 6, 1))
    h0 = 0.5 * R.standard_normal((B, 5, 6, cfg.channels))
    c0 = R.standard_normal((B, 5, 6, cfg.channels))
    proj_seed = int(R.integers(1 << 32))

    def step_loss(tape, p):
        state = zero_state(tape, B, cfg)
        state.H, state.C = tape.constant(h0), tape.constant(c0)
        new = convlstm_step(p, "enc.l0.cell", tape.constant(x), state, cfg)
        rng2 = np.random.default_rng(proj_seed)
        return dc.add(_project(new.H, rng2), _project(new.C, rng2))

    schedule = AnnealSchedule(4)

    def objective(tape, p):
        out = forward_pass(p, batch, cfg, "train", np.random.default_rng(noise_seed))
        loss, _ = total_objective(out, batch.labels, p, 2, schedule=schedule)
        return loss

    return {"convlstm_step": (step_loss, cell), "objective": (objective, params)}


@dataclass
class GradCheckRow:
    component: str
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def run(scale: str = "toy", seeds: int = 10, max_entries: int = 3) -> list[GradCheckRow]:
    """Worst relative error per component across ``seeds`` random draws."""
    rows: dict[str, GradCheckRow] = {}
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        ops = op_cases(rng)
        cases = {**ops, **model_cases(rng, scale)}
        missing = set(dc.GRAD_RULES) - set(cases)
        if missing:
            raise RuntimeError(f"no gradient check for ops: {sorted(missing)}")
        for name, (f, params) in cases.items():
            t0 = time.perf_counter()
            limit = None if name in ops else max_entries
            res = dc.grad_check(f, params, step=STEP, max_entries=limit, seed=seed)
            dt_ = time.perf_counter() - t0
            prev = rows.get(name)
            if prev is None:
                rows[name] = GradCheckRow(name, res.max_error, dt_)
            else:
                prev.max_error = max(prev.max_error, res.max_error)
                prev.seconds += dt_
    return list(rows.values())
