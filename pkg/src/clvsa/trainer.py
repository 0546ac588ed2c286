"""Adam training loop, walk-forward orchestration, baselines and repeated runs."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import backtest as bt
from . import marketdata as md
from .checkpoint import save_checkpoint
from .diffcore import IGNORE_INDEX, Tape
from .model import (MODEL_KINDS, Batch, ModelConfig, bind, class_to_label, forward_pass,
                    init_params, label_to_class, predict_proba)
from .objective import LOG_COLUMNS, AnnealSchedule, ObjectiveBreakdown, total_objective

logger = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    def __init__(self, iteration: int, breakdown: ObjectiveBreakdown):
        super().__init__(f"non-finite loss at iteration {iteration}: {breakdown}")
        self.iteration = iteration
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch: int = 16
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    alpha: float = 2.5e-4
    gamma: float = 1e-5
    anneal_iterations: int = 1000
    lr: float = 1e-3
    val_every: int = 50

    def __post_init__(self):
        if self.iterations < 1 or self.batch < 1:
            raise ValueError("iterations and batch must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam update, in place."""
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def sample_minibatch(pairs, batch: int, rng: np.random.Generator) -> list:
    """Uniform draws with replacement."""
    if not pairs:
        raise ValueError("cannot sample from an empty pool")
    return [pairs[i] for i in rng.integers(0, len(pairs), size=batch)]


def _classes(labels: np.ndarray) -> np.ndarray:
    return np.where(labels == md.NO_LABEL, IGNORE_INDEX, label_to_class(labels))


def make_batch(pairs) -> Batch:
    return Batch(
        day_a=np.stack([p.day_a.values for p in pairs]),
        day_b=np.stack([p.day_b.values for p in pairs]),
        labels=np.stack([_classes(p.day_b.labels) for p in pairs]),
    )


def _chunks(pairs, size=64):
    for i in range(0, len(pairs), size):
        yield pairs[i:i + size]


def evaluate_pairs(params, pairs, cfg: ModelConfig) -> dict:
    """Eval-mode cross-entropy and accuracy over all labelled frames."""
    nll, correct, count = 0.0, 0, 0
    for chunk in _chunks(pairs):
        batch = make_batch(chunk)
        probs = predict_proba(params, batch, cfg)
        mask = batch.labels != IGNORE_INDEX
        idx = np.where(mask, batch.labels, 0)
        picked = np.take_along_axis(probs, idx[..., None], axis=-1)[..., 0]
        nll -= float(np.sum(np.log(np.maximum(picked, 1e-12)) * mask))
        correct += int(np.sum((probs.argmax(-1) == batch.labels) & mask))
        count += int(mask.sum())
    return {"ce": nll / max(count, 1), "accuracy": correct / max(count, 1), "count": count}


@dataclass
class RunRecord:
    seed: int
    session: int
    metrics: dict = field(default_factory=dict)
    log: list = field(default_factory=list)          # ObjectiveBreakdown rows
    validation: list = field(default_factory=list)   # (iteration, ce, accuracy)
    checkpoint: str | None = None
    iterations: int = 0
    params: dict = field(default_factory=dict, repr=False)        # final
    best_params: dict = field(default_factory=dict, repr=False)   # lowest validation CE

    def summary(self) -> dict:
        return {"seed": self.seed, "session": self.session, "map": self.metrics.get("map"),
                "aar": self.metrics.get("aar"), "sharpe": self.metrics.get("sharpe"),
                "iterations": self.iterations, "checkpoint": self.checkpoint}

    @property
    def final_validation_ce(self) -> float | None:
        return self.validation[-1][1] if self.validation else None


def write_log(path, log: list):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in log:
            w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def _streams(seed: int, session: int):
    ss = np.random.SeedSequence([seed, session])
    init, batches, noise = ss.spawn(3)
    return (int(init.generate_state(1)[0]), np.random.default_rng(batches),
            np.random.default_rng(noise))


def train_session(train_pairs, val_pairs, cfg: TrainConfig, session: int = 0,
                  checkpoint_path=None, params: dict | None = None) -> RunRecord:
    """Optimize the objective for ``cfg.iterations`` Adam steps.

    Validation runs every ``cfg.val_every`` iterations and after the last one;
    it never touches parameters or optimizer state.
    """
    mcfg = cfg.model
    init_seed, batch_rng, noise_rng = _streams(cfg.seed, session)
    params = init_params(mcfg, init_seed) if params is None else params
    state = AdamState(lr=cfg.lr)
    schedule = AnnealSchedule(cfg.anneal_iterations)
    record = RunRecord(seed=cfg.seed, session=session, iterations=cfg.iterations)
    best_ce = np.inf
    record.best_params = {k: v.copy() for k, v in params.items()}

    for k in range(cfg.iterations):
        batch = make_batch(sample_minibatch(train_pairs, cfg.batch, batch_rng))
        tape = Tape()
        nodes = bind(tape, params)
        out = forward_pass(nodes, batch, mcfg, "train", noise_rng)
        loss, breakdown = total_objective(out, batch.labels, nodes, k, cfg.alpha, cfg.gamma,
                                          schedule)
        if not breakdown.is_finite():
            raise NonFiniteLoss(k, breakdown)
        record.log.append(breakdown.as_row(k))
        tape.backward(loss)
        adam_step(params, {n: nodes[n].grad for n in params}, state)

        done = k + 1
        if val_pairs and (done % cfg.val_every == 0 or done == cfg.iterations):
            ev = evaluate_pairs(params, val_pairs, mcfg)
            record.validation.append((done, ev["ce"], ev["accuracy"]))
            if ev["ce"] < best_ce:
                best_ce = ev["ce"]
                record.best_params = {n: v.copy() for n, v in params.items()}
    if not val_pairs:
        record.best_params = {n: v.copy() for n, v in params.items()}
    record.params = params
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, {"model": mcfg.to_dict(), "seed": cfg.seed,
                                                  "session": session})
        record.checkpoint = str(checkpoint_path)
    return record


# -- baselines -------------------------------------------------------------

def assemble_baseline(kind: str, base: ModelConfig | None = None) -> ModelConfig:
    """Model flags for each compared architecture, keeping the base sizes."""
    base = base or ModelConfig()
    kind = kind.lower().replace("_s", "")
    flags = {
        "clvsa": dict(variational=True, attention=True, convolutional=True, use_encoder=True,
                      recurrent=True),
        "clsa": dict(variational=False, attention=True, convolutional=True, use_encoder=True,
                     recurrent=True),
        "seq2seq": dict(variational=False, attention=True, convolutional=False,
                        use_encoder=True, recurrent=True),
        "lstm": dict(variational=False, attention=False, convolutional=False,
                     use_encoder=False, recurrent=True),
        "cnn": dict(variational=False, attention=False, convolutional=True, use_encoder=False,
                    recurrent=False),
    }
    if kind not in flags:
        raise ValueError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
    return replace(base, kind=kind, **flags[kind])


# -- walk-forward ----------------------------------------------------------

@dataclass
class DataConfig:
    frames_per_day: int = 48
    train_days: int = 756
    val_days: int = 10
    test_days: int = 10
    shift_days: int = 5
    max_gap_days: int = 4
    min_transitions: int = 1000
    max_sessions: int | None = None

    def __post_init__(self):
        if min(self.frames_per_day, self.train_days, self.test_days, self.shift_days) < 1:
            raise ValueError("frames_per_day, train/test days and shift must be >= 1")
        if self.val_days < 0 or self.max_gap_days < 1 or self.min_transitions < 1:
            raise ValueError("need val_days >= 0, max_gap_days >= 1, min_transitions >= 1")


@dataclass
class PreparedSession:
    session: md.Session
    stats: md.NormStats
    thresholds: md.LabelThresholds
    train_pairs: list
    val_pairs: list
    test_pairs: list


def prepare_session(days, session: md.Session, dcfg: DataConfig) -> PreparedSession:
    """Fit normalization and label thresholds on the training range only."""
    train_days = [d for d in days if session.in_train(d.date)]
    stats = md.fit_normalizer(train_days)
    thresholds = md.calibrate_lambda(train_days, dcfg.min_transitions)
    window = [d for d in days if session.train[0] <= d.date <= session.test[1]]
    # the training split is labelled on its own so its final frame has no target
    train_lab = md.apply_normalizer(md.label(train_days, thresholds), stats)
    all_lab = md.apply_normalizer(md.label(window, thresholds), stats)
    train_pairs = md.make_day_pairs(train_lab, dcfg.max_gap_days)
    all_pairs = md.make_day_pairs(all_lab, dcfg.max_gap_days)
    return PreparedSession(
        session, stats, thresholds, train_pairs,
        [p for p in all_pairs if session.in_validation(p.day_b.date)],
        [p for p in all_pairs if session.in_test(p.day_b.date)],
    )


@dataclass
class PredictionRow:
    time: object
    close: float
    prediction: int
    truth: int


def predict_pairs(params, pairs, cfg: ModelConfig) -> list[PredictionRow]:
    rows = []
    for chunk in _chunks(pairs):
        probs = predict_proba(params, make_batch(chunk), cfg)
        preds = class_to_label(probs.argmax(-1))
        for pair, pred in zip(chunk, preds):
            d = pair.day_b
            rows.extend(PredictionRow(d.times[k], float(d.close[k]), int(pred[k]),
                                      int(d.labels[k])) for k in range(len(d)))
    return rows


def stream_metrics(rows: list[PredictionRow], cost: bt.CostModel = bt.COST_PRESETS["CL"]
                   ) -> dict:
    report = bt.evaluate([r.time for r in rows], [r.close for r in rows],
                         [r.prediction for r in rows], [r.truth for r in rows], cost)
    truth = np.array([r.truth for r in rows])
    pred = np.array([r.prediction for r in rows])
    keep = truth != md.NO_LABEL
    metrics = dict(report.metrics)
    metrics["accuracy"] = float(np.mean(pred[keep] == truth[keep])) if keep.any() else 0.0
    return metrics


@dataclass
class WalkForwardResult:
    records: list[RunRecord]
    predictions: list[PredictionRow]
    sessions: list[PreparedSession] = field(default_factory=list, repr=False)


def run_walk_forward(days, plan: md.SplitPlan, cfg: TrainConfig, dcfg: DataConfig,
                     cost: bt.CostModel = bt.COST_PRESETS["CL"], out_dir=None
                     ) -> WalkForwardResult:
    """Train one model per session and concatenate test predictions.

    Where test ranges overlap, the earliest session that covers a day keeps it.
    """
    if not plan.sessions:
        raise ValueError("empty split plan")
    sessions = plan.sessions[:dcfg.max_sessions] if dcfg.max_sessions else plan.sessions
    records, stream, prepared = [], [], []
    last_day = None
    for s in sessions:
        prep = prepare_session(days, s, dcfg)
        prepared.append(prep)
        ckpt = log_path = None
        if out_dir is not None:
            stem = f"session{s.index:03d}_seed{cfg.seed}"
            ckpt = Path(out_dir) / "checkpoints" / f"{stem}.ckpt"
            log_path = Path(out_dir) / "logs" / f"{stem}.csv"
        logger.info("session %d: %d train / %d val / %d test pairs", s.index,
                    len(prep.train_pairs), len(prep.val_pairs), len(prep.test_pairs))
        rec = train_session(prep.train_pairs, prep.val_pairs, cfg, s.index, ckpt)
        if log_path is not None:
            write_log(log_path, rec.log)
        rows = predict_pairs(rec.best_params, prep.test_pairs, cfg.model)
        if rows:
            rec.metrics = stream_metrics(rows, cost)
        fresh = [p for p in prep.test_pairs if last_day is None or p.day_b.date > last_day]
        if fresh:
            stream.extend(r for r in rows if last_day is None or r.time.date() > last_day)
            last_day = fresh[-1].day_b.date
        records.append(rec)
    return WalkForwardResult(records, stream, prepared)


# -- repeated runs ---------------------------------------------------------

REPORTED_METRICS = ("map", "aar", "sharpe")


def aggregate(per_seed: list[dict], metrics=REPORTED_METRICS) -> dict:
    """Mean, sample std and coefficient of variation of each metric."""
    if len(per_seed) < 2:
        raise ValueError("need at least two runs to aggregate")
    out = {}
    for name in metrics:
        vals = [r.get(name) for r in per_seed]
        if any(v is None for v in vals):
            out[name] = {"mean": None, "std": None, "cv": None}
            continue
        v = np.asarray(vals, dtype=np.float64)
        mean, std = float(v.mean()), float(v.std(ddof=1))
        cv = None if mean == 0 else bt.coefficient_of_variation(v)
        out[name] = {"mean": mean, "std": std, "cv": cv}
    return out


def repeat_runs(days, plan, cfg: TrainConfig, dcfg: DataConfig, seeds,
                cost: bt.CostModel = bt.COST_PRESETS["CL"]) -> dict:
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("repeat_runs needs at least two seeds")
    per_seed = []
    for seed in seeds:
        res = run_walk_forward(days, plan, replace(cfg, seed=seed), dcfg, cost)
        m = stream_metrics(res.predictions, cost)
        per_seed.append({"seed": seed, **m})
    return {"seeds": seeds, "per_seed": per_seed, "metrics": aggregate(per_seed)}
