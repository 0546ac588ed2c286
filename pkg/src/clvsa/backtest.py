"""Close-and-reverse backtest over chronological Up/Flat/Down predictions,
plus the evaluation metrics (MAP, AAR, Sharpe, monthly returns, CV)."""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field

import numpy as np

from .marketdata import NO_LABEL

INITIAL_CAPITAL = 100_000.0
TRADING_DAYS = 252
DAYS_PER_YEAR = 365.25


class BacktestError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    cost: float = 85.5
    multiplier: float = 1000.0
    instrument: str = "CL"

    def __post_init__(self):
        if self.cost < 0 or self.multiplier <= 0:
            raise BacktestError("need cost >= 0 and multiplier > 0")


COST_PRESETS = {
    "CL": CostModel(85.5, 1000.0, "CL"),
    "none": CostModel(0.0, 1.0, "none"),
}


@dataclass
class TradeRecord:
    direction: str                 # "long" | "short"
    entry_time: dt.datetime
    exit_time: dt.datetime
    entry_price: float
    exit_price: float
    pnl: float


@dataclass
class BacktestReport:
    trades: list[TradeRecord]
    times: list[dt.datetime]
    equity: np.ndarray
    initial_capital: float = INITIAL_CAPITAL
    metrics: dict = field(default_factory=dict)

    @property
    def final_equity(self) -> float:
        return float(self.equity[-1])

    @property
    def cumulative_return(self) -> float:
        return self.final_equity / self.initial_capital - 1.0


def trade_pnl(direction: str, entry: float, exit: float, cost: CostModel) -> float:
    if entry <= 0 or exit <= 0:
        raise BacktestError("prices must be positive")
    if direction == "long":
        return (exit - entry) * cost.multiplier - cost.cost
    if direction == "short":
        return (entry - exit) * cost.multiplier - cost.cost
    raise BacktestError(f"unknown direction {direction!r}")


def simulate(times, prices, predictions, cost: CostModel = COST_PRESETS["CL"],
             initial_capital: float = INITIAL_CAPITAL) -> BacktestReport:
    """Trade one contract at each frame's close.

    Up opens long and Down opens short; an opposite signal closes the position
    and reverses it at the same price; Flat holds. Signals on the final frame
    are not acted on: any open position is closed there instead.
    """
    n = len(predictions)
    if n == 0:
        raise BacktestError("no predictions")
    if len(prices) != n or len(times) != n:
        raise BacktestError(f"misaligned inputs: {n} predictions, {len(prices)} prices, "
                            f"{len(times)} timestamps")
    sides = {1: "long", -1: "short"}
    trades: list[TradeRecord] = []
    equity = np.empty(n)
    realized = 0.0
    pos, entry_price, entry_time = 0, 0.0, None

    for k in range(n):
        price, now = float(prices[k]), times[k]
        signal = int(predictions[k])
        if signal not in (-1, 0, 1):
            raise BacktestError(f"prediction {signal} at {now} is not -1/0/1")
        last = k == n - 1
        if pos != 0 and (last or signal == -pos):
            pnl = trade_pnl(sides[pos], entry_price, price, cost)
            trades.append(TradeRecord(sides[pos], entry_time, now, entry_price, price, pnl))
            realized += pnl
            pos = 0
        if not last and signal != 0 and pos == 0:
            pos, entry_price, entry_time = signal, price, now
        open_pnl = pos * (price - entry_price) * cost.multiplier if pos else 0.0
        equity[k] = initial_capital + realized + open_pnl
    return BacktestReport(trades, list(times), equity, initial_capital)


def mean_average_precision(predictions, truth, classes=(1, 0, -1)) -> float:
    """Macro-averaged precision; a class never predicted contributes 0."""
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.shape != truth.shape:
        raise BacktestError("predictions and truth differ in length")
    precisions = []
    for c in classes:
        picked = predictions == c
        precisions.append(float(np.mean(truth[picked] == c)) if picked.any() else 0.0)
    return float(np.mean(precisions))


def span_days(report: BacktestReport) -> float:
    delta = report.times[-1] - report.times[0]
    return delta.total_seconds() / 86400.0


def annual_return(report: BacktestReport, days: float | None = None) -> float:
    """Simple annualization of total return on initial capital."""
    days = span_days(report) if days is None else days
    if days <= 0:
        raise BacktestError("annualization span must be positive")
    return report.cumulative_return * (DAYS_PER_YEAR / days)


def daily_returns(report: BacktestReport) -> np.ndarray:
    closes: dict[dt.date, float] = {}
    for t, e in zip(report.times, report.equity):
        closes[t.date()] = float(e)
    levels = np.array([report.initial_capital, *closes.values()])
    return levels[1:] / levels[:-1] - 1.0


def sharpe_from_returns(returns) -> float | None:
    """Annualized mean/std of periodic returns; None when undefined."""
    r = np.asarray(returns, dtype=np.float64)
    if len(r) < 2:
        raise BacktestError("need at least two returns")
    sd = r.std(ddof=1)
    if sd <= 1e-12 * max(1.0, abs(r.mean())):
        return None
    return float(r.mean() / sd * math.sqrt(TRADING_DAYS))


def sharpe(report: BacktestReport) -> float | None:
    return sharpe_from_returns(daily_returns(report))


def monthly_returns(report: BacktestReport) -> list[tuple[str, float]]:
    """Mark-to-market P&L of each calendar month over initial capital."""
    month_end: dict[tuple[int, int], float] = {}
    for t, e in zip(report.times, report.equity):
        month_end[(t.year, t.month)] = float(e)
    first, last = min(month_end), max(month_end)
    out = []
    prev = report.initial_capital
    y, m = first
    while (y, m) <= last:
        end = month_end.get((y, m), prev)
        out.append((f"{y:04d}-{m:02d}", (end - prev) / report.initial_capital))
        prev = end
        y, m = (y + 1, 1) if m == 12 else (y, m + 1)
    return out


def coefficient_of_variation(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        raise BacktestError("need at least two values")
    mean = v.mean()
    if mean == 0:
        raise BacktestError("coefficient of variation undefined for zero mean")
    return float(v.std(ddof=1) / mean)


def evaluate(times, prices, predictions, truth, cost: CostModel = COST_PRESETS["CL"]
             ) -> BacktestReport:
    """Backtest plus MAP/AAR/Sharpe filled into ``report.metrics``."""
    report = simulate(times, prices, predictions, cost)
    truth = np.asarray(truth)
    keep = truth != NO_LABEL
    report.metrics = {
        "map": mean_average_precision(np.asarray(predictions)[keep], truth[keep]),
        "aar": annual_return(report) if span_days(report) > 0 else 0.0,
        "sharpe": sharpe(report) if len(daily_returns(report)) >= 2 else None,
        "final_equity": report.final_equity,
        "cumulative_return": report.cumulative_return,
        "trades": len(report.trades),
    }
    return report


def report_to_dict(report: BacktestReport, cost: CostModel) -> dict:
    return {
        "initial_capital": report.initial_capital,
        "cost": {"cost": cost.cost, "multiplier": cost.multiplier,
                 "instrument": cost.instrument},
        "metrics": report.metrics,
        "monthly_returns": [{"month": m, "return": r} for m, r in monthly_returns(report)],
        "trades": [
            {"direction": t.direction, "entry_time": t.entry_time.isoformat(),
             "exit_time": t.exit_time.isoformat(), "entry_price": t.entry_price,
             "exit_price": t.exit_price, "pnl": t.pnl}
            for t in report.trades
        ],
    }
