"""Small builders shared by the test modules."""
import datetime as dt

import numpy as np

from clvsa import backtest as bt
from clvsa import marketdata as md


def bars_from_closes(closes, date=dt.date(2021, 3, 1), start_minute=9 * 60, volume=100):
    """One bar per close, open at the previous close, 5 minutes apart."""
    bars, prev = [], closes[0]
    for k, c in enumerate(closes):
        o = prev
        bars.append(md.Bar(date, start_minute + k * md.BAR_MINUTES, float(o), float(max(o, c)),
                           float(min(o, c)), float(c), volume))
        prev = c
    return bars


def day_from_frame_closes(date, frame_closes):
    """A TradingDay whose frames close at the given prices."""
    closes = np.repeat(np.asarray(frame_closes, dtype=np.float64), md.BARS_PER_FRAME)
    return md.build_frames(bars_from_closes(closes, date), len(frame_closes))[0]


def weekdays(start, n):
    out, d = [], start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return out


def hourly(n, start=dt.datetime(2021, 3, 1, 9, 0)):
    return [start + dt.timedelta(hours=k) for k in range(n)]


def daily(n, start=dt.datetime(2021, 1, 4, 16, 0)):
    return [start + dt.timedelta(days=k) for k in range(n)]


def brute_force(prices, preds, cost, initial=bt.INITIAL_CAPITAL):
    """Runs of equal nonzero signals, each held until the next run or the end."""
    n = len(preds)
    marks = [(k, int(p)) for k, p in enumerate(preds[:-1]) if p != 0]
    runs = [m for i, m in enumerate(marks) if i == 0 or m[1] != marks[i - 1][1]]
    pnls = []
    for i, (start, sign) in enumerate(runs):
        stop = runs[i + 1][0] if i + 1 < len(runs) else n - 1
        pnls.append(bt.trade_pnl("long" if sign == 1 else "short", float(prices[start]),
                                 float(prices[stop]), cost))
    total = 0.0
    for p in pnls:
        total += p
    return initial + total, len(pnls)


def direction_changes(preds):
    nz = [p for p in preds[:-1] if p != 0]
    if not nz:
        return 0
    return sum(a != b for a, b in zip(nz, nz[1:])) + 1   # +1 closes the last position
