"""OHLCV ingestion, 30-minute frames, labelling, walk-forward splits and a
regime-switching synthetic market."""
from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

HEADER = ["date", "time", "open", "high", "low", "close", "volume"]
ATTRIBUTES = ("open", "high", "low", "close", "volume")
BARS_PER_FRAME = 6
BAR_MINUTES = 5
NO_LABEL = -2
STD_FLOOR = 1e-8
FLAT_TARGET = 1.0 / 3.0
FLAT_TOLERANCE = 0.02


class DataError(ValueError):
    """Raised for malformed or inconsistent market data."""


@dataclass(frozen=True, slots=True)
class Bar:
    date: dt.date
    minute: int
    open: float
    high: float
    low: float
    close: float
    volume: int

    @property
    def timestamp(self) -> dt.datetime:
        return dt.datetime.combine(self.date, dt.time()) + dt.timedelta(minutes=self.minute)

    def check(self):
        if not (self.low <= min(self.open, self.close) <= max(self.open, self.close) <= self.high):
            raise DataError("OHLC inconsistent: need low <= open,close <= high")
        if self.volume < 0:
            raise DataError("negative volume")
        if self.minute % BAR_MINUTES or not 0 <= self.minute < 24 * 60:
            raise DataError(f"time {self.minute} min is not 5-minute aligned")


class BarList(list):
    """List of bars that also remembers where the 5-minute grid has holes."""

    def __init__(self, bars=(), gaps=None):
        super().__init__(bars)
        self.gaps: list[tuple[dt.datetime, dt.datetime]] = gaps or []


def format_time(minute: int) -> str:
    return f"{minute // 60:02d}:{minute % 60:02d}"


def _parse_row(row: list[str]) -> Bar:
    if len(row) != 7:
        raise DataError(f"expected 7 fields, got {len(row)}")
    try:
        date = dt.date.fromisoformat(row[0])
        hh, mm = row[1].split(":")
        minute = int(hh) * 60 + int(mm)
        o, h, l, c = (float(x) for x in row[2:6])
        volume = int(row[6])
    except ValueError as exc:
        raise DataError(f"unparseable field: {exc}") from None
    if not all(math.isfinite(v) and v > 0 for v in (o, h, l, c)):
        raise DataError("prices must be finite and positive")
    bar = Bar(date, minute, o, h, l, c, volume)
    bar.check()
    return bar


def parse_csv(path) -> BarList:
    """Read and validate a ``date,time,open,high,low,close,volume`` file."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != HEADER:
            raise DataError(f"{path}: header must be {','.join(HEADER)}")
        bars = BarList()
        prev = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                bar = _parse_row(row)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            key = (bar.date, bar.minute)
            if prev is not None:
                if key <= (prev.date, prev.minute):
                    raise DataError(f"{path}:{lineno}: timestamp {bar.timestamp} not after "
                                    f"{prev.timestamp}")
                if bar.date == prev.date and bar.minute - prev.minute != BAR_MINUTES:
                    bars.gaps.append((prev.timestamp, bar.timestamp))
            bars.append(bar)
            prev = bar
    if bars.gaps:
        logger.info("%s: %d intraday gaps", path, len(bars.gaps))
    return bars


def write_csv(bars, path):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(HEADER) + "\n")
        for b in bars:
            fh.write(f"{b.date.isoformat()},{format_time(b.minute)},{b.open!r},{b.high!r},"
                     f"{b.low!r},{b.close!r},{b.volume}\n")


@dataclass
class Frame:
    values: np.ndarray          # [5 attributes, 6 steps]
    close_raw: float
    timestamp: dt.datetime


@dataclass
class TradingDay:
    """One calendar day of L frames held as arrays.

    ``raw`` and ``values`` are [L, 5, 6]; ``close`` is the raw close of each
    frame; ``labels`` holds -1/0/1 or NO_LABEL.
    """
    date: dt.date
    raw: np.ndarray
    values: np.ndarray
    close: np.ndarray
    times: list
    labels: np.ndarray = None

    def __post_init__(self):
        if self.labels is None:
            self.labels = np.full(len(self.close), NO_LABEL, dtype=np.int64)

    def __len__(self):
        return len(self.close)

    @property
    def frames(self) -> list[Frame]:
        return [Frame(self.values[k], float(self.close[k]), self.times[k])
                for k in range(len(self))]


def build_frames(bars, frames_per_day: int) -> list[TradingDay]:
    """Group each day's contiguous 5-minute bars six at a time.

    A gap restarts grouping. Days with fewer than ``frames_per_day``
    complete frames are dropped; extra frames beyond that are ignored.
    """
    by_day: dict[dt.date, list[Bar]] = {}
    for b in bars:
        by_day.setdefault(b.date, []).append(b)

    days = []
    for date in sorted(by_day):
        frames = []
        run: list[Bar] = []
        for b in by_day[date]:
            if run and b.minute - run[-1].minute != BAR_MINUTES:
                run = []
            run.append(b)
            if len(run) == BARS_PER_FRAME:
                frames.append(run)
                run = []
        if len(frames) < frames_per_day:
            logger.warning("dropping %s: %d complete frames < %d", date, len(frames),
                           frames_per_day)
            continue
        frames = frames[:frames_per_day]
        raw = np.array([[[getattr(b, a) for b in fr] for a in ATTRIBUTES] for fr in frames],
                       dtype=np.float64)
        days.append(TradingDay(
            date=date,
            raw=raw,
            values=raw.copy(),
            close=raw[:, 3, -1].copy(),
            times=[fr[0].timestamp for fr in frames],
        ))
    return days


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray   # [5]
    std: np.ndarray    # [5]

    def __eq__(self, other):
        return (isinstance(other, NormStats) and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.std, other.std))


def fit_normalizer(train_days) -> NormStats:
    if not train_days:
        raise DataError("cannot fit normalizer on an empty training split")
    raw = np.concatenate([d.raw for d in train_days])          # [N, 5, 6]
    per_attr = raw.transpose(1, 0, 2).reshape(len(ATTRIBUTES), -1)
    mean = per_attr.mean(axis=1)
    std = np.maximum(per_attr.std(axis=1), STD_FLOOR)
    return NormStats(mean, std)


def apply_normalizer(days, stats: NormStats) -> list[TradingDay]:
    out = []
    for d in days:
        values = (d.raw - stats.mean[None, :, None]) / stats.std[None, :, None]
        out.append(replace(d, values=values))
    return out


@dataclass(frozen=True)
class LabelThresholds:
    lam: float
    mu_c: float

    def __post_init__(self):
        if self.mu_c <= 0 or not 0 <= self.lam < self.mu_c:
            raise DataError(f"need 0 <= lambda < mu_c, got lambda={self.lam}, mu_c={self.mu_c}")

    @property
    def b_up(self) -> float:
        return math.log((self.mu_c + self.lam) / self.mu_c)

    @property
    def b_down(self) -> float:
        return math.log((self.mu_c - self.lam) / self.mu_c)


def _closes(days) -> np.ndarray:
    return np.concatenate([d.close for d in days]) if days else np.zeros(0)


def log_returns(closes: np.ndarray) -> np.ndarray:
    if np.any(closes <= 0):
        raise DataError("close prices must be positive")
    return np.diff(np.log(closes))


def classify_returns(r: np.ndarray, th: LabelThresholds) -> np.ndarray:
    return np.where(r > th.b_up, 1, np.where(r < th.b_down, -1, 0)).astype(np.int64)


def flat_share(r: np.ndarray, lam: float, mu_c: float) -> float:
    return float(np.mean(classify_returns(r, LabelThresholds(lam, mu_c)) == 0))


def calibrate_lambda(train_days, min_transitions: int = 1000, iterations: int = 200
                     ) -> LabelThresholds:
    """Pick lambda so roughly a third of training returns fall in the Flat band."""
    closes = _closes(train_days)
    r = log_returns(closes)
    if len(r) < min_transitions:
        raise DataError(f"need >= {min_transitions} transitions to calibrate, got {len(r)}")
    if np.all(r == r[0]):
        raise DataError("degenerate price series: all returns identical")
    mu_c = float(closes.mean())
    lo, hi = 0.0, mu_c * (1.0 - 1e-9)
    lam = 0.5 * (lo + hi)
    for _ in range(iterations):
        lam = 0.5 * (lo + hi)
        share = flat_share(r, lam, mu_c)
        if abs(share - FLAT_TARGET) <= FLAT_TOLERANCE:
            break
        if share < FLAT_TARGET:
            lo = lam
        else:
            hi = lam
    else:
        logger.warning("lambda bisection stopped at flat share %.4f", flat_share(r, lam, mu_c))
    return LabelThresholds(lam, mu_c)


def label(days, thresholds: LabelThresholds) -> list[TradingDay]:
    """Label each frame by the log return to the next frame in ``days``.

    The final frame of the sequence has no successor and gets NO_LABEL.
    """
    closes = _closes(days)
    labels = np.full(len(closes), NO_LABEL, dtype=np.int64)
    if len(closes) > 1:
        labels[:-1] = classify_returns(log_returns(closes), thresholds)
    out, pos = [], 0
    for d in days:
        out.append(replace(d, labels=labels[pos:pos + len(d)].copy()))
        pos += len(d)
    return out


@dataclass
class DayPair:
    day_a: TradingDay
    day_b: TradingDay

    @property
    def day_b_reversed(self) -> TradingDay:
        return reverse_day(self.day_b)


def reverse_day(day: TradingDay) -> TradingDay:
    return TradingDay(date=day.date, raw=day.raw[::-1].copy(), values=day.values[::-1].copy(),
                      close=day.close[::-1].copy(), times=day.times[::-1],
                      labels=day.labels[::-1].copy())


def make_day_pairs(days, max_gap_days: int = 4) -> list[DayPair]:
    if len(days) < 2:
        raise DataError("need at least two days to form pairs")
    pairs = []
    for a, b in zip(days, days[1:]):
        gap = (b.date - a.date).days
        if gap > max_gap_days:
            logger.info("skipping pair %s -> %s: %d-day gap", a.date, b.date, gap)
            continue
        pairs.append(DayPair(a, b))
    return pairs


@dataclass(frozen=True)
class Session:
    index: int
    train: tuple[dt.date, dt.date]
    validation: tuple[dt.date, dt.date]
    test: tuple[dt.date, dt.date]

    @staticmethod
    def _within(date, rng):
        return rng[0] <= date <= rng[1]

    def in_train(self, date):
        return self._within(date, self.train)

    def in_validation(self, date):
        return self._within(date, self.validation)

    def in_test(self, date):
        return self._within(date, self.test)


@dataclass
class SplitPlan:
    sessions: list[Session]
    shift: int


def plan_walk_forward(dates, train_len: int = 756, val_len: int = 10, test_len: int = 10,
                      shift: int = 5) -> SplitPlan:
    """Sessions of consecutive trading days, each shifted by ``shift`` days.

    Lengths count trading days in ``dates`` (defaults: ~3 years, 2 weeks,
    2 weeks, 1 week).
    """
    dates = sorted(dates)
    span = train_len + val_len + test_len
    if min(train_len, val_len, test_len, shift) < 1:
        raise DataError("split lengths and shift must be >= 1")
    if len(dates) < span:
        raise DataError(f"need {span} trading days for one session, have {len(dates)}")
    sessions = []
    for k, start in enumerate(range(0, len(dates) - span + 1, shift)):
        t0, v0, s0 = start, start + train_len, start + train_len + val_len
        sessions.append(Session(k, (dates[t0], dates[v0 - 1]), (dates[v0], dates[s0 - 1]),
                                (dates[s0], dates[s0 + test_len - 1])))
    return SplitPlan(sessions, shift)


# -- synthetic markets -----------------------------------------------------

@dataclass
class SynthConfig:
    seed: int = 0
    days: int = 20
    frames_per_day: int = 48
    persistence: float = 0.97
    drift: float = 0.0005
    volatility: float = 0.001
    reversion: float = 0.0
    start_price: float = 100.0
    start_date: str = "2020-01-06"
    session_start: str = "00:00"
    volume_base: float = 1000.0
    substeps: int = 5

    def validate(self):
        if not 0 < self.persistence < 1:
            raise DataError("persistence must lie in (0, 1)")
        if self.volatility < 0 or self.days < 1 or self.frames_per_day < 1:
            raise DataError("need volatility >= 0, days >= 1, frames_per_day >= 1")
        if not 0 <= self.reversion < 1:
            raise DataError("reversion must lie in [0, 1)")
        hh, mm = (int(x) for x in self.session_start.split(":"))
        if hh * 60 + mm + self.frames_per_day * BARS_PER_FRAME * BAR_MINUTES > 24 * 60:
            raise DataError("session does not fit in one calendar day")


def volume_profile(minute: int) -> float:
    """Low overnight, ramp from 06:00, plateau 09:00-14:00, fall off by 16:00."""
    h = minute / 60.0
    if 9 <= h < 14:
        return 1.0
    if 6 <= h < 9:
        return 0.15 + 0.85 * (h - 6) / 3
    if 14 <= h < 16:
        return 1.0 - 0.85 * (h - 14) / 2
    return 0.15


@dataclass
class SyntheticMarket:
    bars: list[Bar]
    regimes: np.ndarray = field(repr=False)   # +1 bull / -1 bear, per bar


def simulate_market(cfg: SynthConfig) -> SyntheticMarket:
    """Two-state Markov drift plus Gaussian noise, simulated on a sub-bar grid
    so each bar's high/low come from its own path."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    bars_per_day = cfg.frames_per_day * BARS_PER_FRAME
    hh, mm = (int(x) for x in cfg.session_start.split(":"))
    first_minute = hh * 60 + mm
    date = dt.date.fromisoformat(cfg.start_date)
    log_anchor = math.log(cfg.start_price)
    log_p = log_anchor
    regime = 1 if rng.random() < 0.5 else -1
    sub = cfg.substeps
    sub_drift = cfg.drift / sub
    sub_vol = cfg.volatility / math.sqrt(sub)

    bars, regimes = [], []
    for _ in range(cfg.days):
        while date.weekday() >= 5:
            date += dt.timedelta(days=1)
        for j in range(bars_per_day):
            if rng.random() >= cfg.persistence:
                regime = -regime
            noise = rng.standard_normal(sub)
            path = np.empty(sub + 1)
            path[0] = log_p
            for s in range(sub):
                pull = cfg.reversion / sub * (path[s] - log_anchor)
                path[s + 1] = path[s] + regime * sub_drift - pull + sub_vol * noise[s]
            prices = np.round(np.exp(path), 4)
            log_p = math.log(prices[-1])
            minute = first_minute + j * BAR_MINUTES
            vol_level = cfg.volume_base * volume_profile(minute)
            volume = int(round(vol_level * math.exp(0.25 * rng.standard_normal())))
            bars.append(Bar(date, minute, float(prices[0]), float(prices.max()),
                            float(prices.min()), float(prices[-1]), volume))
            regimes.append(regime)
        date += dt.timedelta(days=1)
    return SyntheticMarket(bars, np.array(regimes, dtype=np.int64))


def generate_synthetic(cfg: SynthConfig) -> list[Bar]:
    return simulate_market(cfg).bars


def regime_oracle_accuracy(market: SyntheticMarket, frames_per_day: int,
                           thresholds: LabelThresholds) -> float:
    """Accuracy of the best label guess given the hidden regime at each
    frame's last bar, with class frequencies estimated from the same data."""
    days = label(build_frames(market.bars, frames_per_day), thresholds)
    labels = np.concatenate([d.labels for d in days])
    regime_at_close = market.regimes[BARS_PER_FRAME - 1::BARS_PER_FRAME][:len(labels)]
    keep = labels != NO_LABEL
    labels, regime_at_close = labels[keep], regime_at_close[keep]
    correct = 0
    for state in (-1, 1):
        sel = labels[regime_at_close == state]
        if len(sel):
            correct += max(int(np.sum(sel == c)) for c in (-1, 0, 1))
    return correct / len(labels)
