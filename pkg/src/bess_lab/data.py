"""Exogenous series: CSV ingestion, resampling, PV scaling, splitting, synthesis."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from bess_lab.model import ExogenousSample

STEP = timedelta(minutes=15)
HOUR = timedelta(hours=1)
STEPS_PER_DAY = 96
STEPS_PER_WEEK = 672
SMALL_PV_MEAN_MW = 9.1

PV_SCALES = {"zero": 0.0, "small": 1.0, "large": 2.0}

LMP_HEADER = ("timestamp", "lmp_usd_per_mwh")
SOLAR_HEADER = ("timestamp", "power_mw")
DEMAND_HEADER = ("timestamp", "demand_mw")


class SchemaError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class InsufficientData(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SeriesSet:
    """Aligned 15-minute LMP / solar / demand sequences.

    ``offset`` is the index of the first sample within the series this one
    was cut from (0 for a freshly loaded series).
    """

    start_time: datetime
    lmp: np.ndarray
    solar: np.ndarray
    demand: np.ndarray | None = None
    offset: int = 0
    step_hours: float = field(default=0.25, init=False)

    def __post_init__(self):
        object.__setattr__(self, "lmp", _frozen(self.lmp))
        object.__setattr__(self, "solar", _frozen(self.solar))
        if self.demand is not None:
            object.__setattr__(self, "demand", _frozen(self.demand))
        n = len(self.lmp)
        if len(self.solar) != n or (self.demand is not None and len(self.demand) != n):
            raise ValueError("all series must have equal length")
        if np.any(self.solar < 0):
            raise ValueError("solar power must be non-negative")
        if self.demand is not None and np.any(self.demand < 0):
            raise ValueError("demand must be non-negative")

    def __len__(self) -> int:
        return len(self.lmp)

    def __getitem__(self, t: int) -> ExogenousSample:
        d = None if self.demand is None else float(self.demand[t])
        return ExogenousSample(float(self.lmp[t]), float(self.solar[t]), d)

    def samples(self) -> list[ExogenousSample]:
        return [self[t] for t in range(len(self))]

    def timestamps(self) -> list[datetime]:
        return [self.start_time + k * STEP for k in range(len(self))]

    def hour_of_day(self) -> np.ndarray:
        """Fractional hour-of-day at the start of every step."""
        h0 = self.start_time.hour + self.start_time.minute / 60.0
        return (h0 + self.step_hours * np.arange(len(self))) % 24.0

    def slice(self, start: int, stop: int) -> "SeriesSet":
        return SeriesSet(
            start_time=self.start_time + start * STEP,
            lmp=self.lmp[start:stop],
            solar=self.solar[start:stop],
            demand=None if self.demand is None else self.demand[start:stop],
            offset=self.offset + start,
        )

    def with_solar(self, solar) -> "SeriesSet":
        return SeriesSet(self.start_time, self.lmp, solar, self.demand, self.offset)


@dataclass(frozen=True)
class ScenarioConfig:
    node_label: str = "synthetic"
    season: str = "winter"
    pv_sizing: str = "small"
    pv_scale: float | None = None
    split_train_weeks: int = 12
    split_test_weeks: int = 1

    def __post_init__(self):
        if self.season not in ("winter", "summer"):
            raise ValueError(f"season must be winter or summer, got {self.season!r}")
        if self.pv_sizing not in PV_SCALES:
            raise ValueError(f"pv_sizing must be one of {sorted(PV_SCALES)}, got {self.pv_sizing!r}")
        if self.pv_scale is None:
            object.__setattr__(self, "pv_scale", PV_SCALES[self.pv_sizing])
        if self.pv_scale < 0:
            raise ValueError("pv_scale must be non-negative")
        if (self.pv_sizing == "zero") != (self.pv_scale == 0):
            raise ValueError("pv_sizing 'zero' and pv_scale 0 must go together")
        if self.split_train_weeks < 0 or self.split_test_weeks < 1:
            raise ValueError("need split_train_weeks >= 0 and split_test_weeks >= 1")


# --------------------------------------------------------------------------- CSV


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def read_csv_series(path, header: tuple[str, str]) -> tuple[list[datetime], list[float]]:
    """Read a two-column timestamped CSV; an empty file yields empty lists."""
    times, values = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            return times, values
        if tuple(c.strip() for c in first) != header:
            raise SchemaError(f"{path}: expected header {','.join(header)}, got {','.join(first)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise SchemaError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                ts = parse_timestamp(row[0])
                val = float(row[1])
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
            if not math.isfinite(val):
                raise SchemaError(f"{path}:{lineno}: non-finite value")
            if times and ts <= times[-1]:
                raise SchemaError(f"{path}:{lineno}: timestamps must be strictly increasing")
            times.append(ts)
            values.append(val)
    return times, values


def write_csv_series(path, header: tuple[str, str], times, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for ts, v in zip(times, values):
            w.writerow((format_timestamp(ts), repr(float(v))))


def _regularize(times, values, cadence: timedelta, name: str) -> tuple[datetime, np.ndarray]:
    """Place samples on a regular grid, forward-filling single missing samples."""
    start = times[0]
    out = [values[0]]
    prev = start
    for ts, v in zip(times[1:], values[1:]):
        gap = ts - prev
        if gap % cadence:
            raise AlignmentError(f"{name}: timestamp {ts} is off the {cadence} grid")
        missing = gap // cadence - 1
        if missing > 1:
            raise AlignmentError(f"{name}: gap of {missing} samples before {ts}")
        if missing == 1:
            out.append(out[-1])
        out.append(v)
        prev = ts
    return start, np.array(out, dtype=float)


def upsample_hold(values: np.ndarray, factor: int = 4) -> np.ndarray:
    """Zero-order hold: repeat every coarse sample ``factor`` times."""
    return np.repeat(np.asarray(values, dtype=float), factor)


def load_series(lmp_path, solar_path=None, demand_path=None) -> SeriesSet:
    """Load the three CSV files and align them on the common 15-minute range.

    A missing or empty solar file gives an all-zero solar series.
    """
    lt, lv = read_csv_series(lmp_path, LMP_HEADER)
    if not lt:
        raise AlignmentError(f"{lmp_path}: no LMP rows")
    lmp_start, lmp = _regularize(lt, lv, STEP, "lmp")
    series = {"lmp": (lmp_start, lmp)}

    if solar_path is not None and Path(solar_path).exists():
        st, sv = read_csv_series(solar_path, SOLAR_HEADER)
        if st:
            s0, s = _regularize(st, sv, HOUR, "solar")
            if np.any(s < 0):
                raise SchemaError(f"{solar_path}: negative solar power")
            series["solar"] = (s0, upsample_hold(s))
    if demand_path is not None:
        dt_, dv = read_csv_series(demand_path, DEMAND_HEADER)
        if not dt_:
            raise AlignmentError(f"{demand_path}: no demand rows")
        d0, d = _regularize(dt_, dv, HOUR, "demand")
        if np.any(d < 0):
            raise SchemaError(f"{demand_path}: negative demand")
        series["demand"] = (d0, upsample_hold(d))

    start = max(s0 for s0, _ in series.values())
    end = min(s0 + len(v) * STEP for s0, v in series.values())
    if end <= start:
        raise AlignmentError("series have no overlapping time range")
    n = (end - start) // STEP
    cut = {}
    for name, (s0, v) in series.items():
        if (start - s0) % STEP:
            raise AlignmentError(f"{name}: not aligned to the 15-minute grid")
        k = (start - s0) // STEP
        cut[name] = v[k:k + n]
    solar = cut.get("solar", np.zeros(n))
    return SeriesSet(start, cut["lmp"], solar, cut.get("demand"))


def save_series(series: SeriesSet, out_dir) -> dict[str, Path]:
    """Write lmp.csv (15 min) and hourly solar.csv / demand.csv.

    Solar and demand are written at hourly cadence by taking the first
    quarter-hour of each hour, so only hold-resampled series round-trip.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamps = series.timestamps()
    paths = {"lmp": out / "lmp.csv", "solar": out / "solar.csv"}
    write_csv_series(paths["lmp"], LMP_HEADER, stamps, series.lmp)
    write_csv_series(paths["solar"], SOLAR_HEADER, stamps[::4], series.solar[::4])
    if series.demand is not None:
        paths["demand"] = out / "demand.csv"
        write_csv_series(paths["demand"], DEMAND_HEADER, stamps[::4], series.demand[::4])
    return paths


# --------------------------------------------------------------------------- transforms


def scale_pv(series: SeriesSet, config: ScenarioConfig) -> SeriesSet:
    return series.with_solar(series.solar * config.pv_scale)


def chronological_split(series: SeriesSet, config: ScenarioConfig) -> tuple[SeriesSet, SeriesSet]:
    n_train = config.split_train_weeks * STEPS_PER_WEEK
    n_test = config.split_test_weeks * STEPS_PER_WEEK
    if len(series) < n_train + n_test:
        raise InsufficientData(
            f"need {n_train + n_test} steps ({config.split_train_weeks}+{config.split_test_weeks} weeks), "
            f"have {len(series)}")
    return series.slice(0, n_train), series.slice(n_train, n_train + n_test)


# --------------------------------------------------------------------------- synthesis

PROFILES = {
    # base, amplitude, peak hour, noise sd, sunrise, sunset, cloud range
    "winter-like": dict(base=45.0, amp=20.0, peak=19.0, noise=3.0,
                        sunrise=7.0, sunset=17.0, cloud=(0.35, 1.0)),
    "summer-like": dict(base=55.0, amp=25.0, peak=20.0, noise=8.0,
                        sunrise=6.0, sunset=20.0, cloud=(0.85, 1.0)),
}
SPIKES_PER_WEEK = 2.0
SPIKE_SCALE = (5.0, 12.0)  # spike height in multiples of the sinusoid amplitude
START_TIMES = {
    "winter-like": datetime(2023, 1, 2, tzinfo=timezone.utc),
    "summer-like": datetime(2023, 6, 5, tzinfo=timezone.utc),
}


def diurnal_price(hours: np.ndarray, profile: str) -> np.ndarray:
    """The noise-free sinusoidal LMP component of a synthetic profile."""
    p = PROFILES[profile]
    return p["base"] + p["amp"] * np.cos(2 * np.pi * (hours - p["peak"]) / 24.0)


def synthesize(seed: int, days: int, profile: str = "winter-like", *, periodic: bool = False,
               start_time: datetime | None = None) -> SeriesSet:
    """Generate a desk-scale substitute for a season of market data.

    LMP is a diurnal sinusoid plus noise; the summer-like profile adds AR(1)
    noise, day-to-day amplitude drift and sparse price spikes.  Solar is an
    hourly clipped half-sine bell (zero at night) with daily cloud factors,
    rescaled to a 9.1 MW mean.  Demand is an hourly double-peak curve.
    ``periodic=True`` drops every random component, giving exactly 24 h
    periodic series.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    p = PROFILES[profile]
    rng = np.random.default_rng(seed)
    n = days * STEPS_PER_DAY
    hours = (np.arange(n) * 0.25) % 24.0

    lmp = diurnal_price(hours, profile)
    if not periodic:
        if profile == "summer-like":
            drift = np.repeat(rng.uniform(0.6, 1.4, days), STEPS_PER_DAY)
            lmp = p["base"] + drift * (lmp - p["base"])
            eps = rng.normal(0.0, p["noise"] * math.sqrt(1 - 0.8 ** 2), n)
            noise = np.empty(n)
            acc = rng.normal(0.0, p["noise"])
            for k in range(n):
                acc = 0.8 * acc + eps[k]
                noise[k] = acc
            lmp = lmp + noise
            n_spikes = rng.poisson(SPIKES_PER_WEEK * days / 7.0)
            for _ in range(n_spikes):
                at = int(rng.integers(0, n))
                width = int(rng.integers(1, 5))
                lmp[at:at + width] += p["amp"] * rng.uniform(*SPIKE_SCALE)
        else:
            lmp = lmp + rng.normal(0.0, p["noise"], n)

    hour_of_day = np.arange(days * 24) % 24 + 0.5
    span = p["sunset"] - p["sunrise"]
    bell = np.clip(np.sin(np.pi * (hour_of_day - p["sunrise"]) / span), 0.0, None)
    bell[(hour_of_day < p["sunrise"]) | (hour_of_day > p["sunset"])] = 0.0
    if not periodic:
        bell = bell * np.repeat(rng.uniform(*p["cloud"], days), 24)
    solar_h = bell * (SMALL_PV_MEAN_MW / bell.mean())

    demand_h = (2500.0 + 600.0 * np.exp(-0.5 * ((hour_of_day - 8.0) / 2.0) ** 2)
                + 1000.0 * np.exp(-0.5 * ((hour_of_day - 19.0) / 2.5) ** 2))
    if not periodic:
        demand_h = demand_h * np.repeat(rng.uniform(0.95, 1.05, days), 24)
        demand_h = demand_h + rng.normal(0.0, 40.0, days * 24)

    start = start_time or START_TIMES[profile]
    return SeriesSet(start, lmp, upsample_hold(solar_h), upsample_hold(np.maximum(demand_h, 0.0)))


def square_wave_series(n_steps: int, low: float = 10.0, high: float = 50.0, half_period: int = 8,
                       solar: float = 0.0,
                       start_time: datetime = datetime(2023, 1, 2, tzinfo=timezone.utc)) -> SeriesSet:
    """Prices alternating between ``low`` and ``high`` every ``half_period`` steps."""
    phase = (np.arange(n_steps) // half_period) % 2
    lmp = np.where(phase == 0, low, high).astype(float)
    return SeriesSet(start_time, lmp, np.full(n_steps, float(solar)))


def series_from_arrays(lmp, solar=None, demand=None,
                       start_time: datetime = datetime(2023, 1, 2, tzinfo=timezone.utc)) -> SeriesSet:
    lmp = np.asarray(lmp, dtype=float)
    solar = np.zeros(len(lmp)) if solar is None else solar
    return SeriesSet(start_time, lmp, solar, demand)


__all__ = [
    "AlignmentError", "InsufficientData", "SchemaError", "ScenarioConfig", "SeriesSet",
    "chronological_split", "load_series", "save_series", "scale_pv", "series_from_arrays",
    "square_wave_series", "synthesize", "upsample_hold",
]
