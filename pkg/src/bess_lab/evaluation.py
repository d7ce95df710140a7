"""Measurement suite: seed statistics, profit decomposition, SoC provenance, net load vs demand."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bess_lab.controllers import EvaluationRun

Z_95 = 1.96

# Half-open hour ranges; the first wraps midnight.
DAY_PERIODS: tuple[tuple[str, float, float], ...] = (
    ("21-06", 21.0, 6.0),
    ("06-12", 6.0, 12.0),
    ("12-18", 12.0, 18.0),
    ("18-21", 18.0, 21.0),
)


@dataclass
class SeedEnsemble:
    runs: list[EvaluationRun]
    seeds: list[int]

    def __post_init__(self):
        if not self.runs:
            raise ValueError("an ensemble needs at least one run")
        if len(self.seeds) != len(self.runs):
            raise ValueError("one seed per run")
        if len({len(r) for r in self.runs}) != 1:
            raise ValueError("runs must share the episode length")

    def totals(self) -> np.ndarray:
        return np.array([r.total_profit for r in self.runs])

    def cumulative(self) -> np.ndarray:
        return np.vstack([r.cumulative_profit() for r in self.runs])


@dataclass(frozen=True)
class ProfitDecomposition:
    solar_sell: float
    solar_battery: float
    grid_battery: float

    @property
    def total(self) -> float:
        return self.solar_sell + self.solar_battery + self.grid_battery

    def to_dict(self) -> dict:
        return {"solar_sell": self.solar_sell, "solar_battery": self.solar_battery,
                "grid_battery": self.grid_battery}


def mean_ci(values, z: float = Z_95) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pointwise mean and ``mean ± z * s / sqrt(n)`` over curves (rows) or scalars.

    ``s`` is the sample standard deviation; with one curve the band collapses.
    """
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
        squeeze = True
    else:
        squeeze = False
    n = arr.shape[0]
    mean = arr.mean(axis=0)
    half = z * arr.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    lo, hi = mean - half, mean + half
    if squeeze:
        return mean[0], lo[0], hi[0]
    return mean, lo, hi


def decompose_steps(run: EvaluationRun) -> np.ndarray:
    """Per-step profit split, shape ``(T, 3)``: solar sold on the spot, stored solar, grid arbitrage.

    Battery sales are attributed by the provenance mix of the energy
    discharged at that step; all grid purchases are charged to grid arbitrage.
    """
    out = np.zeros((len(run.flow_trace), 3))
    for t, (lmp, f) in enumerate(zip(run.lmp, run.flow_trace)):
        revenue = f.grid_sell_energy * lmp
        share = f.discharge_from_solar / f.battery_discharge_energy if f.battery_discharge_energy > 0 else 0.0
        out[t] = (f.solar_sold_energy * lmp, share * revenue, (1.0 - share) * revenue - f.grid_buy_energy * lmp)
    return out


def decompose_profit(run: EvaluationRun) -> ProfitDecomposition:
    solar_sell, solar_batt, grid_batt = decompose_steps(run).sum(axis=0)
    return ProfitDecomposition(float(solar_sell), float(solar_batt), float(grid_batt))


def diurnal_soc_profile(ensemble: SeedEnsemble) -> np.ndarray:
    """Mean stored energy per hour of day, columns (from solar, from grid), shape (24, 2)."""
    sums = np.zeros((24, 2))
    counts = np.zeros(24)
    for run in ensemble.runs:
        hours = np.floor(run.hour_of_day()).astype(int)
        e_solar, e_grid = run.soc_components()
        np.add.at(sums[:, 0], hours, e_solar)
        np.add.at(sums[:, 1], hours, e_grid)
        np.add.at(counts, hours, 1.0)
    if np.any(counts == 0):
        raise ValueError("runs must cover every hour of the day")
    return sums / counts[:, None]


def net_load_series(run: EvaluationRun) -> np.ndarray:
    """Power exported to the grid per step (MW); negative when importing."""
    return np.array([(f.grid_sell_energy + f.solar_sold_energy - f.grid_buy_energy) / run.dt
                     for f in run.flow_trace])


@dataclass
class CrossCorrelation:
    contributions: np.ndarray
    centered_demand: np.ndarray
    bins: dict[str, dict[str, float]]


def period_of_hour(hour: float) -> str:
    for label, start, end in DAY_PERIODS:
        if start < end:
            if start <= hour < end:
                return label
        elif hour >= start or hour < end:
            return label
    raise ValueError(f"hour {hour} outside [0, 24)")


def bin_stats(values: np.ndarray, hours: np.ndarray) -> dict[str, dict[str, float]]:
    labels = np.array([period_of_hour(h) for h in hours])
    out = {}
    for label, _, _ in DAY_PERIODS:
        v = values[labels == label]
        if len(v) == 0:
            out[label] = {"count": 0}
            continue
        q25, q50, q75 = np.quantile(v, [0.25, 0.5, 0.75])
        out[label] = {"count": int(len(v)), "mean": float(v.mean()), "min": float(v.min()),
                      "max": float(v.max()), "q25": float(q25), "median": float(q50), "q75": float(q75)}
    return out


def cross_correlation(net_load, demand, hours=None, dt: float = 0.25) -> CrossCorrelation:
    """Per-step product of net load with mean-centred demand, plus day-period summaries.

    ``hours`` gives the hour of day of each step; by default the sequence is
    assumed to start at midnight.
    """
    net_load = np.asarray(net_load, dtype=float)
    demand = np.asarray(demand, dtype=float)
    if net_load.shape != demand.shape:
        raise ValueError(f"length mismatch: {net_load.shape} vs {demand.shape}")
    centered = demand - demand.mean()
    contrib = net_load * centered
    if hours is None:
        hours = (dt * np.arange(len(contrib))) % 24.0
    return CrossCorrelation(contrib, centered, bin_stats(contrib, np.asarray(hours)))


def summarize(method: str, scenario: dict, ensemble: SeedEnsemble, demand=None, z: float = Z_95) -> dict:
    """Summary record for one (method, scenario) experiment."""
    totals = ensemble.totals()
    mean, lo, hi = mean_ci(totals, z)
    decomps = [decompose_profit(r) for r in ensemble.runs]
    out = {
        "method": method,
        "scenario": scenario,
        "seeds": list(ensemble.seeds),
        "per_seed_total_profit": [float(x) for x in totals],
        "mean": float(mean),
        "ci_low": float(lo),
        "ci_high": float(hi),
        "z": z,
        "decomposition": {
            k: float(np.mean([d.to_dict()[k] for d in decomps]))
            for k in ("solar_sell", "solar_battery", "grid_battery")
        },
    }
    if demand is not None:
        hours = ensemble.runs[0].hour_of_day()
        contrib = np.concatenate([cross_correlation(net_load_series(r), demand).contributions
                                  for r in ensemble.runs])
        out["cross_correlation"] = bin_stats(contrib, np.tile(hours, len(ensemble.runs)))
    return out
