"""Perfect-foresight dynamic-programming oracle and receding-horizon control.

Two backward-induction solvers share one contract:

* ``enumerate`` walks the exact reachable state set (merged on identical
  SoC).  It is exact but the set explodes once self-discharge starts
  producing off-lattice values, so it is only used on short horizons.
* ``lattice`` runs backward induction on an SoC grid (default 0.25 MWh, on
  which Buy/Sell quanta land exactly) and interpolates the value function
  linearly at off-grid successors.  Decisions are then replayed from the true
  state through the true kernel.

``auto`` tries ``enumerate`` under a state budget and falls back to ``lattice``.

Solar revenue is the same for every action in a step, so it never changes a
decision; planning uses only the battery cash flow and adds solar income back
into the reported value.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from bess_lab.controllers import EvaluationRun, rollout
from bess_lab.data import STEPS_PER_DAY, SeriesSet, series_from_arrays
from bess_lab.model import (
    TIE_ORDER,
    Action,
    BatteryParams,
    BatteryState,
    ExogenousSample,
    Observation,
    next_totals,
    step,
)

log = logging.getLogger(__name__)

EMPTY_END_PENALTY = 1e9  # $/MWh left in the battery when end_empty is requested


class LatticeError(ValueError):
    pass


class InsufficientHistory(ValueError):
    pass


@dataclass(frozen=True)
class OracleConfig:
    mode: str = "exact"
    soc_grid: float = 0.25
    solver: str = "auto"
    max_states: int = 4000
    end_empty: bool = False

    def __post_init__(self):
        if self.mode not in ("exact", "relaxed"):
            raise ValueError(f"mode must be exact or relaxed, got {self.mode!r}")
        if self.solver not in ("auto", "lattice", "enumerate"):
            raise ValueError(f"solver must be auto, lattice or enumerate, got {self.solver!r}")
        if not self.soc_grid > 0:
            raise LatticeError("soc_grid must be positive")


@dataclass
class OracleSolution:
    run: EvaluationRun
    planned_value: float
    solver: str


def _pick(q: np.ndarray) -> Action:
    """Argmax over a length-3 action vector with the fixed tie order."""
    best = TIE_ORDER[0]
    for a in TIE_ORDER[1:]:
        if q[a] > q[best]:
            best = a
    return best


def _terminal(totals: np.ndarray, end_empty: bool) -> np.ndarray:
    if end_empty:
        return -EMPTY_END_PENALTY * np.asarray(totals, dtype=float)
    return np.zeros(np.shape(totals))


# --------------------------------------------------------------------------- lattice


class Lattice:
    """SoC grid with precomputed interpolation weights for every action."""

    def __init__(self, params: BatteryParams, soc_grid: float):
        self.params = params
        self.grid = soc_grid
        n = params.e_max / soc_grid
        for name, q in (("e_max", params.e_max), ("charge quantum", params.charge_quantum),
                        ("discharge quantum", params.discharge_quantum)):
            r = q / soc_grid
            if abs(r - round(r)) > 1e-9 * max(1.0, abs(r)):
                raise LatticeError(f"soc_grid {soc_grid} does not divide the {name} {q}")
        self.n = int(round(n))
        self.nodes = np.arange(self.n + 1) * soc_grid
        nxt, self.coef = next_totals(self.nodes, params)
        self.lo, self.w = self.locate(nxt)

    def locate(self, totals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pos = np.asarray(totals, dtype=float) / self.grid
        near = np.round(pos)
        pos = np.where(np.abs(pos - near) < 1e-9, near, pos)
        pos = np.clip(pos, 0.0, float(self.n))
        lo = np.minimum(np.floor(pos), self.n - 1).astype(np.intp)
        return lo, pos - lo

    def backward(self, lmp: np.ndarray, end_empty: bool = False) -> np.ndarray:
        """Value tables ``V[t, node]`` of battery cash flow from step ``t`` on."""
        T = len(lmp)
        values = np.empty((T + 1, self.n + 1))
        values[T] = _terminal(self.nodes, end_empty)
        lo, w, coef = self.lo, self.w, self.coef
        lo1 = lo + 1
        for t in range(T - 1, -1, -1):
            v = values[t + 1]
            q = lmp[t] * coef + (1.0 - w) * v[lo] + w * v[lo1]
            np.max(q, axis=0, out=values[t])
        return values

    def q_values(self, total: float, lmp: float, v_next: np.ndarray) -> np.ndarray:
        nxt, coef = next_totals(np.array([total]), self.params)
        lo, w = self.locate(nxt)
        return lmp * coef[:, 0] + (1.0 - w[:, 0]) * v_next[lo[:, 0]] + w[:, 0] * v_next[lo[:, 0] + 1]

    def value_at(self, total: float, v: np.ndarray) -> float:
        lo, w = self.locate(np.array([total]))
        return float((1.0 - w[0]) * v[lo[0]] + w[0] * v[lo[0] + 1])


def _lattice_plan(series: SeriesSet, params: BatteryParams, config: OracleConfig,
                  initial: BatteryState, n_decisions: int | None = None) -> tuple[list[Action], float]:
    lat = Lattice(params, config.soc_grid)
    lmp = np.asarray(series.lmp, dtype=float)
    values = lat.backward(lmp, config.end_empty)
    planned = lat.value_at(initial.total(), values[0])
    n = len(series) if n_decisions is None else min(n_decisions, len(series))
    state = initial
    actions = []
    for t in range(n):
        a = _pick(lat.q_values(state.total(), lmp[t], values[t + 1]))
        actions.append(a)
        if t + 1 < n:
            state = step(state, a, ExogenousSample(float(lmp[t]), float(series.solar[t])), params).next_state
    return actions, planned


# --------------------------------------------------------------------------- enumeration


def _enumerate_plan(series: SeriesSet, params: BatteryParams, config: OracleConfig,
                    initial: BatteryState) -> tuple[list[Action], float] | None:
    """Exact DP over the merged reachable set; ``None`` if it outgrows ``max_states``."""
    T = len(series)
    layers = [[initial]]
    succ, rew = [], []
    for t in range(T):
        # battery cash flow only: zero solar gives the same decisions and totals
        sample = ExogenousSample(float(series.lmp[t]), 0.0)
        nxt_states, index = [], {}
        s_idx = np.empty((len(layers[t]), 3), dtype=np.intp)
        r = np.empty((len(layers[t]), 3))
        for i, s in enumerate(layers[t]):
            for a in Action:
                out = step(s, a, sample, params)
                key = round(out.next_state.total(), 9)
                j = index.get(key)
                if j is None:
                    j = index[key] = len(nxt_states)
                    nxt_states.append(out.next_state)
                s_idx[i, a] = j
                r[i, a] = out.reward
        if len(nxt_states) > config.max_states:
            return None
        layers.append(nxt_states)
        succ.append(s_idx)
        rew.append(r)

    v = _terminal([s.total() for s in layers[T]], config.end_empty)
    choice = [None] * T
    for t in range(T - 1, -1, -1):
        q = rew[t] + v[succ[t]]
        choice[t] = [_pick(row) for row in q]
        v = q[np.arange(len(q)), choice[t]]
    planned = float(v[0])
    actions, i = [], 0
    for t in range(T):
        a = choice[t][i]
        actions.append(a)
        i = succ[t][i, a]
    return actions, planned


# --------------------------------------------------------------------------- oracle


def solve_oracle(series: SeriesSet, params: BatteryParams, config: OracleConfig = OracleConfig(),
                 initial: BatteryState = BatteryState()) -> OracleSolution:
    if len(series) == 0:
        raise ValueError("cannot plan over an empty series")
    plan_params = params if config.mode == "exact" else params.replace(eta=1.0, beta=0.0)
    if config.solver == "lattice":
        Lattice(plan_params, config.soc_grid)  # validate early
    plan, solver = None, "enumerate"
    if config.solver in ("auto", "enumerate"):
        plan = _enumerate_plan(series, plan_params, config, initial)
        if plan is None and config.solver == "enumerate":
            raise ValueError(f"reachable set exceeds max_states={config.max_states}")
    if plan is None:
        solver = "lattice"
        plan = _lattice_plan(series, plan_params, config, initial)
    actions, planned = plan
    solar_income = float(np.sum(series.lmp * series.solar * params.dt))
    run = rollout(actions, series, params, initial)
    return OracleSolution(run, planned + solar_income, solver)


def dp_oracle(series: SeriesSet, params: BatteryParams, config: OracleConfig = OracleConfig(),
              initial: BatteryState = BatteryState()) -> EvaluationRun:
    """Perfect-foresight dispatch over the Buy/Sell/Null action set.

    ``exact`` plans with the true kernel; ``relaxed`` plans without
    efficiency or self-discharge and then scores the plan under the true
    kernel.
    """
    return solve_oracle(series, params, config, initial).run


# --------------------------------------------------------------------------- forecasting


class Forecaster(Protocol):
    def predict(self, history: np.ndarray, horizon: int) -> np.ndarray: ...


class SeasonalNaiveForecaster:
    """Tomorrow looks like today: value at ``t+k`` is the one seen ``period`` steps earlier."""

    def __init__(self, period: int = STEPS_PER_DAY):
        self.period = period

    def predict(self, history, horizon: int) -> np.ndarray:
        return seasonal_naive_forecast(history, horizon, self.period)


def seasonal_naive_forecast(history, horizon: int, period: int = STEPS_PER_DAY) -> np.ndarray:
    history = np.asarray(history, dtype=float)
    if len(history) < period:
        raise InsufficientHistory(f"need at least {period} samples of history, have {len(history)}")
    if horizon <= 0:
        return np.empty(0)
    k = np.arange(horizon)
    return history[len(history) - period + (k % period)]


class GroundTruthForecaster:
    """Reads the future off a known price timeline (for equivalence checks).

    The history length locates "now" on the timeline.  Requests past the
    timeline's end are padded with its last value.
    """

    def __init__(self, timeline):
        self.timeline = np.asarray(timeline, dtype=float)

    def predict(self, history, horizon: int) -> np.ndarray:
        start = len(history)
        out = self.timeline[start:start + horizon]
        if len(out) < horizon:
            pad = self.timeline[-1] if len(self.timeline) else 0.0
            out = np.concatenate((out, np.full(horizon - len(out), pad)))
        return out


class ConstantForecaster:
    def __init__(self, value: float):
        self.value = float(value)

    def predict(self, history, horizon: int) -> np.ndarray:
        return np.full(horizon, self.value)


# --------------------------------------------------------------------------- RHC


@dataclass(frozen=True)
class RhcConfig:
    horizon_steps: int = 96
    replan_every: int = 1
    oracle: OracleConfig = field(default_factory=lambda: OracleConfig(solver="lattice"))

    def __post_init__(self):
        if self.horizon_steps < 1 or self.replan_every < 1:
            raise ValueError("horizon_steps and replan_every must be >= 1")


class RhcPolicy:
    """Receding-horizon control.

    At each replanning point the window is the observed current price
    followed by ``horizon_steps - 1`` forecast prices, cut at the episode
    end.  The oracle is solved from the current SoC and its first
    ``replan_every`` actions are executed.  Forecast solar repeats the
    previous day's profile; it only enters the planned value.
    """

    def __init__(self, forecaster: Forecaster, config: RhcConfig, params: BatteryParams,
                 price_history=(), solar_history=()):
        self.forecaster = forecaster
        self.config = config
        self.params = params
        self._price_prefix = [float(x) for x in price_history]
        self._solar_prefix = [float(x) for x in solar_history]
        self.planned_values: list[float] = []
        self.reset()

    def reset(self) -> None:
        self._prices = list(self._price_prefix)
        self._solar = list(self._solar_prefix)
        self._plan: list[Action] = []
        self._cursor = 0
        self.planned_values = []

    def _solar_forecast(self, n: int) -> np.ndarray:
        hist = self._solar
        if len(hist) >= STEPS_PER_DAY:
            base = len(hist) - STEPS_PER_DAY
            return np.array([hist[base + (k % STEPS_PER_DAY)] for k in range(1, n + 1)])
        return np.full(n, hist[-1] if hist else 0.0)

    def decide(self, observation: Observation) -> Action:
        self._prices.append(observation.lmp)
        self._solar.append(observation.solar_power)
        if self._cursor >= min(len(self._plan), self.config.replan_every):
            horizon = self.config.horizon_steps
            if observation.steps_remaining is not None:
                horizon = min(horizon, observation.steps_remaining)
            future = self.forecaster.predict(np.array(self._prices), horizon - 1)
            prices = np.concatenate(([observation.lmp], np.asarray(future, dtype=float)))
            solar = np.concatenate(([observation.solar_power], self._solar_forecast(horizon - 1)))
            window = series_from_arrays(prices, solar)
            state = BatteryState(0.0, observation.soc)
            cfg = self.config.oracle
            plan_params = self.params if cfg.mode == "exact" else self.params.replace(eta=1.0, beta=0.0)
            if cfg.solver == "lattice":
                self._plan, value = _lattice_plan(window, plan_params, cfg, state,
                                                  n_decisions=self.config.replan_every)
                value += float(np.sum(prices * solar * self.params.dt))
            else:
                sol = solve_oracle(window, self.params, cfg, state)
                self._plan, value = sol.run.actions, sol.planned_value
            self.planned_values.append(value)
            self._cursor = 0
        a = self._plan[self._cursor]
        self._cursor += 1
        return a


def rhc_policy(forecaster: Forecaster, config: RhcConfig = RhcConfig(),
               params: BatteryParams = BatteryParams(), price_history=(), solar_history=()) -> RhcPolicy:
    return RhcPolicy(forecaster, config, params, price_history, solar_history)
