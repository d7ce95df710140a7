"""Battery/market environment: state, kernel, self-discharge, reward, observations.

The battery holds energy split by provenance (solar-origin vs grid-origin).
Each quarter-hour step applies self-discharge, then one of three actions at
full power, projected back into ``[0, e_max]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

WINDOW = 17  # current sample + 16 quarter-hour lags (4 hours)
OBS_DIM = 1 + 2 * WINDOW


class Action(IntEnum):
    """Discrete battery action. Integer values double as Q-network output indices."""

    BUY = 0
    SELL = 1
    NULL = 2


# Fixed preference order for breaking exact ties: Buy < Null < Sell.
TIE_ORDER: tuple[Action, ...] = (Action.BUY, Action.NULL, Action.SELL)


@dataclass(frozen=True)
class BatteryParams:
    """Physical battery constants; defaults are the reference 400 MWh / 100 MW unit."""

    e_max: float = 400.0
    charge_rate: float = 100.0
    discharge_rate: float = 100.0
    dt: float = 0.25
    eta: float = 0.93
    beta: float = 0.1 / 96
    self_discharge_soc_threshold: float = 0.9

    def __post_init__(self):
        if not (self.e_max > 0 and self.charge_rate > 0 and self.discharge_rate > 0 and self.dt > 0):
            raise ValueError("e_max, charge_rate, discharge_rate and dt must be positive")
        if not 0 < self.eta <= 1:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if not 0 <= self.beta < 1:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if not 0 <= self.self_discharge_soc_threshold <= 1:
            raise ValueError("self_discharge_soc_threshold must lie in [0, 1]")

    @property
    def charge_quantum(self) -> float:
        """Energy added to the battery by one unclipped Buy step (MWh)."""
        return self.charge_rate * self.dt * self.eta

    @property
    def discharge_quantum(self) -> float:
        """Energy removed from the battery by one unclipped Sell step (MWh)."""
        return self.discharge_rate * self.dt

    @property
    def decay_threshold(self) -> float:
        return self.self_discharge_soc_threshold * self.e_max

    def replace(self, **changes) -> "BatteryParams":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return BatteryParams(**fields)


@dataclass(frozen=True, slots=True)
class BatteryState:
    e_solar: float = 0.0
    e_grid: float = 0.0

    def total(self) -> float:
        return self.e_solar + self.e_grid

    def validate(self, params: BatteryParams, tol: float = 1e-9) -> None:
        if self.e_solar < -tol or self.e_grid < -tol:
            raise ValueError(f"negative energy component in {self}")
        if self.total() > params.e_max + tol:
            raise ValueError(f"state {self} exceeds e_max={params.e_max}")


@dataclass(frozen=True, slots=True)
class ExogenousSample:
    lmp: float
    solar_power: float = 0.0
    demand: float | None = None

    def __post_init__(self):
        if self.solar_power < 0:
            raise ValueError("solar_power must be non-negative")
        if self.demand is not None and self.demand < 0:
            raise ValueError("demand must be non-negative")


@dataclass(frozen=True, slots=True)
class FlowLedger:
    """Per-step energy flows in MWh, all non-negative.

    ``grid_buy_energy`` and ``solar_stored_energy`` are measured before the
    charging loss; ``grid_sell_energy`` is what reaches the grid after the
    discharge loss.  ``discharge_from_solar`` is the solar-origin part of
    ``battery_discharge_energy``.
    """

    grid_buy_energy: float = 0.0
    grid_sell_energy: float = 0.0
    solar_sold_energy: float = 0.0
    solar_stored_energy: float = 0.0
    battery_discharge_energy: float = 0.0
    self_discharge_loss: float = 0.0
    discharge_from_solar: float = 0.0

    def cash_flow(self, lmp: float) -> float:
        return lmp * (self.grid_sell_energy + self.solar_sold_energy - self.grid_buy_energy)


@dataclass(frozen=True, slots=True)
class StepOutcome:
    next_state: BatteryState
    reward: float
    flows: FlowLedger


def apply_self_discharge(state: BatteryState, params: BatteryParams) -> tuple[BatteryState, float]:
    """Scale both provenance stocks by ``1 - beta`` when the battery is nearly full."""
    total = state.total()
    if total >= params.decay_threshold and params.beta > 0:
        keep = 1.0 - params.beta
        decayed = BatteryState(state.e_solar * keep, state.e_grid * keep)
        return decayed, total - decayed.total()
    return state, 0.0


def step(state: BatteryState, action: Action, sample: ExogenousSample,
         params: BatteryParams) -> StepOutcome:
    decayed, loss = apply_self_discharge(state, params)
    e_solar, e_grid = decayed.e_solar, decayed.e_grid
    e_tilde = e_solar + e_grid
    solar_energy = sample.solar_power * params.dt
    lmp = sample.lmp
    eta = params.eta

    if action == Action.BUY:
        attempted = params.charge_quantum
        stored = min(params.e_max, e_tilde + attempted) - e_tilde
        if stored < 0.0:
            stored = 0.0
        drawn = stored / eta
        # solar feeds the charger first, pro-rated when the projection clips
        solar_in = min(sample.solar_power, params.charge_rate) * params.dt * (stored / attempted)
        grid_in = max(drawn - solar_in, 0.0)
        nxt = BatteryState(e_solar + eta * solar_in, e_grid + eta * grid_in)
        reward = ((e_tilde - (e_tilde + stored)) / eta + solar_energy) * lmp
        flows = FlowLedger(
            grid_buy_energy=grid_in,
            solar_sold_energy=solar_energy - solar_in,
            solar_stored_energy=solar_in,
            self_discharge_loss=loss,
        )
    elif action == Action.SELL:
        remaining = max(0.0, e_tilde - params.discharge_quantum)
        removed = e_tilde - remaining
        if e_tilde > 0.0:
            keep = remaining / e_tilde
            nxt = BatteryState(e_solar * keep, e_grid * keep)
        else:
            nxt = decayed
        from_solar = e_solar - nxt.e_solar
        reward = (eta * removed + solar_energy) * lmp
        flows = FlowLedger(
            grid_sell_energy=eta * removed,
            solar_sold_energy=solar_energy,
            battery_discharge_energy=removed,
            self_discharge_loss=loss,
            discharge_from_solar=from_solar,
        )
    else:
        nxt = decayed
        reward = solar_energy * lmp
        flows = FlowLedger(solar_sold_energy=solar_energy, self_discharge_loss=loss)
    return StepOutcome(nxt, reward, flows)


def next_totals(totals: np.ndarray, params: BatteryParams) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised kernel on total SoC only.

    Returns ``(next_total, energy_coef)`` with shape ``(3, n)`` indexed by
    Action; the step reward for action ``a`` is
    ``lmp * (energy_coef[a] + solar_power * dt)``.
    """
    e = np.asarray(totals, dtype=float)
    decay = (e >= params.decay_threshold) & (params.beta > 0)
    e_tilde = np.where(decay, e * (1.0 - params.beta), e)
    nxt = np.empty((3,) + e.shape)
    coef = np.empty((3,) + e.shape)
    buy = np.minimum(params.e_max, e_tilde + params.charge_quantum)
    stored = np.maximum(buy - e_tilde, 0.0)
    nxt[Action.BUY] = e_tilde + stored
    coef[Action.BUY] = (e_tilde - (e_tilde + stored)) / params.eta
    sell = np.maximum(0.0, e_tilde - params.discharge_quantum)
    nxt[Action.SELL] = sell
    coef[Action.SELL] = params.eta * (e_tilde - sell)
    nxt[Action.NULL] = e_tilde
    coef[Action.NULL] = 0.0
    return nxt, coef


@dataclass(frozen=True)
class Observation:
    """Agent-visible state: SoC plus 4-hour LMP and solar windows (oldest first).

    ``step`` and ``steps_remaining`` are episode bookkeeping; they are not
    part of the feature vector.
    """

    soc: float
    lmp_window: np.ndarray
    solar_window: np.ndarray
    step: int = 0
    steps_remaining: int | None = None

    @property
    def lmp(self) -> float:
        return float(self.lmp_window[-1])

    @property
    def solar_power(self) -> float:
        return float(self.solar_window[-1])

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.soc], self.lmp_window, self.solar_window))


def window_matrix(values: np.ndarray, width: int = WINDOW) -> np.ndarray:
    """Rows ``t`` hold ``values[t-width+1 .. t]``; the start is padded with ``values[0]``."""
    values = np.asarray(values, dtype=float)
    padded = np.concatenate((np.full(width - 1, values[0]), values))
    return np.lib.stride_tricks.sliding_window_view(padded, width)


def make_observation(history: Sequence[ExogenousSample], t: int, state: BatteryState) -> Observation:
    if not 0 <= t < len(history):
        raise IndexError(f"t={t} outside history of length {len(history)}")
    idx = [max(0, k) for k in range(t - WINDOW + 1, t + 1)]
    lmp = np.array([history[k].lmp for k in idx])
    solar = np.array([history[k].solar_power for k in idx])
    return Observation(state.total(), lmp, solar, step=t, steps_remaining=len(history) - t)
