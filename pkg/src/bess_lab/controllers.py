"""Threshold rules, the sell-only baseline, and the shared evaluation loop."""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from typing import Protocol, runtime_checkable

import numpy as np

from bess_lab.data import SeriesSet
from bess_lab.model import (
    Action,
    BatteryParams,
    BatteryState,
    ExogenousSample,
    FlowLedger,
    Observation,
    step,
    window_matrix,
)


@runtime_checkable
class Policy(Protocol):
    def decide(self, observation: Observation) -> Action: ...

    def reset(self) -> None: ...


@dataclass(frozen=True)
class Thresholds:
    """Buy when the price is at or below ``buy_below``, sell at or above ``sell_above``."""

    buy_below: float
    sell_above: float

    def to_dict(self) -> dict:
        return {"buy_below": self.buy_below, "sell_above": self.sell_above}

    @classmethod
    def from_dict(cls, d: dict) -> "Thresholds":
        return cls(float(d["buy_below"]), float(d["sell_above"]))


def rules_decide(lmp: float, th: Thresholds) -> Action:
    # buy branch first, so overlapping thresholds resolve to Buy
    if lmp <= th.buy_below:
        return Action.BUY
    if lmp >= th.sell_above:
        return Action.SELL
    return Action.NULL


def sell_only_decide() -> Action:
    return Action.NULL


class RulesPolicy:
    def __init__(self, thresholds: Thresholds):
        self.thresholds = thresholds

    def decide(self, observation: Observation) -> Action:
        return rules_decide(observation.lmp, self.thresholds)

    def reset(self) -> None:
        pass


class SellOnlyPolicy:
    def decide(self, observation: Observation) -> Action:
        return sell_only_decide()

    def reset(self) -> None:
        pass


class ActionSequencePolicy:
    """Replays a fixed action list, indexed by the observation's step."""

    def __init__(self, actions):
        self.actions = [Action(a) for a in actions]

    def decide(self, observation: Observation) -> Action:
        return self.actions[observation.step]

    def reset(self) -> None:
        pass


@dataclass
class EvaluationRun:
    """One episode: actions, rewards, post-step states and flows per step.

    ``lmp``/``solar`` and ``start_time`` are carried along so the run can be
    decomposed and binned by hour without the source series.
    """

    actions: list[Action]
    rewards: np.ndarray
    soc_trace: list[BatteryState]
    flow_trace: list[FlowLedger]
    lmp: np.ndarray
    solar: np.ndarray
    start_time: datetime | None = None
    dt: float = 0.25
    initial: BatteryState = BatteryState()

    @property
    def total_profit(self) -> float:
        return float(np.sum(self.rewards))

    def __len__(self) -> int:
        return len(self.actions)

    def soc(self) -> np.ndarray:
        return np.array([s.total() for s in self.soc_trace])

    def soc_components(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([s.e_solar for s in self.soc_trace]),
                np.array([s.e_grid for s in self.soc_trace]))

    def cumulative_profit(self) -> np.ndarray:
        return np.cumsum(self.rewards)

    def hour_of_day(self) -> np.ndarray:
        h0 = 0.0 if self.start_time is None else self.start_time.hour + self.start_time.minute / 60.0
        return (h0 + self.dt * np.arange(len(self))) % 24.0


def rollout(actions, series: SeriesSet, params: BatteryParams,
            initial: BatteryState = BatteryState()) -> EvaluationRun:
    """Play a fixed action sequence through the true kernel."""
    return evaluate_policy(ActionSequencePolicy(actions), series, params, initial)


def evaluate_policy(policy: Policy, series: SeriesSet, params: BatteryParams,
                    initial: BatteryState = BatteryState()) -> EvaluationRun:
    n = len(series)
    if n == 0:
        raise ValueError("cannot evaluate on an empty series")
    lmp_win = window_matrix(series.lmp)
    solar_win = window_matrix(series.solar)
    lmp = series.lmp.tolist()
    solar = series.solar.tolist()
    policy.reset()
    state = initial
    actions, rewards, states, flows = [], np.empty(n), [], []
    for t in range(n):
        obs = Observation(state.total(), lmp_win[t], solar_win[t], step=t, steps_remaining=n - t)
        action = Action(policy.decide(obs))
        out = step(state, action, ExogenousSample(lmp[t], solar[t]), params)
        actions.append(action)
        rewards[t] = out.reward
        states.append(out.next_state)
        flows.append(out.flows)
        state = out.next_state
    return EvaluationRun(actions, rewards, states, flows, np.array(series.lmp), np.array(series.solar),
                         series.start_time, params.dt, initial)
