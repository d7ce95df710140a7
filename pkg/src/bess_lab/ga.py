"""Genetic-algorithm tuning of the (buy_below, sell_above) price thresholds."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from bess_lab.controllers import RulesPolicy, Thresholds, evaluate_policy, rollout
from bess_lab.data import SeriesSet
from bess_lab.model import Action, BatteryParams, BatteryState

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaConfig:
    """GA settings.  ``generations`` counts evaluated populations, initial one included.

    ``price_bounds=None`` uses the min/max LMP of the tuning series.
    """

    population_size: int = 32
    generations: int = 64
    tournament_size: int = 3
    crossover_rate: float = 0.9
    mutation_rate: float = 0.3
    mutation_sigma: float = 5.0
    price_bounds: tuple[float, float] | None = None
    seed: int = 0
    elitism: bool = True

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if self.tournament_size < 1:
            raise ValueError("tournament_size must be >= 1")
        for name in ("crossover_rate", "mutation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.mutation_sigma < 0:
            raise ValueError("mutation_sigma must be non-negative")
        if self.price_bounds is not None and not self.price_bounds[0] < self.price_bounds[1]:
            raise ValueError("price_bounds must satisfy lo < hi")


@dataclass
class GaResult:
    thresholds: Thresholds
    fitness: float
    best_history: list[float] = field(default_factory=list)
    evaluations: int = 0


def threshold_actions(lmp: np.ndarray, th: Thresholds) -> np.ndarray:
    """Vectorised rules_decide over a price array."""
    return np.where(lmp <= th.buy_below, int(Action.BUY),
                    np.where(lmp >= th.sell_above, int(Action.SELL), int(Action.NULL))).astype(np.int8)


class ThresholdFitness:
    """Total profit of the rules policy, memoised on the induced action sequence.

    Rules decisions depend only on the current price, so two threshold pairs
    inducing the same actions yield the same run.
    """

    def __init__(self, series: SeriesSet, params: BatteryParams, initial: BatteryState = BatteryState()):
        self.series = series
        self.params = params
        self.initial = initial
        self._cache: dict[bytes, float] = {}

    def __call__(self, th: Thresholds) -> float:
        actions = threshold_actions(self.series.lmp, th)
        key = actions.tobytes()
        if key not in self._cache:
            self._cache[key] = rollout(actions, self.series, self.params, self.initial).total_profit
        return self._cache[key]

    def uncached(self, th: Thresholds) -> float:
        return evaluate_policy(RulesPolicy(th), self.series, self.params, self.initial).total_profit


def _tournament(rng: np.random.Generator, fitness: np.ndarray, k: int) -> int:
    picks = rng.integers(0, len(fitness), size=k)
    # ties go to the earliest pick
    return int(picks[np.argmax(fitness[picks])])


def run_ga(fitness_fn: Callable[[Thresholds], float], config: GaConfig,
           bounds: tuple[float, float],
           map_fn: Callable[[Callable, Iterable], Iterable] = map) -> GaResult:
    """Real-coded GA: tournament selection, uniform crossover, Gaussian mutation.

    ``map_fn`` may evaluate a generation concurrently (e.g. an executor's
    ``map``); all random draws happen here, in order.
    """
    lo, hi = bounds
    rng = np.random.default_rng(config.seed)
    pop = rng.uniform(lo, hi, size=(config.population_size, 2))

    def evaluate(p: np.ndarray) -> np.ndarray:
        return np.array(list(map_fn(fitness_fn, [Thresholds(float(a), float(b)) for a, b in p])))

    fit = evaluate(pop)
    n_evals = len(pop)
    i = int(np.argmax(fit))
    best, best_fit = pop[i].copy(), float(fit[i])
    history = [best_fit]

    for gen in range(1, config.generations):
        children = np.empty_like(pop)
        start = 0
        if config.elitism:
            children[0] = best
            start = 1
        j = start
        while j < config.population_size:
            a = pop[_tournament(rng, fit, config.tournament_size)].copy()
            b = pop[_tournament(rng, fit, config.tournament_size)].copy()
            if rng.random() < config.crossover_rate:
                swap = rng.random(2) < 0.5
                a[swap], b[swap] = b[swap], a[swap].copy()
            for child in (a, b):
                if j >= config.population_size:
                    break
                mutate = rng.random(2) < config.mutation_rate
                child = child + mutate * rng.normal(0.0, config.mutation_sigma, 2)
                children[j] = np.clip(child, lo, hi)
                j += 1
        pop = children
        fit = evaluate(pop)
        n_evals += len(pop)
        i = int(np.argmax(fit))
        if fit[i] > best_fit:
            best, best_fit = pop[i].copy(), float(fit[i])
        history.append(best_fit)
        log.debug("generation %d: best %.2f", gen, best_fit)

    return GaResult(Thresholds(float(best[0]), float(best[1])), best_fit, history, n_evals)


def ga_tune(series: SeriesSet, params: BatteryParams, config: GaConfig = GaConfig(),
            initial: BatteryState = BatteryState(),
            map_fn: Callable[[Callable, Iterable], Iterable] = map) -> tuple[Thresholds, float]:
    """Tune rules thresholds on a training series; returns the best pair ever seen and its profit."""
    result = tune(series, params, config, initial, map_fn)
    return result.thresholds, result.fitness


def tune(series: SeriesSet, params: BatteryParams, config: GaConfig = GaConfig(),
         initial: BatteryState = BatteryState(),
         map_fn: Callable[[Callable, Iterable], Iterable] = map) -> GaResult:
    if config.price_bounds is None:
        lo, hi = float(np.min(series.lmp)), float(np.max(series.lmp))
        if lo == hi:
            lo, hi = lo - 1.0, hi + 1.0
    else:
        lo, hi = config.price_bounds
    return run_ga(ThresholdFitness(series, params, initial), config, (lo, hi), map_fn)
