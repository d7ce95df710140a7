import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bess_lab.model import (
    OBS_DIM,
    WINDOW,
    Action,
    BatteryParams,
    BatteryState,
    ExogenousSample,
    apply_self_discharge,
    make_observation,
    next_totals,
    step,
    window_matrix,
)

P = BatteryParams()


def grid(e):
    return BatteryState(0.0, e)


# ---------------------------------------------------------------- parameters


@pytest.mark.parametrize("bad", [
    dict(e_max=0), dict(charge_rate=-1), dict(dt=0), dict(eta=0), dict(eta=1.1),
    dict(beta=1.0), dict(beta=-0.1), dict(self_discharge_soc_threshold=1.5),
])
def test_params_reject_invalid(bad):
    with pytest.raises(ValueError):
        BatteryParams(**bad)


def test_quanta():
    assert P.charge_quantum == pytest.approx(23.25)
    assert P.discharge_quantum == pytest.approx(25.0)
    assert P.decay_threshold == pytest.approx(360.0)


def test_action_indices_and_count():
    assert [int(a) for a in (Action.BUY, Action.SELL, Action.NULL)] == [0, 1, 2]
    assert len(Action) == 3


def test_sample_validation():
    with pytest.raises(ValueError):
        ExogenousSample(10.0, -1.0)
    with pytest.raises(ValueError):
        ExogenousSample(10.0, 0.0, demand=-5.0)
    assert ExogenousSample(-30.0).lmp == -30.0  # negative prices pass through


# ---------------------------------------------------------------- self-discharge


def test_self_discharge_full_battery():
    s, loss = apply_self_discharge(grid(400.0), P)
    assert s.total() == pytest.approx(399.58333333, abs=1e-6)
    assert loss == pytest.approx(0.41666667, abs=1e-6)


def test_self_discharge_below_threshold():
    s, loss = apply_self_discharge(grid(100.0), P)
    assert s == grid(100.0) and loss == 0.0


def test_self_discharge_at_threshold_applies():
    s, loss = apply_self_discharge(grid(360.0), P)
    assert loss > 0
    assert s.total() == pytest.approx(360.0 * (1 - P.beta))


def test_self_discharge_is_proportional():
    s, _ = apply_self_discharge(BatteryState(100.0, 300.0), P)
    assert s.e_solar / s.e_grid == pytest.approx(1 / 3)


# ---------------------------------------------------------------- kernel examples


def test_buy_example():
    out = step(grid(100.0), Action.BUY, ExogenousSample(20.0), P)
    assert out.next_state.total() == pytest.approx(123.25)
    assert out.reward == pytest.approx(-500.0)


def test_sell_example():
    out = step(grid(200.0), Action.SELL, ExogenousSample(40.0, 9.1), P)
    assert out.next_state.total() == pytest.approx(175.0)
    assert out.reward == pytest.approx(1021.0)


def test_buy_clipped_at_full():
    out = step(grid(400.0), Action.BUY, ExogenousSample(20.0), P)
    assert out.next_state.total() == pytest.approx(400.0)
    stored = 400.0 - 400.0 * (1 - P.beta)
    assert out.reward == pytest.approx(-stored / 0.93 * 20.0)
    assert round(out.reward, 2) == -8.96


def test_sell_clipped_at_empty():
    out = step(grid(10.0), Action.SELL, ExogenousSample(50.0), P)
    assert out.next_state.total() == 0.0
    assert out.reward == pytest.approx(0.93 * 10.0 * 50.0)
    out = step(grid(0.0), Action.SELL, ExogenousSample(50.0), P)
    assert out.reward == 0.0 and out.next_state.total() == 0.0


def test_null_sells_solar():
    out = step(grid(50.0), Action.NULL, ExogenousSample(30.0, 8.0), P)
    assert out.next_state == grid(50.0)
    assert out.reward == pytest.approx(8.0 * 0.25 * 30.0)


def test_buy_credits_solar_first():
    out = step(BatteryState(), Action.BUY, ExogenousSample(20.0, 40.0), P)
    # 40 MW of solar covers 10 MWh of the 25 MWh drawn
    assert out.next_state.e_solar == pytest.approx(0.93 * 10.0)
    assert out.next_state.e_grid == pytest.approx(0.93 * 15.0)
    assert out.flows.solar_sold_energy == pytest.approx(0.0)


def test_buy_with_solar_above_charge_rate_sells_surplus():
    out = step(BatteryState(), Action.BUY, ExogenousSample(20.0, 150.0), P)
    assert out.next_state.e_solar == pytest.approx(23.25)
    assert out.next_state.e_grid == pytest.approx(0.0)
    assert out.flows.solar_sold_energy == pytest.approx(50.0 * 0.25)
    assert out.reward == pytest.approx((-25.0 + 150.0 * 0.25) * 20.0)


def test_sell_is_proportional_across_provenance():
    out = step(BatteryState(50.0, 150.0), Action.SELL, ExogenousSample(40.0), P)
    assert out.next_state.e_solar == pytest.approx(50.0 * 175 / 200)
    assert out.flows.discharge_from_solar == pytest.approx(25.0 / 4)


def test_round_trip_loses_money():
    a = step(BatteryState(), Action.BUY, ExogenousSample(30.0), P)
    b = step(a.next_state, Action.SELL, ExogenousSample(30.0), P)
    assert a.reward + b.reward < 0


def test_next_totals_matches_step():
    totals = np.array([0.0, 10.0, 100.0, 359.9, 360.0, 390.0, 400.0])
    nxt, coef = next_totals(totals, P)
    for i, e in enumerate(totals):
        for a in Action:
            out = step(grid(e), a, ExogenousSample(17.0), P)
            assert nxt[a, i] == pytest.approx(out.next_state.total(), abs=1e-12)
            assert 17.0 * coef[a, i] == pytest.approx(out.reward, abs=1e-9)


# ---------------------------------------------------------------- observations


def _history(n):
    return [ExogenousSample(float(k), float(2 * k)) for k in range(n)]


def test_observation_at_start_is_padded():
    obs = make_observation(_history(30), 0, grid(5.0))
    assert np.all(obs.lmp_window == 0.0) and len(obs.lmp_window) == WINDOW
    assert np.all(obs.solar_window == 0.0)
    assert obs.as_vector().shape == (OBS_DIM,)
    assert obs.as_vector()[0] == 5.0


def test_observation_exact_window():
    obs = make_observation(_history(30), 16, grid(0.0))
    assert list(obs.lmp_window) == list(range(17))


def test_observation_sliding_window():
    obs = make_observation(_history(30), 20, grid(0.0))
    assert list(obs.lmp_window) == list(range(4, 21))
    assert list(obs.solar_window) == [2.0 * k for k in range(4, 21)]
    assert obs.lmp == 20.0 and obs.step == 20 and obs.steps_remaining == 10


def test_observation_out_of_range():
    with pytest.raises(IndexError):
        make_observation(_history(3), 3, grid(0.0))


def test_window_matrix_agrees_with_make_observation():
    hist = _history(25)
    w = window_matrix(np.array([h.lmp for h in hist]))
    for t in range(25):
        assert np.array_equal(w[t], make_observation(hist, t, grid(0.0)).lmp_window)


# ---------------------------------------------------------------- properties

actions = st.lists(st.sampled_from(list(Action)), min_size=1, max_size=60)
prices = st.floats(-100.0, 1000.0, allow_nan=False)
solar_power = st.floats(0.0, 150.0, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(actions, st.lists(st.tuples(prices, solar_power), min_size=60, max_size=60),
       st.floats(0.0, 400.0), st.floats(0.0, 1.0))
def test_kernel_invariants(seq, exo, e0, frac):
    state = BatteryState(e0 * frac, e0 * (1 - frac))
    for a, (lmp, s) in zip(seq, exo):
        out = step(state, a, ExogenousSample(lmp, s), P)
        nxt, f = out.next_state, out.flows
        # projection and provenance
        assert -1e-9 <= nxt.total() <= P.e_max + 1e-9
        assert nxt.e_solar >= -1e-12 and nxt.e_grid >= -1e-12
        # reward equals the independently filled flow ledger
        assert out.reward == pytest.approx(f.cash_flow(lmp), rel=1e-9, abs=1e-9)
        # energy balance
        gained = P.eta * (f.grid_buy_energy + f.solar_stored_energy)
        expect = state.total() - f.self_discharge_loss + gained - f.battery_discharge_energy
        assert nxt.total() == pytest.approx(expect, abs=1e-9)
        for v in (f.grid_buy_energy, f.grid_sell_energy, f.solar_sold_energy, f.solar_stored_energy,
                  f.battery_discharge_energy, f.self_discharge_loss):
            assert v >= -1e-12
        state = nxt


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(list(Action)), min_size=1, max_size=40), st.floats(1.0, 500.0),
       st.floats(0.0, 400.0))
def test_lossless_kernel_telescopes(seq, lmp, e0):
    # with eta=1 and beta=0 the cash made is exactly the energy drawn down times the price,
    # so any sequence that returns to its start earns exactly 0
    p = P.replace(eta=1.0, beta=0.0)
    state, total = grid(e0), 0.0
    for a in seq:
        out = step(state, a, ExogenousSample(lmp), p)
        total += out.reward
        state = out.next_state
    assert total == pytest.approx((e0 - state.total()) * lmp, abs=1e-6)


def test_lossless_round_trip_is_exactly_zero():
    p = P.replace(eta=1.0, beta=0.0)
    state, total = grid(0.0), 0.0
    for a in [Action.BUY] * 4 + [Action.NULL] + [Action.SELL] * 4:
        out = step(state, a, ExogenousSample(37.5), p)
        total += out.reward
        state = out.next_state
    assert state.total() == 0.0
    assert total == 0.0
