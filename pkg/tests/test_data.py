from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from bess_lab.data import (
    DEMAND_HEADER,
    LMP_HEADER,
    SOLAR_HEADER,
    STEPS_PER_WEEK,
    AlignmentError,
    InsufficientData,
    SchemaError,
    ScenarioConfig,
    chronological_split,
    diurnal_price,
    load_series,
    save_series,
    scale_pv,
    series_from_arrays,
    synthesize,
    upsample_hold,
    write_csv_series,
)

T0 = datetime(2023, 1, 2, tzinfo=timezone.utc)
Q = timedelta(minutes=15)
H = timedelta(hours=1)


def _write(path, header, times, values):
    write_csv_series(path, header, times, values)
    return path


def test_zero_order_hold():
    assert list(upsample_hold(np.array([1.0, 2.0]))) == [1, 1, 1, 1, 2, 2, 2, 2]


def test_hold_preserves_hourly_energy():
    hourly = np.array([3.0, 7.5, 0.0, 12.25])
    q = upsample_hold(hourly)
    assert np.allclose(q.reshape(-1, 4).sum(axis=1) * 0.25, hourly * 1.0)


def test_load_upsamples_and_aligns(tmp_path):
    lmp = _write(tmp_path / "lmp.csv", LMP_HEADER, [T0 + k * Q for k in range(8)], np.arange(8.0))
    sol = _write(tmp_path / "solar.csv", SOLAR_HEADER, [T0, T0 + H], [1.0, 2.0])
    s = load_series(lmp, sol)
    assert list(s.solar) == [1, 1, 1, 1, 2, 2, 2, 2]
    assert list(s.lmp) == list(range(8))
    assert s.start_time == T0 and s.step_hours == 0.25


def test_load_trims_to_overlap(tmp_path):
    lmp = _write(tmp_path / "lmp.csv", LMP_HEADER, [T0 + k * Q for k in range(12)], np.arange(12.0))
    sol = _write(tmp_path / "solar.csv", SOLAR_HEADER, [T0 + H, T0 + 2 * H, T0 + 3 * H], [5.0, 6.0, 7.0])
    s = load_series(lmp, sol)
    assert s.start_time == T0 + H
    assert list(s.lmp) == list(range(4, 12))
    assert list(s.solar) == [5.0] * 4 + [6.0] * 4


def test_single_gap_is_forward_filled(tmp_path):
    times = [T0 + k * Q for k in range(6) if k != 3]
    vals = [10.0, 11.0, 12.0, 14.0, 15.0]
    s = load_series(_write(tmp_path / "lmp.csv", LMP_HEADER, times, vals))
    assert list(s.lmp) == [10, 11, 12, 12, 14, 15]


def test_larger_gap_is_an_error(tmp_path):
    times = [T0 + k * Q for k in (0, 1, 4, 5)]
    with pytest.raises(AlignmentError):
        load_series(_write(tmp_path / "lmp.csv", LMP_HEADER, times, [1.0, 2.0, 3.0, 4.0]))


def test_no_overlap_is_an_error(tmp_path):
    lmp = _write(tmp_path / "lmp.csv", LMP_HEADER, [T0 + k * Q for k in range(4)], np.ones(4))
    sol = _write(tmp_path / "solar.csv", SOLAR_HEADER, [T0 + 5 * H], [1.0])
    with pytest.raises(AlignmentError):
        load_series(lmp, sol)


def test_bad_header(tmp_path):
    p = tmp_path / "lmp.csv"
    p.write_text("time,price\n2023-01-02T00:00:00Z,1.0\n")
    with pytest.raises(SchemaError):
        load_series(p)


def test_bad_row(tmp_path):
    p = tmp_path / "lmp.csv"
    p.write_text("timestamp,lmp_usd_per_mwh\n2023-01-02T00:00:00Z,abc\n")
    with pytest.raises(SchemaError):
        load_series(p)


def test_non_increasing_timestamps(tmp_path):
    p = tmp_path / "lmp.csv"
    p.write_text("timestamp,lmp_usd_per_mwh\n2023-01-02T00:15:00Z,1\n2023-01-02T00:00:00Z,2\n")
    with pytest.raises(SchemaError):
        load_series(p)


def test_empty_solar_file_gives_zeros(tmp_path):
    lmp = _write(tmp_path / "lmp.csv", LMP_HEADER, [T0 + k * Q for k in range(8)], np.arange(8.0))
    sol = tmp_path / "solar.csv"
    sol.write_text("timestamp,power_mw\n")
    s = scale_pv(load_series(lmp, sol), ScenarioConfig(pv_sizing="zero"))
    assert len(s) == 8 and np.all(s.solar == 0.0)


def test_demand_loaded(tmp_path):
    lmp = _write(tmp_path / "lmp.csv", LMP_HEADER, [T0 + k * Q for k in range(8)], np.arange(8.0))
    dem = _write(tmp_path / "demand.csv", DEMAND_HEADER, [T0, T0 + H], [2000.0, 2100.0])
    s = load_series(lmp, None, dem)
    assert list(s.demand) == [2000.0] * 4 + [2100.0] * 4


def test_csv_round_trip(tmp_path):
    s = synthesize(3, 2, "summer-like")
    paths = save_series(s, tmp_path)
    back = load_series(paths["lmp"], paths["solar"], paths["demand"])
    assert np.array_equal(back.lmp, s.lmp)
    assert np.array_equal(back.solar, s.solar)
    assert np.array_equal(back.demand, s.demand)
    assert back.start_time == s.start_time


def test_scale_pv():
    s = synthesize(0, 3)
    assert np.all(scale_pv(s, ScenarioConfig(pv_sizing="zero")).solar == 0)
    assert np.array_equal(scale_pv(s, ScenarioConfig(pv_sizing="large")).solar, 2 * s.solar)
    small = scale_pv(s, ScenarioConfig(pv_sizing="small"))
    assert small.solar.mean() == pytest.approx(9.1)
    assert np.array_equal(small.lmp, s.lmp)


def test_scenario_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(pv_sizing="zero", pv_scale=1.0)
    with pytest.raises(ValueError):
        ScenarioConfig(pv_sizing="small", pv_scale=0.0)
    with pytest.raises(ValueError):
        ScenarioConfig(season="autumn")
    assert ScenarioConfig(pv_sizing="large").pv_scale == 2.0


def test_split_thirteen_weeks():
    s = series_from_arrays(np.arange(13 * STEPS_PER_WEEK, dtype=float))
    train, test = chronological_split(s, ScenarioConfig())
    assert len(train) == 12 * STEPS_PER_WEEK and len(test) == STEPS_PER_WEEK
    assert train.lmp[-1] + 1 == test.lmp[0]
    assert test.offset == len(train)
    assert test.start_time == train.start_time + len(train) * Q


def test_split_insufficient():
    s = series_from_arrays(np.zeros(12 * STEPS_PER_WEEK))
    with pytest.raises(InsufficientData):
        chronological_split(s, ScenarioConfig())


def test_split_uses_prefix():
    s = series_from_arrays(np.arange(15 * STEPS_PER_WEEK, dtype=float))
    train, test = chronological_split(s, ScenarioConfig(split_train_weeks=2, split_test_weeks=1))
    assert train.lmp[0] == 0 and test.lmp[-1] == 3 * STEPS_PER_WEEK - 1
    assert not set(train.lmp) & set(test.lmp)


@pytest.mark.parametrize("profile", ["winter-like", "summer-like"])
def test_synthesize_deterministic(profile):
    a, b = synthesize(7, 5, profile), synthesize(7, 5, profile)
    for x, y in ((a.lmp, b.lmp), (a.solar, b.solar), (a.demand, b.demand)):
        assert np.array_equal(x, y)
    assert len(a) == 5 * 96
    assert not np.array_equal(a.lmp, synthesize(8, 5, profile).lmp)


@pytest.mark.parametrize("profile", ["winter-like", "summer-like"])
def test_synthetic_solar_is_zero_at_midnight(profile):
    s = synthesize(1, 7, profile)
    hours = s.hour_of_day()
    assert np.all(s.solar[hours < 1.0] == 0.0)
    assert np.all(s.solar >= 0.0) and s.solar.max() > 0


def test_periodic_synthesis_repeats_daily():
    s = synthesize(0, 4, "summer-like", periodic=True)
    days = s.lmp.reshape(4, 96)
    assert np.array_equal(days, np.tile(days[0], (4, 1)))


def test_summer_spikes_per_week():
    p = 25.0  # summer-like sinusoid amplitude
    counts = []
    for seed in range(100):
        s = synthesize(seed, 7, "summer-like")
        excess = s.lmp - diurnal_price(s.hour_of_day(), "summer-like")
        hits = excess >= 3 * p
        # count separate runs of spiked steps
        counts.append(int(np.sum(hits[1:] & ~hits[:-1]) + hits[0]))
    assert np.mean(counts) >= 1.0
