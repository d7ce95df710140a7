"""Command-line experiment runner.

Subcommands: gen-data, tune-rules, train-dqn, run, compare.  Set
``BESS_LAB_LOG`` (e.g. ``DEBUG``) to change the log level.

Exit codes: 0 ok, 2 usage/config error, 3 data error, 4 DQN divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from bess_lab.controllers import EvaluationRun, RulesPolicy, SellOnlyPolicy, evaluate_policy
from bess_lab.data import (
    AlignmentError,
    InsufficientData,
    ScenarioConfig,
    SchemaError,
    chronological_split,
    format_timestamp,
    load_series,
    save_series,
    scale_pv,
    synthesize,
)
from bess_lab.dqn import DivergenceError, DqnConfig, train
from bess_lab.evaluation import SeedEnsemble, net_load_series, summarize
from bess_lab.ga import GaConfig, ga_tune
from bess_lab.model import BatteryParams, BatteryState
from bess_lab.planning import (
    OracleConfig,
    RhcConfig,
    SeasonalNaiveForecaster,
    GroundTruthForecaster,
    dp_oracle,
    rhc_policy,
)

log = logging.getLogger("bess_lab")

METHODS = ("rules", "dqn", "rhc", "oracle-exact", "oracle-relaxed", "sell-only")
EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4
TRAJECTORY_COLUMNS = ("step", "timestamp", "lmp_usd_per_mwh", "solar_mw", "action", "soc_mwh",
                      "soc_solar_mwh", "soc_grid_mwh", "reward_usd", "cum_profit_usd", "net_load_mw")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- config


def _build(cls, block: dict | None, what: str):
    block = dict(block or {})
    known = {f.name for f in fields(cls) if f.init}
    unknown = set(block) - known
    if unknown:
        raise ConfigError(f"{what}: unknown keys {sorted(unknown)}")
    for k, v in block.items():
        if isinstance(v, list):
            block[k] = tuple(v)
    try:
        return cls(**block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}") from None


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig
    battery: BatteryParams
    method: str
    data: dict[str, str | None]
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    output_dir: Path = Path("out")
    rules: GaConfig = GaConfig()
    dqn: DqnConfig = DqnConfig()
    rhc: RhcConfig = RhcConfig()
    rhc_forecaster: str = "seasonal-naive"
    oracle: OracleConfig = OracleConfig()
    initial_soc_mwh: float = 0.0

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(raw, base=path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base: Path = Path(".")) -> "ExperimentConfig":
        allowed = {"scenario", "battery", "method", "data", "seeds", "output_dir", "rules", "dqn",
                   "rhc", "oracle", "initial_soc_mwh"}
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        method = raw.get("method")
        if method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
        data = dict(raw.get("data") or {})
        if "lmp" not in data:
            raise ConfigError("data.lmp is required")
        resolved = {}
        for key in ("lmp", "solar", "demand"):
            p = data.pop(key, None)
            resolved[key] = None if p is None else str((base / p) if not Path(p).is_absolute() else Path(p))
        if data:
            raise ConfigError(f"data: unknown keys {sorted(data)}")
        for key in ("lmp", "solar", "demand"):
            if resolved[key] is not None and not Path(resolved[key]).exists():
                raise ConfigError(f"data file not found: {resolved[key]}")
        seeds = raw.get("seeds", list(range(10)))
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        rhc_block = dict(raw.get("rhc") or {})
        forecaster = rhc_block.pop("forecaster", "seasonal-naive")
        if forecaster not in ("seasonal-naive", "ground-truth"):
            raise ConfigError(f"rhc.forecaster must be seasonal-naive or ground-truth, got {forecaster!r}")
        rhc_oracle = _build(OracleConfig, {"solver": "lattice", **rhc_block.pop("oracle", {})}, "rhc.oracle")
        rhc = _build(RhcConfig, rhc_block, "rhc")
        rhc = RhcConfig(rhc.horizon_steps, rhc.replan_every, rhc_oracle)
        out_dir = Path(raw.get("output_dir", "out"))
        return cls(
            scenario=_build(ScenarioConfig, raw.get("scenario"), "scenario"),
            battery=_build(BatteryParams, raw.get("battery"), "battery"),
            method=method,
            data=resolved,
            seeds=seeds,
            output_dir=out_dir if out_dir.is_absolute() else base / out_dir,
            rules=_build(GaConfig, raw.get("rules"), "rules"),
            dqn=_build(DqnConfig, raw.get("dqn"), "dqn"),
            rhc=rhc,
            rhc_forecaster=forecaster,
            oracle=_build(OracleConfig, raw.get("oracle"), "oracle"),
            initial_soc_mwh=float(raw.get("initial_soc_mwh", 0.0)),
        )

    def scenario_dict(self) -> dict:
        return asdict(self.scenario)


def load_experiment_data(cfg: ExperimentConfig):
    series = load_series(cfg.data["lmp"], cfg.data.get("solar"), cfg.data.get("demand"))
    series = scale_pv(series, cfg.scenario)
    return chronological_split(series, cfg.scenario)


# --------------------------------------------------------------------------- per-seed work


def _run_seed(cfg: ExperimentConfig, train_s, test_s, seed: int) -> tuple[EvaluationRun, dict]:
    params = cfg.battery
    initial = BatteryState(0.0, cfg.initial_soc_mwh)
    extra = {}
    if cfg.method == "rules":
        th, fit = ga_tune(train_s, params, GaConfig(**{**asdict(cfg.rules), "seed": seed}), initial)
        extra = {"thresholds": th.to_dict(), "train_profit": fit}
        return evaluate_policy(RulesPolicy(th), test_s, params, initial), extra
    if cfg.method == "dqn":
        policy = train(train_s, params, DqnConfig(**{**cfg.dqn.to_dict(), "seed": seed}), initial)
        return evaluate_policy(policy, test_s, params, initial), extra
    if cfg.method == "rhc":
        if cfg.rhc_forecaster == "ground-truth":
            fc = GroundTruthForecaster(np.concatenate((train_s.lmp, test_s.lmp)))
        else:
            fc = SeasonalNaiveForecaster()
        policy = rhc_policy(fc, cfg.rhc, params, train_s.lmp, train_s.solar)
        return evaluate_policy(policy, test_s, params, initial), extra
    if cfg.method in ("oracle-exact", "oracle-relaxed"):
        mode = cfg.method.split("-")[1]
        ocfg = OracleConfig(mode, cfg.oracle.soc_grid, cfg.oracle.solver, cfg.oracle.max_states,
                            cfg.oracle.end_empty)
        return dp_oracle(test_s, params, ocfg, initial), extra
    return evaluate_policy(SellOnlyPolicy(), test_s, params, initial), extra


def _seed_task(args):
    cfg, train_s, test_s, seed = args
    return _run_seed(cfg, train_s, test_s, seed)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_trajectory(path, run: EvaluationRun, test_s) -> None:
    net = net_load_series(run)
    cum = run.cumulative_profit()
    stamps = test_s.timestamps()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for t, (a, s) in enumerate(zip(run.actions, run.soc_trace)):
            w.writerow((t, format_timestamp(stamps[t]), _fmt(run.lmp[t]), _fmt(run.solar[t]), a.name.lower(),
                        _fmt(s.total()), _fmt(s.e_solar), _fmt(s.e_grid), _fmt(run.rewards[t]),
                        _fmt(cum[t]), _fmt(net[t])))


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    train_s, test_s = load_experiment_data(cfg)
    deterministic = cfg.method in ("rhc", "oracle-exact", "oracle-relaxed", "sell-only")
    todo = cfg.seeds[:1] if deterministic else cfg.seeds
    tasks = [(cfg, train_s, test_s, s) for s in todo]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_seed_task, tasks))
    else:
        results = [_seed_task(t) for t in tasks]
    if deterministic:
        results = results * len(cfg.seeds)

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    per_seed_extra = {}
    for seed, (run, extra) in zip(cfg.seeds, results):
        write_trajectory(out / f"trajectory_seed{seed}.csv", run, test_s)
        runs.append(run)
        if extra:
            per_seed_extra[str(seed)] = extra
    summary = summarize(cfg.method, cfg.scenario_dict(), SeedEnsemble(runs, list(cfg.seeds)), test_s.demand)
    summary["test_steps"] = len(test_s)
    if per_seed_extra:
        summary["per_seed"] = per_seed_extra
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("%s: mean profit %.2f over %d seeds -> %s", cfg.method, summary["mean"], len(runs), out)
    return summary


# --------------------------------------------------------------------------- compare


def scenario_key(summary: dict) -> tuple[str, str, str]:
    sc = summary.get("scenario", {})
    return (str(sc.get("node_label", "")), str(sc.get("season", "")), str(sc.get("pv_sizing", "")))


def compare_rows(summaries: list[dict]) -> list[dict]:
    oracle = {}
    for s in summaries:
        if s["method"] in ("oracle-exact", "oracle-relaxed"):
            key = scenario_key(s)
            # exact preferred over relaxed when both are present
            if key not in oracle or s["method"] == "oracle-exact":
                oracle[key] = s
    if len({scenario_key(s) for s in summaries}) > 1:
        log.warning("summaries cover more than one scenario; percent-of-oracle uses per-scenario oracles")
    rows = []
    for s in summaries:
        key = scenario_key(s)
        ref = oracle.get(key)
        pct = ""
        if ref is not None and ref["mean"] != 0:
            pct = f"{100.0 * s['mean'] / ref['mean']:.1f}"
        elif len(summaries) > 1 and ref is None:
            log.warning("no oracle summary for scenario %s", "/".join(key))
        rows.append({"method": s["method"], "node_label": key[0], "season": key[1], "pv_sizing": key[2],
                     "mean": s["mean"], "ci_low": s["ci_low"], "ci_high": s["ci_high"],
                     "percent_of_oracle": pct})
    return rows


def write_compare(rows: list[dict], fh) -> None:
    cols = ("method", "node_label", "season", "pv_sizing", "mean", "ci_low", "ci_high", "percent_of_oracle")
    w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, **{k: _fmt(r[k]) for k in ("mean", "ci_low", "ci_high")}})


# --------------------------------------------------------------------------- commands


def _seed_list(values) -> list[int] | None:
    if not values:
        return None
    out = []
    for v in values:
        out += [int(x) for x in str(v).split(",") if x.strip()]
    return out


def cmd_gen_data(args) -> int:
    series = synthesize(args.seed, args.days, args.profile, periodic=args.periodic)
    paths = save_series(series, args.out)
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return 0


def _config_with_overrides(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    seeds = _seed_list(args.seeds)
    if seeds:
        cfg.seeds = seeds
    if args.out:
        cfg.output_dir = Path(args.out)
    return cfg


def cmd_tune_rules(args) -> int:
    cfg = _config_with_overrides(args)
    train_s, _ = load_experiment_data(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    initial = BatteryState(0.0, cfg.initial_soc_mwh)
    for seed in cfg.seeds:
        th, fit = ga_tune(train_s, cfg.battery, GaConfig(**{**asdict(cfg.rules), "seed": seed}), initial)
        path = cfg.output_dir / f"thresholds_seed{seed}.json"
        path.write_text(json.dumps(th.to_dict(), indent=2, sort_keys=True) + "\n")
        log.info("seed %d: %s (train profit %.2f)", seed, th, fit)
    return 0


def cmd_train_dqn(args) -> int:
    cfg = _config_with_overrides(args)
    train_s, _ = load_experiment_data(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    initial = BatteryState(0.0, cfg.initial_soc_mwh)
    for seed in cfg.seeds:
        policy = train(train_s, cfg.battery, DqnConfig(**{**cfg.dqn.to_dict(), "seed": seed}), initial)
        policy.save(cfg.output_dir / f"dqn_seed{seed}.bin")
    return 0


def cmd_run(args) -> int:
    cfg = _config_with_overrides(args)
    run_experiment(cfg, jobs=args.jobs)
    return 0


def cmd_compare(args) -> int:
    summaries = []
    for p in args.summaries:
        try:
            summaries.append(json.loads(Path(p).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read summary {p}: {exc}") from None
    rows = compare_rows(summaries)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_compare(rows, fh)
    else:
        write_compare(rows, sys.stdout)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bess-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic lmp/solar/demand CSVs")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--days", type=int, default=91)
    g.add_argument("--profile", choices=("winter-like", "summer-like"), default="winter-like")
    g.add_argument("--periodic", action="store_true", help="drop all noise (exactly 24 h periodic)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    for name, func, help_ in (("tune-rules", cmd_tune_rules, "GA-tune rules thresholds per seed"),
                              ("train-dqn", cmd_train_dqn, "train DQN weights per seed"),
                              ("run", cmd_run, "train/tune on the train split, evaluate on test")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--seeds", "--seed", nargs="+", help="override config seeds (comma or space separated)")
        p.add_argument("--out", help="override output_dir")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for per-seed runs")
        p.set_defaults(func=func)

    c = sub.add_parser("compare", help="tabulate summaries as CSV")
    c.add_argument("--summaries", nargs="+", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("BESS_LAB_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen-data" and args.days < 1:
        parser.error("--days must be >= 1")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, AlignmentError, InsufficientData) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
