"""Command-line entry point.

Every subcommand reads an optional JSON run config, applies flag
overrides, writes its outputs plus ``manifest.json`` under ``--out`` and
exits 0 on success, 1 on bad data, 2 on bad configuration and 3 on an
internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import forecast, gbdt
from .features import build_features
from .forecast import ForecastError, ForecastSet
from .panel import InventorySnapshot, PanelError
from .pipeline import (ConfigError, RunConfig, build_matrix, diagnostics_dict, load_inputs,
                       run_backtest, search, write_backtest, write_json, write_manifest)
from .policy import (PolicyParams, calibrate_phi, cost_aware_orders, cost_aware_policy,
                     coverage_policy, default_snapshot, replay, write_order_sheet)
from .simulator import SimulationError, run_episode, write_episode_report
from .synth import generate, write_synthetic

log = logging.getLogger("invplan")

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(cfg, command, inputs, outputs) -> int:
    write_manifest(cfg, command, cfg.out_dir, inputs, outputs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, args) -> int:
    if cfg.sales is None:
        raise ConfigError("ingest needs sales and flags paths")
    inputs = load_inputs(cfg)
    out = _out(cfg)
    diag = out / "diagnostics.json"
    write_json(diagnostics_dict(inputs.panel), diag)
    report = out / "validation.txt"
    report.write_text("".join(m + "\n" for m in inputs.panel.validation_report()))
    d = diagnostics_dict(inputs.panel)
    print(f"{inputs.panel.n_items} items x {inputs.panel.n_weeks} weeks, "
          f"zero rate {d['zero_rate']:.3f}, stockout rate {d['stockout_rate']:.3f}, "
          f"{d['n_violations']} violations")
    return _finish(cfg, "ingest", inputs.files, [diag, report])


def cmd_synth(cfg: RunConfig, args) -> int:
    syn = generate(cfg.synthetic_spec())
    out = _out(cfg)
    paths = write_synthetic(syn, out)
    regimes = out / "regimes.csv"
    syn.regimes.to_csv(regimes, index=False)
    return _finish(cfg, "synth", (), [*paths.values(), regimes])


def cmd_features(cfg: RunConfig, args) -> int:
    inputs = load_inputs(cfg)
    panel = inputs.panel
    out = _out(cfg)
    path = out / "features.csv"
    if args.raw:
        build_features(panel, cfg.feature_spec()).to_csv(path)
    else:
        build_matrix(panel, cfg, panel.n_weeks - 1).to_csv(path)
    return _finish(cfg, "features", inputs.files, [path])


def cmd_train(cfg: RunConfig, args) -> int:
    inputs = load_inputs(cfg)
    panel = inputs.panel
    _, test_start = cfg.split.boundaries(panel.n_weeks)
    out = _out(cfg)
    hpo = search(build_matrix(panel, cfg, test_start - 1), cfg)
    # live models see every week, imputed with medians up to the last one
    matrix = build_matrix(panel, cfg, panel.n_weeks - 1)
    final = forecast.fit_final(matrix, forecast.hpo_budgets(hpo), "live", cfg.split)
    outputs = [out / "hpo.json"]
    write_json({f"h{h}": r.as_dict() for h, r in hpo.items()}, outputs[0])
    for h, m in sorted(final.models.items()):
        outputs.append(out / f"model_h{h}.json")
        m.save(outputs[-1])
    return _finish(cfg, "train", inputs.files, outputs)


def _load_models(cfg: RunConfig) -> dict[int, gbdt.Ensemble]:
    if cfg.models_dir is None:
        raise ConfigError("models_dir is required")
    try:
        return {h: gbdt.Ensemble.load(Path(cfg.models_dir) / f"model_h{h}.json")
                for h in forecast.HORIZONS}
    except FileNotFoundError as exc:
        raise ConfigError(f"missing model file: {exc.filename}") from None


def _week(cfg: RunConfig, panel, default: int) -> int:
    w = default if cfg.start_week is None else cfg.start_week
    if not 0 <= w < panel.n_weeks:
        raise ConfigError(f"week {w} outside the panel's {panel.n_weeks} weeks")
    return w


def cmd_forecast(cfg: RunConfig, args) -> int:
    inputs = load_inputs(cfg)
    panel = inputs.panel
    models = _load_models(cfg)
    t = _week(cfg, panel, panel.n_weeks - 1)
    matrix = build_matrix(panel, cfg, t)
    raw = forecast.predict_horizons(models, matrix.rows_at(t), panel.items, t)
    fs = forecast.postprocess(raw)
    out = _out(cfg)
    outputs = [out / "forecasts.csv"]
    forecast.write_forecasts([fs], outputs[0])
    if inputs.snapshot is not None:
        snap = inputs.snapshot
        params = PolicyParams.from_costs(cfg.costs, 1.0 if cfg.phi is None else cfg.phi)
        orders = cost_aware_orders(snap.on_hand, snap.in_transit[:, :2], fs.values, params)
        outputs.append(out / "orders.csv")
        write_order_sheet(panel.items, t, orders, outputs[-1])
    return _finish(cfg, "forecast", inputs.files, outputs)


def cmd_calibrate(cfg: RunConfig, args) -> int:
    inputs = load_inputs(cfg)
    panel = inputs.panel
    valid_start, test_start = cfg.split.boundaries(panel.n_weeks)
    matrix = build_matrix(panel, cfg, test_start - 1)
    budgets = forecast.hpo_budgets(search(matrix, cfg))
    models = forecast.fit_before(matrix, budgets, valid_start,
                                 drop_floor_scale_rows=cfg.split.drop_floor_scale_rows)
    fc = forecast.ModelForecaster(models, matrix, range(valid_start - 1, test_start))
    init = default_snapshot(panel, valid_start, cfg.costs.lead_time_weeks)
    phi, curve = calibrate_phi(panel, fc, init, cfg.costs, (valid_start, test_start),
                               cfg.phi_grid, inputs.demand)
    out = _out(cfg)
    outputs = [out / "phi.json", out / "phi_curve.csv"]
    write_json({"phi": phi, "window": [valid_start, test_start]}, outputs[0])
    pd.DataFrame({"phi": list(cfg.phi_grid), "total_cost": curve}).to_csv(outputs[1], index=False)
    print(f"phi = {phi}")
    return _finish(cfg, "calibrate", inputs.files, outputs)


def cmd_backtest(cfg: RunConfig, args) -> int:
    inputs = load_inputs(cfg)
    result = run_backtest(cfg, inputs)
    outputs = write_backtest(result, cfg, inputs, _out(cfg))
    s = result.summary()
    print(f"policy cost {s['policy_cost']:.1f}, benchmark cost {s['benchmark_cost']:.1f}, "
          f"delta {s['cost_delta_pct']:.2f}% (phi = {s['phi']})")
    return _finish(cfg, "backtest", inputs.files, outputs)


def _read_order_files(paths, panel) -> list[np.ndarray]:
    frames = []
    for p in paths:
        try:
            frames.append(pd.read_csv(p, dtype={"Store": str, "Product": str}))
        except FileNotFoundError:
            raise PanelError(f"order file not found: {p}") from None
    df = pd.concat(frames, ignore_index=True)
    need = {"Store", "Product", "decision_week", "order_qty"}
    if not need <= set(df.columns):
        raise PanelError(f"order files need columns {sorted(need)}")
    keys = pd.MultiIndex.from_tuples([(it.store, it.product) for it in panel.items])
    rounds = []
    for week, grp in df.groupby("decision_week", sort=True):
        grp = grp.set_index(["Store", "Product"])
        if grp.index.has_duplicates:
            raise PanelError(f"duplicate items in orders for decision week {week}")
        missing = keys.difference(grp.index)
        if len(missing):
            raise PanelError(f"orders for decision week {week} miss {len(missing)} items, "
                             f"e.g. {missing[0]}")
        rounds.append(grp.loc[keys, "order_qty"].to_numpy())
    return rounds


def cmd_simulate(cfg: RunConfig, args) -> int:
    inputs = load_inputs(cfg)
    panel = inputs.panel
    lead = cfg.costs.lead_time_weeks
    paths = args.orders or ([cfg.orders] if cfg.orders else [])
    if not paths:
        raise ConfigError("simulate needs order files (--orders)")
    rounds = _read_order_files(paths, panel)
    if len(rounds) < cfg.rounds:
        raise PanelError(f"{len(rounds)} order rounds supplied, {cfg.rounds} configured")
    n_weeks = cfg.rounds + lead
    start = _week(cfg, panel, panel.n_weeks - n_weeks)
    source = panel.sales if inputs.demand is None else inputs.demand
    demand = np.asarray(source)[:, start:start + n_weeks]
    if demand.shape[1] < n_weeks:
        raise PanelError(f"need {n_weeks} weeks of demand from week {start}")
    init = inputs.snapshot or InventorySnapshot.zeros(panel.items, lead)
    ledger = run_episode(demand, init, lambda state, k: rounds[k], cfg.costs, cfg.rounds)
    out = _out(cfg)
    outputs = [out / "episode.csv", out / "costs.json"]
    write_episode_report(ledger, outputs[0], [it.uid for it in panel.items], cfg.costs)
    write_json({"total": ledger.total, "shortage_total": ledger.shortage_total,
                "holding_total": ledger.holding_total, "costed_weeks": len(ledger.per_week),
                "weekly": [o.week_cost for o in ledger.per_week]}, outputs[1])
    print(f"total cost {ledger.total:.1f} over {len(ledger.per_week)} weeks")
    return _finish(cfg, "simulate", [*inputs.files, *paths], outputs)


def _read_forecasts(path, panel) -> dict[int, np.ndarray]:
    try:
        df = pd.read_csv(path, dtype={"Store": str, "Product": str})
    except FileNotFoundError:
        raise PanelError(f"forecast file not found: {path}") from None
    keys = pd.MultiIndex.from_tuples([(it.store, it.product) for it in panel.items])
    table = {}
    for week, grp in df.groupby("decision_week", sort=True):
        grp = grp.set_index(["Store", "Product"])
        if len(keys.difference(grp.index)):
            raise PanelError(f"forecasts for decision week {week} miss items")
        values = grp.loc[keys, ["h1", "h2", "h3"]].to_numpy()
        table[int(week)] = forecast.postprocess_values(values)
    return table


def cmd_compare(cfg: RunConfig, args) -> int:
    """Replay forecasts from a file through the cost-aware policy and the benchmark."""
    inputs = load_inputs(cfg)
    panel = inputs.panel
    lead = cfg.costs.lead_time_weeks
    if cfg.forecasts is None:
        raise ConfigError("compare needs a forecast file (--forecasts)")
    table = _read_forecasts(cfg.forecasts, panel)
    _, test_start = cfg.split.boundaries(panel.n_weeks)
    start = _week(cfg, panel, test_start)
    needed = range(start - 1, panel.n_weeks - lead - 1)
    gaps = [t for t in needed if t not in table]
    if gaps:
        raise PanelError(f"forecast file lacks decision weeks {gaps[:5]}")
    window = (start, panel.n_weeks)
    init = inputs.snapshot or default_snapshot(panel, start, lead)
    phis = [1.0] if cfg.phi is None else [cfg.phi]
    if args.phis:
        phis = args.phis
    rows = []
    out = _out(cfg)
    outputs = []
    labels = [it.uid for it in panel.items]
    bench = replay(panel, coverage_policy(panel, start), init, cfg.costs, window, inputs.demand)
    rows.append({"policy": "benchmark", "phi": float("nan"), "total": bench.total,
                 "shortage": bench.shortage_total, "holding": bench.holding_total})
    outputs.append(out / "episode_benchmark.csv")
    write_episode_report(bench, outputs[-1], labels, cfg.costs)
    for phi in phis:
        params = PolicyParams.from_costs(cfg.costs, phi)
        led = replay(panel, cost_aware_policy(table.__getitem__, params, start), init, cfg.costs,
                     window, inputs.demand)
        rows.append({"policy": "cost_aware", "phi": phi, "total": led.total,
                     "shortage": led.shortage_total, "holding": led.holding_total})
        outputs.append(out / f"episode_phi_{phi:g}.csv")
        write_episode_report(led, outputs[-1], labels, cfg.costs)
    table_df = pd.DataFrame(rows)
    b = bench.total
    table_df["delta_vs_benchmark_pct"] = (100.0 * (b - table_df["total"]) / b) if b > 0 else 0.0
    outputs.append(out / "compare.csv")
    table_df.to_csv(outputs[-1], index=False)
    print(table_df.to_string(index=False))
    return _finish(cfg, "compare", [*inputs.files, cfg.forecasts], outputs)


COMMANDS = {
    "ingest": (cmd_ingest, "validate sales/flags files and report panel diagnostics"),
    "synth": (cmd_synth, "write a synthetic panel (sales, flags, inventory, true demand)"),
    "features": (cmd_features, "build the feature matrix"),
    "train": (cmd_train, "search hyperparameters and fit live models"),
    "forecast": (cmd_forecast, "forecast t+1..t+3 and optionally write orders"),
    "calibrate": (cmd_calibrate, "pick the buffer multiplier phi on the validation weeks"),
    "backtest": (cmd_backtest, "full pipeline with holdout replay against the benchmark"),
    "simulate": (cmd_simulate, "cost a sequence of order files against demand"),
    "compare": (cmd_compare, "replay forecasts through both policies"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invplan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="root seed for every random stream")
        p.add_argument("--threads", type=int, help="worker threads (default: all cores)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--sales")
        p.add_argument("--flags")
        p.add_argument("--inventory")
        p.add_argument("--demand", help="true demand for replays (defaults to sales)")
        p.add_argument("--trials", type=int, help="HPO trials per horizon")
        p.add_argument("--week", type=int, dest="start_week",
                       help="decision week (forecast) or first replay week")
        p.add_argument("--phi", type=float)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "features":
            p.add_argument("--raw", action="store_true", help="skip imputation")
        if name in ("forecast", "compare"):
            p.add_argument("--models", dest="models_dir")
        if name == "compare":
            p.add_argument("--forecasts")
            p.add_argument("--phis", type=float, nargs="+", help="several phi values")
        if name == "simulate":
            p.add_argument("--orders", nargs="+", help="order sheets, one decision week each")
            p.add_argument("--rounds", type=int)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = {k: getattr(args, k, None) for k in
            ("seed", "threads", "sales", "flags", "inventory", "demand", "start_week", "phi",
             "models_dir", "forecasts", "rounds")}
    over["out_dir"] = args.out
    if getattr(args, "orders", None):
        over["orders"] = args.orders[0]
    if args.trials is not None:
        try:
            over["hpo"] = forecast.HpoConfig(args.trials, cfg.hpo.seed, cfg.hpo.search_space)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    cfg = cfg.with_overrides(**over)
    cfg.check()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command][0](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PanelError, ForecastError, SimulationError) as exc:
        print(f"data error ({type(exc).__module__.split('.')[-1]}): {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
