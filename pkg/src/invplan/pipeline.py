"""Run configuration and the end-to-end backtest.

The backtest builds features, searches hyperparameters per horizon, fits
calibration models on the train weeks to pick phi on the validation weeks,
refits on train + valid and replays the holdout with both the cost-aware
policy and the coverage benchmark.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, forecast, gbdt
from .features import FeatureMatrix, FeatureSpec, build_features, impute
from .panel import (CostParams, InventorySnapshot, PanelError, SalesPanel, load_sales_wide,
                    load_snapshot, panel_diagnostics)
from .policy import (DEFAULT_PHI_GRID, PolicyParams, calibrate_phi, cost_aware_policy,
                     coverage_policy, default_snapshot, replay)
from .simulator import CostLedger, write_episode_report
from .synth import SyntheticSpec, generate

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


_PATH_KEYS = ("sales", "flags", "inventory", "demand", "models_dir", "forecasts", "orders")


@dataclass(frozen=True)
class RunConfig:
    sales: str | None = None
    flags: str | None = None
    inventory: str | None = None
    demand: str | None = None
    synthetic: dict | None = None
    costs: CostParams = CostParams()
    split: forecast.SplitSpec = forecast.SplitSpec()
    features: dict = field(default_factory=dict)
    hpo: forecast.HpoConfig = forecast.HpoConfig()
    train: gbdt.TrainConfig = gbdt.TrainConfig()
    phi_grid: tuple = DEFAULT_PHI_GRID
    phi: float | None = None
    rounds: int = 6
    start_week: int | None = None
    models_dir: str | None = None
    forecasts: str | None = None
    orders: str | None = None
    seed: int = 0
    threads: int | None = None
    out_dir: str = "out"

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        d = dict(d)
        try:
            if "costs" in d:
                d["costs"] = CostParams(**d["costs"])
            if "split" in d:
                d["split"] = forecast.SplitSpec(**d["split"])
            if "hpo" in d:
                d["hpo"] = forecast.HpoConfig.from_dict(d["hpo"])
            if "train" in d:
                d["train"] = gbdt.TrainConfig.from_dict(d["train"])
            if "phi_grid" in d:
                d["phi_grid"] = tuple(float(x) for x in d["phi_grid"])
            if d.get("synthetic") is not None:
                SyntheticSpec.from_dict(d["synthetic"])
            FeatureSpec.from_dict(d.get("features", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if base_dir is not None:
            for k in _PATH_KEYS:
                if d.get(k) is not None:
                    d[k] = str(Path(base_dir) / d[k])
        cfg = cls(**d)
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d, base_dir=Path(path).parent)

    def check(self) -> None:
        if (self.sales is None) != (self.flags is None):
            raise ConfigError("sales and flags paths go together")
        if not self.phi_grid or any(b < a for a, b in zip(self.phi_grid, self.phi_grid[1:])):
            raise ConfigError("phi_grid must be non-empty and sorted")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["costs"] = asdict(self.costs)
        d["split"] = asdict(self.split)
        d["hpo"] = self.hpo.as_dict()
        d["train"] = self.train.as_dict()
        d["phi_grid"] = list(self.phi_grid)
        return d

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self

    @property
    def n_threads(self) -> int:
        return self.threads or os.cpu_count() or 1

    def feature_spec(self) -> FeatureSpec:
        return FeatureSpec.from_dict(self.features)

    def synthetic_spec(self) -> SyntheticSpec:
        d = dict(self.synthetic or {})
        d["seed"] = self.seed
        return SyntheticSpec.from_dict(d)

    def train_config(self) -> gbdt.TrainConfig:
        return replace(self.train, seed=self.seed)

    def hpo_config(self) -> forecast.HpoConfig:
        return replace(self.hpo, seed=self.seed)

    def reproducible_dict(self) -> dict:
        """Settings that affect results (paths become file names)."""
        d = {k: v for k, v in self.as_dict().items() if k not in ("threads", "out_dir")}
        for k in _PATH_KEYS:
            if d.get(k) is not None:
                d[k] = Path(d[k]).name
        return d

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.reproducible_dict()).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(cfg: RunConfig, command: str, out_dir, inputs=(), outputs=()) -> Path:
    out = Path(out_dir)
    man = {
        "command": command,
        "package_version": __version__,
        "config": cfg.reproducible_dict(),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "inputs": {Path(p).name: file_sha256(p) for p in inputs if p is not None},
        "outputs": {Path(p).name: file_sha256(p) for p in sorted(outputs, key=str)},
    }
    path = out / "manifest.json"
    write_json(man, path)
    return path


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Inputs:
    panel: SalesPanel
    demand: np.ndarray | None
    snapshot: InventorySnapshot | None
    files: tuple = ()


def _load_demand(path, panel: SalesPanel) -> np.ndarray:
    df = pd.read_csv(path, dtype={"Store": str, "Product": str})
    df = df.set_index(["Store", "Product"])
    keys = [(it.store, it.product) for it in panel.items]
    if df.shape[1] != panel.n_weeks or not df.index.isin(keys).all() or len(df) != len(keys):
        raise PanelError(f"{path}: demand file does not match the sales panel")
    values = df.loc[keys].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise PanelError(f"{path}: demand must be finite and >= 0")
    return values


def load_inputs(cfg: RunConfig) -> Inputs:
    """Panel from files when ``sales`` is set, otherwise from the generator."""
    if cfg.sales is None:
        syn = generate(cfg.synthetic_spec())
        return Inputs(syn.panel, syn.demand, syn.snapshot)
    try:
        panel = load_sales_wide(cfg.sales, cfg.flags)
    except FileNotFoundError as exc:
        raise PanelError(str(exc)) from None
    for msg in panel.validation_report():
        log.warning(msg)
    demand = _load_demand(cfg.demand, panel) if cfg.demand else None
    snapshot = None
    if cfg.inventory:
        snapshot = load_snapshot(cfg.inventory).aligned(panel.items)
    files = tuple(p for p in (cfg.sales, cfg.flags, cfg.demand, cfg.inventory) if p)
    return Inputs(panel, demand, snapshot, files)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def build_matrix(panel: SalesPanel, cfg: RunConfig, cutoff: int) -> FeatureMatrix:
    matrix = build_features(panel, cfg.feature_spec())
    matrix, imputer = impute(matrix, cutoff)
    return matrix


def search(matrix: FeatureMatrix, cfg: RunConfig) -> dict[int, forecast.HpoResult]:
    data = {h: forecast.assemble_dataset(matrix, h, cfg.split) for h in forecast.HORIZONS}
    return forecast.hpo_search(data, cfg.hpo_config(), cfg.train_config(), matrix.numeric,
                               matrix.categorical, threads=cfg.n_threads)


@dataclass
class BacktestResult:
    hpo: dict[int, forecast.HpoResult]
    models: dict[int, gbdt.Ensemble]
    phi: float
    phi_curve: np.ndarray
    forecast_report: pd.DataFrame
    policy_ledger: CostLedger
    benchmark_ledger: CostLedger
    holdout_forecasts: list[forecast.ForecastSet]
    window: tuple[int, int]

    @property
    def cost_delta_pct(self) -> float:
        b = self.benchmark_ledger.total
        return 100.0 * (b - self.policy_ledger.total) / b if b > 0 else 0.0

    def summary(self) -> dict:
        return {
            "phi": self.phi,
            "policy_cost": self.policy_ledger.total,
            "policy_shortage": self.policy_ledger.shortage_total,
            "policy_holding": self.policy_ledger.holding_total,
            "benchmark_cost": self.benchmark_ledger.total,
            "benchmark_shortage": self.benchmark_ledger.shortage_total,
            "benchmark_holding": self.benchmark_ledger.holding_total,
            "cost_delta_pct": self.cost_delta_pct,
            "holdout_weeks": list(self.window),
            "forecast": self.forecast_report.to_dict(orient="records"),
            "benchmark_note": "seasonal 13-week MA with 4-week coverage (reconstruction)",
        }


def run_backtest(cfg: RunConfig, inputs: Inputs | None = None) -> BacktestResult:
    inputs = inputs or load_inputs(cfg)
    panel = inputs.panel
    lead = cfg.costs.lead_time_weeks
    valid_start, test_start = cfg.split.boundaries(panel.n_weeks)
    if valid_start < 1:
        raise forecast.ForecastError("no history before the validation window")

    log.info("building features for %d items x %d weeks", panel.n_items, panel.n_weeks)
    matrix = build_matrix(panel, cfg, test_start - 1)
    log.info("hyperparameter search: %d trials per horizon", cfg.hpo.trials)
    hpo = search(matrix, cfg)

    log.info("calibrating phi on weeks %d..%d", valid_start, test_start - 1)
    budgets = forecast.hpo_budgets(hpo)
    calib_models = forecast.fit_before(matrix, budgets, valid_start,
                                       drop_floor_scale_rows=cfg.split.drop_floor_scale_rows)
    calib_window = (valid_start, test_start)
    fc = forecast.ModelForecaster(calib_models, matrix, range(valid_start - 1, test_start))
    init = default_snapshot(panel, valid_start, lead)
    phi, curve = calibrate_phi(panel, fc, init, cfg.costs, calib_window, cfg.phi_grid,
                               inputs.demand)

    log.info("refitting on weeks before %d and replaying the holdout", test_start)
    final = forecast.fit_final(matrix, budgets, "backtest", cfg.split)
    models, report = final.models, final.report_frame()
    window = (test_start, panel.n_weeks)
    decision_weeks = range(test_start - 1, panel.n_weeks - lead - 1)
    fc = forecast.ModelForecaster(models, matrix, decision_weeks)
    init = default_snapshot(panel, test_start, lead)
    params = PolicyParams.from_costs(cfg.costs, phi)
    pol_ledger = replay(panel, cost_aware_policy(fc, params, test_start), init, cfg.costs,
                        window, inputs.demand)
    bench_ledger = replay(panel, coverage_policy(panel, test_start), init, cfg.costs, window,
                          inputs.demand)
    sets = [forecast.ForecastSet(panel.items, t, fc(t)) for t in decision_weeks]
    return BacktestResult(hpo, models, phi, curve, report, pol_ledger, bench_ledger, sets,
                          window)


def write_backtest(result: BacktestResult, cfg: RunConfig, inputs: Inputs, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = [it.uid for it in inputs.panel.items]
    paths = {
        "report": out / "backtest_report.json",
        "hpo": out / "hpo.json",
        "forecast_report": out / "forecast_report.csv",
        "phi_curve": out / "phi_curve.csv",
        "forecasts": out / "holdout_forecasts.csv",
        "policy": out / "episode_policy.csv",
        "benchmark": out / "episode_benchmark.csv",
    }
    write_json(result.summary(), paths["report"])
    write_json({f"h{h}": r.as_dict() for h, r in result.hpo.items()}, paths["hpo"])
    result.forecast_report.to_csv(paths["forecast_report"], index=False)
    pd.DataFrame({"phi": list(cfg.phi_grid), "total_cost": result.phi_curve}).to_csv(
        paths["phi_curve"], index=False)
    forecast.write_forecasts(result.holdout_forecasts, paths["forecasts"])
    write_episode_report(result.policy_ledger, paths["policy"], labels, cfg.costs)
    write_episode_report(result.benchmark_ledger, paths["benchmark"], labels, cfg.costs)
    model_paths = []
    for h, m in sorted(result.models.items()):
        p = out / f"model_h{h}.json"
        m.save(p)
        model_paths.append(p)
    return list(paths.values()) + model_paths


def diagnostics_dict(panel: SalesPanel) -> dict:
    return panel_diagnostics(panel).as_dict()
