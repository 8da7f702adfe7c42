"""Direct multi-horizon forecasting on top of the boosted-tree learner.

One independent model per horizon h = 1..3, each trained on the scaled
target ``y_eff(t + h) / scale(t)``. Hyperparameters are chosen by seeded
random search, fitting on scaled RMSE with early stopping and selecting on
validation MAE in original units. A seasonal moving-average baseline lives
here too because the benchmark policy needs it.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np
import pandas as pd

from . import gbdt
from .features import FeatureMatrix
from .panel import ItemKey, SalesPanel
from .policy import round_half_up
from .seeding import subseed, substream

log = logging.getLogger(__name__)

HORIZONS = (1, 2, 3)


class ForecastError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    test_holdout_weeks: int = 18
    valid_fraction_of_train: float = 0.10
    # rows whose scale factor sits at the floor of 1 (no positive history)
    # carry targets in raw units and swamp the squared loss
    drop_floor_scale_rows: bool = True

    def __post_init__(self):
        if self.test_holdout_weeks < 1:
            raise ValueError("test_holdout_weeks must be >= 1")
        if not 0.0 < self.valid_fraction_of_train < 1.0:
            raise ValueError("valid_fraction_of_train must lie in (0, 1)")

    def boundaries(self, n_weeks: int) -> tuple[int, int]:
        """First valid week and first test week on an ``n_weeks`` axis."""
        test_start = n_weeks - self.test_holdout_weeks
        # tolerance keeps 0.1 * 140 from rounding up to 15
        n_valid = math.ceil(self.valid_fraction_of_train * test_start - 1e-9)
        valid_start = test_start - n_valid
        if valid_start <= 0 or n_valid < 1:
            raise ForecastError(f"{n_weeks} weeks leave no room for train/valid/test")
        return valid_start, test_start


@dataclass(frozen=True)
class SplitData:
    horizon: int
    train: gbdt.Dataset
    valid: gbdt.Dataset
    test: gbdt.Dataset


def _dataset(frame: pd.DataFrame, target: str) -> gbdt.Dataset:
    frame = frame.reset_index(drop=True)
    return gbdt.Dataset(frame, frame[target].to_numpy(), frame["observation_weight"].to_numpy())


def _fit_mask(frame: pd.DataFrame, drop_floor: bool) -> np.ndarray:
    if not drop_floor:
        return np.ones(len(frame), dtype=bool)
    return frame["scale_factor"].to_numpy() > 1.0


def assemble_dataset(matrix: FeatureMatrix, horizon: int, split: SplitSpec) -> SplitData:
    """Chronological train/valid/test rows for one horizon.

    Rows are partitioned by decision week so every series shares the same
    boundaries; rows whose horizon target is missing are dropped, and
    train/valid rows at the scale floor too when the split says so.
    """
    if horizon not in HORIZONS:
        raise ForecastError(f"horizon must be one of {HORIZONS}")
    target = f"target_h{horizon}"
    valid_start, test_start = split.boundaries(matrix.n_weeks)
    frame = matrix.frame[matrix.frame[target].notna()]
    week = frame["week"].to_numpy()
    fit_ok = _fit_mask(frame, split.drop_floor_scale_rows)
    train = frame[(week < valid_start) & fit_ok]
    if len(train) == 0:
        raise ForecastError(f"empty training partition for horizon {horizon}")
    valid = frame[(week >= valid_start) & (week < test_start) & fit_ok]
    test = frame[week >= test_start]
    return SplitData(horizon, _dataset(train, target), _dataset(valid, target),
                     _dataset(test, target))


# ---------------------------------------------------------------------------
# hyperparameter search
# ---------------------------------------------------------------------------

DEFAULT_SEARCH_SPACE = {
    "max_depth": (3, 10),
    "learning_rate": (0.01, 0.3),
    "l2_leaf_reg": (0.1, 30.0),
    "feature_subsample": (0.5, 1.0),
    "row_subsample": (0.5, 1.0),
    "min_samples_leaf": (1, 100),
}
_LOG_SCALE = {"learning_rate", "l2_leaf_reg", "min_samples_leaf"}
_INTEGER = {"max_depth", "min_samples_leaf"}


class Sampler(Protocol):
    def propose(self, rng: np.random.Generator, space: dict) -> dict: ...


class RandomSearch:
    """Independent uniform draws (log-uniform where the scale calls for it)."""

    def propose(self, rng, space):
        out = {}
        for name in sorted(space):
            lo, hi = space[name]
            if name in _LOG_SCALE:
                v = math.exp(rng.uniform(math.log(lo), math.log(hi)))
            else:
                v = rng.uniform(lo, hi)
            out[name] = int(min(max(round(v), lo), hi)) if name in _INTEGER else float(v)
        return out


@dataclass(frozen=True)
class HpoConfig:
    trials: int = 100
    seed: int = 0
    search_space: dict = field(default_factory=lambda: dict(DEFAULT_SEARCH_SPACE))

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        bad = set(self.search_space) - set(DEFAULT_SEARCH_SPACE)
        if bad:
            raise ValueError(f"unknown search-space keys: {sorted(bad)}")
        for name, (lo, hi) in self.search_space.items():
            if not lo <= hi:
                raise ValueError(f"empty range for {name}")
            if name in _LOG_SCALE and lo <= 0:
                raise ValueError(f"log-scale range for {name} must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "HpoConfig":
        d = dict(d)
        space = dict(DEFAULT_SEARCH_SPACE)
        space.update({k: tuple(v) for k, v in d.pop("search_space", {}).items()})
        return cls(search_space=space, **d)

    def as_dict(self) -> dict:
        return {"trials": self.trials, "seed": self.seed,
                "search_space": {k: list(v) for k, v in sorted(self.search_space.items())}}


@dataclass(frozen=True)
class TrialResult:
    trial: int
    config: gbdt.TrainConfig
    best_iteration: int
    valid_mae: float
    valid_rmse: float


@dataclass(frozen=True)
class HpoResult:
    horizon: int
    config: gbdt.TrainConfig
    best_iteration: int
    trials: tuple[TrialResult, ...]

    @property
    def best(self) -> TrialResult:
        return min(self.trials, key=lambda r: (r.valid_mae, r.trial))

    def as_dict(self) -> dict:
        return {"horizon": self.horizon, "config": self.config.as_dict(),
                "best_iteration": self.best_iteration,
                "trials": [{"trial": r.trial, "best_iteration": r.best_iteration,
                            "valid_mae": r.valid_mae, "valid_rmse": r.valid_rmse,
                            "config": r.config.as_dict()} for r in self.trials]}


def original_unit_mae(pred_scaled, target_scaled, scale) -> float:
    return float(np.mean(np.abs(pred_scaled * scale - target_scaled * scale)))


def _run_trial(trial, cfg, data: SplitData, features, categorical) -> TrialResult:
    model = gbdt.fit(data.train, data.valid, cfg, features, categorical)
    pred = model.predict(data.valid.frame)
    scale = data.valid.frame["scale_factor"].to_numpy()
    mae = original_unit_mae(pred, data.valid.target, scale)
    rmse = model.history["valid_rmse"][model.best_iteration]
    return TrialResult(trial, cfg, model.best_iteration, mae, rmse)


def hpo_search(datasets: dict[int, SplitData], hpo: HpoConfig, base: gbdt.TrainConfig,
               features: Sequence[str], categorical: Sequence[str] = (),
               sampler: Sampler | None = None, threads: int = 1) -> dict[int, HpoResult]:
    """Per-horizon random search; lowest original-unit validation MAE wins.

    Candidate configs are drawn up front from a per-horizon stream, so the
    result does not depend on ``threads``. Ties go to the earlier trial.
    """
    sampler = sampler or RandomSearch()
    results = {}
    for h, data in sorted(datasets.items()):
        if len(data.valid) == 0:
            raise ForecastError(f"empty validation partition for horizon {h}")
        rng = substream(hpo.seed, "hpo", h)
        seed = subseed(base.seed, "gbdt", h)
        cfgs = [replace(base, seed=seed, **sampler.propose(rng, hpo.search_space))
                for _ in range(hpo.trials)]
        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                trials = list(ex.map(lambda a: _run_trial(a[0], a[1], data, features, categorical),
                                     enumerate(cfgs)))
        else:
            trials = [_run_trial(i, c, data, features, categorical) for i, c in enumerate(cfgs)]
        best = min(trials, key=lambda r: (r.valid_mae, r.trial))
        log.info("horizon %d: best trial %d, valid MAE %.4f, %d trees", h, best.trial,
                 best.valid_mae, best.best_iteration)
        results[h] = HpoResult(h, best.config, best.best_iteration, tuple(trials))
    return results


# ---------------------------------------------------------------------------
# refit and evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HorizonReport:
    horizon: int
    n_rows: int
    mae: float
    bias: float
    mae_rounded: float


@dataclass(frozen=True)
class FinalFit:
    models: dict[int, gbdt.Ensemble]
    report: tuple[HorizonReport, ...] = ()

    def report_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.report])


def fit_before(matrix: FeatureMatrix, configs: dict[int, tuple[gbdt.TrainConfig, int]],
               week: int, features: Sequence[str] | None = None,
               categorical: Sequence[str] | None = None,
               drop_floor_scale_rows: bool = True) -> dict[int, gbdt.Ensemble]:
    """Per-horizon models fitted on rows whose target week precedes ``week``.

    ``configs`` maps horizon to ``(config, n_trees)``; no early stopping.
    """
    features = list(matrix.numeric if features is None else features)
    categorical = list(matrix.categorical if categorical is None else categorical)
    models = {}
    for h, (cfg, n_trees) in sorted(configs.items()):
        target = f"target_h{h}"
        frame = matrix.frame
        rows = frame[frame[target].notna() & (frame["week"].to_numpy() + h < week)
                     & _fit_mask(frame, drop_floor_scale_rows)]
        if len(rows) == 0:
            raise ForecastError(f"no training rows before week {week} for horizon {h}")
        models[h] = gbdt.fit(_dataset(rows, target), None, cfg.with_iterations(n_trees),
                             features, categorical)
    return models


def fit_final(matrix: FeatureMatrix, configs: dict[int, tuple[gbdt.TrainConfig, int]],
              mode: str = "backtest", split: SplitSpec = SplitSpec(),
              features: Sequence[str] | None = None,
              categorical: Sequence[str] | None = None) -> FinalFit:
    """Refit each horizon with a fixed tree budget.

    Backtest mode fits on every row whose target falls before the holdout
    (train + valid weeks) and scores the holdout rows; live mode fits on all
    rows with a target.
    """
    if mode not in ("backtest", "live"):
        raise ForecastError(f"unknown mode {mode!r}")
    if mode == "live":
        return FinalFit(fit_before(matrix, configs, matrix.n_weeks + max(HORIZONS),
                                   features, categorical, split.drop_floor_scale_rows))
    _, test_start = split.boundaries(matrix.n_weeks)
    models = fit_before(matrix, configs, test_start, features, categorical,
                        split.drop_floor_scale_rows)
    report = []
    for h, model in sorted(models.items()):
        target = f"target_h{h}"
        frame = matrix.frame
        test = frame[(frame["week"] >= test_start) & frame[target].notna()]
        if len(test) == 0:
            continue
        scale = test["scale_factor"].to_numpy()
        pred = model.predict(test) * scale
        actual = test[target].to_numpy() * scale
        report.append(HorizonReport(
            h, len(test), float(np.mean(np.abs(pred - actual))), float(np.mean(pred - actual)),
            float(np.mean(np.abs(postprocess_values(pred) - actual)))))
    return FinalFit(models, tuple(report))


def hpo_budgets(results: dict[int, HpoResult]) -> dict[int, tuple[gbdt.TrainConfig, int]]:
    return {h: (r.config, r.best_iteration) for h, r in results.items()}


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ForecastSet:
    """Point forecasts for t+1..t+3 made at the end of ``decision_week``."""

    items: tuple[ItemKey, ...]
    decision_week: int
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (len(self.items), len(HORIZONS)):
            raise ForecastError("forecast values must be (n_items, 3)")

    @property
    def integral(self) -> bool:
        return self.values.dtype.kind in "iu"

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"Store": [it.store for it in self.items],
                           "Product": [it.product for it in self.items],
                           "decision_week": self.decision_week})
        for j, h in enumerate(HORIZONS):
            df[f"h{h}"] = self.values[:, j]
        return df


def write_forecasts(sets: Sequence[ForecastSet], path) -> None:
    pd.concat([s.to_frame() for s in sets], ignore_index=True).to_csv(path, index=False)


def postprocess_values(x) -> np.ndarray:
    return np.maximum(round_half_up(x), 0).astype(np.int64)


def postprocess(forecasts: ForecastSet) -> ForecastSet:
    return replace(forecasts, values=postprocess_values(forecasts.values))


def predict_horizons(models: dict[int, gbdt.Ensemble], rows: pd.DataFrame,
                     items: Sequence[ItemKey], decision_week: int) -> ForecastSet:
    """Original-unit forecasts from one imputed feature row per item."""
    rows = rows.drop_duplicates("unique_id").set_index("unique_id", drop=False)
    uids = [it.uid for it in items]
    missing = [u for u in uids if u not in rows.index]
    if missing:
        raise ForecastError(f"no feature row at week {decision_week} for {missing[:5]}")
    rows = rows.loc[uids]
    scale = rows["scale_factor"].to_numpy()
    values = np.column_stack([models[h].predict(rows) * scale for h in HORIZONS])
    return ForecastSet(tuple(items), decision_week, values)


def forecast_table(models: dict[int, gbdt.Ensemble], matrix: FeatureMatrix,
                   weeks: Sequence[int]) -> np.ndarray:
    """Real-valued forecasts for many decision weeks at once.

    Returns ``(n_items, len(weeks), 3)`` with weeks sorted ascending and items
    in the matrix's order; equivalent to :func:`predict_horizons` per week.
    """
    weeks = np.unique(np.asarray(weeks, dtype=np.int64))
    frame = matrix.frame
    rows = frame[frame["week"].isin(weeks)]
    uids = pd.unique(frame["unique_id"])
    n = len(uids)
    if len(rows) != n * len(weeks):
        raise ForecastError("feature matrix lacks rows for some decision weeks")
    item_idx = pd.Index(uids).get_indexer(rows["unique_id"])
    week_pos = np.searchsorted(weeks, rows["week"].to_numpy())
    scale = rows["scale_factor"].to_numpy()
    out = np.empty((n, len(weeks), len(HORIZONS)))
    for j, h in enumerate(HORIZONS):
        out[item_idx, week_pos, j] = models[h].predict(rows) * scale
    return out


class ModelForecaster:
    """Callable ``week -> (n, 3)`` integer forecasts, cached per week."""

    def __init__(self, models, matrix: FeatureMatrix, weeks: Sequence[int]):
        weeks = sorted(set(int(w) for w in weeks))
        self._pos = {w: k for k, w in enumerate(weeks)}
        self._table = postprocess_values(forecast_table(models, matrix, weeks))

    def __call__(self, week: int) -> np.ndarray:
        return self._table[:, self._pos[week], :]


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def _iso_week(date) -> int:
    return date.isocalendar()[1]


def baseline_seasonal_ma(panel: SalesPanel, decision_week: int, window: int = 13) -> ForecastSet:
    """Seasonally indexed trailing moving average.

    base = mean effective demand over weeks t-12..t; the index for a target
    week is the historical mean at that ISO week over the overall mean (1
    when either is undefined or the overall mean is 0).
    """
    t = decision_week
    if not window - 1 <= t < panel.n_weeks:
        raise ForecastError(f"baseline needs {window} weeks of history at week {t}")
    y = panel.effective()[:, : t + 1]
    recent = y[:, t - window + 1: t + 1]
    cnt = np.sum(~np.isnan(recent), axis=1)
    base = np.where(cnt > 0, np.nansum(recent, axis=1) / np.maximum(cnt, 1), 0.0)

    valid = ~np.isnan(y)
    total = np.where(valid, y, 0.0)
    overall = np.where(valid.any(axis=1), total.sum(axis=1) / np.maximum(valid.sum(axis=1), 1), 0.0)
    hist_weeks = panel.axis.iso_weeks()[: t + 1]
    start = panel.axis.date(t)
    out = np.empty((panel.n_items, len(HORIZONS)))
    for j, h in enumerate(HORIZONS):
        target_week = _iso_week(start + pd.Timedelta(weeks=h).to_pytimedelta())
        sel = hist_weeks == target_week
        v = valid[:, sel]
        n_at = v.sum(axis=1)
        at = total[:, sel].sum(axis=1) / np.maximum(n_at, 1)
        ok = (n_at > 0) & (overall > 0)
        index = np.where(ok, at / np.where(overall > 0, overall, 1.0), 1.0)
        out[:, j] = base * index
    return ForecastSet(tuple(panel.items), t, out)
