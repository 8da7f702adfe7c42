"""Stockout-aware tabular features for the global forecaster.

Every statistic is computed on the effective series (sales with out-of-stock
weeks masked as NaN) using only weeks ``<= t``. Level-dependent features and
the horizon targets are divided by a per-series dynamic scale factor, an
annualised recent demand level, so that one model can be fitted across
series whose volumes differ by orders of magnitude.

Arrays are laid out ``(n_items, n_weeks)``; the exported matrix is long,
item-major and week-minor.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np
import pandas as pd

from .panel import SalesPanel

log = logging.getLogger(__name__)

MAD_SCALE = 1.4826
MAD_EPS = 1e-9
SPIKE_Z = 3.0
SPIKE_CAP = 104
MIN_SEASONAL_PAIRS = 8


@dataclass(frozen=True)
class FeatureSpec:
    short_lags: tuple[int, ...] = (0, 1, 2, 3)
    seasonal_lags: tuple[int, ...] = (51, 52, 53)
    roll_windows: tuple[int, ...] = (3, 5, 13)
    ewm_spans: tuple[int, ...] = (5, 10)
    std_window: int = 8
    iqr_window: int = 13
    momentum_ks: tuple[int, ...] = (1, 5)
    slope_window: int = 4
    fourier_harmonics: int = 3
    season_period: int = 52
    last_year_offsets: tuple[int, int] = (50, 54)
    spike_window: int = 13
    nonzero_rate_window: int = 12
    warmstart_min_obs: int = 45
    scale_window: int = 53
    decay_factor: float = 0.5
    decay_block_weeks: int = 53
    horizons: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        windows = [*self.roll_windows, *self.ewm_spans, self.std_window, self.iqr_window,
                   self.slope_window, self.spike_window, self.nonzero_rate_window,
                   self.scale_window, self.decay_block_weeks, *self.momentum_ks]
        if min(windows) < 1:
            raise ValueError("feature windows must be >= 1")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.season_period < 2:
            raise ValueError("season_period must be >= 2")

    @classmethod
    def from_dict(cls, overrides: dict) -> "FeatureSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(overrides) - known
        if unknown:
            raise ValueError(f"unknown feature spec keys: {sorted(unknown)}")
        conv = {k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()}
        return replace(cls(), **conv)

    # column names -------------------------------------------------------
    def scaled_columns(self) -> list[str]:
        """Target-based features expressed in scaled units."""
        cols = [f"lag_{k}" for k in (*self.short_lags, *self.seasonal_lags)]
        cols += [f"roll_mean_{w}" for w in self.roll_windows]
        cols += [f"roll_median_{w}" for w in self.roll_windows]
        cols += [f"ewm_{s}" for s in self.ewm_spans]
        cols += [f"std_{self.std_window}", f"iqr_{self.iqr_window}"]
        cols += [f"momentum_{k}" for k in self.momentum_ks]
        cols += [f"slope_{self.slope_window}", "last_year_window"]
        return cols

    def unscaled_columns(self) -> list[str]:
        cols = []
        for k in range(1, self.fourier_harmonics + 1):
            cols += [f"fourier_sin_{k}", f"fourier_cos_{k}"]
        cols += ["seasonality_strength", "robust_z", "spike", "time_since_spike",
                 f"nonzero_rate_{self.nonzero_rate_window}"]
        return cols

    def numeric_columns(self) -> list[str]:
        return self.scaled_columns() + self.unscaled_columns()

    def target_columns(self) -> list[str]:
        return [f"target_h{h}" for h in self.horizons]


CATEGORICAL_COLUMNS = ["week_of_year", "Store", "Product", "unique_id"]


# ---------------------------------------------------------------------------
# masked window helpers
# ---------------------------------------------------------------------------

def _windows(y: np.ndarray, w: int) -> np.ndarray:
    """Contiguous trailing windows ``[t-w+1, t]``, NaN-padded: ``(n, T, w)``."""
    n, t = y.shape
    padded = np.concatenate([np.full((n, w - 1), np.nan), y], axis=1)
    return np.ascontiguousarray(np.lib.stride_tricks.sliding_window_view(padded, w, axis=1))


def _shift(y: np.ndarray, k: int) -> np.ndarray:
    """``out[:, t] = y[:, t - k]`` (NaN where ``t - k < 0``)."""
    out = np.full_like(y, np.nan)
    if k < y.shape[1]:
        out[:, k:] = y[:, : y.shape[1] - k]
    return out


def _quiet(fn, *args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fn(*args, **kw)


def rolling_mean(y, w):
    return _quiet(np.nanmean, _windows(y, w), axis=-1)


def rolling_median(y, w):
    return _quiet(np.nanmedian, _windows(y, w), axis=-1)


def rolling_std(y, w):
    # population std so a single valid observation yields 0, not NaN
    return _quiet(np.nanstd, _windows(y, w), axis=-1)


def rolling_iqr(y, w):
    q = _quiet(np.nanpercentile, _windows(y, w), [25.0, 75.0], axis=-1)
    return q[1] - q[0]


def ewm_mean(y, span):
    """Recursive EWM over valid observations; gaps carry the last value."""
    alpha = 2.0 / (span + 1.0)
    out = np.full_like(y, np.nan)
    state = np.full(y.shape[0], np.nan)
    for t in range(y.shape[1]):
        x = y[:, t]
        ok = ~np.isnan(x)
        fresh = ok & np.isnan(state)
        upd = ok & ~fresh
        state = np.where(fresh, x, state)
        state = np.where(upd, alpha * x + (1.0 - alpha) * state, state)
        out[:, t] = state
    return out


# ---------------------------------------------------------------------------
# scale factor and weights
# ---------------------------------------------------------------------------

def compute_scale_factor(y_eff: np.ndarray, spec: FeatureSpec = FeatureSpec()) -> np.ndarray:
    """Annualised in-stock demand level, floored at 1.

    Uses the trailing ``scale_window`` mean when that window holds at least
    ``warmstart_min_obs`` in-stock weeks, else the expanding mean of all
    history so far. Accepts one series or ``(n, T)``.
    """
    y = np.atleast_2d(np.asarray(y_eff, dtype=np.float64))
    win = _windows(y, spec.scale_window)
    n_win = np.sum(~np.isnan(win), axis=-1)
    trailing = _quiet(np.nanmean, win, axis=-1)
    valid = ~np.isnan(y)
    cum = np.cumsum(np.where(valid, y, 0.0), axis=1)
    cnt = np.cumsum(valid, axis=1)
    expanding = np.divide(cum, cnt, out=np.zeros_like(cum), where=cnt > 0)
    level = np.where(n_win >= spec.warmstart_min_obs, trailing, expanding)
    scale = np.maximum(spec.scale_window * level, 1.0)
    return scale.reshape(np.shape(y_eff)) if np.ndim(y_eff) == 1 else scale


def observation_weights(series_length: int, spec: FeatureSpec = FeatureSpec()) -> np.ndarray:
    """Step-decayed weights by yearly block, newest block weight 1."""
    if series_length < 1:
        raise ValueError("series_length must be >= 1")
    age = (series_length - 1 - np.arange(series_length)) // spec.decay_block_weeks
    return spec.decay_factor ** age.astype(np.float64)


# ---------------------------------------------------------------------------
# behavioural statistics
# ---------------------------------------------------------------------------

def seasonality_strength(y_eff: np.ndarray, spec: FeatureSpec = FeatureSpec()) -> np.ndarray:
    """Trailing correlation between y(s) and y(s - period), 0 where undefined."""
    y = np.atleast_2d(np.asarray(y_eff, dtype=np.float64))
    p = spec.season_period
    a, b = y, _shift(y, p)
    pair = ~np.isnan(a) & ~np.isnan(b)
    wa = _windows(np.where(pair, a, np.nan), p)
    wb = _windows(np.where(pair, b, np.nan), p)
    n = np.sum(~np.isnan(wa), axis=-1)
    # exact constancy test; a variance threshold would misfire on rounding
    flat_a = _quiet(np.nanmax, wa, axis=-1) == _quiet(np.nanmin, wa, axis=-1)
    flat_b = _quiet(np.nanmax, wb, axis=-1) == _quiet(np.nanmin, wb, axis=-1)
    da = wa - _quiet(np.nanmean, wa, axis=-1)[..., None]
    db = wb - _quiet(np.nanmean, wb, axis=-1)[..., None]
    num = np.nansum(da * db, axis=-1)
    den = np.sqrt(np.nansum(da * da, axis=-1) * np.nansum(db * db, axis=-1))
    ok = (n >= MIN_SEASONAL_PAIRS) & ~flat_a & ~flat_b & (den > 0)
    r = np.divide(num, den, out=np.zeros_like(num), where=ok)
    r = np.clip(np.where(ok, r, 0.0), -1.0, 1.0)
    return r.reshape(np.shape(y_eff)) if np.ndim(y_eff) == 1 else r


@dataclass(frozen=True)
class SpikeStats:
    robust_z: np.ndarray
    spike: np.ndarray
    time_since_spike: np.ndarray


def spike_stats(y_eff: np.ndarray, spec: FeatureSpec = FeatureSpec()) -> SpikeStats:
    y = np.atleast_2d(np.asarray(y_eff, dtype=np.float64))
    win = _windows(y, spec.spike_window)
    med = _quiet(np.nanmedian, win, axis=-1)
    mad = _quiet(np.nanmedian, np.abs(win - med[..., None]), axis=-1)
    z = (y - med) / (MAD_SCALE * mad + MAD_EPS)
    with np.errstate(invalid="ignore"):
        spike = (z > SPIKE_Z) | ((med == 0) & (y > 0))
    since = np.empty(y.shape, dtype=np.int64)
    last = np.full(y.shape[0], SPIKE_CAP, dtype=np.int64)
    for t in range(y.shape[1]):
        last = np.where(spike[:, t], 0, np.minimum(last + (t > 0), SPIKE_CAP))
        since[:, t] = last
    out = SpikeStats(z, spike, since)
    if np.ndim(y_eff) == 1:
        out = SpikeStats(z[0], spike[0], since[0])
    return out


def _fourier_week(iso_week: np.ndarray) -> np.ndarray:
    return np.minimum(iso_week, 52).astype(np.float64)


# ---------------------------------------------------------------------------
# feature matrix
# ---------------------------------------------------------------------------

@dataclass
class FeatureMatrix:
    """Long feature table plus column bookkeeping."""

    frame: pd.DataFrame
    spec: FeatureSpec
    n_items: int
    n_weeks: int
    numeric: list[str] = field(default_factory=list)
    categorical: list[str] = field(default_factory=lambda: list(CATEGORICAL_COLUMNS))
    targets: list[str] = field(default_factory=list)

    @property
    def model_columns(self) -> list[str]:
        return self.numeric + self.categorical

    def rows_at(self, week: int) -> pd.DataFrame:
        return self.frame[self.frame["week"] == week]

    def to_csv(self, path) -> None:
        self.frame.to_csv(path, index=False, na_rep="")


def build_arrays(panel: SalesPanel, spec: FeatureSpec = FeatureSpec()) -> dict[str, np.ndarray]:
    """All per-(item, week) feature arrays, unscaled target-based ones included."""
    y = panel.effective()
    n, t = y.shape
    scale = compute_scale_factor(y, spec)
    out: dict[str, np.ndarray] = {}

    raw: dict[str, np.ndarray] = {}
    for k in (*spec.short_lags, *spec.seasonal_lags):
        raw[f"lag_{k}"] = _shift(y, k)
    for w in spec.roll_windows:
        raw[f"roll_mean_{w}"] = rolling_mean(y, w)
    for w in spec.roll_windows:
        raw[f"roll_median_{w}"] = rolling_median(y, w)
    for s in spec.ewm_spans:
        raw[f"ewm_{s}"] = ewm_mean(y, s)
    raw[f"std_{spec.std_window}"] = rolling_std(y, spec.std_window)
    raw[f"iqr_{spec.iqr_window}"] = rolling_iqr(y, spec.iqr_window)
    for k in spec.momentum_ks:
        raw[f"momentum_{k}"] = y - _shift(y, k)
    diffs = y - _shift(y, 1)
    raw[f"slope_{spec.slope_window}"] = rolling_mean(diffs, spec.slope_window)
    lo, hi = spec.last_year_offsets
    raw["last_year_window"] = _shift(rolling_mean(y, hi - lo + 1), lo)
    for name, arr in raw.items():
        out[name] = arr / scale

    iso = panel.axis.iso_weeks()
    fw = _fourier_week(iso)
    for k in range(1, spec.fourier_harmonics + 1):
        ang = 2.0 * np.pi * k * fw / spec.season_period
        out[f"fourier_sin_{k}"] = np.broadcast_to(np.sin(ang), (n, t))
        out[f"fourier_cos_{k}"] = np.broadcast_to(np.cos(ang), (n, t))
    out["seasonality_strength"] = seasonality_strength(y, spec)
    sp = spike_stats(y, spec)
    out["robust_z"] = sp.robust_z
    out["spike"] = sp.spike.astype(np.float64)
    out["time_since_spike"] = sp.time_since_spike.astype(np.float64)
    nz = np.where(np.isnan(y), np.nan, (y > 0).astype(np.float64))
    out[f"nonzero_rate_{spec.nonzero_rate_window}"] = rolling_mean(nz, spec.nonzero_rate_window)

    out["week_of_year"] = np.broadcast_to(iso, (n, t))
    out["scale_factor"] = scale
    out["observation_weight"] = np.broadcast_to(observation_weights(t, spec), (n, t))
    for h in spec.horizons:
        out[f"target_h{h}"] = np.concatenate(
            [y[:, h:], np.full((n, min(h, t)), np.nan)], axis=1)[:, :t] / scale
    return out


def build_features(panel: SalesPanel, spec: FeatureSpec = FeatureSpec()) -> FeatureMatrix:
    arrays = build_arrays(panel, spec)
    n, t = panel.n_items, panel.n_weeks
    items = panel.items
    cols: dict[str, np.ndarray] = {
        "Store": np.repeat([it.store for it in items], t),
        "Product": np.repeat([it.product for it in items], t),
        "unique_id": np.repeat([it.uid for it in items], t),
        "week": np.tile(np.arange(t), n),
        "date": np.tile([d.isoformat() for d in panel.axis.start_dates], n),
        "week_of_year": arrays["week_of_year"].reshape(-1).astype(np.int64),
    }
    numeric = spec.numeric_columns()
    for c in numeric:
        cols[c] = np.ascontiguousarray(arrays[c]).reshape(-1)
    cols["scale_factor"] = arrays["scale_factor"].reshape(-1)
    cols["observation_weight"] = np.ascontiguousarray(arrays["observation_weight"]).reshape(-1)
    targets = spec.target_columns()
    for c in targets:
        cols[c] = arrays[c].reshape(-1)
    frame = pd.DataFrame(cols)
    return FeatureMatrix(frame, spec, n, t, numeric=numeric, targets=targets)


# ---------------------------------------------------------------------------
# imputation
# ---------------------------------------------------------------------------

@dataclass
class Imputer:
    """Two-level median fill fitted on rows at or before a cutoff week."""

    columns: list[str]
    per_series: pd.DataFrame
    global_median: pd.Series
    cutoff: int
    report: list[str] = field(default_factory=list)

    @classmethod
    def fit(cls, matrix: FeatureMatrix, cutoff: int) -> "Imputer":
        if not 0 <= cutoff < matrix.n_weeks:
            raise ValueError(f"cutoff {cutoff} outside the week axis")
        cols = list(matrix.numeric)
        past = matrix.frame.loc[matrix.frame["week"] <= cutoff, ["unique_id", *cols]]
        per_series = past.groupby("unique_id", sort=True)[cols].median()
        glob = past[cols].median()
        report = []
        for c in cols:
            if np.isnan(glob[c]):
                report.append(f"feature {c} has no values up to week {cutoff}; filled with 0")
                log.warning(report[-1])
        glob = glob.fillna(0.0)
        return cls(cols, per_series, glob, cutoff, report)

    def apply(self, frame: pd.DataFrame) -> pd.DataFrame:
        out = frame.copy()
        med = self.per_series.reindex(out["unique_id"].to_numpy())
        for c in self.columns:
            v = out[c].to_numpy(dtype=np.float64, copy=True)
            miss = np.isnan(v)
            if miss.any():
                v[miss] = med[c].to_numpy()[miss]
                miss = np.isnan(v)
                v[miss] = self.global_median[c]
                out[c] = v
        return out


def impute(matrix: FeatureMatrix, train_week_cutoff: int) -> tuple[FeatureMatrix, Imputer]:
    """Fill missing numeric features; categoricals and targets untouched."""
    imp = Imputer.fit(matrix, train_week_cutoff)
    return replace(matrix, frame=imp.apply(matrix.frame)), imp
