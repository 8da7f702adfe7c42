"""Synthetic weekly retail panels for desk-scale runs.

Each item draws its own regime: demand level, zero inflation, calendar
seasonality, linear trend, a possibly delayed start and runs of stockout
weeks. True demand is kept alongside the censored sales so simulations can
be replayed against what customers actually wanted.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

from .panel import (InventorySnapshot, ItemKey, SalesPanel, WeekAxis, write_sales_wide,
                    write_snapshot)
from .seeding import substream


@dataclass(frozen=True)
class SyntheticSpec:
    n_items: int = 200
    n_weeks: int = 200
    scale_range: tuple[float, float] = (0.3, 100.0)
    zero_prob_range: tuple[float, float] = (0.0, 0.7)
    seasonal_amplitude_range: tuple[float, float] = (0.0, 0.8)
    trend_range: tuple[float, float] = (-0.5, 1.0)
    stockout_rate: float = 0.1
    stockout_run_weeks: float = 2.0
    delayed_start_fraction: float = 0.1
    start_date: str = "2021-04-12"
    seed: int = 0

    def __post_init__(self):
        if self.n_items < 1 or self.n_weeks < 1:
            raise ValueError("need at least one item and one week")
        if not 0.0 <= self.stockout_rate < 1.0:
            raise ValueError("stockout_rate must lie in [0, 1)")
        lo, hi = self.zero_prob_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("zero_prob_range must lie in [0, 1]")
        if dt.date.fromisoformat(self.start_date).weekday() != 0:
            raise ValueError("start_date must be a Monday")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown synthetic spec keys: {sorted(bad)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SyntheticPanel:
    panel: SalesPanel
    demand: np.ndarray
    snapshot: InventorySnapshot
    regimes: pd.DataFrame


def _item_keys(n: int, rng) -> list[ItemKey]:
    n_stores = max(1, int(round(np.sqrt(n / 2))))
    n_products = max(1, -(-n // n_stores))
    keys = []
    for k in range(n):
        s, p = k % n_stores, k // n_stores
        keys.append(ItemKey(f"S{s:03d}", f"P{p:04d}"))
    return keys


def _stockout_mask(rng, n, t, rate, run):
    if rate <= 0:
        return np.ones((n, t), dtype=bool)
    leave = 1.0 / max(run, 1.0)
    enter = rate * leave / (1.0 - rate)
    out = rng.random(n) < rate
    mask = np.empty((n, t), dtype=bool)
    u = rng.random((n, t))
    for k in range(t):
        out = np.where(out, u[:, k] >= leave, u[:, k] < enter)
        mask[:, k] = ~out
    return mask


def generate(spec: SyntheticSpec) -> SyntheticPanel:
    rng = substream(spec.seed, "synth")
    n, t = spec.n_items, spec.n_weeks
    axis = WeekAxis.from_start(dt.date.fromisoformat(spec.start_date), t)
    woy = np.minimum(axis.iso_weeks(), 52)

    lo, hi = spec.scale_range
    level = np.exp(rng.uniform(np.log(lo), np.log(hi), n))
    p0 = rng.uniform(*spec.zero_prob_range, n)
    amp = rng.uniform(*spec.seasonal_amplitude_range, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    trend = rng.uniform(*spec.trend_range, n)
    delayed = rng.random(n) < spec.delayed_start_fraction
    start = np.where(delayed, rng.integers(1, max(2, t // 2), n), 0)

    season = 1.0 + amp[:, None] * np.sin(2 * np.pi * woy[None, :] / 52.0 + phase[:, None])
    drift = np.maximum(1.0 + trend[:, None] * np.arange(t)[None, :] / max(t - 1, 1), 0.05)
    mean = level[:, None] * season * drift
    active = rng.random((n, t)) >= p0[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = np.where(p0[:, None] < 1.0, mean / (1.0 - p0[:, None]), 0.0)
    demand = np.where(active, rng.poisson(rate), 0)
    demand[np.arange(t)[None, :] < start[:, None]] = 0

    in_stock = _stockout_mask(rng, n, t, spec.stockout_rate, spec.stockout_run_weeks)
    sales = np.where(in_stock, demand, 0)

    items = _item_keys(n, rng)
    panel = SalesPanel.from_arrays(items, axis, sales, in_stock)

    recent = level * drift[:, -1]
    on_hand = rng.poisson(1.5 * recent)
    transit = np.stack([rng.poisson(recent), rng.poisson(recent)], axis=1)
    snapshot = InventorySnapshot(tuple(items), on_hand.astype(np.int64), transit.astype(np.int64))
    regimes = pd.DataFrame({
        "Store": [it.store for it in items], "Product": [it.product for it in items],
        "level": level, "zero_prob": p0, "seasonal_amplitude": amp, "trend": trend,
        "start_week": start,
    })
    return SyntheticPanel(panel, demand.astype(np.int64), snapshot, regimes)


def write_demand_wide(panel: SalesPanel, demand: np.ndarray, path) -> None:
    header = [d.isoformat() for d in panel.axis.start_dates]
    keys = pd.DataFrame({"Store": [it.store for it in panel.items],
                         "Product": [it.product for it in panel.items]})
    pd.concat([keys, pd.DataFrame(np.asarray(demand, dtype=np.int64), columns=header)],
              axis=1).to_csv(path, index=False)


def write_synthetic(syn: SyntheticPanel, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"sales": out / "sales.csv", "flags": out / "in_stock.csv",
             "inventory": out / "inventory.csv", "demand": out / "demand.csv"}
    write_sales_wide(syn.panel, paths["sales"], paths["flags"])
    write_snapshot(syn.snapshot, paths["inventory"])
    write_demand_wide(syn.panel, syn.demand, paths["demand"])
    return paths
