"""Weekly sales panels: loading, validation and the censoring-aware view.

A panel holds one row per store-product item and one column per week.
Weeks where the item was not in stock censor demand, so the effective
series masks them as missing instead of treating them as zero demand.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

KEY_COLUMNS = ["Store", "Product"]
SNAPSHOT_COLUMNS = ["Store", "Product", "on_hand", "arrive_w1", "arrive_w2"]


class PanelError(ValueError):
    """Structural defect in panel input (bad header, mismatched files, ...)."""


@dataclass(frozen=True, order=True)
class ItemKey:
    store: str
    product: str

    @property
    def uid(self) -> str:
        return f"{self.store}_{self.product}"


@dataclass(frozen=True)
class WeekAxis:
    start_dates: tuple[dt.date, ...]

    def __post_init__(self):
        dates = self.start_dates
        for k, d in enumerate(dates):
            if d.weekday() != 0:
                raise PanelError(f"week {k} starts on {d}, which is not a Monday")
            if k and (d - dates[k - 1]).days != 7:
                raise PanelError(f"weeks {k - 1} and {k} are not 7 days apart")

    @classmethod
    def from_start(cls, first: dt.date, n_weeks: int) -> "WeekAxis":
        return cls(tuple(first + dt.timedelta(days=7 * k) for k in range(n_weeks)))

    def __len__(self) -> int:
        return len(self.start_dates)

    def date(self, k: int) -> dt.date:
        return self.start_dates[0] + dt.timedelta(days=7 * k)

    def index(self, date: dt.date | str) -> int:
        if isinstance(date, str):
            date = dt.date.fromisoformat(date)
        delta = (date - self.start_dates[0]).days
        if delta % 7 or not 0 <= delta // 7 < len(self):
            raise KeyError(f"{date} is not on this week axis")
        return delta // 7

    def iso_weeks(self) -> np.ndarray:
        return np.array([d.isocalendar()[1] for d in self.start_dates], dtype=np.int64)

    def truncate(self, n_weeks: int) -> "WeekAxis":
        return WeekAxis(self.start_dates[:n_weeks])


@dataclass(frozen=True)
class Violation:
    item: ItemKey
    week: int
    sales: float


@dataclass(frozen=True, eq=False)
class SalesPanel:
    """Sales and in-stock flags, shape ``(n_items, n_weeks)``.

    ``violations`` lists item-weeks where the flag says out of stock but
    sales are positive. They are kept as loaded (report-and-continue).
    """

    items: tuple[ItemKey, ...]
    axis: WeekAxis
    sales: np.ndarray
    in_stock: np.ndarray
    violations: tuple[Violation, ...] = field(default=())

    def __post_init__(self):
        n, t = len(self.items), len(self.axis)
        if n == 0 or t == 0:
            raise PanelError("panel is empty")
        if self.sales.shape != (n, t) or self.in_stock.shape != (n, t):
            raise PanelError(f"array shapes do not match ({n} items, {t} weeks)")
        if len(set(self.items)) != n:
            raise PanelError("duplicate (Store, Product) rows")
        if not np.all(np.isfinite(self.sales)):
            raise PanelError("non-finite sales value")
        if np.any(self.sales < 0):
            i, k = np.argwhere(self.sales < 0)[0]
            raise PanelError(f"negative sales for {self.items[i]} in week {k}")
        self.sales.setflags(write=False)
        self.in_stock.setflags(write=False)

    @classmethod
    def from_arrays(cls, items, axis: WeekAxis, sales, in_stock) -> "SalesPanel":
        sales = np.array(sales, dtype=np.float64)
        in_stock = np.array(in_stock, dtype=bool)
        items = tuple(it if isinstance(it, ItemKey) else ItemKey(str(it[0]), str(it[1]))
                      for it in items)
        bad = np.argwhere(~in_stock & (sales != 0))
        violations = tuple(Violation(items[i], int(k), float(sales[i, k])) for i, k in bad)
        return cls(items, axis, sales, in_stock, violations)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_weeks(self) -> int:
        return len(self.axis)

    def item_index(self, item: ItemKey) -> int:
        try:
            return self._index[item]
        except KeyError:
            raise KeyError(f"unknown item {item}") from None

    @property
    def _index(self) -> dict[ItemKey, int]:
        idx = self.__dict__.get("_idx_cache")
        if idx is None:
            idx = {it: i for i, it in enumerate(self.items)}
            object.__setattr__(self, "_idx_cache", idx)
        return idx

    def effective(self) -> np.ndarray:
        """Sales with out-of-stock weeks set to NaN, shape ``(n_items, n_weeks)``."""
        return np.where(self.in_stock, self.sales, np.nan)

    def truncate(self, n_weeks: int) -> "SalesPanel":
        """History up to and including week ``n_weeks - 1``."""
        return SalesPanel.from_arrays(self.items, self.axis.truncate(n_weeks),
                                      self.sales[:, :n_weeks], self.in_stock[:, :n_weeks])

    def select(self, items) -> "SalesPanel":
        rows = [self.item_index(it) for it in items]
        return SalesPanel.from_arrays([self.items[r] for r in rows], self.axis,
                                      self.sales[rows], self.in_stock[rows])

    def validation_report(self) -> list[str]:
        return [f"{v.item.store},{v.item.product},{self.axis.date(v.week)}: "
                f"in_stock=false but sales={v.sales:g}" for v in self.violations]


def effective_demand(panel: SalesPanel, item: ItemKey) -> np.ndarray:
    """Effective demand of one item: sales where in stock, NaN elsewhere."""
    i = panel.item_index(item)
    return np.where(panel.in_stock[i], panel.sales[i], np.nan)


@dataclass(frozen=True)
class CostParams:
    shortage_cost: float = 1.0
    holding_cost: float = 0.2
    lead_time_weeks: int = 2

    def __post_init__(self):
        if not self.shortage_cost > 0:
            raise ValueError("shortage_cost must be > 0")
        if self.holding_cost < 0:
            raise ValueError("holding_cost must be >= 0")
        if self.lead_time_weeks < 1:
            raise ValueError("lead_time_weeks must be >= 1")


@dataclass(frozen=True, eq=False)
class InventorySnapshot:
    """On-hand stock and scheduled receipts at the end of a week.

    ``in_transit[:, k - 1]`` arrives at the start of ``k`` weeks later.
    """

    items: tuple[ItemKey, ...]
    on_hand: np.ndarray
    in_transit: np.ndarray

    def __post_init__(self):
        if self.on_hand.shape != (len(self.items),):
            raise PanelError("on_hand length does not match items")
        if self.in_transit.ndim != 2 or self.in_transit.shape[0] != len(self.items):
            raise PanelError("in_transit must be (n_items, max_offset)")
        if np.any(self.on_hand < 0) or np.any(self.in_transit < 0):
            raise PanelError("inventory quantities must be >= 0")

    @classmethod
    def zeros(cls, items, lead_time: int = 2) -> "InventorySnapshot":
        n = len(items)
        return cls(tuple(items), np.zeros(n, dtype=np.int64), np.zeros((n, lead_time), dtype=np.int64))

    def aligned(self, items) -> "InventorySnapshot":
        pos = {it: i for i, it in enumerate(self.items)}
        missing = [it for it in items if it not in pos]
        if missing:
            raise PanelError(f"snapshot lacks {len(missing)} items, e.g. {missing[0]}")
        rows = [pos[it] for it in items]
        return InventorySnapshot(tuple(items), self.on_hand[rows], self.in_transit[rows])


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def _parse_week_header(columns) -> WeekAxis:
    dates = []
    for c in columns:
        try:
            dates.append(dt.date.fromisoformat(str(c).strip()))
        except ValueError:
            raise PanelError(f"malformed date header {c!r}") from None
    return WeekAxis(tuple(dates))


def _read_wide(path) -> tuple[list[ItemKey], list[str], pd.DataFrame]:
    df = pd.read_csv(path, dtype={"Store": str, "Product": str})
    for c in KEY_COLUMNS:
        if c not in df.columns:
            raise PanelError(f"{path}: missing column {c!r}")
    items = [ItemKey(s, p) for s, p in zip(df["Store"], df["Product"])]
    week_cols = [c for c in df.columns if c not in KEY_COLUMNS]
    return items, week_cols, df[week_cols]


def _parse_flags(values: pd.DataFrame, path) -> np.ndarray:
    text = values.astype(str).apply(lambda col: col.str.strip().str.lower())
    truthy = text.isin(["true", "1", "1.0"])
    falsy = text.isin(["false", "0", "0.0"])
    bad = ~(truthy | falsy)
    if bad.to_numpy().any():
        r, c = np.argwhere(bad.to_numpy())[0]
        raise PanelError(f"{path}: cannot read in-stock flag {values.iat[r, c]!r}")
    return truthy.to_numpy()


def load_sales_wide(path, flags_path) -> SalesPanel:
    """Load a wide sales CSV and its matching in-stock CSV."""
    items, cols, values = _read_wide(path)
    f_items, f_cols, f_values = _read_wide(flags_path)
    axis = _parse_week_header(cols)
    if [str(c).strip() for c in f_cols] != [str(c).strip() for c in cols]:
        raise PanelError("sales and in-stock files have different week columns")
    if set(items) != set(f_items) or len(items) != len(f_items):
        raise PanelError("sales and in-stock files have different item sets")
    try:
        sales = values.apply(pd.to_numeric, errors="raise").to_numpy(dtype=np.float64)
    except (ValueError, TypeError) as exc:
        raise PanelError(f"{path}: non-numeric sales cell ({exc})") from None
    flags = _parse_flags(f_values, flags_path)
    order = {it: r for r, it in enumerate(f_items)}
    flags = flags[[order[it] for it in items]]
    return SalesPanel.from_arrays(items, axis, sales, flags)


def write_sales_wide(panel: SalesPanel, path, flags_path) -> None:
    header = [d.isoformat() for d in panel.axis.start_dates]
    keys = pd.DataFrame({"Store": [it.store for it in panel.items],
                         "Product": [it.product for it in panel.items]})
    sales = pd.DataFrame(panel.sales, columns=header)
    # integral panels are written without a trailing ".0"
    if np.all(panel.sales == np.round(panel.sales)):
        sales = sales.astype(np.int64)
    pd.concat([keys, sales], axis=1).to_csv(path, index=False)
    flags = pd.DataFrame(np.where(panel.in_stock, "True", "False"), columns=header)
    pd.concat([keys, flags], axis=1).to_csv(flags_path, index=False)


def load_snapshot(path) -> InventorySnapshot:
    df = pd.read_csv(path, dtype={"Store": str, "Product": str})
    missing = [c for c in SNAPSHOT_COLUMNS if c not in df.columns]
    if missing:
        raise PanelError(f"{path}: missing columns {missing}")
    items = tuple(ItemKey(s, p) for s, p in zip(df["Store"], df["Product"]))
    on_hand = df["on_hand"].to_numpy(dtype=np.int64)
    in_transit = df[["arrive_w1", "arrive_w2"]].to_numpy(dtype=np.int64)
    return InventorySnapshot(items, on_hand, in_transit)


def write_snapshot(snap: InventorySnapshot, path) -> None:
    transit = np.zeros((len(snap.items), 2), dtype=np.int64)
    k = min(2, snap.in_transit.shape[1])
    transit[:, :k] = snap.in_transit[:, :k]
    pd.DataFrame({
        "Store": [it.store for it in snap.items],
        "Product": [it.product for it in snap.items],
        "on_hand": snap.on_hand,
        "arrive_w1": transit[:, 0],
        "arrive_w2": transit[:, 1],
    }).to_csv(path, index=False)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PanelDiagnostics:
    n_items: int
    n_weeks: int
    n_stores: int
    n_products: int
    first_week: str
    last_week: str
    zero_rate: float
    stockout_rate: float
    min_item_mean: float
    max_item_mean: float
    n_violations: int
    series_start_counts: dict[int, int]

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["series_start_counts"] = {str(k): v for k, v in self.series_start_counts.items()}
        return d


def panel_diagnostics(panel: SalesPanel) -> PanelDiagnostics:
    """Zero-sales share, stockout share, per-item mean range and series starts."""
    sales = panel.sales
    means = sales.mean(axis=1)
    sold = sales > 0
    # week of first positive sale; series that never sell count as starting at n_weeks
    first = np.where(sold.any(axis=1), sold.argmax(axis=1), panel.n_weeks)
    starts, counts = np.unique(first, return_counts=True)
    return PanelDiagnostics(
        n_items=panel.n_items,
        n_weeks=panel.n_weeks,
        n_stores=len({it.store for it in panel.items}),
        n_products=len({it.product for it in panel.items}),
        first_week=panel.axis.start_dates[0].isoformat(),
        last_week=panel.axis.start_dates[-1].isoformat(),
        zero_rate=float(np.mean(sales == 0)),
        stockout_rate=float(np.mean(~panel.in_stock)),
        min_item_mean=float(means.min()),
        max_item_mean=float(means.max()),
        n_violations=len(panel.violations),
        series_start_counts={int(s): int(c) for s, c in zip(starts, counts)},
    )
