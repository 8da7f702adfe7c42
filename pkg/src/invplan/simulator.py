"""Periodic-review lost-sales inventory simulation with a fixed lead time.

Weekly sequence for every item::

    on_hand   = ending(previous week) + receipts due this week
    sales     = min(on_hand, demand)
    lost      = max(demand - on_hand, 0)      # never backordered
    ending    = on_hand - sales
    cost      = shortage_cost * lost + holding_cost * ending

An order placed at the end of week ``t`` arrives at the start of week
``t + lead_time + 1``. Stock in transit is not charged.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .panel import CostParams, InventorySnapshot


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class WeekOutcome:
    week: int
    demand: np.ndarray
    on_hand: np.ndarray
    receipts: np.ndarray
    sales: np.ndarray
    lost: np.ndarray
    ending: np.ndarray
    orders: np.ndarray
    shortage_cost: float
    holding_cost: float

    @property
    def week_cost(self) -> float:
        return self.shortage_cost + self.holding_cost


@dataclass
class CostLedger:
    shortage_total: float = 0.0
    holding_total: float = 0.0
    per_week: list[WeekOutcome] = field(default_factory=list)

    def record(self, outcome: WeekOutcome) -> None:
        self.per_week.append(outcome)
        self.shortage_total += outcome.shortage_cost
        self.holding_total += outcome.holding_cost

    @property
    def total(self) -> float:
        return self.shortage_total + self.holding_total


def total_cost(ledger: CostLedger) -> float:
    return ledger.shortage_total + ledger.holding_total


@dataclass(frozen=True)
class SimState:
    """Start-of-week state after this week's receipts have been added.

    ``pipeline[:, k]`` holds receipts due at the start of week ``week + 1 + k``.
    """

    week: int
    on_hand: np.ndarray
    pipeline: np.ndarray
    receipts: np.ndarray

    @classmethod
    def initial(cls, snapshot: InventorySnapshot, lead_time: int) -> "SimState":
        """Build week 0 from an end-of-week snapshot.

        The first in-transit column arrives at the start of week 0, the rest
        move up one slot.
        """
        n = len(snapshot.items)
        transit = np.asarray(snapshot.in_transit, dtype=np.int64)
        if transit.shape[1] > lead_time:
            if np.any(transit[:, lead_time:]):
                raise SimulationError("snapshot holds receipts beyond the lead time")
            transit = transit[:, :lead_time]
        pipe = np.zeros((n, lead_time + 1), dtype=np.int64)
        receipts = transit[:, 0] if transit.shape[1] else np.zeros(n, dtype=np.int64)
        pipe[:, : transit.shape[1] - 1] = transit[:, 1:]
        on_hand = np.asarray(snapshot.on_hand, dtype=np.int64) + receipts
        return cls(0, on_hand, pipe, receipts.copy())

    @property
    def n_items(self) -> int:
        return self.on_hand.shape[0]

    def in_transit(self) -> np.ndarray:
        """Total quantity on order, per item."""
        return self.pipeline.sum(axis=1)

    def due(self, weeks_ahead: int) -> np.ndarray:
        """Receipts due at the start of week ``week + weeks_ahead`` (>= 1)."""
        return self.pipeline[:, weeks_ahead - 1]


def _as_int(values, n: int, what: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.shape == ():
        arr = np.full(n, arr)
    if arr.shape != (n,):
        raise SimulationError(f"{what} must have one entry per item ({n})")
    if not np.all(arr == np.round(arr)):
        raise SimulationError(f"{what} must be integral")
    arr = arr.astype(np.int64)
    if np.any(arr < 0):
        raise SimulationError(f"negative {what}")
    return arr


def schedule(state: SimState, orders, weeks_ahead: int) -> SimState:
    """Add ``orders`` to the receipts due ``weeks_ahead`` weeks after ``state.week``."""
    orders = _as_int(orders, state.n_items, "orders")
    if not 1 <= weeks_ahead <= state.pipeline.shape[1]:
        raise SimulationError(f"cannot schedule {weeks_ahead} weeks ahead")
    pipe = state.pipeline.copy()
    pipe[:, weeks_ahead - 1] += orders
    return replace(state, pipeline=pipe)


def step_week(state: SimState, demand, orders, costs: CostParams) -> tuple[SimState, WeekOutcome]:
    """Realise one week of demand and place end-of-week orders."""
    n = state.n_items
    demand = _as_int(demand, n, "demand")
    orders = _as_int(orders, n, "orders")
    lead = costs.lead_time_weeks
    if state.pipeline.shape[1] < lead + 1:
        raise SimulationError("pipeline shorter than lead time")

    on_hand = state.on_hand
    sales = np.minimum(on_hand, demand)
    lost = np.maximum(demand - on_hand, 0)
    ending = on_hand - sales
    outcome = WeekOutcome(
        week=state.week, demand=demand, on_hand=on_hand, receipts=state.receipts,
        sales=sales, lost=lost, ending=ending, orders=orders,
        shortage_cost=float(costs.shortage_cost * lost.sum()),
        holding_cost=float(costs.holding_cost * ending.sum()),
    )

    pipe = state.pipeline.copy()
    pipe[:, lead] += orders          # arrives week + lead + 1
    receipts = pipe[:, 0].copy()
    pipe = np.concatenate([pipe[:, 1:], np.zeros((n, 1), dtype=np.int64)], axis=1)
    nxt = SimState(state.week + 1, ending + receipts, pipe, receipts)
    return nxt, outcome


Policy = Callable[[SimState, int], Sequence[int]]


def run_episode(demand, init: InventorySnapshot, policy: Policy, costs: CostParams,
                horizon: int) -> CostLedger:
    """Simulate ``horizon`` ordering rounds plus ``lead_time`` drain weeks.

    ``demand`` is ``(n_items, n_weeks)`` with at least ``horizon + lead_time``
    weeks. Before week ``k`` (``k < horizon``) the policy is asked for an order;
    it is treated as placed at the end of week ``k - 1`` and arrives at the
    start of week ``k + lead_time``. The drain weeks get no new orders so that
    the last deliveries are costed.
    """
    demand = np.asarray(demand)
    lead = costs.lead_time_weeks
    if horizon < 1:
        raise SimulationError("horizon must be >= 1")
    n_weeks = horizon + lead
    if demand.ndim != 2 or demand.shape[1] < n_weeks:
        raise SimulationError(f"demand trace needs {n_weeks} weeks, got {demand.shape[-1]}")
    state = SimState.initial(init, lead)
    if demand.shape[0] != state.n_items:
        raise SimulationError("demand rows do not match snapshot items")

    ledger = CostLedger()
    zero = np.zeros(state.n_items, dtype=np.int64)
    for k in range(n_weeks):
        if k < horizon:
            try:
                placed = _as_int(policy(state, k), state.n_items, "orders")
            except SimulationError as exc:
                raise SimulationError(f"policy at week {k}: {exc}") from None
            state = schedule(state, placed, lead)
        else:
            placed = zero
        state, out = step_week(state, demand[:, k], zero, costs)
        ledger.record(replace(out, orders=placed))
    return ledger


def write_episode_report(ledger: CostLedger, path, item_labels: Sequence[str],
                         costs: CostParams) -> None:
    """Per item-week CSV plus a trailing ``# summary`` line."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["week", "item", "demand", "sales", "lost", "ending", "receipts",
                    "order", "week_cost"])
        for out in ledger.per_week:
            for i, label in enumerate(item_labels):
                cost = costs.shortage_cost * out.lost[i] + costs.holding_cost * out.ending[i]
                w.writerow([out.week, label, int(out.demand[i]), int(out.sales[i]),
                            int(out.lost[i]), int(out.ending[i]), int(out.receipts[i]),
                            int(out.orders[i]), repr(float(cost))])
        fh.write(f"# summary shortage_total={ledger.shortage_total!r} "
                 f"holding_total={ledger.holding_total!r} total={ledger.total!r}\n")
