"""Cost-aware order-up-to policy and the coverage benchmark.

At the end of week ``t`` the policy projects on-hand stock to the start of
``t + 3`` (the first week an order can affect) using point forecasts, then
orders the gap to a target ``B = D3 + z * phi * sqrt(D3)`` where ``z`` is the
standard-normal quantile of the critical fractile ``c_s / (c_s + c_h)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .panel import CostParams, InventorySnapshot
from .simulator import run_episode

# Wichura (1988), algorithm AS241 PPND16: about 1e-16 relative accuracy.
_A = (3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
      2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
      5.2264952788528545610e3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
      7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


def _poly(coef, x: float) -> float:
    acc = 0.0
    for c in reversed(coef):
        acc = acc * x + c
    return acc


def inv_norm_cdf(q: float) -> float:
    """Standard normal quantile for ``0 < q < 1``."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")
    d = q - 0.5
    if abs(d) <= 0.425:
        r = 0.180625 - d * d
        return d * _poly(_A, r) / _poly(_B, r)
    r = math.sqrt(-math.log(min(q, 1.0 - q)))
    if r <= 5.0:
        r -= 1.6
        x = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        x = _poly(_E, r) / _poly(_F, r)
    return -x if d < 0 else x


def critical_fractile(costs: CostParams) -> float:
    total = costs.shortage_cost + costs.holding_cost
    if total <= 0:
        raise ValueError("shortage and holding cost cannot both be zero")
    return costs.shortage_cost / total


@dataclass(frozen=True)
class PolicyParams:
    costs: CostParams
    critical_fractile: float
    safety_factor: float
    phi: float = 1.0

    @classmethod
    def from_costs(cls, costs: CostParams, phi: float = 1.0) -> "PolicyParams":
        q = critical_fractile(costs)
        if q >= 1.0:
            raise ValueError("zero holding cost gives an unbounded target stock")
        return cls(costs, q, inv_norm_cdf(q), phi)

    def with_phi(self, phi: float) -> "PolicyParams":
        if phi < 0:
            raise ValueError("phi must be >= 0")
        return PolicyParams(self.costs, self.critical_fractile, self.safety_factor, phi)


def round_half_up(x):
    """Nearest integer with halves rounded up (2.5 -> 3, -0.5 -> 0)."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


@dataclass(frozen=True)
class ProjectionResult:
    i_t1: np.ndarray
    e_t1: np.ndarray
    i_t2: np.ndarray
    e_t2: np.ndarray

    @property
    def i_t3(self) -> np.ndarray:
        return self.e_t2


def _nonneg(x, what):
    x = np.asarray(x)
    if np.any(x < 0):
        raise ValueError(f"negative {what}")
    return x


def project_inventory(end_inv, receipts, forecasts) -> ProjectionResult:
    """Roll end-of-week stock forward two weeks under point-forecast demand.

    ``receipts`` is ``(n, 2)`` (due at t+1, t+2); ``forecasts`` is ``(n, >=2)``
    post-processed forecasts for t+1, t+2 (further columns ignored).
    """
    e = _nonneg(end_inv, "end inventory")
    r = _nonneg(np.asarray(receipts).reshape(len(e), -1), "receipts")
    d = _nonneg(np.asarray(forecasts).reshape(len(e), -1), "forecasts")
    i1 = e + r[:, 0]
    e1 = np.maximum(i1 - d[:, 0], 0)
    i2 = e1 + r[:, 1]
    e2 = np.maximum(i2 - d[:, 1], 0)
    return ProjectionResult(i1, e1, i2, e2)


def target_stock(d3, params: PolicyParams) -> np.ndarray:
    d3 = _nonneg(np.asarray(d3, dtype=np.float64), "forecast")
    if params.safety_factor == 0.0 or params.phi == 0.0:
        return d3.copy()
    return d3 + params.safety_factor * params.phi * np.sqrt(d3)


def order_quantity(target, projected) -> np.ndarray:
    gap = np.asarray(target, dtype=np.float64) - np.asarray(projected, dtype=np.float64)
    return np.maximum(round_half_up(gap), 0).astype(np.int64)


def cost_aware_orders(end_inv, receipts, forecasts, params: PolicyParams) -> np.ndarray:
    """Full decision for one week. ``forecasts`` are integer ``(n, 3)``."""
    forecasts = np.asarray(forecasts)
    proj = project_inventory(end_inv, receipts, forecasts[:, :2])
    return order_quantity(target_stock(forecasts[:, 2], params), proj.i_t3)


def coverage_orders(weekly_forecast, on_hand, in_transit, weeks: int = 4) -> np.ndarray:
    """Order up to ``weeks`` weeks of forecast demand over the inventory position."""
    position = np.asarray(on_hand) + np.asarray(in_transit)
    return order_quantity(weeks * np.asarray(weekly_forecast, dtype=np.float64), position)


# ---------------------------------------------------------------------------
# replay and calibration
# ---------------------------------------------------------------------------

DEFAULT_PHI_GRID = tuple(round(0.05 * k, 2) for k in range(61))


def cost_aware_policy(forecaster, params: PolicyParams, first_week: int):
    """Simulator policy ordering with :func:`cost_aware_orders`.

    ``forecaster(t)`` returns integer ``(n, 3)`` forecasts made at the end of
    panel week ``t``; episode week ``k`` is panel week ``first_week + k`` so
    its order is decided with forecasts from ``first_week + k - 1``.
    """
    def decide(state, k):
        f = forecaster(first_week + k - 1)
        # start-of-week stock already holds this week's receipts
        receipts = np.column_stack([np.zeros(state.n_items, dtype=np.int64), state.due(1)])
        return cost_aware_orders(state.on_hand, receipts, f, params)
    return decide


def benchmark_coverage_policy(panel, decision_week: int, on_hand, in_transit,
                              weeks: int = 4) -> np.ndarray:
    """Benchmark orders: ``weeks`` of the seasonal-MA h=3 forecast over inventory position."""
    from .forecast import baseline_seasonal_ma  # forecast imports this module
    f = baseline_seasonal_ma(panel, decision_week).values[:, 2]
    return coverage_orders(f, on_hand, in_transit, weeks)


def coverage_policy(panel, first_week: int, weeks: int = 4):
    def decide(state, k):
        return benchmark_coverage_policy(panel, first_week + k - 1, state.on_hand,
                                         state.in_transit(), weeks)
    return decide


def default_snapshot(panel, week: int, lead_time: int = 2, window: int = 13):
    """Opening stock for a replay starting at ``week`` when none is recorded.

    ``lead_time + 1`` weeks of the trailing mean effective demand on hand and
    nothing in transit.
    """
    y = panel.effective()[:, max(0, week - window): week]
    cnt = np.sum(~np.isnan(y), axis=1)
    mean = np.where(cnt > 0, np.nansum(y, axis=1) / np.maximum(cnt, 1), 0.0)
    on_hand = round_half_up((lead_time + 1) * mean).astype(np.int64)
    return InventorySnapshot(tuple(panel.items), on_hand,
                             np.zeros((panel.n_items, lead_time), dtype=np.int64))


def _window_demand(panel, window, demand):
    start, stop = window
    if not 1 <= start < stop <= panel.n_weeks:
        raise ValueError(f"replay window {window} outside the history")
    source = panel.sales if demand is None else np.asarray(demand)
    if source.shape != (panel.n_items, panel.n_weeks):
        raise ValueError("demand must match the panel shape")
    return source[:, start:stop].astype(np.int64)


def replay(panel, policy, init, costs: CostParams, window: tuple[int, int], demand=None):
    """Run ``policy`` over panel weeks ``[start, stop)``.

    The last ``lead_time`` weeks only drain deliveries, so ``stop - start -
    lead_time`` orders are placed. Demand defaults to the observed sales.
    """
    d = _window_demand(panel, window, demand)
    horizon = d.shape[1] - costs.lead_time_weeks
    if horizon < 1:
        raise ValueError(f"replay window needs at least {costs.lead_time_weeks + 1} weeks")
    return run_episode(d, init, policy, costs, horizon)


def calibrate_phi(panel, forecaster, init, costs: CostParams, window: tuple[int, int],
                  grid=DEFAULT_PHI_GRID, demand=None, segment=None):
    """Grid-search the buffer multiplier by replaying ``window``.

    The same forecasts are used for every grid point. Returns the phi with
    the lowest total cost (first one on ties) and the cost per grid point.
    """
    if segment is not None:
        raise NotImplementedError("only a global phi is supported")
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("empty phi grid")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("phi grid must be sorted")
    if window[1] - window[0] < costs.lead_time_weeks + 1:
        raise ValueError(f"calibration window needs at least {costs.lead_time_weeks + 1} weeks")
    base = PolicyParams.from_costs(costs)
    curve = []
    for phi in grid:
        pol = cost_aware_policy(forecaster, base.with_phi(phi), window[0])
        curve.append(replay(panel, pol, init, costs, window, demand).total)
    curve = np.array(curve)
    return grid[int(np.argmin(curve))], curve


def order_sheet(items, decision_week, orders) -> pd.DataFrame:
    return pd.DataFrame({"Store": [it.store for it in items],
                         "Product": [it.product for it in items],
                         "decision_week": decision_week,
                         "order_qty": np.asarray(orders, dtype=np.int64)})


def write_order_sheet(items, decision_week, orders, path) -> None:
    order_sheet(items, decision_week, orders).to_csv(path, index=False)
