import datetime as dt
from fractions import Fraction

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from invplan.panel import CostParams, InventorySnapshot, ItemKey, SalesPanel, WeekAxis
from invplan.policy import (DEFAULT_PHI_GRID, PolicyParams, benchmark_coverage_policy,
                            calibrate_phi, cost_aware_orders, coverage_orders, critical_fractile,
                            default_snapshot, inv_norm_cdf, order_quantity, project_inventory,
                            replay, round_half_up, target_stock, write_order_sheet)
from tests.oracles import discretised_normal, newsvendor_cost, normal_quantile_bisection

VN2 = CostParams(1.0, 0.2, 2)


def panel_from(sales, first=dt.date(2021, 4, 12)):
    sales = np.atleast_2d(np.asarray(sales, dtype=float))
    items = [ItemKey("s", str(i)) for i in range(sales.shape[0])]
    return SalesPanel.from_arrays(items, WeekAxis.from_start(first, sales.shape[1]), sales,
                                  np.ones_like(sales, bool))


# --- constants -----------------------------------------------------------

def test_critical_fractile_examples():
    assert critical_fractile(VN2) == pytest.approx(float(Fraction(5, 6)), abs=1e-12)
    assert critical_fractile(CostParams(1, 1)) == 0.5
    assert critical_fractile(CostParams(9, 1)) == pytest.approx(0.9, abs=1e-15)


def test_inv_norm_cdf_examples():
    assert inv_norm_cdf(1 / 1.2) == pytest.approx(0.967422, abs=1e-4)
    assert inv_norm_cdf(0.5) == 0.0
    assert inv_norm_cdf(0.975) == pytest.approx(1.959964, abs=1e-6)
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            inv_norm_cdf(bad)


def test_inv_norm_cdf_against_bisection_grid():
    qs = np.round(np.arange(1, 1000) / 1000, 3)
    err = max(abs(inv_norm_cdf(q) - normal_quantile_bisection(q)) for q in qs)
    assert err <= 1e-9


def test_policy_params_from_costs():
    p = PolicyParams.from_costs(VN2)
    assert p.safety_factor == pytest.approx(0.9674, abs=1e-4)
    assert PolicyParams.from_costs(CostParams(1, 1)).safety_factor == 0.0
    with pytest.raises(ValueError):
        PolicyParams.from_costs(CostParams(1, 0))
    with pytest.raises(ValueError):
        p.with_phi(-0.1)


# --- projection, target, order --------------------------------------------

def test_projection_examples():
    r = project_inventory([2], [[3, 0]], [[4, 2, 9]])
    assert r.i_t3.tolist() == [0]
    assert (r.i_t1[0], r.e_t1[0], r.i_t2[0], r.e_t2[0]) == (5, 1, 1, 0)
    assert project_inventory([4], [[1, 6]], [[0, 0]]).i_t3.tolist() == [11]
    assert project_inventory([0], [[0, 10]], [[5, 3]]).i_t3.tolist() == [7]
    with pytest.raises(ValueError):
        project_inventory([-1], [[0, 0]], [[0, 0]])


@given(st.lists(st.tuples(*[st.integers(0, 50)] * 5), min_size=1, max_size=20))
def test_projection_never_exceeds_pipeline(rows):
    a = np.array(rows)
    r = project_inventory(a[:, 0], a[:, 1:3], a[:, 3:5])
    assert np.all(r.i_t3 >= 0)
    assert np.all(r.i_t3 <= a[:, 0] + a[:, 1] + a[:, 2])
    free = (a[:, 3] == 0) & (a[:, 4] == 0)
    assert np.all(r.i_t3[free] == (a[:, 0] + a[:, 1] + a[:, 2])[free])


def test_target_stock_examples():
    p = PolicyParams(VN2, 5 / 6, 0.9674, 1.0)
    assert target_stock([0], p).tolist() == [0]
    assert target_stock([100], p)[0] == pytest.approx(109.674)
    flat = PolicyParams.from_costs(CostParams(1, 1), phi=2.7)
    assert target_stock([3, 50], flat).tolist() == [3, 50]


def test_order_quantity_examples():
    assert order_quantity([7.4, 2, 4.5], [3, 5, 0]).tolist() == [4, 0, 5]
    assert round_half_up([2.5, -0.5, -1.5]).tolist() == [3, 0, -1]


@settings(max_examples=100)
@given(st.integers(0, 200), st.integers(0, 200), st.integers(0, 200), st.floats(0, 3))
def test_orders_monotone(d3, i3, bump, phi):
    p = PolicyParams.from_costs(VN2, phi)
    base = order_quantity(target_stock([d3], p), [i3])[0]
    assert order_quantity(target_stock([d3], p), [i3 + bump])[0] <= base
    assert order_quantity(target_stock([d3 + bump], p), [i3])[0] >= base
    b = target_stock([d3], p)[0]
    if i3 >= b:
        assert base == 0


def test_cost_aware_orders_end_to_end():
    p = PolicyParams(VN2, 5 / 6, 0.9674, 1.0)
    q = cost_aware_orders([2], [[3, 0]], [[4, 2, 100]], p)
    assert q.tolist() == [110]


# --- single-period reduction ---------------------------------------------

def test_newsvendor_reduction():
    levels = np.arange(0, 201)
    probs = discretised_normal(100, 10, 0, 200)
    costs = np.array([newsvendor_cost(s, probs, 1.0, 0.2) for s in levels])
    best = int(levels[np.argmin(costs)])
    cdf = np.cumsum(probs)
    assert best == int(np.argmax(cdf >= 1 / 1.2))
    # correctly specified sigma: phi * sqrt(100) = 10
    p = PolicyParams.from_costs(VN2, phi=1.0)
    s = int(order_quantity(target_stock([100], p), [0])[0])
    assert newsvendor_cost(s, probs, 1.0, 0.2) <= 1.02 * costs.min()


# --- calibration ---------------------------------------------------------

def normal_panel(seed, n=200, t=40):
    rng = np.random.default_rng(seed)
    mu = rng.uniform(20, 100, n)
    d = np.maximum(round_half_up(rng.normal(mu[:, None], np.sqrt(mu)[:, None], (n, t))), 0)
    p = panel_from(d)
    f = np.repeat(round_half_up(mu)[:, None], 3, axis=1).astype(np.int64)
    init = InventorySnapshot(tuple(p.items), round_half_up(3 * mu).astype(np.int64),
                             np.zeros((n, 2), np.int64))
    return p, f, init


@pytest.mark.parametrize("seed", [0, 1])
def test_calibration_recovers_unit_phi_for_poisson_like_noise(seed):
    p, f, init = normal_panel(seed)
    phi, curve = calibrate_phi(p, lambda w: f, init, VN2, (1, p.n_weeks))
    assert len(curve) == len(DEFAULT_PHI_GRID) == 61
    assert abs(phi - 1.0) <= 0.25


def test_calibration_symmetric_costs_flat_curve():
    p, f, init = normal_panel(3, n=30, t=20)
    phi, curve = calibrate_phi(p, lambda w: f, init, CostParams(1, 1, 2), (1, 20),
                               grid=[0.3, 0.5, 2.0])
    assert phi == 0.3 and np.all(curve == curve[0])


def test_calibration_input_checks():
    p, f, init = normal_panel(4, n=5, t=12)
    fc = lambda w: f
    with pytest.raises(ValueError):
        calibrate_phi(p, fc, init, VN2, (1, 3))
    with pytest.raises(ValueError):
        calibrate_phi(p, fc, init, VN2, (1, 12), grid=[])
    with pytest.raises(ValueError):
        calibrate_phi(p, fc, init, VN2, (1, 12), grid=[1.0, 0.5])
    with pytest.raises(NotImplementedError):
        calibrate_phi(p, fc, init, VN2, (1, 12), segment="store")


def test_replay_uses_forecasts_from_previous_week():
    p = panel_from(np.full((1, 12), 4.0))
    seen = []

    def fc(w):
        seen.append(w)
        return np.array([[4, 4, 4]])
    init = InventorySnapshot(tuple(p.items), np.array([12]), np.zeros((1, 2), np.int64))
    from invplan.policy import cost_aware_policy
    led = replay(p, cost_aware_policy(fc, PolicyParams.from_costs(VN2, 0.0), 5), init, VN2, (5, 12))
    assert seen == [4, 5, 6, 7, 8]
    assert len(led.per_week) == 7
    # exact forecasts and zero buffer: nothing lost, only the opening stock is ever held
    assert led.shortage_total == 0.0
    assert led.holding_total == pytest.approx(0.2 * (8 + 4))


def test_default_snapshot_covers_lead_time():
    p = panel_from([[2, 4, 6, 8]])
    s = default_snapshot(p, 4)
    assert s.on_hand.tolist() == [15] and s.in_transit.shape == (1, 2)


# --- benchmark -----------------------------------------------------------

def test_coverage_examples():
    assert coverage_orders([5], [12], [3]).tolist() == [5]
    assert coverage_orders([5], [18], [3]).tolist() == [0]
    assert coverage_orders([0], [0], [0]).tolist() == [0]


def test_benchmark_on_constant_history():
    p = panel_from(np.full((2, 30), 5.0))
    q = benchmark_coverage_policy(p, 29, np.array([12, 30]), np.array([3, 0]))
    assert q.tolist() == [5, 0]


def test_order_sheet_layout(tmp_path):
    path = tmp_path / "orders.csv"
    write_order_sheet([ItemKey("0", "126"), ItemKey("1", "7")], 3, np.array([4, 0]), path)
    df = pd.read_csv(path, dtype=str)
    assert list(df.columns) == ["Store", "Product", "decision_week", "order_qty"]
    assert df["order_qty"].tolist() == ["4", "0"]
