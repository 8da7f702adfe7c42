import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from invplan.panel import (CostParams, InventorySnapshot, ItemKey, PanelError, SalesPanel,
                           WeekAxis, effective_demand, load_sales_wide, load_snapshot,
                           panel_diagnostics, write_sales_wide, write_snapshot)

MONDAY = dt.date(2021, 4, 12)


def write_wide(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(["Store", "Product", *header]) + "\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")


def dates(n, first=MONDAY):
    return [(first + dt.timedelta(days=7 * k)).isoformat() for k in range(n)]


def test_single_item_load_keeps_zeros(tmp_path):
    write_wide(tmp_path / "s.csv", dates(3), [["A", "1", 0, 2, 1]])
    write_wide(tmp_path / "f.csv", dates(3), [["A", "1", "True", "true", "1"]])
    p = load_sales_wide(tmp_path / "s.csv", tmp_path / "f.csv")
    assert (p.n_items, p.n_weeks) == (1, 3)
    assert p.sales.tolist() == [[0, 2, 1]]
    assert p.in_stock.all()
    assert p.items[0] == ItemKey("A", "1")


def test_flag_violation_is_reported_not_fatal(tmp_path):
    write_wide(tmp_path / "s.csv", dates(2), [["A", "1", 5, 1]])
    write_wide(tmp_path / "f.csv", dates(2), [["A", "1", "FALSE", "0"]])
    p = load_sales_wide(tmp_path / "s.csv", tmp_path / "f.csv")
    assert len(p.violations) == 2
    report = p.validation_report()
    assert "2021-04-12" in report[0] and "sales=5" in report[0]


def test_vn2_shaped_axis():
    ax = WeekAxis.from_start(MONDAY, 157)
    assert ax.start_dates[-1] == dt.date(2024, 4, 8)


@pytest.mark.parametrize("header", [
    ["2021-04-13", "2021-04-20"],         # Tuesday
    ["2021-04-12", "2021-04-26"],         # gap
    ["2021-04-12", "not-a-date"],
])
def test_bad_headers(tmp_path, header):
    write_wide(tmp_path / "s.csv", header, [["A", "1", 1, 1]])
    write_wide(tmp_path / "f.csv", header, [["A", "1", 1, 1]])
    with pytest.raises(PanelError):
        load_sales_wide(tmp_path / "s.csv", tmp_path / "f.csv")


def test_mismatched_items_and_negative_sales(tmp_path):
    write_wide(tmp_path / "s.csv", dates(2), [["A", "1", 1, 1]])
    write_wide(tmp_path / "f.csv", dates(2), [["B", "1", 1, 1]])
    with pytest.raises(PanelError):
        load_sales_wide(tmp_path / "s.csv", tmp_path / "f.csv")
    write_wide(tmp_path / "s.csv", dates(2), [["A", "1", 1, -1]])
    write_wide(tmp_path / "f.csv", dates(2), [["A", "1", 1, 1]])
    with pytest.raises(PanelError):
        load_sales_wide(tmp_path / "s.csv", tmp_path / "f.csv")


def test_flags_rows_may_be_reordered(tmp_path):
    write_wide(tmp_path / "s.csv", dates(2), [["A", "1", 1, 0], ["B", "2", 3, 4]])
    write_wide(tmp_path / "f.csv", dates(2), [["B", "2", 1, 1], ["A", "1", 1, 0]])
    p = load_sales_wide(tmp_path / "s.csv", tmp_path / "f.csv")
    assert p.in_stock.tolist() == [[True, False], [True, True]]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.data())
def test_wide_round_trip(n, t, data):
    import tempfile
    from pathlib import Path
    sales = np.array(data.draw(st.lists(st.integers(0, 50), min_size=n * t, max_size=n * t)),
                     dtype=float).reshape(n, t)
    flags = np.array(data.draw(st.lists(st.booleans(), min_size=n * t, max_size=n * t))
                     ).reshape(n, t)
    sales = np.where(flags, sales, 0)
    items = [ItemKey(f"S{i}", "0042") for i in range(n)]
    p = SalesPanel.from_arrays(items, WeekAxis.from_start(MONDAY, t), sales, flags)
    with tempfile.TemporaryDirectory() as d:
        write_sales_wide(p, Path(d) / "s.csv", Path(d) / "f.csv")
        q = load_sales_wide(Path(d) / "s.csv", Path(d) / "f.csv")
    assert q.items == p.items and q.axis == p.axis
    assert np.array_equal(q.sales, p.sales) and np.array_equal(q.in_stock, p.in_stock)


def test_axis_index_arithmetic():
    ax = WeekAxis.from_start(MONDAY, 30)
    for k in range(30):
        assert ax.date(k) == MONDAY + dt.timedelta(days=7 * k) == ax.start_dates[k]
        assert ax.index(ax.date(k)) == k


def small_panel(sales, flags):
    sales, flags = np.atleast_2d(sales), np.atleast_2d(flags)
    items = [ItemKey("s", str(i)) for i in range(sales.shape[0])]
    return SalesPanel.from_arrays(items, WeekAxis.from_start(MONDAY, sales.shape[1]), sales, flags)


def test_effective_demand_examples():
    p = small_panel([3, 0, 5], [True, False, True])
    y = effective_demand(p, ItemKey("s", "0"))
    assert y[0] == 3 and np.isnan(y[1]) and y[2] == 5
    p = small_panel([3, 1, 5], [True] * 3)
    assert effective_demand(p, ItemKey("s", "0")).tolist() == [3, 1, 5]
    p = small_panel([0, 0], [False, False])
    assert np.isnan(effective_demand(p, ItemKey("s", "0"))).all()
    with pytest.raises(KeyError):
        effective_demand(p, ItemKey("x", "y"))


def test_diagnostics_examples():
    d = panel_diagnostics(small_panel(np.zeros((2, 4)), np.ones((2, 4), bool)))
    assert (d.zero_rate, d.stockout_rate) == (1.0, 0.0)
    d = panel_diagnostics(small_panel(np.zeros((2, 4)), np.zeros((2, 4), bool)))
    assert (d.zero_rate, d.stockout_rate) == (1.0, 1.0)
    d = panel_diagnostics(small_panel([[0, 2, 4, 0], [1, 1, 1, 1]], np.ones((2, 4), bool)))
    assert d.zero_rate == pytest.approx(0.25)
    assert (d.min_item_mean, d.max_item_mean) == (1.0, 1.5)
    assert d.series_start_counts == {0: 1, 1: 1}


def test_cost_params_bounds():
    with pytest.raises(ValueError):
        CostParams(0.0, 0.2)
    with pytest.raises(ValueError):
        CostParams(1.0, -0.1)
    with pytest.raises(ValueError):
        CostParams(1.0, 0.2, 0)


def test_snapshot_round_trip_and_alignment(tmp_path):
    its = (ItemKey("A", "1"), ItemKey("B", "2"))
    snap = InventorySnapshot(its, np.array([4, 0]), np.array([[1, 2], [0, 3]]))
    write_snapshot(snap, tmp_path / "inv.csv")
    back = load_snapshot(tmp_path / "inv.csv")
    assert back.items == its
    flipped = back.aligned(its[::-1])
    assert flipped.on_hand.tolist() == [0, 4]
    assert flipped.in_transit.tolist() == [[0, 3], [1, 2]]
    with pytest.raises(PanelError):
        back.aligned([ItemKey("C", "3")])
    with pytest.raises(PanelError):
        InventorySnapshot(its, np.array([-1, 0]), np.zeros((2, 2), int))
