"""
From a point forecast to an order
=================================

One item, the competition's costs (shortage 1.0, holding 0.2, two-week lead
time). We walk one decision by hand, then let the simulator run a whole
six-round episode with the same rule.
"""
# %%
import numpy as np

from invplan.panel import CostParams, InventorySnapshot, ItemKey
from invplan.policy import (PolicyParams, cost_aware_orders, critical_fractile, inv_norm_cdf,
                            order_quantity, project_inventory, target_stock)
from invplan.simulator import run_episode

costs = CostParams(1.0, 0.2, 2)
q = critical_fractile(costs)
print(f"critical fractile {q:.4f}, safety factor {inv_norm_cdf(q):.4f}")

# %% [markdown]
# An order placed now sells from the start of week t+3. Between now and then
# the shelf is drained by the forecasts for t+1 and t+2, and topped up by
# what is already in transit.

# %%
end_inv = np.array([2])
receipts = np.array([[3, 0]])          # due at t+1, t+2
forecasts = np.array([[4, 2, 10]])     # D(t+1), D(t+2), D(t+3)
proj = project_inventory(end_inv, receipts, forecasts[:, :2])
print("projected stock at t+3:", proj.i_t3)

params = PolicyParams.from_costs(costs, phi=1.0)
B = target_stock(forecasts[:, 2], params)
print("target stock:", B, "order:", order_quantity(B, proj.i_t3))

# %% [markdown]
# The buffer grows with the square root of the forecast. Doubling phi
# doubles it; symmetric costs switch it off entirely.

# %%
for phi in (0.0, 1.0, 2.0):
    print(phi, target_stock([4, 25, 100], params.with_phi(phi)).round(2))
print("c_s = c_h:", target_stock([4, 25, 100], PolicyParams.from_costs(CostParams(1, 1), 2.0)))

# %% [markdown]
# A full episode: Poisson demand with mean 10, a perfect mean forecast,
# six ordering rounds and two drain weeks.

# %%
rng = np.random.default_rng(0)
demand = rng.poisson(10, size=(1, 8))
snap = InventorySnapshot((ItemKey("0", "1"),), np.array([20]), np.array([[5, 10]]))


def policy(state, k):
    receipts = np.column_stack([np.zeros(1, np.int64), state.due(1)])
    return cost_aware_orders(state.on_hand, receipts, np.array([[10, 10, 10]]), params)


ledger = run_episode(demand, snap, policy, costs, 6)
for w in ledger.per_week:
    print(f"week {w.week}: demand {w.demand[0]:3d} on hand {w.on_hand[0]:3d} "
          f"lost {w.lost[0]:2d} ending {w.ending[0]:3d} order {w.orders[0]:3d}")
print(f"shortage {ledger.shortage_total:.1f}, holding {ledger.holding_total:.1f}")
