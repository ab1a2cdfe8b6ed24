import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marketrl.equilibrium import (
    FULL_QUANTITY,
    NOT_OPTIMAL,
    PAYS_ABOVE_VALUE,
    CappedValuation,
    EquilibriumConfig,
    EquilibriumResult,
    FunctionValuation,
    QuadraticValuation,
    brute_force_equilibrium,
    bundle_grid,
    compute_equilibrium,
    tatonnement,
    verify_equilibrium,
)
from instances import random_quadratic_instance
from oracles import quadratic_kkt_two_agents

V1 = QuadraticValuation([3.0], [1.0])
V2 = QuadraticValuation([2.0], [1.0])


def test_two_agent_quadratic_matches_kkt():
    p, x1, x2 = quadratic_kkt_two_agents(3.0, 2.0, 2.0)
    assert (p, x1, x2) == (1.5, 1.5, 0.5)
    res = tatonnement([2.0], [V1, V2], [100.0, 100.0], step_size=0.1, tol=1e-6)
    assert res.converged and res.iterations < 500
    assert res.prices[0] == pytest.approx(p, abs=1e-4)
    assert res.allocations[:, 0] == pytest.approx([x1, x2], abs=1e-4)
    assert verify_equilibrium(res, [2.0], [V1, V2]) == []


def test_brute_force_on_quadratic_instance():
    for res_, lo, hi in [(0.05, 1.45, 1.55), (0.01, 1.49, 1.51)]:
        bf = brute_force_equilibrium([2.0], [V1, V2], grid_resolution=res_)
        assert lo <= bf.prices[0] <= hi
        assert lo <= bf.allocations[0, 0] <= hi


def test_single_agent_gets_supply_at_its_gradient():
    v = QuadraticValuation([3.0, 4.0], [[1.0, 0.0], [0.0, 1.0]])
    res = compute_equilibrium([1.0, 1.0], [v], [100.0])
    assert res.allocations[0] == pytest.approx([1.0, 1.0], abs=1e-5)
    assert res.prices == pytest.approx(v.gradient([1.0, 1.0]), abs=1e-5)
    bf = brute_force_equilibrium([1.0, 1.0], [v], [100.0])
    assert bf.allocations[0] == pytest.approx([1.0, 1.0])


def test_zero_supply_convention():
    res = compute_equilibrium([0.0, 0.0], [QuadraticValuation([1, 1], [1, 1])], None)
    assert res.converged and np.all(res.prices == 0) and np.all(res.allocations == 0)


def test_zero_valuations_free_disposal():
    zero = QuadraticValuation([0.0, 0.0], np.zeros((2, 2)))
    res = compute_equilibrium([1.0, 2.0], [zero, zero], [1.0, 1.0])
    assert res.converged and np.all(res.prices == 0) and np.all(res.allocations == 0)
    assert verify_equilibrium(res, [1.0, 2.0], [zero, zero]) == []


def test_complements_report_non_convergence():
    def demand(p):
        t = 10.0 if p.sum() < 2.0 else 0.0
        return np.array([t, t])

    v = FunctionValuation(lambda x: 2.0 * min(x[0], x[1]), demand=demand)
    res = compute_equilibrium([1.0, 1.0], [v], None, EquilibriumConfig(max_iters=300))
    assert not res.converged and res.residual > 1e-6 and res.iterations == 300


def test_identical_agents_split_evenly():
    v = QuadraticValuation([3.0], [1.0])
    bf = brute_force_equilibrium([1.0], [v, v])
    assert abs(bf.allocations[0, 0] - bf.allocations[1, 0]) <= 0.05 + 1e-12
    res = compute_equilibrium([1.0], [v, v])
    assert res.allocations[:, 0] == pytest.approx([0.5, 0.5], abs=1e-5)


def test_brute_force_rejects_off_grid_supply():
    with pytest.raises(ValueError):
        brute_force_equilibrium([0.33], [V1])


def test_verifier_detects_each_condition():
    good = compute_equilibrium([2.0], [V1, V2])
    short = EquilibriumResult(good.prices, good.allocations - np.array([[0.5], [0.0]]), True, 0.0)
    viol = verify_equilibrium(short, [2.0], [V1, V2])
    assert any(v.condition == FULL_QUANTITY and v.good == 0 and v.amount == pytest.approx(0.5) for v in viol)
    pricey = EquilibriumResult(np.array([10.0]), good.allocations, True, 0.0)
    assert any(v.condition == PAYS_ABOVE_VALUE and v.agent == 0 for v in verify_equilibrium(pricey, [2.0], [V1, V2]))
    swapped = EquilibriumResult(good.prices, good.allocations[::-1].copy(), True, 0.0)
    assert any(v.condition == NOT_OPTIMAL for v in verify_equilibrium(swapped, [2.0], [V1, V2]))


def test_capped_valuation_demand_respects_budget():
    res = compute_equilibrium([2.0], [V1, V2], [1.0, 100.0])
    assert res.converged
    assert verify_equilibrium(res, [2.0], [V1, V2], budgets=[1.0, 100.0]) == []
    cv = CappedValuation(V1, 1.0)
    assert cv.value(res.allocations[0]) <= 1.0 + 1e-9
    assert res.prices @ res.allocations[0] <= 1.0 + 1e-6


def test_quadratic_validation():
    with pytest.raises(ValueError):
        QuadraticValuation([1.0, 1.0], [[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        QuadraticValuation([1.0], [-1.0])


def test_projected_ascent_matches_exact_demand():
    v = QuadraticValuation([3.0, 2.0], [[1.0, 0.2], [0.2, 1.5]])
    generic = FunctionValuation(v.value)
    p = np.array([1.0, 0.5])
    assert generic.demand(p) == pytest.approx(v.demand(p), abs=1e-3)


def test_bundle_grid_includes_upper_bound():
    g = bundle_grid([0.12], 0.05)
    assert g[:, 0] == pytest.approx([0.0, 0.05, 0.1, 0.12])


@given(st.floats(2.2, 5.0), st.floats(2.2, 5.0), st.floats(0.2, 5.0))
def test_price_scale_covariance(a1, a2, c):
    vals = [QuadraticValuation([a1], [1.0]), QuadraticValuation([a2], [1.0])]
    base = compute_equilibrium([2.0], vals, None, EquilibriumConfig(tol=1e-9))
    scaled = compute_equilibrium([2.0], [v.scaled(c) for v in vals], None, EquilibriumConfig(tol=1e-9))
    assert scaled.prices == pytest.approx(c * base.prices, abs=1e-5 * max(1.0, c))
    assert scaled.allocations == pytest.approx(base.allocations, abs=1e-5)


@given(st.integers(0, 10_000))
def test_tatonnement_residual_monotone(seed):
    supply, vals, budgets = random_quadratic_instance(seed)
    res = compute_equilibrium(supply, vals, budgets, EquilibriumConfig(record_history=True))
    assert res.converged
    assert np.all(np.diff(res.history) <= 1e-12)


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_budget_feasibility(seed):
    supply, vals, _ = random_quadratic_instance(seed)
    budgets = [2.0] * len(vals)
    res = compute_equilibrium(supply, vals, budgets, EquilibriumConfig(max_iters=300))
    if res.converged:
        for i in range(len(vals)):
            assert res.prices @ res.allocations[i] <= budgets[i] + 1e-6


@given(st.integers(0, 10_000))
def test_verifier_sound_on_oracle_output(seed):
    supply, vals, budgets = random_quadratic_instance(seed, max_goods=2, max_agents=3)
    bf = brute_force_equilibrium(supply, vals, budgets)
    assert verify_equilibrium(bf, supply, vals, 0.05, tol=0.05) == []


def test_binding_budget_at_zero_prices_takes_least_bundle():
    # one buyer who would pay 2 for far less than the supply: free goods clear
    v = QuadraticValuation([3.0, 3.0], [[1.0, 0.0], [0.0, 1.0]])
    res = compute_equilibrium([2.0, 2.0], [v], [2.0], EquilibriumConfig(max_iters=200))
    assert res.converged
    assert np.all(res.prices == 0.0)
    assert v.value(res.allocations[0]) == pytest.approx(2.0, abs=1e-9)
    assert np.all(res.allocations[0] <= 2.0)
    assert verify_equilibrium(res, [2.0, 2.0], [CappedValuation(v, 2.0)]) == []


def test_free_good_alone_reaching_the_budget():
    # the second good is free and worth more than the budget on its own
    v = QuadraticValuation([1.0, 4.0], np.diag([1.0, 1.0]))
    capped = CappedValuation(v, 3.0)
    x = capped.demand(np.array([0.5, 0.0]))
    assert x[0] == 0.0
    assert v.value(x) == pytest.approx(3.0, abs=1e-9)
    assert x[1] < v.demand(np.zeros(2))[1]
