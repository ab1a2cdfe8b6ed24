"""Walrasian equilibria for quasilinear agents.

``compute_equilibrium`` runs tâtonnement on budget-capped valuations.
``verify_equilibrium`` checks the three equilibrium conditions (supply
allocated, nobody pays above value, every bundle utility-maximizing) against
an exhaustive bundle grid. ``brute_force_equilibrium`` is an independent
grid oracle: it maximizes total value over every grid allocation and reads
prices off the marginal social value of each good.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from marketrl import kernels

MAX_GRID_POINTS = 1_000_000


class NoEquilibriumFound(RuntimeError):
    pass


class ValuationFn:
    """Money-equivalent value of a goods bundle.

    Subclasses override ``value``; ``gradient``, ``demand`` and the batched
    ``values`` have generic fallbacks (central differences, projected
    gradient ascent and a Python loop respectively).
    """

    def value(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def values(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.array([self.value(x) for x in X])

    def gradient(self, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        g = np.empty_like(x)
        for j in range(x.size):
            e = np.zeros_like(x)
            e[j] = h
            g[j] = (self.value(x + e) - self.value(x - e)) / (2 * h)
        return g

    def demand(self, prices: np.ndarray, x0: Optional[np.ndarray] = None) -> np.ndarray:
        return projected_ascent_demand(self, prices, x0)

    def __call__(self, x) -> float:
        return self.value(np.asarray(x, dtype=np.float64))


def projected_ascent_demand(valuation: ValuationFn, prices, x0=None,
                            iters: int = 200, step: float = 0.05, tol: float = 1e-8) -> np.ndarray:
    """Maximize ``value(x) - p.x`` over ``x >= 0`` by projected gradient ascent."""
    p = np.asarray(prices, dtype=np.float64)
    x = np.zeros_like(p) if x0 is None else np.maximum(np.asarray(x0, dtype=np.float64), 0.0)
    for _ in range(iters):
        nxt = np.maximum(x + step * (valuation.gradient(x) - p), 0.0)
        if np.max(np.abs(nxt - x)) <= tol:
            return nxt
        x = nxt
    return x


class FunctionValuation(ValuationFn):
    """Wrap plain callables as a valuation."""

    def __init__(self, value: Callable, gradient: Optional[Callable] = None,
                 demand: Optional[Callable] = None):
        self._value, self._gradient, self._demand = value, gradient, demand

    def value(self, x):
        return float(self._value(np.asarray(x, dtype=np.float64)))

    def gradient(self, x, h=1e-6):
        if self._gradient is None:
            return super().gradient(x, h)
        return np.asarray(self._gradient(np.asarray(x, dtype=np.float64)), dtype=np.float64)

    def demand(self, prices, x0=None):
        if self._demand is None:
            return super().demand(prices, x0)
        return np.asarray(self._demand(np.asarray(prices, dtype=np.float64)), dtype=np.float64)


class QuadraticValuation(ValuationFn):
    """``v(x) = a.x - x'Qx/2`` with ``Q`` symmetric positive semidefinite.

    Demand is exact: the nonnegativity-constrained maximizer is found by
    enumerating active sets (the problem is tiny: a handful of goods).
    """

    def __init__(self, linear, quadratic):
        self.a = np.asarray(linear, dtype=np.float64).reshape(-1)
        Q = np.asarray(quadratic, dtype=np.float64)
        if Q.ndim == 1:
            Q = np.diag(Q)
        if Q.shape != (self.a.size, self.a.size):
            raise ValueError("quadratic term must be square and match the linear term")
        if not np.allclose(Q, Q.T):
            raise ValueError("quadratic term must be symmetric")
        if np.min(np.linalg.eigvalsh(Q)) < -1e-12:
            raise ValueError("quadratic term must be positive semidefinite (concave valuation)")
        self.Q = Q
        self._subsets = [s for k in range(self.a.size, -1, -1)
                         for s in itertools.combinations(range(self.a.size), k)]

    def scaled(self, c: float) -> "QuadraticValuation":
        return QuadraticValuation(c * self.a, c * self.Q)

    def value(self, x):
        x = np.asarray(x, dtype=np.float64)
        return float(self.a @ x - 0.5 * x @ self.Q @ x)

    def values(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return X @ self.a - 0.5 * np.einsum("ij,jk,ik->i", X, self.Q, X)

    def gradient(self, x, h=None):
        return self.a - self.Q @ np.asarray(x, dtype=np.float64)

    def demand(self, prices, x0=None):
        p = np.asarray(prices, dtype=np.float64)
        r = self.a - p
        best, best_u = np.zeros_like(p), 0.0
        for s in self._subsets:
            x = np.zeros_like(p)
            if s:
                idx = list(s)
                Qs = self.Q[np.ix_(idx, idx)]
                try:
                    xs = np.linalg.solve(Qs, r[idx])
                except np.linalg.LinAlgError:
                    continue
                if np.any(xs < -1e-12):
                    continue
                x[idx] = np.maximum(xs, 0.0)
            marg = r - self.Q @ x
            free = [j for j in range(p.size) if j not in s]
            if np.all(marg[free] <= 1e-12):
                return x
            u = self.value(x) - p @ x
            if u > best_u:
                best, best_u = x, u
        return best


class CappedValuation(ValuationFn):
    """``min(base(x), budget)``: what an agent can actually afford to bid."""

    def __init__(self, base: ValuationFn, budget: float):
        self.base = base
        self.budget = float(budget)

    def value(self, x):
        return min(self.base.value(x), self.budget)

    def values(self, X):
        return np.minimum(self.base.values(X), self.budget)

    def gradient(self, x, h=1e-6):
        if self.base.value(x) >= self.budget:
            return np.zeros_like(np.asarray(x, dtype=np.float64))
        return self.base.gradient(x)

    def demand(self, prices, x0=None):
        p = np.asarray(prices, dtype=np.float64)
        if self.budget <= 0.0:
            return np.zeros_like(p)
        x = self.base.demand(p, x0)
        if self.base.value(x) <= self.budget:
            return x
        if not np.any(p > 0):
            return x
        # the optimum sits on the budget level set: it is the base demand at
        # prices p/mu for the mu where the base value equals the budget
        def gap(mu):
            return self.base.value(self.base.demand(p / mu)) - self.budget

        lo = 0.5
        while gap(lo) > 0.0:
            lo *= 0.5
            if lo < 1e-12:
                # free goods alone are worth the budget: take just enough of them
                return self._least_on_ray(self.base.demand(p / lo))
        mu = brentq(gap, lo, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        return self.base.demand(p / mu)

    def least_free_bundle(self, goods: int) -> np.ndarray:
        """Smallest bundle on the ray to the free-goods demand that still reaches the budget.

        At zero prices every bundle worth the budget is optimal, so this is the
        member of the demand set that asks the least of the market.
        """
        return self._least_on_ray(self.base.demand(np.zeros(goods)))

    def _least_on_ray(self, x: np.ndarray) -> np.ndarray:
        if self.base.value(x) <= self.budget:
            return x
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if self.base.value(mid * x) >= self.budget:
                hi = mid
            else:
                lo = mid
        return hi * x


def cap_valuations(valuations: Sequence[ValuationFn], budgets) -> List[ValuationFn]:
    if budgets is None:
        return list(valuations)
    budgets = list(budgets)
    if len(budgets) != len(valuations):
        raise ValueError("need one budget per valuation")
    return [CappedValuation(v, b) for v, b in zip(valuations, budgets)]


@dataclass
class EquilibriumResult:
    prices: np.ndarray
    allocations: np.ndarray  # shape (agents, goods)
    converged: bool
    residual: float
    iterations: int = 0
    history: List[float] = field(default_factory=list, repr=False)

    def allocation(self, i: int) -> np.ndarray:
        return self.allocations[i]


@dataclass(frozen=True)
class EquilibriumConfig:
    step_size: float = 0.1
    max_iters: int = 10_000
    tol: float = 1e-6
    record_history: bool = False
    patience: Optional[int] = 200


def clearing_residual(prices: np.ndarray, excess: np.ndarray) -> np.ndarray:
    """Excess demand, ignoring excess supply of free (zero-priced) goods."""
    return np.where(prices > 0, excess, np.maximum(excess, 0.0))


def tatonnement(supply, valuations: Sequence[ValuationFn], budgets=None, step_size: float = 0.1,
                max_iters: int = 10_000, tol: float = 1e-6, prices0=None,
                record_history: bool = False, patience: Optional[int] = 200) -> EquilibriumResult:
    """Iterate ``p <- max(0, p + step * excess_demand(p))`` until markets clear.

    Budget-capped demand depends only on relative prices, which can trap a
    fixed step in a cycle. With ``patience`` set, the step is halved whenever
    the residual has not improved for that many iterations and the excess
    demand just reversed direction. ``patience=None`` keeps the step fixed.
    """
    s = np.asarray(supply, dtype=np.float64)
    vals = cap_valuations(valuations, budgets)
    p = np.zeros_like(s) if prices0 is None else np.maximum(np.asarray(prices0, dtype=np.float64), 0.0)
    history = []
    demands = [None] * len(vals)
    step = float(step_size)
    best, stall, last = np.inf, 0, None
    it = 0
    while True:
        demands = [v.demand(p, d) for v, d in zip(vals, demands)]
        excess = np.sum(demands, axis=0) - s if demands else -s
        residual = float(np.max(np.abs(clearing_residual(p, excess)))) if s.size else 0.0
        if record_history:
            history.append(residual)
        if residual <= tol or it >= max_iters:
            break
        if patience is not None:
            if residual < best - 1e-12:
                best, stall = residual, 0
            else:
                stall += 1
            if stall >= patience and last is not None and float(np.dot(excess, last)) < 0.0:
                step *= 0.5
                best, stall = residual, 0
            last = excess
        p = np.maximum(p + step * excess, 0.0)
        it += 1
    alloc = np.array(demands, dtype=np.float64).reshape(len(vals), s.size)
    return EquilibriumResult(p, alloc, residual <= tol, residual, it, history)


def _make_feasible(alloc: np.ndarray, supply: np.ndarray) -> np.ndarray:
    """Scale down any good allocated beyond supply so allocations sum to at most supply."""
    out = alloc.copy()
    total = out.sum(axis=0)
    over = total > supply
    if np.any(over):
        out[:, over] *= np.where(total[over] > 0, supply[over] / total[over], 0.0)
    return out


def compute_equilibrium(supply, valuations: Sequence[ValuationFn], budgets=None,
                        config: EquilibriumConfig = EquilibriumConfig()) -> EquilibriumResult:
    """Prices and allocations under budget-capped valuations.

    Allocations never exceed supply; whatever is left over is freely
    disposable (and only ever of zero-priced goods once converged).
    """
    s = np.asarray(supply, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("supply must be nonnegative")
    m = len(valuations)
    if not np.any(s > 0):
        return EquilibriumResult(np.zeros_like(s), np.zeros((m, s.size)), True, 0.0)
    if budgets is not None:
        # capped demand is set-valued at zero prices, where tatonnement cycles
        free = _zero_price_candidate(s, cap_valuations(valuations, budgets))
        if free is not None:
            return free
    res = tatonnement(s, valuations, budgets, config.step_size, config.max_iters, config.tol,
                      record_history=config.record_history, patience=config.patience)
    res.allocations = _make_feasible(res.allocations, s)
    return res


def _zero_price_candidate(supply: np.ndarray, capped) -> Optional[EquilibriumResult]:
    """Zero prices, if some feasible allocation gives every agent an optimal bundle.

    At zero prices an agent whose budget binds is content with any bundle
    worth its budget. Agents whose budget does not bind take their free
    demand; the binding ones first try their least bundles and otherwise
    split the rest of the supply in proportion to them.
    """
    zeros = np.zeros_like(supply)
    alloc = np.zeros((len(capped), supply.size))
    binding = []
    for i, v in enumerate(capped):
        if isinstance(v, CappedValuation) and v.base.value(v.base.demand(zeros)) > v.budget:
            alloc[i] = v.least_free_bundle(supply.size)
            binding.append(i)
        else:
            alloc[i] = v.demand(zeros)
    if np.all(alloc.sum(axis=0) <= supply + 1e-12):
        return EquilibriumResult(zeros, alloc, True, 0.0)
    rest = supply - np.delete(alloc, binding, axis=0).sum(axis=0)
    if not binding or np.any(rest < -1e-12):
        return None
    need = alloc[binding].sum(axis=0)
    share = np.divide(alloc[binding], need, out=np.zeros_like(alloc[binding]), where=need > 0)
    alloc[binding] = share * np.maximum(rest, 0.0)
    if any(capped[i].base.value(alloc[i]) < capped[i].budget - 1e-12 for i in binding):
        return None
    return EquilibriumResult(zeros, alloc, True, 0.0)


# --- verification ------------------------------------------------------------

FULL_QUANTITY = "full quantity"
PAYS_ABOVE_VALUE = "pays above value"
NOT_OPTIMAL = "not utility-maximizing"


@dataclass(frozen=True)
class Violation:
    condition: str
    agent: Optional[int]
    good: Optional[int]
    amount: float

    def __str__(self):
        who = f"agent {self.agent}" if self.agent is not None else f"good {self.good}"
        return f"{self.condition}: {who}, gap {self.amount:.3g}"


def bundle_grid(upper, resolution: float) -> np.ndarray:
    """All bundles with coordinates ``0, r, 2r, ... <= upper`` (upper included)."""
    upper = np.asarray(upper, dtype=np.float64)
    axes = []
    for u in upper:
        n = int(np.floor(u / resolution + 1e-9))
        ax = resolution * np.arange(n + 1)
        if u - ax[-1] > 1e-12:
            ax = np.append(ax, u)
        axes.append(ax)
    size = int(np.prod([len(a) for a in axes]))
    if size > MAX_GRID_POINTS:
        raise ValueError(f"verification grid of {size} points exceeds {MAX_GRID_POINTS}")
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def verify_equilibrium(result: EquilibriumResult, supply, valuations: Sequence[ValuationFn],
                       grid_resolution: float = 0.05, tol: float = 1e-6, budgets=None) -> List[Violation]:
    """Check the three equilibrium conditions; an empty list means all hold within ``tol``."""
    s = np.asarray(supply, dtype=np.float64)
    p = np.asarray(result.prices, dtype=np.float64)
    vals = cap_valuations(valuations, budgets)
    alloc = np.asarray(result.allocations, dtype=np.float64).reshape(len(vals), s.size)
    out: List[Violation] = []

    total = alloc.sum(axis=0) if len(vals) else np.zeros_like(s)
    for j in range(s.size):
        deficit = s[j] - total[j]
        if deficit < -tol or (deficit > tol and p[j] > tol):
            out.append(Violation(FULL_QUANTITY, None, j, float(deficit)))

    grid = bundle_grid(s, grid_resolution) if s.size else np.zeros((1, 0))
    cost = grid @ p
    for i, v in enumerate(vals):
        x = alloc[i]
        vx = v.value(x)
        gap = float(p @ x - vx)
        if gap > tol:
            out.append(Violation(PAYS_ABOVE_VALUE, i, None, gap))
        best = float(np.max(v.values(grid) - cost))
        regret = best - (vx - float(p @ x))
        if regret > tol:
            out.append(Violation(NOT_OPTIMAL, i, None, regret))
    return out


# --- brute-force oracle --------------------------------------------------------


def brute_force_equilibrium(supply, valuations: Sequence[ValuationFn], budgets=None,
                            grid_resolution: float = 0.05, tol: Optional[float] = None,
                            price_search: int = 4) -> EquilibriumResult:
    """Exhaustive grid oracle.

    Every allocation of the supply grid among the agents is considered (the
    search is organised as a max-plus recursion over agents, which visits
    each split exactly once); the welfare-maximizing one is kept. Prices
    are the central-difference marginal welfare of each good, then refined
    over a local price lattice to minimize the worst utility regret on the
    bundle grid. Raises :class:`NoEquilibriumFound` when no candidate passes
    :func:`verify_equilibrium` at tolerance ``tol`` (default: the resolution).
    """
    d = float(grid_resolution)
    tol = d if tol is None else tol
    s = np.asarray(supply, dtype=np.float64)
    steps = np.round(s / d).astype(int)
    if np.any(np.abs(steps * d - s) > 1e-9):
        raise ValueError("supply must be a multiple of the grid resolution")
    m = len(valuations)
    if m == 0:
        raise ValueError("need at least one agent")
    if s.size > 3:
        raise ValueError("the brute-force oracle handles at most 3 goods")
    vals = cap_valuations(valuations, budgets)
    if not np.any(steps > 0):
        return EquilibriumResult(np.zeros_like(s), np.zeros((m, s.size)), True, 0.0)

    shape = steps + 2  # one step past supply for central differences
    if int(np.prod(shape)) > MAX_GRID_POINTS:
        raise ValueError("allocation grid too large")
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1).reshape(-1, s.size)
    points = idx * d
    shp = np.asarray(shape, dtype=np.intp)
    welfare = np.zeros(points.shape[0])
    args = []
    for v in vals:
        welfare, arg = kernels.maxplus_merge(welfare, np.ascontiguousarray(v.values(points)), shp)
        args.append(arg)

    def flat(k):
        return int(np.ravel_multi_index(tuple(k), tuple(shape)))

    # recover allocations at r = supply
    alloc = np.zeros((m, s.size))
    r = steps.copy()
    for i in range(m - 1, -1, -1):
        x = np.array(np.unravel_index(args[i][flat(r)], tuple(shape)))
        alloc[i] = x * d
        r = r - x

    W = welfare.reshape(tuple(shape))
    p0 = np.zeros(s.size)
    for j in range(s.size):
        if steps[j] == 0:
            continue
        up, dn = steps.copy(), steps.copy()
        up[j] += 1
        dn[j] -= 1
        p0[j] = max((W[tuple(up)] - W[tuple(dn)]) / (2 * d), 0.0)

    grid = bundle_grid(s, d)
    gv = [v.values(grid) for v in vals]
    own = np.array([v.value(x) for v, x in zip(vals, alloc)])
    offsets = (d / price_search) * np.arange(-price_search, price_search + 1)
    cands = np.array([np.maximum(p0 + np.array(o), 0.0) for o in itertools.product(offsets, repeat=s.size)])
    cost = grid @ cands.T  # (points, candidates)
    regret = np.zeros(len(cands))
    for i in range(m):
        best = np.max(gv[i][:, None] - cost, axis=0)
        mine = own[i] - cands @ alloc[i]
        regret = np.maximum(regret, best - mine)
        regret = np.maximum(regret, cands @ alloc[i] - own[i])  # pays above value
    k = int(np.argmin(np.round(regret, 12) + 1e-9 * np.linalg.norm(cands - p0, axis=1)))
    result = EquilibriumResult(cands[k], alloc, True, float(max(regret[k], 0.0)))
    if verify_equilibrium(result, s, vals, d, tol):
        raise NoEquilibriumFound(f"no grid equilibrium within {tol} at resolution {d}")
    return result
