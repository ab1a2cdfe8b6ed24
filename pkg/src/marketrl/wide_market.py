"""Wide markets: agents trade goods at equilibrium prices and transform what they own.

Each step the economy pools everyone's holdings, computes equilibrium prices
and allocations under budget-capped valuations, settles trades (charge every
agent ``p . new`` then pay it ``p . old``), lets each agent run its production
function on its new holding, credits rewards and finally charges rent.

The system agent holds whatever nobody owns (for instance the initial state
of an episode). It sells like any other holder but never buys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np

from marketrl import kernels
from marketrl.core import (
    SYSTEM,
    VICKREY,
    AgentSpec,
    GoodsBundle,
    InvalidAction,
    MarketConfig,
    MarketError,
    WealthLedger,
)
from marketrl.environment import PomdpEnv, as_rng
from marketrl.equilibrium import (
    EquilibriumConfig,
    EquilibriumResult,
    FunctionValuation,
    NoEquilibriumFound,
    ValuationFn,
    compute_equilibrium,
)

HOLD = "hold"
RAISE = "raise"

WIDE_METRIC_COLUMNS = ("t", "episode", "winner_id", "price", "reward", "total_wealth",
                       "rent_paid", "traded", "eq_residual")


class BudgetViolation(MarketError):
    """Settlement would leave an agent with negative wealth."""


@dataclass(frozen=True)
class Holding:
    agent: int
    bundle: GoodsBundle


class PropertyRightMap:
    """Maps an action and a perceived holding to the state bundle it may transform.

    The default resolver is the identity, which is exact for fully observed
    environments.
    """

    def __init__(self, resolver: Optional[Callable[[Any, GoodsBundle], GoodsBundle]] = None):
        self.resolver = resolver

    def __call__(self, action, holding: GoodsBundle) -> GoodsBundle:
        if self.resolver is None:
            return holding
        return self.resolver(action, holding)


class ActionCombiner:
    """Next state = sum of produced bundles + whatever nobody exercised.

    Uses a correctly rounded sum per good, so the result does not depend on
    the order in which agents are listed.
    """

    def __call__(self, records: Sequence[tuple], state: GoodsBundle) -> GoodsBundle:
        goods = state.goods
        cols = []
        for j, g in enumerate(goods):
            terms = [state.quantities[j]]
            for _action, exercised, produced in records:
                terms.append(produced[g])
                terms.append(-exercised[g])
            cols.append(math.fsum(terms))
        return GoodsBundle(goods, cols)


def as_valuation(bid) -> ValuationFn:
    return bid if isinstance(bid, ValuationFn) else FunctionValuation(bid)


Solver = Callable[[np.ndarray, Sequence[ValuationFn], np.ndarray], EquilibriumResult]


def equilibrium_solver(config: EquilibriumConfig = EquilibriumConfig()) -> Solver:
    def solve(supply, valuations, budgets):
        return compute_equilibrium(supply, valuations, budgets, config)

    return solve


def single_good_auction_solver(kind: str = "first_price") -> Solver:
    """Sell the whole supply as one indivisible lot to the top capped bidder.

    With a single good this is a Walrasian outcome: any price between the two
    highest values clears the market. First-price picks the top of that
    interval, Vickrey the bottom. Ties go to the lowest agent id.
    """
    # linear valuations are stacked once and extended as agents enroll
    stacked = {"source": None, "rows": np.zeros((0, 0)), "n": 0}

    def lot_values(valuations, s):
        n = stacked["n"]
        if stacked["source"] is not valuations or len(valuations) < n:
            stacked["source"], n = valuations, 0
        fresh = valuations[n:]
        if not all(isinstance(v, _LinearStateValuation) for v in fresh):
            stacked["source"], stacked["n"] = None, 0
            return np.array([v.value(s) for v in valuations], dtype=np.float64)
        rows = stacked["rows"]
        if len(valuations) > rows.shape[0] or rows.shape[1] != s.size:
            grown = np.zeros((max(16, 2 * len(valuations)), s.size))
            if rows.shape[1] == s.size:
                grown[:n] = rows[:n]
            rows = stacked["rows"] = grown
        for k, v in enumerate(fresh, start=n):
            rows[k] = v.prices
        stacked["n"] = len(valuations)
        return rows[: len(valuations)] @ s

    def solve(supply, valuations, budgets):
        s = np.asarray(supply, dtype=np.float64)
        m = len(valuations)
        alloc = np.zeros((m, s.size))
        if m == 0 or not np.any(s > 0):
            return EquilibriumResult(np.zeros_like(s), alloc, True, 0.0)
        values = lot_values(valuations, s)
        winner, price = kernels.auction(values, np.asarray(budgets, dtype=np.float64), kind == VICKREY)
        alloc[winner] = s
        prices = price * s / float(np.dot(s, s))
        return EquilibriumResult(prices, alloc, True, 0.0)

    return solve


class WideEconomy:
    """Agents, their holdings and wealth, and the system agent's residual bundle.

    Agents are :class:`AgentSpec` values whose ``bid`` is a valuation over
    goods vectors and whose ``action`` maps a holding to a production action.
    """

    def __init__(self, goods: Sequence[str], config: Optional[MarketConfig] = None,
                 solver: Optional[Solver] = None, fallback: str = HOLD,
                 property_map: Optional[PropertyRightMap] = None,
                 ledger: Optional[WealthLedger] = None):
        if fallback not in (HOLD, RAISE):
            raise ValueError(f"fallback must be {HOLD!r} or {RAISE!r}")
        self.goods = tuple(goods)
        self.config = config or MarketConfig()
        self.solver = solver or equilibrium_solver()
        self.fallback = fallback
        self.property_map = property_map or PropertyRightMap()
        self.combiner = ActionCombiner()
        self.ledger = ledger if ledger is not None else WealthLedger()
        self.agents: List[AgentSpec] = []
        self._valuations: List[ValuationFn] = []
        self.holdings: List[GoodsBundle] = []
        self.residual = GoodsBundle.zero(self.goods)

    def __len__(self):
        return len(self.agents)

    def enroll(self, spec: AgentSpec, wealth: Optional[float] = None,
               holding: Optional[GoodsBundle] = None) -> AgentSpec:
        amount = self.config.endowment if wealth is None else float(wealth)
        with self.ledger.lock:
            aid = self.ledger.enroll(amount)
            spec = replace(spec, id=aid)
            self.agents.append(spec)
            self._valuations.append(as_valuation(spec.bid))
            self.holdings.append(GoodsBundle.zero(self.goods) if holding is None else holding)
        return spec

    def state(self, matrix: Optional[np.ndarray] = None) -> GoodsBundle:
        """The world, recovered as every holding plus the system's residual.

        ``matrix`` may pass in an up-to-date :meth:`holding_matrix`.
        """
        matrix = self.holding_matrix() if matrix is None else matrix
        return GoodsBundle(self.goods, [math.fsum(col) for col in matrix.T])

    def holding_matrix(self) -> np.ndarray:
        """Holdings as rows (agents in id order, then the system)."""
        rows = [h.quantities for h in self.holdings] + [self.residual.quantities]
        return np.array(rows, dtype=np.float64).reshape(len(rows), len(self.goods))

    def holdings_list(self) -> List[Holding]:
        return [Holding(i, h) for i, h in enumerate(self.holdings)] + [Holding(SYSTEM, self.residual)]

    def reset(self, state: GoodsBundle) -> None:
        """Start an episode: the system owns the whole ``state``."""
        zero = GoodsBundle.zero(self.goods)
        self.holdings = [zero] * len(self.agents)
        self.residual = GoodsBundle(self.goods, np.asarray(state))


@dataclass
class WideForward:
    actions: List[Any]
    prices: np.ndarray
    allocations: np.ndarray  # (agents + 1, goods); last row belongs to the system
    result: EquilibriumResult
    traded: bool
    active: np.ndarray  # agents that act this step


def _return_leftover(alloc: np.ndarray, old: np.ndarray, supply: np.ndarray) -> np.ndarray:
    """Give unallocated goods back to their previous holders pro rata.

    Rows of ``alloc``/``old`` are agents followed by the system. The system's
    new row absorbs any rounding so the columns add up to ``supply``.
    """
    out = np.vstack([alloc, np.zeros((1, supply.size))])
    left = supply - alloc.sum(axis=0)
    share = np.divide(old, supply, out=np.zeros_like(old), where=supply > 0)
    out += np.maximum(left, 0.0) * share
    out[-1] = supply - out[:-1].sum(axis=0)
    return out


def wide_market_forward(economy: WideEconomy, env: Optional[PomdpEnv] = None,
                        old: Optional[np.ndarray] = None) -> WideForward:
    """Equilibrium over the pooled holdings. Pure query: nothing is settled.

    When ``env`` declares ``empty_is_inert``, agents allocated nothing get no
    action (``None``). ``old`` may pass in the current holding matrix.
    """
    old = economy.holding_matrix() if old is None else old
    supply = old.sum(axis=0)
    budgets = np.maximum(economy.ledger.array().copy(), 0.0)
    result = economy.solver(supply, economy._valuations, budgets)
    if result.converged:
        new = _return_leftover(result.allocations, old, supply)
        traded = True
    elif economy.fallback == RAISE:
        raise NoEquilibriumFound(f"equilibrium did not converge (residual {result.residual:.3g})")
    else:
        new = old
        traded = False
    inert = getattr(env, "empty_is_inert", False) if env is not None else False
    active = np.any(new[:-1] != 0, axis=1) if inert else np.ones(len(economy.agents), dtype=bool)
    actions = [a.action(GoodsBundle(economy.goods, new[i])) if active[i] else None
               for i, a in enumerate(economy.agents)]
    return WideForward(actions, result.prices, new, result, traded, active)


def settle_trades(ledger: WealthLedger, prices, old, new, tol: float = 1e-9) -> np.ndarray:
    """Charge every holder ``p . new`` and pay it ``p . old``; returns net changes.

    Rows of ``old``/``new`` are enrolled agents in id order followed by the
    system agent. Raises :class:`BudgetViolation` (before touching the
    ledger) if an enrolled agent would end below ``-tol``.
    """
    p = np.asarray(prices, dtype=np.float64)
    old = np.asarray(old, dtype=np.float64)
    new = np.asarray(new, dtype=np.float64)
    charge = new @ p
    pay = old @ p
    with ledger.lock:
        wealth = ledger.array()
        after = (wealth - charge[:-1]) + pay[:-1]
        short = np.flatnonzero(after < -tol)
        if short.size:
            aid = int(short[0])
            raise BudgetViolation(f"agent {aid} cannot pay {charge[aid] - pay[aid]:.6g}")
        ledger.set_all(after)
        ledger._set(SYSTEM, (ledger[SYSTEM] - charge[-1]) + pay[-1])
    return pay - charge


def produce(agent: AgentSpec, allocation: GoodsBundle, property_map: PropertyRightMap,
            env: PomdpEnv, rng=None, action=None):
    """Run ``agent``'s production on its allocation: ``(exercised, produced, reward, action)``."""
    rng = as_rng(rng)
    if action is None:
        action = agent.action(allocation)
    exercised = property_map(action, allocation)
    if not env.valid_action(exercised, action):
        raise InvalidAction(f"agent {agent.id} chose invalid action {action!r}")
    produced = env.transition(exercised, action, rng)
    reward = float(env.reward(exercised, action, produced))
    return exercised, produced, reward, action


@dataclass
class WideStepRecord:
    t: int
    episode: int
    winner_id: int
    price: float
    reward: float
    total_wealth: float
    rent_paid: float
    traded: bool
    eq_residual: float
    prices: Dict[str, float] = field(default_factory=dict)

    def as_row(self) -> dict:
        row = {k: getattr(self, k) for k in WIDE_METRIC_COLUMNS}
        row.update({f"price_{g}": v for g, v in self.prices.items()})
        return row


@dataclass
class WideStepOutcome:
    next_state: GoodsBundle
    forward: WideForward
    rewards: np.ndarray
    settlement: np.ndarray
    rent_paid: float

    @property
    def top_buyer(self) -> int:
        """Agent that spent the most this step (``SYSTEM`` when nobody bought)."""
        alloc = self.forward.result.allocations
        if alloc.size == 0:
            return SYSTEM
        spend = alloc @ self.forward.prices
        received = alloc.sum(axis=1)
        if not np.any(received > 0):
            return SYSTEM
        # lexsort: last key is primary; stable, so ties keep the lowest id first
        order = np.lexsort((-received, -spend))
        return int(order[0])


def wide_capitalism_step(env: PomdpEnv, economy: WideEconomy, rng=None) -> WideStepOutcome:
    """One settled wide-market step on the economy's current holdings."""
    rng = as_rng(rng)
    ledger = economy.ledger
    with ledger.lock:
        old = economy.holding_matrix()
        state = economy.state(old)
        fwd = wide_market_forward(economy, env, old)
        settlement = settle_trades(ledger, fwd.prices, old, fwd.allocations) if fwd.traded \
            else np.zeros(old.shape[0])
        records = []
        rewards = np.zeros(len(economy.agents))
        zero = GoodsBundle.zero(economy.goods)
        holdings = [zero] * len(economy.agents)
        owners = []
        for i in np.flatnonzero(fwd.active):
            alloc = GoodsBundle(economy.goods, fwd.allocations[i])
            exercised, produced, reward, action = produce(economy.agents[i], alloc, economy.property_map,
                                                          env, rng, action=fwd.actions[i])
            records.append((action, exercised, produced))
            rewards[i] = reward
            holdings[i] = produced + (alloc - exercised)
            if np.any(holdings[i].quantities != 0):
                owners.append(int(i))
        nxt = economy.combiner(records, state)
        economy.holdings = holdings
        economy.residual = GoodsBundle(economy.goods, fwd.allocations[-1])
        for i in np.flatnonzero(rewards):
            ledger.credit(int(i), rewards[i])
        rent = 0.0
        if economy.config.rent_epsilon > 0:
            for i in owners:
                rent += ledger.apply_rent(i, economy.config.rent_epsilon)
    return WideStepOutcome(nxt, fwd, rewards, settlement, rent)


def run_wide_training(env: PomdpEnv, economy: WideEconomy, generator: Optional[Iterator[AgentSpec]],
                      steps: int, seed=None, on_step=None):
    """Wide counterpart of ``run_training``; episodes reset the world to the system agent."""
    import itertools

    if steps < 0:
        raise ValueError("steps must be nonnegative")
    rng = as_rng(economy.config.seed if seed is None else seed)
    metrics: List[WideStepRecord] = []
    if steps == 0:
        return economy, metrics
    horizon = economy.config.episode_horizon
    economy.reset(env.initial_state(rng))
    episode, length = 0, 0
    for t in range(steps):
        if generator is not None:
            for spec in itertools.islice(generator, economy.config.enumeration_rate):
                economy.enroll(spec)
        try:
            out = wide_capitalism_step(env, economy, rng)
        except Exception as exc:
            raise RuntimeError(f"training failed at step {t}: {exc}") from exc
        fwd = out.forward
        rec = WideStepRecord(
            t, episode, out.top_buyer, float(fwd.allocations.sum(axis=0) @ fwd.prices),
            float(out.rewards.sum()), economy.ledger.total(), out.rent_paid, fwd.traded,
            float(fwd.result.residual), {g: float(p) for g, p in zip(economy.goods, fwd.prices)})
        metrics.append(rec)
        if on_step is not None:
            on_step(rec)
        length += 1
        if env.is_terminal(out.next_state) or (horizon is not None and length >= horizon):
            episode += 1
            length = 0
            economy.reset(env.initial_state(rng))
    return economy, metrics


# --- a deep environment seen as a single-good wide market --------------------


class WorldGoodEnv(PomdpEnv):
    """Wraps a finite deep environment: one good per state, the world is a unit of it.

    Owning the bundle ``e_s`` means owning the whole world in state ``s``.
    The empty bundle is inert under every action.
    """

    empty_is_inert = True

    def __init__(self, base: PomdpEnv):
        self.base = base
        self.base_states = list(base.states())
        self.goods = tuple(f"s{i}" for i in range(len(self.base_states)))
        self._index = {s: i for i, s in enumerate(self.base_states)}
        self.action_names = base.action_names
        self.identity_action = base.identity_action

    def encode(self, s) -> GoodsBundle:
        q = np.zeros(len(self.goods))
        q[self._index[s]] = 1.0
        return GoodsBundle(self.goods, q)

    def decode(self, bundle: GoodsBundle):
        q = np.asarray(bundle)
        if not np.any(q != 0):
            return None
        return self.base_states[int(np.argmax(q))]

    def initial_state(self, rng):
        return self.encode(self.base.initial_state(rng))

    def transition(self, state, action, rng):
        s = self.decode(state)
        if s is None:
            return state
        return self.encode(self.base.transition(s, action, rng))

    def reward(self, state, action, next_state):
        s = self.decode(state)
        if s is None:
            return 0.0
        return float(self.base.reward(s, action, self.decode(next_state)))

    def is_terminal(self, state):
        s = self.decode(state)
        return s is not None and self.base.is_terminal(s)

    def valid_action(self, state, action):
        return self.decode(state) is None or self.base.valid_action(self.decode(state), action)


class _LinearStateValuation(ValuationFn):
    def __init__(self, bid, base_states):
        self.prices = np.array([float(bid(s)) for s in base_states])

    def value(self, x):
        return float(np.dot(self.prices, x))


def world_good_agents(env: WorldGoodEnv, specs: Iterator[AgentSpec]) -> Iterator[AgentSpec]:
    """Turn deep agents into wide ones: the bid on state ``s`` becomes the price of good ``s``."""
    for spec in specs:
        val = _LinearStateValuation(spec.bid, env.base_states)

        def act(bundle, _spec=spec):
            s = env.decode(bundle)
            return env.identity_action if s is None else _spec.action(env.base.observe(s))

        yield replace(spec, bid=val, action=act)


def world_good_economy(env: WorldGoodEnv, config: MarketConfig) -> WideEconomy:
    return WideEconomy(env.goods, config, solver=single_good_auction_solver(config.auction_kind),
                       fallback=RAISE)
