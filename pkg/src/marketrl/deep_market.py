"""Deep markets: agents bid each step for the right to act on the whole state.

The training loop settles each step in a fixed order: the winner pays its
price to the previous owner, the state transitions under the winner's
action, the reward is credited to the winner, and finally rent is charged on
the new owner.
"""

from __future__ import annotations

import itertools
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Any, Callable, Iterable, Iterator, List, Optional, Sequence

import numpy as np

from marketrl import kernels
from marketrl.core import (
    SYSTEM,
    VICKREY,
    AgentSpec,
    EmptyEconomy,
    InvalidAction,
    MarketConfig,
    WealthLedger,
    cap_bid,
)
from marketrl.environment import PomdpEnv, as_rng, obs_key

METRIC_COLUMNS = ("t", "episode", "winner_id", "price", "reward", "total_wealth", "rent_paid")


@dataclass
class Consumer:
    """Terminal buyer of desirable states; pays the owner, never acts."""

    id: int
    bid: Callable[[Any], float]
    budget: float

    def capped_bid(self, observation) -> float:
        return cap_bid(self.bid(observation), self.budget)


class Economy:
    """Enrolled agents, their ledger and the current owner of the world."""

    def __init__(self, config: Optional[MarketConfig] = None,
                 ledger: Optional[WealthLedger] = None,
                 consumers: Sequence[Consumer] = ()):
        self.config = config or MarketConfig()
        self.ledger = ledger if ledger is not None else WealthLedger()
        self.agents: List[AgentSpec] = []
        self.owner = SYSTEM
        self.consumers = list(consumers)
        self._cache: dict = {}
        self._cacheable = True
        if len(self.ledger):
            raise ValueError("start an Economy from a ledger without enrolled agents")

    def __len__(self) -> int:
        return len(self.agents)

    def enroll(self, spec: AgentSpec, wealth: Optional[float] = None) -> AgentSpec:
        """Append ``spec`` with the next id; ``wealth`` defaults to the endowment."""
        amount = self.config.endowment if wealth is None else float(wealth)
        with self.ledger.lock:
            aid = self.ledger.enroll(amount)
            spec = replace(spec, id=aid)
            self.agents.append(spec)
        self._cacheable = self._cacheable and spec.deterministic
        return spec

    def bid_vector(self, observation) -> np.ndarray:
        """Raw bids of all agents on ``observation``, indexed by agent id."""
        n = len(self.agents)
        key = obs_key(observation) if self._cacheable else None
        if key is None:
            return np.array([a.bid(observation) for a in self.agents], dtype=np.float64)
        cached = self._cache.get(key)
        if cached is None or cached.size < n:
            start = 0 if cached is None else cached.size
            fresh = np.array([a.bid(observation) for a in self.agents[start:]], dtype=np.float64)
            cached = fresh if cached is None else np.concatenate([cached, fresh])
            self._cache[key] = cached
        return cached

    def snapshot(self) -> dict:
        return {"owner": self.owner, "wealth": self.ledger.wealth,
                "total_injected": self.ledger.total_injected,
                "total_rent": self.ledger.total_rent}


@dataclass(frozen=True)
class AuctionResult:
    winner: int
    price: float
    capped_bids: Optional[np.ndarray] = None


@dataclass(frozen=True)
class StepRecord:
    t: int
    episode: int
    winner_id: int
    price: float
    reward: float
    total_wealth: float
    rent_paid: float

    def as_row(self) -> dict:
        return asdict(self)


def run_auction(observation, economy: Economy, keep_bids: bool = False) -> AuctionResult:
    """Cap every bid by wealth and sell the right to act to the highest bidder.

    With ``keep_bids`` the result also carries the capped bid vector.
    """
    if not economy.agents:
        raise EmptyEconomy("no agents enrolled")
    bids = economy.bid_vector(observation)
    wealth = economy.ledger.array()
    winner, price = kernels.auction(bids, wealth, economy.config.auction_kind == VICKREY)
    capped = kernels.cap_bids(bids, wealth) if keep_bids else None
    return AuctionResult(int(winner), float(price), capped)


def market_forward(observation, economy: Economy):
    """Forward pass: ``(action, winner, price)``. Does not touch the ledger."""
    result = run_auction(observation, economy)
    action = economy.agents[result.winner].action(observation)
    return action, result.winner, result.price


def consumer_settlement(observation, consumers: Sequence[Consumer], economy: Economy,
                        owner: Optional[int] = None) -> float:
    """The highest (budget-capped) consumer bid on ``observation`` is paid to the owner."""
    owner = economy.owner if owner is None else owner
    best, pay = None, 0.0
    for c in consumers:
        b = c.capped_bid(observation)
        if b > pay:
            best, pay = c, b
    if best is None:
        return 0.0
    best.budget -= pay
    economy.ledger.credit(owner, pay)
    return pay


@dataclass
class StepOutcome:
    next_state: Any
    winner: int
    price: float
    reward: float
    rent_paid: float
    action: Any


def capitalism_step(env: PomdpEnv, state, economy: Economy, rng=None, *,
                    owner: Optional[int] = None) -> StepOutcome:
    """One settled market step. Updates ``economy`` in place.

    When ``owner`` is given it is used as the previous owner instead of
    ``economy.owner`` (parallel runners keep their own owner) and
    ``economy.owner`` is left alone.
    """
    rng = as_rng(rng)
    track_owner = owner is None
    ledger = economy.ledger
    with ledger.lock:
        prev = economy.owner if track_owner else owner
        observation = env.observe(state, rng)
        auction = run_auction(observation, economy)
        winner, price = auction.winner, auction.price
        action = economy.agents[winner].action(observation)
        if not env.valid_action(state, action):
            raise InvalidAction(f"agent {winner} chose invalid action {action!r} in {state!r}")
        ledger.transfer(winner, prev, price)
        nxt = env.transition(state, action, rng)
        if economy.consumers:
            reward = consumer_settlement(env.observe(nxt, rng), economy.consumers, economy, owner=winner)
        else:
            reward = float(env.reward(state, action, nxt))
            ledger.credit(winner, reward)
        rent = ledger.apply_rent(winner, economy.config.rent_epsilon)
        if track_owner:
            economy.owner = winner
    return StepOutcome(nxt, winner, price, reward, rent, action)


def enroll_agents(economy: Economy, generator: Iterator[AgentSpec], t: int = 0) -> int:
    """Enroll the next ``enumeration_rate`` agents from ``generator``; returns the count."""
    added = 0
    for spec in itertools.islice(generator, economy.config.enumeration_rate):
        economy.enroll(spec)
        added += 1
    return added


class EpisodeRunner:
    """Per-episode state for one runner: current state, owner and counters."""

    def __init__(self, env: PomdpEnv, rng: np.random.Generator, horizon: Optional[int]):
        self.env = env
        self.rng = rng
        self.horizon = horizon
        self.episode = 0
        self.reset()

    def reset(self):
        self.state = self.env.initial_state(self.rng)
        self.owner = SYSTEM
        self.length = 0

    def advance(self, economy: Economy) -> StepOutcome:
        out = capitalism_step(self.env, self.state, economy, self.rng, owner=self.owner)
        self.owner = out.winner
        self.state = out.next_state
        self.length += 1
        if self.env.is_terminal(self.state) or (self.horizon is not None and self.length >= self.horizon):
            self.episode += 1
            self.reset()
        return out


def run_training(env: PomdpEnv, economy: Economy, generator: Optional[Iterator[AgentSpec]],
                 steps: int, seed=None, on_step: Optional[Callable[[StepRecord], None]] = None):
    """Alternate enrollment and settled market steps for ``steps`` steps.

    Episodes restart from the initial-state sampler on terminal states or at
    the horizon; ownership then returns to the system agent. Returns the
    economy and the list of per-step records.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    rng = as_rng(economy.config.seed if seed is None else seed)
    metrics: List[StepRecord] = []
    if steps == 0:
        return economy, metrics
    runner = EpisodeRunner(env, rng, economy.config.episode_horizon)
    runner.owner = economy.owner
    for t in range(steps):
        if generator is not None:
            enroll_agents(economy, generator, t)
        episode = runner.episode
        try:
            out = runner.advance(economy)
        except Exception as exc:
            raise RuntimeError(f"training failed at step {t}: {exc}") from exc
        economy.owner = runner.owner
        rec = StepRecord(t, episode, out.winner, out.price, out.reward,
                         economy.ledger.total(), out.rent_paid)
        metrics.append(rec)
        if on_step is not None:
            on_step(rec)
    return economy, metrics


def run_parallel(env: PomdpEnv, economy: Economy, generator: Optional[Iterator[AgentSpec]],
                 steps: int, runners: int, seed=None) -> List[StepRecord]:
    """``runners`` episode runners sharing one ledger, ``steps`` steps in total.

    Each step is atomic with respect to the ledger; interleaving between
    threads is up to the scheduler, so records are not replay-deterministic
    for ``runners > 1``.
    """
    if runners < 1:
        raise ValueError("need at least one runner")
    seeds = np.random.SeedSequence(economy.config.seed if seed is None else seed).spawn(runners)
    pool = [EpisodeRunner(env, np.random.default_rng(s), economy.config.episode_horizon) for s in seeds]
    counter = itertools.count()
    lock = threading.Lock()
    metrics: List[StepRecord] = []
    episodes = [0]

    def work(runner: EpisodeRunner):
        while True:
            with economy.ledger.lock:
                t = next(counter)
                if t >= steps:
                    return
                if generator is not None:
                    with lock:
                        enroll_agents(economy, generator, t)
                before = runner.episode
                out = runner.advance(economy)
                if runner.episode != before:
                    episodes[0] += 1
                rec = StepRecord(t, episodes[0], out.winner, out.price, out.reward,
                                 economy.ledger.total(), out.rent_paid)
            with lock:
                metrics.append(rec)

    with ThreadPoolExecutor(max_workers=runners) as ex:
        list(ex.map(work, pool))
    metrics.sort(key=lambda r: r.t)
    return metrics


# --- agent generators ------------------------------------------------------


def constant_agent(action, bids: dict, default_bid: float = 0.0, **meta) -> AgentSpec:
    """Agent that always plays ``action`` and bids ``bids.get(obs, default_bid)``."""

    def bid(observation, _bids=dict(bids), _default=default_bid):
        return _bids.get(observation, _default)

    return AgentSpec(-1, lambda observation, _a=action: _a, bid, meta=meta)


def tabular_constant_agents(observations: Iterable, actions: Sequence, bid_grid: Sequence[float],
                            repeat: bool = False) -> Iterator[AgentSpec]:
    """Enumerate agents ``(observation, action, bid)`` in that nesting order.

    Each agent bids its grid level on its own observation, abstains (bids 0)
    elsewhere, and always plays its action. With ``repeat`` the enumeration
    cycles forever, so a strategy whose copy went broke re-enters with a
    fresh endowment.
    """
    observations = list(observations)
    for copy in itertools.count():
        for o in observations:
            for a in actions:
                for b in bid_grid:
                    yield constant_agent(a, {o: float(b)}, observation=o, act=a, level=float(b), copy=copy)
        if not repeat:
            return


def bid_grid(start: float, stop: float, step: float) -> List[float]:
    n = int(round((stop - start) / step))
    return [start + k * step for k in range(n + 1)]


def winning_policy(env: PomdpEnv, economy: Economy, states: Optional[Sequence] = None) -> dict:
    """Per-state ``(winner, action, price)`` of the current economy (pure query)."""
    states = env.states() if states is None else states
    out = {}
    for s in states:
        if env.is_terminal(s):
            continue
        action, winner, price = market_forward(env.observe(s), economy)
        out[s] = (winner, action, price)
    return out
