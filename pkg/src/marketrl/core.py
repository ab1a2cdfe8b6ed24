"""Shared domain types: goods bundles, agents, the wealth ledger and market settings."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

#: Ledger key of the inert "original owner of the world".
SYSTEM = -1

FIRST_PRICE = "first_price"
VICKREY = "vickrey"
AUCTION_KINDS = (FIRST_PRICE, VICKREY)


class MarketError(Exception):
    """Base class for errors raised by the simulation engine."""


class InsufficientFunds(MarketError):
    pass


class GoodsMismatch(MarketError, ValueError):
    pass


class EmptyEconomy(MarketError):
    pass


class InvalidAction(MarketError, ValueError):
    pass


class GoodsBundle:
    """Immutable real vector over a named set of goods."""

    __slots__ = ("goods", "quantities", "_index")

    def __init__(self, goods: Sequence[str], quantities: Any = None):
        goods = tuple(str(g) for g in goods)
        if not goods:
            raise ValueError("a goods bundle needs at least one good")
        if len(set(goods)) != len(goods):
            raise ValueError(f"duplicate good identifiers in {goods}")
        if quantities is None:
            q = np.zeros(len(goods))
        else:
            q = np.array(quantities, dtype=np.float64).reshape(-1)
        if q.shape != (len(goods),):
            raise ValueError(f"expected {len(goods)} quantities, got {q.shape}")
        if not np.all(np.isfinite(q)):
            raise ValueError("goods quantities must be finite")
        q.setflags(write=False)
        object.__setattr__(self, "goods", goods)
        object.__setattr__(self, "quantities", q)
        object.__setattr__(self, "_index", {g: i for i, g in enumerate(goods)})

    def __setattr__(self, name, value):
        raise AttributeError("GoodsBundle is immutable")

    @classmethod
    def zero(cls, goods: Sequence[str]) -> "GoodsBundle":
        return cls(goods)

    @classmethod
    def from_dict(cls, mapping: Mapping[str, float]) -> "GoodsBundle":
        return cls(list(mapping), list(mapping.values()))

    @property
    def dimension(self) -> int:
        return len(self.goods)

    def as_dict(self) -> dict:
        return {g: float(v) for g, v in zip(self.goods, self.quantities)}

    def _aligned(self, other: "GoodsBundle") -> np.ndarray:
        if not isinstance(other, GoodsBundle):
            raise TypeError(f"expected GoodsBundle, got {type(other).__name__}")
        if other.goods == self.goods:
            return other.quantities
        if set(other.goods) != set(self.goods):
            raise GoodsMismatch(f"good sets differ: {self.goods} vs {other.goods}")
        return np.array([other[g] for g in self.goods])

    def __getitem__(self, good: str) -> float:
        return float(self.quantities[self._index[good]])

    def __len__(self) -> int:
        return len(self.goods)

    def __array__(self, dtype=None, copy=None):
        q = self.quantities
        return q.astype(dtype) if dtype is not None else q.copy()

    def __add__(self, other: "GoodsBundle") -> "GoodsBundle":
        return GoodsBundle(self.goods, self.quantities + self._aligned(other))

    def __sub__(self, other: "GoodsBundle") -> "GoodsBundle":
        return GoodsBundle(self.goods, self.quantities - self._aligned(other))

    def __neg__(self) -> "GoodsBundle":
        return GoodsBundle(self.goods, -self.quantities)

    def __mul__(self, scalar: float) -> "GoodsBundle":
        return GoodsBundle(self.goods, self.quantities * float(scalar))

    __rmul__ = __mul__

    def dot(self, prices: Any) -> float:
        if isinstance(prices, GoodsBundle):
            prices = self._aligned(prices)
        return float(np.dot(self.quantities, np.asarray(prices, dtype=np.float64)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GoodsBundle):
            return NotImplemented
        if set(other.goods) != set(self.goods):
            return False
        return bool(np.array_equal(self.quantities, self._aligned(other)))

    def __hash__(self) -> int:
        return hash((self.goods, self.quantities.tobytes()))

    def __repr__(self) -> str:
        inner = ", ".join(f"{g}={v:g}" for g, v in zip(self.goods, self.quantities))
        return f"GoodsBundle({inner})"


@dataclass(frozen=True)
class AgentSpec:
    """An agent: an action map and a bid map over observations.

    ``bid`` returns currency in a deep market; in a wide market it is the
    agent's valuation over bundles. ``deterministic`` agents may have their
    bids cached per observation.
    """

    id: int
    action: Callable[[Any], Any]
    bid: Callable[[Any], float]
    bid_gradient: Optional[Callable[[Any], np.ndarray]] = None
    deterministic: bool = True
    meta: Mapping[str, Any] = field(default_factory=dict, compare=False)


def cap_bid(bid: float, wealth: float) -> float:
    """Clamp ``bid`` to ``[0, wealth]``; negative bids read as abstention."""
    return max(min(float(bid), float(wealth)), 0.0)


class _CompensatedSum:
    """Running float sum with Neumaier compensation (long runs of small adds)."""

    __slots__ = ("total", "comp")

    def __init__(self, value: float = 0.0):
        self.total = float(value)
        self.comp = 0.0

    def add(self, x: float) -> None:
        t = self.total + x
        if abs(self.total) >= abs(x):
            self.comp += (self.total - t) + x
        else:
            self.comp += (x - t) + self.total
        self.total = t

    @property
    def value(self) -> float:
        return self.total + self.comp


class WealthLedger:
    """Per-agent wealth with conservation bookkeeping.

    Enrolled agents have ids ``0..n-1`` and live in a dense array so that the
    auction kernel can read them without copying. The system agent
    (``SYSTEM``) is a source/sink and may go negative.
    All mutating methods hold the ledger lock, so concurrent runners see
    serializable updates.
    """

    def __init__(self, initial: Optional[Mapping[int, float]] = None):
        self._w = np.zeros(16)
        self._n = 0
        self.system = 0.0
        self._injected = _CompensatedSum()
        self._rent = _CompensatedSum()
        self.initial = 0.0
        self.lock = threading.RLock()
        if initial:
            for aid in sorted(initial):
                amount = float(initial[aid])
                if aid == SYSTEM:
                    self.system = amount
                else:
                    if aid != self._n:
                        raise ValueError("ledger ids must be contiguous from 0")
                    self._append(amount)
                self.initial += amount

    def _append(self, amount: float) -> int:
        if self._n == self._w.size:
            grown = np.zeros(max(16, 2 * self._w.size))
            grown[: self._n] = self._w[: self._n]
            self._w = grown
        self._w[self._n] = amount
        self._n += 1
        return self._n - 1

    def __len__(self) -> int:
        return self._n

    def __contains__(self, aid: int) -> bool:
        return aid == SYSTEM or 0 <= aid < self._n

    def __getitem__(self, aid: int) -> float:
        if aid == SYSTEM:
            return self.system
        if not 0 <= aid < self._n:
            raise KeyError(aid)
        return float(self._w[aid])

    def set_all(self, values) -> None:
        """Overwrite every enrolled agent's wealth at once (internal transfers only)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self._n,):
            raise ValueError(f"need {self._n} wealth values, got {values.shape}")
        with self.lock:
            self._w[: self._n] = values

    def _set(self, aid: int, value: float) -> None:
        if aid == SYSTEM:
            self.system = value
        elif 0 <= aid < self._n:
            self._w[aid] = value
        else:
            raise KeyError(aid)

    @property
    def wealth(self) -> dict:
        """Snapshot copy as a plain dict (system agent included)."""
        out = {SYSTEM: self.system}
        out.update({i: float(v) for i, v in enumerate(self._w[: self._n])})
        return out

    def array(self) -> np.ndarray:
        """Live read-only view of enrolled agents' wealth, indexed by id."""
        view = self._w[: self._n]
        view.flags.writeable = False
        return view

    @property
    def total_injected(self) -> float:
        """Money brought in from outside: endowments plus rewards."""
        return self._injected.value

    @property
    def total_rent(self) -> float:
        return self._rent.value

    def total(self) -> float:
        return float(np.sum(self._w[: self._n])) + self.system

    def expected_total(self) -> float:
        return self.initial + self.total_injected - self.total_rent

    def enroll(self, endowment: float) -> int:
        """Add an agent endowed with ``endowment``; endowments count as injections."""
        with self.lock:
            aid = self._append(float(endowment))
            self._injected.add(float(endowment))
            return aid

    def transfer(self, src: int, dst: int, amount: float) -> None:
        amount = float(amount)
        if amount < 0:
            raise ValueError(f"negative transfer amount {amount}")
        with self.lock:
            have = self[src]
            if src != SYSTEM and amount > have:
                raise InsufficientFunds(f"agent {src} has {have}, cannot pay {amount}")
            if amount == 0.0 or src == dst:
                return
            self._set(src, have - amount)
            self._set(dst, self[dst] + amount)

    def credit(self, aid: int, amount: float) -> None:
        """Inject (or, for negative rewards, remove) money from outside the economy."""
        with self.lock:
            self._set(aid, self[aid] + float(amount))
            self._injected.add(float(amount))

    def apply_rent(self, aid: int, epsilon: float) -> float:
        """Scale ``aid``'s wealth by ``1 - epsilon``; returns the amount removed."""
        with self.lock:
            have = self[aid]
            if epsilon <= 0.0 or have <= 0.0:
                return 0.0
            kept = (1.0 - epsilon) * have
            removed = have - kept
            self._set(aid, kept)
            self._rent.add(removed)
            return removed

    def copy(self) -> "WealthLedger":
        other = WealthLedger()
        other._w = self._w.copy()
        other._n = self._n
        other.system = self.system
        other._injected.total, other._injected.comp = self._injected.total, self._injected.comp
        other._rent.total, other._rent.comp = self._rent.total, self._rent.comp
        other.initial = self.initial
        return other

    def to_text(self) -> str:
        lines = [f"system {self.system!r}"]
        lines += [f"{i} {float(v)!r}" for i, v in enumerate(self._w[: self._n])]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "WealthLedger":
        wealth = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, value = line.split()
            wealth[SYSTEM if key == "system" else int(key)] = float(value)
        return cls(wealth)


@dataclass(frozen=True)
class MarketConfig:
    auction_kind: str = FIRST_PRICE
    rent_epsilon: float = 0.0
    enumeration_rate: int = 1
    endowment: float = 1.0
    seed: int = 0
    episode_horizon: Optional[int] = None

    def __post_init__(self):
        if self.auction_kind not in AUCTION_KINDS:
            raise ValueError(f"auction_kind must be one of {AUCTION_KINDS}, got {self.auction_kind!r}")
        if not 0.0 <= self.rent_epsilon < 1.0:
            raise ValueError(f"rent_epsilon must lie in [0, 1), got {self.rent_epsilon}")
        if self.enumeration_rate < 0:
            raise ValueError(f"enumeration_rate must be nonnegative, got {self.enumeration_rate}")
        if not self.endowment > 0:
            raise ValueError(f"endowment must be positive, got {self.endowment}")
        if self.episode_horizon is not None and self.episode_horizon <= 0:
            raise ValueError(f"episode_horizon must be positive, got {self.episode_horizon}")


def total_bundle(bundles: Iterable[GoodsBundle]) -> GoodsBundle:
    bundles = list(bundles)
    if not bundles:
        raise ValueError("cannot sum an empty collection of bundles")
    acc = bundles[0]
    for b in bundles[1:]:
        acc = acc + b
    return acc
