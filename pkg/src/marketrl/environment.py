"""POMDP environments, message-memory augmentation and the built-in toy worlds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Hashable, NamedTuple, Optional, Sequence

import numpy as np

from marketrl.core import GoodsBundle, InvalidAction


def as_rng(seed: Any) -> np.random.Generator:
    """Accept a Generator, an int seed or None."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class PomdpEnv:
    """Base class for environments.

    Subclasses implement ``initial_state``, ``transition``, ``reward`` and
    optionally ``observe``/``is_terminal``/``valid_action``. Randomness is
    only drawn from the generator passed in, so every method is pure given a
    seeded stream.
    """

    #: names of the actions when the action set is finite and state-independent
    action_names: Sequence[Any] = ()
    identity_action: Any = None

    def initial_state(self, rng: np.random.Generator) -> Any:
        raise NotImplementedError

    def transition(self, state: Any, action: Any, rng: np.random.Generator) -> Any:
        raise NotImplementedError

    def reward(self, state: Any, action: Any, next_state: Any) -> float:
        raise NotImplementedError

    def observe(self, state: Any, rng: Optional[np.random.Generator] = None) -> Any:
        return state

    def is_terminal(self, state: Any) -> bool:
        return False

    def valid_action(self, state: Any, action: Any) -> bool:
        return not self.action_names or action in self.action_names

    def states(self) -> Sequence[Any]:
        """Enumerate the state space, for finite environments."""
        raise NotImplementedError(f"{type(self).__name__} has no finite state list")

    def observations(self) -> Sequence[Any]:
        return [self.observe(s) for s in self.states()]

    def step(self, state, action, seed=None):
        rng = as_rng(seed)
        if not self.valid_action(state, action):
            raise InvalidAction(f"action {action!r} is not valid in state {state!r}")
        nxt = self.transition(state, action, rng)
        r = float(self.reward(state, action, nxt))
        return nxt, r, self.observe(nxt, rng)


def step(env: PomdpEnv, state, action, seed=None):
    """Advance ``env`` one step: ``(next_state, reward, observation)``."""
    return env.step(state, action, seed)


def observe(env: PomdpEnv, state, seed=None):
    return env.observe(state, as_rng(seed))


class ChainMDP(PomdpEnv):
    """Chain of ``n`` states; entering the last state pays 1 and ends the episode."""

    action_names = ("left", "right", "stay")
    identity_action = "stay"

    def __init__(self, n: int = 5, goal_reward: float = 1.0):
        if n < 2:
            raise ValueError("a chain needs at least two states")
        self.n = n
        self.goal_reward = goal_reward

    def states(self):
        return list(range(self.n))

    def initial_state(self, rng):
        return int(rng.integers(0, self.n - 1))

    def transition(self, state, action, rng):
        if action == "right":
            return min(state + 1, self.n - 1)
        if action == "left":
            return max(state - 1, 0)
        return state

    def reward(self, state, action, next_state):
        if next_state == self.n - 1 and state != self.n - 1:
            return self.goal_reward
        return 0.0

    def is_terminal(self, state):
        return state == self.n - 1


class GridWorld(PomdpEnv):
    """``size`` x ``size`` grid; reaching ``goal`` pays ``goal_reward`` and ends the episode."""

    MOVES = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1), "stay": (0, 0)}
    action_names = ("up", "down", "left", "right", "stay")
    identity_action = "stay"

    def __init__(self, size: int = 4, goal=None, goal_reward: float = 1.0):
        self.size = size
        self.goal = tuple(goal) if goal is not None else (size - 1, size - 1)
        self.goal_reward = goal_reward

    def states(self):
        return [(r, c) for r in range(self.size) for c in range(self.size)]

    def initial_state(self, rng):
        starts = [s for s in self.states() if s != self.goal]
        return starts[int(rng.integers(0, len(starts)))]

    def transition(self, state, action, rng):
        dr, dc = self.MOVES[action]
        r = min(max(state[0] + dr, 0), self.size - 1)
        c = min(max(state[1] + dc, 0), self.size - 1)
        return (r, c)

    def reward(self, state, action, next_state):
        if next_state == self.goal and state != self.goal:
            return self.goal_reward
        return 0.0

    def is_terminal(self, state):
        return state == self.goal


# --- classification environment for compiled ReLU networks ----------------


def relu(x):
    return np.maximum(x, 0.0)


def squared_loss(prediction, label) -> float:
    d = np.asarray(prediction, dtype=np.float64) - np.asarray(label, dtype=np.float64)
    return float(0.5 * np.dot(d, d))


class LayerState(NamedTuple):
    layer: int
    values: np.ndarray
    label: Any


class LayerObservation(NamedTuple):
    """A state with its label discarded."""

    layer: int
    values: np.ndarray


@dataclass(frozen=True)
class LayerAction:
    """Apply ``relu(weight @ s + bias)`` to a state of layer ``layer - 1``."""

    layer: int
    weight: np.ndarray
    bias: np.ndarray

    def __call__(self, values):
        return relu(self.weight @ values + self.bias)


class ClassificationEnv(PomdpEnv):
    """States are ``(layer, activations, label)``; the label is never observed.

    ``widths`` are the layer sizes ``m_0, ..., m_n``. Landing in layer ``n``
    is terminal and pays ``-loss(prediction, label)``; every other step pays 0.
    """

    def __init__(self, widths: Sequence[int], loss: Callable = squared_loss,
                 inputs=None, labels=None):
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 2:
            raise ValueError("need at least one layer")
        self.loss = loss
        self.inputs = None if inputs is None else np.asarray(inputs, dtype=np.float64)
        self.labels = labels

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    def start(self, x, label=None) -> LayerState:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape != (self.widths[0],):
            raise ValueError(f"input must have width {self.widths[0]}, got {x.shape}")
        if label is None:
            label = np.zeros(self.widths[-1])
        return LayerState(0, x, label)

    def initial_state(self, rng):
        if self.inputs is None:
            return self.start(rng.standard_normal(self.widths[0]))
        i = int(rng.integers(0, len(self.inputs)))
        label = None if self.labels is None else self.labels[i]
        return self.start(self.inputs[i], label)

    def valid_action(self, state, action):
        if not isinstance(action, LayerAction):
            return False
        i = action.layer
        return (
            state.layer == i - 1
            and 1 <= i <= self.depth
            and action.weight.shape == (self.widths[i], self.widths[i - 1])
            and action.bias.shape == (self.widths[i],)
        )

    def transition(self, state, action, rng):
        return LayerState(action.layer, action(state.values), state.label)

    def reward(self, state, action, next_state):
        if next_state.layer == self.depth:
            return -float(self.loss(next_state.values, next_state.label))
        return 0.0

    def observe(self, state, rng=None):
        return LayerObservation(state.layer, state.values)

    def is_terminal(self, state):
        return state.layer == self.depth


# --- two-good production economy (wide markets) ----------------------------


class ProductionEconomy(PomdpEnv):
    """Iron and tools. Production functions act on an agent's own bundle.

    ``mine`` adds ``mine_yield`` iron. ``forge`` converts up to
    ``forge_capacity`` iron into tools at 2:1; a consumer buys the forged tools
    at ``tool_price`` each, which is the action's reward. ``idle`` is the
    identity. States and observations are :class:`GoodsBundle` values.
    """

    goods = ("iron", "tool")
    action_names = ("idle", "mine", "forge")
    identity_action = "idle"

    def __init__(self, mine_yield: float = 2.0, forge_capacity: float = 4.0,
                 tool_price: float = 1.0, initial=(0.0, 0.0)):
        self.mine_yield = mine_yield
        self.forge_capacity = forge_capacity
        self.tool_price = tool_price
        self.initial = tuple(initial)

    def bundle(self, iron=0.0, tool=0.0) -> GoodsBundle:
        return GoodsBundle(self.goods, (iron, tool))

    def initial_state(self, rng):
        return self.bundle(*self.initial)

    def transition(self, state, action, rng):
        iron, tool = state["iron"], state["tool"]
        if action == "mine":
            return self.bundle(iron + self.mine_yield, tool)
        if action == "forge":
            used = min(iron, self.forge_capacity)
            return self.bundle(iron - used, tool + used / 2.0)
        return state

    def reward(self, state, action, next_state):
        return self.tool_price * max(next_state["tool"] - state["tool"], 0.0)


# --- message memory ---------------------------------------------------------


class MemoryState(NamedTuple):
    base: Any
    message: str


@dataclass(frozen=True)
class MemoryAction:
    """A base action plus an optional message to write (``None`` keeps the old one)."""

    base: Any
    write: Optional[str] = None


class MemoryAugmentedEnv(PomdpEnv):
    """Cartesian product of ``base`` with fixed-length messages over ``alphabet``.

    Observations carry the message through unchanged.
    """

    def __init__(self, base: PomdpEnv, alphabet: str, length: int, pad: Optional[str] = None):
        if length <= 0:
            raise ValueError("message length must be positive")
        pad = alphabet[0] if pad is None else pad
        if pad not in alphabet:
            raise ValueError("pad character must belong to the alphabet")
        self.base = base
        self.alphabet = alphabet
        self.length = length
        self.pad = pad
        self.identity_action = MemoryAction(base.identity_action)

    def encode(self, message: str) -> str:
        if len(message) > self.length or any(ch not in self.alphabet for ch in message):
            raise InvalidAction(f"message {message!r} is not in the message space")
        return message.ljust(self.length, self.pad)

    def _split(self, action):
        if isinstance(action, MemoryAction):
            return action.base, action.write
        return action, None

    def initial_state(self, rng):
        return MemoryState(self.base.initial_state(rng), self.pad * self.length)

    def valid_action(self, state, action):
        base_action, write = self._split(action)
        if write is not None:
            try:
                self.encode(write)
            except InvalidAction:
                return False
        return self.base.valid_action(state.base, base_action)

    def transition(self, state, action, rng):
        base_action, write = self._split(action)
        message = state.message if write is None else self.encode(write)
        return MemoryState(self.base.transition(state.base, base_action, rng), message)

    def reward(self, state, action, next_state):
        return self.base.reward(state.base, self._split(action)[0], next_state.base)

    def observe(self, state, rng=None):
        return MemoryState(self.base.observe(state.base, rng), state.message)

    def is_terminal(self, state):
        return self.base.is_terminal(state.base)

    def states(self):
        import itertools

        messages = ["".join(m) for m in itertools.product(self.alphabet, repeat=self.length)]
        return [MemoryState(s, m) for s in self.base.states() for m in messages]


def augment_with_memory(env: PomdpEnv, alphabet: str = "01", length: int = 2,
                        pad: Optional[str] = None) -> MemoryAugmentedEnv:
    return MemoryAugmentedEnv(env, alphabet, length, pad)


BUILTIN_ENVIRONMENTS = {
    "chain": ChainMDP,
    "gridworld": GridWorld,
    "production": ProductionEconomy,
}


def obs_key(observation) -> Optional[Hashable]:
    """Hashable cache key for an observation, or None when it has no stable key."""
    try:
        hash(observation)
    except TypeError:
        return None
    return observation
