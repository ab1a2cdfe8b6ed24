"""ReLU networks as deep markets, and prices as backpropagated consumer bids.

``compile_mlp_to_market`` builds a classification environment whose states
are layer activations, plus an economy in which only the agents playing the
network's own layers hold wealth. Its forward pass reproduces the network.

``backprop_prices`` walks a fixed production graph in reverse topological
order and turns downstream prices into input-good prices with the transposed
Jacobian of each node's production function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from marketrl.core import MarketConfig
from marketrl.deep_market import Economy, market_forward
from marketrl.environment import ClassificationEnv, LayerAction, relu, squared_loss


class DimensionMismatch(ValueError):
    pass


class CyclicGraph(ValueError):
    pass


class MissingJacobian(ValueError):
    pass


@dataclass
class MlpSpec:
    """Fully connected network; ReLU after every layer, the last one included."""

    layers: List[Tuple[np.ndarray, np.ndarray]]
    loss: Callable = squared_loss

    def __post_init__(self):
        if not self.layers:
            raise DimensionMismatch("an MLP needs at least one layer")
        fixed = []
        prev = None
        for i, (W, b) in enumerate(self.layers, start=1):
            W = np.atleast_2d(np.asarray(W, dtype=np.float64))
            b = np.asarray(b, dtype=np.float64).reshape(-1)
            if b.shape != (W.shape[0],):
                raise DimensionMismatch(f"layer {i}: bias has {b.size} entries, weight has {W.shape[0]} rows")
            if prev is not None and W.shape[1] != prev:
                raise DimensionMismatch(f"layer {i} expects width {W.shape[1]}, previous layer gives {prev}")
            prev = W.shape[0]
            fixed.append((W, b))
        self.layers = fixed

    @property
    def widths(self) -> List[int]:
        return [self.layers[0][0].shape[1]] + [W.shape[0] for W, _ in self.layers]

    def forward(self, x) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for W, b in self.layers:
            h = relu(W @ h + b)
        return h

    @classmethod
    def random(cls, widths: Sequence[int], rng=None, scale: float = 1.0) -> "MlpSpec":
        rng = np.random.default_rng(rng)
        layers = []
        for m_in, m_out in zip(widths[:-1], widths[1:]):
            W = rng.normal(0.0, scale / np.sqrt(m_in), (m_out, m_in))
            b = rng.normal(0.0, 0.5 * scale, m_out)
            layers.append((W, b))
        return cls(layers)

    def to_text(self) -> str:
        lines = ["# widths, then each layer's weights (row-major) and biases",
                 " ".join(str(w) for w in self.widths)]
        for W, b in self.layers:
            lines.append(" ".join(repr(float(v)) for v in W.ravel()))
            lines.append(" ".join(repr(float(v)) for v in b))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MlpSpec":
        rows = [ln.split("#", 1)[0].split() for ln in text.splitlines()]
        rows = [r for r in rows if r]
        if not rows:
            raise DimensionMismatch("empty network file")
        widths = [int(t) for t in rows[0]]
        tokens = [float(t) for r in rows[1:] for t in r]
        need = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
        if len(widths) < 2 or len(tokens) != need:
            raise DimensionMismatch(f"widths {widths} need {need} numbers, file has {len(tokens)}")
        layers, k = [], 0
        for m_in, m_out in zip(widths[:-1], widths[1:]):
            W = np.array(tokens[k:k + m_in * m_out]).reshape(m_out, m_in)
            k += m_in * m_out
            b = np.array(tokens[k:k + m_out])
            k += m_out
            layers.append((W, b))
        return cls(layers)


def load_inputs(text: str) -> np.ndarray:
    """One whitespace-separated input vector per line; ``#`` starts a comment."""
    rows = [ln.split("#", 1)[0].split() for ln in text.splitlines()]
    return np.array([[float(t) for t in r] for r in rows if r], dtype=np.float64)


# --- compilation -----------------------------------------------------------

LAYER_BID = 1.0


def _layer_agent_bid(layer: int, level: float):
    def bid(observation):
        return level if observation.layer == layer - 1 else 0.0

    return bid


def compile_mlp_to_market(mlp: MlpSpec, endowment: float = 10.0, decoys: int = 0,
                          rng=None, inputs=None, labels=None):
    """Build ``(env, economy)`` whose deep-market forward pass computes ``mlp``.

    The economy holds one funded agent per layer, playing that layer's
    parameters and bidding ``LAYER_BID`` on observations of the previous
    layer. ``decoys`` extra agents per layer with random parameters are
    enrolled first (lower ids) with zero wealth; they bid too but are capped
    at 0. Agent metadata records ``layer`` and ``funded``.
    """
    if not isinstance(mlp, MlpSpec):
        mlp = MlpSpec(list(mlp))
    env = ClassificationEnv(mlp.widths, mlp.loss, inputs, labels)
    economy = Economy(MarketConfig(enumeration_rate=0, endowment=endowment))
    rng = np.random.default_rng(rng)
    from marketrl.core import AgentSpec

    for i, (W, b) in enumerate(mlp.layers, start=1):
        for _ in range(decoys):
            act = LayerAction(i, rng.normal(size=W.shape), rng.normal(size=b.shape))
            spec = AgentSpec(-1, lambda obs, _a=act: _a, _layer_agent_bid(i, LAYER_BID),
                             meta={"layer": i, "funded": False})
            economy.enroll(spec, wealth=0.0)
        act = LayerAction(i, W, b)
        spec = AgentSpec(-1, lambda obs, _a=act: _a, _layer_agent_bid(i, LAYER_BID),
                         meta={"layer": i, "funded": True})
        economy.enroll(spec, wealth=endowment)
    return env, economy


@dataclass
class EquivalenceReport:
    max_deviation: float
    winners: List[List[int]]
    expected_winners: List[int]
    outputs: np.ndarray

    @property
    def winners_match(self) -> bool:
        return all(w == self.expected_winners for w in self.winners)

    @property
    def ok(self) -> bool:
        return self.winners_match and self.max_deviation <= 1e-10


def market_forward_equals_network(mlp: MlpSpec, inputs, env=None, economy=None) -> EquivalenceReport:
    """Run the compiled market forward on each input and compare with ``mlp.forward``."""
    if env is None or economy is None:
        env, economy = compile_mlp_to_market(mlp)
    expected = [a.id for a in economy.agents if a.meta.get("funded")]
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    winners, outputs, dev = [], [], 0.0
    for x in inputs:
        state = env.start(x)
        seq = []
        while not env.is_terminal(state):
            action, winner, _ = market_forward(env.observe(state), economy)
            seq.append(winner)
            state = env.transition(state, action, None)
        winners.append(seq)
        outputs.append(state.values)
        dev = max(dev, float(np.max(np.abs(state.values - mlp.forward(x)), initial=0.0)))
    return EquivalenceReport(dev, winners, expected, np.array(outputs))


# --- production graphs and price backpropagation -----------------------------


class Node:
    """A producer: ``fn`` maps its (concatenated) input goods to output goods."""

    def __init__(self, name: str, inputs: Sequence[str], fn: Callable,
                 jacobian: Optional[Callable] = None):
        self.name = name
        self.inputs = list(inputs)
        self.fn = fn
        self.jacobian = jacobian

    def __call__(self, x):
        return np.asarray(self.fn(np.asarray(x, dtype=np.float64)), dtype=np.float64)

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r} <- {self.inputs})"


class AffineNode(Node):
    def __init__(self, name, inputs, weight, bias=None):
        W = np.atleast_2d(np.asarray(weight, dtype=np.float64))
        b = np.zeros(W.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
        self.weight, self.bias = W, b
        super().__init__(name, inputs, lambda x: W @ x + b, lambda x: W)


class ReluNode(Node):
    def __init__(self, name, inputs):
        # subgradient 0 at the kink
        super().__init__(name, inputs, relu, lambda x: np.diag((x > 0).astype(np.float64)))


def compose(name: str, first: Node, second: Node) -> Node:
    """``second . first`` as a single node reading ``first``'s inputs."""
    if first.jacobian is None or second.jacobian is None:
        raise MissingJacobian("cannot fuse nodes without Jacobians")

    def fn(x):
        return second(first(x))

    def jac(x):
        return second.jacobian(first(x)) @ first.jacobian(x)

    return Node(name, first.inputs, fn, jac)


def numerical_jacobian(fn: Callable, h: float = 1e-6) -> Callable:
    """Central-difference Jacobian, for user nodes without an analytic one."""

    def jac(x):
        x = np.asarray(x, dtype=np.float64)
        cols = []
        for j in range(x.size):
            e = np.zeros_like(x)
            e[j] = h
            cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
        return np.stack(cols, axis=1)

    return jac


@dataclass
class MarketGraph:
    """Sources (external input goods), producer nodes and consumer price vectors.

    ``consumers`` maps a node name to the price vector a consumer offers for
    that node's output goods.
    """

    sources: Dict[str, int]
    nodes: List[Node]
    consumers: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        names = list(self.sources) + [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ValueError("node and source names must be unique")
        self._by_name = {n.name: n for n in self.nodes}
        for n in self.nodes:
            for p in n.inputs:
                if p not in self.sources and p not in self._by_name:
                    raise ValueError(f"node {n.name!r} reads unknown input {p!r}")
        for c in self.consumers:
            if c not in self._by_name:
                raise ValueError(f"consumer attached to unknown node {c!r}")
        self.order = self._toposort()

    def node(self, name: str) -> Node:
        return self._by_name[name]

    def _toposort(self) -> List[str]:
        state: Dict[str, int] = {}
        order: List[str] = []

        def visit(name, stack):
            if name in self.sources:
                return
            mark = state.get(name)
            if mark == 2:
                return
            if mark == 1:
                raise CyclicGraph(f"cycle through {' -> '.join(stack + [name])}")
            state[name] = 1
            for p in self._by_name[name].inputs:
                visit(p, stack + [name])
            state[name] = 2
            order.append(name)

        for n in self.nodes:
            visit(n.name, [])
        return order

    def children(self) -> Dict[str, List[str]]:
        out = {k: [] for k in list(self.sources) + [n.name for n in self.nodes]}
        for n in self.nodes:
            for p in n.inputs:
                out[p].append(n.name)
        return out

    def evaluate(self, point: Mapping[str, np.ndarray], overrides: Optional[Mapping[str, np.ndarray]] = None):
        """Forward pass. Returns ``(inputs, outputs)`` dicts keyed by name.

        ``overrides`` replaces the input vector of the named nodes, leaving
        every other node's wiring intact.
        """
        outputs = {k: np.asarray(point[k], dtype=np.float64).reshape(-1) for k in self.sources}
        for k, d in self.sources.items():
            if outputs[k].size != d:
                raise DimensionMismatch(f"source {k!r} needs {d} values")
        inputs = {}
        for name in self.order:
            node = self._by_name[name]
            if overrides and name in overrides:
                x = np.asarray(overrides[name], dtype=np.float64)
            else:
                x = np.concatenate([outputs[p] for p in node.inputs])
            inputs[name] = x
            outputs[name] = node(x)
        return inputs, outputs

    def consumer_value(self, point, overrides=None, consumers=None) -> float:
        consumers = self.consumers if consumers is None else consumers
        _, outputs = self.evaluate(point, overrides)
        return float(sum(np.dot(np.asarray(p, dtype=np.float64), outputs[k]) for k, p in consumers.items()))


@dataclass
class PriceReport:
    """Prices at the evaluation point.

    ``input_prices[node]`` is the price vector the node offers for its input
    goods; ``output_prices[name]`` is the downstream price of a node's (or
    source's) output.
    """

    input_prices: Dict[str, np.ndarray]
    output_prices: Dict[str, np.ndarray]

    def source_prices(self, graph: MarketGraph) -> Dict[str, np.ndarray]:
        return {k: self.output_prices[k] for k in graph.sources}


def backprop_prices(graph: MarketGraph, point: Mapping[str, np.ndarray],
                    consumer_prices: Optional[Mapping[str, np.ndarray]] = None) -> PriceReport:
    """Propagate consumer prices upstream: input price = Jacobian^T @ output price."""
    consumers = graph.consumers if consumer_prices is None else consumer_prices
    inputs, outputs = graph.evaluate(point)
    out_price = {k: np.zeros_like(v) for k, v in outputs.items()}
    for k, p in consumers.items():
        out_price[k] = out_price[k] + np.asarray(p, dtype=np.float64)
    in_price: Dict[str, np.ndarray] = {}
    for name in reversed(graph.order):
        node = graph.node(name)
        if node.jacobian is None:
            raise MissingJacobian(f"node {name!r} has no Jacobian")
        J = np.atleast_2d(node.jacobian(inputs[name]))
        price = J.T @ out_price[name]
        in_price[name] = price
        k = 0
        for parent in node.inputs:
            d = outputs[parent].size
            out_price[parent] = out_price[parent] + price[k:k + d]
            k += d
    return PriceReport(in_price, out_price)


def finite_difference_prices(graph: MarketGraph, point: Mapping[str, np.ndarray],
                             consumer_prices: Optional[Mapping[str, np.ndarray]] = None,
                             h: float = 1e-5) -> PriceReport:
    """Central differences of total consumer value w.r.t. each node's input and each source."""
    if h <= 0:
        raise ValueError("step must be positive")
    consumers = graph.consumers if consumer_prices is None else consumer_prices
    inputs, outputs = graph.evaluate(point)

    def value(pt, ov=None):
        return graph.consumer_value(pt, ov, consumers)

    in_price = {}
    for name in graph.order:
        x = inputs[name]
        g = np.empty_like(x)
        for j in range(x.size):
            e = np.zeros_like(x)
            e[j] = h
            g[j] = (value(point, {name: x + e}) - value(point, {name: x - e})) / (2 * h)
        in_price[name] = g
    out_price = {}
    for k in graph.sources:
        x = outputs[k]
        g = np.empty_like(x)
        for j in range(x.size):
            e = np.zeros_like(x)
            e[j] = h
            g[j] = (value({**point, k: x + e}) - value({**point, k: x - e})) / (2 * h)
        out_price[k] = g
    return PriceReport(in_price, out_price)


def fuse(graph: MarketGraph, upstream: str, downstream: str) -> MarketGraph:
    """Replace ``downstream . upstream`` by one composed node named ``downstream``.

    Requires ``downstream`` to read only ``upstream``, and ``upstream`` to feed
    nothing else and carry no consumer.
    """
    up, down = graph.node(upstream), graph.node(downstream)
    if down.inputs != [upstream] or graph.children()[upstream] != [downstream] or upstream in graph.consumers:
        raise ValueError(f"{upstream!r} -> {downstream!r} is not a fusable pair")
    fused = compose(downstream, up, down)
    nodes = [fused if n.name == downstream else n for n in graph.nodes if n.name != upstream]
    return MarketGraph(dict(graph.sources), nodes, dict(graph.consumers))


def mlp_to_graph(mlp: MlpSpec, output_price=None) -> MarketGraph:
    """Chain graph ``x -> affine_1 -> relu_1 -> ... -> relu_n`` for ``mlp``."""
    nodes: List[Node] = []
    prev = "x"
    for i, (W, b) in enumerate(mlp.layers, start=1):
        nodes.append(AffineNode(f"affine{i}", [prev], W, b))
        nodes.append(ReluNode(f"relu{i}", [f"affine{i}"]))
        prev = f"relu{i}"
    consumers = {} if output_price is None else {prev: np.asarray(output_price, dtype=np.float64)}
    return MarketGraph({"x": mlp.widths[0]}, nodes, consumers)


def loss_price(mlp: MlpSpec, x, label, h: float = 1e-7) -> np.ndarray:
    """Consumer price on the network output: minus the loss gradient at ``f(x)``."""
    y = mlp.forward(x)
    g = np.empty_like(y)
    for j in range(y.size):
        e = np.zeros_like(y)
        e[j] = h
        g[j] = (mlp.loss(y + e, label) - mlp.loss(y - e, label)) / (2 * h)
    return -g
