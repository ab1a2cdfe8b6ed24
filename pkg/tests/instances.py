"""Seeded random instance families shared by unit and acceptance tests."""

import numpy as np

from marketrl.equilibrium import QuadraticValuation


def random_quadratic_instance(seed, max_goods=3, max_agents=4, resolution=0.05):
    """Concave quadratic valuations with diagonally dominant curvature.

    Supply is drawn on the oracle grid; budgets are ample so they never bind.
    """
    rng = np.random.default_rng(seed)
    g = int(rng.integers(1, max_goods + 1))
    m = int(rng.integers(1, max_agents + 1))
    supply = np.round(rng.uniform(0.5, 1.0, g) / resolution) * resolution
    vals = []
    for _ in range(m):
        a = rng.uniform(2.5, 4.0, g)
        Q = np.diag(rng.uniform(1.0, 2.0, g))
        for i in range(g):
            for j in range(i + 1, g):
                Q[i, j] = Q[j, i] = rng.uniform(-0.2, 0.2)
        vals.append(QuadraticValuation(a, Q))
    return supply, vals, [100.0] * m


def random_mlp_widths(rng, max_layers=3, max_width=16):
    layers = int(rng.integers(1, max_layers + 1))
    return [int(w) for w in rng.integers(1, max_width + 1, layers + 1)]


def relu_margin(graph, point):
    """Smallest |pre-activation| over every rectifier node at ``point``."""
    from marketrl.nn_bridge import ReluNode

    inputs, _ = graph.evaluate(point)
    margins = [np.min(np.abs(inputs[n.name])) for n in graph.nodes if isinstance(n, ReluNode)]
    return float(min(margins)) if margins else np.inf


def random_price_graph(rng, max_depth=4, max_width=8, margin=1e-3, tries=200):
    """Seeded affine/rectifier DAG with skip connections, consumers and a kink-free point.

    Returns ``(graph, point)`` where every rectifier input is at least
    ``margin`` away from zero.
    """
    from marketrl.nn_bridge import AffineNode, MarketGraph, ReluNode

    depth = int(rng.integers(1, max_depth + 1))
    d0 = int(rng.integers(1, max_width + 1))
    nodes, prev, prev_dim = [], "x", d0
    for i in range(1, depth + 1):
        reads, width_in = [prev], prev_dim
        if prev != "x" and rng.random() < 0.3:
            reads, width_in = [prev, "x"], prev_dim + d0
        out = int(rng.integers(1, max_width + 1))
        W = rng.normal(0.0, 1.0 / np.sqrt(width_in), (out, width_in))
        nodes.append(AffineNode(f"a{i}", reads, W, rng.normal(0.0, 0.5, out)))
        nodes.append(ReluNode(f"r{i}", [f"a{i}"]))
        prev, prev_dim = f"r{i}", out
    consumers = {prev: rng.normal(size=prev_dim)}
    if depth > 1 and rng.random() < 0.5:
        consumers["r1"] = rng.normal(size=nodes[0].weight.shape[0])
    graph = MarketGraph({"x": d0}, nodes, consumers)
    for _ in range(tries):
        point = {"x": rng.normal(size=d0)}
        if relu_margin(graph, point) > margin:
            return graph, point
    raise RuntimeError("no kink-free point found")
