"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--agents 1000]

Each kernel is run on the same inputs by both backends; outputs are checked
to agree before timings are reported.
"""

import argparse
import timeit

import numpy as np

from marketrl.kernels import get_backend


def cases(n_agents, rng):
    bids = rng.uniform(0.0, 2.0, n_agents)
    wealth = rng.uniform(0.0, 1.5, n_agents)
    grid2 = (24, 24)
    grid3 = (10, 10, 10)
    return {
        f"auction first-price n={n_agents}": ("auction", (bids, wealth, False)),
        f"auction vickrey n={n_agents}": ("auction", (bids, wealth, True)),
        f"cap_bids n={n_agents}": ("cap_bids", (bids, wealth)),
        "maxplus_merge 24x24": ("maxplus_merge", (rng.random(576), rng.random(576), grid2)),
        "maxplus_merge 10x10x10": ("maxplus_merge", (rng.random(1000), rng.random(1000), grid3)),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    return a == b


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--agents", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    py = get_backend("python")
    try:
        cy = get_backend("cython")
    except ImportError:
        print("compiled extension not built; run `pip install --no-build-isolation -e .` first")
        return 1

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<30}{'python (ms)':>14}{'cython (ms)':>14}{'speedup':>10}")
    for name, (fn, call_args) in cases(args.agents, rng).items():
        f_py, f_cy = getattr(py, fn), getattr(cy, fn)
        if not same(f_py(*call_args), f_cy(*call_args)):
            raise SystemExit(f"{name}: backends disagree")
        timings = []
        for f in (f_py, f_cy):
            number, _ = timeit.Timer(lambda: f(*call_args)).autorange()
            best = min(timeit.repeat(lambda: f(*call_args), number=number, repeat=args.repeat))
            timings.append(1e3 * best / number)
        print(f"{name:<30}{timings[0]:>14.4f}{timings[1]:>14.4f}{timings[0] / timings[1]:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
