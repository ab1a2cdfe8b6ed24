import math
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from marketrl.core import (
    SYSTEM,
    GoodsBundle,
    GoodsMismatch,
    InsufficientFunds,
    MarketConfig,
    WealthLedger,
    cap_bid,
    total_bundle,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)
small_ints = st.integers(-1000, 1000).map(float)


@pytest.mark.parametrize("bid,wealth,expected", [(5, 2, 2), (3, 10, 3), (-1, 5, 0)])
def test_cap_bid_examples(bid, wealth, expected):
    assert cap_bid(bid, wealth) == expected


@given(finite, st.floats(0, 1e6), finite, st.floats(0, 1e6))
def test_cap_bid_monotone_and_idempotent(b1, w1, b2, w2):
    c = cap_bid(b1, w1)
    assert 0.0 <= c <= w1
    assert cap_bid(c, w1) == c
    assert cap_bid(max(b1, b2), w1) >= c
    assert cap_bid(b1, max(w1, w2)) >= c


def test_bundle_arithmetic():
    a = GoodsBundle(["x", "y"], [1.0, 2.0])
    b = GoodsBundle(["x", "y"], [0.5, -1.0])
    assert (a + b).as_dict() == {"x": 1.5, "y": 1.0}
    assert (2 * a)["y"] == 4.0
    assert a + GoodsBundle.zero(["x", "y"]) == a
    assert (-a)["x"] == -1.0
    assert a.dot([1.0, 1.0]) == 3.0


def test_bundle_aligns_permuted_goods():
    a = GoodsBundle(["x", "y"], [1.0, 2.0])
    b = GoodsBundle(["y", "x"], [10.0, 20.0])
    assert (a + b).as_dict() == {"x": 21.0, "y": 12.0}
    assert a == GoodsBundle(["y", "x"], [2.0, 1.0])


def test_bundle_mismatch_and_validation():
    a = GoodsBundle(["x", "y"], [1.0, 2.0])
    with pytest.raises(GoodsMismatch):
        a + GoodsBundle(["x", "z"], [1.0, 2.0])
    with pytest.raises(ValueError):
        GoodsBundle(["x", "x"], [1.0, 2.0])
    with pytest.raises(ValueError):
        GoodsBundle(["x"], [math.inf])
    with pytest.raises(AttributeError):
        a.quantities = np.zeros(2)
    with pytest.raises(ValueError):
        a.quantities[0] = 5.0


@given(st.lists(small_ints, min_size=3, max_size=3), st.lists(small_ints, min_size=3, max_size=3),
       st.lists(small_ints, min_size=3, max_size=3))
def test_bundle_addition_laws(x, y, z):
    g = ["a", "b", "c"]
    a, b, c = GoodsBundle(g, x), GoodsBundle(g, y), GoodsBundle(g, z)
    assert a + b == b + a
    assert (a + b) + c == a + (b + c)
    assert (a - b) + b == a


def test_total_bundle():
    g = ["a"]
    assert total_bundle([GoodsBundle(g, [1]), GoodsBundle(g, [2])])["a"] == 3.0
    with pytest.raises(ValueError):
        total_bundle([])


def test_ledger_transfer_examples():
    led = WealthLedger({0: 5.0, 1: 1.0})
    led.transfer(0, 1, 3.0)
    assert led[0] == 2.0 and led[1] == 4.0
    before = led.wealth
    led.transfer(0, 1, 0.0)
    assert led.wealth == before
    with pytest.raises(InsufficientFunds):
        led.transfer(0, 1, 6.0)
    with pytest.raises(ValueError):
        led.transfer(0, 1, -1.0)


def test_system_agent_is_a_source():
    led = WealthLedger()
    led.enroll(1.0)
    led.transfer(SYSTEM, 0, 10.0)
    assert led[SYSTEM] == -10.0 and led[0] == 11.0
    assert led.total() == pytest.approx(led.expected_total())


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.floats(0, 1)), max_size=60))
def test_transfers_conserve_total(ops):
    led = WealthLedger({i: 10.0 for i in range(4)})
    total = led.total()
    for src, dst, frac in ops:
        led.transfer(src, dst, frac * led[src])
    assert led.total() == pytest.approx(total, abs=1e-9)
    assert all(v >= 0 for k, v in led.wealth.items() if k != SYSTEM)


def test_rent_and_credit_bookkeeping():
    led = WealthLedger()
    led.enroll(10.0)
    removed = led.apply_rent(0, 0.01)
    assert removed == pytest.approx(0.1)
    assert led[0] == pytest.approx(9.9)
    led.credit(0, 2.5)
    assert led.total_injected == pytest.approx(12.5)
    assert led.total() == pytest.approx(led.expected_total(), abs=1e-12)
    assert led.apply_rent(0, 0.0) == 0.0


def test_ledger_text_roundtrip():
    led = WealthLedger()
    for w in (0.1, 2.0 / 3.0, 7.0):
        led.enroll(w)
    led.transfer(SYSTEM, 2, 1.25)
    back = WealthLedger.from_text(led.to_text())
    assert back.wealth == led.wealth


def test_ledger_is_thread_safe():
    led = WealthLedger({0: 1000.0, 1: 1000.0})

    def worker(src, dst):
        for _ in range(2000):
            led.transfer(src, dst, 0.25)

    ts = [threading.Thread(target=worker, args=(i % 2, 1 - i % 2)) for i in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert led.total() == 2000.0


def test_ledger_array_is_read_only():
    led = WealthLedger({0: 1.0})
    with pytest.raises(ValueError):
        led.array()[0] = 3.0


@pytest.mark.parametrize("field,kwargs", [
    ("rent_epsilon", {"rent_epsilon": 1.5}),
    ("rent_epsilon", {"rent_epsilon": -0.1}),
    ("endowment", {"endowment": 0.0}),
    ("auction_kind", {"auction_kind": "dutch"}),
    ("enumeration_rate", {"enumeration_rate": -1}),
    ("episode_horizon", {"episode_horizon": 0}),
])
def test_market_config_validation_names_field(field, kwargs):
    with pytest.raises(ValueError, match=field):
        MarketConfig(**kwargs)


def test_set_all_overwrites_enrolled_wealth_only():
    led = WealthLedger()
    led.enroll(1.0)
    led.enroll(2.0)
    led.set_all([3.0, 0.0])
    assert led.wealth == {SYSTEM: 0.0, 0: 3.0, 1: 0.0}
    assert led.total_injected == 3.0
    with pytest.raises(ValueError):
        led.set_all([1.0])
