import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from c4sim.fairshare import fair_share


def water_fill_oracle(flow_links, capacity, caps=None):
    """Textbook O(F^2 L) progressive filling with plain Python loops.

    Each round raises every unfrozen flow by the smallest increment that
    saturates a link or reaches a flow's cap, then freezes the flows that
    hit a bottleneck.
    """
    nf = len(flow_links)
    rate = [0.0] * nf
    limit = [float("inf")] * nf if caps is None else list(caps)
    frozen = [any(capacity[l] <= 0 for l in links) or limit[f] <= 0
              for f, links in enumerate(flow_links)]
    residual = {l: float(c) for l, c in capacity.items()}
    while not all(frozen):
        inc = float("inf")
        for l in residual:
            users = sum(1 for f in range(nf) if not frozen[f] and l in flow_links[f])
            if users:
                inc = min(inc, residual[l] / users)
        for f in range(nf):
            if not frozen[f]:
                inc = min(inc, limit[f] - rate[f])
        for f in range(nf):
            if not frozen[f]:
                rate[f] += inc
                for l in flow_links[f]:
                    residual[l] -= inc
        for f in range(nf):
            if frozen[f]:
                continue
            if rate[f] >= limit[f] - 1e-12 * max(1.0, limit[f]):
                frozen[f] = True
            elif any(residual[l] <= 1e-12 * max(1.0, capacity[l]) for l in flow_links[f]):
                frozen[f] = True
    return rate


def random_instance(rng, max_flows=20, max_links=30, with_caps=False):
    nl = rng.randint(1, max_links)
    nf = rng.randint(1, max_flows)
    capacity = {l: rng.choice([0.0, 50.0, 100.0, 200.0, 400.0, rng.uniform(1, 500)])
                if rng.random() < 0.95 else 0.0 for l in range(nl)}
    capacity = {l: (c if c > 0 or rng.random() < 0.2 else 100.0) for l, c in capacity.items()}
    flows = [rng.sample(range(nl), rng.randint(1, min(4, nl))) for _ in range(nf)]
    caps = [rng.uniform(5, 300) for _ in range(nf)] if with_caps else None
    return flows, capacity, caps


def test_two_flows_one_link():
    assert list(fair_share([[0], [0]], {0: 200})) == [100, 100]


def test_three_flow_chain():
    r = fair_share([["L1"], ["L1", "L2"], ["L2"]], {"L1": 200, "L2": 200})
    assert list(r) == [100, 100, 100]


def test_reroute_concentration():
    # three orphaned flows land on a port already carrying one
    r = fair_share([[0], [0], [0], [0], [1]], {0: 200, 1: 200, 2: 200})
    assert list(r[:4]) == [50] * 4 and r[4] == 200


def test_zero_capacity_link_gets_zero():
    r = fair_share([[0, 1], [1]], {0: 0.0, 1: 100})
    assert list(r) == [0, 100]


def test_caps_respected():
    r = fair_share([[0], [0]], {0: 200}, caps=[30, np.inf])
    assert list(r) == [30, 170]


def test_linkless_flow_needs_cap():
    with pytest.raises(ValueError):
        fair_share([[]], {})
    assert list(fair_share([[]], {}, caps=[7.0])) == [7.0]


def _close(a, b):
    return all(abs(x - y) <= 1e-9 * max(1.0, abs(y)) for x, y in zip(a, b))


def test_matches_oracle_on_500_random_instances():
    rng = random.Random(20230601)
    for _ in range(500):
        flows, capacity, _ = random_instance(rng)
        got = fair_share(flows, capacity)
        want = water_fill_oracle(flows, capacity)
        assert _close(got, want), (flows, capacity, list(got), want)


def test_matches_oracle_with_caps():
    rng = random.Random(7)
    for _ in range(200):
        flows, capacity, caps = random_instance(rng, with_caps=True)
        got = fair_share(flows, capacity, caps)
        want = water_fill_oracle(flows, capacity, caps)
        assert _close(got, want), (flows, capacity, caps, list(got), want)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32))
def test_feasible_and_bottlenecked(seed):
    rng = random.Random(seed)
    flows, capacity, _ = random_instance(rng)
    r = fair_share(flows, capacity)
    load = {l: 0.0 for l in capacity}
    for f, links in enumerate(flows):
        for l in links:
            load[l] += r[f]
    for l, c in capacity.items():
        assert load[l] <= c * (1 + 1e-9) + 1e-9
    # every flow with positive rate has a saturated link where it is maximal
    for f, links in enumerate(flows):
        if any(capacity[l] <= 0 for l in links):
            assert r[f] == 0
            continue
        ok = False
        for l in links:
            if load[l] >= capacity[l] * (1 - 1e-9):
                users = [g for g, ls in enumerate(flows) if l in ls]
                if r[f] >= max(r[g] for g in users) * (1 - 1e-9):
                    ok = True
        assert ok


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.01, 100.0))
def test_scale_equivariant(seed, c):
    rng = random.Random(seed)
    flows, capacity, _ = random_instance(rng)
    a = fair_share(flows, capacity)
    b = fair_share(flows, {l: v * c for l, v in capacity.items()})
    assert np.allclose(a * c, b, rtol=1e-9, atol=1e-12)


def test_weighted_coupling():
    # one entity uses link 0 at half weight on two paths; another uses it fully
    r = fair_share([[0, 0], [0]], {0: 300.0}, weights=[[0.5, 0.5], [1.0]])
    assert list(r) == [150.0, 150.0]
    r = fair_share([[0, 1], [1]], {0: 100.0, 1: 1000.0}, weights=[[2.0, 1.0], [1.0]])
    assert r[0] == pytest.approx(50.0) and r[1] == pytest.approx(950.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32))
def test_unit_weights_match_unweighted(seed):
    rng = random.Random(seed)
    flows, capacity, _ = random_instance(rng)
    a = fair_share(flows, capacity)
    b = fair_share(flows, capacity, weights=[[1.0] * len(f) for f in flows])
    assert np.array_equal(a, b)
