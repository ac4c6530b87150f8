"""One pass/fail test per acceptance criterion, at the stated tolerances.

Sweeps are seeded and deterministic; the slow ones carry the ``slow``
marker so ``pytest -m "not slow"`` skips them.
"""

import random
import statistics
import time
from collections import Counter

import numpy as np
import pytest

from c4sim.c4d import monte_carlo
from c4sim.c4p import AllocationState, QpRequest, allocate, on_link_fault, probe_paths
from c4sim.cli import main
from c4sim.config import load_config
from c4sim.errors import AllocationError
from c4sim.simengine import run, substream
from c4sim.simengine.corpus import CORPUS_FAULTS, corpus_case
from c4sim.topology import build_fat_tree, route, set_link_state

SEEDS = range(100)


def ideal_busbw(cfg):
    """Per-rank ring bound: bonded NIC bandwidth over the oversubscription, capped by NVLink."""
    t = cfg.scenario.topology
    topo = t.build()
    return min(2 * t.capacity_gbps / float(topo.oversubscription), t.nvlink_gbps)


def job_means(rep):
    jobs = sorted({r.job for r in rep.iterations})
    return [statistics.mean(rep.busbw(j)) for j in jobs]


def sweep(name, overrides):
    for s in SEEDS:
        yield run(load_config(name, overrides + [f"run.seed={s}"]).scenario)


# -- 1 ------------------------------------------------------------------------

@pytest.mark.slow
def test_c1_bonded_port_balance():
    cfg = load_config("bonded_balance")
    ideal = ideal_busbw(cfg)
    t0 = time.perf_counter()
    on = run(cfg.scenario)
    assert time.perf_counter() - t0 <= 10
    assert min(on.busbw(0)) >= 0.95 * ideal

    medians, collided = [], 0
    for rep in sweep("bonded_balance", ["policies.c4p=false"]):
        medians.append(statistics.median(rep.busbw(0)))
        first_op = min(f.op_seq for f in rep.flows)
        per_port = Counter(f.dst_port for f in rep.flows if f.op_seq == first_op)
        collided += max(per_port.values()) >= 2
    assert statistics.median(medians) <= 0.8 * ideal
    assert collided >= 60


# -- 2 ------------------------------------------------------------------------

@pytest.mark.slow
def test_c2_eight_jobs_one_to_one():
    cfg = load_config("eight_jobs_1to1")
    ideal = ideal_busbw(cfg)
    bw = job_means(run(cfg.scenario))
    assert len(bw) == 8
    assert (max(bw) - min(bw)) / max(bw) <= 0.02
    assert min(bw) >= 0.95 * ideal

    pooled = []
    for rep in sweep("eight_jobs_1to1", ["policies.c4p=false"]):
        pooled += job_means(rep)
    assert 1 - statistics.mean(pooled) / ideal >= 0.30
    assert max(pooled) / min(pooled) >= 1.3


# -- 3 ------------------------------------------------------------------------

@pytest.mark.slow
def test_c3_eight_jobs_two_to_one():
    cfg = load_config("eight_jobs_2to1", ["run.sample_interval_s=0.005"])
    ideal = ideal_busbw(cfg)
    rep = run(cfg.scenario)
    assert rep.ports
    for p in rep.ports:
        assert p.gbps <= p.capacity_gbps * (1 + 1e-9)
    bw = job_means(rep)
    assert (max(bw) - min(bw)) / max(bw) <= 0.01

    pooled = []
    for rep in sweep("eight_jobs_2to1", ["policies.c4p=false"]):
        pooled += job_means(rep)
    assert 1 - statistics.mean(pooled) / ideal >= 0.30


# -- 4 ------------------------------------------------------------------------

def _after_fault(rep, t_fault):
    return [r.busbw_gbps for r in rep.iterations if r.net_start_s > t_fault]


def _uplink_flows(rep, leaf, after):
    """Flow counts on the up uplinks of ``leaf`` at each sample with traffic."""
    per_time = {}
    for p in rep.ports:
        if (p.src == f"leaf{leaf}" and p.dst.startswith("spine") and p.time_s > after
                and p.capacity_gbps > 0):
            per_time.setdefault(p.time_s, []).append(p.flows)
    return {t: v for t, v in per_time.items() if sum(v) > 0}


@pytest.mark.slow
def test_c4_link_failure_tolerance():
    cfg = load_config("linkfail_lb")
    ideal = ideal_busbw(cfg)
    fault = cfg.scenario.faults[0]
    rep = run(cfg.scenario)
    # the job whose ring crosses the failed uplink sets the steady state
    steady = min(_after_fault(rep, fault.time_s))
    lb_on_ok = steady >= 0.95 * 7 / 8 * ideal

    leaf = cfg.scenario.topology.build().link_leaf(fault.target[0])
    hits = 0
    for rep in sweep("linkfail_lb", ["policies.dynamic_lb=false"]):
        before = _uplink_flows(rep, leaf, 0.0)
        pre = [statistics.mean(v) for t, v in before.items() if t < fault.time_s]
        post = [max(v) for t, v in _uplink_flows(rep, leaf, fault.time_s).items()]
        concentrated = bool(post) and max(post) >= 2 * statistics.mean(pre)
        hits += concentrated and min(_after_fault(rep, fault.time_s)) <= 6 / 8 * ideal
    assert hits >= 60
    assert lb_on_ok, f"dynamic LB steady state {steady:.2f} < {0.95 * 7 / 8 * ideal:.2f} Gbps"


# -- 5 ------------------------------------------------------------------------

@pytest.mark.slow
def test_c5_diagnosis_accuracy():
    t0 = time.perf_counter()
    wrong = []
    for i in range(204):
        kind = CORPUS_FAULTS[i % len(CORPUS_FAULTS)]
        case = corpus_case(i, kind)
        rep = run(case.scenario)
        onset = sum(1 for r in rep.iterations if r.end_s <= case.fault.time_s)
        v = rep.verdicts()
        got = v[0] if v else None
        if (got is None or (got.verdict, got.targets) != (case.verdict, case.targets)
                or got.window > onset + 2):
            wrong.append((i, kind, got and got.line()))
    false_pos = [i for i in range(100) if run(corpus_case(10_000 + i, None).scenario).verdicts()]
    assert wrong == []
    assert false_pos == []
    assert time.perf_counter() - t0 <= 300


# -- 6 ------------------------------------------------------------------------

@pytest.mark.parametrize("name, target, tol", [("downtime_jun", 0.3119, 0.05),
                                               ("downtime_dec", 0.0116, 0.005)])
def test_c6_downtime_calibration(name, target, tol):
    cfg = load_config(name)
    assert cfg.trials >= 1000
    mc = monte_carlo(cfg.downtime, cfg.trials, substream(cfg.scenario.run.seed, "downtime"))
    assert abs(mc["total"] - target) <= tol
    closed = cfg.downtime.expected_fractions()
    assert mc["total"] == pytest.approx(sum(closed.values()), rel=0.02)
    if name == "downtime_jun":
        assert (mc["diagnosis_isolation"] > mc["post_checkpoint"] > mc["detection"]
                > mc["re_initialization"])


# -- 7 ------------------------------------------------------------------------

def test_c7_oracle_suites():
    """(a)-(c) live in the unit suites; rerun them here as one gate."""
    ret = pytest.main(["-q", "-p", "no:cacheprovider",
                       "tests/test_fairshare.py::test_matches_oracle_on_500_random_instances",
                       "tests/test_c4p.py::test_probe_matches_oracle_on_500_fault_patterns",
                       "tests/test_collective.py::test_ring_schedule_reduces_correctly"])
    assert ret == 0


@pytest.mark.parametrize("name", ["bonded_balance", "eight_jobs_1to1", "eight_jobs_2to1",
                                  "linkfail_lb", "downtime_jun", "downtime_dec"])
def test_c7_presets_byte_identical(name, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", name, "--out", str(a)]) == 0
    assert main(["run", "--config", name, "--out", str(b)]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


# -- 8 ------------------------------------------------------------------------

def _usable(topo, table, a, b):
    return [s for s in table.spines_between(a, b)
            if topo.uplink[(a, s)] not in table.excluded_links
            and topo.uplink[(b, s)] not in table.excluded_links]


def _check_state(topo, table, state, seed, fresh):
    for (a, b), loads in state.pair_load.items():
        spines = _usable(topo, table, a, b)
        assert all(c == 0 for s, c in loads.items() if s not in spines)
        if spines:
            v = [loads.get(s, 0) for s in spines]
            assert max(v) - min(v) <= 1, ((a, b), loads)
    for asg in fresh:
        assert asg.src_leaf % 2 == asg.side == asg.dst_leaf % 2
        assert not set(asg.path.links) & table.excluded_links
        assert route(topo, asg.flow_key, seed) == asg.path


@pytest.mark.slow
def test_c8_allocation_invariants():
    rng = random.Random(8)
    ops = faults = 0
    while ops < 10_000:
        topo = build_fat_tree(16, 8, 8, 4, 200)
        seed = rng.randrange(1 << 30)
        table = probe_paths(topo, seed=seed)
        state = AllocationState()
        for qp in range(500):
            ops += 1
            if rng.random() < 0.04:
                cands = [ln.link_id for ln in topo.links
                         if ln.is_up and (ln.kind == "up" or rng.random() < 0.05)]
                link = rng.choice(cands)
                set_link_state(topo, link, "down")
                table, _ = on_link_fault(state, table, topo, link, seed=seed)
                faults += 1
                fresh = list(state.assignments.values())
            else:
                src, dst = rng.sample(range(16), 2)
                req = QpRequest(rng.randrange(8), qp, src, rng.randrange(8), dst,
                                rng.randrange(8), rng.randrange(4), rng.choice([None, 0, 1]))
                try:
                    fresh = [allocate(state, table, topo, req, seed=seed)]
                except AllocationError:
                    fresh = []
            _check_state(topo, table, state, seed, fresh)
    assert faults > 100
