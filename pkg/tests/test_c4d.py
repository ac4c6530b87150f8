import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from c4sim.c4d import (
    ClusterState, CommRecord, Diagnosis, DowntimeRegime, Incident, LatencyMatrix, LifecycleEvent,
    Monitor, OpRecord, RecordQueue, TransportRecord, build_latency_matrix, classify_matrix,
    detect_hang, detect_noncomm_slow, downtime_breakdown, format_record, ledger_from_incidents,
    mad_flags, master_step, monte_carlo, parse_line, read_trace, replay, write_trace,
)
from c4sim.c4d.downtime import JUNE_MIX
from c4sim.c4d.records import SEQ_STRIDE
from c4sim.errors import LedgerError, TraceFormatError


def ring_matrix(n, base=1e-9, hot=()):
    """Ring latency matrix: cells (r, r+1) present, ``hot`` maps cell -> factor."""
    m = np.full((n, n), np.nan)
    for r in range(n):
        m[r, (r + 1) % n] = base
    for (i, j), f in dict(hot).items():
        m[i, j] = base * f
    return LatencyMatrix(tuple(range(n)), m, (0, 0))


def full_matrix(n, base=1e-9, hot=()):
    m = np.full((n, n), base)
    np.fill_diagonal(m, np.nan)
    for (i, j), f in dict(hot).items():
        m[i, j] = base * f
    return LatencyMatrix(tuple(range(n)), m, (0, 0))


# -- records --------------------------------------------------------------

def _records():
    return [
        CommRecord(0.0, 3, (0, 1, None), ("0/0", "1/0", "")),
        OpRecord(0.5, 1, 3, 2, "allreduce", "ring", 1024, 0.5),
        OpRecord(0.75, 1, 3, 2, "allreduce", "ring", 1024, 0.5, 0.75),
        TransportRecord(0.6, 1, 7, 0, 2 * SEQ_STRIDE + 4, 512, 0.1 + 0.2, 0.3, 0.6),
    ]


def test_trace_round_trip_exact():
    buf = io.StringIO()
    write_trace(_records(), buf, end_s=1.0 / 3)
    recs, end = read_trace(buf.getvalue().splitlines())
    assert recs == _records()
    assert end == 1.0 / 3


def test_seq_packing():
    t = _records()[3]
    assert (t.op_seq, t.index) == (2, 4)


def test_crashed_member_written_as_dash():
    line = format_record(_records()[0])
    assert line.split("\t")[-1] == "-"
    assert parse_line(line, 1) == _records()[0]


def test_bad_line_reports_line_number():
    with pytest.raises(TraceFormatError) as exc:
        read_trace(["# comment", "T\t1.0\tnot-a-rank"])
    assert exc.value.lineno == 2


# -- matrix and classification -------------------------------------------

def test_matrix_mean_delay_per_byte():
    recs = [TransportRecord(1.0, 0, 0, 1, 5, 100, 0.0, 0.0, 1.0),
            TransportRecord(2.0, 0, 1, 1, 6, 200, 0.0, 0.0, 1.0),
            TransportRecord(2.0, 1, 0, 0, 5, 100, 0.0, 0.0, 2.0)]
    m = build_latency_matrix(recs, (0, 0), [0, 1])
    assert m.values[0, 1] == pytest.approx((0.01 + 0.005) / 2)
    assert m.values[1, 0] == pytest.approx(0.02)
    assert math.isnan(m.values[0, 0])


def test_ring_has_only_neighbour_cells():
    m = ring_matrix(6)
    assert sorted(m.present()) == [(r, (r + 1) % 6) for r in range(6)]


def test_constant_matrix_healthy():
    assert classify_matrix(full_matrix(6)).healthy
    assert classify_matrix(ring_matrix(8)).healthy


def test_one_hot_cell_is_connection_slow():
    d = classify_matrix(full_matrix(6, hot={(2, 4): 4}))
    assert d.verdict == "connection_slow" and d.targets == ((2, 4),)


def test_hot_row_is_source_slow():
    d = classify_matrix(full_matrix(6, hot={(3, j): 3 for j in range(6) if j != 3}))
    assert d.verdict == "source_slow" and d.targets == (3,)


def test_hot_column_is_destination_slow():
    d = classify_matrix(full_matrix(6, hot={(i, 1): 3 for i in range(6) if i != 1}))
    assert d.verdict == "destination_slow" and d.targets == (1,)


def test_row_and_column_is_node_slow():
    hot = {(2, j): 3 for j in range(6) if j != 2}
    hot.update({(i, 2): 3 for i in range(6) if i != 2})
    d = classify_matrix(full_matrix(6, hot=hot))
    assert d.verdict == "node_slow" and d.targets == (2,)


def test_ring_single_cell_rows_are_not_rows():
    # a ring row has one present cell; a hot cell there stays a connection
    d = classify_matrix(ring_matrix(8, hot={(3, 4): 4}))
    assert d.verdict == "connection_slow" and d.targets == ((3, 4),)


def test_too_few_cells():
    with pytest.raises(ValueError):
        classify_matrix(ring_matrix(3))


def test_float_jitter_not_flagged():
    # MAD of exactly-equal values is 0; tiny noise must not become a verdict
    vals = np.array([1.0, 1.0, 1.0, 1.0 + 1e-12, 1.0])
    assert not mad_flags(vals).any()


@settings(max_examples=150, deadline=None)
@given(st.integers(4, 10), st.floats(1e-3, 1e3), st.integers(0, 2**31),
       st.sampled_from(["none", "cell", "row", "col"]))
def test_scale_invariance(n, c, seed, pattern):
    rng = np.random.default_rng(seed)
    i, j = rng.choice(n, 2, replace=False)
    f = float(rng.uniform(1.5, 6))
    hot = {"none": {}, "cell": {(i, j): f},
           "row": {(i, k): f for k in range(n) if k != i},
           "col": {(k, j): f for k in range(n) if k != j}}[pattern]
    m = full_matrix(n, base=float(rng.uniform(1e-10, 1e-8)), hot=hot)
    m.values[~np.isnan(m.values)] *= rng.uniform(0.99, 1.01, np.count_nonzero(~np.isnan(m.values)))
    a, b = classify_matrix(m), classify_matrix(m.scaled(c))
    assert (a.verdict, a.targets) == (b.verdict, b.targets)


# -- non-communication slowness and hangs -------------------------------------

def _ring_op(n, entries, delay=1.0, nbytes=100):
    """First-step transport records of a ring where rank r enters at entries[r]."""
    out = []
    for r in range(n):
        d = (r + 1) % n
        post = max(entries[r], entries[d])
        out.append(TransportRecord(post + delay, r, 0, d, 0, nbytes, post, entries[d],
                                   post + delay))
    return out


def test_late_entrant_is_noncomm_slow():
    recs = _ring_op(6, [0, 0, 0, 0, 0, 5.0])
    d = detect_noncomm_slow(recs, (0, 0), range(6))
    assert d.verdict == "noncomm_slow" and d.targets == (5,)


def test_prompt_ring_healthy():
    assert detect_noncomm_slow(_ring_op(6, [0] * 6), (0, 0), range(6)).healthy


def test_missing_ready_is_unsupported():
    recs = _ring_op(4, [0] * 4)
    recs[0] = TransportRecord(1, 0, 0, 1, 0, 100, 0, float("nan"), 1)
    with pytest.raises(TraceFormatError):
        detect_noncomm_slow(recs, (0, 0), range(4))


def _ops(k, starts, ends=None):
    ends = ends or {}
    return [OpRecord(s, r, 0, k, "allreduce", "ring", 1, s, ends.get(r)) for r, s in starts.items()]


def test_hang_missing_rank():
    ops = _ops(17, {0: 1.0, 1: 1.0, 3: 1.0})
    d = detect_hang(ops, 10.0, 2.0, [0, 1, 2, 3])
    assert d.verdict == "noncomm_hang" and d.targets == (2,) and d.window == 17


def test_hang_not_before_timeout():
    ops = _ops(17, {0: 1.0, 1: 1.0, 3: 1.0})
    assert detect_hang(ops, 2.5, 2.0, [0, 1, 2, 3]).healthy


def test_comm_hang_picks_fewest_sends():
    ops = _ops(3, {r: 1.0 for r in range(5)})
    sent = [TransportRecord(2, r, 0, (r + 1) % 5, 3 * SEQ_STRIDE + i, 1, 1, 1, 2)
            for r in range(5) for i in range(3 if r != 4 else 1)]
    d = detect_hang(ops, 10.0, 2.0, list(range(5)), sent)
    assert d.verdict == "comm_hang" and d.targets == (4,)


def test_dead_rank_is_crash():
    d = detect_hang(_ops(3, {0: 1.0}), 1.0, 2.0, [0, 1], dead=[1])
    assert d.verdict == "crash" and d.targets == (1,)


# -- monitor ------------------------------------------------------------------

def _iteration(k, t0, n=4, dur=1.0, skip=()):
    recs = []
    for r in range(n):
        if r in skip:
            continue
        recs.append(OpRecord(t0, r, 0, k, "allreduce", "ring", 1, t0))
        recs.append(OpRecord(t0 + dur, r, 0, k, "allreduce", "ring", 1, t0, t0 + dur))
    return recs


def test_monitor_detects_noncomm_hang_after_timeout():
    recs = [CommRecord(0.0, 0, (0, 1, 2, 3))]
    for k in range(3):
        recs += _iteration(k, 2.0 * k)
    recs += [r for r in _iteration(3, 6.0, skip={2}) if r.end is None]
    diags = replay(recs, end_s=20.0)
    bad = [d for d in diags if not d.healthy]
    assert len(bad) == 1
    d = bad[0]
    assert d.verdict == "noncomm_hang" and d.targets == (2,) and d.window == 3
    # timeout = 3 x median gap between op ends (2.0) from the op's first start
    assert d.time_s == pytest.approx(6.0 + 6.0)


def test_monitor_crash_from_membership():
    recs = [CommRecord(0.0, 0, (0, 1, 2, 3))]
    recs += _iteration(0, 0.0)
    recs.append(CommRecord(1.5, 0, (0, None, 2, 3)))
    d = [d for d in replay(recs, 5.0) if not d.healthy]
    assert [(x.verdict, x.targets, x.time_s) for x in d] == [("crash", (1,), 1.5)]


def test_restart_voids_open_ops():
    recs = [CommRecord(0.0, 0, (0, 1, 2, 3))]
    for k in range(3):
        recs += _iteration(k, 2.0 * k)
    recs += [r for r in _iteration(3, 6.0, skip={2}) if r.end is None]
    recs.append(CommRecord(7.0, 0, (0, 1, 2, 3)))
    assert all(d.healthy for d in replay(recs, 30.0))


def test_record_queue_purge_and_order():
    q = RecordQueue()
    q.push(OpRecord(2.0, 1, 0, 0, "a", "r", 1, 2.0), "x")
    q.push(OpRecord(1.0, 5, 0, 0, "a", "r", 1, 1.0), "y")
    q.push(OpRecord(1.0, 2, 0, 0, "a", "r", 1, 1.0), "x")
    assert q.peek().rank == 2
    assert q.purge("x") == 2
    assert q.pop().rank == 5 and len(q) == 0


def test_pump_stops_at_each_verdict():
    recs = [CommRecord(0.0, 0, (0, 1, 2, 3))] + _iteration(0, 0.0) + _iteration(1, 2.0)
    mon, q = Monitor(), RecordQueue(recs)
    first = mon.pump(q, 10.0)
    assert [d.window for d in first] == [0]
    assert [d.window for d in mon.pump(q, 10.0)] == [1]
    assert mon.pump(q, 10.0) == []


# -- master --------------------------------------------------------------------

def _cluster(pool):
    return ClusterState(placement={0: 9, 1: 9, 2: 4, 3: 5}, job_of={g: 0 for g in range(4)},
                        backup_pool=list(pool))


def test_crash_isolates_and_restarts():
    st = _cluster([12])
    acts = master_step([Diagnosis("crash", (0,))], st)
    assert [(a.kind, a.node, a.replacement) for a in acts] == [("isolate", 9, 12),
                                                                ("restart", None, None)]
    assert st.placement[0] == st.placement[1] == 12 and st.isolated == {9}


def test_healthy_is_no_action():
    assert [a.kind for a in master_step([Diagnosis("healthy")], _cluster([1]))] == ["none"]


def test_same_node_twice_isolated_once():
    st = _cluster([12, 13])
    acts = master_step([Diagnosis("crash", (0,)), Diagnosis("comm_hang", (1,))], st)
    assert [a.kind for a in acts].count("isolate") == 1
    assert st.backup_pool == [13]


def test_empty_pool_holds_job():
    acts = master_step([Diagnosis("noncomm_slow", (2,))], _cluster([]))
    assert [a.kind for a in acts] == ["hold"]


def test_connection_slow_only_logged():
    st = _cluster([12])
    acts = master_step([Diagnosis("connection_slow", ((0, 2),))], st)
    assert [a.kind for a in acts] == ["log"] and not st.isolated


# -- downtime ------------------------------------------------------------------

def test_no_incidents_all_zero():
    led = ledger_from_incidents([], 100.0)
    assert led.total == 0 and all(v == 0 for _, v in led.rows())


def test_incident_chain_enforced():
    with pytest.raises(LedgerError):
        Incident("cuda", t_error=5, t_detect=4, t_isolated=6, t_restart_done=7,
                 t_last_checkpoint=0)


def test_ledger_sums_components():
    incs = [Incident("cuda", 2, 3, 5, 6, 1), Incident("ecc", 10, 10.5, 11, 13, 8)]
    led = ledger_from_incidents(incs, 100.0)
    assert led.fractions == pytest.approx({"post_checkpoint": 0.03, "detection": 0.015,
                                           "diagnosis_isolation": 0.025,
                                           "re_initialization": 0.03})
    assert led.total == pytest.approx(sum(sum(i.components().values()) for i in incs) / 100)


def test_orphan_lifecycle_events():
    ev = [LifecycleEvent(1, "error", 1.0, "cuda"), LifecycleEvent(1, "detect", 2.0)]
    with pytest.raises(LedgerError) as exc:
        downtime_breakdown(ev, 10.0)
    assert exc.value.orphans == [1]


def test_breakdown_from_events():
    ev = [LifecycleEvent(0, p, t, "cuda") for p, t in
          [("last_checkpoint", 0), ("error", 1), ("detect", 2), ("isolated", 4),
           ("restart_done", 5)]]
    assert downtime_breakdown(ev, 10.0).total == pytest.approx(0.5)


def _regime(**kw):
    base = dict(incidents_per_month=40, checkpoint_interval_h=2.0, detection_h=0.5,
                reinit_h=0.1, diagnosis_h={c: 3.0 for c in JUNE_MIX}, class_mix=JUNE_MIX)
    base.update(kw)
    return DowntimeRegime(**base)


def test_closed_form():
    ex = _regime().expected_fractions()
    r = 40 / 720
    assert ex["post_checkpoint"] == pytest.approx(r * 1.0)
    assert ex["diagnosis_isolation"] == pytest.approx(r * 3.0)


def test_monte_carlo_matches_closed_form():
    reg = _regime()
    mc = monte_carlo(reg, 2000, np.random.default_rng(5))
    ex = reg.expected_fractions()
    assert mc["total"] == pytest.approx(sum(ex.values()), rel=0.02)
