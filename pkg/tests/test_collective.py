import pytest
from hypothesis import given, strategies as st

from c4sim.collective import (
    Communicator, CollectiveOp, TransferSchedule, busbw, busbw_factor, algbw, chunk_split,
    ring_allreduce_schedule, split_to_qps,
)
from c4sim.errors import ScheduleError


def replay_symbolic(sched: TransferSchedule):
    """Run the schedule on per-rank symbolic data.

    Each rank starts with {chunk: {own rank}}; reduce-scatter steps union the
    received contribution set into the receiver's chunk, allgather steps
    overwrite it.  A correct allreduce leaves every rank holding every chunk
    with contributions from all ranks.
    """
    n = sched.n
    data = [{c: frozenset([r]) for c in range(n)} for r in range(n)]
    for s, step in enumerate(sched.steps):
        sent = [(t.receiver, t.chunk, data[t.sender][t.chunk]) for t in step]
        for recv, chunk, contrib in sent:
            if s < n - 1:
                data[recv][chunk] = data[recv][chunk] | contrib
            else:
                data[recv][chunk] = contrib
    return data


@pytest.mark.parametrize("n", range(2, 17))
def test_ring_schedule_reduces_correctly(n):
    sched = ring_allreduce_schedule(n, 1000 * n + 7)
    assert len(sched.steps) == 2 * (n - 1)
    everyone = frozenset(range(n))
    for rank_data in replay_symbolic(sched):
        assert all(rank_data[c] == everyone for c in range(n))


@pytest.mark.parametrize("n", range(2, 17))
def test_each_rank_sends_and_receives_once_per_step(n):
    sched = ring_allreduce_schedule(n, 4096)
    for step in sched.steps:
        assert sorted(t.sender for t in step) == list(range(n))
        assert sorted(t.receiver for t in step) == list(range(n))


def test_two_ranks():
    sched = ring_allreduce_schedule(2, 1024)
    assert len(sched.steps) == 2
    assert all(t.bytes == 512 for step in sched.steps for t in step)


def test_four_rank_first_step():
    sched = ring_allreduce_schedule(4, 4096)
    assert [(t.sender, t.chunk) for t in sched.steps[0]] == [(0, 0), (1, 1), (2, 2), (3, 3)]


def test_uneven_bytes_conserved():
    sizes = chunk_split(16 * 1000 + 5, 16)
    assert sum(sizes) == 16 * 1000 + 5
    assert sizes[-1] < sizes[0]


def test_too_few_ranks():
    with pytest.raises(ScheduleError):
        ring_allreduce_schedule(1, 100)


@given(st.integers(2, 16), st.integers(0, 10**7))
def test_per_step_bytes_equal_up_to_one(n, extra):
    sched = ring_allreduce_schedule(n, n + extra)
    for step in sched.steps:
        b = [t.bytes for t in step]
        assert max(b) - min(b) <= 1


def test_schedule_line_round_trip():
    sched = ring_allreduce_schedule(5, 12345)
    text = sched.to_lines()
    assert text.splitlines()[0] == "step 0 send 0→1 chunk 0 bytes 2469"
    again = TransferSchedule.from_lines(text)
    assert again.to_lines() == text


def test_bad_schedule_line():
    with pytest.raises(ScheduleError):
        TransferSchedule.from_lines("step x send 0→1\n")


def test_static_round_robin():
    qps = split_to_qps(8, 4)
    assert [[i for i, q in enumerate(qps) if q == k] for k in range(4)] == [
        [0, 4], [1, 5], [2, 6], [3, 7]]
    assert split_to_qps(5, 1) == [0] * 5


def test_dynamic_follows_shortest_queue():
    assert split_to_qps(1, 3, "dynamic", [3, 1, 2])[0] == 1


def test_dynamic_fills_evenly():
    qps = split_to_qps(12, 3, "dynamic")
    assert [qps.count(k) for k in range(3)] == [4, 4, 4]


def test_no_qp_is_schedule_error():
    with pytest.raises(ScheduleError):
        split_to_qps(3, 0)


def test_busbw_factor():
    assert busbw(1e9, 1.0, 2) == algbw(1e9, 1.0)
    vals = [busbw_factor(n) for n in range(2, 200)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    assert all(v < 2 for v in vals)


def test_busbw_near_peak():
    n = 128
    total = 1 << 30
    t = total * 8 * busbw_factor(n) / 360e9
    assert busbw(total, t, n) == pytest.approx(360.0)


def test_busbw_rejects_nonpositive_time():
    with pytest.raises(ValueError):
        busbw(100, 0.0, 4)


def test_communicator_validation():
    with pytest.raises(ScheduleError):
        Communicator(0, ((0, 0), (0, 0)))
    with pytest.raises(ScheduleError):
        Communicator(0, ((0, 0), (1, 0)), qps_per_channel=0)


def test_ring_strides_coprime():
    comm = Communicator(0, tuple((i, 0) for i in range(8)), channels=4)
    assert comm.ring_strides() == [1, 3, 5, 7]
    for pairs in comm.ring_pairs():
        assert sorted(a for a, _ in pairs) == list(range(8))
        assert sorted(b for _, b in pairs) == list(range(8))


def test_op_chunks():
    op = CollectiveOp(0, element_count=5 * 1024 * 1024, element_bytes=2, chunk_bytes=4 << 20)
    assert op.chunk_sizes() == [4 << 20, 4 << 20, 2 << 20]
    assert sum(op.chunk_sizes()) == op.total_bytes
