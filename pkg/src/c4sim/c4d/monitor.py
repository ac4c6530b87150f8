"""Streaming master-side analysis of the record queue.

The monitor is a deterministic function of the ordered record stream: its
only timers are hang deadlines derived from the records themselves, so
replaying a saved trace reproduces the online verdicts exactly.
"""

from __future__ import annotations

import heapq
import itertools
import statistics
from dataclasses import dataclass, field
from typing import Iterable

from .detect import (
    DEFAULT_K_MAD, DEFAULT_REL_FLOOR, DEFAULT_RHO, Diagnosis, build_latency_matrix,
    classify_matrix, detect_hang, detect_noncomm_slow,
)
from .records import CommRecord, OpRecord, Record, TransportRecord


@dataclass
class MonitorParams:
    k_mad: float = DEFAULT_K_MAD
    rho: float = DEFAULT_RHO
    rel_floor: float = DEFAULT_REL_FLOOR
    hang_factor: float = 3.0  # timeout = factor x trailing median iteration time
    history: int = 5


class RecordQueue:
    """Records ordered by (timestamp, rank); ties keep insertion order."""

    def __init__(self, records: Iterable[Record] = (), keep_order: bool = False):
        self._heap: list = []
        self._n = itertools.count()
        # keep_order: same-timestamp records stay in arrival order, as in a
        # trace written by a run (its lines are in consumption order)
        self.keep_order = keep_order
        for r in records:
            self.push(r)

    def push(self, rec: Record, tag=None) -> None:
        key = (rec.ts,) if self.keep_order else rec.order_key()
        heapq.heappush(self._heap, (key, next(self._n), rec, tag))

    def peek(self) -> Record | None:
        return self._heap[0][2] if self._heap else None

    def pop(self) -> Record:
        _, _, rec, tag = heapq.heappop(self._heap)
        self.on_pop(rec, tag)
        return rec

    def on_pop(self, rec: Record, tag) -> None:
        """Hook for subclasses that log what the consumer has seen."""

    def purge(self, tag=None, where=None) -> int:
        """Drop queued records tagged ``tag`` (or whose tag satisfies ``where``)."""
        before = len(self._heap)
        drop = where if where is not None else (lambda t: t == tag)
        self._heap = [e for e in self._heap if not drop(e[3])]
        heapq.heapify(self._heap)
        return before - len(self._heap)

    def last_ts(self) -> float | None:
        return max((e[2].ts for e in self._heap), default=None)

    def __len__(self) -> int:
        return len(self._heap)


@dataclass
class _Comm:
    members: tuple
    ops: dict = field(default_factory=dict)        # op_seq -> list[OpRecord]
    transport: dict = field(default_factory=dict)  # op_seq -> list[TransportRecord]
    ends: list = field(default_factory=list)       # close time per closed op
    closed: set = field(default_factory=set)
    judged: set = field(default_factory=set)
    dead: set = field(default_factory=set)
    crash_at: float | None = None


class Monitor:
    def __init__(self, params: MonitorParams | None = None):
        self.params = params or MonitorParams()
        self.comms: dict[int, _Comm] = {}
        self.rank_comm: dict[int, int] = {}
        self.diagnoses: list[Diagnosis] = []

    # -- ingest ---------------------------------------------------------
    def feed(self, rec: Record) -> list[Diagnosis]:
        if isinstance(rec, CommRecord):
            self._on_comm(rec)
            return []
        comm_id = self.rank_comm.get(rec.rank)
        if comm_id is None:
            return []
        c = self.comms[comm_id]
        if isinstance(rec, TransportRecord):
            if rec.op_seq not in c.judged:
                c.transport.setdefault(rec.op_seq, []).append(rec)
            return []
        c.ops.setdefault(rec.op_seq, []).append(rec)
        if rec.end is None or rec.op_seq in c.judged:
            return []
        ended = {r.rank for r in c.ops[rec.op_seq] if r.end is not None}
        if all(g in ended for g in c.members if g is not None):
            return self._close(comm_id, c, rec.op_seq, rec.ts)
        return []

    def _on_comm(self, rec: CommRecord) -> None:
        old = self.comms.get(rec.comm)
        for g in rec.members:
            if g is not None:
                self.rank_comm[g] = rec.comm
        if old is None:
            self.comms[rec.comm] = _Comm(rec.members)
            return
        newly_dead = {g for g, h in zip(old.members, rec.members) if h is None and g is not None}
        if newly_dead:
            old.dead |= newly_dead
            old.members = tuple(g if h is None else h for g, h in zip(old.members, rec.members))
            if old.crash_at is None:
                old.crash_at = rec.ts
            return
        # a fully populated membership after a failure is a restart: every
        # operation still open belongs to the aborted incarnation
        old.members = rec.members
        old.dead.clear()
        old.crash_at = None
        for k in list(old.ops):
            if k not in old.closed:
                old.judged.add(k)
        old.transport.clear()

    def _close(self, comm_id: int, c: _Comm, k: int, ts: float) -> list[Diagnosis]:
        c.closed.add(k)
        c.judged.add(k)
        c.ends.append(ts)
        recs = c.transport.pop(k, [])
        order = [g for g in c.members if g is not None]
        p = self.params
        m = build_latency_matrix(recs, (k, k), order)
        if len(m.present()) >= 4:
            d = classify_matrix(m, p.k_mad, p.rho, p.rel_floor)
            if d.healthy:
                d = detect_noncomm_slow(recs, (k, k), order, p.k_mad, p.rel_floor, matrix=d)
        else:
            d = Diagnosis("healthy")
        d = Diagnosis(d.verdict, d.targets, d.evidence, k, comm_id, ts)
        self.diagnoses.append(d)
        for old in [j for j in c.ops if j < k]:
            c.ops.pop(old, None)
        return [d]

    # -- timers ---------------------------------------------------------
    def _timeout(self, c: _Comm) -> float | None:
        if len(c.ends) < 2:
            return None
        gaps = [b - a for a, b in zip(c.ends, c.ends[1:])][-self.params.history:]
        return self.params.hang_factor * statistics.median(gaps)

    def _pending(self, c: _Comm) -> int | None:
        open_ops = [k for k in c.ops if k not in c.judged]
        return max(open_ops) if open_ops else None

    def _deadline_of(self, c: _Comm) -> float | None:
        if c.dead:
            return c.crash_at
        k = self._pending(c)
        t = self._timeout(c)
        if k is None or t is None:
            return None
        return min(r.start for r in c.ops[k]) + t

    def deadline(self) -> float | None:
        ds = [d for d in (self._deadline_of(c) for c in self.comms.values()) if d is not None]
        return min(ds) if ds else None

    def tick(self, now: float) -> list[Diagnosis]:
        out = []
        for comm_id in sorted(self.comms):
            c = self.comms[comm_id]
            d = self._deadline_of(c)
            if d is None or d > now:
                continue
            k = self._pending(c)
            if c.dead:
                window = k if k is not None else (max(c.closed) + 1 if c.closed else 0)
                diag = Diagnosis("crash", tuple(sorted(c.dead)), (), window, comm_id, now)
                c.crash_at = None
                c.dead.clear()
                # the incarnation is gone: nothing still open can finish
                c.judged.update(j for j in c.ops if j not in c.closed)
                c.judged.add(window)
            else:
                members = [g for g in c.members if g is not None]
                diag = detect_hang(c.ops[k], now, self._timeout(c), members,
                                   c.transport.get(k, ()))
                c.judged.add(k)
                if diag.healthy:
                    continue
                diag = Diagnosis(diag.verdict, diag.targets, diag.evidence, k, comm_id, now)
            self.diagnoses.append(diag)
            out.append(diag)
        return out

    # -- driving ----------------------------------------------------------
    def pump(self, queue: RecordQueue, until: float) -> list[Diagnosis]:
        """Consume records and timers up to ``until``.

        Returns as soon as any diagnosis is produced so the caller can act
        at that instant; call again to continue.
        """
        while True:
            d = self.deadline()
            nxt = queue.peek()
            # a timer due at t fires before records stamped t: anything the
            # master does about its verdict is stamped with that same t
            if nxt is not None and nxt.ts <= until and (d is None or nxt.ts < d):
                out = self.feed(queue.pop())
            elif d is not None and d <= until:
                out = self.tick(d)
            else:
                return []
            if out:
                return out


def replay(records: Iterable[Record], end_s: float | None = None,
           params: MonitorParams | None = None, keep_order: bool = False) -> list[Diagnosis]:
    """Offline analysis of a recorded trace.

    With ``keep_order`` records sharing a timestamp are fed in the given
    order rather than re-sorted by rank, which reproduces the online run
    that wrote the trace.
    """
    return replay_monitor(records, end_s, params, keep_order).diagnoses


def replay_monitor(records: Iterable[Record], end_s: float | None = None,
                   params: MonitorParams | None = None, keep_order: bool = False) -> Monitor:
    records = list(records)
    mon = Monitor(params)
    q = RecordQueue(records, keep_order)
    if end_s is None:
        end_s = max((r.ts for r in records), default=0.0)
    while mon.pump(q, end_s):
        pass
    return mon
