"""Pure detectors over windows of monitoring records."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..errors import TraceFormatError
from .records import OpRecord, TransportRecord

MAD_SCALE = 1.4826
DEFAULT_K_MAD = 5.0
DEFAULT_RHO = 0.8
# flagged values must also exceed the median by this fraction, so that
# floating-point jitter around a zero MAD never counts as an anomaly
DEFAULT_REL_FLOOR = 0.1

VERDICTS = ("healthy", "connection_slow", "source_slow", "destination_slow", "node_slow",
            "noncomm_slow", "comm_hang", "noncomm_hang", "crash")


@dataclass(frozen=True)
class Diagnosis:
    verdict: str
    targets: tuple = ()
    evidence: tuple[tuple[int, int], ...] = ()
    window: int = -1
    comm: int = 0
    time_s: float = 0.0

    @property
    def healthy(self) -> bool:
        return self.verdict == "healthy"

    def targets_text(self) -> str:
        if not self.targets:
            return "-"
        if self.verdict == "connection_slow":
            return ";".join(f"{i}>{j}" for i, j in self.targets)
        return ";".join(str(t) for t in self.targets)

    def evidence_text(self) -> str:
        return ";".join(f"{i}>{j}" for i, j in self.evidence) or "-"

    def line(self) -> str:
        return f"D {self.window} {self.verdict} {self.targets_text()} {self.evidence_text()}"


@dataclass
class LatencyMatrix:
    ranks: tuple[int, ...]
    values: np.ndarray  # seconds per byte, NaN where no traffic
    window: tuple[int, int] = (0, 0)

    @property
    def n(self) -> int:
        return len(self.ranks)

    def present(self) -> list[tuple[int, int]]:
        ii, jj = np.nonzero(~np.isnan(self.values))
        return list(zip(ii.tolist(), jj.tolist()))

    def scaled(self, c: float) -> "LatencyMatrix":
        return LatencyMatrix(self.ranks, self.values * c, self.window)


def mad_flags(values: np.ndarray, k_mad: float = DEFAULT_K_MAD,
              rel_floor: float = DEFAULT_REL_FLOOR) -> np.ndarray:
    """True where a value is high by the median/MAD rule."""
    med = float(np.median(values))
    mad = float(np.median(np.abs(values - med)))
    thresh = max(med + k_mad * MAD_SCALE * mad, med * (1.0 + rel_floor))
    return values > thresh


def build_latency_matrix(records: Iterable[TransportRecord], window: tuple[int, int],
                         ranks: Sequence[int] | None = None) -> LatencyMatrix:
    """Mean per-byte delay per (source, destination) over ops ``window[0]..window[1]``."""
    lo, hi = window
    sums: dict[tuple[int, int], float] = defaultdict(float)
    counts: dict[tuple[int, int], int] = defaultdict(int)
    seen = set()
    for r in records:
        if not lo <= r.op_seq <= hi or r.bytes <= 0:
            continue
        sums[(r.rank, r.peer)] += (r.complete - r.post) / r.bytes
        counts[(r.rank, r.peer)] += 1
        seen.update((r.rank, r.peer))
    order = tuple(ranks) if ranks is not None else tuple(sorted(seen))
    pos = {g: i for i, g in enumerate(order)}
    m = np.full((len(order), len(order)), np.nan)
    for (a, b), s in sums.items():
        if a in pos and b in pos and a != b:
            m[pos[a], pos[b]] = s / counts[(a, b)]
    return LatencyMatrix(order, m, (lo, hi))


def classify_matrix(m: LatencyMatrix, k_mad: float = DEFAULT_K_MAD, rho: float = DEFAULT_RHO,
                    rel_floor: float = DEFAULT_REL_FLOOR) -> Diagnosis:
    """Single cell -> connection, row -> source, column -> destination.

    A rank that is hot both as a row and as a column is reported as
    ``node_slow``.  Rows and columns need at least two present cells to be
    told apart from a single connection.
    """
    cells = m.present()
    if len(cells) < 4:
        raise ValueError(f"need at least 4 present cells, got {len(cells)}")
    vals = np.array([m.values[c] for c in cells])
    flags = mad_flags(vals, k_mad, rel_floor)
    flagged = [c for c, f in zip(cells, flags) if f]
    if not flagged:
        return Diagnosis("healthy", window=m.window[1])

    def hot(axis: int) -> list[int]:
        out = []
        for k in range(m.n):
            line = [c for c in cells if c[axis] == k]
            hits = sum(1 for c in flagged if c[axis] == k)
            if len(line) >= 2 and hits >= rho * len(line):
                out.append(k)
        return out

    rows, cols = hot(0), hot(1)
    both = sorted(set(rows) & set(cols))
    ev = tuple((m.ranks[i], m.ranks[j]) for i, j in flagged)
    if both:
        return Diagnosis("node_slow", tuple(m.ranks[k] for k in both), ev, m.window[1])
    if rows:
        return Diagnosis("source_slow", tuple(m.ranks[k] for k in rows), ev, m.window[1])
    if cols:
        return Diagnosis("destination_slow", tuple(m.ranks[k] for k in cols), ev, m.window[1])
    return Diagnosis("connection_slow", ev, ev, m.window[1])


def first_message_lags(records: Iterable[TransportRecord], window: tuple[int, int]
                       ) -> dict[tuple[int, int, int], float]:
    """Sender lag (complete - receiver ready) of the first message per op and pair.

    Later messages inherit any upstream bubble, so only the first message
    of each op isolates the sender's own promptness.
    """
    lo, hi = window
    first: dict[tuple[int, int, int], TransportRecord] = {}
    for r in records:
        if not lo <= r.op_seq <= hi:
            continue
        if r.ready != r.ready:  # NaN
            raise TraceFormatError(0, "transport record without receiver_ready")
        key = (r.op_seq, r.rank, r.peer)
        cur = first.get(key)
        if cur is None or (r.index, r.qp) < (cur.index, cur.qp):
            first[key] = r
    return {k: r.complete - r.ready for k, r in first.items()}


def detect_noncomm_slow(records: Sequence[TransportRecord], window: tuple[int, int],
                        ranks: Sequence[int] | None = None, k_mad: float = DEFAULT_K_MAD,
                        rel_floor: float = DEFAULT_REL_FLOOR,
                        matrix: Diagnosis | None = None) -> Diagnosis:
    """Ranks that answer their receivers' readiness late while receiving normally."""
    lags = first_message_lags(records, window)
    out_l: dict[int, list[float]] = defaultdict(list)
    in_l: dict[int, list[float]] = defaultdict(list)
    for (_, src, dst), lag in lags.items():
        out_l[src].append(lag)
        in_l[dst].append(lag)
    order = list(ranks) if ranks is not None else sorted(set(out_l) | set(in_l))
    order = [g for g in order if g in out_l and g in in_l]
    if len(order) < 3:
        return Diagnosis("healthy", window=window[1])
    outs = np.array([np.mean(out_l[g]) for g in order])
    ins = np.array([np.mean(in_l[g]) for g in order])
    hot_out = mad_flags(outs, k_mad, rel_floor)
    hot_in = mad_flags(ins, k_mad, rel_floor)
    if matrix is None:
        matrix = classify_matrix(build_latency_matrix(records, window, order), k_mad,
                                 rel_floor=rel_floor)
    slow = tuple(g for g, o, i in zip(order, hot_out, hot_in) if o and not i)
    if slow and matrix.healthy:
        return Diagnosis("noncomm_slow", slow, (), window[1])
    return Diagnosis("healthy", window=window[1])


def detect_hang(op_records: Iterable[OpRecord], now_s: float, timeout_s: float,
                members: Sequence[int], transport: Iterable[TransportRecord] = (),
                dead: Iterable[int] = ()) -> Diagnosis:
    """Hang and crash verdicts for the newest operation of one communicator."""
    if timeout_s <= 0:
        raise ValueError("timeout_s must be > 0")
    dead = sorted(set(dead))
    ops = [r for r in op_records]
    pending = max((r.op_seq for r in ops), default=None)
    if dead:
        return Diagnosis("crash", tuple(dead), (), -1 if pending is None else pending)
    if pending is None:
        return Diagnosis("healthy")
    starts = {r.rank: r.start for r in ops if r.op_seq == pending}
    ended = {r.rank for r in ops if r.op_seq == pending and r.end is not None}
    if all(g in ended for g in members):
        return Diagnosis("healthy", window=pending)
    if now_s < min(starts.values()) + timeout_s:
        return Diagnosis("healthy", window=pending)
    missing = tuple(g for g in members if g not in starts)
    if missing:
        return Diagnosis("noncomm_hang", missing, (), pending)
    sent = {g: 0 for g in members}
    for t in transport:
        if t.op_seq == pending and t.rank in sent:
            sent[t.rank] += 1
    stalled = min(members, key=lambda g: (sent[g], g))
    return Diagnosis("comm_hang", (stalled,), (), pending)
