"""Three-layer monitoring records and the line-oriented trace format.

Trace lines are tab separated::

    C  ts comm nranks member...            member = grank@node/gpu or "-"
    O  ts rank comm opseq kind algo count start end   (end "-" while running)
    T  ts rank qp peer seq bytes post ready complete

Ranks in O and T lines are cluster-global rank ids; the C line lists the
global ranks of a communicator in ring order.  A transport ``seq`` packs
the operation sequence number and the message index within the op:
``seq = op_seq * SEQ_STRIDE + index``.  Comment lines start with ``#``;
``# end_s <t>`` records the time the producing run stopped so offline
replay evaluates hang timeouts up to the same instant.

Floats are written with ``repr`` so a parse round-trip is exact.  A run
writes records in the order its monitor consumed them, so replaying the
file in that order reproduces the run's verdicts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, TextIO, Union

from ..errors import TraceFormatError

SEQ_STRIDE = 1 << 16


@dataclass(frozen=True)
class CommRecord:
    ts: float
    comm: int
    members: tuple[int | None, ...]  # global rank per comm position, None if gone
    placement: tuple[str, ...] = ()  # "node/gpu" per position, informational

    layer = "communicator"

    @property
    def rank_count(self) -> int:
        return len(self.members)

    def order_key(self):
        return (self.ts, -1, 0)


@dataclass(frozen=True)
class OpRecord:
    ts: float
    rank: int
    comm: int
    op_seq: int
    kind: str
    algo: str
    count: int
    start: float
    end: float | None = None

    layer = "operation"

    def order_key(self):
        return (self.ts, self.rank, 1)


@dataclass(frozen=True)
class TransportRecord:
    ts: float
    rank: int
    qp: int
    peer: int
    seq: int
    bytes: int
    post: float
    ready: float
    complete: float

    layer = "transport"

    @property
    def op_seq(self) -> int:
        return self.seq // SEQ_STRIDE

    @property
    def index(self) -> int:
        return self.seq % SEQ_STRIDE

    def order_key(self):
        return (self.ts, self.rank, 2)


Record = Union[CommRecord, OpRecord, TransportRecord]


def _f(x: float | None) -> str:
    return "-" if x is None else repr(float(x))


def format_record(rec: Record) -> str:
    if isinstance(rec, TransportRecord):
        fields = ["T", _f(rec.ts), rec.rank, rec.qp, rec.peer, rec.seq, rec.bytes,
                  _f(rec.post), _f(rec.ready), _f(rec.complete)]
    elif isinstance(rec, OpRecord):
        fields = ["O", _f(rec.ts), rec.rank, rec.comm, rec.op_seq, rec.kind, rec.algo,
                  rec.count, _f(rec.start), _f(rec.end)]
    else:
        members = []
        for i, g in enumerate(rec.members):
            if g is None:
                members.append("-")
            else:
                where = rec.placement[i] if i < len(rec.placement) else ""
                members.append(f"{g}@{where}" if where else str(g))
        fields = ["C", _f(rec.ts), rec.comm, rec.rank_count, *members]
    return "\t".join(str(x) for x in fields)


def _num(tok: str, lineno: int, kind=float):
    try:
        return kind(tok)
    except ValueError:
        raise TraceFormatError(lineno, f"bad number {tok!r}") from None


def parse_line(line: str, lineno: int = 0) -> Record:
    tok = line.rstrip("\n").split("\t")
    tag = tok[0]
    try:
        if tag == "T":
            if len(tok) != 10:
                raise TraceFormatError(lineno, f"T record needs 10 fields, got {len(tok)}")
            return TransportRecord(_num(tok[1], lineno), *(_num(t, lineno, int) for t in tok[2:7]),
                                   *(_num(t, lineno) for t in tok[7:10]))
        if tag == "O":
            if len(tok) != 10:
                raise TraceFormatError(lineno, f"O record needs 10 fields, got {len(tok)}")
            end = None if tok[9] == "-" else _num(tok[9], lineno)
            return OpRecord(_num(tok[1], lineno), _num(tok[2], lineno, int),
                            _num(tok[3], lineno, int), _num(tok[4], lineno, int), tok[5], tok[6],
                            _num(tok[7], lineno, int), _num(tok[8], lineno), end)
        if tag == "C":
            if len(tok) < 4:
                raise TraceFormatError(lineno, "C record too short")
            n = _num(tok[3], lineno, int)
            if len(tok) != 4 + n:
                raise TraceFormatError(lineno, f"C record lists {len(tok) - 4} members, expected {n}")
            members, placement = [], []
            for m in tok[4:]:
                if m == "-":
                    members.append(None)
                    placement.append("")
                else:
                    g, _, where = m.partition("@")
                    members.append(_num(g, lineno, int))
                    placement.append(where)
            return CommRecord(_num(tok[1], lineno), _num(tok[2], lineno, int),
                              tuple(members), tuple(placement))
    except TraceFormatError:
        raise
    except (TypeError, ValueError) as exc:
        raise TraceFormatError(lineno, str(exc)) from None
    raise TraceFormatError(lineno, f"unknown record tag {tag!r}")


def write_trace(records: Iterable[Record], out: TextIO, end_s: float | None = None) -> None:
    for rec in records:
        out.write(format_record(rec) + "\n")
    if end_s is not None:
        out.write(f"# end_s {_f(end_s)}\n")


def read_trace(lines: Iterable[str]) -> tuple[list[Record], float | None]:
    """Parse a trace; returns the records and the ``end_s`` marker if present."""
    records: list[Record] = []
    end_s = None
    for lineno, line in enumerate(lines, 1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            parts = s[1:].split()
            if len(parts) == 2 and parts[0] == "end_s":
                end_s = _num(parts[1], lineno)
            continue
        records.append(parse_line(line, lineno))
    return records, end_s


def iter_sorted(records: Iterable[Record]) -> Iterator[Record]:
    """Total (timestamp, rank) order used by the master's ingest queue."""
    return iter(sorted(records, key=lambda r: r.order_key()))
