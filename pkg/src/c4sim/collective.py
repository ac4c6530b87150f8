"""Ring allreduce decomposition and bandwidth metrics."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

from .errors import ScheduleError

DEFAULT_CHUNK_BYTES = 4 * 1024 * 1024
DEFAULT_QUEUE_CAPACITY = 8


@dataclass(frozen=True)
class Communicator:
    comm_id: int
    ranks: tuple[tuple[int, int], ...]  # (node_id, gpu_id) in ring order
    channels: int = 1
    qps_per_channel: int = 2

    def __post_init__(self):
        if len(set(self.ranks)) != len(self.ranks):
            raise ScheduleError("communicator ranks must be distinct")
        if self.channels < 1 or self.qps_per_channel < 1:
            raise ScheduleError("channels and qps_per_channel must be >= 1")

    @property
    def size(self) -> int:
        return len(self.ranks)

    def ring_strides(self) -> list[int]:
        """One successor stride per channel, each coprime with the rank count."""
        n = self.size
        if n <= 2:
            return [1] * self.channels
        strides = [s for s in range(1, n) if math.gcd(s, n) == 1]
        return [strides[c % len(strides)] for c in range(self.channels)]

    def ring_pairs(self) -> list[list[tuple[int, int]]]:
        """Per channel, the (sender, receiver) rank pairs of its ring."""
        n = self.size
        return [[(r, (r + s) % n) for r in range(n)] for s in self.ring_strides()]


@dataclass(frozen=True)
class CollectiveOp:
    op_id: int
    element_count: int
    element_bytes: int = 2
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    kind: str = "allreduce"
    algorithm: str = "ring"
    dtype: str = "bf16"

    @property
    def total_bytes(self) -> int:
        return self.element_count * self.element_bytes

    def chunk_sizes(self) -> list[int]:
        full, rest = divmod(self.total_bytes, self.chunk_bytes)
        return [self.chunk_bytes] * full + ([rest] if rest else [])


@dataclass(frozen=True)
class Transfer:
    sender: int
    receiver: int
    chunk: int
    bytes: int


@dataclass
class TransferSchedule:
    n: int
    chunk_bytes: list[int]
    steps: list[list[Transfer]] = field(default_factory=list)

    def to_lines(self) -> str:
        out = []
        for s, step in enumerate(self.steps):
            for t in step:
                out.append(f"step {s} send {t.sender}→{t.receiver} chunk {t.chunk} bytes {t.bytes}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_lines(cls, text: str) -> "TransferSchedule":
        pat = re.compile(r"step (\d+) send (\d+)(?:→|->)(\d+) chunk (\d+) bytes (\d+)$")
        steps: dict[int, list[Transfer]] = {}
        sizes: dict[int, int] = {}
        ranks = set()
        for line in text.splitlines():
            if not line.strip():
                continue
            m = pat.match(line.strip())
            if not m:
                raise ScheduleError(f"bad schedule line: {line!r}")
            s, a, b, c, nb = map(int, m.groups())
            steps.setdefault(s, []).append(Transfer(a, b, c, nb))
            sizes[c] = nb
            ranks.update((a, b))
        n = len(ranks)
        return cls(n, [sizes[c] for c in range(n)], [steps[s] for s in sorted(steps)])


def chunk_split(total_bytes: int, n: int) -> list[int]:
    """Split into n chunks; the first ``total % n`` get one extra byte."""
    base, rem = divmod(total_bytes, n)
    return [base + (1 if c < rem else 0) for c in range(n)]


def ring_allreduce_schedule(n: int, total_bytes: int) -> TransferSchedule:
    if n < 2:
        raise ScheduleError(f"ring allreduce needs at least 2 ranks, got {n}")
    if total_bytes < n:
        raise ScheduleError("total_bytes must be >= rank count")
    sizes = chunk_split(total_bytes, n)
    sched = TransferSchedule(n, sizes)
    for s in range(n - 1):  # reduce-scatter
        sched.steps.append([Transfer(r, (r + 1) % n, (r - s) % n, sizes[(r - s) % n])
                            for r in range(n)])
    for s in range(n - 1):  # allgather
        sched.steps.append([Transfer(r, (r + 1) % n, (r + 1 - s) % n, sizes[(r + 1 - s) % n])
                            for r in range(n)])
    return sched


def split_to_qps(chunk_count: int, n_qps: int, policy: str = "static",
                 queue_lengths: Sequence[int] | None = None,
                 queue_capacity: int = DEFAULT_QUEUE_CAPACITY) -> list[int]:
    """QP index for each chunk of one (sender, receiver) transfer.

    ``static`` is NCCL's round robin.  ``dynamic`` picks the QP with the
    shortest drain time at each chunk, starting from ``queue_lengths``.
    """
    if n_qps < 1:
        raise ScheduleError("no QP for the (sender, receiver) pair")
    if policy == "static":
        return [i % n_qps for i in range(chunk_count)]
    if policy != "dynamic":
        raise ValueError(f"unknown policy {policy!r}")
    from .c4p import select_qp

    queues = list(queue_lengths) if queue_lengths is not None else [0] * n_qps
    if len(queues) != n_qps:
        raise ScheduleError("queue_lengths must have one entry per QP")
    out = []
    for _ in range(chunk_count):
        q = select_qp(queues, capacity=queue_capacity)
        if q is None:
            # every queue full: the oldest chunk on each QP drains first
            queues = [max(0, x - 1) for x in queues]
            q = select_qp(queues, capacity=queue_capacity)
        out.append(q)
        queues[q] += 1
    return out


def algbw(total_bytes: float, elapsed_s: float) -> float:
    if elapsed_s <= 0:
        raise ValueError("elapsed_s must be > 0")
    return total_bytes * 8 / elapsed_s / 1e9


def busbw_factor(n: int, kind: str = "allreduce") -> float:
    if kind != "allreduce":
        raise ValueError(f"unsupported collective {kind!r}")
    return 2 * (n - 1) / n


def busbw(total_bytes: float, elapsed_s: float, n: int, kind: str = "allreduce") -> float:
    """Bus bandwidth in Gbps."""
    return algbw(total_bytes, elapsed_s) * busbw_factor(n, kind)


def bytes_per_connection(total_bytes: float, n: int, channels: int = 1) -> float:
    """Bytes each ring edge carries over one allreduce."""
    return total_bytes / channels * busbw_factor(n)
