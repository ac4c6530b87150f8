"""Traffic engineering: path probing, balanced QP placement, chunk dispatch.

The master keeps one :class:`AllocationState` for the whole cluster.  A QP
is pinned to a spine by choosing the RoCE source UDP port whose ECMP hash
steers it there, so the switches themselves stay unmodified.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import AllocationError, ProbeCoverageError, RoutingError
from .topology import FlowKey, Path, Topology, route

PROBE_CAP = 4096
EWMA_WINDOW = 8


@dataclass
class PathTable:
    spine_count: int
    leaf_count: int
    reachable: dict[tuple[int, int], bool] = field(default_factory=dict)
    witness: dict[tuple[int, int], int] = field(default_factory=dict)
    excluded_links: set[int] = field(default_factory=set)
    probers: dict[int, int] = field(default_factory=dict)
    version: int = 0

    def spines_between(self, src_leaf: int, dst_leaf: int) -> list[int]:
        return [s for s in range(self.spine_count)
                if self.reachable.get((src_leaf, s)) and self.reachable.get((dst_leaf, s))]

    def dump(self) -> str:
        lines = []
        for leaf in range(self.leaf_count):
            for s in range(self.spine_count):
                ok = self.reachable.get((leaf, s), False)
                lines.append(f"P {leaf} {s} {int(ok)} {self.witness.get((leaf, s), 0) if ok else 0}")
        return "\n".join(lines) + "\n"


def default_probers(topo: Topology, rng: np.random.Generator | None = None) -> dict[int, int]:
    """One random server per leaf; raises if a leaf hosts no server."""
    probers = {}
    for leaf in range(topo.leaf_count):
        pair = leaf // 2
        nodes = [n.node_id for n in topo.nodes if topo.leaf_pair(n.node_id) == pair]
        if not nodes:
            raise ProbeCoverageError(f"leaf{leaf} has no server to probe from")
        probers[leaf] = nodes[0] if rng is None else int(rng.choice(nodes))
    return probers


def _probe_source(topo: Topology, table: PathTable, leaf: int) -> int | None:
    side = leaf % 2
    pair = leaf // 2
    first = table.probers[leaf]
    others = [n.node_id for n in topo.nodes
              if topo.leaf_pair(n.node_id) == pair and n.node_id != first]
    for node in [first] + others:
        if topo.links[topo.host_link[(node, 0, side)]].is_up:
            return node
    return None


def _probe_leaf(topo: Topology, table: PathTable, leaf: int, seed: int) -> None:
    side = leaf % 2
    for s in range(topo.spine_count):
        table.reachable[(leaf, s)] = False
        table.witness.pop((leaf, s), None)
    src = _probe_source(topo, table, leaf)
    if src is None:
        return
    seen: dict[int, int] = {}
    targets = sorted({dst for other, dst in table.probers.items() if other // 2 != leaf // 2})
    for dst in targets:
        base = FlowKey(src, dst, side, 0, 1)
        # INT reports the width of the first-hop ECMP group
        width = len(_first_hop_group(topo, leaf, base))
        if width == 0:
            continue
        found: dict[int, int] = {}
        for udp in range(1, PROBE_CAP + 1):
            try:
                path = route(topo, base.with_port(udp), seed)
            except RoutingError:
                break
            found.setdefault(topo.spine_index(path.hops[1][0]), udp)
            if len(found) >= width:
                break
        else:
            raise ProbeCoverageError(
                f"leaf{leaf}: {PROBE_CAP} probes did not cover the ECMP group")
        for spine, udp in found.items():
            seen.setdefault(spine, udp)
    for spine, udp in seen.items():
        table.reachable[(leaf, spine)] = True
        table.witness[(leaf, spine)] = udp


def _first_hop_group(topo: Topology, leaf: int, flow: FlowKey) -> list[int]:
    """Spine switch ids that the source leaf may hash ``flow`` onto."""
    dst_leaves = {topo.port_leaf(flow.dst_node, side) for side in (0, 1)
                  if topo.links[topo.host_link[(flow.dst_node, flow.dst_nic_port, side)]].is_up}
    out = []
    for s in range(topo.spine_count):
        if not topo.links[topo.uplink[(leaf, s)]].is_up:
            continue
        if any(topo.links[topo.uplink[(d, s)]].is_up for d in dst_leaves):
            out.append(topo.spine_id(s))
    return out


def probe_paths(topo: Topology, probers: Mapping[int, int] | None = None, seed: int = 0,
                leaves: Iterable[int] | None = None, table: PathTable | None = None) -> PathTable:
    """Full-mesh probing from one server per leaf.

    With ``table`` and ``leaves`` given, only those leaves are re-probed.
    """
    if probers is None:
        probers = table.probers if table is not None else default_probers(topo)
    missing = [l for l in range(topo.leaf_count) if l not in probers]
    if missing:
        raise ProbeCoverageError(f"no prober for leaves {missing}")
    if table is None:
        table = PathTable(topo.spine_count, topo.leaf_count)
    table.probers = dict(probers)
    for leaf in (range(topo.leaf_count) if leaves is None else leaves):
        _probe_leaf(topo, table, leaf, seed)
    table.version += 1
    return table


@dataclass(frozen=True)
class QpRequest:
    job: int
    qp_id: int
    src_node: int
    src_nic: int
    dst_node: int
    dst_nic: int
    index: int  # QP index within its channel
    side: int | None = None  # forced physical port; None lets the master balance


@dataclass
class Assignment:
    request: QpRequest
    side: int
    src_leaf: int
    dst_leaf: int
    spine: int | None
    src_udp_port: int
    path: Path

    @property
    def flow_key(self) -> FlowKey:
        r = self.request
        return FlowKey(r.src_node, r.dst_node, 2 * r.src_nic + self.side, r.dst_nic,
                       self.src_udp_port)


@dataclass
class AllocationState:
    pair_load: dict[tuple[int, int], dict[int, int]] = field(default_factory=dict)
    up_load: dict[tuple[int, int], int] = field(default_factory=dict)
    down_load: dict[tuple[int, int], int] = field(default_factory=dict)
    tx_load: dict[tuple[int, int, int], int] = field(default_factory=dict)
    rx_load: dict[tuple[int, int, int], int] = field(default_factory=dict)
    assignments: dict[tuple[int, int], Assignment] = field(default_factory=dict)

    def _bump(self, a: Assignment, d: int) -> None:
        r = a.request
        tx, rx = (r.src_node, r.src_nic, a.side), (r.dst_node, r.dst_nic, a.side)
        self.tx_load[tx] = self.tx_load.get(tx, 0) + d
        self.rx_load[rx] = self.rx_load.get(rx, 0) + d
        if a.spine is not None:
            loads = self.pair_load.setdefault((a.src_leaf, a.dst_leaf), {})
            loads[a.spine] = loads.get(a.spine, 0) + d
            k_up, k_dn = (a.src_leaf, a.spine), (a.spine, a.dst_leaf)
            self.up_load[k_up] = self.up_load.get(k_up, 0) + d
            self.down_load[k_dn] = self.down_load.get(k_dn, 0) + d

    def add(self, a: Assignment) -> None:
        key = (a.request.job, a.request.qp_id)
        if key in self.assignments:
            self.release(*key)
        self.assignments[key] = a
        self._bump(a, +1)

    def release(self, job: int, qp_id: int) -> Assignment | None:
        a = self.assignments.pop((job, qp_id), None)
        if a is not None:
            self._bump(a, -1)
        return a

    def log_lines(self) -> str:
        out = []
        for (job, qp), a in sorted(self.assignments.items()):
            spine = -1 if a.spine is None else a.spine
            out.append(f"A {job} {qp} {spine} {a.src_udp_port}")
        return "\n".join(out) + "\n"


def _witness_port(topo: Topology, key: FlowKey, spine: int | None, dst_leaf: int,
                  seed: int) -> tuple[int, Path]:
    for udp in range(1, PROBE_CAP + 1):
        path = route(topo, key.with_port(udp), seed)
        if spine is None and len(path.hops) == 1:
            return udp, path
        if (spine is not None and len(path.hops) == 3
                and topo.spine_index(path.hops[1][0]) == spine
                and topo.link_leaf(path.hops[1][1]) == dst_leaf):
            return udp, path
    raise ProbeCoverageError(f"no source port in 1..{PROBE_CAP} steers {key} via spine {spine}")


def allocate(state: AllocationState, table: PathTable, topo: Topology, request: QpRequest,
             seed: int = 0) -> Assignment:
    """Place a QP on a spine and return the source port that selects it."""
    r = request

    def ports_up(side: int) -> bool:
        return (topo.links[topo.host_link[(r.src_node, r.src_nic, side)]].is_up
                and topo.links[topo.host_link[(r.dst_node, r.dst_nic, side)]].is_up)

    side = r.side
    if side is None:
        left = state.tx_load.get((r.src_node, r.src_nic, 0), 0)
        right = state.tx_load.get((r.src_node, r.src_nic, 1), 0)
        side = r.index % 2 if left == right else (0 if left < right else 1)
        if not ports_up(side):
            side = 1 - side
    if not ports_up(side):
        raise AllocationError(f"QP {r.job}/{r.qp_id}: no side with both ports up")
    src_leaf = topo.port_leaf(r.src_node, side)
    dst_leaf = topo.port_leaf(r.dst_node, side)
    base = FlowKey(r.src_node, r.dst_node, 2 * r.src_nic + side, r.dst_nic, 1)
    if src_leaf == dst_leaf:
        udp, path = _witness_port(topo, base, None, dst_leaf, seed)
        a = Assignment(r, side, src_leaf, dst_leaf, None, udp, path)
        state.add(a)
        return a
    spines = _usable_spines(table, topo, src_leaf, dst_leaf)
    if not spines:
        raise AllocationError(f"QP {r.job}/{r.qp_id}: no reachable spine leaf{src_leaf}->leaf{dst_leaf}")
    m = len(spines)
    pref = r.index % m
    loads = state.pair_load.get((src_leaf, dst_leaf), {})

    def cost(k: int):
        s = spines[k]
        link_load = state.up_load.get((src_leaf, s), 0) + state.down_load.get((s, dst_leaf), 0)
        return (loads.get(s, 0), link_load, (k - pref) % m)

    spine = spines[min(range(m), key=cost)]
    udp, path = _witness_port(topo, base, spine, dst_leaf, seed)
    a = Assignment(r, side, src_leaf, dst_leaf, spine, udp, path)
    state.add(a)
    return a


def on_link_fault(state: AllocationState, table: PathTable, topo: Topology, link_id: int,
                  seed: int = 0, full_reprobe: bool = False
                  ) -> tuple[PathTable, list[tuple[Assignment, Assignment | None]]]:
    """Exclude a failed link and re-place every QP whose path used it.

    Returns the updated table and ``(old, new)`` pairs; ``new`` is None
    when no spine remains for that QP.
    """
    if link_id in table.excluded_links:
        return table, []
    table.excluded_links.add(link_id)
    ln = topo.links[link_id]
    leaves = None if full_reprobe else [topo.link_leaf(link_id)]
    probe_paths(topo, seed=seed, table=table, leaves=leaves)
    hit = [a for a in state.assignments.values() if link_id in a.path.links]
    hit.extend(_rewitness(state, topo, seed, skip={id(a) for a in hit}))
    hit.sort(key=lambda a: (a.request.job, a.request.qp_id))
    for a in hit:
        state.release(a.request.job, a.request.qp_id)
    moved = []
    for a in hit:
        req = a.request
        if ln.kind == "host":
            req = QpRequest(req.job, req.qp_id, req.src_node, req.src_nic, req.dst_node,
                            req.dst_nic, req.index, 1 - a.side)
        else:
            req = QpRequest(req.job, req.qp_id, req.src_node, req.src_nic, req.dst_node,
                            req.dst_nic, req.index, a.side)
        try:
            new = allocate(state, table, topo, req, seed)
        except (AllocationError, ProbeCoverageError, RoutingError):
            new = None
        moved.append((a, new))
    # QPs that switched side (or found no spine) leave holes behind
    pairs = {(a.src_leaf, a.dst_leaf) for a in hit if a.spine is not None}
    moved.extend(_rebalance(state, table, topo, sorted(pairs), seed))
    return table, moved


def _usable_spines(table: PathTable, topo: Topology, src_leaf: int, dst_leaf: int) -> list[int]:
    return [s for s in table.spines_between(src_leaf, dst_leaf)
            if topo.uplink[(src_leaf, s)] not in table.excluded_links
            and topo.uplink[(dst_leaf, s)] not in table.excluded_links]


def _rebalance(state: AllocationState, table: PathTable, topo: Topology,
               pairs: Iterable[tuple[int, int]], seed: int
               ) -> list[tuple[Assignment, Assignment]]:
    """Move QPs off the busiest spine of each pair until loads differ by <= 1."""
    moved = []
    for src_leaf, dst_leaf in pairs:
        spines = _usable_spines(table, topo, src_leaf, dst_leaf)
        while spines:
            loads = state.pair_load.get((src_leaf, dst_leaf), {})
            hi = max(spines, key=lambda s: (loads.get(s, 0), -s))
            lo = min(spines, key=lambda s: (loads.get(s, 0),
                                            state.up_load.get((src_leaf, s), 0)
                                            + state.down_load.get((s, dst_leaf), 0), s))
            if loads.get(hi, 0) - loads.get(lo, 0) <= 1:
                break
            a = max((a for a in state.assignments.values()
                     if (a.src_leaf, a.dst_leaf, a.spine) == (src_leaf, dst_leaf, hi)),
                    key=lambda a: (a.request.job, a.request.qp_id))
            try:
                udp, path = _witness_port(topo, a.flow_key.with_port(1), lo, dst_leaf, seed)
            except (ProbeCoverageError, RoutingError):
                spines = [s for s in spines if s != lo]
                continue
            new = Assignment(a.request, a.side, src_leaf, dst_leaf, lo, udp, path)
            state.add(new)
            moved.append((a, new))
    return moved


def _rewitness(state: AllocationState, topo: Topology, seed: int,
               skip: set[int]) -> list[Assignment]:
    """Refresh source ports of QPs whose hash moved after a group change.

    A shrunken ECMP group remaps flows that never touched the failed link.
    Those keep their spine and only get a new witness port; QPs whose
    spine is no longer usable are returned for re-placement.
    """
    lost = []
    for key, a in sorted(state.assignments.items()):
        if id(a) in skip:
            continue
        try:
            if route(topo, a.flow_key, seed) == a.path:
                continue
            base = a.flow_key.with_port(1)
            udp, path = _witness_port(topo, base, a.spine, a.dst_leaf, seed)
        except (RoutingError, ProbeCoverageError):
            lost.append(a)
            continue
        a.src_udp_port, a.path = udp, path
    return lost


def on_link_restore(state: AllocationState, table: PathTable, topo: Topology, link_id: int,
                    seed: int = 0) -> PathTable:
    if link_id not in table.excluded_links:
        return table
    table.excluded_links.discard(link_id)
    probe_paths(topo, seed=seed, table=table, leaves=[topo.link_leaf(link_id)])
    for a in _rewitness(state, topo, seed, skip=set()):
        state.release(a.request.job, a.request.qp_id)
        try:
            allocate(state, table, topo, a.request, seed)
        except (AllocationError, ProbeCoverageError, RoutingError):
            pass
    return table


# -- dynamic chunk dispatch -----------------------------------------------

def select_qp(queue_lengths: Sequence[float], rates: Sequence[float] | None = None,
              capacity: int | None = None, chunk_bytes: float = 1.0) -> int | None:
    """Index of the QP with the smallest estimated drain time.

    Drain time is queued bytes over the QP's recent rate; full queues are
    skipped and ties go to the lowest index.  Returns None when every queue
    is full, in which case the caller waits for a completion.
    """
    best, best_t = None, None
    for i, q in enumerate(queue_lengths):
        if capacity is not None and q >= capacity:
            continue
        rate = 1.0 if rates is None else rates[i]
        t = q * chunk_bytes / rate if rate > 0 else float("inf")
        if best_t is None or t < best_t:
            best, best_t = i, t
    return best


class RateEstimator:
    """Per-QP EWMA of recent chunk throughput, all QPs starting equal."""

    def __init__(self, n: int, window: int = EWMA_WINDOW, initial: float = 1.0):
        self.alpha = 2.0 / (window + 1)
        self.rates = [initial] * n
        self._seeded = [False] * n

    def update(self, qp: int, nbytes: float, duration: float) -> None:
        sample = nbytes / duration
        if not self._seeded[qp]:
            self.rates[qp] = sample
            self._seeded[qp] = True
        else:
            self.rates[qp] += self.alpha * (sample - self.rates[qp])


def simulate_dispatch(capacities: Sequence[float], n_chunks: int, chunk_bytes: float = 1.0,
                      queue_capacity: int = 8) -> list[tuple[float, int]]:
    """Chunk-level replay of drain-time dispatch over fixed-rate QPs.

    Each QP serves its FIFO at its own capacity; the sender always has data
    and posts whenever some queue has room.  Returns ``(completion_time, qp)``
    per chunk in completion order.
    """
    n = len(capacities)
    queues = [0] * n
    est = RateEstimator(n)
    busy_until = [0.0] * n
    started_at: list[list[float]] = [[] for _ in range(n)]
    done: list[tuple[float, int]] = []
    events: list[tuple[float, int]] = []
    posted = 0
    now = 0.0

    def post():
        nonlocal posted
        while posted < n_chunks:
            q = select_qp(queues, est.rates, queue_capacity, chunk_bytes)
            if q is None:
                return
            queues[q] += 1
            posted += 1
            start = max(now, busy_until[q])
            busy_until[q] = start + chunk_bytes / capacities[q]
            started_at[q].append(start)
            heapq.heappush(events, (busy_until[q], q))

    post()
    while events:
        now, q = heapq.heappop(events)
        start = started_at[q].pop(0)
        queues[q] -= 1
        est.update(q, chunk_bytes, now - start)
        done.append((now, q))
        post()
    return done
