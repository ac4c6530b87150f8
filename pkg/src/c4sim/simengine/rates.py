"""Rates of ring collectives over the fabric.

Two stages.  First every QP gets its uncoupled max-min fair share ``r_q``
over the directed links it crosses; that fixes how a connection splits
its bytes across QPs (evenly for static round-robin, in proportion to
``r_q`` when the dispatcher follows queue depth).  Then each ring channel
is one entity whose rate ``R`` moves every connection of the ring in
lock-step: a link carries ``R * share_q`` for each QP crossing it, and
channels are filled max-min fair with those weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable

import numpy as np

from ..fairshare import fair_share
from ..topology import Topology


def nvlink_out(gpu: tuple[int, int]) -> tuple:
    return ("nvo",) + tuple(gpu)


def nvlink_in(gpu: tuple[int, int]) -> tuple:
    return ("nvi",) + tuple(gpu)


@dataclass
class QpFlow:
    job: int
    qp_id: int
    slot: int
    side: int = 0
    udp: int = 1
    path: object = None       # topology.Path or None when dead
    dlinks: list[int] = field(default_factory=list)
    alive: bool = True


@dataclass
class Conn:
    job: int
    channel: int
    src_rank: int
    dst_rank: int
    src: tuple[int, int]  # (node, gpu)
    dst: tuple[int, int]
    qps: list[QpFlow] = field(default_factory=list)
    slow: float = 1.0

    @property
    def intra(self) -> bool:
        return self.src[0] == self.dst[0]

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.job, self.channel, self.src_rank)


@dataclass
class RateSolution:
    channel: dict[tuple[int, int], float]          # (job, channel) -> R in Gbps
    share: dict[tuple[int, int, int], list[float]]  # conn key -> per-QP fraction
    wire: dict[tuple[int, int, int], list[float]]   # conn key -> uncoupled per-QP Gbps
    link_load: dict[Hashable, float]                # directed link -> Gbps in use


def solve_rates(conns: list[Conn], topo: Topology, nvlink_gbps: float,
                dynamic_lb: bool) -> RateSolution:
    cap: dict[Hashable, float] = {}

    def link_cap(dl: int) -> float:
        if dl not in cap:
            cap[dl] = topo.links[dl // 2].effective_gbps
        return cap[dl]

    flows, owners = [], []
    for c in conns:
        if c.intra:
            continue
        for q in c.qps:
            if q.alive:
                for dl in q.dlinks:
                    link_cap(dl)
                flows.append(list(q.dlinks) + [nvlink_out(c.src), nvlink_in(c.dst)])
                owners.append((c.key, q.slot))
    for c in conns:
        cap[nvlink_out(c.src)] = nvlink_gbps
        cap[nvlink_in(c.dst)] = nvlink_gbps
    r = fair_share(flows, cap) if flows else np.zeros(0)
    rq: dict[tuple, float] = {o: float(v) for o, v in zip(owners, r)}

    share: dict = {}
    wire: dict = {}
    ent_links: dict[tuple[int, int], list] = {}
    ent_w: dict[tuple[int, int], list] = {}
    for c in conns:
        ch = (c.job, c.channel)
        links = ent_links.setdefault(ch, [])
        ws = ent_w.setdefault(ch, [])
        links += [nvlink_out(c.src), nvlink_in(c.dst)]
        ws += [1.0, 1.0]
        if c.intra:
            share[c.key], wire[c.key] = [1.0], [nvlink_gbps]
            raw = nvlink_gbps
        else:
            rates = [rq.get((c.key, q.slot), 0.0) if q.alive else 0.0 for q in c.qps]
            live = [i for i, v in enumerate(rates) if v > 0]
            if dynamic_lb:
                tot = sum(rates)
                sh = [v / tot if tot > 0 else 0.0 for v in rates]
                raw = tot
            else:
                sh = [1.0 / len(live) if i in live else 0.0 for i in range(len(rates))]
                raw = len(live) * min((rates[i] for i in live), default=0.0)
            share[c.key], wire[c.key] = sh, rates
            for q, s in zip(c.qps, sh):
                if s > 0:
                    links += q.dlinks
                    ws += [s] * len(q.dlinks)
        if raw <= 0 or c.slow > 1.0:
            k = ("conn",) + c.key
            cap[k] = raw / c.slow if raw > 0 else 0.0
            links.append(k)
            ws.append(1.0)
        if c.slow > 1.0:
            wire[c.key] = [v / c.slow for v in wire[c.key]]
    keys = sorted(ent_links)
    R = fair_share([ent_links[k] for k in keys], cap, weights=[ent_w[k] for k in keys]) \
        if keys else np.zeros(0)
    channel = {k: float(v) for k, v in zip(keys, R)}
    load: dict[Hashable, float] = {}
    for c in conns:
        if c.intra:
            continue
        rc = channel[(c.job, c.channel)]
        for q, s in zip(c.qps, share[c.key]):
            if s > 0:
                for dl in q.dlinks:
                    load[dl] = load.get(dl, 0.0) + rc * s
    return RateSolution(channel, share, wire, load)
