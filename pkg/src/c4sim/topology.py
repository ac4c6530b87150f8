"""Two-tier Clos fabric with bonded dual-port NICs and ECMP hashing.

Every NIC exposes a left port wired to the even leaf of its leaf pair and a
right port wired to the odd leaf.  Links are full duplex; the simulator
addresses each direction separately through :func:`dlink`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .errors import RoutingError, TopologyError, UnknownLinkError, UnreachableError

LEFT, RIGHT = 0, 1
SIDE_NAMES = ("L", "R")
ROCE_UDP_PORT = 4791
NVLINK_GBPS = 362.0

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def hash_fields(seed: int, fields: Iterable[int]) -> int:
    """64-bit multiply-xor-shift hash of an integer tuple."""
    h = _mix64(seed)
    for v in fields:
        h = _mix64(h + _GOLDEN + (v & _MASK))
    return h


@dataclass(frozen=True)
class NodeSpec:
    node_id: int
    gpus: int = 8
    nics: int = 8
    ports_per_nic: int = 2
    port_capacity_gbps: float = 200.0

    def __post_init__(self):
        if self.ports_per_nic != 2:
            raise TopologyError("ports_per_nic must be 2 (left/right)")


@dataclass(frozen=True)
class SwitchSpec:
    switch_id: int
    tier: str  # "leaf" | "spine"
    radix: int
    index: int  # position within its tier

    @property
    def name(self) -> str:
        return f"{self.tier}{self.index}"


@dataclass
class Link:
    link_id: int
    endpoint_a: str
    endpoint_b: str
    capacity_gbps: float
    kind: str  # "host" (NIC port <-> leaf) or "up" (leaf <-> spine)
    state: str = "up"  # up | down | degraded
    factor: float = 1.0

    @property
    def is_up(self) -> bool:
        return self.state != "down"

    @property
    def effective_gbps(self) -> float:
        return self.capacity_gbps * self.factor if self.is_up else 0.0

    def state_label(self) -> str:
        if self.state == "degraded":
            return f"degraded:{self.factor:g}"
        return self.state


@dataclass(frozen=True)
class FlowKey:
    """Fields the switches hash on.

    ``src_nic_port`` is the physical source port id (``nic * 2 + side``);
    ``dst_nic_port`` names the destination NIC, whose bonded address is
    reachable through either of its two physical ports.
    """

    src_node: int
    dst_node: int
    src_nic_port: int
    dst_nic_port: int
    src_udp_port: int
    dst_udp_port: int = ROCE_UDP_PORT

    def __post_init__(self):
        if not 1 <= self.src_udp_port <= 65535:
            raise ValueError(f"src_udp_port out of range: {self.src_udp_port}")

    @property
    def src_nic(self) -> int:
        return self.src_nic_port // 2

    @property
    def src_side(self) -> int:
        return self.src_nic_port % 2

    def with_port(self, udp: int) -> "FlowKey":
        return FlowKey(self.src_node, self.dst_node, self.src_nic_port,
                       self.dst_nic_port, udp, self.dst_udp_port)

    def hash_tuple(self) -> tuple[int, ...]:
        return (self.src_node, self.dst_node, self.src_nic_port,
                self.dst_nic_port, self.src_udp_port, self.dst_udp_port)


@dataclass(frozen=True)
class Path:
    hops: tuple[tuple[int, int], ...]  # (switch_id, egress link_id)
    ingress_link: int  # source host link
    dst_port: tuple[int, int, int]  # (node, nic, side) the flow lands on

    @property
    def links(self) -> tuple[int, ...]:
        return (self.ingress_link,) + tuple(l for _, l in self.hops)

    @property
    def switches(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.hops)


def dlink(link_id: int, direction: int) -> int:
    """Directed-link index; direction 0 is a->b (towards the spine)."""
    return 2 * link_id + direction


@dataclass
class Topology:
    nodes: list[NodeSpec]
    switches: list[SwitchSpec]
    links: list[Link]
    oversubscription: Fraction
    leaf_count: int
    spine_count: int
    nodes_per_leaf_pair: int
    host_link: dict[tuple[int, int, int], int] = field(default_factory=dict)
    uplink: dict[tuple[int, int], int] = field(default_factory=dict)
    version: int = 0

    # -- lookups -----------------------------------------------------------
    def leaf_id(self, index: int) -> int:
        return index

    def spine_id(self, index: int) -> int:
        return self.leaf_count + index

    def is_spine(self, switch_id: int) -> bool:
        return switch_id >= self.leaf_count

    def spine_index(self, switch_id: int) -> int:
        return switch_id - self.leaf_count

    def leaf_pair(self, node: int) -> int:
        return node // self.nodes_per_leaf_pair

    def port_leaf(self, node: int, side: int) -> int:
        return 2 * self.leaf_pair(node) + side

    def link(self, link_id: int) -> Link:
        try:
            return self.links[link_id]
        except IndexError:
            raise UnknownLinkError(link_id) from None

    def host_links_of_leaf(self, leaf: int) -> list[int]:
        pair, side = divmod(leaf, 2)
        out = []
        for node in range(pair * self.nodes_per_leaf_pair,
                          min((pair + 1) * self.nodes_per_leaf_pair, len(self.nodes))):
            for nic in range(self.nodes[node].nics):
                out.append(self.host_link[(node, nic, side)])
        return out

    def uplinks_of_leaf(self, leaf: int) -> list[int]:
        return [self.uplink[(leaf, s)] for s in range(self.spine_count)]

    def up_uplinks(self, leaf: int) -> list[int]:
        return [l for l in self.uplinks_of_leaf(leaf) if self.links[l].is_up]

    def link_spine(self, link_id: int) -> int:
        """Spine index of an uplink."""
        return int(self.links[link_id].endpoint_b[len("spine"):])

    def link_leaf(self, link_id: int) -> int:
        ln = self.links[link_id]
        ep = ln.endpoint_a if ln.kind == "up" else ln.endpoint_b
        return int(ep[len("leaf"):])

    def computed_oversubscription(self) -> Fraction:
        ratios = set()
        for leaf in range(self.leaf_count):
            down = sum(Fraction(self.links[l].capacity_gbps).limit_denominator(10**6)
                       for l in self.host_links_of_leaf(leaf))
            up = sum(Fraction(self.links[l].capacity_gbps).limit_denominator(10**6)
                     for l in self.uplinks_of_leaf(leaf))
            if down:
                ratios.add(down / up)
        if len(ratios) != 1:
            raise TopologyError(f"leaves disagree on oversubscription: {sorted(ratios)}")
        return ratios.pop()

    def edge_list(self) -> str:
        lines = [f"link {ln.link_id} {ln.endpoint_a} {ln.endpoint_b} "
                 f"{ln.capacity_gbps:g} {ln.state_label()}" for ln in self.links]
        return "\n".join(lines) + "\n"


def port_name(node: int, nic: int, side: int) -> str:
    return f"n{node}/nic{nic}/{SIDE_NAMES[side]}"


def build_fat_tree(node_count: int, leaf_count: int, spine_count: int,
                   nodes_per_leaf_pair: int, capacity_gbps: float = 200.0, *,
                   gpus: int = 8, nics: int = 8, uplink_gbps: float | None = None,
                   oversubscription: float | None = None) -> Topology:
    """Build a single-pod leaf/spine fabric.

    ``uplink_gbps`` defaults to the value that gives the declared
    ``oversubscription`` (host-facing over uplink capacity, 1 by default).
    """
    if leaf_count < 2 or leaf_count % 2:
        raise TopologyError(f"leaf_count must be even and >= 2, got {leaf_count}")
    if spine_count < 1:
        raise TopologyError("spine_count must be >= 1")
    if node_count < 1 or nodes_per_leaf_pair < 1:
        raise TopologyError("node_count and nodes_per_leaf_pair must be >= 1")
    pairs = leaf_count // 2
    if node_count % nodes_per_leaf_pair:
        raise TopologyError(
            f"nodes not evenly distributable: {node_count} nodes over leaf pairs "
            f"of {nodes_per_leaf_pair}")
    if node_count // nodes_per_leaf_pair > pairs:
        raise TopologyError(
            f"{node_count} nodes need {node_count // nodes_per_leaf_pair} leaf pairs, "
            f"only {pairs} available")

    host_per_leaf = nodes_per_leaf_pair * nics
    declared = Fraction(oversubscription if oversubscription is not None else 1
                        ).limit_denominator(10**6)
    if uplink_gbps is None:
        uplink_gbps = float(Fraction(capacity_gbps).limit_denominator(10**6)
                            * host_per_leaf / (spine_count * declared))
    elif oversubscription is None:
        declared = (Fraction(capacity_gbps).limit_denominator(10**6) * host_per_leaf
                    / (Fraction(uplink_gbps).limit_denominator(10**6) * spine_count))

    nodes = [NodeSpec(i, gpus=gpus, nics=nics, port_capacity_gbps=capacity_gbps)
             for i in range(node_count)]
    switches = [SwitchSpec(i, "leaf", host_per_leaf + spine_count, i) for i in range(leaf_count)]
    switches += [SwitchSpec(leaf_count + j, "spine", leaf_count, j) for j in range(spine_count)]

    links: list[Link] = []
    host_link: dict[tuple[int, int, int], int] = {}
    uplink: dict[tuple[int, int], int] = {}
    for node in nodes:
        pair = node.node_id // nodes_per_leaf_pair
        for nic in range(nics):
            for side in (LEFT, RIGHT):
                lid = len(links)
                links.append(Link(lid, port_name(node.node_id, nic, side),
                                  f"leaf{2 * pair + side}", capacity_gbps, "host"))
                host_link[(node.node_id, nic, side)] = lid
    for leaf in range(leaf_count):
        for s in range(spine_count):
            lid = len(links)
            links.append(Link(lid, f"leaf{leaf}", f"spine{s}", uplink_gbps, "up"))
            uplink[(leaf, s)] = lid

    topo = Topology(nodes, switches, links, declared, leaf_count, spine_count,
                    nodes_per_leaf_pair, host_link, uplink)
    computed = topo.computed_oversubscription()
    if computed != declared:
        raise TopologyError(f"declared oversubscription {declared} != computed {computed}")
    return topo


def ecmp_select(switch: SwitchSpec | int, flow: FlowKey, candidate_links: Sequence[int],
                seed: int) -> int:
    """Pick one of ``candidate_links`` by hashing the flow key.

    Candidates are sorted by id first so the result does not depend on the
    order the caller built the list in.
    """
    if not candidate_links:
        sid = switch.switch_id if isinstance(switch, SwitchSpec) else switch
        raise RoutingError(f"switch {sid}: empty ECMP candidate set")
    ordered = sorted(candidate_links)
    if len(ordered) == 1:
        return ordered[0]
    sid = switch.switch_id if isinstance(switch, SwitchSpec) else switch
    h = hash_fields(hash_fields(seed, (sid,)), flow.hash_tuple())
    return ordered[h % len(ordered)]


def _dst_ports(topo: Topology, flow: FlowKey) -> dict[int, int]:
    """leaf -> host link for each up port of the destination NIC."""
    out = {}
    for side in (LEFT, RIGHT):
        lid = topo.host_link[(flow.dst_node, flow.dst_nic_port, side)]
        if topo.links[lid].is_up:
            out[topo.port_leaf(flow.dst_node, side)] = lid
    return out


def route(topo: Topology, flow: FlowKey, seed: int) -> Path:
    """Up/down route of ``flow`` using per-switch ECMP."""
    if flow.src_node == flow.dst_node:
        raise RoutingError("intra-node transfers do not enter the fabric")
    src_link = topo.host_link[(flow.src_node, flow.src_nic, flow.src_side)]
    src_leaf = topo.port_leaf(flow.src_node, flow.src_side)
    if not topo.links[src_link].is_up:
        raise UnreachableError(port_name(flow.src_node, flow.src_nic, flow.src_side),
                               "source port link is down")
    dst = _dst_ports(topo, flow)
    if not dst:
        raise UnreachableError(f"leaf{src_leaf}", "destination NIC has no up port")
    if src_leaf in dst:
        lid = dst[src_leaf]
        side = 0 if topo.port_leaf(flow.dst_node, 0) == src_leaf else 1
        return Path(((topo.leaf_id(src_leaf), lid),), src_link,
                    (flow.dst_node, flow.dst_nic_port, side))

    def spine_downs(s: int) -> list[int]:
        return [topo.uplink[(leaf, s)] for leaf in dst if topo.links[topo.uplink[(leaf, s)]].is_up]

    cands = [topo.uplink[(src_leaf, s)] for s in range(topo.spine_count)
             if topo.links[topo.uplink[(src_leaf, s)]].is_up and spine_downs(s)]
    if not cands:
        raise UnreachableError(f"leaf{src_leaf}")
    up = ecmp_select(topo.leaf_id(src_leaf), flow, cands, seed)
    spine = topo.link_spine(up)
    down = ecmp_select(topo.spine_id(spine), flow, spine_downs(spine), seed)
    dst_leaf = topo.link_leaf(down)
    side = dst_leaf % 2
    return Path(((topo.leaf_id(src_leaf), up), (topo.spine_id(spine), down),
                 (topo.leaf_id(dst_leaf), dst[dst_leaf])), src_link,
                (flow.dst_node, flow.dst_nic_port, side))


def path_dlinks(topo: Topology, path: Path) -> list[int]:
    """Directed links traversed by ``path`` in order."""
    out = [dlink(path.ingress_link, 0)]
    for sw, lid in path.hops:
        ln = topo.links[lid]
        if ln.kind == "up":
            out.append(dlink(lid, 1 if topo.is_spine(sw) else 0))
        else:
            out.append(dlink(lid, 1))
    return out


def path_is_up(topo: Topology, path: Path) -> bool:
    return all(topo.links[l].is_up for l in path.links)


def parse_state(state) -> tuple[str, float]:
    """Accept "up", "down", "degraded:0.5", ("degraded", 0.5) or a bare factor."""
    if isinstance(state, tuple):
        kind, factor = state
    elif isinstance(state, (int, float)):
        kind, factor = "degraded", float(state)
    elif isinstance(state, str) and state.startswith("degraded"):
        kind, _, f = state.partition(":")
        factor = float(f)
    else:
        kind, factor = state, 1.0 if state == "up" else 0.0
    if kind == "up":
        return "up", 1.0
    if kind == "down":
        return "down", 0.0
    if kind == "degraded":
        if not 0.0 < factor < 1.0:
            raise ValueError(f"degraded factor must be in (0, 1), got {factor}")
        return "degraded", float(factor)
    raise ValueError(f"unknown link state {state!r}")


def set_link_state(topo: Topology, link_id: int, state) -> Topology:
    ln = topo.link(link_id)
    ln.state, ln.factor = parse_state(state)
    topo.version += 1
    return topo
