"""Scenario description: fabric, jobs, fault script, policies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from ..collective import Communicator
from ..errors import ValidationError
from ..topology import NVLINK_GBPS, Topology, build_fat_tree

FAULT_KINDS = ("link_down", "link_up", "link_degraded", "slow_connection", "slow_compute",
               "nic_degraded", "rank_crash", "comm_hang", "noncomm_hang")
# fault kinds whose target is a rank of a job (or a pair of ranks)
RANK_FAULTS = ("slow_compute", "rank_crash", "comm_hang", "noncomm_hang")


@dataclass
class TopologySpec:
    node_count: int = 16
    leaf_count: int = 8
    spine_count: int = 8
    nodes_per_leaf_pair: int = 4
    capacity_gbps: float = 200.0
    uplink_gbps: float | None = None
    gpus: int = 8
    nics: int = 8
    nvlink_gbps: float = NVLINK_GBPS

    def build(self) -> Topology:
        return build_fat_tree(self.node_count, self.leaf_count, self.spine_count,
                              self.nodes_per_leaf_pair, self.capacity_gbps, gpus=self.gpus,
                              nics=self.nics, uplink_gbps=self.uplink_gbps)


@dataclass
class JobSpec:
    job_id: int
    ranks: list[tuple[int, int]]  # (node, gpu) in ring order
    total_bytes: int
    compute_s: float | list[float] = 0.0
    iterations: int = 1
    checkpoint_interval_iters: int = 10
    channels: int = 1
    qps_per_channel: int = 2
    start_s: float = 0.0

    def communicator(self) -> Communicator:
        return Communicator(self.job_id, tuple(self.ranks), self.channels, self.qps_per_channel)

    def compute_of(self, rank: int) -> float:
        if isinstance(self.compute_s, (int, float)):
            return float(self.compute_s)
        return float(self.compute_s[rank])


@dataclass(frozen=True)
class Fault:
    """One scripted fault.

    ``target`` depends on ``kind``: ``(link_id,)`` for link faults,
    ``(rank,)`` of ``job`` for compute/crash/hang faults,
    ``(src_rank, dst_rank)`` for ``slow_connection`` and ``(node, nic)``
    for ``nic_degraded``.  ``factor`` is the slowdown (>= 1) except for
    ``link_degraded`` where it is the remaining capacity fraction.
    """

    time_s: float
    kind: str
    target: tuple = ()
    job: int = 0
    factor: float = 1.0

    def label(self) -> str:
        tgt = ",".join(str(t) for t in self.target)
        return f"{self.kind}({tgt})" + (f"x{self.factor:g}" if self.factor != 1.0 else "")


@dataclass
class Policies:
    c4p: bool = True
    dynamic_lb: bool = False
    c4d: bool = True
    k_mad: float = 5.0
    rho: float = 0.8
    hang_factor: float = 3.0
    full_reprobe: bool = False
    isolate_s: float = 0.0     # verdict -> node isolated
    restart_s: float = 1.0     # isolation -> job running again


@dataclass
class RunSpec:
    seed: int = 0
    duration_s: float = math.inf
    sample_interval_s: float = 0.0  # 0 disables per-port sampling
    trace: bool = True


@dataclass
class Scenario:
    topology: TopologySpec = field(default_factory=TopologySpec)
    jobs: list[JobSpec] = field(default_factory=list)
    faults: list[Fault] = field(default_factory=list)
    policies: Policies = field(default_factory=Policies)
    run: RunSpec = field(default_factory=RunSpec)
    backup_nodes: list[int] | None = None  # None: every node no job uses

    def validate(self, topo: Topology | None = None) -> Topology:
        """Check cross references; returns the built topology."""
        try:
            topo = topo or self.topology.build()
        except Exception as exc:
            raise ValidationError(f"topology: {exc}") from exc
        used: dict[tuple[int, int], int] = {}
        ids = set()
        for job in self.jobs:
            if job.job_id in ids:
                raise ValidationError(f"duplicate job id {job.job_id}")
            ids.add(job.job_id)
            if len(job.ranks) < 2:
                raise ValidationError(f"job {job.job_id}: needs at least 2 ranks")
            if job.total_bytes < len(job.ranks):
                raise ValidationError(f"job {job.job_id}: total_bytes smaller than rank count")
            if job.iterations < 1 or job.checkpoint_interval_iters < 1:
                raise ValidationError(f"job {job.job_id}: iterations and checkpoint interval must be >= 1")
            if not isinstance(job.compute_s, (int, float)) and len(job.compute_s) != len(job.ranks):
                raise ValidationError(f"job {job.job_id}: compute_s list must have one entry per rank")
            try:
                job.communicator()
            except Exception as exc:
                raise ValidationError(f"job {job.job_id}: {exc}") from exc
            for node, gpu in job.ranks:
                if not 0 <= node < len(topo.nodes):
                    raise ValidationError(f"job {job.job_id}: node {node} does not exist")
                if not 0 <= gpu < topo.nodes[node].gpus:
                    raise ValidationError(f"job {job.job_id}: gpu {gpu} does not exist on node {node}")
                if gpu >= topo.nodes[node].nics:
                    raise ValidationError(f"job {job.job_id}: gpu {gpu} has no rail NIC")
                if (node, gpu) in used:
                    raise ValidationError(
                        f"GPU {node}/{gpu} shared by jobs {used[(node, gpu)]} and {job.job_id}")
                used[(node, gpu)] = job.job_id
        jobs = {j.job_id: j for j in self.jobs}
        last = -math.inf
        for f in self.faults:
            if f.kind not in FAULT_KINDS:
                raise ValidationError(f"unknown fault kind {f.kind!r}")
            if f.time_s < last:
                raise ValidationError("fault times must be non-decreasing")
            last = f.time_s
            self._check_target(f, topo, jobs)
        if self.backup_nodes is not None:
            busy = {n for n, _ in used}
            for n in self.backup_nodes:
                if not 0 <= n < len(topo.nodes) or n in busy:
                    raise ValidationError(f"backup node {n} is missing or in use")
        return topo

    @staticmethod
    def _check_target(f: Fault, topo: Topology, jobs: dict) -> None:
        if f.kind.startswith("link"):
            if len(f.target) != 1 or not 0 <= f.target[0] < len(topo.links):
                raise ValidationError(f"{f.label()}: unknown link")
            if f.kind == "link_degraded" and not 0 < f.factor < 1:
                raise ValidationError(f"{f.label()}: degraded factor must be in (0, 1)")
            return
        if f.kind == "nic_degraded":
            if len(f.target) != 2:
                raise ValidationError(f"{f.label()}: target is (node, nic)")
            node, nic = f.target
            if not (0 <= node < len(topo.nodes) and 0 <= nic < topo.nodes[node].nics):
                raise ValidationError(f"{f.label()}: unknown NIC")
        else:
            job = jobs.get(f.job)
            if job is None:
                raise ValidationError(f"{f.label()}: unknown job {f.job}")
            want = 2 if f.kind == "slow_connection" else 1
            if len(f.target) != want or not all(0 <= r < len(job.ranks) for r in f.target):
                raise ValidationError(f"{f.label()}: bad rank target for job {f.job}")
        if f.kind in ("slow_connection", "slow_compute", "nic_degraded") and f.factor < 1:
            raise ValidationError(f"{f.label()}: slowdown factor must be >= 1")


def rail_ring(nodes: Sequence[int], gpus: int) -> list[tuple[int, int]]:
    """Rank order visiting every node on rail 0, then rail 1, and so on.

    Consecutive ranks sit on different nodes, so each ring edge is a
    network connection between same-rail NICs except where rails change.
    """
    return [(n, g) for g in range(gpus) for n in nodes]
