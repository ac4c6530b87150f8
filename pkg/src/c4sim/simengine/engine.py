"""Event-driven fluid simulation of training jobs on the fabric.

Each job alternates a compute phase with one ring allreduce.  During the
network phase every ring channel advances at the rate given by
:func:`solve_rates`; rates are re-solved whenever the set of active
collectives, the link states or the QP placement change.  Transport
records are synthesized when a collective's network phase starts and fed,
together with operation and communicator records, through the monitor,
whose verdicts drive isolation and restart.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..c4d.detect import Diagnosis
from ..c4d.downtime import DowntimeLedger, Incident, ledger_from_incidents
from ..c4d.master import ClusterState, master_step
from ..c4d.monitor import Monitor, MonitorParams, RecordQueue
from ..c4d.records import SEQ_STRIDE, CommRecord, OpRecord, Record, TransportRecord
from ..c4p import AllocationState, PathTable, QpRequest, allocate, on_link_fault, \
    on_link_restore, probe_paths
from ..collective import busbw, bytes_per_connection, chunk_split
from ..errors import AllocationError, ProbeCoverageError, RoutingError
from ..topology import FlowKey, Path, Topology, path_dlinks, port_name, route, set_link_state
from .rates import Conn, QpFlow, RateSolution, solve_rates
from .scenario import Fault, JobSpec, Scenario
from .telemetry import RingChannel, fit_alpha, ring_messages

log = logging.getLogger(__name__)

# scripted fault kind -> incident class used by the downtime ledger
ERROR_CLASS = {
    "rank_crash": "cuda", "slow_compute": "ecc_nvlink", "comm_hang": "nccl_timeout",
    "noncomm_hang": "nccl_timeout", "slow_connection": "ack_timeout",
    "nic_degraded": "ack_timeout",
}
# same-time ordering: faults before completions before new work
_PRIO = {"fault": 0, "restart_done": 1, "coll_done": 2, "compute_done": 3, "job_start": 4,
         "sample": 5}
_BYTES = 1e9 / 8  # bytes per second in one Gbps


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent Philox stream per purpose, so adding draws in one place
    never shifts another."""
    return np.random.Generator(np.random.Philox(key=(int(seed) << 32) | zlib.crc32(name.encode())))


# -- report rows ------------------------------------------------------------

@dataclass
class IterRow:
    job: int
    iteration: int
    op_seq: int
    start_s: float
    net_start_s: float
    end_s: float
    comm_s: float
    busbw_gbps: float


@dataclass
class FlowRow:
    flow_id: int
    job: int
    op_seq: int
    qp: int
    src_port: str
    dst_port: str
    path: str
    start_s: float
    end_s: float
    bytes: float
    gbps: float


@dataclass
class PortSample:
    time_s: float
    link: int
    direction: str  # "up" (towards the spine / into the leaf) or "down"
    src: str
    dst: str
    gbps: float
    capacity_gbps: float
    flows: int


@dataclass
class EventRow:
    time_s: float
    kind: str
    job: int
    detail: str


@dataclass
class RunReport:
    seed: int
    end_s: float
    iterations: list[IterRow]
    flows: list[FlowRow]
    ports: list[PortSample]
    events: list[EventRow]
    diagnoses: list[Diagnosis]
    incidents: list[Incident]
    ledger: DowntimeLedger | None
    allocation_log: str
    path_table: str
    trace: list[Record]
    qp_paths: dict[tuple[int, int], tuple[int, ...] | None]
    job_phase: dict[int, str]

    def busbw(self, job: int | None = None) -> list[float]:
        return [r.busbw_gbps for r in self.iterations if job is None or r.job == job]

    def verdicts(self) -> list[Diagnosis]:
        return [d for d in self.diagnoses if not d.healthy]


# -- per-job state ------------------------------------------------------------

@dataclass
class _Job:
    spec: JobSpec
    base: int
    placement: list[tuple[int, int]]
    strides: list[int]
    conns: list[list[Conn]] = field(default_factory=list)  # [channel][src rank]
    last_share: dict[tuple, tuple[list[float], list[float]]] = field(default_factory=dict)
    phase: str = "pending"  # pending compute comm stalled restarting held done
    epoch: int = 0
    iteration: int = 0
    op_seq: int = -1
    ckpt_iter: int = 0
    ckpt_time: float = 0.0
    iter_start: float = 0.0
    entries: dict[int, float] = field(default_factory=dict)
    comp_end: dict[int, float] = field(default_factory=dict)
    comp_ver: dict[int, int] = field(default_factory=dict)
    net_start: float = 0.0
    remaining: dict[int, float] = field(default_factory=dict)
    rate: dict[int, float] = field(default_factory=dict)
    end_ver: int = 0
    predicted_end: float = math.inf
    alpha: float = 1.0
    frozen: dict[int, float] = field(default_factory=dict)
    qp_bytes: dict[tuple, list[float]] = field(default_factory=dict)
    delivered: set = field(default_factory=set)
    last_post: dict[int, float] = field(default_factory=dict)  # rank -> latest send post
    last_record_ts: float = 0.0
    fault_t: float | None = None
    fault_class: str | None = None

    @property
    def jid(self) -> int:
        return self.spec.job_id

    @property
    def n(self) -> int:
        return len(self.placement)

    def all_conns(self) -> list[Conn]:
        return [c for ch in self.conns for c in ch]

    def grank(self, r: int) -> int:
        return self.base + r


class _TracingQueue(RecordQueue):
    def __init__(self, sim: "Simulation"):
        super().__init__()
        self.sim = sim

    def on_pop(self, rec, tag) -> None:
        self.sim.trace.append(rec)
        if isinstance(rec, TransportRecord) and tag is not None:
            job = self.sim.jobs_by_id.get(tag[1])
            if job is not None:
                job.delivered.add((rec.rank, rec.qp, rec.seq))


def reroute_flow(topo: Topology, key: FlowKey, seed: int) -> tuple[FlowKey, Path]:
    """ECMP route of ``key``; when its source port is down the bond sends it
    out of the NIC's other port."""
    src = topo.host_link[(key.src_node, key.src_nic, key.src_side)]
    if not topo.links[src].is_up:
        key = FlowKey(key.src_node, key.dst_node, 2 * key.src_nic + 1 - key.src_side,
                      key.dst_nic_port, key.src_udp_port, key.dst_udp_port)
    return key, route(topo, key, seed)


class Simulation:
    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.topo = scenario.validate()
        self.pol = scenario.policies
        seed = scenario.run.seed
        self.ecmp_seed = int(substream(seed, "ecmp").integers(0, 2**62))
        self.probe_seed = int(substream(seed, "probe").integers(0, 2**62))
        self.port_rng = substream(seed, "ports")
        self.nvlink = scenario.topology.nvlink_gbps
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self._dirty = False
        self.solution: RateSolution | None = None

        self.queue = _TracingQueue(self)
        self.monitor = Monitor(MonitorParams(k_mad=self.pol.k_mad, rho=self.pol.rho,
                                             hang_factor=self.pol.hang_factor))
        self.trace: list[Record] = []
        self.iter_rows: list[IterRow] = []
        self.flow_rows: list[FlowRow] = []
        self.port_rows: list[PortSample] = []
        self.event_rows: list[EventRow] = []
        self.incidents: list[Incident] = []

        # physical fault state, keyed by location so it stays with the hardware
        self.compute_slow: dict[tuple[int, int], float] = {}
        self.noncomm_hung: set[tuple[int, int]] = set()
        self.comm_hung: dict[tuple[int, int], float] = {}
        self.crashed: dict[tuple[int, int], float] = {}
        self.slow_pairs: dict[tuple, float] = {}

        self.jobs: list[_Job] = []
        base = 0
        for spec in scenario.jobs:
            comm = spec.communicator()
            self.jobs.append(_Job(spec, base, list(spec.ranks), comm.ring_strides()))
            base += len(spec.ranks)
        self.jobs_by_id = {j.jid: j for j in self.jobs}
        used = {node for j in self.jobs for node, _ in j.placement}
        pool = scenario.backup_nodes
        if pool is None:
            pool = [n for n in range(len(self.topo.nodes)) if n not in used]
        self.cluster = ClusterState(
            placement={j.grank(r): node for j in self.jobs for r, (node, _) in enumerate(j.placement)},
            job_of={j.grank(r): j.jid for j in self.jobs for r in range(j.n)},
            backup_pool=list(pool))

        self.alloc = AllocationState()
        self.table: PathTable | None = None
        if self.pol.c4p:
            self.table = probe_paths(self.topo, seed=self.probe_seed)
        self.qp_of: dict[tuple[int, int], QpFlow] = {}
        self.conn_of_qp: dict[tuple[int, int], Conn] = {}

    # -- helpers ------------------------------------------------------------
    def _push(self, t: float, kind: str, *args) -> None:
        heapq.heappush(self._heap, (t, _PRIO[kind], next(self._seq), kind, args))

    def _event(self, kind: str, job: int, detail: str = "") -> None:
        self.event_rows.append(EventRow(self.now, kind, job, detail))
        log.debug("%.6f %s job=%d %s", self.now, kind, job, detail)

    def _record(self, rec: Record, tag=None) -> None:
        self.queue.push(rec, tag)

    def _comm_record(self, job: _Job) -> None:
        members = tuple(None if g in self.crashed else job.grank(r)
                        for r, g in enumerate(job.placement))
        self._record(CommRecord(self.now, job.jid, members,
                                tuple(f"{n}/{g}" for n, g in job.placement)))

    # -- QP placement -----------------------------------------------------------
    def _build_conns(self, job: _Job) -> None:
        spec, n = job.spec, job.n
        qn = spec.qps_per_channel
        job.conns = []
        for c, s in enumerate(job.strides):
            row = []
            for r in range(n):
                d = (r + s) % n
                conn = Conn(job.jid, c, r, d, job.placement[r], job.placement[d])
                if not conn.intra:
                    conn.qps = [QpFlow(job.jid, (c * n + r) * qn + j, j) for j in range(qn)]
                row.append(conn)
            job.conns.append(row)
        for conn in job.all_conns():
            for q in conn.qps:
                self.qp_of[(job.jid, q.qp_id)] = q
                self.conn_of_qp[(job.jid, q.qp_id)] = conn
                self._place_qp(conn, q)

    def _set_path(self, q: QpFlow, side: int, udp: int, path: Path | None) -> None:
        q.side, q.udp, q.path = side, udp, path
        q.alive = path is not None
        q.dlinks = path_dlinks(self.topo, path) if path is not None else []

    def _place_qp(self, conn: Conn, q: QpFlow) -> None:
        (sn, sg), (dn, dg) = conn.src, conn.dst
        if self.pol.c4p:
            req = QpRequest(conn.job, q.qp_id, sn, sg, dn, dg, q.slot)
            try:
                a = allocate(self.alloc, self.table, self.topo, req, self.ecmp_seed)
            except (AllocationError, ProbeCoverageError, RoutingError) as exc:
                self._set_path(q, q.slot % 2, 1, None)
                self._event("qp_failed", conn.job, f"qp {q.qp_id}: {exc}")
                return
            self._set_path(q, a.side, a.src_udp_port, a.path)
            return
        udp = int(self.port_rng.integers(1, 65536))
        key = FlowKey(sn, dn, 2 * sg + q.slot % 2, dg, udp)
        try:
            key, path = reroute_flow(self.topo, key, self.ecmp_seed)
        except RoutingError as exc:
            self._set_path(q, key.src_side, udp, None)
            self._event("qp_failed", conn.job, f"qp {q.qp_id}: {exc}")
            return
        self._set_path(q, key.src_side, udp, path)

    def _release_job(self, job: _Job) -> None:
        for conn in job.all_conns():
            for q in conn.qps:
                self.alloc.release(job.jid, q.qp_id)
                self.qp_of.pop((job.jid, q.qp_id), None)
                self.conn_of_qp.pop((job.jid, q.qp_id), None)

    def _refresh_from_alloc(self) -> None:
        for key, q in self.qp_of.items():
            a = self.alloc.assignments.get(key)
            if a is None:
                if q.alive:
                    self._set_path(q, q.side, q.udp, None)
                    self._event("qp_failed", key[0], f"qp {key[1]}: no spine left")
            elif a.path is not q.path or a.src_udp_port != q.udp:
                self._set_path(q, a.side, a.src_udp_port, a.path)

    # -- job lifecycle ------------------------------------------------------------
    def _job_start(self, job: _Job) -> None:
        self._build_conns(job)
        job.ckpt_time = self.now
        self._comm_record(job)
        self._event("job_start", job.jid, f"{job.n} ranks")
        self._start_iteration(job)

    def _start_iteration(self, job: _Job) -> None:
        if job.iteration >= job.spec.iterations:
            job.phase = "done"
            self._event("job_done", job.jid, f"iteration {job.iteration}")
            return
        job.phase = "compute"
        job.op_seq += 1
        job.iter_start = self.now
        job.entries.clear()
        job.frozen.clear()
        job.delivered.clear()
        job.last_post = {}
        for r, g in enumerate(job.placement):
            if g in self.noncomm_hung or g in self.crashed:
                end = math.inf
            else:
                end = self.now + job.spec.compute_of(r) * self.compute_slow.get(g, 1.0)
            self._schedule_compute(job, r, end)

    def _schedule_compute(self, job: _Job, r: int, end: float) -> None:
        job.comp_end[r] = end
        job.comp_ver[r] = job.comp_ver.get(r, 0) + 1
        if math.isfinite(end):
            self._push(end, "compute_done", job.jid, job.epoch, r, job.comp_ver[r])

    def _compute_done(self, job: _Job, r: int) -> None:
        job.entries[r] = self.now
        self._record(OpRecord(self.now, job.grank(r), job.jid, job.op_seq, "allreduce", "ring",
                              job.spec.total_bytes // 2, self.now), self._tag(job))
        if len(job.entries) == job.n:
            self._network_start(job)

    def _tag(self, job: _Job, layer: str = "O") -> tuple:
        return (layer, job.jid, job.epoch, job.op_seq)

    def _network_start(self, job: _Job) -> None:
        job.net_start = self.now
        n, k = job.n, len(job.strides)
        per_ch = chunk_split(job.spec.total_bytes, k)
        job.remaining = {c: bytes_per_connection(per_ch[c], n) for c in range(k)}
        job.rate = {c: 0.0 for c in range(k)}
        job.qp_bytes = {conn.key: [0.0] * max(1, len(conn.qps)) for conn in job.all_conns()}
        job.predicted_end = math.inf
        job.last_record_ts = self.now
        job.alpha = 1.0
        for r, g in enumerate(job.placement):
            hung = self.comm_hung.get(g, self.crashed.get(g))
            if hung is not None:
                job.frozen[r] = max(hung, job.entries[r])
        if job.frozen:
            self._stall(job, "hung rank entered the collective")
        else:
            job.phase = "comm"
            self._dirty = True

    def _stall(self, job: _Job, why: str) -> None:
        """The ring stops: no further progress and no completion event."""
        job.phase = "stalled"
        job.end_ver += 1
        self._dirty = True
        self._event("collective_stalled", job.jid, why)
        self._synthesize(job, self._wires_for(job), fit=False)

    def _wires_for(self, job: _Job) -> RateSolution:
        conns = [c for j in self.jobs if j.phase == "comm" for c in j.all_conns()]
        conns += job.all_conns()
        for c in conns:
            c.slow = self.slow_pairs.get((c.src, c.dst), 1.0)
        return solve_rates(conns, self.topo, self.nvlink, self.pol.dynamic_lb)

    def _active(self) -> list[_Job]:
        return [j for j in self.jobs if j.phase == "comm"]

    def _resolve(self) -> None:
        self._dirty = False
        active = self._active()
        conns = []
        for job in active:
            for ch in job.conns:
                if job.remaining[ch[0].channel] > 0:
                    conns.extend(ch)
        for c in conns:
            c.slow = self.slow_pairs.get((c.src, c.dst), 1.0)
        self.solution = sol = solve_rates(conns, self.topo, self.nvlink, self.pol.dynamic_lb)
        for job in active:
            job.end_ver += 1
            first = math.inf
            last = self.now
            for c, rem in job.remaining.items():
                if rem <= 0:
                    job.rate[c] = 0.0
                    continue
                job.rate[c] = sol.channel.get((job.jid, c), 0.0)
                t = self.now + rem / (job.rate[c] * _BYTES) if job.rate[c] > 0 else math.inf
                first, last = min(first, t), max(last, t)
            if math.isfinite(first):
                self._push(first, "coll_done", job.jid, job.epoch, job.end_ver)
            if last != job.predicted_end:
                job.predicted_end = last
                if math.isfinite(last):
                    self._synthesize(job, sol, fit=True)

    def _advance(self, t: float) -> None:
        dt = t - self.now
        if dt < 0:
            raise RuntimeError(f"time went backwards: {self.now} -> {t}")
        if dt > 0 and self.solution is not None:
            for job in self._active():
                for c, rem in job.remaining.items():
                    r = job.rate[c]
                    if rem <= 0 or r <= 0:
                        continue
                    moved = min(rem, r * _BYTES * dt)
                    job.remaining[c] = rem - moved
                    for conn in job.conns[c]:
                        shares = self.solution.share.get(conn.key, [1.0])
                        acc = job.qp_bytes[conn.key]
                        for i, s in enumerate(shares):
                            acc[i] += moved * s
        self.now = t

    def _channel_tick(self, job: _Job) -> None:
        done = True
        for c, rem in job.remaining.items():
            tol = 1e-9 * max(1.0, bytes_per_connection(job.spec.total_bytes, job.n))
            if rem <= tol:
                job.remaining[c] = 0.0
            else:
                done = False
        self._dirty = True
        if done:
            self._coll_done(job)

    def _coll_done(self, job: _Job) -> None:
        job.phase = "compute"
        t = max(self.now, job.last_record_ts)
        for r in range(job.n):
            self._record(OpRecord(t, job.grank(r), job.jid, job.op_seq, "allreduce", "ring",
                                  job.spec.total_bytes // 2, job.entries[r], t), self._tag(job))
        comm_s = self.now - job.net_start
        bw = busbw(job.spec.total_bytes, comm_s, job.n) if comm_s > 0 else math.inf
        self.iter_rows.append(IterRow(job.jid, job.iteration, job.op_seq, job.iter_start,
                                      job.net_start, self.now, comm_s, bw))
        self._flow_rows(job)
        job.iteration += 1
        if job.iteration % job.spec.checkpoint_interval_iters == 0:
            job.ckpt_iter, job.ckpt_time = job.iteration, self.now
            self._event("checkpoint", job.jid, f"iteration {job.iteration}")
        self._start_iteration(job)

    def _flow_rows(self, job: _Job) -> None:
        span = self.now - job.net_start
        for conn in job.all_conns():
            acc = job.qp_bytes[conn.key]
            if conn.intra:
                src = dst = f"n{conn.src[0]}/gpu{conn.src[1]}->gpu{conn.dst[1]}"
                rows = [(-1, src, dst, "nvlink", acc[0])]
            else:
                rows = []
                for q in conn.qps:
                    if q.path is None:
                        rows.append((q.qp_id, port_name(conn.src[0], conn.src[1], q.side), "-",
                                     "-", acc[q.slot]))
                        continue
                    rows.append((q.qp_id, port_name(conn.src[0], conn.src[1], q.side),
                                 port_name(*q.path.dst_port),
                                 "-".join(str(l) for l in q.path.links), acc[q.slot]))
            for qp, src, dst, path, nbytes in rows:
                gbps = nbytes / span / _BYTES if span > 0 else 0.0
                self.flow_rows.append(FlowRow(len(self.flow_rows), job.jid, job.op_seq, qp, src,
                                              dst, path, job.net_start, self.now, nbytes, gbps))

    # -- transport records ------------------------------------------------------
    def _synthesize(self, job: _Job, sol: RateSolution, fit: bool) -> None:
        if not self.sc.run.trace:
            return
        n, spec = job.n, job.spec
        for conn in job.all_conns():
            if conn.key in sol.share:
                job.last_share[conn.key] = (sol.share[conn.key], sol.wire[conn.key])
        qn = max(1, spec.qps_per_channel)
        per_ch = chunk_split(spec.total_bytes, len(job.strides))
        chans = []
        for c, stride in enumerate(job.strides):
            share, wire = np.zeros((n, qn)), np.zeros((n, qn))
            for r, conn in enumerate(job.conns[c]):
                sh, w = job.last_share.get(conn.key, ([], []))
                for i, (a, b) in enumerate(zip(sh, w)):
                    if b > 0:
                        share[r, i], wire[r, i] = a, b * _BYTES
            chans.append(RingChannel(stride, per_ch[c], share, wire))
        entries = np.array([job.entries[r] for r in range(n)])
        if fit:
            job.alpha = fit_alpha(n, chans, entries, job.predicted_end)
        msgs = ring_messages(n, chans, entries, job.alpha, job.frozen)
        if not job.frozen:
            job.last_post = {}
            for chan_msgs in msgs:
                for m in chan_msgs:
                    job.last_post[m.sender] = max(job.last_post.get(m.sender, -math.inf), m.post)
        tag = self._tag(job, "T")
        self.queue.purge(tag)
        for c, chan_msgs in enumerate(msgs):
            row = job.conns[c]
            for m in chan_msgs:
                conn = row[m.sender]
                qp = conn.qps[m.slot].qp_id if conn.qps else -(c + 1)
                g, seq = job.grank(m.sender), job.op_seq * SEQ_STRIDE + m.step
                if (g, qp, seq) in job.delivered:
                    continue
                ts = max(m.complete, self.now)
                job.last_record_ts = max(job.last_record_ts, ts)
                self._record(TransportRecord(ts, g, qp, job.grank(m.receiver), seq, m.nbytes,
                                             m.post, m.ready, m.complete), tag)

    # -- faults ---------------------------------------------------------------
    def _note_fault(self, job: _Job, f: Fault) -> None:
        if job.fault_t is None:
            job.fault_t, job.fault_class = self.now, ERROR_CLASS.get(f.kind, "unknown")

    def _fault(self, f: Fault) -> None:
        self._event("fault", f.job if f.kind not in ("link_down", "link_up", "link_degraded",
                                                     "nic_degraded") else -1, f.label())
        kind = f.kind
        if kind.startswith("link"):
            self._link_fault(f)
            return
        if kind == "nic_degraded":
            node, nic = f.target
            for side in (0, 1):
                set_link_state(self.topo, self.topo.host_link[(node, nic, side)], 1.0 / f.factor)
            for job in self.jobs:
                if (node, nic) in job.placement and job.phase not in ("done", "held"):
                    self._note_fault(job, f)
            self._dirty = True
            return
        job = self.jobs_by_id[f.job]
        if kind == "slow_connection":
            a, b = f.target
            self.slow_pairs[(job.placement[a], job.placement[b])] = f.factor
            self._note_fault(job, f)
            self._dirty = True
            return
        r = f.target[0]
        g = job.placement[r]
        self._note_fault(job, f)
        computing = job.phase == "compute" and r not in job.entries
        if kind == "slow_compute":
            self.compute_slow[g] = f.factor
            if computing and math.isfinite(job.comp_end[r]):
                left = job.comp_end[r] - self.now
                self._schedule_compute(job, r, self.now + left * f.factor)
        elif kind == "noncomm_hang":
            self.noncomm_hung.add(g)
            if computing:
                self._schedule_compute(job, r, math.inf)
        elif kind in ("comm_hang", "rank_crash"):
            if kind == "comm_hang":
                self.comm_hung[g] = self.now
            else:
                self.crashed[g] = self.now
                self._comm_record(job)
                if computing:
                    self._schedule_compute(job, r, math.inf)
            # a rank with every send of this op already posted only
            # notices at its next collective
            done_posting = job.last_post.get(r, math.inf) < self.now
            if job.phase == "comm" and not (kind == "comm_hang" and done_posting):
                job.frozen[r] = self.now
                self._stall(job, f"{kind} on rank {r}")

    def _link_fault(self, f: Fault) -> None:
        link = f.target[0]
        if f.kind == "link_degraded":
            set_link_state(self.topo, link, f.factor)
        else:
            set_link_state(self.topo, link, "down" if f.kind == "link_down" else "up")
        self._dirty = True
        managed = self.pol.c4p and self.pol.dynamic_lb
        if f.kind == "link_down":
            if managed:
                self.table, moved = on_link_fault(self.alloc, self.table, self.topo, link,
                                                  self.ecmp_seed, self.pol.full_reprobe)
                self._refresh_from_alloc()
                self._event("c4p_replan", -1, f"link {link}: {len(moved)} QPs moved")
                return
            for key, q in self.qp_of.items():
                if q.alive and link in q.path.links:
                    self._reroute(key, q)
        elif f.kind == "link_up":
            if managed:
                self.table = on_link_restore(self.alloc, self.table, self.topo, link,
                                             self.ecmp_seed)
                self._refresh_from_alloc()
                return
            for key, q in self.qp_of.items():
                if not q.alive:
                    self._reroute(key, q)

    def _reroute(self, key: tuple[int, int], q: QpFlow) -> None:
        conn = self.conn_of_qp[key]
        (sn, sg), (dn, dg) = conn.src, conn.dst
        fk = FlowKey(sn, dn, 2 * sg + q.side, dg, q.udp)
        try:
            fk, path = reroute_flow(self.topo, fk, self.ecmp_seed)
        except RoutingError as exc:
            self._set_path(q, q.side, q.udp, None)
            self._event("qp_failed", key[0], f"qp {key[1]}: {exc}")
            return
        self._set_path(q, fk.src_side, q.udp, path)
        self._event("reroute", key[0], f"qp {key[1]} via {'-'.join(map(str, path.links))}")

    # -- diagnosis and recovery ---------------------------------------------------
    def _on_diagnoses(self, diags: list[Diagnosis]) -> None:
        bad = [d for d in diags if not d.healthy]
        for d in bad:
            self._event("diagnosis", d.comm, d.line())
        if not bad or not self.pol.c4d:
            return
        isolated_before = set(self.cluster.isolated)
        actions = master_step(bad, self.cluster)
        restart: set[int] = set()
        for a in actions:
            if a.kind == "isolate":
                self._event("isolate", a.job, f"node {a.node} -> {a.replacement}")
            elif a.kind == "restart":
                restart.add(a.job)
            elif a.kind == "hold":
                self._event("hold", a.job, f"no backup for node {a.node}")
                self._abort(self.jobs_by_id[a.job], "held")
            elif a.kind == "log":
                self._event("logged", -1, a.reason)
        for node in set(self.cluster.isolated) - isolated_before:
            self._clear_node(node)
            restart.update(j.jid for j in self.jobs
                           if any(n == node for n, _ in j.placement)
                           and j.phase not in ("done", "held"))
        detect = self.now
        for jid in sorted(restart):
            job = self.jobs_by_id[jid]
            if job.phase in ("done", "held"):
                continue
            for r in range(job.n):
                job.placement[r] = (self.cluster.placement[job.grank(r)], job.placement[r][1])
            t_err = job.fault_t if job.fault_t is not None else detect
            t_err = max(t_err, job.ckpt_time)
            iso = detect + self.pol.isolate_s
            done = iso + self.pol.restart_s
            self.incidents.append(Incident(job.fault_class or "unknown", t_err, detect, iso, done,
                                           job.ckpt_time, incident_id=len(self.incidents)))
            self._abort(job, "restarting")
            self._push(done, "restart_done", jid, job.epoch)

    def _clear_node(self, node: int) -> None:
        for table in (self.compute_slow, self.comm_hung, self.crashed):
            for g in [g for g in table if g[0] == node]:
                del table[g]
        self.noncomm_hung = {g for g in self.noncomm_hung if g[0] != node}
        self.slow_pairs = {k: v for k, v in self.slow_pairs.items()
                           if k[0][0] != node and k[1][0] != node}

    def _abort(self, job: _Job, phase: str) -> None:
        """End the running incarnation of ``job``; open operations are void."""
        self.queue.purge(where=lambda t: t is not None and t[1] == job.jid)
        job.phase = phase
        job.epoch += 1
        job.end_ver += 1
        job.frozen.clear()
        self._dirty = True
        members = tuple(job.grank(r) for r in range(job.n))
        self._record(CommRecord(self.now, job.jid, members,
                                tuple(f"{n}/{g}" for n, g in job.placement)))
        self._event("abort", job.jid, phase)

    def _restart_done(self, job: _Job) -> None:
        self._release_job(job)
        job.last_share.clear()
        self._build_conns(job)
        job.iteration = job.ckpt_iter
        job.fault_t = job.fault_class = None
        job.ckpt_time = self.now
        self._comm_record(job)
        self._event("restart", job.jid, f"from iteration {job.ckpt_iter}")
        self._start_iteration(job)

    # -- sampling -----------------------------------------------------------------
    def _sample(self) -> None:
        if self._dirty:
            self._resolve()
        sol = self.solution
        load = sol.link_load if sol is not None else {}
        flows: dict[int, int] = {}
        for job in self._active():
            for conn in job.all_conns():
                for q, s in zip(conn.qps, sol.share.get(conn.key, []) if sol else []):
                    if s > 0:
                        for dl in q.dlinks:
                            flows[dl] = flows.get(dl, 0) + 1
        for ln in self.topo.links:
            for d in (0, 1):
                dl = 2 * ln.link_id + d
                a, b = (ln.endpoint_a, ln.endpoint_b) if d == 0 else (ln.endpoint_b, ln.endpoint_a)
                self.port_rows.append(PortSample(self.now, ln.link_id, "up" if d == 0 else "down",
                                                 a, b, load.get(dl, 0.0), ln.effective_gbps,
                                                 flows.get(dl, 0)))

    # -- main loop ----------------------------------------------------------------
    def _dispatch(self, kind: str, args: tuple) -> None:
        if kind == "fault":
            self._fault(args[0])
            return
        if kind == "sample":
            self._sample()
            busy = any(k != "sample" for _, _, _, k, _ in self._heap) or \
                self.monitor.deadline() is not None or self._active()
            if busy:
                self._push(self.now + self.sc.run.sample_interval_s, "sample")
            return
        job = self.jobs_by_id[args[0]]
        if kind == "job_start":
            self._job_start(job)
            return
        if args[1] != job.epoch:
            return  # belongs to an aborted incarnation
        if kind == "compute_done":
            r, ver = args[2], args[3]
            if job.phase == "compute" and job.comp_ver.get(r) == ver and r not in job.entries:
                self._compute_done(job, r)
        elif kind == "coll_done":
            if job.phase == "comm" and args[2] == job.end_ver:
                self._channel_tick(job)
        elif kind == "restart_done":
            if job.phase == "restarting":
                self._restart_done(job)

    def run(self) -> RunReport:
        for job in self.jobs:
            self._push(job.spec.start_s, "job_start", job.jid)
        for f in self.sc.faults:
            self._push(f.time_s, "fault", f)
        if self.sc.run.sample_interval_s > 0:
            self._push(0.0, "sample")
        horizon = self.sc.run.duration_s
        while True:
            t_next = self._heap[0][0] if self._heap else math.inf
            if self._dirty and t_next > self.now:
                self._resolve()
                continue
            lim = min(t_next, horizon)
            if not math.isfinite(lim):
                tail = [x for x in (self.queue.last_ts(), self.monitor.deadline()) if x is not None]
                lim = max(tail, default=None)
            if lim is not None:
                diags = self.monitor.pump(self.queue, lim)
                if diags:
                    self._advance(max(self.now, max(d.time_s for d in diags)))
                    self._on_diagnoses(diags)
                    continue
            if not self._heap or t_next > horizon:
                break
            t, _, _, kind, args = heapq.heappop(self._heap)
            self._advance(t)
            self._dispatch(kind, args)
        if math.isfinite(horizon):
            end = max(self.now, horizon)
        else:
            # the monitor may have read records stamped after the last event
            end = max([self.now] + [r.ts for r in self.trace[-1:]])
        if math.isfinite(horizon) and self.now < horizon:
            self._advance(horizon)
        return self._report(end)

    def _report(self, end: float) -> RunReport:
        ledger = ledger_from_incidents(self.incidents, end) if end > 0 else None
        paths = {k: (tuple(q.path.links) if q.path is not None else None)
                 for k, q in sorted(self.qp_of.items())}
        return RunReport(self.sc.run.seed, end, self.iter_rows, self.flow_rows, self.port_rows,
                         self.event_rows, list(self.monitor.diagnoses), self.incidents, ledger,
                         self.alloc.log_lines() if self.pol.c4p else "",
                         self.table.dump() if self.table is not None else "",
                         self.trace, paths, {j.jid: j.phase for j in self.jobs})


def run(scenario: Scenario) -> RunReport:
    """Simulate ``scenario`` to completion (or its horizon)."""
    return Simulation(scenario).run()
