"""Randomized single-fault scenarios with their expected verdicts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import substream
from .scenario import Fault, JobSpec, Policies, RunSpec, Scenario, TopologySpec

CORPUS_FAULTS = ("slow_connection", "slow_compute", "nic_degraded", "rank_crash", "comm_hang",
                 "noncomm_hang")
EXPECTED_VERDICT = {
    "slow_connection": "connection_slow", "slow_compute": "noncomm_slow",
    "nic_degraded": "node_slow", "rank_crash": "crash", "comm_hang": "comm_hang",
    "noncomm_hang": "noncomm_hang",
}


@dataclass
class CorpusCase:
    scenario: Scenario
    fault: Fault | None
    verdict: str           # expected verdict ("healthy" for fault-free cases)
    targets: tuple         # expected targets in global ranks


def corpus_case(seed: int, kind: str | None, ranks: int = 8, channels: int = 4,
                compute_s: float = 0.04, total_bytes: int = 1 << 29,
                iterations: int = 10) -> CorpusCase:
    """One 8-rank job on distinct random nodes of the 16-node testbed.

    The fault (if any) strikes at a random point of iteration 4 or 5 with
    a severity drawn from [3, 4].
    """
    rng = substream(seed, f"corpus:{kind}")
    nodes = rng.choice(16, size=ranks, replace=False)
    gpus = rng.integers(0, 8, size=ranks)
    placement = [(int(n), int(g)) for n, g in zip(nodes, gpus)]
    job = JobSpec(0, placement, total_bytes, compute_s, iterations, channels=channels,
                  qps_per_channel=2)
    iter_s = compute_s + total_bytes * 8 * 2 * (ranks - 1) / ranks / 362e9
    sc = Scenario(TopologySpec(), [job], [], Policies(), RunSpec(seed=seed))
    if kind is None:
        return CorpusCase(sc, None, "healthy", ())
    t = iter_s * (4 + rng.uniform(0.05, 1.95))
    factor = float(rng.uniform(3.0, 4.0))
    r = int(rng.integers(0, ranks))
    if kind == "slow_connection":
        stride = job.communicator().ring_strides()[int(rng.integers(0, channels))]
        d = (r + stride) % ranks
        f = Fault(t, kind, (r, d), 0, factor)
        targets: tuple = ((r, d),)
    elif kind == "nic_degraded":
        f = Fault(t, kind, placement[r], 0, factor)
        targets = (r,)
    else:
        f = Fault(t, kind, (r,), 0, factor if kind == "slow_compute" else 1.0)
        targets = (r,)
    sc.faults = [f]
    # long enough for detection and one restart; the ring never recovers
    # from hangs without one
    sc.run.duration_s = t + 6 * iter_s + sc.policies.restart_s
    return CorpusCase(sc, f, EXPECTED_VERDICT[kind], targets)
