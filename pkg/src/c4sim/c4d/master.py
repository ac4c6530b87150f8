"""Isolate-and-restart policy driven by diagnoses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .detect import Diagnosis

# verdicts that implicate a node and justify pulling it from service
ISOLATING = frozenset({"crash", "noncomm_hang", "comm_hang", "noncomm_slow", "source_slow",
                       "destination_slow", "node_slow"})


@dataclass
class ClusterState:
    placement: dict[int, int]  # global rank -> node
    job_of: dict[int, int]     # global rank -> job
    backup_pool: list[int] = field(default_factory=list)
    isolated: set[int] = field(default_factory=set)


@dataclass(frozen=True)
class Action:
    kind: str  # isolate | restart | hold | log | none
    node: int | None = None
    job: int | None = None
    replacement: int | None = None
    reason: str = ""


def master_step(diagnoses: Iterable[Diagnosis], state: ClusterState) -> list[Action]:
    """Turn verdicts into actions, mutating ``state``.

    Each faulty node is isolated once and swapped for a backup node; every
    affected job restarts once from its last checkpoint.  With the pool
    empty the job is held instead.
    """
    actions: list[Action] = []
    restarted: set[int] = set()
    held: set[int] = set()
    diagnoses = list(diagnoses)
    # resolve nodes up front: isolating one node remaps its ranks, and a later
    # verdict on the same node must not chase them onto the replacement
    origin = dict(state.placement)
    for d in diagnoses:
        if d.healthy:
            continue
        if d.verdict not in ISOLATING:
            actions.append(Action("log", reason=d.line()))
            continue
        for g in d.targets:
            node, job = origin[g], state.job_of[g]
            if node in state.isolated:
                continue
            if not state.backup_pool:
                if job not in held:
                    held.add(job)
                    actions.append(Action("hold", node, job, reason=d.line()))
                continue
            repl = state.backup_pool.pop(0)
            state.isolated.add(node)
            for r, n in state.placement.items():
                if n == node:
                    state.placement[r] = repl
            actions.append(Action("isolate", node, job, repl, d.line()))
            if job not in restarted:
                restarted.add(job)
                actions.append(Action("restart", job=job, reason=d.line()))
    # a restart supersedes holding the same job
    actions = [a for a in actions if not (a.kind == "hold" and a.job in restarted)]
    return actions or [Action("none")]
