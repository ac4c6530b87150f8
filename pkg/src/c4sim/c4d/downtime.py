"""Incident lifecycles, downtime aggregation and a Monte-Carlo month model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from ..errors import LedgerError

PHASES = ("last_checkpoint", "error", "detect", "isolated", "restart_done")
COMPONENTS = ("post_checkpoint", "detection", "diagnosis_isolation", "re_initialization")


@dataclass
class Incident:
    error_class: str
    t_error: float
    t_detect: float
    t_isolated: float
    t_restart_done: float
    t_last_checkpoint: float
    t_diagnose: float | None = None
    incident_id: int = 0

    def __post_init__(self):
        if self.t_diagnose is None:
            self.t_diagnose = self.t_detect
        chain = (self.t_last_checkpoint, self.t_error, self.t_detect, self.t_isolated,
                 self.t_restart_done)
        if any(a > b for a, b in zip(chain, chain[1:])):
            raise LedgerError([self.incident_id])

    def components(self) -> dict[str, float]:
        return {
            "post_checkpoint": self.t_error - self.t_last_checkpoint,
            "detection": self.t_detect - self.t_error,
            "diagnosis_isolation": self.t_isolated - self.t_detect,
            "re_initialization": self.t_restart_done - self.t_isolated,
        }


@dataclass(frozen=True)
class LifecycleEvent:
    incident: int
    phase: str  # one of PHASES
    t: float
    error_class: str = ""


@dataclass
class DowntimeLedger:
    incidents: list[Incident]
    wall_time_s: float
    fractions: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return sum(self.fractions.values())

    def rows(self) -> list[tuple[str, float]]:
        return [(k, self.fractions[k]) for k in COMPONENTS] + [("total", self.total)]


def ledger_from_incidents(incidents: Iterable[Incident], wall_time_s: float) -> DowntimeLedger:
    if wall_time_s <= 0:
        raise ValueError("wall_time_s must be > 0")
    incidents = list(incidents)
    sums = dict.fromkeys(COMPONENTS, 0.0)
    for inc in incidents:
        for k, v in inc.components().items():
            sums[k] += v
    fr = {k: v / wall_time_s for k, v in sums.items()}
    return DowntimeLedger(incidents, wall_time_s, fr)


def downtime_breakdown(events: Iterable[LifecycleEvent], wall_time_s: float) -> DowntimeLedger:
    """Aggregate matched incident lifecycles into wall-time fractions."""
    by_id: dict[int, dict[str, LifecycleEvent]] = {}
    for e in events:
        if e.phase not in PHASES:
            raise ValueError(f"unknown lifecycle phase {e.phase!r}")
        by_id.setdefault(e.incident, {})[e.phase] = e
    orphans = sorted(i for i, ph in by_id.items() if set(ph) != set(PHASES))
    if orphans:
        raise LedgerError(orphans)
    incidents = []
    for i in sorted(by_id):
        ph = by_id[i]
        cls = ph["error"].error_class
        incidents.append(Incident(cls, ph["error"].t, ph["detect"].t, ph["isolated"].t,
                                  ph["restart_done"].t, ph["last_checkpoint"].t, incident_id=i))
    return ledger_from_incidents(incidents, wall_time_s)


# -- Monte-Carlo regime model ---------------------------------------------

@dataclass(frozen=True)
class DowntimeRegime:
    """Incident statistics of one operating period (times in hours)."""

    incidents_per_month: float
    checkpoint_interval_h: float
    detection_h: float
    reinit_h: float
    diagnosis_h: Mapping[str, float]      # mean diagnosis+isolation time per class
    class_mix: Mapping[str, float]        # relative incident frequency per class
    month_h: float = 720.0
    shape: float = 2.0                    # gamma shape for the duration draws

    def mean_diagnosis_h(self) -> float:
        tot = sum(self.class_mix.values())
        return sum(self.class_mix[c] / tot * self.diagnosis_h[c] for c in self.class_mix)

    def expected_fractions(self) -> dict[str, float]:
        """Closed form: incident rate x mean cost of each phase over wall time."""
        r = self.incidents_per_month / self.month_h
        return {
            "post_checkpoint": r * self.checkpoint_interval_h / 2,
            "detection": r * self.detection_h,
            "diagnosis_isolation": r * self.mean_diagnosis_h(),
            "re_initialization": r * self.reinit_h,
        }


def _gamma(rng: np.random.Generator, mean: float, shape: float, size: int) -> np.ndarray:
    if mean <= 0:
        return np.zeros(size)
    return rng.gamma(shape, mean / shape, size)


def simulate_month(regime: DowntimeRegime, rng: np.random.Generator) -> DowntimeLedger:
    n = int(rng.poisson(regime.incidents_per_month))
    classes = sorted(regime.class_mix)
    p = np.array([regime.class_mix[c] for c in classes], dtype=float)
    drawn = rng.choice(len(classes), size=n, p=p / p.sum()) if n else np.array([], int)
    t_err = np.sort(rng.uniform(0.0, regime.month_h, n))
    gap = rng.uniform(0.0, regime.checkpoint_interval_h, n)
    det = _gamma(rng, regime.detection_h, regime.shape, n)
    rei = _gamma(rng, regime.reinit_h, regime.shape, n)
    diag = np.array([_gamma(rng, regime.diagnosis_h[classes[k]], regime.shape, 1)[0]
                     for k in drawn])
    incidents = []
    for i in range(n):
        t0 = float(t_err[i])
        td = t0 + float(det[i])
        ti = td + float(diag[i])
        incidents.append(Incident(classes[drawn[i]], t0, td, ti, ti + float(rei[i]),
                                  t0 - float(gap[i]), incident_id=i))
    return ledger_from_incidents(incidents, regime.month_h)


def monte_carlo(regime: DowntimeRegime, trials: int, rng: np.random.Generator
                ) -> dict[str, float]:
    """Mean wall-time fraction per component (and ``total``) over ``trials`` months."""
    acc = dict.fromkeys(COMPONENTS, 0.0)
    for _ in range(trials):
        led = simulate_month(regime, rng)
        for k in COMPONENTS:
            acc[k] += led.fractions[k]
    out = {k: v / trials for k, v in acc.items()}
    out["total"] = sum(out[k] for k in COMPONENTS)
    return out


# counts per class over the representative month (40 incidents)
JUNE_MIX = {"cuda": 5, "ecc_nvlink": 11, "nccl_timeout": 8, "ack_timeout": 11, "unknown": 5}
