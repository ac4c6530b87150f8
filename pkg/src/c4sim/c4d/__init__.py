"""Fault detection and diagnosis over collective-communication telemetry."""

from .detect import (
    Diagnosis, LatencyMatrix, build_latency_matrix, classify_matrix, detect_hang,
    detect_noncomm_slow, mad_flags,
)
from .downtime import (
    DowntimeLedger, DowntimeRegime, Incident, LifecycleEvent, downtime_breakdown,
    ledger_from_incidents, monte_carlo, simulate_month,
)
from .master import Action, ClusterState, master_step
from .monitor import Monitor, MonitorParams, RecordQueue, replay, replay_monitor
from .records import (
    CommRecord, OpRecord, TransportRecord, format_record, parse_line, read_trace, write_trace,
)

__all__ = [
    "Action", "ClusterState", "CommRecord", "Diagnosis", "DowntimeLedger", "DowntimeRegime",
    "Incident", "LatencyMatrix", "LifecycleEvent", "Monitor", "MonitorParams", "OpRecord",
    "RecordQueue", "TransportRecord", "build_latency_matrix", "classify_matrix", "detect_hang",
    "detect_noncomm_slow", "downtime_breakdown", "format_record", "ledger_from_incidents",
    "mad_flags", "master_step", "monte_carlo", "parse_line", "read_trace", "replay",
    "replay_monitor",
    "replay_monitor", "simulate_month", "write_trace",
]
