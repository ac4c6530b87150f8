"""CSV report bundles.

Every file has a fixed header row.  Floats are written with ``repr`` so the
text is locale-independent and round-trips exactly; two runs of the same
scenario therefore produce byte-identical bundles.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import statistics
from pathlib import Path
from typing import Iterable, Sequence

from .c4d.detect import Diagnosis
from .c4d.downtime import COMPONENTS, DowntimeLedger, Incident
from .c4d.records import write_trace
from .errors import ValidationError
from .simengine.engine import EventRow, FlowRow, IterRow, PortSample, RunReport

HEADERS = {
    "iterations.csv": [f.name for f in dataclasses.fields(IterRow)],
    "flows.csv": [f.name for f in dataclasses.fields(FlowRow)],
    "ports.csv": [f.name for f in dataclasses.fields(PortSample)],
    "events.csv": [f.name for f in dataclasses.fields(EventRow)],
    "diagnosis.csv": ["window", "comm", "time_s", "verdict", "targets", "evidence"],
    "downtime.csv": ["component", "fraction"],
    "incidents.csv": ["incident", "error_class", "t_last_checkpoint", "t_error", "t_detect",
                      "t_isolated", "t_restart_done"],
    "allocation.csv": ["job", "qp", "spine", "src_udp_port"],
}
REQUIRED = ("iterations.csv", "ports.csv", "downtime.csv")


def fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "-"
    return str(v)


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def diagnosis_rows(diags: Iterable[Diagnosis]) -> list[tuple]:
    return [(d.window, d.comm, d.time_s, d.verdict, d.targets_text(), d.evidence_text())
            for d in diags]


def diagnosis_csv(diags: Iterable[Diagnosis]) -> str:
    return _csv_text(HEADERS["diagnosis.csv"], diagnosis_rows(diags))


def downtime_rows(ledger: DowntimeLedger | None) -> list[tuple]:
    if ledger is None:
        return [(k, 0.0) for k in COMPONENTS] + [("total", 0.0)]
    return ledger.rows()


def incident_rows(incidents: Iterable[Incident]) -> list[tuple]:
    return [(i.incident_id, i.error_class, i.t_last_checkpoint, i.t_error, i.t_detect,
             i.t_isolated, i.t_restart_done) for i in incidents]


def allocation_rows(log_text: str) -> list[tuple]:
    out = []
    for line in log_text.splitlines():
        if line.startswith("A "):
            _, job, qp, spine, udp = line.split()
            out.append((int(job), int(qp), int(spine), int(udp)))
    return out


def bundle_files(rep: RunReport) -> dict[str, str]:
    """File name -> content for one run."""
    astuple = dataclasses.astuple
    files = {
        "iterations.csv": _csv_text(HEADERS["iterations.csv"], map(astuple, rep.iterations)),
        "flows.csv": _csv_text(HEADERS["flows.csv"], map(astuple, rep.flows)),
        "ports.csv": _csv_text(HEADERS["ports.csv"], map(astuple, rep.ports)),
        "events.csv": _csv_text(HEADERS["events.csv"], map(astuple, rep.events)),
        "diagnosis.csv": diagnosis_csv(rep.diagnoses),
        "downtime.csv": _csv_text(HEADERS["downtime.csv"], downtime_rows(rep.ledger)),
        "incidents.csv": _csv_text(HEADERS["incidents.csv"], incident_rows(rep.incidents)),
        "allocation.csv": _csv_text(HEADERS["allocation.csv"], allocation_rows(rep.allocation_log)),
        "paths.txt": rep.path_table,
    }
    buf = io.StringIO()
    write_trace(rep.trace, buf, rep.end_s)
    files["trace.txt"] = buf.getvalue()
    return files


def write_files(out: Path, files: dict[str, str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, text in sorted(files.items()):
        (out / name).write_text(text, encoding="utf-8")


def write_bundle(rep: RunReport, out: Path) -> None:
    write_files(Path(out), bundle_files(rep))


def downtime_csv(fractions: dict[str, float]) -> str:
    """``downtime.csv`` from per-component fractions (plus ``total``)."""
    rows = [(k, fractions[k]) for k in COMPONENTS] + [("total", fractions["total"])]
    return _csv_text(HEADERS["downtime.csv"], rows)


def monte_carlo_csv(mc: dict[str, float], closed: dict[str, float]) -> str:
    rows = [(k, mc[k], closed[k]) for k in COMPONENTS]
    rows.append(("total", mc["total"], sum(closed.values())))
    return _csv_text(["component", "monte_carlo", "closed_form"], rows)


# -- reading bundles back ------------------------------------------------------

def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def summarize(bundle: Path) -> tuple[str, dict[str, str]]:
    """Summary text and figure-data CSVs for a bundle directory."""
    bundle = Path(bundle)
    # a downtime-only bundle (no simulated jobs) carries just the breakdown
    need = ["downtime.csv"] if (bundle / "monte_carlo.csv").is_file() and not (
        bundle / "iterations.csv").exists() else REQUIRED
    missing = [n for n in need if not (bundle / n).is_file()]
    if missing:
        raise ValidationError(f"bundle {bundle} lacks {', '.join(missing)}")
    iters = read_csv(bundle / "iterations.csv") if "iterations.csv" in need else []
    per_job: dict[int, list[float]] = {}
    for r in iters:
        bw = float(r["busbw_gbps"])
        if math.isfinite(bw):
            per_job.setdefault(int(r["job"]), []).append(bw)
    lines = []
    bw_rows = []
    for job in sorted(per_job):
        v = per_job[job]
        bw_rows.append((job, len(v), statistics.mean(v), min(v), max(v)))
        lines.append(f"job {job}: busbw mean {statistics.mean(v):.2f} Gbps "
                     f"(min {min(v):.2f}, max {max(v):.2f}, {len(v)} collectives)")
    means = [r[2] for r in bw_rows]
    if len(means) > 1:
        spread = (max(means) - min(means)) / max(means)
        lines.append(f"spread across jobs: {100 * spread:.2f}%")
    ports = read_csv(bundle / "ports.csv") if "ports.csv" in need else []
    series: dict[str, list[tuple[float, float]]] = {}
    for p in ports:
        if float(p["gbps"]) > 0 or p["src"].startswith("leaf"):
            key = f"{p['src']}->{p['dst']}"
            series.setdefault(key, []).append((float(p["time_s"]), float(p["gbps"])))
    port_rows = [(k, t, g) for k in sorted(series) for t, g in series[k]]
    down = read_csv(bundle / "downtime.csv")
    dt_rows = [(r["component"], float(r["fraction"])) for r in down]
    for comp, frac in dt_rows:
        lines.append(f"downtime {comp}: {100 * frac:.3f}%")
    figs = {
        "busbw_per_job.csv": _csv_text(["job", "collectives", "mean_gbps", "min_gbps",
                                        "max_gbps"], bw_rows),
        "port_series.csv": _csv_text(["port", "time_s", "gbps"], port_rows),
        "downtime_breakdown.csv": _csv_text(["component", "fraction"], dt_rows),
    }
    return "\n".join(lines) + "\n", figs
