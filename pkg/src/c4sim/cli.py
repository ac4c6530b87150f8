"""Command-line front end: ``c4sim run|probe|diagnose|report``.

Exit codes: 0 on success, 2 for invalid input (configuration, trace or
bundle), 3 when the simulation itself fails.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .c4d.downtime import monte_carlo
from .c4d.monitor import MonitorParams, replay_monitor
from .c4d.records import read_trace
from .c4p import probe_paths
from .config import Config, load_config, preset_names
from .errors import C4SimError, ProbeCoverageError, TraceFormatError, ValidationError
from .report import bundle_files, diagnosis_csv, downtime_csv, monte_carlo_csv, summarize, write_files
from .simengine.engine import run as run_scenario, substream
from .topology import set_link_state

log = logging.getLogger("c4sim")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3


def _seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    a, sep, b = text.partition("..")
    try:
        lo, hi = int(a), int(b) if sep else int(a)
    except ValueError:
        raise ValidationError(f"--seeds wants a..b, got {text!r}") from None
    if hi < lo:
        raise ValidationError(f"--seeds range is empty: {text!r}")
    return list(range(lo, hi + 1))


def _out_dir(arg: str | None) -> Path | None:
    d = arg or os.environ.get("C4SIM_OUT")
    return Path(d) if d else None


def _run_files(cfg: Config) -> dict[str, str]:
    files: dict[str, str] = {}
    if cfg.scenario.jobs:
        rep = run_scenario(cfg.scenario)
        files.update(bundle_files(rep))
    if cfg.downtime is not None:
        rng = substream(cfg.scenario.run.seed, "downtime")
        mc = monte_carlo(cfg.downtime, cfg.trials, rng)
        files["monte_carlo.csv"] = monte_carlo_csv(mc, cfg.downtime.expected_fractions())
        if "downtime.csv" not in files:
            # no simulated jobs: the breakdown is the Monte-Carlo month
            files["downtime.csv"] = downtime_csv(mc)
    return files


def cmd_run(args) -> int:
    seeds = _seeds(args.seeds)
    overrides = list(args.set or [])
    # validate everything before producing any output
    configs = []
    for s in seeds or [None]:
        extra = [] if s is None else [f"run.seed={s}"]
        configs.append((s, load_config(args.config, overrides + extra)))
    out = _out_dir(args.out) or Path("c4sim_out")
    sweep_rows = []
    for s, cfg in configs:
        try:
            files = _run_files(cfg)
        except (ValidationError, TraceFormatError):
            raise
        except Exception as exc:  # the simulation itself broke
            log.error("run failed: %s", exc)
            return EXIT_RUNTIME
        target = out if s is None else out / f"seed_{s}"
        write_files(target, files)
        if "iterations.csv" in files:
            text, _ = summarize(target)
            sweep_rows.append((s, text))
        print(f"{cfg.name}: wrote {len(files)} files to {target}")
    for s, text in sorted(sweep_rows, key=lambda r: (r[0] is not None, r[0])):
        if s is not None:
            print(f"-- seed {s}")
        sys.stdout.write(text)
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = load_config(args.config, args.set or [])
    topo = cfg.scenario.topology.build()
    for f in cfg.scenario.faults:
        if f.kind == "link_down":
            set_link_state(topo, f.target[0], "down")
        elif f.kind == "link_up":
            set_link_state(topo, f.target[0], "up")
    seed = int(substream(cfg.scenario.run.seed, "probe").integers(0, 2**62))
    table = probe_paths(topo, cfg.probers, seed=seed)
    sys.stdout.write(table.dump())
    return EXIT_OK


def cmd_diagnose(args) -> int:
    with open(args.trace, encoding="utf-8") as fh:
        records, end_s = read_trace(fh)
    params = MonitorParams(k_mad=args.k_mad, rho=args.rho, hang_factor=args.hang_factor)
    mon = replay_monitor(records, end_s, params, keep_order=True)
    for comm_id, c in sorted(mon.comms.items()):
        for k in sorted(set(c.ops) - c.judged):
            log.warning("comm %d: operation %d incomplete in trace; window skipped", comm_id, k)
    text = diagnosis_csv(mon.diagnoses)
    out = _out_dir(args.out)
    if out is not None:
        write_files(out, {"diagnosis.csv": text})
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    text, figs = summarize(Path(args.bundle))
    out = _out_dir(args.out) or Path(args.bundle)
    write_files(out, figs)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="c4sim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario (or a seed sweep)")
    r.add_argument("--config", required=True,
                   help=f"config path or preset ({', '.join(preset_names())})")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    r.add_argument("--seeds", metavar="A..B", help="run every seed in the inclusive range")
    r.add_argument("--out", help="output directory (default $C4SIM_OUT or ./c4sim_out)")
    r.add_argument("--format", choices=["csv"], default="csv")
    r.set_defaults(func=cmd_run)

    pr = sub.add_parser("probe", help="print the reachable spine table")
    pr.add_argument("--config", required=True)
    pr.add_argument("--set", action="append", metavar="KEY=VALUE")
    pr.set_defaults(func=cmd_probe)

    d = sub.add_parser("diagnose", help="replay a trace through the monitor")
    d.add_argument("trace")
    d.add_argument("--k-mad", type=float, default=MonitorParams.k_mad)
    d.add_argument("--rho", type=float, default=MonitorParams.rho)
    d.add_argument("--hang-factor", type=float, default=MonitorParams.hang_factor)
    d.add_argument("--out")
    d.add_argument("--format", choices=["csv"], default="csv")
    d.set_defaults(func=cmd_diagnose)

    rp = sub.add_parser("report", help="summarize a bundle and write figure-data CSVs")
    rp.add_argument("bundle")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, TraceFormatError, ProbeCoverageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except C4SimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
