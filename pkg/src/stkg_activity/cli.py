"""Command-line entry point: ``stkg-activity <subcommand> [flags]``.

Exit codes: 0 success, 1 input error (bad flags, missing or malformed
files), 2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from .baselines import BaselineConfig
from .community import InvariantError, TOLERANCE
from .evaluation import RADIUS_THRESHOLD, MetricsReport
from .ingest import GridConfig, read_record_batch
from .pipeline import (
    DEFAULT_BATCH,
    AtomicWriters,
    PipelineConfig,
    baseline_batch,
    collect,
    detect_batch,
    evaluate_method,
    location_lines,
    read_locations_jsonl,
    read_stays_jsonl,
    read_trace_jsonl,
    record_jobs,
    reference_labels,
    stay_lines,
    synth_jobs,
    trace_lines,
    write_atomic,
)
from .preprocess import OscillationParams, filter_batch, smooth_batch
from .stays import MidnightPolicy, extract_stay_batch
from .stkg import build_stkg, infer_spatial_relations, infer_temporal_relations, write_triples
from .synth import SynthConfig, SynthError, generate_users, make_towers, read_truth

COUNTERS = (
    "users",
    "records_read",
    "records_skipped",
    "oscillations_removed",
    "trace_points",
    "stays",
    "passbys",
    "communities",
    "locations_grid",
    "locations_dbscan",
)


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}") from None
    return a, b


def _date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected YYYY-MM-DD, got {text!r}") from None


def _gap(text: str) -> int | None:
    if text == "unlimited":
        return None
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'unlimited', got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("grid and time")
    g.add_argument("--grid-origin", type=_pair, default=(121.0, 31.0), metavar="LON,LAT")
    g.add_argument("--cell-size", type=float, default=500.0, help="grid cell side in meters")
    g.add_argument("--epoch-date", type=_date, default=dt.date(2019, 6, 1), help="date of day 0")
    o = p.add_argument_group("oscillation filter")
    o.add_argument("--max-speed", type=float, default=33.3, help="m/s")
    o.add_argument("--pingpong-window", type=float, default=600.0, help="seconds")
    o.add_argument("--ratio-band", type=_pair, default=(0.67, 1.5), metavar="LO,HI")
    o.add_argument("--return-radius", type=float, default=200.0, help="meters")
    s = p.add_argument_group("stays and detection")
    s.add_argument("--midnight-policy", choices=[m.value for m in MidnightPolicy], default="wrap")
    s.add_argument("--max-gap-slots", type=_gap, default=None, metavar="N|unlimited")
    s.add_argument("--tolerance", type=float, default=TOLERANCE, help="minimum modularity gain")
    s.add_argument("--d", type=float, default=500.0, help="grid-baseline distance threshold (m)")
    s.add_argument("--epsilon", type=float, default=1000.0, help="DBSCAN radius (m)")
    s.add_argument("--min-pts", type=int, default=1)
    s.add_argument("--radius-threshold", type=float, default=RADIUS_THRESHOLD)
    r = p.add_argument_group("execution")
    r.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    r.add_argument("--batch-size", type=int, default=DEFAULT_BATCH, help="users per work unit")
    r.add_argument("--debug-invariants", action="store_true")


def _synth_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic data")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--users", type=int, default=100)
    g.add_argument("--days", type=int, default=14)
    g.add_argument("--hard-fraction", type=float, default=0.5)
    g.add_argument("--handover-interval", type=float, default=None, help="mean seconds between tower handovers")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stkg-activity", description="Activity-location identification from sighting records.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("synth", help="generate a synthetic corpus")
    _common(c)
    _synth_flags(c)
    c.add_argument("--out-dir", type=Path, required=True)

    c = sub.add_parser("preprocess", help="filter oscillations and smooth records to trace points")
    _common(c)
    c.add_argument("--input", type=Path, required=True, help="records CSV")
    c.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("stays", help="extract stays from trace points")
    _common(c)
    c.add_argument("--input", type=Path, required=True, help="trace.jsonl")
    c.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("stkg", help="emit knowledge-graph triples")
    _common(c)
    c.add_argument("--input", type=Path, required=True, help="stays.jsonl")
    c.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("detect", help="community detection on the spatiotemporal graph")
    _common(c)
    c.add_argument("--input", type=Path, required=True, help="stays.jsonl")
    c.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("baseline", help="grid and DBSCAN baselines")
    _common(c)
    c.add_argument("--input", type=Path, required=True, help="trace.jsonl")
    c.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("evaluate", help="metrics from a results directory")
    _common(c)
    c.add_argument("--dir", type=Path, required=True, help="directory with stays and locations files")
    c.add_argument("--truth", type=Path, help="truth.jsonl for ARI and separation scores")
    c.add_argument("--records", type=Path, help="records CSV (needed with --truth)")

    c = sub.add_parser("all", help="run the whole pipeline")
    _common(c)
    _synth_flags(c)
    c.add_argument("--input", type=Path, help="records CSV; synthesize when omitted")
    c.add_argument("--truth", type=Path, help="truth.jsonl for an --input corpus")
    c.add_argument("--out", type=Path, required=True)
    c.add_argument("--write-trace", action="store_true", help="also write trace.jsonl")
    return p


def config_from_args(a: argparse.Namespace) -> PipelineConfig:
    try:
        grid = GridConfig(origin_lon=a.grid_origin[0], origin_lat=a.grid_origin[1], cell_size=a.cell_size,
                          epoch_date=a.epoch_date)
        osc = OscillationParams(max_speed=a.max_speed, pingpong_window=a.pingpong_window,
                                ratio_band=a.ratio_band, return_radius=a.return_radius)
        base = BaselineConfig(d=a.d, epsilon=a.epsilon, min_pts=a.min_pts)
        synth = None
        if hasattr(a, "seed"):
            synth = SynthConfig(seed=a.seed, n_users=a.users, n_days=a.days, hard_case_fraction=a.hard_fraction,
                                handover_interval=a.handover_interval, grid=grid)
    except ValueError as e:
        raise InputError(str(e)) from None
    if a.workers < 1 or a.batch_size < 1:
        raise InputError("--workers and --batch-size must be positive")
    if a.max_gap_slots is not None and a.max_gap_slots < 1:
        raise InputError("--max-gap-slots must be positive")
    return PipelineConfig(
        grid=grid,
        oscillation=osc,
        midnight_policy=MidnightPolicy(a.midnight_policy),
        max_gap_slots=a.max_gap_slots,
        baseline=base,
        synth=synth,
        tolerance=a.tolerance,
        debug_invariants=a.debug_invariants,
        radius_threshold=a.radius_threshold,
        workers=a.workers,
        batch_size=a.batch_size,
    )


def _need(path: Path | None, what: str) -> Path:
    if path is None or not Path(path).is_file():
        raise InputError(f"{what} not found: {path}")
    return Path(path)


def _summary(out: Path, counters: dict[str, int], timings: dict[str, float]) -> None:
    full = {k: int(counters.get(k, 0)) for k in COUNTERS}
    full.update({k: int(v) for k, v in counters.items() if k not in full})
    write_atomic(out / "run_summary.json", json.dumps(full, indent=2, sort_keys=True) + "\n")
    write_atomic(out / "run_timings.json", json.dumps({k: round(v, 3) for k, v in timings.items()}, indent=2) + "\n")


def _update_summary(out: Path, counters: dict[str, int]) -> None:
    """Merge stage counters into an existing run_summary.json."""
    path = out / "run_summary.json"
    full = {k: 0 for k in COUNTERS}
    if path.is_file():
        try:
            full.update(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError:
            pass
    full.update({k: int(v) for k, v in counters.items()})
    write_atomic(path, json.dumps(full, indent=2, sort_keys=True) + "\n")


def _records(path: Path, cfg: PipelineConfig):
    try:
        return read_record_batch(_need(path, "records file"), cfg.grid)
    except (ValueError, KeyError) as e:
        raise InputError(f"{path}: {e}") from None


def cmd_synth(a, cfg: PipelineConfig) -> None:
    sc = cfg.synth
    towers = make_towers(sc)
    w = AtomicWriters(a.out_dir)
    try:
        w.write("records.csv", ["Uid,Timestamp,Longitude,Latitude\n"])
        w.write("truth.jsonl", [])
        for lo in range(0, sc.n_users, cfg.batch_size):
            batch = generate_users(sc, lo, min(lo + cfg.batch_size, sc.n_users), towers)
            w.write("records.csv", [batch.csv_lines()])
            w.write("truth.jsonl", [json.dumps(u.truth_json(), separators=(",", ":")) + "\n" for u in batch.users])
        w.commit()
    except BaseException:
        w.abort()
        raise


def cmd_preprocess(a, cfg: PipelineConfig) -> None:
    t0 = time.perf_counter()
    rb = _records(a.input, cfg)
    filtered, removed = filter_batch(rb, cfg.oscillation)
    points = smooth_batch(filtered, cfg.grid)
    a.out.mkdir(parents=True, exist_ok=True)
    write_atomic(a.out / "trace.jsonl", "".join(trace_lines(points)))
    _summary(a.out, {"users": rb.n_users, "records_read": len(rb), "records_skipped": rb.skipped,
                     "oscillations_removed": removed, "trace_points": len(points)},
             {"total_s": time.perf_counter() - t0})


def _trace(path: Path):
    try:
        return read_trace_jsonl(_need(path, "trace file"))
    except (ValueError, KeyError, TypeError) as e:
        raise InputError(f"{path}: {e}") from None


def _stays(path: Path):
    try:
        return read_stays_jsonl(_need(path, "stays file"))
    except (ValueError, KeyError, TypeError) as e:
        raise InputError(f"{path}: {e}") from None


def cmd_stays(a, cfg: PipelineConfig) -> None:
    points = _trace(a.input)
    stays = extract_stay_batch(points, cfg.midnight_policy, cfg.max_gap_slots)
    a.out.mkdir(parents=True, exist_ok=True)
    write_atomic(a.out / "stays.jsonl", "".join(stay_lines(stays)))
    _update_summary(a.out, {"stays": len(stays), "passbys": int(stays.passbys.sum())})


def cmd_stkg(a, cfg: PipelineConfig) -> None:
    stays = _stays(a.input)
    stores = []
    for u in range(stays.n_users):
        store = build_stkg(stays.user_stays(u), stays.uids[u])
        sg = infer_spatial_relations(store)
        infer_temporal_relations(store, sg, stays.occ[stays.user_slice(u)])
        stores.append(store)
    a.out.mkdir(parents=True, exist_ok=True)
    tmp = a.out / ".triples.jsonl.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        write_triples(fh, stores)
    os.replace(tmp, a.out / "triples.jsonl")


def cmd_detect(a, cfg: PipelineConfig) -> None:
    res = detect_batch(_stays(a.input), cfg)
    a.out.mkdir(parents=True, exist_ok=True)
    write_atomic(a.out / "locations_stkg.jsonl", "".join(location_lines(res)))
    _update_summary(a.out, {"communities": sum(len(x) for x in res.locations)})


def cmd_baseline(a, cfg: PipelineConfig) -> None:
    points = _trace(a.input)
    a.out.mkdir(parents=True, exist_ok=True)
    for res in baseline_batch(points, cfg):
        write_atomic(a.out / f"stays_{res.name}.jsonl", "".join(stay_lines(res.stays)))
        write_atomic(a.out / f"locations_{res.name}.jsonl", "".join(location_lines(res)))
        _update_summary(a.out, {f"locations_{res.name}": sum(len(x) for x in res.locations)})


def cmd_evaluate(a, cfg: PipelineConfig) -> None:
    ref = _stays(a.dir / "stays.jsonl")
    labels = None
    if a.truth is not None:
        truth = read_truth(open(_need(a.truth, "truth file"), encoding="utf-8"))
        rb = _records(a.records, cfg) if a.records else None
        if rb is None:
            raise InputError("--truth needs --records")
        filtered, _ = filter_batch(rb, cfg.oscillation)
        filtered = filtered.select_uids(ref.uids)
        labels = reference_labels(ref, filtered, truth)
    metrics = []
    for name, grid in (("stkg", cfg.grid), ("grid", cfg.baseline_grid()), ("dbscan", cfg.grid)):
        loc_path = a.dir / f"locations_{name}.jsonl"
        if not loc_path.is_file():
            continue
        stays = ref if name == "stkg" else _stays(a.dir / f"stays_{name}.jsonl")
        try:
            res = read_locations_jsonl(loc_path, stays, name, grid)
        except (ValueError, KeyError, TypeError) as e:
            raise InputError(str(e)) from None
        if name != "stkg" and labels is not None and stays.uids != ref.uids:
            raise InputError(f"stays_{name}.jsonl and stays.jsonl cover different users")
        metrics.extend(evaluate_method(res, ref, labels))
    if not metrics:
        raise InputError(f"no locations_*.jsonl files in {a.dir}")
    report = MetricsReport.from_users(metrics, cfg.radius_threshold)
    write_atomic(a.dir / "metrics.csv", report.to_csv())
    order = {"stkg": 0, "grid": 1, "dbscan": 2}
    metrics.sort(key=lambda m: (m.uid, order[m.method]))
    write_atomic(a.dir / "per_user.jsonl",
                 "".join(json.dumps(m.to_json(), separators=(",", ":")) + "\n" for m in metrics))


def cmd_all(a, cfg: PipelineConfig) -> MetricsReport:
    t0 = time.perf_counter()
    extra: dict[str, int] = {}
    if a.input is None:
        jobs = synth_jobs(cfg)
        if a.write_trace:
            jobs = [replace(j, write_trace=True) for j in jobs]
    else:
        rb = _records(a.input, cfg)
        truth = None
        if a.truth is not None:
            truth = read_truth(open(_need(a.truth, "truth file"), encoding="utf-8"))
        jobs = record_jobs(rb, cfg, truth, a.write_trace)
        extra = {"records_skipped": rb.skipped}
    always = ["stays.jsonl", "per_user.jsonl"] + [f"locations_{m}.jsonl" for m in ("stkg", "grid", "dbscan")]
    always += ["stays_grid.jsonl", "stays_dbscan.jsonl"] + (["trace.jsonl"] if a.write_trace else [])
    report, counters, timings = collect(jobs, cfg, a.out, always)
    counters.update(extra)
    timings["total_s"] = time.perf_counter() - t0
    _summary(a.out, counters, timings)
    return report


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "stays": cmd_stays,
    "stkg": cmd_stkg,
    "detect": cmd_detect,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
    "all": cmd_all,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        COMMANDS[args.command](args, cfg)
    except InvariantError as e:
        print(f"stkg-activity: invariant violated: {e}", file=sys.stderr)
        return 2
    except (InputError, SynthError, FileNotFoundError) as e:
        print(f"stkg-activity: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
