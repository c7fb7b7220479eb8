"""Batch orchestration: records of a block of users in, serialized results out.

Users are processed in fixed-size blocks in uid order.  A block's result
holds already-formatted output lines, so the parent process only
concatenates; output bytes therefore do not depend on the worker count.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .baselines import BaselineConfig, dbscan_baseline, grid_baseline
from .community import TOLERANCE, ActivityLocation, build_st_graph, louvain, to_activity_locations
from .evaluation import (
    RADIUS_THRESHOLD,
    MetricsReport,
    UserMetrics,
    adjusted_rand_index,
    evaluate_user,
    places_separated,
    project_assignment,
)
from .ingest import SLOTS_PER_DAY, GridConfig, RecordBatch
from .preprocess import OscillationParams, TraceBatch, filter_batch, smooth_batch
from .stays import (
    MidnightPolicy,
    StayBatch,
    extract_stay_batch,
    occupancy_matrix,
    occupancy_row_to_int,
    occupancy_to_hex,
)
from .stkg import build_stkg, infer_spatial_relations, infer_temporal_relations
from .synth import HOME, TRANSIT, WORK, SynthConfig, Truth, generate_users, label_stays, make_towers

METHODS = ("stkg", "grid", "dbscan")
DEFAULT_BATCH = 200


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridConfig = GridConfig()
    oscillation: OscillationParams = OscillationParams()
    midnight_policy: MidnightPolicy = MidnightPolicy.WRAP
    max_gap_slots: int | None = None
    baseline: BaselineConfig = BaselineConfig()
    synth: SynthConfig | None = None
    tolerance: float = TOLERANCE
    debug_invariants: bool = False
    radius_threshold: float = RADIUS_THRESHOLD
    workers: int = 1
    batch_size: int = DEFAULT_BATCH

    def baseline_grid(self) -> GridConfig:
        return GridConfig(
            origin_lon=self.grid.origin_lon,
            origin_lat=self.grid.origin_lat,
            cell_size=self.baseline.d,
            epoch_date=self.grid.epoch_date,
            slot_minutes=self.grid.slot_minutes,
            slots_per_day=self.grid.slots_per_day,
        )


@dataclass
class MethodResult:
    """Per-user stays, stay -> location assignment and locations of one method."""

    name: str
    stays: StayBatch
    assignment: list[list[int]]
    locations: list[list[ActivityLocation]]
    modularity: list[float | None]
    grid: GridConfig


def detect_batch(stays: StayBatch, cfg: PipelineConfig = PipelineConfig()) -> MethodResult:
    assignment, locations, q = [], [], []
    for u in range(stays.n_users):
        user_stays = stays.user_stays(u)
        if not user_stays:
            assignment.append([])
            locations.append([])
            q.append(None)
            continue
        store = build_stkg(user_stays, stays.uids[u])
        sg = infer_spatial_relations(store)
        tg = infer_temporal_relations(store, sg, stays.occ[stays.user_slice(u)])
        res = louvain(build_st_graph(sg, tg), cfg.tolerance, cfg.debug_invariants)
        locs = to_activity_locations(res.partition, user_stays, cfg.grid)
        loc_of = {sid: loc.id for loc in locs for sid in loc.stay_ids}
        assignment.append([loc_of[s.id] for s in user_stays])
        locations.append(locs)
        q.append(res.modularity)
    return MethodResult("stkg", stays, assignment, locations, q, cfg.grid)


def baseline_batch(points: TraceBatch, cfg: PipelineConfig = PipelineConfig()) -> tuple[MethodResult, MethodResult]:
    bgrid = cfg.baseline_grid()
    g = grid_baseline(points, cfg.baseline, cfg.grid)
    d = dbscan_baseline(points, cfg.baseline, cfg.grid)
    none = [None] * points.n_users
    return (
        MethodResult("grid", g.stays, g.assignment, g.locations, none, bgrid),
        MethodResult("dbscan", d.stays, d.assignment, d.locations, list(none), cfg.grid),
    )


# output formatting


def stay_lines(stays: StayBatch) -> list[str]:
    out = []
    for u in range(stays.n_users):
        sl = stays.user_slice(u)
        uid = stays.uids[u]
        for i, (r, c, s, e, row) in enumerate(
            zip(stays.r[sl].tolist(), stays.c[sl].tolist(), stays.start[sl].tolist(), stays.end[sl].tolist(), stays.occ[sl])
        ):
            hx = occupancy_to_hex(occupancy_row_to_int(row))
            out.append(
                f'{{"uid":"{uid}","stay_id":{i},"r":{r},"c":{c},"start_day":{s // SLOTS_PER_DAY},'
                f'"start_slot":{s % SLOTS_PER_DAY},"end_day":{e // SLOTS_PER_DAY},"end_slot":{e % SLOTS_PER_DAY},'
                f'"occupancy_hex":"{hx}"}}\n'
            )
    return out


def location_lines(res: MethodResult) -> list[str]:
    out = []
    for u, locs in enumerate(res.locations):
        q = res.modularity[u]
        for loc in locs:
            d = {
                "method": res.name,
                "uid": loc.uid,
                "location_id": loc.id,
                "stay_ids": list(loc.stay_ids),
                "cells": [list(g) for g in loc.cells],
                "centroid_x": loc.centroid[0],
                "centroid_y": loc.centroid[1],
                "total_duration_slots": loc.total_duration_slots,
                "modularity": None if q is None else round(q, 12),
            }
            out.append(json.dumps(d, separators=(",", ":")) + "\n")
    return out


def trace_lines(points: TraceBatch) -> list[str]:
    out = []
    for u in range(points.n_users):
        lo, hi = int(points.offsets[u]), int(points.offsets[u + 1])
        uid = points.uids[u]
        for k, r, c, x, y in zip(
            points.slot[lo:hi].tolist(), points.r[lo:hi].tolist(), points.c[lo:hi].tolist(),
            points.x[lo:hi].tolist(), points.y[lo:hi].tolist(),
        ):
            out.append(
                f'{{"uid":"{uid}","day":{k // SLOTS_PER_DAY},"slot":{k % SLOTS_PER_DAY},'
                f'"r":{r},"c":{c},"x":{round(x, 3)},"y":{round(y, 3)}}}\n'
            )
    return out


def reference_labels(stays: StayBatch, records: RecordBatch, truth: dict[str, Truth]) -> list[dict[int, str] | None]:
    """True place of every reference stay, per user (``None`` without truth).

    ``records`` must hold the same users in the same order as ``stays``.
    """
    out = []
    for u in range(stays.n_users):
        tr = truth.get(stays.uids[u])
        if tr is None:
            out.append(None)
            continue
        lo, hi = int(records.offsets[u]), int(records.offsets[u + 1])
        out.append(label_stays(stays.user_stays(u), records.t[lo:hi], tr))
    return out


def score_against_truth(m: UserMetrics, res: MethodResult, u: int, ref: StayBatch, labels: dict[int, str]) -> None:
    """ARI and home/work separation on the shared reference stays."""
    sl = ref.user_slice(u)
    if res.stays is ref:
        pred = np.asarray(res.assignment[u], dtype=np.int64)
    else:
        msl = res.stays.user_slice(u)
        pred = project_assignment(ref.start[sl], ref.end[sl], res.stays.start[msl], res.stays.end[msl], res.assignment[u])
    ids = range(sl.stop - sl.start)
    keep = [i for i in ids if pred[i] >= 0 and labels[i] != TRANSIT]
    if keep:
        m.ari = adjusted_rand_index([int(pred[i]) for i in keep], [labels[i] for i in keep])
    dur = (ref.end[sl] - ref.start[sl]).tolist()
    m.home_work_separated = places_separated(pred.tolist(), dur, [labels[i] for i in ids], HOME, WORK)


def evaluate_method(
    res: MethodResult, ref: StayBatch | None = None, labels: Sequence[dict[int, str] | None] | None = None
) -> list[UserMetrics]:
    """Per-user metrics; truth scores (if ``labels`` are given) use ``ref`` stays."""
    out = []
    for u in range(res.stays.n_users):
        stays = res.stays.user_stays(u)
        m = evaluate_user(res.name, res.stays.uids[u], stays, res.assignment[u], res.locations[u], res.grid)
        if labels is not None and labels[u] is not None and ref is not None:
            score_against_truth(m, res, u, ref, labels[u])
        out.append(m)
    return out


@dataclass
class BlockResult:
    """Formatted output of one block of users plus counters."""

    files: dict[str, list[str]] = field(default_factory=dict)
    metrics: list[UserMetrics] = field(default_factory=list)
    counters: dict[str, int] = field(default_factory=dict)

    def add(self, name: str, lines: list[str]) -> None:
        self.files.setdefault(name, []).extend(lines)


def process_block(records: RecordBatch, cfg: PipelineConfig, truth: dict[str, Truth] | None = None,
                  write_trace: bool = False) -> BlockResult:
    out = BlockResult()
    filtered, removed = filter_batch(records, cfg.oscillation)
    points = smooth_batch(filtered, cfg.grid)
    stays = extract_stay_batch(points, cfg.midnight_policy, cfg.max_gap_slots)
    results = [detect_batch(stays, cfg), *baseline_batch(points, cfg)]
    if write_trace:
        out.add("trace.jsonl", trace_lines(points))
    out.add("stays.jsonl", stay_lines(stays))
    labels = reference_labels(stays, filtered, truth) if truth is not None else None
    for res in results:
        if res.name != "stkg":
            out.add(f"stays_{res.name}.jsonl", stay_lines(res.stays))
        out.add(f"locations_{res.name}.jsonl", location_lines(res))
        out.metrics.extend(evaluate_method(res, stays, labels))
    # uid-major order keeps the file independent of how users are blocked
    n = records.n_users
    by_user = [out.metrics[k * n + u] for u in range(n) for k in range(len(results))]
    out.add("per_user.jsonl", [json.dumps(m.to_json(), separators=(",", ":")) + "\n" for m in by_user])
    out.counters = {
        "users": records.n_users,
        "records_read": len(records),
        "oscillations_removed": removed,
        "trace_points": len(points),
        "stays": len(stays),
        "passbys": int(stays.passbys.sum()),
        "communities": sum(len(x) for x in results[0].locations),
        "locations_grid": sum(len(x) for x in results[1].locations),
        "locations_dbscan": sum(len(x) for x in results[2].locations),
    }
    return out


# block sources


@dataclass(frozen=True)
class SynthBlock:
    cfg: PipelineConfig
    start: int
    stop: int
    with_truth: bool = True
    write_trace: bool = False

    def __call__(self) -> BlockResult:
        batch = generate_users(self.cfg.synth, self.start, self.stop, _towers(self.cfg.synth))
        truth = {u.uid: Truth.from_trace(u) for u in batch.users} if self.with_truth else None
        return process_block(batch.record_batch(), self.cfg, truth, self.write_trace)


@dataclass(frozen=True)
class RecordBlock:
    cfg: PipelineConfig
    records: RecordBatch
    truth: dict | None = None
    write_trace: bool = False

    def __call__(self) -> BlockResult:
        return process_block(self.records, self.cfg, self.truth, self.write_trace)


_TOWER_CACHE: dict = {}


def _towers(sc: SynthConfig):
    key = (sc.seed, sc.n_users, sc.tower_spacing)
    if key not in _TOWER_CACHE:
        _TOWER_CACHE.clear()
        _TOWER_CACHE[key] = make_towers(sc)
    return _TOWER_CACHE[key]


def _call(job: Callable[[], BlockResult]) -> BlockResult:
    return job()


def run_blocks(jobs: Sequence[Callable[[], BlockResult]], workers: int = 1) -> Iterator[BlockResult]:
    """Results in job order, computed by ``workers`` processes."""
    if workers <= 1 or len(jobs) <= 1:
        for job in jobs:
            yield job()
        return
    with get_context("fork").Pool(workers) as pool:
        yield from pool.imap(_call, jobs, chunksize=1)


def synth_jobs(cfg: PipelineConfig) -> list[SynthBlock]:
    n = cfg.synth.n_users
    return [SynthBlock(cfg, a, min(a + cfg.batch_size, n)) for a in range(0, n, cfg.batch_size)]


def record_jobs(records: RecordBatch, cfg: PipelineConfig, truth: dict | None = None, write_trace: bool = False) -> list[RecordBlock]:
    jobs = []
    for a in range(0, records.n_users, cfg.batch_size):
        part = records.select_users(a, min(a + cfg.batch_size, records.n_users))
        jobs.append(RecordBlock(cfg, part, truth, write_trace))
    return jobs


class AtomicWriters:
    """Temp files in the output directory, renamed into place on commit."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._fh: dict[str, object] = {}

    def write(self, name: str, lines: Iterable[str]) -> None:
        fh = self._fh.get(name)
        if fh is None:
            fh = open(self.out_dir / f".{name}.tmp", "w", encoding="utf-8", newline="\n")
            self._fh[name] = fh
        fh.writelines(lines)

    def commit(self) -> list[Path]:
        done = []
        for name, fh in self._fh.items():
            fh.close()
            os.replace(self.out_dir / f".{name}.tmp", self.out_dir / name)
            done.append(self.out_dir / name)
        self._fh.clear()
        return done

    def abort(self) -> None:
        for name, fh in self._fh.items():
            fh.close()
            (self.out_dir / f".{name}.tmp").unlink(missing_ok=True)
        self._fh.clear()


def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def collect(jobs: Sequence[Callable[[], BlockResult]], cfg: PipelineConfig, out_dir: Path,
            always: Sequence[str] = ()) -> tuple[MetricsReport, dict[str, int], dict[str, float]]:
    """Run jobs, stream their lines to ``out_dir``; returns report, counters, timings."""
    t0 = time.perf_counter()
    writers = AtomicWriters(out_dir)
    for name in always:
        writers.write(name, [])
    counters: dict[str, int] = {}
    metrics: list[UserMetrics] = []
    try:
        for block in run_blocks(jobs, cfg.workers):
            for name, lines in block.files.items():
                writers.write(name, lines)
            for k, v in block.counters.items():
                counters[k] = counters.get(k, 0) + int(v)
            metrics.extend(block.metrics)
        t1 = time.perf_counter()
        report = MetricsReport.from_users(metrics, cfg.radius_threshold)
        writers.write("metrics.csv", [report.to_csv()])
        writers.commit()
    except BaseException:
        writers.abort()
        raise
    return report, counters, {"pipeline_s": t1 - t0, "total_s": time.perf_counter() - t0}


# readers for the intermediate files


def _jsonl(path: Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as e:
                    raise ValueError(f"{path}:{n}: {e.msg}") from None


def _offsets(uids_per_row: list[str]) -> tuple[list[str], np.ndarray]:
    uids: list[str] = []
    starts: list[int] = []
    for i, u in enumerate(uids_per_row):
        if not uids or uids[-1] != u:
            if uids and u < uids[-1]:
                raise ValueError("rows must be grouped by uid in ascending order")
            uids.append(u)
            starts.append(i)
    starts.append(len(uids_per_row))
    return uids, np.asarray(starts, dtype=np.int64)


def read_trace_jsonl(path: Path) -> TraceBatch:
    rows = list(_jsonl(path))
    uids, offsets = _offsets([r["uid"] for r in rows])
    return TraceBatch(
        uids=uids,
        offsets=offsets,
        slot=np.asarray([r["day"] * SLOTS_PER_DAY + r["slot"] for r in rows], dtype=np.int64),
        x=np.asarray([r["x"] for r in rows], dtype=float),
        y=np.asarray([r["y"] for r in rows], dtype=float),
        r=np.asarray([r["r"] for r in rows], dtype=np.int64),
        c=np.asarray([r["c"] for r in rows], dtype=np.int64),
    )


def read_stays_jsonl(path: Path) -> StayBatch:
    rows = list(_jsonl(path))
    uids, offsets = _offsets([r["uid"] for r in rows])
    start = np.asarray([r["start_day"] * SLOTS_PER_DAY + r["start_slot"] for r in rows], dtype=np.int64)
    end = np.asarray([r["end_day"] * SLOTS_PER_DAY + r["end_slot"] for r in rows], dtype=np.int64)
    nu = len(uids)
    return StayBatch(
        uids=uids,
        offsets=offsets,
        r=np.asarray([r["r"] for r in rows], dtype=np.int64),
        c=np.asarray([r["c"] for r in rows], dtype=np.int64),
        start=start,
        end=end,
        occ=occupancy_matrix(start, end),
        passbys=np.zeros(nu, dtype=np.int64),
        passby_slots=np.zeros(nu, dtype=np.int64),
    )


def read_locations_jsonl(path: Path, stays: StayBatch, name: str, grid: GridConfig) -> MethodResult:
    """Rebuild a method result from its locations file and the stays it refers to."""
    by_uid: dict[str, list[dict]] = {}
    for row in _jsonl(path):
        by_uid.setdefault(row["uid"], []).append(row)
    assignment, locations = [], []
    for u, uid in enumerate(stays.uids):
        n = int(stays.offsets[u + 1] - stays.offsets[u])
        a = [-1] * n
        locs = []
        for row in sorted(by_uid.pop(uid, []), key=lambda r: r["location_id"]):
            for sid in row["stay_ids"]:
                if not 0 <= sid < n or a[sid] != -1:
                    raise ValueError(f"{path}: bad stay id {sid} for user {uid}")
                a[sid] = row["location_id"]
            locs.append(
                ActivityLocation(
                    id=row["location_id"],
                    uid=uid,
                    stay_ids=tuple(row["stay_ids"]),
                    cells=tuple(tuple(g) for g in row["cells"]),
                    centroid=(row["centroid_x"], row["centroid_y"]),
                    total_duration_slots=row["total_duration_slots"],
                )
            )
        if -1 in a:
            raise ValueError(f"{path}: user {uid} has stays without a location")
        assignment.append(a)
        locations.append(locs)
    if by_uid:
        raise ValueError(f"{path}: locations for unknown users {sorted(by_uid)[:3]}")
    return MethodResult(name, stays, assignment, locations, [None] * stays.n_users, grid)
