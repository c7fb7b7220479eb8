"""Seeded synthetic sighting data with ground-truth places.

Each user has a home and a work anchor.  Hard-case users have the two
anchors in queen-adjacent grid cells, which a purely spatial method tends to
merge; the schedules keep them apart in time.  Pings connect to a tower drawn
inverse-distance-weighted among towers near the user's true position.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .ingest import SECONDS_PER_DAY, GridConfig, RecordBatch
from .stkg import QUEEN_OFFSETS

HOME, WORK, TRANSIT = "home", "work", "transit"
LABELS = (HOME, WORK, TRANSIT)
UID_BASE = 9222170000000000000

OSCILLATION_REACH = 2000.0
MIN_TOWER_DISTANCE = 50.0
JITTER_CLIP_MINUTES = 25.0


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_users: int = 100
    n_days: int = 14
    tower_spacing: float = 400.0
    ping_mean_interval: float = 300.0
    tower_assignment_radius: float = 800.0
    hard_case_fraction: float = 0.5
    oscillation_rate: float = 0.05
    schedule_jitter: float = 20.0
    handover_interval: float | None = None
    commute_speed: float = 10.0
    grid: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self) -> None:
        if self.n_users <= 0 or self.n_days <= 0:
            raise SynthError("n_users and n_days must be positive")
        if min(self.tower_spacing, self.ping_mean_interval, self.tower_assignment_radius, self.commute_speed) <= 0:
            raise SynthError("spacing, intervals, speed and assignment radius must be positive")
        if self.handover_interval is not None and self.handover_interval <= 0:
            raise SynthError("handover_interval must be positive when given")
        for name in ("hard_case_fraction", "oscillation_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SynthError(f"{name} must lie in [0, 1]")

    @property
    def area_side(self) -> float:
        return 8000.0 + 200.0 * math.sqrt(self.n_users)


def uid_for(i: int) -> str:
    return str(UID_BASE + i)


@dataclass
class Towers:
    x: np.ndarray
    y: np.ndarray
    lon_text: np.ndarray  # object array of CSV strings
    lat_text: np.ndarray
    lon: np.ndarray  # the same values parsed back to float
    lat: np.ndarray
    tree: cKDTree
    near_offsets: np.ndarray  # CSR rows: other towers within OSCILLATION_REACH
    near_idx: np.ndarray


def make_towers(cfg: SynthConfig) -> Towers:
    """Jittered square lattice; positions are re-read from the 7-decimal CSV text."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x70E5]))
    n_side = int(math.ceil(cfg.area_side / cfg.tower_spacing))
    ii, jj = np.meshgrid(np.arange(n_side), np.arange(n_side), indexing="ij")
    jit = rng.uniform(-0.3, 0.3, size=(2, ii.size)) * cfg.tower_spacing
    x = (jj.ravel() + 0.5) * cfg.tower_spacing + jit[0]
    y = (ii.ravel() + 0.5) * cfg.tower_spacing + jit[1]
    lon, lat = cfg.grid.to_lonlat(x, y)
    lon_text = np.array([f"{v:.7f}" for v in lon], dtype=object)
    lat_text = np.array([f"{v:.7f}" for v in lat], dtype=object)
    lon, lat = lon_text.astype(float), lat_text.astype(float)
    x, y = cfg.grid.to_local(lon, lat)
    tree = cKDTree(np.c_[x, y])
    rows = [sorted(k for k in near if k != i) for i, near in enumerate(tree.query_ball_point(np.c_[x, y], OSCILLATION_REACH))]
    near_offsets = np.r_[0, np.cumsum([len(r) for r in rows])].astype(np.int64)
    near_idx = np.fromiter((k for r in rows for k in r), dtype=np.int64, count=int(near_offsets[-1]))
    return Towers(x, y, lon_text, lat_text, lon, lat, tree, near_offsets, near_idx)


@dataclass
class UserTrace:
    uid: str
    t: np.ndarray
    tower: np.ndarray
    label: np.ndarray  # index into LABELS
    noise: np.ndarray  # injected ping-pong pings
    hard: bool
    places: dict[str, dict]
    dwells: list[tuple[str, int, int]]

    def truth_json(self) -> dict:
        return {"uid": self.uid, "hard_case": self.hard, "places": self.places, "dwells": [list(d) for d in self.dwells]}


def _anchor_pair(rng, cfg: SynthConfig, hard: bool):
    cs = cfg.grid.cell_size
    side = cfg.area_side
    margin = cfg.tower_assignment_radius + cfg.tower_spacing
    home = rng.uniform(margin, side - margin, size=2)
    hr, hc = int(math.floor(home[1] / cs)), int(math.floor(home[0] / cs))
    if hard:
        dr, dc = QUEEN_OFFSETS[rng.integers(len(QUEEN_OFFSETS))]
        work = np.array([(hc + dc + rng.uniform()) * cs, (hr + dr + rng.uniform()) * cs])
        return home, work
    for _ in range(1000):
        ang = rng.uniform(0, 2 * math.pi)
        dist = rng.uniform(2500.0, 8000.0)
        work = home + dist * np.array([math.cos(ang), math.sin(ang)])
        if not (margin <= work[0] <= side - margin and margin <= work[1] <= side - margin):
            continue
        wr, wc = int(math.floor(work[1] / cs)), int(math.floor(work[0] / cs))
        if max(abs(wr - hr), abs(wc - hc)) >= 3:
            return home, work
    raise SynthError("could not place a work anchor; the study area is too small")


def _candidates(towers: Towers, anchor, radius: float):
    idx = np.asarray(towers.tree.query_ball_point(anchor, radius), dtype=np.int64)
    if len(idx) == 0:
        raise SynthError(f"no tower within {radius} m of anchor {tuple(np.round(anchor, 1))}")
    idx.sort()
    d = np.hypot(towers.x[idx] - anchor[0], towers.y[idx] - anchor[1])
    w = 1.0 / np.maximum(d, MIN_TOWER_DISTANCE) ** 2
    return idx, np.cumsum(w) / w.sum()


def _schedule(rng, cfg: SynthConfig, travel: float):
    """Timeline segments (label, t0, t1) covering all days.

    Work runs 09:00-18:00 (jittered) on weekdays; the commute of ``travel``
    seconds happens just before and just after it.
    """
    jit = cfg.schedule_jitter * 60.0
    clip = JITTER_CLIP_MINUTES * 60.0

    def j():
        return float(np.clip(rng.normal(0.0, jit), -clip, clip)) if jit > 0 else 0.0

    segs: list[tuple[str, int, int]] = []
    cur = 0
    for d in range(cfg.n_days):
        if cfg.grid.is_weekday(d):
            base = d * SECONDS_PER_DAY
            arrive = int(base + 9 * 3600 + j())
            quit_ = int(base + 18 * 3600 + j())
            leave = arrive - int(travel)
            back = quit_ + int(travel)
            segs += [(HOME, cur, leave), ("to_work", leave, arrive), (WORK, arrive, quit_), ("to_home", quit_, back)]
            cur = back
    segs.append((HOME, cur, cfg.n_days * SECONDS_PER_DAY))
    return [s for s in segs if s[2] > s[1]]


def generate_user(cfg: SynthConfig, towers: Towers, i: int) -> UserTrace:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i]))
    hard = bool(rng.random() < cfg.hard_case_fraction)
    home, work = _anchor_pair(rng, cfg, hard)
    anchors = {HOME: home, WORK: work}
    cand = {k: _candidates(towers, a, cfg.tower_assignment_radius) for k, a in anchors.items()}
    segs = _schedule(rng, cfg, float(np.hypot(*(work - home))) / cfg.commute_speed)

    horizon = cfg.n_days * SECONDS_PER_DAY
    n_guess = int(horizon / cfg.ping_mean_interval * 1.2) + 16
    gaps = rng.exponential(cfg.ping_mean_interval, size=n_guess)
    while gaps.sum() < horizon:
        gaps = np.r_[gaps, rng.exponential(cfg.ping_mean_interval, size=n_guess)]
    t = np.floor(np.cumsum(gaps)).astype(np.int64)
    t = t[t < horizon]

    seg_t0 = np.array([s[1] for s in segs])
    seg_t1 = np.array([s[2] for s in segs])
    kinds = [s[0] for s in segs]
    si = np.searchsorted(seg_t0, t, side="right") - 1
    kind_code = np.array([LABELS.index(k) if k in (HOME, WORK) else 2 for k in kinds])
    label = kind_code[si]
    # serving tower: drawn at the start of each dwell (and at every handover, if enabled)
    if cfg.handover_interval is None:
        handovers = np.zeros(0)
    else:
        n_ho = int(horizon / cfg.handover_interval * 2) + 8
        handovers = np.cumsum(rng.exponential(cfg.handover_interval, size=n_ho))
    epoch = np.searchsorted(handovers, t, side="right")
    _, serving = np.unique(si * (len(handovers) + 1) + epoch, return_inverse=True)
    u = rng.random(serving.max() + 1 if len(t) else 0)[serving]
    tower = np.empty(len(t), dtype=np.int64)
    for code, name in ((0, HOME), (1, WORK)):
        sel = label == code
        idx, cum = cand[name]
        tower[sel] = idx[np.minimum(np.searchsorted(cum, u[sel]), len(idx) - 1)]
    tr = np.flatnonzero(label == 2)
    if len(tr):
        frac = (t[tr] - seg_t0[si[tr]]) / np.maximum(seg_t1[si[tr]] - seg_t0[si[tr]], 1)
        to_work = np.array([kinds[k] == "to_work" for k in si[tr]])
        src = np.where(to_work[:, None], home, work)
        dst = np.where(to_work[:, None], work, home)
        pos = src + frac[:, None] * (dst - src)
        tower[tr] = towers.tree.query(pos)[1]

    t, tower, label, noise = _inject_oscillations(rng, cfg, towers, t, tower, label)

    places = {}
    for name, a in anchors.items():
        lon, lat = cfg.grid.to_lonlat(a[0], a[1])
        r, c = cfg.grid.cell_of(a[0], a[1])
        places[name] = {"x": float(a[0]), "y": float(a[1]), "lon": float(lon), "lat": float(lat), "r": int(r), "c": int(c)}
    dwells = [(k if k in (HOME, WORK) else TRANSIT, int(a), int(b)) for k, a, b in segs]
    return UserTrace(uid_for(i), t, tower, label, noise, hard, places, dwells)


def _inject_oscillations(rng, cfg: SynthConfig, towers: Towers, t, tower, label):
    """Turn a fraction of pings A into A-B-A flips to a tower within 2 km."""
    n = len(t)
    noise = np.zeros(n, dtype=bool)
    if n < 2 or cfg.oscillation_rate <= 0:
        return t, tower, label, noise
    pick = np.flatnonzero(rng.random(n - 1) < cfg.oscillation_rate)
    delta = rng.uniform(10.0, 60.0, size=len(pick)).astype(np.int64)
    ok = t[pick] + 2 * delta < t[pick + 1]
    pick, delta = pick[ok], delta[ok]
    if len(pick) == 0:
        return t, tower, label, noise
    a = tower[pick]
    lo, count = towers.near_offsets[a], np.diff(towers.near_offsets)[a]
    choice = np.floor(rng.random(len(pick)) * count).astype(np.int64)
    flips = np.where(count > 0, towers.near_idx[np.minimum(lo + choice, len(towers.near_idx) - 1)], a)
    t_all = np.r_[t, t[pick] + delta, t[pick] + 2 * delta]
    tower_all = np.r_[tower, flips, tower[pick]]
    label_all = np.r_[label, label[pick], label[pick]]
    noise_all = np.r_[noise, np.ones(len(pick), dtype=bool), np.zeros(len(pick), dtype=bool)]
    order = np.argsort(t_all, kind="stable")
    return t_all[order], tower_all[order], label_all[order], noise_all[order]


@dataclass
class SynthBatch:
    users: list[UserTrace]
    towers: Towers
    config: SynthConfig

    def record_batch(self) -> RecordBatch:
        """Records as an ingested CSV would yield them (same rounding)."""
        lengths = [len(u.t) for u in self.users]
        offsets = np.r_[0, np.cumsum(lengths)].astype(np.int64)
        tower = np.concatenate([u.tower for u in self.users]) if self.users else np.zeros(0, dtype=np.int64)
        t = np.concatenate([u.t for u in self.users]) if self.users else np.zeros(0, dtype=np.int64)
        return RecordBatch(
            uids=[u.uid for u in self.users],
            offsets=offsets,
            t=t,
            lon=self.towers.lon[tower],
            lat=self.towers.lat[tower],
            x=self.towers.x[tower],
            y=self.towers.y[tower],
        )

    def csv_lines(self) -> str:
        epoch = self.config.grid.epoch_date
        days = [epoch + dt.timedelta(days=d) for d in range(self.config.n_days + 1)]
        day_text = np.array([f"{d.year}/{d.month}/{d.day} " for d in days], dtype=object)
        out = []
        for u in self.users:
            day, sec = np.divmod(u.t, SECONDS_PER_DAY)
            tod = _TOD_TEXT[sec]
            lines = (u.uid + ",") + day_text[day] + tod + "," + self.towers.lon_text[u.tower] + "," + self.towers.lat_text[u.tower]
            out.append("\n".join(lines.tolist()))
        return "\n".join(x for x in out if x) + ("\n" if any(out) else "")


_TOD_TEXT = np.array(
    [f"{s // 3600}:{s // 60 % 60:02d}:{s % 60:02d}" for s in range(SECONDS_PER_DAY)], dtype=object
)


def generate_users(cfg: SynthConfig, start: int, stop: int, towers: Towers | None = None) -> SynthBatch:
    towers = towers if towers is not None else make_towers(cfg)
    return SynthBatch([generate_user(cfg, towers, i) for i in range(start, stop)], towers, cfg)


def generate_dataset(cfg: SynthConfig) -> tuple[str, str]:
    """(records CSV text, ground-truth JSONL text)."""
    batch = generate_users(cfg, 0, cfg.n_users)
    csv = "Uid,Timestamp,Longitude,Latitude\n" + batch.csv_lines()
    truth = "".join(json.dumps(u.truth_json(), separators=(",", ":")) + "\n" for u in batch.users)
    return csv, truth


@dataclass
class Truth:
    """Ground truth of one user: place anchors and labelled time intervals."""

    uid: str
    hard_case: bool
    places: dict[str, dict]
    starts: np.ndarray
    ends: np.ndarray
    labels: list[str]

    @classmethod
    def from_json(cls, d: dict) -> "Truth":
        dw = d["dwells"]
        return cls(
            uid=d["uid"],
            hard_case=bool(d.get("hard_case", False)),
            places=d["places"],
            starts=np.asarray([x[1] for x in dw], dtype=np.int64),
            ends=np.asarray([x[2] for x in dw], dtype=np.int64),
            labels=[x[0] for x in dw],
        )

    @classmethod
    def from_trace(cls, u: UserTrace) -> "Truth":
        return cls.from_json(u.truth_json())

    def label_at(self, t: np.ndarray) -> np.ndarray:
        """Label index (into self.labels order -> name) of timestamps."""
        k = np.searchsorted(self.starts, t, side="right") - 1
        names = np.array(self.labels, dtype=object)
        return names[np.clip(k, 0, len(names) - 1)]


def read_truth(lines) -> dict[str, Truth]:
    out = {}
    for ln in lines:
        ln = ln.strip()
        if ln:
            tr = Truth.from_json(json.loads(ln))
            out[tr.uid] = tr
    return out


def label_stays(stays, record_times: np.ndarray, truth: Truth) -> dict[int, str]:
    """Majority true label of the records whose attributed time overlaps each stay.

    A record at ``t_i`` is attributed ``[t_i, t_{i+1})``; the final record is
    attributed to the end of its slot.  Stays are given in linear 10-minute
    slots (``start_linear``/``end_linear``).  Ties go to home, then work.
    """
    t = np.asarray(record_times, dtype=np.int64)
    if len(t) == 0:
        return {s.id: TRANSIT for s in stays}
    t_end = np.r_[t[1:], (t[-1] // 600 + 1) * 600]
    cats = [HOME, WORK, TRANSIT] + sorted(set(truth.labels) - set(LABELS))
    dwell_code = np.array([cats.index(x) for x in truth.labels], dtype=np.int64)
    k = np.clip(np.searchsorted(truth.starts, t, side="right") - 1, 0, len(dwell_code) - 1)
    code = dwell_code[k]
    cum = np.zeros((len(t) + 1, len(cats)), dtype=np.int64)
    for j in range(len(cats)):
        cum[1:, j] = np.cumsum(code == j)
    s0 = np.array([s.start_linear * 600 for s in stays], dtype=np.int64)
    s1 = np.array([s.end_linear * 600 for s in stays], dtype=np.int64)
    lo = np.searchsorted(t_end, s0, side="right")
    hi = np.searchsorted(t, s1, side="left")
    counts = cum[np.maximum(hi, lo)] - cum[lo]
    best = np.argmax(counts, axis=1) if len(stays) else np.zeros(0, dtype=np.int64)
    best = np.where(hi > lo, best, cats.index(TRANSIT))
    return {s.id: cats[b] for s, b in zip(stays, best.tolist())}
