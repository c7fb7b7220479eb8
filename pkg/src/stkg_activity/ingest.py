"""Raw sighting records and the grid / time-slot coordinate systems.

Positions are projected onto a local equirectangular plane (meters) anchored
at ``GridConfig.origin``; time is counted in seconds from local midnight of
``GridConfig.epoch_date``.  Everything downstream works on these two axes.
"""

from __future__ import annotations

import datetime as dt
import io
import math
import os
import re
from dataclasses import dataclass, field
from typing import BinaryIO, NamedTuple, Sequence

import numpy as np
import pandas as pd

M_PER_DEG_LON = 111320.0
M_PER_DEG_LAT = 110540.0
SECONDS_PER_DAY = 86400
SLOT_MINUTES = 10
SLOT_SECONDS = SLOT_MINUTES * 60
SLOTS_PER_DAY = 144

TIMESTAMP_FORMAT = "%Y/%m/%d %H:%M:%S"
CSV_COLUMNS = ("Uid", "Timestamp", "Longitude", "Latitude")


class GridIndex(NamedTuple):
    r: int
    c: int


class SlotIndex(NamedTuple):
    day: int
    slot: int

    @property
    def linear(self) -> int:
        return self.day * SLOTS_PER_DAY + self.slot

    @classmethod
    def from_linear(cls, k: int) -> "SlotIndex":
        day, slot = divmod(int(k), SLOTS_PER_DAY)
        return cls(day, slot)


@dataclass(frozen=True)
class RawRecord:
    uid: str
    timestamp: int
    lon: float
    lat: float


@dataclass(frozen=True)
class GridConfig:
    origin_lon: float = 121.0
    origin_lat: float = 31.0
    cell_size: float = 500.0
    epoch_date: dt.date = dt.date(2019, 6, 1)
    slot_minutes: int = SLOT_MINUTES
    slots_per_day: int = SLOTS_PER_DAY

    def __post_init__(self) -> None:
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if self.slot_minutes * self.slots_per_day != 1440:
            raise ValueError("slot_minutes * slots_per_day must equal 1440")

    @property
    def m_per_deg_lon(self) -> float:
        return M_PER_DEG_LON * math.cos(math.radians(self.origin_lat))

    def to_local(self, lon, lat):
        """Project lon/lat (scalars or arrays) to local meters."""
        x = (np.asarray(lon, dtype=float) - self.origin_lon) * self.m_per_deg_lon
        y = (np.asarray(lat, dtype=float) - self.origin_lat) * M_PER_DEG_LAT
        return x, y

    def to_lonlat(self, x, y):
        lon = self.origin_lon + np.asarray(x, dtype=float) / self.m_per_deg_lon
        lat = self.origin_lat + np.asarray(y, dtype=float) / M_PER_DEG_LAT
        return lon, lat

    def cell_of(self, x, y):
        """Vectorized (r, c) of local positions."""
        c = np.floor(np.asarray(x, dtype=float) / self.cell_size).astype(np.int64)
        r = np.floor(np.asarray(y, dtype=float) / self.cell_size).astype(np.int64)
        return r, c

    def cell_center(self, r, c):
        x = (np.asarray(c, dtype=float) + 0.5) * self.cell_size
        y = (np.asarray(r, dtype=float) + 0.5) * self.cell_size
        return x, y

    def weekday_of(self, day: int) -> int:
        # the epoch's weekday shifted by the day offset
        return (self.epoch_date.weekday() + int(day)) % 7

    def is_weekday(self, day: int) -> bool:
        return self.weekday_of(day) < 5


def project_to_grid(lon: float, lat: float, config: GridConfig) -> tuple[GridIndex, tuple[float, float]]:
    x = (lon - config.origin_lon) * config.m_per_deg_lon
    y = (lat - config.origin_lat) * M_PER_DEG_LAT
    g = GridIndex(math.floor(y / config.cell_size), math.floor(x / config.cell_size))
    return g, (x, y)


def timestamp_to_slot(timestamp: int, config: GridConfig | None = None) -> SlotIndex:
    day, rem = divmod(int(timestamp), SECONDS_PER_DAY)
    return SlotIndex(day, rem // SLOT_SECONDS)


@dataclass
class RecordBatch:
    """Columnar records for many users, grouped by uid and time-sorted.

    Rows of user ``uids[u]`` occupy ``offsets[u]:offsets[u + 1]``.
    """

    uids: list[str]
    offsets: np.ndarray
    t: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    x: np.ndarray
    y: np.ndarray
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.t)

    @property
    def n_users(self) -> int:
        return len(self.uids)

    def user_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_users), np.diff(self.offsets))

    def select_users(self, start: int, stop: int) -> "RecordBatch":
        lo, hi = self.offsets[start], self.offsets[stop]
        return RecordBatch(
            uids=self.uids[start:stop],
            offsets=self.offsets[start : stop + 1] - lo,
            t=self.t[lo:hi],
            lon=self.lon[lo:hi],
            lat=self.lat[lo:hi],
            x=self.x[lo:hi],
            y=self.y[lo:hi],
        )

    def select_uids(self, uids: Sequence[str]) -> "RecordBatch":
        """Records of ``uids`` in the given order; unknown uids get no records."""
        pos = {u: i for i, u in enumerate(self.uids)}
        parts = [self.select_users(pos[u], pos[u] + 1) if u in pos else None for u in uids]
        lengths = [0 if p is None else len(p) for p in parts]

        def cat(name):
            return np.concatenate([getattr(p, name) for p in parts if p is not None] or [np.zeros(0)])

        return RecordBatch(
            uids=list(uids),
            offsets=np.r_[0, np.cumsum(lengths)].astype(np.int64),
            t=cat("t").astype(np.int64),
            lon=cat("lon"),
            lat=cat("lat"),
            x=cat("x"),
            y=cat("y"),
        )

    def user_records(self, u: int) -> list[RawRecord]:
        lo, hi = self.offsets[u], self.offsets[u + 1]
        uid = self.uids[u]
        return [
            RawRecord(uid, int(t), float(lon), float(lat))
            for t, lon, lat in zip(self.t[lo:hi], self.lon[lo:hi], self.lat[lo:hi])
        ]

    @classmethod
    def from_arrays(cls, uid, t, lon, lat, config: GridConfig, skipped: int = 0) -> "RecordBatch":
        """Group and sort unsorted columns; ties keep input order."""
        codes, uniques = pd.factorize(np.asarray(uid, dtype=object), sort=True)
        t = np.asarray(t, dtype=np.int64)
        order = np.lexsort((t, codes))
        codes = codes[order]
        lon = np.asarray(lon, dtype=float)[order]
        lat = np.asarray(lat, dtype=float)[order]
        x, y = config.to_local(lon, lat)
        offsets = np.searchsorted(codes, np.arange(len(uniques) + 1)).astype(np.int64)
        return cls(
            uids=[str(u) for u in uniques],
            offsets=offsets,
            t=t[order],
            lon=lon,
            lat=lat,
            x=x,
            y=y,
            skipped=skipped,
        )

    @classmethod
    def empty(cls) -> "RecordBatch":
        z = np.zeros(0)
        return cls([], np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64), z, z, z, z)


@dataclass
class ParseResult:
    records: dict[str, list[RawRecord]] = field(default_factory=dict)
    skipped: int = 0


_BLANK_LINE = re.compile(rb"(?m)^[ \t\r]*\n")


def _count_lines(data: bytes) -> int:
    if not data:
        return 0
    n = data.count(b"\n")
    return n if data.endswith(b"\n") else n + 1


def read_record_batch(source: BinaryIO | bytes | str | os.PathLike, config: GridConfig) -> RecordBatch:
    """Read a Uid,Timestamp,Longitude,Latitude CSV (path, bytes or binary file).

    Malformed rows (wrong field count, unparsable values, out-of-range
    coordinates, timestamps before the epoch) are skipped and counted.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source if isinstance(source, (bytes, bytearray)) else source.read()
    if not data.strip():
        return RecordBatch.empty()
    lines = _count_lines(data)
    df = pd.read_csv(
        io.BytesIO(data),
        dtype=str,
        skipinitialspace=True,
        skip_blank_lines=True,
        on_bad_lines="skip",
        keep_default_na=False,
    )
    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"CSV header lacks columns {missing}")
    uid = df["Uid"].str.strip()
    ts = pd.to_datetime(df["Timestamp"].str.strip(), format=TIMESTAMP_FORMAT, errors="coerce")
    lon = pd.to_numeric(df["Longitude"], errors="coerce").to_numpy(dtype=float)
    lat = pd.to_numeric(df["Latitude"], errors="coerce").to_numpy(dtype=float)
    epoch = pd.Timestamp(config.epoch_date)
    secs = ((ts - epoch) // pd.Timedelta(seconds=1)).to_numpy(dtype=float, na_value=np.nan)
    ok = (
        (uid.str.len() > 0).to_numpy()
        & np.isfinite(secs)
        & (secs >= 0)
        & np.isfinite(lon)
        & np.isfinite(lat)
        & (np.abs(lon) <= 180)
        & (np.abs(lat) <= 90)
    )
    dropped = lines - len(_BLANK_LINE.findall(data)) - 1 - len(df)
    skipped = int((~ok).sum()) + max(dropped, 0)
    return RecordBatch.from_arrays(
        uid.to_numpy()[ok], secs[ok].astype(np.int64), lon[ok], lat[ok], config, skipped=skipped
    )


def parse_records(source: BinaryIO | bytes | str | os.PathLike, config: GridConfig = GridConfig()) -> ParseResult:
    batch = read_record_batch(source, config)
    out = ParseResult(skipped=batch.skipped)
    for u in range(batch.n_users):
        out.records[batch.uids[u]] = batch.user_records(u)
    return out
