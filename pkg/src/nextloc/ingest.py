"""From raw pings to trajectory pairs: staypoints, grid locations, windows, splits.

File formats handled here all start with the line ``#nextloc-format v1``
followed by a comma-separated header.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .geo import (
    GeoDomainError,
    GeoPoint,
    MAX_LAT,
    MercatorPoint,
    NormStats,
    fit_norm_stats,
    from_mercator,
    geodesic_distance,
    to_mercator,
)

logger = logging.getLogger(__name__)

FORMAT_HEADER = "#nextloc-format v1"
DAY_SLOTS = 8
HOUR_SLOTS = 24

PING_FIELDS = ["user_id", "timestamp", "lon", "lat"]
VISIT_FIELDS = ["user_id", "location_id", "arrive_ts", "day_of_week", "hour", "duration_min"]
LOCATION_FIELDS = ["location_id", "center_lon", "center_lat", "grid_row", "grid_col"]
VIRTUAL_LOCATION_FIELDS = ["location_id", "grid_row", "grid_col"]


class DataFormatError(ValueError):
    """Input file or record violates the expected format."""


class RawPing(NamedTuple):
    user_id: str
    timestamp: float
    lon: float
    lat: float


class Staypoint(NamedTuple):
    center: GeoPoint
    arrive_ts: float
    duration: float  # seconds


@dataclass(frozen=True)
class VisitRecord:
    location_id: int
    day_of_week: int
    hour_of_day: int
    duration: float  # minutes
    arrive_ts: float

    def __post_init__(self):
        if not 0 <= self.hour_of_day < HOUR_SLOTS:
            raise DataFormatError(f"hour_of_day {self.hour_of_day} outside [0, 23]")
        if not 0 <= self.day_of_week < DAY_SLOTS:
            raise DataFormatError(f"day_of_week {self.day_of_week} outside [0, 7]")
        if not self.duration >= 0:
            raise DataFormatError(f"negative or NaN duration {self.duration}")


@dataclass
class Location:
    id: int
    center: MercatorPoint
    grid_row: int
    grid_col: int
    poi_profile: np.ndarray | None = None


@dataclass(frozen=True)
class TrajectoryPair:
    history: tuple
    current: tuple
    target: int
    target_ts: float = math.inf
    user_id: str = ""
    start: int = 0  # index of the first history record in the user's sequence

    def __post_init__(self):
        if not self.history or not self.current:
            raise ValueError("history and current trajectories must be non-empty")
        if self.history[-1].arrive_ts >= self.current[0].arrive_ts:
            raise ValueError("history must strictly precede the current trajectory")
        if self.current[-1].arrive_ts >= self.target_ts:
            raise ValueError("target visit must strictly follow the current trajectory")


@dataclass
class CityDataset:
    name: str
    locations: list
    pairs: list
    norm_stats: NormStats
    dur_bounds: tuple
    split: dict
    categories: list = field(default_factory=list)
    visits: dict = field(default_factory=dict)
    target_ts: np.ndarray | None = None
    virtual: bool = False
    norm_source: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [loc.id for loc in self.locations]
        if len(set(ids)) != len(ids):
            raise DataFormatError("duplicate location ids")
        known = set(ids)
        for pair in self.pairs:
            for rec in (*pair.history, *pair.current):
                if rec.location_id not in known:
                    raise DataFormatError(f"unknown location_id {rec.location_id}")
            if pair.target not in known:
                raise DataFormatError(f"unknown target location_id {pair.target}")
        if self.dur_bounds[0] > self.dur_bounds[1]:
            raise ValueError("dur_bounds must satisfy min <= max")

    @property
    def location_ids(self) -> np.ndarray:
        return np.array([loc.id for loc in self.locations], dtype=np.int64)

    @property
    def centers(self) -> np.ndarray:
        return np.array([loc.center for loc in self.locations], dtype=float)

    def location_lookup(self) -> dict:
        return {loc.id: loc for loc in self.locations}

    def subset(self, split_name: str) -> list:
        return [self.pairs[i] for i in self.split[split_name]]


# -- staypoints -------------------------------------------------------------


def _valid_ping(ping: RawPing) -> bool:
    return (
        math.isfinite(ping.timestamp)
        and math.isfinite(ping.lon)
        and math.isfinite(ping.lat)
        and abs(ping.lon) <= 180.0
        and abs(ping.lat) <= MAX_LAT
    )


def extract_staypoints(
    pings: Iterable[RawPing],
    time_gap_max: float = 3600.0,
    dist_max: float = 300.0,
    min_stay: float = 1200.0,
    rejected: Counter | None = None,
) -> list:
    """Staypoints of one user's time-sorted ping stream.

    A ping joins the open cluster when it arrives within ``time_gap_max``
    seconds of the previous member and lies within ``dist_max`` meters of
    the running centroid. Otherwise the cluster is closed and kept if its
    members span at least ``min_stay`` seconds.
    """
    out = []
    members: list = []
    sum_lon = sum_lat = 0.0

    def close():
        if members and members[-1].timestamp - members[0].timestamp >= min_stay:
            n = len(members)
            out.append(
                Staypoint(
                    GeoPoint(sum_lon / n, sum_lat / n),
                    members[0].timestamp,
                    members[-1].timestamp - members[0].timestamp,
                )
            )

    for ping in pings:
        if not _valid_ping(ping):
            if rejected is not None:
                rejected["malformed_ping"] += 1
            logger.debug("rejected malformed ping %r", ping)
            continue
        if members:
            if ping.timestamp < members[-1].timestamp:
                raise DataFormatError("pings must be sorted by timestamp")
            n = len(members)
            gap = ping.timestamp - members[-1].timestamp
            near = (
                geodesic_distance(sum_lon / n, sum_lat / n, ping.lon, ping.lat) <= dist_max
            )
            if gap <= time_gap_max and near:
                members.append(ping)
                sum_lon += ping.lon
                sum_lat += ping.lat
                continue
            close()
        members = [ping]
        sum_lon, sum_lat = ping.lon, ping.lat
    close()
    return out


# -- grids ------------------------------------------------------------------


def assign_grid(p: GeoPoint, origin: MercatorPoint, cell: float = 500.0):
    """Grid (row, col) of a point and the Mercator center of that cell."""
    if cell <= 0:
        raise ValueError("cell size must be positive")
    m = to_mercator(p.lon, p.lat)
    col = math.floor((m.x - origin.x) / cell)
    row = math.floor((m.y - origin.y) / cell)
    center = MercatorPoint(origin.x + (col + 0.5) * cell, origin.y + (row + 0.5) * cell)
    return row, col, center


def virtual_coordinates(grid_rows: int, grid_cols: int, cell: float = 500.0) -> np.ndarray:
    """Centers of a grid laid out around its own midpoint, shape (rows, cols, 2)."""
    if grid_rows <= 0 or grid_cols <= 0 or cell <= 0:
        raise ValueError("grid dimensions and cell size must be positive")
    cols = (np.arange(grid_cols) - grid_cols / 2 + 0.5) * cell
    rows = (np.arange(grid_rows) - grid_rows / 2 + 0.5) * cell
    out = np.empty((grid_rows, grid_cols, 2))
    out[:, :, 0] = cols[None, :]
    out[:, :, 1] = rows[:, None]
    return out


def staypoints_to_visits(staypoints: Sequence[Staypoint], origin: MercatorPoint, cell: float, cells: dict):
    """Map staypoints to grid locations, growing ``cells`` ((row, col) -> Location)."""
    visits = []
    for sp in staypoints:
        row, col, center = assign_grid(sp.center, origin, cell)
        loc = cells.get((row, col))
        if loc is None:
            loc = Location(len(cells), center, row, col)
            cells[(row, col)] = loc
        when = datetime.fromtimestamp(sp.arrive_ts, tz=timezone.utc)
        visits.append(
            VisitRecord(loc.id, when.weekday(), when.hour, sp.duration / 60.0, sp.arrive_ts)
        )
    return visits


def preprocess_pings(
    pings: Iterable[RawPing],
    cell: float = 500.0,
    time_gap_max: float = 3600.0,
    dist_max: float = 300.0,
    min_stay: float = 1200.0,
    origin: MercatorPoint | None = None,
):
    """Raw pings of many users -> (visits per user, locations, rejection counts)."""
    rejected: Counter = Counter()
    by_user: dict = {}
    for ping in pings:
        by_user.setdefault(ping.user_id, []).append(ping)
    stays = {}
    for user in sorted(by_user):
        stream = sorted(by_user[user], key=lambda p: p.timestamp)
        stays[user] = extract_staypoints(stream, time_gap_max, dist_max, min_stay, rejected)
    if origin is None:
        all_pts = [sp.center for user in stays for sp in stays[user]]
        if not all_pts:
            raise DataFormatError("no staypoints extracted")
        xs, ys = to_mercator([p.lon for p in all_pts], [p.lat for p in all_pts])
        origin = MercatorPoint(
            math.floor(float(np.min(xs)) / cell) * cell, math.floor(float(np.min(ys)) / cell) * cell
        )
    cells: dict = {}
    visits = {user: staypoints_to_visits(stays[user], origin, cell, cells) for user in sorted(stays)}
    locations = sorted(cells.values(), key=lambda loc: loc.id)
    return visits, locations, rejected


# -- pairs and splits -------------------------------------------------------


def build_pairs(visits: dict, M: int = 30, N: int = 6, stride: int = 1) -> list:
    """Sliding (history, current, target) windows over each user's visits."""
    if N >= M:
        raise ValueError(f"current length N={N} must be smaller than history length M={M}")
    if N < 1 or stride < 1:
        raise ValueError("N and stride must be positive")
    pairs = []
    for user in sorted(visits):
        seq = visits[user]
        for i in range(0, len(seq) - M - N, stride):
            target = seq[i + M + N]
            pairs.append(
                TrajectoryPair(
                    tuple(seq[i : i + M]),
                    tuple(seq[i + M : i + M + N]),
                    target.location_id,
                    target.arrive_ts,
                    user,
                    i,
                )
            )
    return pairs


def split_dataset(pairs: Sequence[TrajectoryPair], ratios=(0.7, 0.1, 0.2), seed: int = 0) -> dict:
    """Chronological train/val/test split by target timestamp.

    Pairs with equal target timestamps are ordered by a permutation drawn
    from ``seed``.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError("ratios must be three nonnegative numbers summing to 1")
    n = len(pairs)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise DataFormatError(f"a split would be empty for {n} pairs with ratios {ratios}")
    tie = np.random.default_rng(seed).permutation(n)
    ts = np.array([p.target_ts for p in pairs], dtype=float)
    order = np.lexsort((tie, ts))
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train : n_train + n_val]),
        "test": np.sort(order[n_train + n_val :]),
    }


def split_records(pairs: Sequence[TrajectoryPair], indices, visits: dict) -> list:
    """Distinct visit records covered by the given pairs, targets included."""
    covered: dict = {}
    for i in indices:
        pair = pairs[i]
        span = len(pair.history) + len(pair.current) + 1
        mask = covered.setdefault(pair.user_id, np.zeros(len(visits[pair.user_id]), dtype=bool))
        mask[pair.start : pair.start + span] = True
    return [visits[u][j] for u in sorted(covered) for j in np.flatnonzero(covered[u])]


def duration_bounds(records: Sequence[VisitRecord], ceiling: float = 1440.0) -> tuple:
    durs = np.minimum(np.array([r.duration for r in records], dtype=float), ceiling)
    lo, hi = float(durs.min()), float(durs.max())
    if not lo < hi:
        raise DataFormatError("duration bounds need at least two distinct durations")
    return lo, hi


def assemble_dataset(
    name: str,
    visits: dict,
    locations: list,
    M: int = 30,
    N: int = 6,
    stride: int = 1,
    ratios=(0.7, 0.1, 0.2),
    seed: int = 0,
    categories=None,
    norm_split: str = "train",
    dur_ceiling: float = 1440.0,
    virtual: bool = False,
) -> CityDataset:
    """Build pairs, split them, and fit normalization on the designated split."""
    pairs = build_pairs(visits, M, N, stride)
    if not pairs:
        raise DataFormatError("no user has enough visits to form a trajectory pair")
    split = split_dataset(pairs, ratios, seed)
    lookup = {loc.id: loc for loc in locations}
    norm_idx = np.arange(len(pairs)) if norm_split == "all" else split[norm_split]
    records = split_records(pairs, norm_idx, visits)
    xy = np.array([lookup[r.location_id].center for r in records], dtype=float)
    dur_records = split_records(pairs, split["train"], visits)
    return CityDataset(
        name=name,
        locations=sorted(locations, key=lambda loc: loc.id),
        pairs=pairs,
        norm_stats=fit_norm_stats(xy),
        dur_bounds=duration_bounds(dur_records, dur_ceiling),
        split=split,
        categories=list(categories or []),
        visits=visits,
        target_ts=np.array([p.target_ts for p in pairs]),
        virtual=virtual,
        norm_source=norm_split,
        meta={"M": M, "N": N, "stride": stride},
    )


def refit_norm_stats(dataset: CityDataset, split_name: str = "all") -> NormStats:
    """Normalization statistics over the visit records of one split (or all pairs)."""
    idx = np.arange(len(dataset.pairs)) if split_name == "all" else dataset.split[split_name]
    lookup = dataset.location_lookup()
    records = split_records(dataset.pairs, idx, dataset.visits)
    return fit_norm_stats(np.array([lookup[r.location_id].center for r in records], dtype=float))


# -- files ------------------------------------------------------------------


def _open_versioned(path):
    fh = open(path, newline="", encoding="utf-8")
    first = fh.readline().strip()
    if first != FORMAT_HEADER:
        fh.close()
        raise DataFormatError(f"{path}: missing '{FORMAT_HEADER}' header line")
    return fh


def read_rows(path, required: list):
    meta = {}
    with _open_versioned(path) as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                for token in line[1:].split():
                    if "=" in token:
                        key, value = token.split("=", 1)
                        meta[key] = value
                continue
            lines.append(line)
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or any(f not in reader.fieldnames for f in required):
        raise DataFormatError(f"{path}: header must contain {required}")
    return list(reader), meta


def write_rows(path, fields: list, rows: Iterable, comments: Sequence[str] = ()):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(FORMAT_HEADER + "\n")
        for comment in comments:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        writer.writerows(rows)


def read_pings(path) -> list:
    rows, _ = read_rows(path, PING_FIELDS)
    pings = []
    for row in rows:
        try:
            pings.append(
                RawPing(row["user_id"], float(row["timestamp"]), float(row["lon"]), float(row["lat"]))
            )
        except (TypeError, ValueError) as exc:
            raise DataFormatError(f"{path}: bad ping row {row}") from exc
    return pings


def write_pings(path, pings: Iterable[RawPing]) -> None:
    write_rows(path, PING_FIELDS, ([p.user_id, repr(p.timestamp), repr(p.lon), repr(p.lat)] for p in pings))


def read_visits(path) -> dict:
    rows, _ = read_rows(path, VISIT_FIELDS)
    visits: dict = {}
    try:
        for row in rows:
            visits.setdefault(row["user_id"], []).append(
                VisitRecord(
                    int(row["location_id"]),
                    int(row["day_of_week"]),
                    int(row["hour"]),
                    float(row["duration_min"]),
                    float(row["arrive_ts"]),
                )
            )
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: bad visit row: {exc}") from exc
    for seq in visits.values():
        seq.sort(key=lambda r: r.arrive_ts)
    return visits


def write_visits(path, visits: dict) -> None:
    rows = (
        [user, r.location_id, repr(r.arrive_ts), r.day_of_week, r.hour_of_day, repr(r.duration)]
        for user in sorted(visits)
        for r in visits[user]
    )
    write_rows(path, VISIT_FIELDS, rows)


def read_locations(path):
    """Location table; returns (locations, virtual flag, grid metadata)."""
    rows, meta = read_rows(path, VIRTUAL_LOCATION_FIELDS)
    virtual = bool(rows) and "center_lon" not in rows[0]
    locations = []
    try:
        if virtual:
            n_rows = int(meta.get("rows", 1 + max(int(r["grid_row"]) for r in rows)))
            n_cols = int(meta.get("cols", 1 + max(int(r["grid_col"]) for r in rows)))
            cell = float(meta.get("cell", 500.0))
            grid = virtual_coordinates(n_rows, n_cols, cell)
            # optional axis-aligned transform of the virtual plane
            scale = np.array([float(meta.get("scale_x", 1.0)), float(meta.get("scale_y", 1.0))])
            shift = np.array([float(meta.get("shift_x", 0.0)), float(meta.get("shift_y", 0.0))])
            grid = grid * scale + shift
            for r in rows:
                gr, gc = int(r["grid_row"]), int(r["grid_col"])
                if r.get("x") and r.get("y"):
                    center = MercatorPoint(float(r["x"]), float(r["y"]))
                else:
                    center = MercatorPoint(*grid[gr, gc])
                locations.append(Location(int(r["location_id"]), center, gr, gc))
        else:
            for r in rows:
                center = to_mercator(float(r["center_lon"]), float(r["center_lat"]))
                locations.append(Location(int(r["location_id"]), center, int(r["grid_row"]), int(r["grid_col"])))
    except (KeyError, ValueError, IndexError, GeoDomainError) as exc:
        raise DataFormatError(f"{path}: bad location row: {exc}") from exc
    return locations, virtual, meta


def write_locations(path, locations: Sequence[Location], virtual: bool = False, grid_meta: dict | None = None) -> None:
    if virtual:
        comments = [" ".join(f"{k}={v}" for k, v in (grid_meta or {}).items())] if grid_meta else []
        # explicit planar centers keep transformed (cloned) cities lossless
        rows = ([loc.id, loc.grid_row, loc.grid_col, repr(float(loc.center[0])), repr(float(loc.center[1]))] for loc in locations)
        write_rows(path, VIRTUAL_LOCATION_FIELDS + ["x", "y"], rows, comments)
        return
    rows = []
    for loc in locations:
        geo = from_mercator(*loc.center)
        rows.append([loc.id, repr(geo.lon), repr(geo.lat), loc.grid_row, loc.grid_col])
    write_rows(path, LOCATION_FIELDS, rows)
