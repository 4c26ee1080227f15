"""Raw GPS parsing, forward-fill resampling, and the cluster location alphabet.

The pipeline here is strictly causal: a slot's value depends only on records
whose timestamp is at or before the slot's end, so the same code serves both
offline preprocessing and the online stream.
"""

from __future__ import annotations

import csv
import gzip
import io
from collections import Counter
from dataclasses import dataclass
from datetime import date, datetime, timezone
from pathlib import Path
from typing import IO, Iterable

import numpy as np
from scipy.spatial import cKDTree

from .geo import (
    DEFAULT_RESOLUTION,
    GeoError,
    GeoPoint,
    HexCellId,
    Projection,
    hex_centers_arrays,
    hex_index,
    hex_index_arrays,
    pack_cells,
    unpack_cells,
)

DEFAULT_SLOT_SECONDS = 300
DEFAULT_N_TOP = 1000
DEFAULT_N_SAMPLED = 2600


class VocabularyError(ValueError):
    """Raised when the observed cells cannot support the requested vocabulary."""


@dataclass(frozen=True)
class RawGpsRecord:
    user_id: str
    timestamp: float  # seconds since epoch
    position: GeoPoint


@dataclass(frozen=True)
class RejectedLine:
    line_no: int
    reason: str
    raw: str


@dataclass
class ParseResult:
    records: list[RawGpsRecord]
    rejects: list[RejectedLine]


def _parse_timestamp(text: str) -> float:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _open_source(source: str | Path | IO) -> IO:
    if isinstance(source, (str, Path)):
        p = Path(source)
        if p.suffix == ".gz":
            return io.TextIOWrapper(gzip.open(p, "rb"), encoding="utf-8")
        return open(p, "r", encoding="utf-8", newline="")
    return source


def parse_raw(source: str | Path | IO, didi_columns: bool = False) -> ParseResult:
    """Parse a raw-GPS CSV stream into time-sorted records plus rejects.

    Default column order is `user_id,timestamp,lat,lon` (header required);
    with `didi_columns=True` the order is `driver_id,order_id,timestamp,lon,lat`
    without a header, and the order id becomes the user id.
    """
    records: list[RawGpsRecord] = []
    rejects: list[RejectedLine] = []
    f = _open_source(source)
    try:
        reader = csv.reader(f)
        start_line = 1
        if not didi_columns:
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["user_id", "timestamp", "lat", "lon"]:
                raise IOError(f"bad raw-GPS header: {header}")
            start_line = 2
        for line_no, row in enumerate(reader, start=start_line):
            if not row:
                continue
            try:
                if didi_columns:
                    _driver, user_id, ts, lon, lat = row
                else:
                    user_id, ts, lat, lon = row
                records.append(
                    RawGpsRecord(user_id, _parse_timestamp(ts), GeoPoint(float(lat), float(lon)))
                )
            except (ValueError, GeoError) as exc:
                rejects.append(RejectedLine(line_no, str(exc), ",".join(row)))
    finally:
        if isinstance(source, (str, Path)):
            f.close()
    records.sort(key=lambda rec: (rec.user_id, rec.timestamp))
    return ParseResult(records, rejects)


class CellIndexer:
    """Bundles a projection and a hex resolution into a point -> cell mapping."""

    def __init__(self, projection: Projection, resolution: int = DEFAULT_RESOLUTION):
        self.projection = projection
        self.resolution = resolution

    def cell_of(self, p: GeoPoint) -> HexCellId:
        return hex_index(self.projection.project(p), self.resolution)

    def cells_of_arrays(self, lats: np.ndarray, lons: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = self.projection.project_arrays(lats, lons)
        return hex_index_arrays(xs, ys, self.resolution)


def day_start_epoch(day: date) -> float:
    return datetime(day.year, day.month, day.day, tzinfo=timezone.utc).timestamp()


@dataclass
class SlottedTrajectory:
    user_id: str
    day: date
    slots: list[HexCellId | None]
    slot_seconds: int = DEFAULT_SLOT_SECONDS

    @property
    def n_slots(self) -> int:
        return len(self.slots)


def resample_forward_fill(
    records: Iterable[RawGpsRecord],
    indexer: CellIndexer,
    day: date | None = None,
    slot_seconds: int = DEFAULT_SLOT_SECONDS,
) -> SlottedTrajectory:
    """Forward-fill one user's records of one day onto a uniform slot grid.

    Slot t takes the cell of the most recent record with timestamp <= end of
    slot t; slots before the first record stay empty. No future information
    is used, so truncating the input after time t leaves slots <= t unchanged.
    """
    recs = sorted(records, key=lambda r: r.timestamp)
    if day is None:
        if not recs:
            raise ValueError("day must be given when there are no records")
        day = datetime.fromtimestamp(recs[0].timestamp, tz=timezone.utc).date()
    n_slots = 86400 // slot_seconds
    start = day_start_epoch(day)
    slots: list[HexCellId | None] = [None] * n_slots
    user_id = recs[0].user_id if recs else ""
    i = 0
    last_cell: HexCellId | None = None
    for t in range(n_slots):
        slot_end = start + (t + 1) * slot_seconds
        while i < len(recs) and recs[i].timestamp <= slot_end:
            last_cell = indexer.cell_of(recs[i].position)
            i += 1
        slots[t] = last_cell
    return SlottedTrajectory(user_id=user_id, day=day, slots=slots, slot_seconds=slot_seconds)


def count_cell_visits(trajectories: Iterable[SlottedTrajectory]) -> Counter:
    """One visit = one populated slot, so sampling rates do not bias the counts."""
    counts: Counter = Counter()
    for traj in trajectories:
        for cell in traj.slots:
            if cell is not None:
                counts[cell] += 1
    return counts


class ClusterVocabulary:
    """3600-symbol (by default) location alphabet over hex cells.

    type1 holds the most frequently visited cells, each its own cluster;
    type2 holds frequency-weighted sampled cells from the remainder. Any cell
    outside the vocabulary resolves to the nearest type2 cell's cluster.
    """

    def __init__(self, type1: list[HexCellId], type2: list[HexCellId], resolution: int):
        overlap = set(type1) & set(type2)
        if overlap:
            raise VocabularyError(f"type1/type2 overlap: {sorted(overlap)[:3]}")
        self.type1 = list(type1)
        self.type2 = list(type2)
        self.resolution = resolution
        self._cluster_of: dict[HexCellId, int] = {}
        for i, cell in enumerate(self.type1):
            self._cluster_of[cell] = i
        for j, cell in enumerate(self.type2):
            self._cluster_of[cell] = len(self.type1) + j
        xs, ys = hex_centers_arrays(
            np.array([c.q for c in self.type2]), np.array([c.r for c in self.type2]), resolution
        )
        self._type2_tree = cKDTree(np.column_stack([xs, ys]))
        self._fallback_cache: dict[HexCellId, int] = {}

    @property
    def n_clusters(self) -> int:
        return len(self.type1) + len(self.type2)

    def cluster_of(self, cell: HexCellId) -> int:
        known = self._cluster_of.get(cell)
        if known is not None:
            return known
        cached = self._fallback_cache.get(cell)
        if cached is not None:
            return cached
        xs, ys = hex_centers_arrays(np.array([cell.q]), np.array([cell.r]), self.resolution)
        dists, idx = self._type2_tree.query(np.column_stack([xs, ys]), k=len(self.type2))
        dists, idx = dists[0], np.atleast_1d(idx[0])
        # nearest type2 center; ties broken by the smaller cluster index
        best = np.flatnonzero(dists <= dists[0] + 1e-9)
        cluster = len(self.type1) + int(idx[best].min())
        self._fallback_cache[cell] = cluster
        return cluster

    def clusters_of_arrays(self, qs: np.ndarray, rs: np.ndarray) -> np.ndarray:
        """Vectorized cell -> cluster mapping (builds the fallback per unique cell)."""
        keys = pack_cells(qs, rs)
        uniq, inverse = np.unique(keys, return_inverse=True)
        uq, ur = unpack_cells(uniq)
        lut = np.empty(len(uniq), dtype=np.int32)
        for i in range(len(uniq)):
            lut[i] = self.cluster_of(HexCellId(int(uq[i]), int(ur[i]), self.resolution))
        return lut[inverse]

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["cluster_id", "q", "r", "resolution", "kind"])
            for i, cell in enumerate(self.type1):
                writer.writerow([i, cell.q, cell.r, cell.resolution, "TOP"])
            for j, cell in enumerate(self.type2):
                writer.writerow([len(self.type1) + j, cell.q, cell.r, cell.resolution, "SAMPLED"])

    @classmethod
    def load_csv(cls, path: str | Path) -> "ClusterVocabulary":
        type1: list[HexCellId] = []
        type2: list[HexCellId] = []
        resolution = DEFAULT_RESOLUTION
        with open(path, newline="") as f:
            reader = csv.reader(f)
            next(reader)
            for row in reader:
                if not row:
                    continue
                _cid, q, r, res, kind = row
                cell = HexCellId(int(q), int(r), int(res))
                resolution = cell.resolution
                (type1 if kind == "TOP" else type2).append(cell)
        return cls(type1, type2, resolution)


def build_vocabulary(
    trajectories_or_counts: Iterable[SlottedTrajectory] | Counter,
    n_top: int = DEFAULT_N_TOP,
    n_sampled: int = DEFAULT_N_SAMPLED,
    seed: int = 0,
    resolution: int | None = None,
) -> ClusterVocabulary:
    """Build the location alphabet from training-period visit counts.

    type1 = the n_top most frequent cells (ties by cell id order); type2 =
    n_sampled cells drawn without replacement from the remainder, probability
    proportional to visit frequency (sequential draws with renormalization).
    """
    if isinstance(trajectories_or_counts, Counter):
        counts = trajectories_or_counts
    else:
        counts = count_cell_visits(trajectories_or_counts)
    if len(counts) < n_top + n_sampled:
        raise VocabularyError(
            f"need at least {n_top + n_sampled} distinct cells, saw {len(counts)}"
        )
    if resolution is None:
        resolution = next(iter(counts)).resolution

    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0].key()))
    type1 = [cell for cell, _ in ranked[:n_top]]

    remainder = ranked[n_top:]
    weights = np.array([c for _, c in remainder], dtype=np.float64)
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for _ in range(n_sampled):
        total = weights.sum()
        u = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(weights), u, side="right"))
        idx = min(idx, len(weights) - 1)
        chosen.append(idx)
        weights[idx] = 0.0
    type2 = [remainder[i][0] for i in chosen]
    return ClusterVocabulary(type1, type2, resolution)


@dataclass
class ClusterTrajectory:
    user_id: str
    day: date
    clusters: list[int | None]
    slot_seconds: int = DEFAULT_SLOT_SECONDS


def to_cluster_trajectory(s: SlottedTrajectory, v: ClusterVocabulary) -> ClusterTrajectory:
    clusters = [None if cell is None else v.cluster_of(cell) for cell in s.slots]
    return ClusterTrajectory(
        user_id=s.user_id, day=s.day, clusters=clusters, slot_seconds=s.slot_seconds
    )


# --- bulk array forms used by the experiment pipeline ---


def resample_day_arrays(
    user_codes: np.ndarray,
    timestamps: np.ndarray,
    lats: np.ndarray,
    lons: np.ndarray,
    n_users: int,
    day: date,
    indexer: CellIndexer,
    slot_seconds: int = DEFAULT_SLOT_SECONDS,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized forward-fill of one day's fixes for a whole population.

    Returns (cell_keys, xy) where cell_keys is (n_users, T) int64 holding
    bias-packed (q, r) per populated slot and -1 for empty, and xy is
    (n_users, T, 2) float32 with the fix position carried into each slot.
    Semantics match `resample_forward_fill` slot for slot.
    """
    n_slots = 86400 // slot_seconds
    start = day_start_epoch(day)
    EMPTY = -1
    cell_keys = np.full((n_users, n_slots), EMPTY, dtype=np.int64)
    xy = np.full((n_users, n_slots, 2), np.nan, dtype=np.float32)
    if len(timestamps) == 0:
        return cell_keys, xy

    qs, rs = indexer.cells_of_arrays(lats, lons)
    keys = pack_cells(qs, rs)
    xs, ys = indexer.projection.project_arrays(lats, lons)

    # slot that first sees the record: ts <= end of slot t, i.e. t >= ts/ss - 1
    rel = (np.asarray(timestamps) - start) / slot_seconds
    first_slot = np.ceil(rel - 1.0 - 1e-9).astype(np.int64)
    keep = (rel >= 0) & (first_slot < n_slots)
    first_slot = np.clip(first_slot, 0, n_slots - 1)

    order = np.lexsort((np.asarray(timestamps)[keep], np.asarray(user_codes)[keep]))
    u = np.asarray(user_codes)[keep][order]
    s = first_slot[keep][order]
    k = keys[keep][order]
    px = xs[keep][order]
    py = ys[keep][order]

    # last record landing in each (user, slot) wins
    cell_keys[u, s] = k
    xy[u, s, 0] = px
    xy[u, s, 1] = py

    # row-wise forward fill
    has = cell_keys != EMPTY
    idx = np.where(has, np.arange(n_slots)[None, :], -1)
    idx = np.maximum.accumulate(idx, axis=1)
    rows = np.arange(n_users)[:, None]
    filled = np.where(idx >= 0, cell_keys[rows, np.maximum(idx, 0)], EMPTY)
    xy = np.where((idx >= 0)[:, :, None], xy[rows, np.maximum(idx, 0)], np.nan)
    return filled, xy


def cluster_matrix_from_keys(cell_keys: np.ndarray, vocabulary: ClusterVocabulary) -> np.ndarray:
    """Map a packed-cell-key matrix to cluster ids; empty slots become -1."""
    out = np.full(cell_keys.shape, -1, dtype=np.int32)
    mask = cell_keys >= 0
    if mask.any():
        qs, rs = unpack_cells(cell_keys[mask])
        out[mask] = vocabulary.clusters_of_arrays(qs, rs)
    return out
