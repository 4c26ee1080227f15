"""Historical trajectory database: windowed slices sharded by destination cluster.

Every node-level trajectory is cut into fixed-horizon slices on the
prediction grid; a slice lands in the shard of the cluster its user occupies
at the end of the horizon. Each shard carries a k-d tree over spatiotemporal
query vectors (position in meters plus a scaled time-of-day circle) for exact
nearest-neighbor retrieval.

On disk a database is a directory: a JSON manifest with string tables and
checksums, and one binary file per shard (length-prefixed slice records plus
the serialized index vectors; integers little-endian 64-bit). Shards load
lazily and independently.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geo import GeoPoint, LocalXY, Mode, Projection, TransportGraph
from .ingest import day_start_epoch
from .mapmatch import NodeTrajectory

FORMAT_VERSION = 1
_MAGIC = b"MTWTRJDB"
_NONE_U64 = 0xFFFFFFFFFFFFFFFF
MODE_TABLE = (Mode.WALK, Mode.BICYCLE, Mode.CAR, Mode.TRAIN, Mode.OTHER)


class DatabaseError(RuntimeError):
    pass


class DatabaseLoadError(DatabaseError):
    pass


@dataclass
class DbConfig:
    delta_t_slots: int = 12
    slot_seconds: int = 300
    stride_slots: int = 3      # prediction grid: one origin every 15 minutes
    alpha_m: float = 2000.0    # weight of the time-of-day circle, in meters

    @property
    def n_time_slots(self) -> int:
        return 86400 // self.slot_seconds

    def to_dict(self) -> dict:
        return {
            "delta_t_slots": self.delta_t_slots,
            "slot_seconds": self.slot_seconds,
            "stride_slots": self.stride_slots,
            "alpha_m": self.alpha_m,
        }


@dataclass(frozen=True)
class DbKey:
    user: str
    day: date
    slot: int


@dataclass
class DbSlice:
    """One horizon window of one user-day, as array views into its shard."""

    key: DbKey
    start_position: GeoPoint
    destination_cluster: int
    times: np.ndarray      # seconds since epoch, first entry = window start
    node_idx: np.ndarray   # into the database node table
    link_idx: np.ndarray   # into the database link table, -1 for none
    mode_idx: np.ndarray   # into MODE_TABLE, -1 for stay/dwell rows

    def link_idx_set(self) -> set[int]:
        return set(int(l) for l in self.link_idx if l >= 0)

    def link_ids(self, db: "TrajectoryDatabase") -> frozenset[str]:
        return frozenset(db.link_table[l] for l in self.link_idx_set())


def query_vector(xy: LocalXY, slot: int, n_time_slots: int, alpha_m: float) -> np.ndarray:
    """Spatiotemporal embedding: (lat-meters, lon-meters, a*cos, a*sin).

    With alpha = 0 the metric degenerates to plain spatial distance; slots
    t and T-t land on distinct points of the circle, preserving periodicity.
    """
    angle = 2.0 * math.pi * (slot % n_time_slots) / n_time_slots
    return np.array([xy.y, xy.x, alpha_m * math.cos(angle), alpha_m * math.sin(angle)])


class _Shard:
    """Columnar slice storage plus the spatial index of one destination cluster."""

    def __init__(self, cid: int):
        self.cid = cid
        self.user_idx = np.zeros(0, dtype=np.int64)
        self.day_ord = np.zeros(0, dtype=np.int64)
        self.slot = np.zeros(0, dtype=np.int64)
        self.start_lat = np.zeros(0, dtype=np.float64)
        self.start_lon = np.zeros(0, dtype=np.float64)
        self.visit_offsets = np.zeros(1, dtype=np.int64)
        self.visit_t = np.zeros(0, dtype=np.float64)
        self.visit_node = np.zeros(0, dtype=np.int64)
        self.visit_link = np.zeros(0, dtype=np.int64)
        self.visit_mode = np.zeros(0, dtype=np.int64)
        self.vectors = np.zeros((0, 4), dtype=np.float64)
        self._tree: cKDTree | None = None

    def __len__(self) -> int:
        return len(self.slot)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.vectors)
        return self._tree

    def slice_view(self, i: int, db: "TrajectoryDatabase") -> DbSlice:
        lo, hi = self.visit_offsets[i], self.visit_offsets[i + 1]
        return DbSlice(
            key=DbKey(
                user=db.user_table[self.user_idx[i]],
                day=date.fromordinal(int(self.day_ord[i])),
                slot=int(self.slot[i]),
            ),
            start_position=GeoPoint(float(self.start_lat[i]), float(self.start_lon[i])),
            destination_cluster=self.cid,
            times=self.visit_t[lo:hi],
            node_idx=self.visit_node[lo:hi],
            link_idx=self.visit_link[lo:hi],
            mode_idx=self.visit_mode[lo:hi],
        )


class _ShardBuilder:
    def __init__(self):
        self.user_idx, self.day_ord, self.slot = [], [], []
        self.start_lat, self.start_lon = [], []
        self.visit_t, self.visit_node, self.visit_link, self.visit_mode = [], [], [], []
        self.vectors = []

    def finalize(self, cid: int) -> _Shard:
        s = _Shard(cid)
        s.user_idx = np.array(self.user_idx, dtype=np.int64)
        s.day_ord = np.array(self.day_ord, dtype=np.int64)
        s.slot = np.array(self.slot, dtype=np.int64)
        s.start_lat = np.array(self.start_lat, dtype=np.float64)
        s.start_lon = np.array(self.start_lon, dtype=np.float64)
        s.visit_offsets = np.concatenate(
            [[0], np.cumsum([len(t) for t in self.visit_t], dtype=np.int64)]
        ).astype(np.int64)
        s.visit_t = np.concatenate(self.visit_t) if self.visit_t else np.zeros(0)
        s.visit_node = (
            np.concatenate(self.visit_node).astype(np.int64) if self.visit_node else np.zeros(0, dtype=np.int64)
        )
        s.visit_link = (
            np.concatenate(self.visit_link).astype(np.int64) if self.visit_link else np.zeros(0, dtype=np.int64)
        )
        s.visit_mode = (
            np.concatenate(self.visit_mode).astype(np.int64) if self.visit_mode else np.zeros(0, dtype=np.int64)
        )
        s.vectors = np.vstack(self.vectors) if self.vectors else np.zeros((0, 4))
        return s


class TrajectoryDatabase:
    def __init__(self, config: DbConfig, projection: Projection):
        self.config = config
        self.projection = projection
        self.user_table: list[str] = []
        self.node_table: list[str] = []
        self.link_table: list[str] = []
        self.shards: dict[int, _Shard] = {}
        self.skip_counts: dict[str, int] = {
            "empty_destination": 0,
            "no_position": 0,
            "missing_cluster_trajectory": 0,
        }
        self._dir: Path | None = None
        self._shard_files: dict[int, dict] = {}
        self.files_opened: list[str] = []

    # --- construction -----------------------------------------------------

    @classmethod
    def build(
        cls,
        trajectories: Iterable[NodeTrajectory],
        cluster_lookup: Mapping[tuple[str, date], Sequence[int | None] | np.ndarray],
        config: DbConfig,
        graph: TransportGraph,
    ) -> "TrajectoryDatabase":
        """Slice trajectories on the prediction grid and shard by destination.

        A slice at origin slot t requires a known position at t (some visit at
        or before the window start) and a populated destination cluster at
        t + horizon; anything else is skipped and counted.
        """
        db = cls(config, graph.projection)
        db.node_table = list(graph.node_ids)
        db.link_table = sorted(graph.links)
        node_pos = {n: i for i, n in enumerate(db.node_table)}
        link_pos = {l: i for i, l in enumerate(db.link_table)}
        mode_pos = {m: i for i, m in enumerate(MODE_TABLE)}
        node_xy = graph.node_xy_matrix()
        node_lat = np.array([graph.nodes[n].lat for n in db.node_table])
        node_lon = np.array([graph.nodes[n].lon for n in db.node_table])

        user_interned: dict[str, int] = {}
        builders: dict[int, _ShardBuilder] = {}

        grouped: dict[tuple[str, date], list[NodeTrajectory]] = {}
        for traj in trajectories:
            grouped.setdefault((traj.user_id, traj.day), []).append(traj)

        T = config.n_time_slots
        dT = config.delta_t_slots
        for (user, day) in sorted(grouped, key=lambda k: (k[0], k[1].toordinal())):
            clusters = cluster_lookup.get((user, day))
            if clusters is None:
                db.skip_counts["missing_cluster_trajectory"] += 1
                continue
            visits = sorted(
                (v for traj in grouped[(user, day)] for v in traj.visits), key=lambda v: v.t
            )
            times = np.array([v.t for v in visits])
            n_idx = np.array([node_pos[v.node] for v in visits], dtype=np.int64)
            l_idx = np.array(
                [link_pos[v.link_in] if v.link_in else -1 for v in visits], dtype=np.int64
            )
            m_idx = np.array(
                [mode_pos[v.mode] if v.mode is not None else -1 for v in visits], dtype=np.int64
            )
            day0 = day_start_epoch(day)
            u_idx = user_interned.setdefault(user, len(user_interned))
            if u_idx == len(db.user_table):
                db.user_table.append(user)

            for t_hat in range(0, T - dT, config.stride_slots):
                dest = clusters[t_hat + dT]
                if dest is None or dest < 0:
                    db.skip_counts["empty_destination"] += 1
                    continue
                w_start = day0 + t_hat * config.slot_seconds
                w_end = w_start + dT * config.slot_seconds
                first_inside = int(np.searchsorted(times, w_start, side="right"))
                if first_inside == 0:
                    db.skip_counts["no_position"] += 1
                    continue
                hi = int(np.searchsorted(times, w_end, side="right"))
                anchor = first_inside - 1
                start_node = int(n_idx[anchor])

                cid = int(dest)
                b = builders.get(cid)
                if b is None:
                    b = builders[cid] = _ShardBuilder()
                b.user_idx.append(u_idx)
                b.day_ord.append(day.toordinal())
                b.slot.append(t_hat)
                b.start_lat.append(node_lat[start_node])
                b.start_lon.append(node_lon[start_node])
                sel = slice(first_inside, hi)
                b.visit_t.append(np.concatenate([[w_start], times[sel]]))
                b.visit_node.append(np.concatenate([[start_node], n_idx[sel]]))
                b.visit_link.append(np.concatenate([[-1], l_idx[sel]]))
                b.visit_mode.append(np.concatenate([[-1], m_idx[sel]]))
                xy = node_xy[start_node]
                b.vectors.append(
                    query_vector(LocalXY(xy[0], xy[1]), t_hat, T, config.alpha_m)
                )

        db.shards = {cid: b.finalize(cid) for cid, b in sorted(builders.items())}
        return db

    # --- queries ------------------------------------------------------------

    def shard_ids(self) -> list[int]:
        if self._dir is not None:
            return sorted(int(c) for c in self._shard_files)
        return sorted(self.shards)

    def shard_count(self, cid: int) -> int:
        if self._dir is not None and cid in self._shard_files:
            return int(self._shard_files[cid]["count"])
        shard = self.shards.get(cid)
        return len(shard) if shard is not None else 0

    def shard_counts(self) -> dict[int, int]:
        return {cid: self.shard_count(cid) for cid in self.shard_ids()}

    def total_slices(self) -> int:
        return sum(self.shard_counts().values())

    def get_shard(self, cid: int) -> _Shard | None:
        shard = self.shards.get(cid)
        if shard is None and self._dir is not None and cid in self._shard_files:
            shard = self._load_shard(cid)
            self.shards[cid] = shard
        return shard

    @property
    def loaded_shards(self) -> set[int]:
        return set(self.shards)

    def make_query(self, xy: LocalXY, slot: int) -> np.ndarray:
        return query_vector(xy, slot, self.config.n_time_slots, self.config.alpha_m)

    def knn(self, cid: int, q: np.ndarray, k: int) -> list[tuple[DbSlice, float]]:
        """Exact K nearest slices of shard `cid` by Euclidean query distance."""
        shard = self.get_shard(cid)
        if shard is None or len(shard) == 0 or k <= 0:
            return []
        k_eff = min(k, len(shard))
        dist, idx = shard.tree.query(q, k=k_eff)
        if k_eff == 1:
            dist, idx = np.array([dist]), np.array([idx])
        return [(shard.slice_view(int(i), self), float(d)) for d, i in zip(dist, idx)]

    def knn_indices(self, cid: int, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        shard = self.get_shard(cid)
        if shard is None or len(shard) == 0 or k <= 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        k_eff = min(k, len(shard))
        dist, idx = shard.tree.query(q, k=k_eff)
        if k_eff == 1:
            dist, idx = np.array([dist]), np.array([idx])
        return np.asarray(idx, dtype=np.int64), np.asarray(dist, dtype=np.float64)

    # --- persistence --------------------------------------------------------

    def persist(self, path: str | Path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        shard_entries = {}
        for cid in sorted(self.shards):
            shard = self.shards[cid]
            fname = f"shard_{cid:05d}.bin"
            blob = _serialize_shard(shard)
            (path / fname).write_bytes(blob)
            shard_entries[str(cid)] = {
                "file": fname,
                "count": len(shard),
                "sha256": hashlib.sha256(blob).hexdigest(),
            }
        manifest = {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "origin_lat": self.projection.origin.lat,
            "origin_lon": self.projection.origin.lon,
            "user_table": self.user_table,
            "node_table": self.node_table,
            "link_table": self.link_table,
            "skip_counts": self.skip_counts,
            "shards": shard_entries,
        }
        (path / "manifest.json").write_text(json.dumps(manifest))

    @classmethod
    def load(cls, path: str | Path, lazy: bool = True) -> "TrajectoryDatabase":
        path = Path(path)
        try:
            manifest = json.loads((path / "manifest.json").read_text())
        except FileNotFoundError as exc:
            raise DatabaseLoadError(f"no manifest in {path}") from exc
        if manifest.get("format_version") != FORMAT_VERSION:
            raise DatabaseLoadError(f"unsupported version {manifest.get('format_version')}")
        config = DbConfig(**manifest["config"])
        projection = Projection(GeoPoint(manifest["origin_lat"], manifest["origin_lon"]))
        db = cls(config, projection)
        db.user_table = manifest["user_table"]
        db.node_table = manifest["node_table"]
        db.link_table = manifest["link_table"]
        db.skip_counts = manifest["skip_counts"]
        db._dir = path
        db._shard_files = {int(cid): entry for cid, entry in manifest["shards"].items()}
        if not lazy:
            for cid in db._shard_files:
                db.get_shard(cid)
        return db

    def _load_shard(self, cid: int) -> _Shard:
        entry = self._shard_files[cid]
        fpath = self._dir / entry["file"]
        blob = fpath.read_bytes()
        self.files_opened.append(entry["file"])
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise DatabaseLoadError(f"checksum mismatch for {entry['file']}")
        return _deserialize_shard(blob, cid)


def _serialize_shard(shard: _Shard) -> bytes:
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<QQQ", FORMAT_VERSION, shard.cid, len(shard))
    for i in range(len(shard)):
        lo, hi = int(shard.visit_offsets[i]), int(shard.visit_offsets[i + 1])
        n_visits = hi - lo
        record = bytearray()
        record += struct.pack(
            "<QqQddQ",
            int(shard.user_idx[i]),
            int(shard.day_ord[i]),
            int(shard.slot[i]),
            float(shard.start_lat[i]),
            float(shard.start_lon[i]),
            n_visits,
        )
        record += shard.visit_t[lo:hi].astype("<f8").tobytes()
        record += np.where(shard.visit_node[lo:hi] < 0, _NONE_U64, shard.visit_node[lo:hi]).astype("<u8").tobytes()
        record += np.where(shard.visit_link[lo:hi] < 0, _NONE_U64, shard.visit_link[lo:hi]).astype("<u8").tobytes()
        record += np.where(shard.visit_mode[lo:hi] < 0, _NONE_U64, shard.visit_mode[lo:hi]).astype("<u8").tobytes()
        out += struct.pack("<Q", len(record))
        out += record
    out += shard.vectors.astype("<f8").tobytes()
    return bytes(out)


def _deserialize_shard(blob: bytes, expect_cid: int) -> _Shard:
    if blob[: len(_MAGIC)] != _MAGIC:
        raise DatabaseLoadError("bad shard magic")
    off = len(_MAGIC)
    version, cid, count = struct.unpack_from("<QQQ", blob, off)
    off += 24
    if version != FORMAT_VERSION or cid != expect_cid:
        raise DatabaseLoadError("shard header mismatch")
    b = _ShardBuilder()
    for _ in range(count):
        (rec_len,) = struct.unpack_from("<Q", blob, off)
        off += 8
        end = off + rec_len
        u, day_ord, slot, lat, lon, n_visits = struct.unpack_from("<QqQddQ", blob, off)
        p = off + struct.calcsize("<QqQddQ")
        t = np.frombuffer(blob, dtype="<f8", count=n_visits, offset=p)
        p += 8 * n_visits
        node = np.frombuffer(blob, dtype="<u8", count=n_visits, offset=p)
        p += 8 * n_visits
        link = np.frombuffer(blob, dtype="<u8", count=n_visits, offset=p)
        p += 8 * n_visits
        mode = np.frombuffer(blob, dtype="<u8", count=n_visits, offset=p)
        p += 8 * n_visits
        if p != end:
            raise DatabaseLoadError("slice record length mismatch")
        b.user_idx.append(u)
        b.day_ord.append(day_ord)
        b.slot.append(slot)
        b.start_lat.append(lat)
        b.start_lon.append(lon)
        b.visit_t.append(t.astype(np.float64))
        b.visit_node.append(np.where(node == _NONE_U64, -1, node.astype(np.int64)))
        b.visit_link.append(np.where(link == _NONE_U64, -1, link.astype(np.int64)))
        b.visit_mode.append(np.where(mode == _NONE_U64, -1, mode.astype(np.int64)))
        off = end
    vec = np.frombuffer(blob, dtype="<f8", offset=off)
    if len(vec) != count * 4:
        raise DatabaseLoadError("vector block length mismatch")
    shard = b.finalize(cid)
    shard.vectors = vec.reshape(count, 4).astype(np.float64)
    return shard
