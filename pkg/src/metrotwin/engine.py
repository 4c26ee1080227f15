"""Online two-stage prediction: destination sampling, retrieval, aggregation.

A round runs the cluster-level predictor once for the whole population (with
the crowd context pooled over everyone), then resolves each user's sampled
destination cluster to a concrete network-matched trajectory retrieved from
that cluster's shard, weighted by softmax(-beta * distance). What-if
simulation is the same machinery with candidate filtering.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geo import GeoPoint, LocalXY, Mode, TransportGraph
from .ingest import day_start_epoch
from .predictor import (
    ContextMode,
    Model,
    PredictorError,
    _context_forward,
    _forward_individual,
    _head_forward,
    _softmax,
    pool_crowd,
    predict_distribution,
)
from .trajdb import MODE_TABLE, DbKey, DbSlice, TrajectoryDatabase


class PredictionError(RuntimeError):
    pass


@dataclass
class EngineConfig:
    k_neighbors: int = 10
    beta: float = 0.01             # sampling temperature over meters of distance
    samples_per_user: int = 1
    max_resample_attempts: int = 10


@dataclass(frozen=True)
class Provenance:
    source_key: DbKey
    cluster: int
    epsilon: float
    weight: float


@dataclass
class PredictedTrajectory:
    user_id: str
    sample_index: int
    slot: int
    times: np.ndarray
    node_idx: np.ndarray
    link_idx: np.ndarray
    mode_idx: np.ndarray
    provenance: Provenance

    def link_idx_set(self) -> set[int]:
        return set(int(l) for l in self.link_idx if l >= 0)


@dataclass
class PredictionRequest:
    user_id: str
    day: date
    slot: int
    window_clusters: np.ndarray
    window_times: np.ndarray
    position: LocalXY
    samples: int = 1
    seed: int = 0


@dataclass
class ScenarioFilter:
    excluded_links: frozenset[str] = frozenset()
    excluded_modes: frozenset[Mode] = frozenset()

    def resolve(self, db: TrajectoryDatabase, graph: TransportGraph | None = None) -> frozenset[int]:
        """Translate link ids / mode predicates into database link indices."""
        pos = {l: i for i, l in enumerate(db.link_table)}
        out = {pos[l] for l in self.excluded_links if l in pos}
        if self.excluded_modes and graph is not None:
            for lid, link in graph.links.items():
                if link.modes & self.excluded_modes and lid in pos:
                    out.add(pos[lid])
        return frozenset(out)

    def is_empty(self) -> bool:
        return not self.excluded_links and not self.excluded_modes


@dataclass
class TimingBreakdown:
    context_s: float
    cluster_s: float
    node_s: float

    @property
    def total_s(self) -> float:
        return self.context_s + self.cluster_s + self.node_s

    def as_dict(self) -> dict:
        return {
            "context_s": self.context_s,
            "cluster_s": self.cluster_s,
            "node_s": self.node_s,
            "total_s": self.total_s,
        }


@dataclass
class PredictionSet:
    day: date
    slot: int
    seed: int
    samples_per_user: int
    predictions: list[PredictedTrajectory]
    timing: TimingBreakdown
    excluded_links: frozenset[int] = frozenset()
    skipped_users: int = 0


# --- sampling primitives ----------------------------------------------------


def user_rng(master_seed: int, user_id: str) -> np.random.Generator:
    """Per-user generator derived from (master seed, user id); order-free."""
    digest = hashlib.sha256(user_id.encode()).digest()
    uid64 = int.from_bytes(digest[:8], "little") & (2**63 - 1)
    return np.random.default_rng([master_seed & (2**63 - 1), uid64])


def sample_destination(simplex: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw over the cluster simplex."""
    cdf = np.cumsum(simplex)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(simplex) - 1))


def weight_candidates(epsilons: np.ndarray, beta: float) -> np.ndarray:
    """softmax(-beta * eps) with max-subtraction; beta=0 gives the uniform law."""
    eps = np.asarray(epsilons, dtype=np.float64)
    if eps.size == 0:
        raise PredictionError("no candidates to weight")
    z = -beta * eps
    z -= z.max()
    w = np.exp(z)
    return w / w.sum()


def predict_cluster(model: Model, window_clusters, window_times, phi) -> np.ndarray:
    return predict_distribution(model, window_clusters, window_times, phi)


# --- single-user fine prediction -------------------------------------------


def _fetch_candidates(
    db: TrajectoryDatabase,
    cid: int,
    q: np.ndarray,
    k: int,
    excluded: frozenset[int],
    exclusion_cache: dict[int, np.ndarray] | None,
) -> tuple[np.ndarray, np.ndarray]:
    """kNN with scenario filtering; widens K (2K, 4K) when exclusion bites."""
    if not excluded:
        return db.knn_indices(cid, q, k)
    shard = db.get_shard(cid)
    if shard is None or len(shard) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    if exclusion_cache is not None and cid in exclusion_cache:
        bad = exclusion_cache[cid]
    else:
        hit = np.isin(shard.visit_link, np.fromiter(excluded, dtype=np.int64))
        bad = np.zeros(len(shard), dtype=bool)
        # mark slices whose visit range contains an excluded link
        if hit.any():
            slice_of_visit = np.searchsorted(shard.visit_offsets, np.flatnonzero(hit), side="right") - 1
            bad[np.unique(slice_of_visit)] = True
        if exclusion_cache is not None:
            exclusion_cache[cid] = bad
    for widen in (1, 2, 4):
        idx, dist = db.knn_indices(cid, q, k * widen)
        keep = ~bad[idx]
        if keep.any():
            return idx[keep][:k], dist[keep][:k]
        if len(idx) >= len(shard):
            break
    return np.zeros(0, dtype=np.int64), np.zeros(0)


def _predict_one(
    user_id: str,
    day: date,
    slot: int,
    simplex: np.ndarray,
    position: LocalXY,
    db: TrajectoryDatabase,
    cfg: EngineConfig,
    rng: np.random.Generator,
    sample_index: int,
    excluded: frozenset[int],
    exclusion_cache: dict[int, np.ndarray] | None,
    shard_counts: Mapping[int, int],
) -> PredictedTrajectory:
    q = db.make_query(position, slot)
    working = simplex
    chosen = None
    for _attempt in range(cfg.max_resample_attempts):
        cid = sample_destination(working, rng)
        idx, dist = _fetch_candidates(db, cid, q, cfg.k_neighbors, excluded, exclusion_cache)
        if len(idx) > 0:
            chosen = (cid, idx, dist)
            break
        if working is simplex:
            working = simplex.copy()
        # restrict to shards that still might serve: nonzero prob and nonempty
        working[cid] = 0.0
        for c in range(len(working)):
            if working[c] > 0 and shard_counts.get(c, 0) == 0:
                working[c] = 0.0
        total = working.sum()
        if total <= 0:
            break
        working = working / total
    if chosen is None:
        # fall back to the highest-probability shard that yields candidates
        for cid in np.argsort(-simplex):
            cid = int(cid)
            if shard_counts.get(cid, 0) == 0:
                continue
            idx, dist = _fetch_candidates(db, cid, q, cfg.k_neighbors, excluded, exclusion_cache)
            if len(idx) > 0:
                chosen = (cid, idx, dist)
                break
    if chosen is None:
        raise PredictionError("no shard can serve this request (database unusable)")

    cid, idx, dist = chosen
    weights = weight_candidates(dist, cfg.beta)
    pick = int(min(np.searchsorted(np.cumsum(weights), rng.random(), side="right"), len(idx) - 1))
    shard = db.get_shard(cid)
    i = int(idx[pick])
    lo, hi = int(shard.visit_offsets[i]), int(shard.visit_offsets[i + 1])
    src_start = shard.visit_t[lo]
    shift = (day_start_epoch(day) + slot * db.config.slot_seconds) - src_start
    return PredictedTrajectory(
        user_id=user_id,
        sample_index=sample_index,
        slot=slot,
        times=shard.visit_t[lo:hi] + shift,
        node_idx=shard.visit_node[lo:hi],
        link_idx=shard.visit_link[lo:hi],
        mode_idx=shard.visit_mode[lo:hi],
        provenance=Provenance(
            source_key=DbKey(
                user=db.user_table[shard.user_idx[i]],
                day=date.fromordinal(int(shard.day_ord[i])),
                slot=int(shard.slot[i]),
            ),
            cluster=cid,
            epsilon=float(dist[pick]),
            weight=float(weights[pick]),
        ),
    )


def predict_fine(
    request: PredictionRequest,
    model: Model,
    phi: np.ndarray | None,
    db: TrajectoryDatabase,
    cfg: EngineConfig | None = None,
    excluded: frozenset[int] = frozenset(),
) -> list[PredictedTrajectory]:
    """Two-stage prediction for one user: sample destination, retrieve, sample."""
    cfg = cfg or EngineConfig()
    simplex = predict_cluster(model, request.window_clusters, request.window_times, phi)
    rng = user_rng(request.seed, request.user_id)
    counts = db.shard_counts()
    out = []
    for s in range(request.samples):
        out.append(
            _predict_one(
                request.user_id, request.day, request.slot, simplex, request.position,
                db, cfg, rng, s, excluded, None, counts,
            )
        )
    return out


# --- population rounds ------------------------------------------------------


@dataclass
class RoundInput:
    """Population state at one (day, slot): windows plus current positions."""

    day: date
    slot: int
    user_ids: list[str]
    window_clusters: np.ndarray  # (B, window)
    window_times: np.ndarray     # (B, window)
    positions_xy: np.ndarray     # (B, 2) projected meters, NaN = unknown


def predict_round(
    round_input: RoundInput,
    model: Model,
    db: TrajectoryDatabase,
    cfg: EngineConfig | None = None,
    master_seed: int = 0,
    excluded: frozenset[int] = frozenset(),
) -> PredictionSet:
    """One full prediction round with a three-phase timing breakdown.

    Users whose current position is unknown are skipped and counted. Per-user
    randomness derives from (master_seed, user_id), so results do not depend
    on evaluation order and the round is reproducible bit for bit.
    """
    cfg = cfg or EngineConfig()
    B = len(round_input.user_ids)
    if B == 0:
        raise PredictionError("empty population")

    clusters = np.asarray(round_input.window_clusters, dtype=np.int64)
    times = np.asarray(round_input.window_times, dtype=np.int64)

    # cluster phase, part 1: individual encoder over the whole population
    t0 = time.perf_counter()
    states_per_layer, _, _, _ = _forward_individual(model, clusters, times)
    top = states_per_layer[-1]
    t1 = time.perf_counter()

    # context phase: pooling plus the context encoder
    ctx_feat = None
    if model.config.context_mode != ContextMode.NONE:
        phi = pool_crowd(top, model.config.pooling)
        if model.config.context_mode == ContextMode.POOLED:
            ctx_feat = phi[-1]
        else:
            ctx_states, _ = _context_forward(model, phi)
            ctx_feat = ctx_states[0, -1, :]
    t2 = time.perf_counter()

    # cluster phase, part 2: prediction heads and softmax
    feats = [top[:, -1, :]]
    if ctx_feat is not None:
        feats.append(np.broadcast_to(ctx_feat, (B, ctx_feat.shape[0])))
    if model.config.day_embed_dim > 0:
        dow = np.full(B, round_input.day.weekday())
        feats.append(model.params["embed_day"][dow])
    logits, _ = _head_forward(model, np.concatenate(feats, axis=1))
    simplices = _softmax(logits)
    t3 = time.perf_counter()

    # node phase: retrieval and sampling per user
    counts = db.shard_counts()
    if all(v == 0 for v in counts.values()):
        raise PredictionError("database has no usable shards")
    exclusion_cache: dict[int, np.ndarray] = {}
    predictions: list[PredictedTrajectory] = []
    skipped = 0
    for i, user in enumerate(round_input.user_ids):
        x, y = round_input.positions_xy[i]
        if not (np.isfinite(x) and np.isfinite(y)):
            skipped += 1
            continue
        rng = user_rng(master_seed, user)
        for s in range(cfg.samples_per_user):
            predictions.append(
                _predict_one(
                    user, round_input.day, round_input.slot, simplices[i],
                    LocalXY(float(x), float(y)), db, cfg, rng, s,
                    excluded, exclusion_cache, counts,
                )
            )
    t4 = time.perf_counter()

    return PredictionSet(
        day=round_input.day,
        slot=round_input.slot,
        seed=master_seed,
        samples_per_user=cfg.samples_per_user,
        predictions=predictions,
        timing=TimingBreakdown(context_s=t2 - t1, cluster_s=(t1 - t0) + (t3 - t2), node_s=t4 - t3),
        excluded_links=excluded,
        skipped_users=skipped,
    )


def simulate_with_filter(
    round_input: RoundInput,
    scenario: ScenarioFilter,
    model: Model,
    db: TrajectoryDatabase,
    cfg: EngineConfig | None = None,
    master_seed: int = 0,
    graph: TransportGraph | None = None,
) -> PredictionSet:
    """What-if round: candidates using excluded links are filtered before
    weighting; destinations are sampled exactly as in the plain round."""
    excluded = scenario.resolve(db, graph)
    return predict_round(round_input, model, db, cfg, master_seed, excluded)


# --- aggregation ------------------------------------------------------------


_TRAIN_IDX = MODE_TABLE.index(Mode.TRAIN)


def aggregate_link_volume(
    predictions: Sequence[PredictedTrajectory],
    link_id: str,
    window: tuple[float, float],
    db: TrajectoryDatabase,
) -> int:
    """Trajectories traversing the link with traversal time inside [from, to)."""
    try:
        target = db.link_table.index(link_id)
    except ValueError as exc:
        raise PredictionError(f"unknown link {link_id}") from exc
    lo, hi = window
    count = 0
    for pred in predictions:
        mask = pred.link_idx == target
        if mask.any() and np.any((pred.times[mask] >= lo) & (pred.times[mask] < hi)):
            count += 1
    return count


@dataclass
class StationCounts:
    boardings: int = 0
    alightings: int = 0
    transfers: int = 0


@dataclass(frozen=True)
class _RailEvent:
    kind: str      # "board" | "alight"
    t: float
    node: int
    link: int


def _rail_events(pred: PredictedTrajectory) -> list[_RailEvent]:
    events = []
    modes = pred.mode_idx
    n = len(modes)
    for j in range(n):
        if modes[j] != _TRAIN_IDX:
            continue
        if j == 0 or modes[j - 1] != _TRAIN_IDX:
            # boarding happens where the first train link departs
            events.append(
                _RailEvent("board", float(pred.times[j - 1]) if j > 0 else float(pred.times[j]),
                           int(pred.node_idx[j - 1]) if j > 0 else int(pred.node_idx[j]),
                           int(pred.link_idx[j]))
            )
        if j == n - 1 or modes[j + 1] != _TRAIN_IDX:
            events.append(
                _RailEvent("alight", float(pred.times[j]), int(pred.node_idx[j]), int(pred.link_idx[j]))
            )
    return events


def aggregate_station(
    predictions: Sequence[PredictedTrajectory],
    station_nodes: Iterable[str],
    window: tuple[float, float],
    db: TrajectoryDatabase,
    line_links: Iterable[str] | None = None,
    transfer_from: Iterable[str] | None = None,
    transfer_to: Iterable[str] | None = None,
    transfer_window_s: float = 1800.0,
) -> StationCounts:
    """Boardings, alightings and transfers at a station's node set.

    A transfer pairs an alighting with the next boarding at the same station
    within the pairing window; when from/to line link sets are given, the
    alighting and boarding links must belong to them respectively.
    """
    node_pos = {n: i for i, n in enumerate(db.node_table)}
    try:
        nodes = {node_pos[n] for n in station_nodes}
    except KeyError as exc:
        raise PredictionError(f"unknown station node {exc}") from exc
    link_pos = {l: i for i, l in enumerate(db.link_table)}

    def resolve(linkset):
        if linkset is None:
            return None
        return {link_pos[l] for l in linkset if l in link_pos}

    line = resolve(line_links)
    t_from = resolve(transfer_from)
    t_to = resolve(transfer_to)
    lo, hi = window

    out = StationCounts()
    for pred in predictions:
        events = _rail_events(pred)
        for ev in events:
            if ev.node not in nodes:
                continue
            if line is not None and ev.link not in line:
                continue
            if lo <= ev.t < hi:
                if ev.kind == "board":
                    out.boardings += 1
                else:
                    out.alightings += 1
        # transfers: alight then board again at this station
        alights = [e for e in events if e.kind == "alight" and e.node in nodes]
        boards = [e for e in events if e.kind == "board" and e.node in nodes]
        for a in alights:
            if t_from is not None and a.link not in t_from:
                continue
            for b in boards:
                if b.t <= a.t or b.t - a.t > transfer_window_s:
                    continue
                if t_to is not None and b.link not in t_to:
                    continue
                if t_from is None and t_to is None and b.link == a.link:
                    continue
                if lo <= a.t < hi:
                    out.transfers += 1
                break
    return out


def link_volume_series(
    predictions: Sequence[PredictedTrajectory],
    link_id: str,
    bins: Sequence[tuple[float, float]],
    db: TrajectoryDatabase,
) -> list[int]:
    return [aggregate_link_volume(predictions, link_id, b, db) for b in bins]


def station_series(
    predictions: Sequence[PredictedTrajectory],
    station_nodes: Iterable[str],
    bins: Sequence[tuple[float, float]],
    db: TrajectoryDatabase,
    line_links: Iterable[str] | None = None,
    kind: str = "alightings",
) -> list[int]:
    nodes = list(station_nodes)
    out = []
    for b in bins:
        counts = aggregate_station(predictions, nodes, b, db, line_links=line_links)
        out.append(getattr(counts, kind))
    return out
