"""Offline conversion of raw GPS tracks into network-matched node trajectories.

Five stages: stay-point extraction, trip segmentation, transport-mode
classification, gap interpolation, and route estimation over the transport
graph. The whole pipeline is deterministic and relies on future information
freely, which is why it runs offline; the online system only retrieves its
output.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from .geo import METERS_PER_DEGREE, GeoPoint, Link, LocalXY, Mode, Projection, TransportGraph
from .ingest import RawGpsRecord


class MatchError(RuntimeError):
    pass


class UnroutableError(MatchError):
    """Trip endpoints cannot be snapped or connected on the mode subgraph."""


class AssemblyError(MatchError):
    """Assembled node trajectory violates a structural invariant."""


@dataclass
class MatchConfig:
    stay_max_move_m: float = 300.0
    stay_min_duration_s: float = 900.0
    gap_move_threshold_m: float = 200.0
    gap_threshold_s: float = 3600.0
    walk_speed_mps: float = 2.0       # below: WALK
    bicycle_speed_mps: float = 6.0    # below: BICYCLE
    implausible_speed_mps: float = 45.0
    rail_affinity_radius_m: float = 50.0
    rail_affinity_fraction: float = 0.7
    snap_radius_m: float = 500.0
    waypoint_radius_m: float = 300.0
    waypoint_stride: int = 5


class TripState(str, enum.Enum):
    MOVE = "MOVE"
    STAY = "STAY"


@dataclass(frozen=True)
class StayPoint:
    centroid: GeoPoint
    arrive: float
    depart: float


@dataclass
class Track:
    """Time-sorted fixes of one user-day in projected coordinates."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    user_id: str = ""
    projection: Projection | None = None

    @classmethod
    def from_records(cls, records: Sequence[RawGpsRecord], projection: Projection) -> "Track":
        recs = sorted(records, key=lambda r: r.timestamp)
        t = np.array([r.timestamp for r in recs])
        lats = np.array([r.position.lat for r in recs])
        lons = np.array([r.position.lon for r in recs])
        xs, ys = projection.project_arrays(lats, lons)
        # duplicate timestamps keep the last fix
        keep = np.ones(len(t), dtype=bool)
        keep[:-1] = np.diff(t) > 0
        user = recs[0].user_id if recs else ""
        return cls(t[keep], xs[keep], ys[keep], user, projection)

    @classmethod
    def from_arrays(cls, t, x, y, user_id="", projection: Projection | None = None) -> "Track":
        t = np.asarray(t, dtype=np.float64)
        order = np.argsort(t, kind="stable")
        t, x, y = t[order], np.asarray(x, dtype=np.float64)[order], np.asarray(y, dtype=np.float64)[order]
        keep = np.ones(len(t), dtype=bool)
        keep[:-1] = np.diff(t) > 0
        return cls(t[keep], x[keep], y[keep], user_id, projection)

    def __len__(self):
        return len(self.t)

    def slice(self, lo: int, hi: int) -> "Track":
        return Track(self.t[lo:hi], self.x[lo:hi], self.y[lo:hi], self.user_id, self.projection)


@dataclass
class Trip:
    state: TripState
    start: float
    end: float
    track: Track
    mode: Mode | None = None
    stay: StayPoint | None = None

    @property
    def start_xy(self) -> tuple[float, float]:
        return float(self.track.x[0]), float(self.track.y[0])

    @property
    def end_xy(self) -> tuple[float, float]:
        return float(self.track.x[-1]), float(self.track.y[-1])


def extract_stay_points(
    track: Track, max_move_m: float = 300.0, min_stay_s: float = 900.0
) -> list[StayPoint]:
    """Greedy left-to-right scan for dwell windows.

    A window grows while every pair of member fixes stays within max_move_m;
    it becomes a stay point when it spans at least min_stay_s.
    """
    stays: list[StayPoint] = []
    n = len(track)
    i = 0
    while i < n:
        j = i
        while j + 1 < n:
            dx = track.x[i : j + 2] - track.x[j + 1]
            dy = track.y[i : j + 2] - track.y[j + 1]
            if np.max(dx * dx + dy * dy) > max_move_m * max_move_m:
                break
            j += 1
        if track.t[j] - track.t[i] >= min_stay_s:
            cx = float(track.x[i : j + 1].mean())
            cy = float(track.y[i : j + 1].mean())
            stays.append(
                StayPoint(
                    centroid=GeoPoint(*_unproject_tuple(track, cx, cy)),
                    arrive=float(track.t[i]),
                    depart=float(track.t[j]),
                )
            )
            i = j + 1
        else:
            i += 1
    return stays


def _unproject_tuple(track: Track, x: float, y: float) -> tuple[float, float]:
    if track.projection is None:
        # plain-XY tracks unproject as if at the equator origin
        return y / METERS_PER_DEGREE, x / METERS_PER_DEGREE
    p = track.projection.unproject(LocalXY(x, y))
    return p.lat, p.lon


def segment_trips(track: Track, stays: list[StayPoint]) -> list[Trip]:
    """Alternate STAY trips (at stay windows) and MOVE trips (between them)."""
    trips: list[Trip] = []
    n = len(track)
    if n == 0:
        return trips
    ranges = []
    for sp in stays:
        members = np.flatnonzero((track.t >= sp.arrive) & (track.t <= sp.depart))
        ranges.append((int(members[0]), int(members[-1]), sp))

    def add_move(lo: int, hi: int):
        if hi - lo + 1 >= 2:
            sub = track.slice(lo, hi + 1)
            trips.append(
                Trip(TripState.MOVE, float(track.t[lo]), float(track.t[hi]), sub)
            )

    prev_end = 0
    first = True
    for lo, hi, sp in ranges:
        if first:
            add_move(0, lo)
            first = False
        else:
            add_move(prev_end, lo)
        trips.append(Trip(TripState.STAY, sp.arrive, sp.depart, track.slice(lo, hi + 1), stay=sp))
        prev_end = hi
    if first:
        add_move(0, n - 1)
    else:
        add_move(prev_end, n - 1)
    return trips


class RailProximity:
    """Vectorized distance checks from fixes to TRAIN links."""

    def __init__(self, graph: TransportGraph):
        a, b = [], []
        for link in graph.links.values():
            if Mode.TRAIN in link.modes:
                pa = graph.node_xy(link.from_node)
                pb = graph.node_xy(link.to_node)
                a.append((pa.x, pa.y))
                b.append((pb.x, pb.y))
        self._a = np.array(a) if a else np.zeros((0, 2))
        self._b = np.array(b) if b else np.zeros((0, 2))

    def fraction_near(self, xs: np.ndarray, ys: np.ndarray, radius_m: float) -> float:
        if len(self._a) == 0 or len(xs) == 0:
            return 0.0
        p = np.column_stack([xs, ys])[:, None, :]  # (n, 1, 2)
        a = self._a[None, :, :]
        ab = (self._b - self._a)[None, :, :]
        denom = np.maximum((ab * ab).sum(-1), 1e-12)
        t = np.clip(((p - a) * ab).sum(-1) / denom, 0.0, 1.0)
        proj = a + t[:, :, None] * ab
        d2 = ((p - proj) ** 2).sum(-1).min(axis=1)
        return float(np.mean(d2 <= radius_m * radius_m))


def _segment_speeds(track: Track) -> np.ndarray:
    dt = np.diff(track.t)
    dist = np.hypot(np.diff(track.x), np.diff(track.y))
    ok = dt > 0
    return dist[ok] / dt[ok]


def classify_mode(trip: Trip, rail: RailProximity, config: MatchConfig | None = None) -> Mode:
    """Median-speed rules with a rail-affinity test for fast trips."""
    cfg = config or MatchConfig()
    speeds = _segment_speeds(trip.track)
    if len(speeds) < 1:
        return Mode.OTHER
    v = float(np.median(speeds))
    if v >= cfg.implausible_speed_mps:
        return Mode.OTHER
    if v < cfg.walk_speed_mps:
        return Mode.WALK
    if v < cfg.bicycle_speed_mps:
        return Mode.BICYCLE
    near = rail.fraction_near(trip.track.x, trip.track.y, cfg.rail_affinity_radius_m)
    return Mode.TRAIN if near >= cfg.rail_affinity_fraction else Mode.CAR


def interpolate_gaps(
    trips: list[Trip],
    rail: RailProximity,
    config: MatchConfig | None = None,
) -> list[Trip]:
    """Fill short gaps between trips.

    Rules for gaps below the threshold: large endpoint displacement inserts a
    MOVE spanning the middle third of the gap; STAY<->MOVE transitions take
    the moving trip's boundary time; consecutive STAY+STAY or same-mode
    MOVE+MOVE pairs merge. Gaps at or above the threshold stay open and later
    split the day.
    """
    cfg = config or MatchConfig()
    if not trips:
        return []
    out = [trips[0]]
    for nxt in trips[1:]:
        cur = out[-1]
        gap = nxt.start - cur.end
        if gap >= cfg.gap_threshold_s:
            out.append(nxt)
            continue
        ex, ey = cur.end_xy
        sx, sy = nxt.start_xy
        disp = float(np.hypot(sx - ex, sy - ey))
        if disp > cfg.gap_move_threshold_m and gap > 0:
            t1 = cur.end + gap / 3.0
            t2 = cur.end + 2.0 * gap / 3.0
            bridge_track = Track(np.array([t1, t2]), np.array([ex, sx]), np.array([ey, sy]))
            bridge = Trip(TripState.MOVE, t1, t2, bridge_track)
            bridge.mode = classify_mode(bridge, rail, cfg)
            out.append(bridge)
            out.append(nxt)
        elif cur.state == TripState.STAY and nxt.state == TripState.STAY:
            merged_track = Track(
                np.concatenate([cur.track.t, nxt.track.t]),
                np.concatenate([cur.track.x, nxt.track.x]),
                np.concatenate([cur.track.y, nxt.track.y]),
                cur.track.user_id,
            )
            n1, n2 = len(cur.track), len(nxt.track)
            cx = (cur.track.x.sum() + nxt.track.x.sum()) / (n1 + n2)
            cy = (cur.track.y.sum() + nxt.track.y.sum()) / (n1 + n2)
            sp = StayPoint(
                centroid=GeoPoint(*_unproject_tuple(merged_track, float(cx), float(cy))),
                arrive=cur.start,
                depart=nxt.end,
            )
            out[-1] = Trip(TripState.STAY, cur.start, nxt.end, merged_track, stay=sp)
        elif (
            cur.state == TripState.MOVE
            and nxt.state == TripState.MOVE
            and cur.mode == nxt.mode
        ):
            merged_track = Track(
                np.concatenate([cur.track.t, nxt.track.t]),
                np.concatenate([cur.track.x, nxt.track.x]),
                np.concatenate([cur.track.y, nxt.track.y]),
                cur.track.user_id,
            )
            out[-1] = Trip(TripState.MOVE, cur.start, nxt.end, merged_track, mode=cur.mode)
        elif cur.state == TripState.STAY and nxt.state == TripState.MOVE:
            out[-1] = replace(cur, end=nxt.start)
            if cur.stay is not None:
                out[-1].stay = StayPoint(cur.stay.centroid, cur.stay.arrive, nxt.start)
            out.append(nxt)
        elif cur.state == TripState.MOVE and nxt.state == TripState.STAY:
            patched = replace(nxt, start=cur.end)
            if nxt.stay is not None:
                patched.stay = StayPoint(nxt.stay.centroid, cur.end, nxt.stay.depart)
            out.append(patched)
        else:
            out.append(nxt)
    return out


def split_trip_groups(trips: list[Trip], gap_threshold_s: float = 3600.0) -> list[list[Trip]]:
    groups: list[list[Trip]] = []
    for trip in trips:
        if groups and trip.start - groups[-1][-1].end < gap_threshold_s:
            groups[-1].append(trip)
        else:
            groups.append([trip])
    return groups


# --- routing ---------------------------------------------------------------


class ModeRouter:
    """Per-mode shortest paths (cost = length / free-flow speed), precomputed.

    Desk-scale graphs allow all-pairs predecessor matrices, which makes route
    reconstruction an array walk shared by the map matcher and the synthetic
    population generator (so both resolve shortest-path ties identically).
    """

    def __init__(self, graph: TransportGraph):
        self.graph = graph
        self._per_mode: dict[Mode, dict] = {}
        self._all_tree = cKDTree(graph.node_xy_matrix())

    def _mode_data(self, mode: Mode) -> dict:
        if mode in self._per_mode:
            return self._per_mode[mode]
        g = self.graph
        n = len(g.node_ids)
        rows, cols, costs = [], [], []
        best_link: dict[tuple[int, int], tuple[float, str]] = {}
        node_has_mode = np.zeros(n, dtype=bool)
        for link in g.links.values():
            if mode not in link.modes:
                continue
            u = g.node_index(link.from_node)
            v = g.node_index(link.to_node)
            cost = link.length_m / link.speed_mps
            node_has_mode[u] = node_has_mode[v] = True
            key = (u, v)
            cand = (cost, link.link_id)
            if key not in best_link or cand < best_link[key]:
                best_link[key] = cand
        for (u, v), (cost, _lid) in best_link.items():
            rows.append(u)
            cols.append(v)
            costs.append(cost)
        mat = csr_matrix((costs, (rows, cols)), shape=(n, n))
        dist, pred = dijkstra(mat, directed=True, return_predecessors=True)
        mode_nodes = np.flatnonzero(node_has_mode)
        tree = cKDTree(self.graph.node_xy_matrix()[mode_nodes]) if len(mode_nodes) else None
        data = {
            "dist": dist,
            "pred": pred,
            "links": {k: v[1] for k, v in best_link.items()},
            "mode_nodes": mode_nodes,
            "tree": tree,
        }
        self._per_mode[mode] = data
        return data

    def snap(self, mode: Mode, x: float, y: float, radius_m: float) -> int | None:
        data = self._mode_data(mode)
        if data["tree"] is None:
            return None
        d, idx = data["tree"].query([x, y])
        if d > radius_m:
            return None
        return int(data["mode_nodes"][idx])

    def snap_any(self, x: float, y: float, radius_m: float | None = None) -> int | None:
        d, idx = self._all_tree.query([x, y])
        if radius_m is not None and d > radius_m:
            return None
        return int(idx)

    def path(self, mode: Mode, u: int, v: int) -> list[int] | None:
        data = self._mode_data(mode)
        if not np.isfinite(data["dist"][u, v]):
            return None
        path = [v]
        while path[-1] != u:
            p = data["pred"][u, path[-1]]
            if p < 0:
                return None
            path.append(int(p))
        path.reverse()
        return path

    def cost(self, mode: Mode, u: int, v: int) -> float:
        return float(self._mode_data(mode)["dist"][u, v])

    def link_id(self, mode: Mode, u: int, v: int) -> str:
        return self._mode_data(mode)["links"][(u, v)]

    def link_cost(self, mode: Mode, u: int, v: int) -> float:
        lid = self.link_id(mode, u, v)
        link = self.graph.links[lid]
        return link.length_m / link.speed_mps


@dataclass
class RoutedTrip:
    mode: Mode
    times: list[float]
    nodes: list[str]       # len(nodes) == len(times)
    links: list[str]       # len(links) == len(nodes) - 1
    warnings: list[str] = field(default_factory=list)


def estimate_route(
    trip: Trip,
    router: ModeRouter,
    config: MatchConfig | None = None,
    start_node: int | None = None,
    end_node: int | None = None,
) -> RoutedTrip:
    """Least-cost mode-compatible route through softly enforced waypoints.

    Start/end snap within the snap radius (or are forced by the caller for
    stay stitching); every waypoint_stride-th interior fix becomes a waypoint
    that is either routed through (within the waypoint radius) or dropped
    with a warning. Node timestamps interpolate the observed fix times by
    cumulative cost.
    """
    cfg = config or MatchConfig()
    mode = trip.mode
    if mode is None or mode == Mode.OTHER:
        raise UnroutableError(f"trip mode {mode} has no routable links")
    warnings: list[str] = []

    sx, sy = trip.start_xy
    ex, ey = trip.end_xy
    if start_node is None:
        start_node = router.snap(mode, sx, sy, cfg.snap_radius_m)
    if end_node is None:
        end_node = router.snap(mode, ex, ey, cfg.snap_radius_m)
    if start_node is None or end_node is None:
        raise UnroutableError("no mode-compatible node within snap radius")

    anchors: list[tuple[float, int]] = [(float(trip.track.t[0]), start_node)]
    n = len(trip.track)
    for i in range(cfg.waypoint_stride, n - 1, cfg.waypoint_stride):
        node = router.snap(mode, float(trip.track.x[i]), float(trip.track.y[i]), cfg.waypoint_radius_m)
        if node is None:
            warnings.append(f"waypoint at t={trip.track.t[i]:.0f} dropped: no node in radius")
            continue
        anchors.append((float(trip.track.t[i]), node))
    anchors.append((float(trip.track.t[-1]), end_node))

    # drop unreachable waypoints, keep endpoints mandatory
    accepted = [anchors[0]]
    for anchor in anchors[1:-1]:
        if router.path(mode, accepted[-1][1], anchor[1]) is not None:
            accepted.append(anchor)
        else:
            warnings.append(f"waypoint at t={anchor[0]:.0f} dropped: unreachable")
    if router.path(mode, accepted[-1][1], anchors[-1][1]) is None:
        # retry without optional waypoints before giving up
        if router.path(mode, anchors[0][1], anchors[-1][1]) is None:
            raise UnroutableError("endpoints are disconnected on the mode subgraph")
        warnings.append("all waypoints dropped: they forced a dead end")
        accepted = [anchors[0]]
    accepted.append(anchors[-1])

    node_ids = router.graph.node_ids
    times: list[float] = [accepted[0][0]]
    nodes: list[str] = [node_ids[accepted[0][1]]]
    links: list[str] = []
    for (t_a, a), (t_b, b) in zip(accepted, accepted[1:]):
        if a == b:
            continue
        path = router.path(mode, a, b)
        if path is None:
            raise UnroutableError("accepted leg became unreachable")
        leg_costs = [router.link_cost(mode, u, v) for u, v in zip(path, path[1:])]
        total = sum(leg_costs)
        acc = 0.0
        t_b = max(t_b, t_a)  # guard against equal anchor times
        for (u, v), c in zip(zip(path, path[1:]), leg_costs):
            acc += c
            frac = acc / total if total > 0 else 1.0
            times.append(t_a + frac * (t_b - t_a))
            nodes.append(node_ids[v])
            links.append(router.link_id(mode, u, v))
    return RoutedTrip(mode=mode, times=times, nodes=nodes, links=links, warnings=warnings)


# --- node trajectory assembly ----------------------------------------------


@dataclass(frozen=True)
class NodeVisit:
    t: float
    node: str
    link_in: str | None  # None for the first visit and for dwell rows
    mode: Mode | None    # None for STAY rows


@dataclass
class NodeTrajectory:
    user_id: str
    day: date
    visits: list[NodeVisit]

    def validate(self, graph: TransportGraph) -> None:
        prev: NodeVisit | None = None
        for v in self.visits:
            if v.node not in graph.nodes:
                raise AssemblyError(f"unknown node {v.node}")
            if prev is not None:
                if v.t <= prev.t:
                    raise AssemblyError(f"non-increasing time at {v.t}")
                if v.link_in is None:
                    if v.node != prev.node:
                        raise AssemblyError(
                            f"teleport {prev.node} -> {v.node} without a link"
                        )
                else:
                    link = graph.links.get(v.link_in)
                    if link is None:
                        raise AssemblyError(f"unknown link {v.link_in}")
                    if link.from_node != prev.node or link.to_node != v.node:
                        raise AssemblyError(f"link {v.link_in} does not join the visits")
                    if v.mode not in link.modes:
                        raise AssemblyError(f"mode {v.mode} not allowed on {v.link_in}")
            prev = v

    def link_set(self) -> frozenset[str]:
        return frozenset(v.link_in for v in self.visits if v.link_in is not None)


@dataclass(frozen=True)
class StayAtNode:
    node: str
    arrive: float
    depart: float


def build_node_trajectory(
    parts: Sequence[StayAtNode | RoutedTrip],
    user_id: str,
    day: date,
    graph: TransportGraph,
) -> NodeTrajectory:
    """Concatenate routed trips and snapped stays into one validated trajectory."""
    visits: list[NodeVisit] = []

    def push(t: float, node: str, link_in: str | None, mode: Mode | None):
        if visits:
            last = visits[-1]
            if node == last.node and link_in is None:
                if t <= last.t:
                    return  # identical dwell instant, skip duplicate
        visits.append(NodeVisit(t, node, link_in, mode))

    for part in parts:
        if isinstance(part, StayAtNode):
            push(part.arrive, part.node, None, None)
            push(part.depart, part.node, None, None)
        else:
            push(part.times[0], part.nodes[0], None, part.mode)
            for t, node, link in zip(part.times[1:], part.nodes[1:], part.links):
                push(t, node, link, part.mode)
    traj = NodeTrajectory(user_id=user_id, day=day, visits=visits)
    traj.validate(graph)
    return traj


@dataclass
class MatchResult:
    trajectories: list[NodeTrajectory]
    routed_trips: list[RoutedTrip]
    unroutable: int
    warnings: list[str]


def process_user_day(
    track: Track,
    router: ModeRouter,
    day: date,
    config: MatchConfig | None = None,
    rail: RailProximity | None = None,
) -> MatchResult:
    """Full offline pipeline for one user-day; long gaps split the output."""
    cfg = config or MatchConfig()
    rail = rail or RailProximity(router.graph)
    graph = router.graph
    stays = extract_stay_points(track, cfg.stay_max_move_m, cfg.stay_min_duration_s)
    trips = segment_trips(track, stays)
    for trip in trips:
        if trip.state == TripState.MOVE and trip.mode is None:
            trip.mode = classify_mode(trip, rail, cfg)
    trips = interpolate_gaps(trips, rail, cfg)
    groups = split_trip_groups(trips, cfg.gap_threshold_s)

    trajectories: list[NodeTrajectory] = []
    routed_all: list[RoutedTrip] = []
    warnings: list[str] = []
    unroutable = 0
    node_ids = graph.node_ids

    for group in groups:
        # snap stays first so moves can be stitched onto their nodes
        stay_nodes: dict[int, int] = {}
        for i, trip in enumerate(group):
            if trip.state == TripState.STAY:
                cx = float(trip.track.x.mean())
                cy = float(trip.track.y.mean())
                snapped = router.snap_any(cx, cy, cfg.snap_radius_m)
                if snapped is not None:
                    stay_nodes[i] = snapped

        parts: list[StayAtNode | RoutedTrip] = []

        def flush():
            nonlocal parts
            if parts:
                try:
                    trajectories.append(build_node_trajectory(parts, track.user_id, day, graph))
                except AssemblyError as exc:
                    warnings.append(f"assembly failed: {exc}")
                parts = []

        prev_node: int | None = None
        for i, trip in enumerate(group):
            if trip.state == TripState.STAY:
                node = stay_nodes.get(i)
                if node is None:
                    warnings.append("stay too far from any node; split")
                    flush()
                    prev_node = None
                    continue
                if prev_node is not None and node != prev_node:
                    # a gap rule merged states inconsistently; restart cleanly
                    flush()
                parts.append(StayAtNode(node_ids[node], trip.start, trip.end))
                prev_node = node
            else:
                forced_end = stay_nodes.get(i + 1)
                try:
                    routed = estimate_route(
                        trip, router, cfg, start_node=prev_node, end_node=forced_end
                    )
                except UnroutableError as exc:
                    unroutable += 1
                    warnings.append(f"unroutable trip at t={trip.start:.0f}: {exc}")
                    flush()
                    prev_node = None
                    continue
                warnings.extend(routed.warnings)
                routed_all.append(routed)
                parts.append(routed)
                prev_node = graph.node_index(routed.nodes[-1])
        flush()
    return MatchResult(trajectories, routed_all, unroutable, warnings)


# --- node trajectory file --------------------------------------------------


def write_node_trajectories(trajectories: Iterable[NodeTrajectory], path: str | Path) -> None:
    """One row per node visit: user_id,day,timestamp,node_id,link_id_incoming,mode."""
    rows = []
    for traj in trajectories:
        for v in traj.visits:
            rows.append(
                (
                    traj.user_id,
                    traj.day.isoformat(),
                    v.t,
                    v.node,
                    v.link_in or "",
                    v.mode.value if v.mode is not None else "STAY",
                )
            )
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["user_id", "day", "timestamp", "node_id", "link_id_incoming", "mode"])
        for r in rows:
            writer.writerow([r[0], r[1], f"{r[2]:.3f}", r[3], r[4], r[5]])


def read_node_trajectories(path: str | Path) -> list[NodeTrajectory]:
    groups: dict[tuple[str, str], list[NodeVisit]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            if not row:
                continue
            user, day_s, t, node, link, mode = row
            visit = NodeVisit(
                float(t), node, link or None, None if mode == "STAY" else Mode(mode)
            )
            groups.setdefault((user, day_s), []).append(visit)
    out = []
    for (user, day_s), visits in sorted(groups.items()):
        visits.sort(key=lambda v: v.t)
        out.append(NodeTrajectory(user, date.fromisoformat(day_s), visits))
    return out
