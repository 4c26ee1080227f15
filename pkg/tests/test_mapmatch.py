import itertools
import math
from datetime import date

import numpy as np
import pytest

from metrotwin.geo import GeoPoint, Link, Mode, Projection, TransportGraph
from metrotwin.mapmatch import (
    AssemblyError,
    MatchConfig,
    ModeRouter,
    NodeTrajectory,
    NodeVisit,
    RailProximity,
    StayAtNode,
    Track,
    Trip,
    TripState,
    UnroutableError,
    build_node_trajectory,
    classify_mode,
    estimate_route,
    extract_stay_points,
    interpolate_gaps,
    process_user_day,
    read_node_trajectories,
    segment_trips,
    split_trip_groups,
    write_node_trajectories,
)

DAY = date(2024, 6, 3)
ORIGIN = GeoPoint(35.0, 139.0)


def grid_graph(n=3, spacing=1000.0, rail_row=None):
    """n x n lattice; optionally one horizontal rail line on a row."""
    proj = Projection(ORIGIN)
    nodes, links = {}, {}
    for r in range(n):
        for c in range(n):
            lat, lon = proj.unproject_arrays(np.array([c * spacing]), np.array([r * spacing]))
            nodes[f"{r}_{c}"] = GeoPoint(float(lat[0]), float(lon[0]))
    for r in range(n):
        for c in range(n):
            for dr, dc in ((0, 1), (1, 0)):
                r2, c2 = r + dr, c + dc
                if r2 >= n or c2 >= n:
                    continue
                for a, b in (((r, c), (r2, c2)), ((r2, c2), (r, c))):
                    lid = f"rd_{a[0]}{a[1]}_{b[0]}{b[1]}"
                    links[lid] = Link(
                        lid, f"{a[0]}_{a[1]}", f"{b[0]}_{b[1]}", spacing,
                        frozenset({Mode.WALK, Mode.BICYCLE, Mode.CAR}), "road", 10.0,
                    )
    if rail_row is not None:
        for c in range(n - 1):
            for a, b in (((rail_row, c), (rail_row, c + 1)), ((rail_row, c + 1), (rail_row, c))):
                lid = f"rl_{a[0]}{a[1]}_{b[0]}{b[1]}"
                links[lid] = Link(
                    lid, f"{a[0]}_{a[1]}", f"{b[0]}_{b[1]}", spacing,
                    frozenset({Mode.TRAIN}), "rail", 20.0,
                )
    return TransportGraph(nodes=nodes, links=links, projection=proj)


def make_track(points, user="u"):
    t = np.array([p[0] for p in points], dtype=float)
    x = np.array([p[1] for p in points], dtype=float)
    y = np.array([p[2] for p in points], dtype=float)
    return Track(t, x, y, user)


class TestStayPoints:
    def test_twenty_minutes_within_50m(self):
        rng = np.random.default_rng(0)
        pts = [(i * 60.0, rng.uniform(0, 35), rng.uniform(0, 35)) for i in range(21)]
        stays = extract_stay_points(make_track(pts))
        assert len(stays) == 1
        assert stays[0].depart - stays[0].arrive >= 900

    def test_constant_motion_no_stays(self):
        pts = [(i * 30.0, i * 300.0, 0.0) for i in range(60)]  # 10 m/s
        assert extract_stay_points(make_track(pts)) == []

    def test_fourteen_minute_stop_below_threshold(self):
        pts = [(i * 60.0, 0.0, 0.0) for i in range(15)]  # 14 min span
        assert extract_stay_points(make_track(pts)) == []

    def test_pairwise_constraint(self):
        # anchor-only logic would accept fixes 600 m apart; pairwise must not
        pts = [(0.0, 0.0, 0.0), (400.0, 290.0, 0.0), (1000.0, -290.0, 0.0)]
        stays = extract_stay_points(make_track(pts))
        assert stays == []


class TestSegmentTrips:
    def test_move_stay_move(self):
        pts = (
            [(i * 60.0, i * 600.0, 0.0) for i in range(5)]       # moving in
            + [(300 + i * 60.0, 2400.0, 0.0) for i in range(1, 20)]  # 19 min stay
            + [(1500 + i * 60.0, 2400.0 + i * 600.0, 0.0) for i in range(1, 5)]
        )
        track = make_track(pts)
        stays = extract_stay_points(track)
        assert len(stays) == 1
        trips = segment_trips(track, stays)
        assert [t.state for t in trips] == [TripState.MOVE, TripState.STAY, TripState.MOVE]
        # full time coverage of the observed span
        assert trips[0].start == track.t[0]
        assert trips[-1].end == track.t[-1]

    def test_no_stays_single_move(self):
        pts = [(i * 30.0, i * 300.0, 0.0) for i in range(10)]
        track = make_track(pts)
        trips = segment_trips(track, [])
        assert len(trips) == 1
        assert trips[0].state == TripState.MOVE

    def test_all_inside_one_stay(self):
        pts = [(i * 60.0, 0.0, 0.0) for i in range(30)]
        track = make_track(pts)
        trips = segment_trips(track, extract_stay_points(track))
        assert len(trips) == 1
        assert trips[0].state == TripState.STAY


class TestClassifyMode:
    def test_walk(self):
        g = grid_graph(3, rail_row=2)
        rail = RailProximity(g)
        pts = [(i * 100.0, i * 120.0, 250.0) for i in range(6)]  # 1.2 m/s
        trip = Trip(TripState.MOVE, 0, 500, make_track(pts))
        assert classify_mode(trip, rail) == Mode.WALK

    def test_train_on_rail(self):
        g = grid_graph(3, spacing=1000.0, rail_row=2)
        rail = RailProximity(g)
        # along the rail row (y = 2000) at 20 m/s
        pts = [(i * 10.0, i * 200.0, 2000.0) for i in range(10)]
        trip = Trip(TripState.MOVE, 0, 90, make_track(pts))
        assert classify_mode(trip, rail) == Mode.TRAIN

    def test_fast_off_rail_is_car(self):
        g = grid_graph(3, spacing=1000.0, rail_row=2)
        rail = RailProximity(g)
        pts = [(i * 10.0, i * 200.0, 0.0) for i in range(10)]  # 20 m/s on row 0
        trip = Trip(TripState.MOVE, 0, 90, make_track(pts))
        assert classify_mode(trip, rail) == Mode.CAR

    def test_implausible_speed_other(self):
        g = grid_graph(3)
        rail = RailProximity(g)
        pts = [(i * 10.0, i * 600.0, 0.0) for i in range(5)]  # 60 m/s
        trip = Trip(TripState.MOVE, 0, 40, make_track(pts))
        assert classify_mode(trip, rail) == Mode.OTHER

    def test_single_fix_other(self):
        g = grid_graph(3)
        rail = RailProximity(g)
        trip = Trip(TripState.MOVE, 0, 0, make_track([(0.0, 0.0, 0.0)]))
        assert classify_mode(trip, rail) == Mode.OTHER


def _stay_trip(t0, t1, x, y, n=4):
    pts = [(t0 + i * (t1 - t0) / (n - 1), x, y) for i in range(n)]
    track = make_track(pts)
    from metrotwin.mapmatch import StayPoint
    from metrotwin.geo import METERS_PER_DEGREE

    sp = StayPoint(GeoPoint(y / METERS_PER_DEGREE, x / METERS_PER_DEGREE), t0, t1)
    return Trip(TripState.STAY, t0, t1, track, stay=sp)


def _move_trip(t0, t1, x0, y0, x1, y1, mode=Mode.CAR):
    track = make_track([(t0, x0, y0), (t1, x1, y1)])
    return Trip(TripState.MOVE, t0, t1, track, mode=mode)


class TestInterpolateGaps:
    def setup_method(self):
        self.rail = RailProximity(grid_graph(3))

    def test_displacement_inserts_move(self):
        a = _stay_trip(0, 1000, 0.0, 0.0)
        b = _stay_trip(1600, 3000, 500.0, 0.0)  # 10 min gap, 500 m apart
        out = interpolate_gaps([a, b], self.rail)
        assert [t.state for t in out] == [TripState.STAY, TripState.MOVE, TripState.STAY]
        bridge = out[1]
        assert bridge.start == pytest.approx(1000 + 600 / 3)
        assert bridge.end == pytest.approx(1000 + 2 * 600 / 3)  # middle third of the gap

    def test_close_moves_merge(self):
        a = _move_trip(0, 300, 0.0, 0.0, 3000.0, 0.0)
        b = _move_trip(600, 900, 3100.0, 0.0, 6000.0, 0.0)  # 5 min gap, 100 m
        out = interpolate_gaps([a, b], self.rail)
        assert len(out) == 1
        assert out[0].state == TripState.MOVE
        assert out[0].start == 0 and out[0].end == 900

    def test_long_gap_untouched(self):
        a = _stay_trip(0, 1000, 0.0, 0.0)
        b = _stay_trip(1000 + 7200, 1000 + 9000, 500.0, 0.0)  # 2 h gap
        out = interpolate_gaps([a, b], self.rail)
        assert len(out) == 2
        groups = split_trip_groups(out)
        assert len(groups) == 2

    def test_stay_stay_merge(self):
        a = _stay_trip(0, 1000, 0.0, 0.0)
        b = _stay_trip(1200, 2400, 100.0, 0.0)  # close and small displacement
        out = interpolate_gaps([a, b], self.rail)
        assert len(out) == 1
        assert out[0].state == TripState.STAY
        assert out[0].start == 0 and out[0].end == 2400

    def test_stay_move_transition_time(self):
        a = _stay_trip(0, 1000, 0.0, 0.0)
        b = _move_trip(1100, 1400, 50.0, 0.0, 3000.0, 0.0)
        out = interpolate_gaps([a, b], self.rail)
        assert out[0].end == pytest.approx(1100)  # stay extended to move start


class TestEstimateRoute:
    def test_grid_corner_to_corner_matches_exhaustive(self):
        g = grid_graph(3, spacing=1000.0)
        router = ModeRouter(g)
        trip = _move_trip(0, 400, 0.0, 0.0, 2000.0, 2000.0, Mode.CAR)
        routed = estimate_route(trip, router)
        assert len(routed.links) == 4
        # exhaustive enumeration over all simple paths of the 9-node graph
        ids = g.node_ids
        idx = {n: i for i, n in enumerate(ids)}
        adj = {}
        for lid, link in g.links.items():
            if Mode.CAR in link.modes:
                adj.setdefault(link.from_node, []).append((link.to_node, link.length_m / link.speed_mps))

        best = [math.inf]

        def dfs(node, target, seen, cost):
            if cost >= best[0]:
                return
            if node == target:
                best[0] = cost
                return
            for nxt, c in adj[node]:
                if nxt not in seen:
                    dfs(nxt, target, seen | {nxt}, cost + c)

        dfs("0_0", "2_2", {"0_0"}, 0.0)
        total_cost = sum(
            g.links[l].length_m / g.links[l].speed_mps for l in routed.links
        )
        assert total_cost == pytest.approx(best[0])

    def test_train_route_uses_only_rail(self):
        g = grid_graph(3, spacing=1000.0, rail_row=1)
        router = ModeRouter(g)
        trip = _move_trip(0, 120, 0.0, 1000.0, 2000.0, 1000.0, Mode.TRAIN)
        routed = estimate_route(trip, router)
        assert routed.links
        for lid in routed.links:
            assert Mode.TRAIN in g.links[lid].modes

    def test_disconnected_unroutable(self):
        g = grid_graph(3, spacing=1000.0, rail_row=1)
        router = ModeRouter(g)
        # TRAIN network is only row 1; depart row 1 but target off-rail is fine
        # (snaps to nearest rail node); an OTHER trip has no links at all
        trip = _move_trip(0, 120, 0.0, 0.0, 2000.0, 0.0, Mode.OTHER)
        with pytest.raises(UnroutableError):
            estimate_route(trip, router)

    def test_no_snap_within_radius(self):
        g = grid_graph(3, spacing=1000.0)
        router = ModeRouter(g)
        trip = _move_trip(0, 120, 50_000.0, 50_000.0, 52_000.0, 50_000.0, Mode.CAR)
        with pytest.raises(UnroutableError):
            estimate_route(trip, router)

    def test_timestamps_increase_and_interpolate(self):
        g = grid_graph(4, spacing=1000.0)
        router = ModeRouter(g)
        trip = _move_trip(100, 700, 0.0, 0.0, 3000.0, 0.0, Mode.CAR)
        routed = estimate_route(trip, router)
        assert routed.times[0] == 100 and routed.times[-1] == 700
        assert all(b > a for a, b in zip(routed.times, routed.times[1:]))


class TestAssembly:
    def test_single_routed_trip_verbatim(self):
        g = grid_graph(3, spacing=1000.0)
        router = ModeRouter(g)
        trip = _move_trip(0, 400, 0.0, 0.0, 2000.0, 0.0, Mode.CAR)
        routed = estimate_route(trip, router)
        traj = build_node_trajectory([routed], "u", DAY, g)
        assert [v.node for v in traj.visits] == routed.nodes
        traj.validate(g)

    def test_stay_then_move(self):
        g = grid_graph(3, spacing=1000.0)
        router = ModeRouter(g)
        stay = StayAtNode("0_0", 0.0, 1000.0)
        trip = _move_trip(1000, 1400, 0.0, 0.0, 2000.0, 0.0, Mode.CAR)
        routed = estimate_route(trip, router, start_node=g.node_index("0_0"))
        traj = build_node_trajectory([stay, routed], "u", DAY, g)
        assert traj.visits[0].node == "0_0" and traj.visits[0].t == 0.0
        assert traj.visits[1].node == "0_0" and traj.visits[1].t == 1000.0
        assert all(b.t > a.t for a, b in zip(traj.visits, traj.visits[1:]))
        traj.validate(g)

    def test_teleport_rejected(self):
        g = grid_graph(3, spacing=1000.0)
        with pytest.raises(AssemblyError):
            build_node_trajectory(
                [StayAtNode("0_0", 0.0, 1000.0), StayAtNode("2_2", 1100.0, 2000.0)],
                "u",
                DAY,
                g,
            )


class TestPipeline:
    def test_process_user_day_end_to_end(self):
        g = grid_graph(4, spacing=1000.0)
        router = ModeRouter(g)
        day0 = 0.0
        pts = []
        # stay at (0,0) for 30 min
        for i in range(0, 1800, 300):
            pts.append((day0 + i, 5.0, 5.0))
        # drive to (3000, 3000) over 10 min with fixes on the way
        for k, t in enumerate(range(1800, 2400, 120)):
            frac = (t - 1800) / 600.0
            pts.append((t, 3000.0 * frac, 0.0))
        for k, t in enumerate(range(2400, 3000, 120)):
            frac = (t - 2400) / 600.0
            pts.append((t, 3000.0, 3000.0 * frac))
        # stay at (3000, 3000) for 30 min
        for i in range(3000, 4800, 300):
            pts.append((i, 3000.0 + 5.0, 3000.0 - 5.0))
        track = make_track(pts)
        result = process_user_day(track, router, DAY)
        assert result.unroutable == 0
        assert len(result.trajectories) == 1
        traj = result.trajectories[0]
        traj.validate(g)
        nodes = [v.node for v in traj.visits]
        assert nodes[0] == "0_0"
        assert nodes[-1] == "3_3"

    def test_pipeline_deterministic(self):
        g = grid_graph(4, spacing=1000.0)
        router = ModeRouter(g)
        rng = np.random.default_rng(5)
        pts = [(i * 120.0, float(rng.uniform(0, 3000)), float(rng.uniform(0, 3000))) for i in range(40)]
        track = make_track(sorted(pts))
        r1 = process_user_day(track, router, DAY)
        r2 = process_user_day(track, router, DAY)
        v1 = [(v.t, v.node, v.link_in) for tr in r1.trajectories for v in tr.visits]
        v2 = [(v.t, v.node, v.link_in) for tr in r2.trajectories for v in tr.visits]
        assert v1 == v2


class TestNodeTrajectoryFile:
    def test_round_trip(self, tmp_path):
        g = grid_graph(3, spacing=1000.0)
        router = ModeRouter(g)
        stay = StayAtNode("0_0", 0.0, 1000.0)
        trip = _move_trip(1000, 1400, 0.0, 0.0, 2000.0, 0.0, Mode.CAR)
        routed = estimate_route(trip, router, start_node=g.node_index("0_0"))
        traj = build_node_trajectory([stay, routed], "u7", DAY, g)
        path = tmp_path / "trajs.csv"
        write_node_trajectories([traj], path)
        loaded = read_node_trajectories(path)
        assert len(loaded) == 1
        assert [(v.t, v.node, v.link_in, v.mode) for v in loaded[0].visits] == [
            (v.t, v.node, v.link_in, v.mode) for v in traj.visits
        ]
