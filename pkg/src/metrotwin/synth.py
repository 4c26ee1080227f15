"""Synthetic city and population generator with latent daily regimes.

A square road lattice with a few rail lines, a central business district,
and a festival venue; agents follow regime-conditioned schedules (commute,
leisure, festival) along shortest routes. The regime of a day is never an
input feature anywhere downstream; it only shapes behavior, so a predictor
can pick it up solely through the crowd context.

Raw GPS is emitted with log-uniform inter-fix gaps in [60 s, 600 s], extra
fixes at trip transitions (devices wake on motion change), and isotropic
Gaussian position noise.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geo import GeoPoint, Link, Mode, Projection, TransportGraph
from .ingest import day_start_epoch
from .mapmatch import ModeRouter, NodeTrajectory, NodeVisit

DEFAULT_ORIGIN = GeoPoint(35.0, 139.0)

WALK_SPEED = 1.4
BICYCLE_SPEED = 4.0
ROAD_SPEED = 11.1
RAIL_SPEED = 15.0


class Regime(str, enum.Enum):
    WEEKDAY = "WEEKDAY"
    HOLIDAY = "HOLIDAY"
    FESTIVAL = "FESTIVAL"


@dataclass
class CitySpec:
    grid_n: int = 32
    spacing_m: float = 500.0
    seed: int = 0
    origin: GeoPoint = DEFAULT_ORIGIN
    rail_lines: dict[str, list[tuple[int, int]]] | None = None  # line -> station (row, col) path
    cbd: set[tuple[int, int]] | None = None
    residential: set[tuple[int, int]] | None = None

    def __post_init__(self):
        if self.grid_n < 3:
            raise ValueError("grid must be at least 3x3")
        n = self.grid_n
        if self.rail_lines is None and n >= 12:
            mid = n // 2
            west = n // 4
            self.rail_lines = {
                "NS1": [(r, mid) for r in range(0, n, 2)],
                "NS2": [(r, west) for r in range(0, n, 2)],
                "EW1": [(mid, c) for c in range(0, n, 2)],
            }
        elif self.rail_lines is None:
            self.rail_lines = {}
        if self.cbd is None:
            k = max(1, n // 5)
            lo = (n - k) // 2
            self.cbd = {(r, c) for r in range(lo, lo + k) for c in range(lo, lo + k)}
        if self.residential is None:
            margin_lo = max(1, n // 3)
            margin_hi = n - margin_lo
            self.residential = {
                (r, c)
                for r in range(n)
                for c in range(n)
                if (r < margin_lo or r >= margin_hi or c < margin_lo or c >= margin_hi)
                and (r, c) not in self.cbd
            }
        if self.cbd & self.residential:
            raise ValueError("CBD and residential zones overlap")


def node_id(r: int, c: int) -> str:
    return f"n{r:03d}_{c:03d}"


@dataclass
class RailLine:
    line_id: str
    stations: list[str]
    link_ids: list[str]


@dataclass
class SyntheticCity:
    spec: CitySpec
    graph: TransportGraph
    lines: dict[str, RailLine]
    cbd_nodes: list[str]
    residential_nodes: list[str]
    station_nodes: list[str]
    festival_nodes: list[str]
    attraction_nodes: list[str]

    def cbd_stations(self) -> list[str]:
        cbd = set(self.cbd_nodes)
        return [s for s in self.station_nodes if s in cbd]


def generate_city(spec: CitySpec) -> SyntheticCity:
    """Deterministic lattice city; rail corridors displace coincident roads."""
    n = spec.grid_n
    s = spec.spacing_m
    proj = Projection(spec.origin)
    nodes: dict[str, GeoPoint] = {}
    for r in range(n):
        for c in range(n):
            lat, lon = proj.unproject_arrays(np.array([c * s]), np.array([r * s]))
            nodes[node_id(r, c)] = GeoPoint(float(lat[0]), float(lon[0]))

    # rail links between consecutive stations; remember covered lattice edges
    links: dict[str, Link] = {}
    lines: dict[str, RailLine] = {}
    covered: set[tuple[tuple[int, int], tuple[int, int]]] = set()
    station_set: set[str] = set()
    for line_id, path in sorted(spec.rail_lines.items()):
        stations = [node_id(r, c) for r, c in path]
        station_set.update(stations)
        link_ids = []
        for (r1, c1), (r2, c2) in zip(path, path[1:]):
            length = math.hypot((r2 - r1) * s, (c2 - c1) * s)
            for a, b, tag in (((r1, c1), (r2, c2), "f"), ((r2, c2), (r1, c1), "b")):
                lid = f"rl_{line_id}_{a[0]}_{a[1]}_{tag}"
                links[lid] = Link(
                    lid, node_id(*a), node_id(*b), length, frozenset({Mode.TRAIN}), "rail", RAIL_SPEED
                )
                link_ids.append(lid)
            # mark unit lattice edges covered by this rail hop
            steps = max(abs(r2 - r1), abs(c2 - c1))
            dr = (r2 - r1) // steps if steps else 0
            dc = (c2 - c1) // steps if steps else 0
            for k in range(steps):
                e = ((r1 + k * dr, c1 + k * dc), (r1 + (k + 1) * dr, c1 + (k + 1) * dc))
                covered.add(e)
                covered.add((e[1], e[0]))
        lines[line_id] = RailLine(line_id, stations, link_ids)

    for r in range(n):
        for c in range(n):
            for dr, dc in ((0, 1), (1, 0)):
                r2, c2 = r + dr, c + dc
                if r2 >= n or c2 >= n:
                    continue
                if ((r, c), (r2, c2)) in covered:
                    continue
                for (a, b, tag) in (((r, c), (r2, c2), "f"), ((r2, c2), (r, c), "b")):
                    lid = f"rd_{a[0]}_{a[1]}_{b[0]}_{b[1]}"
                    links[lid] = Link(
                        lid, node_id(*a), node_id(*b), s,
                        frozenset({Mode.WALK, Mode.BICYCLE, Mode.CAR}), "road", ROAD_SPEED,
                    )

    graph = TransportGraph(nodes=nodes, links=links, projection=proj)

    mid = n // 2
    venue_center = (mid, min(n - 2, mid + 10))
    festival_nodes = [
        node_id(r, c)
        for r in range(venue_center[0] - 1, venue_center[0] + 2)
        for c in range(venue_center[1] - 1, venue_center[1] + 2)
        if 0 <= r < n and 0 <= c < n
    ]
    q = max(2, n // 5)
    attraction_nodes = [
        node_id(q, q),
        node_id(q, n - 1 - q),
        node_id(n - 1 - q, q),
        node_id(n - 1 - q, n - 1 - q),
    ]
    if spec.cbd:
        museum = sorted(spec.cbd)[0]
        attraction_nodes.append(node_id(*museum))

    return SyntheticCity(
        spec=spec,
        graph=graph,
        lines=lines,
        cbd_nodes=sorted(node_id(r, c) for r, c in spec.cbd),
        residential_nodes=sorted(node_id(r, c) for r, c in spec.residential),
        station_nodes=sorted(station_set),
        festival_nodes=festival_nodes,
        attraction_nodes=attraction_nodes,
    )


# --- population -------------------------------------------------------------


@dataclass
class RegimeBehavior:
    destinations: list[tuple[str, float]]  # (node, probability), includes home
    depart_mean_h: float
    depart_std_h: float
    return_mean_h: float
    return_std_h: float

    def __post_init__(self):
        total = sum(p for _, p in self.destinations)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"destination distribution sums to {total}")


@dataclass
class AgentSpec:
    agent_id: str
    home_node: str
    work_node: str
    mode_weights: dict[Mode, float]
    behavior: dict[Regime, RegimeBehavior]
    rail_user: bool = False


def generate_population(
    n_agents: int,
    city: SyntheticCity,
    seed: int = 0,
    p_commute: float = 0.7,
    p_rail: float = 0.4,
) -> list[AgentSpec]:
    """Homes in residential zones, work in the CBD with probability p_commute.

    Rail commuters live and work at stations so their trips are pure TRAIN
    paths; everyone else drives (or walks short hops).
    """
    rng = np.random.default_rng(seed)
    res_nodes = city.residential_nodes
    cbd_nodes = city.cbd_nodes
    res_stations = [s for s in city.station_nodes if s in set(res_nodes)]
    cbd_stations = city.cbd_stations()
    festival_station = None
    fest_set = set(city.festival_nodes)
    for s in city.station_nodes:
        if s in fest_set:
            festival_station = s
            break

    agents: list[AgentSpec] = []
    for i in range(n_agents):
        is_commuter = rng.random() < p_commute
        is_rail = bool(
            is_commuter and res_stations and cbd_stations and rng.random() < p_rail
        )
        if is_rail:
            home = res_stations[rng.integers(len(res_stations))]
            work = cbd_stations[rng.integers(len(cbd_stations))]
        else:
            home = res_nodes[rng.integers(len(res_nodes))]
            work = cbd_nodes[rng.integers(len(cbd_nodes))] if is_commuter else home
        attractions = city.attraction_nodes
        a1 = attractions[rng.integers(len(attractions))]
        a2 = attractions[rng.integers(len(attractions))]
        venue = (
            festival_station
            if (is_rail and festival_station is not None)
            else city.festival_nodes[rng.integers(len(city.festival_nodes))]
        )
        jitter = float(rng.normal(0.0, 0.25))

        # destinations are drawn fresh every day, and every regime leaves real
        # probability on "atypical" behavior: a single user's day is weak
        # evidence of the regime, only the aggregate is decisive
        if is_commuter:
            weekday = RegimeBehavior(
                [(work, 0.75), (home, 0.18), (a1, 0.07)], 7.75 + jitter, 1.1, 18.0 + jitter, 1.2
            )
            holiday = RegimeBehavior(
                [(home, 0.40), (a1, 0.28), (a2, 0.22), (work, 0.10)],
                11.0 + jitter, 1.8, 17.5 + jitter, 1.5,
            )
            festival = RegimeBehavior(
                [(venue, 0.55), (work, 0.20), (home, 0.10), (a1, 0.15)],
                10.0 + jitter, 1.4, 19.5 + jitter, 1.0,
            )
        else:
            weekday = RegimeBehavior(
                [(home, 0.65), (a1, 0.25), (work, 0.10)], 11.0 + jitter, 2.0, 16.0 + jitter, 1.5
            )
            holiday = RegimeBehavior(
                [(home, 0.45), (a1, 0.30), (a2, 0.25)], 11.0 + jitter, 1.8, 17.5 + jitter, 1.5
            )
            festival = RegimeBehavior(
                [(venue, 0.70), (home, 0.15), (a1, 0.15)], 10.5 + jitter, 1.2, 19.5 + jitter, 1.0
            )
        agents.append(
            AgentSpec(
                agent_id=f"a{i:06d}",
                home_node=home,
                work_node=work,
                mode_weights={Mode.CAR: 0.8, Mode.BICYCLE: 0.15, Mode.WALK: 0.05},
                behavior={
                    Regime.WEEKDAY: weekday,
                    Regime.HOLIDAY: holiday,
                    Regime.FESTIVAL: festival,
                },
                rail_user=is_rail,
            )
        )
    return agents


# --- calendar ---------------------------------------------------------------


@dataclass
class RegimeCalendar:
    days: dict[date, Regime]

    def regime(self, day: date) -> Regime:
        return self.days[day]

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["day", "regime"])
            for day in sorted(self.days):
                writer.writerow([day.isoformat(), self.days[day].value])

    @classmethod
    def load_csv(cls, path: str | Path) -> "RegimeCalendar":
        days = {}
        with open(path, newline="") as f:
            reader = csv.reader(f)
            next(reader)
            for row in reader:
                if row:
                    days[date.fromisoformat(row[0])] = Regime(row[1])
        return cls(days)


def default_calendar(
    start: date = date(2024, 6, 3),
    n_train_days: int = 28,
    n_test_days: int = 7,
    festival_train: Sequence[int] = (16, 17, 18),   # Wed-Fri of week 3
    festival_test: Sequence[int] = (1, 2),          # Tue-Wed of the test week
) -> tuple[RegimeCalendar, list[date], list[date]]:
    """Weekday/weekend calendar with latent festival days on weekdays."""
    days: dict[date, Regime] = {}
    train_days, test_days = [], []
    for i in range(n_train_days + n_test_days):
        day = start + timedelta(days=i)
        offset = i if i < n_train_days else i - n_train_days
        is_test = i >= n_train_days
        if is_test:
            test_days.append(day)
            festival = offset in festival_test
        else:
            train_days.append(day)
            festival = offset in festival_train
        if festival and day.weekday() < 5:
            days[day] = Regime.FESTIVAL
        elif day.weekday() >= 5:
            days[day] = Regime.HOLIDAY
        else:
            days[day] = Regime.WEEKDAY
    return RegimeCalendar(days), train_days, test_days


# --- day simulation ---------------------------------------------------------


@dataclass
class GroundTruthTrip:
    agent_index: int
    depart: float
    arrive: float
    mode: Mode
    link_idx: np.ndarray  # indices into the sorted link table


@dataclass
class SimDay:
    """Columnar ground truth and raw GPS for one simulated day."""

    day: date
    regime: Regime
    user_ids: list[str]
    # ground-truth node visits, concatenated per agent
    visit_offsets: np.ndarray   # (n_agents + 1,)
    visit_t: np.ndarray
    visit_node: np.ndarray      # indices into graph.node_ids
    visit_link: np.ndarray      # indices into sorted(graph.links), -1 none
    visit_mode: np.ndarray      # MODE_TABLE index, -1 stay
    # raw GPS
    gps_user: np.ndarray        # agent index per fix
    gps_t: np.ndarray
    gps_lat: np.ndarray
    gps_lon: np.ndarray
    trips: list[GroundTruthTrip] = field(default_factory=list)

    def trajectory(self, agent_index: int, graph: TransportGraph, link_table: list[str]) -> NodeTrajectory:
        from .trajdb import MODE_TABLE

        lo, hi = self.visit_offsets[agent_index], self.visit_offsets[agent_index + 1]
        visits = []
        for k in range(lo, hi):
            li = int(self.visit_link[k])
            mi = int(self.visit_mode[k])
            visits.append(
                NodeVisit(
                    float(self.visit_t[k]),
                    graph.node_ids[int(self.visit_node[k])],
                    link_table[li] if li >= 0 else None,
                    MODE_TABLE[mi] if mi >= 0 else None,
                )
            )
        return NodeTrajectory(self.user_ids[agent_index], self.day, visits)


class CityRuntime:
    """Routing caches shared across simulated days."""

    def __init__(self, city: SyntheticCity):
        self.city = city
        self.graph = city.graph
        self.router = ModeRouter(city.graph)
        self.link_table = sorted(city.graph.links)
        self._link_pos = {l: i for i, l in enumerate(self.link_table)}
        self._route_cache: dict[tuple[str, str, Mode], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self._node_xy = city.graph.node_xy_matrix()

    def route(self, origin: str, dest: str, mode: Mode):
        """(node indices, link indices, cumulative seconds) or None.

        Travel time uses the agent's mode speed on roads (walking a road link
        is slower than driving it); the path itself is the least-cost route
        of the mode subgraph, shared with the map matcher.
        """
        key = (origin, dest, mode)
        if key in self._route_cache:
            return self._route_cache[key]
        g = self.graph
        u, v = g.node_index(origin), g.node_index(dest)
        path = self.router.path(mode, u, v)
        if path is None:
            self._route_cache[key] = None
            return None
        link_ids = [self.router.link_id(mode, a, b) for a, b in zip(path, path[1:])]
        speed = {Mode.WALK: WALK_SPEED, Mode.BICYCLE: BICYCLE_SPEED}.get(mode)
        durations = []
        for lid in link_ids:
            link = g.links[lid]
            durations.append(link.length_m / (speed if speed is not None else link.speed_mps))
        out = (
            np.array(path, dtype=np.int64),
            np.array([self._link_pos[l] for l in link_ids], dtype=np.int64),
            np.concatenate([[0.0], np.cumsum(durations)]),
        )
        self._route_cache[key] = out
        return out


def _pick(rng: np.random.Generator, dist: list[tuple[str, float]]) -> str:
    u = rng.random()
    acc = 0.0
    for node, p in dist:
        acc += p
        if u <= acc:
            return node
    return dist[-1][0]


def _choose_mode(agent: AgentSpec, origin: str, dest: str, runtime: CityRuntime, rng) -> Mode:
    if agent.rail_user:
        if runtime.route(origin, dest, Mode.TRAIN) is not None:
            return Mode.TRAIN
    g = runtime.graph
    dist = g.straight_line_m(origin, dest)
    if dist <= 1200.0:
        return Mode.WALK if rng.random() < 0.6 else Mode.BICYCLE
    modes = list(agent.mode_weights)
    probs = np.array([agent.mode_weights[m] for m in modes])
    m = modes[int(rng.choice(len(modes), p=probs / probs.sum()))]
    if m == Mode.WALK and dist > 3000.0:
        m = Mode.CAR
    return m


def simulate_day(
    population: Sequence[AgentSpec],
    runtime: CityRuntime,
    regime: Regime,
    day: date,
    seed: int = 0,
    noise_sigma_m: float = 20.0,
    gap_range_s: tuple[float, float] = (60.0, 600.0),
    keep_trips: bool = False,
) -> SimDay:
    """Execute one day of regime-conditioned schedules; emit truth and GPS."""
    g = runtime.graph
    proj = g.projection
    day0 = day_start_epoch(day)
    day_end = 86399.0
    node_xy = runtime._node_xy
    from .trajdb import MODE_TABLE

    mode_pos = {m: i for i, m in enumerate(MODE_TABLE)}

    v_t, v_node, v_link, v_mode = [], [], [], []
    offsets = [0]
    trips: list[GroundTruthTrip] = []
    log_lo, log_hi = math.log(gap_range_s[0]), math.log(gap_range_s[1])

    # per-agent polylines, concatenated; agents separated by a time shift so
    # one global interpolation serves the whole population
    AGENT_SHIFT = 1.0e6
    all_breaks_t: list[np.ndarray] = []
    all_breaks_x: list[np.ndarray] = []
    all_breaks_y: list[np.ndarray] = []
    all_fix_t: list[np.ndarray] = []
    all_fix_agent: list[np.ndarray] = []

    for ai, agent in enumerate(population):
        rng = np.random.default_rng([seed & (2**63 - 1), day.toordinal(), ai])
        beh = agent.behavior[regime]
        dest = _pick(rng, beh.destinations)

        # --- build the visit sequence (seconds of day) ---
        at_node = g.node_index(agent.home_node)
        a_t = [0.0]
        a_node = [at_node]
        a_link = [-1]
        a_mode = [-1]
        breaks_t = [0.0]
        breaks_node = [at_node]
        transition_times: list[float] = []

        def do_trip(depart_s: float, target: str, cur_node_id: str):
            nonlocal at_node
            mode = _choose_mode(agent, cur_node_id, target, runtime, rng)
            route = runtime.route(cur_node_id, target, mode)
            if route is None:
                mode = Mode.CAR
                route = runtime.route(cur_node_id, target, mode)
            if route is None:
                return None
            nodes, links, cum = route
            # dwell end at departure
            a_t.append(depart_s)
            a_node.append(nodes[0])
            a_link.append(-1)
            a_mode.append(-1)
            breaks_t.append(depart_s)
            breaks_node.append(nodes[0])
            transition_times.append(depart_s)
            m_idx = mode_pos[mode]
            for k in range(1, len(nodes)):
                t_k = depart_s + cum[k]
                a_t.append(t_k)
                a_node.append(nodes[k])
                a_link.append(links[k - 1])
                a_mode.append(m_idx)
                breaks_t.append(t_k)
                breaks_node.append(nodes[k])
            arrive_s = depart_s + cum[-1]
            transition_times.append(arrive_s)
            at_node = int(nodes[-1])
            if keep_trips:
                trips.append(GroundTruthTrip(ai, depart_s, arrive_s, mode, links.copy()))
            return arrive_s

        if dest != agent.home_node:
            depart = float(np.clip(rng.normal(beh.depart_mean_h, beh.depart_std_h), 5.0, 14.0)) * 3600.0
            arrive = do_trip(depart, dest, agent.home_node)
            if arrive is not None:
                ret = float(
                    np.clip(rng.normal(beh.return_mean_h, beh.return_std_h), arrive / 3600.0 + 0.75, 23.0)
                ) * 3600.0
                cur_id = g.node_ids[at_node]
                do_trip(ret, agent.home_node, cur_id)

        # close the day with a final dwell marker
        if a_t[-1] < day_end:
            a_t.append(day_end)
            a_node.append(at_node)
            a_link.append(-1)
            a_mode.append(-1)
            breaks_t.append(day_end)
            breaks_node.append(at_node)

        v_t.extend(t + day0 for t in a_t)
        v_node.extend(a_node)
        v_link.extend(a_link)
        v_mode.extend(a_mode)
        offsets.append(len(v_t))

        # --- GPS fix times along the breakpoint polyline ---
        mean_gap = (gap_range_s[1] - gap_range_s[0]) / (log_hi - log_lo) if log_hi > log_lo else gap_range_s[0]
        n_est = int(86400.0 / mean_gap * 1.25) + int(5 * math.sqrt(86400.0 / mean_gap)) + 4
        gaps = np.exp(rng.uniform(log_lo, log_hi, size=n_est))
        fix_t = np.cumsum(gaps) - gaps[0] * rng.random()
        while fix_t[-1] < 86400.0:  # rare shortfall
            extra = np.exp(rng.uniform(log_lo, log_hi, size=32))
            fix_t = np.concatenate([fix_t, fix_t[-1] + np.cumsum(extra)])
        fix_t = fix_t[fix_t < 86400.0]
        if transition_times:
            fix_t = np.unique(np.concatenate([fix_t, np.array(transition_times)]))
        shift = ai * AGENT_SHIFT
        all_breaks_t.append(np.asarray(breaks_t) + shift)
        bn = np.array(breaks_node, dtype=np.int64)
        all_breaks_x.append(node_xy[bn, 0])
        all_breaks_y.append(node_xy[bn, 1])
        all_fix_t.append(fix_t + shift)
        all_fix_agent.append(np.full(len(fix_t), ai, dtype=np.int64))

    # one global interpolation and one noise draw for the whole population
    if all_fix_t:
        bt = np.concatenate(all_breaks_t)
        bx = np.concatenate(all_breaks_x)
        by = np.concatenate(all_breaks_y)
        ft = np.concatenate(all_fix_t)
        fagent = np.concatenate(all_fix_agent)
        fx = np.interp(ft, bt, bx)
        fy = np.interp(ft, bt, by)
        if noise_sigma_m > 0:
            noise_rng = np.random.default_rng([seed & (2**63 - 1), day.toordinal(), 0xA0])
            fx = fx + noise_rng.normal(0.0, noise_sigma_m, size=len(fx))
            fy = fy + noise_rng.normal(0.0, noise_sigma_m, size=len(fy))
        gps_t = ft - fagent * AGENT_SHIFT + day0
    else:
        fx = fy = gps_t = np.zeros(0)
        fagent = np.zeros(0, dtype=np.int64)
    lats, lons = proj.unproject_arrays(fx, fy)
    return SimDay(
        day=day,
        regime=regime,
        user_ids=[a.agent_id for a in population],
        visit_offsets=np.array(offsets, dtype=np.int64),
        visit_t=np.array(v_t),
        visit_node=np.array(v_node, dtype=np.int64),
        visit_link=np.array(v_link, dtype=np.int64),
        visit_mode=np.array(v_mode, dtype=np.int64),
        gps_user=fagent,
        gps_t=gps_t,
        gps_lat=lats,
        gps_lon=lons,
        trips=trips,
    )


def write_raw_csv(sim: SimDay, path: str | Path, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as f:
        writer = csv.writer(f)
        if not append:
            writer.writerow(["user_id", "timestamp", "lat", "lon"])
        order = np.lexsort((sim.gps_t, sim.gps_user))
        for i in order:
            writer.writerow(
                [
                    sim.user_ids[int(sim.gps_user[i])],
                    f"{sim.gps_t[i]:.1f}",
                    f"{sim.gps_lat[i]:.7f}",
                    f"{sim.gps_lon[i]:.7f}",
                ]
            )


def write_lines_csv(city: SyntheticCity, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["line_id", "link_id"])
        for line_id in sorted(city.lines):
            for lid in city.lines[line_id].link_ids:
                writer.writerow([line_id, lid])


def write_stations_csv(city: SyntheticCity, path: str | Path) -> None:
    """Station registry: one synthetic station per rail node, plus zone groups."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["station_id", "node_id"])
        for s in city.station_nodes:
            writer.writerow([f"st_{s}", s])
        for s in city.cbd_stations():
            writer.writerow(["cbd_all", s])
