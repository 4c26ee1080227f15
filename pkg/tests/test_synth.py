from datetime import date

import numpy as np
import pytest

from metrotwin.geo import Mode, load_graph, save_graph
from metrotwin.synth import (
    AgentSpec,
    CityRuntime,
    CitySpec,
    Regime,
    RegimeCalendar,
    default_calendar,
    generate_city,
    generate_population,
    simulate_day,
    write_lines_csv,
    write_stations_csv,
)
from metrotwin.ingest import day_start_epoch

DAY = date(2024, 6, 5)


def small_city(n=16, seed=0):
    return generate_city(CitySpec(grid_n=n, seed=seed))


class TestGenerateCity:
    def test_three_by_three_no_rail(self):
        city = generate_city(CitySpec(grid_n=3))
        assert len(city.graph.nodes) == 9
        assert len(city.graph.links) == 24  # 12 undirected lattice edges

    def test_seed_determinism(self):
        a = generate_city(CitySpec(grid_n=12, seed=3))
        b = generate_city(CitySpec(grid_n=12, seed=3))
        assert a.graph.nodes == b.graph.nodes
        assert a.graph.links == b.graph.links

    def test_single_rail_line_adds_train_links(self):
        spec = CitySpec(grid_n=3, rail_lines={"L": [(0, 0), (0, 1), (0, 2)]})
        city = generate_city(spec)
        train_links = [l for l in city.graph.links.values() if Mode.TRAIN in l.modes]
        assert len(train_links) == 4  # 2 hops x 2 directions
        # the covered road edges are displaced
        road_links = [l for l in city.graph.links.values() if Mode.CAR in l.modes]
        assert len(road_links) == 24 - 4

    def test_graph_csv_round_trip(self, tmp_path):
        city = generate_city(CitySpec(grid_n=3))
        save_graph(city.graph, tmp_path / "g")
        loaded = load_graph(tmp_path / "g")
        assert len(loaded.nodes) == 9
        assert len(loaded.links) == 24

    def test_default_city_structure(self):
        city = small_city()
        assert city.cbd_nodes and city.residential_nodes
        assert set(city.cbd_nodes).isdisjoint(city.residential_nodes)
        assert city.station_nodes
        assert city.cbd_stations()
        # rail network is one connected component through the center
        runtime = CityRuntime(city)
        s0 = city.station_nodes[0]
        for s in city.station_nodes[1:]:
            assert runtime.route(s0, s, Mode.TRAIN) is not None

    def test_artifact_csvs(self, tmp_path):
        city = small_city()
        write_lines_csv(city, tmp_path / "lines.csv")
        write_stations_csv(city, tmp_path / "stations.csv")
        lines = (tmp_path / "lines.csv").read_text().splitlines()
        assert lines[0] == "line_id,link_id"
        assert len(lines) > 1


class TestGeneratePopulation:
    def test_no_commuters(self):
        city = small_city()
        agents = generate_population(100, city, seed=1, p_commute=0.0)
        cbd = set(city.cbd_nodes)
        assert all(a.work_node not in cbd for a in agents)

    def test_seed_determinism(self):
        city = small_city()
        a = generate_population(50, city, seed=2)
        b = generate_population(50, city, seed=2)
        assert [x.home_node for x in a] == [x.home_node for x in b]
        assert [x.work_node for x in a] == [x.work_node for x in b]

    def test_commuter_fraction_concentrates(self):
        city = small_city(24)
        agents = generate_population(10_000, city, seed=3, p_commute=0.7)
        cbd = set(city.cbd_nodes)
        frac = sum(a.work_node in cbd for a in agents) / len(agents)
        assert abs(frac - 0.7) < 0.01

    def test_behavior_distributions_are_simplices(self):
        city = small_city()
        for agent in generate_population(20, city, seed=4):
            for beh in agent.behavior.values():
                assert sum(p for _, p in beh.destinations) == pytest.approx(1.0)

    def test_rail_users_live_and_work_at_stations(self):
        city = small_city(24)
        stations = set(city.station_nodes)
        agents = generate_population(300, city, seed=5)
        rail = [a for a in agents if a.rail_user]
        assert rail
        for a in rail:
            assert a.home_node in stations and a.work_node in stations


class TestCalendar:
    def test_default_calendar_shape(self):
        cal, train_days, test_days = default_calendar()
        assert len(train_days) == 28 and len(test_days) == 7
        regimes = [cal.regime(d) for d in train_days + test_days]
        assert Regime.FESTIVAL in regimes
        # festival days are weekdays (latent: day-of-week says workday)
        for d, r in cal.days.items():
            if r == Regime.FESTIVAL:
                assert d.weekday() < 5
            if d.weekday() >= 5:
                assert r == Regime.HOLIDAY

    def test_csv_round_trip(self, tmp_path):
        cal, _, _ = default_calendar()
        cal.save_csv(tmp_path / "calendar.csv")
        loaded = RegimeCalendar.load_csv(tmp_path / "calendar.csv")
        assert loaded.days == cal.days


def cbd_inbound_arrivals(sim, city, runtime, window_h):
    """Count ground-truth arrivals into CBD nodes within [lo, hi) hours."""
    day0 = day_start_epoch(sim.day)
    lo, hi = window_h[0] * 3600 + day0, window_h[1] * 3600 + day0
    cbd = {runtime.graph.node_index(n) for n in city.cbd_nodes}
    count = 0
    for ai in range(len(sim.user_ids)):
        s, e = sim.visit_offsets[ai], sim.visit_offsets[ai + 1]
        nodes = sim.visit_node[s:e]
        times = sim.visit_t[s:e]
        modes = sim.visit_mode[s:e]
        for k in range(1, len(nodes)):
            # arrival = first CBD node of a moving segment's end
            if modes[k] >= 0 and nodes[k] in cbd and (nodes[k - 1] not in cbd):
                if lo <= times[k] < hi:
                    count += 1
                    break
    return count


class TestSimulateDay:
    def setup_method(self):
        self.city = small_city(24)
        self.runtime = CityRuntime(self.city)
        self.pop = generate_population(800, self.city, seed=7)

    def test_weekday_morning_peak(self):
        sim = simulate_day(self.pop, self.runtime, Regime.WEEKDAY, DAY, seed=1)
        morning = cbd_inbound_arrivals(sim, self.city, self.runtime, (7, 9))
        midday = cbd_inbound_arrivals(sim, self.city, self.runtime, (12, 14))
        assert morning >= 2 * midday
        assert morning > 0

    def test_holiday_morning_quiet(self):
        weekday = simulate_day(self.pop, self.runtime, Regime.WEEKDAY, DAY, seed=1)
        holiday = simulate_day(self.pop, self.runtime, Regime.HOLIDAY, DAY, seed=1)
        m_w = cbd_inbound_arrivals(weekday, self.city, self.runtime, (7, 9))
        m_h = cbd_inbound_arrivals(holiday, self.city, self.runtime, (7, 9))
        assert m_h < 0.5 * m_w

    def test_zero_noise_fixes_on_route(self):
        sim = simulate_day(
            self.pop[:50], self.runtime, Regime.WEEKDAY, DAY, seed=2, noise_sigma_m=0.0
        )
        proj = self.city.graph.projection
        xs, ys = proj.project_arrays(sim.gps_lat, sim.gps_lon)
        node_xy = self.city.graph.node_xy_matrix()
        for ai in range(50):
            s, e = sim.visit_offsets[ai], sim.visit_offsets[ai + 1]
            bt = sim.visit_t[s:e]
            bx = node_xy[sim.visit_node[s:e], 0]
            by = node_xy[sim.visit_node[s:e], 1]
            mask = sim.gps_user == ai
            fx = np.interp(sim.gps_t[mask], bt, bx)
            fy = np.interp(sim.gps_t[mask], bt, by)
            assert np.allclose(xs[mask], fx, atol=1e-6)
            assert np.allclose(ys[mask], fy, atol=1e-6)

    def test_determinism(self):
        a = simulate_day(self.pop[:100], self.runtime, Regime.FESTIVAL, DAY, seed=3)
        b = simulate_day(self.pop[:100], self.runtime, Regime.FESTIVAL, DAY, seed=3)
        assert np.array_equal(a.gps_t, b.gps_t)
        assert np.array_equal(a.visit_t, b.visit_t)
        assert np.array_equal(a.visit_node, b.visit_node)

    def test_ground_truth_validates(self):
        sim = simulate_day(self.pop[:40], self.runtime, Regime.WEEKDAY, DAY, seed=4)
        link_table = sorted(self.city.graph.links)
        for ai in range(40):
            traj = sim.trajectory(ai, self.city.graph, link_table)
            traj.validate(self.city.graph)

    def test_gap_bounds(self):
        sim = simulate_day(self.pop[:50], self.runtime, Regime.WEEKDAY, DAY, seed=5)
        for ai in range(50):
            mask = sim.gps_user == ai
            t = np.sort(sim.gps_t[mask])
            gaps = np.diff(t)
            # inserted transition fixes can shorten gaps but never widen them
            assert gaps.max() <= 600.0 + 1e-6

    def test_festival_venue_attracts(self):
        sim = simulate_day(self.pop, self.runtime, Regime.FESTIVAL, DAY, seed=6)
        fest_nodes = {self.city.graph.node_index(n) for n in self.city.festival_nodes}
        day0 = day_start_epoch(DAY)
        visitors = 0
        for ai in range(len(sim.user_ids)):
            s, e = sim.visit_offsets[ai], sim.visit_offsets[ai + 1]
            if any(n in fest_nodes for n in sim.visit_node[s:e]):
                visitors += 1
        assert visitors > 0.4 * len(self.pop)


class TestRegimeIdentifiability:
    def test_logistic_separation_of_regimes(self):
        # a simple classifier on the 08:00 cell-occupancy histogram must
        # separate weekday from holiday on held-out days
        from sklearn.linear_model import LogisticRegression

        city = small_city(16)
        runtime = CityRuntime(city)
        pop = generate_population(400, city, seed=8)
        n_days, split = 24, 16
        feats, labels = [], []
        day0 = date(2024, 6, 3)
        from datetime import timedelta

        for i in range(n_days):
            regime = Regime.WEEKDAY if i % 2 == 0 else Regime.HOLIDAY
            day = day0 + timedelta(days=i)
            sim = simulate_day(pop, runtime, regime, day, seed=100 + i)
            t_8 = day_start_epoch(day) + 8 * 3600
            hist = np.zeros(len(city.graph.node_ids))
            for ai in range(len(pop)):
                s, e = sim.visit_offsets[ai], sim.visit_offsets[ai + 1]
                k = np.searchsorted(sim.visit_t[s:e], t_8, side="right") - 1
                if k >= 0:
                    hist[sim.visit_node[s + k]] += 1
            feats.append(hist / len(pop))
            labels.append(regime == Regime.WEEKDAY)
        clf = LogisticRegression(max_iter=2000)
        clf.fit(feats[:split], labels[:split])
        acc = clf.score(feats[split:], labels[split:])
        assert acc >= 0.95
