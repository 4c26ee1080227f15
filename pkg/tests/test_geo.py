import math

import numpy as np
import pytest

from metrotwin.geo import (
    EARTH_RADIUS_M,
    GeoPoint,
    GraphIntegrityError,
    GraphParseError,
    HexCellId,
    Link,
    LocalXY,
    Mode,
    OutOfBoundsError,
    Projection,
    TransportGraph,
    cell_area_m2,
    edge_length_m,
    hex_center,
    hex_index,
    hex_neighbors,
    load_graph,
    pack_cells,
    save_graph,
    unpack_cells,
)

ORIGIN = GeoPoint(35.0, 139.0)


@pytest.fixture
def proj():
    return Projection(ORIGIN)


class TestProjection:
    def test_origin_maps_to_zero(self, proj):
        xy = proj.project(ORIGIN)
        assert xy.x == 0.0 and xy.y == 0.0

    def test_one_hundredth_degree_north(self, proj):
        # closed-form arc length: R * pi/180 * 0.01
        expected = EARTH_RADIUS_M * math.pi / 180.0 * 0.01
        assert abs(expected - 1111.95) < 0.1
        xy = proj.project(GeoPoint(35.01, 139.0))
        assert xy.x == pytest.approx(0.0, abs=1e-9)
        assert xy.y == pytest.approx(expected, abs=0.1)

    def test_round_trip(self, proj):
        rng = np.random.default_rng(0)
        for _ in range(200):
            p = GeoPoint(35.0 + rng.uniform(-1, 1), 139.0 + rng.uniform(-1, 1))
            q = proj.unproject(proj.project(p))
            assert abs(q.lat - p.lat) < 1e-9
            assert abs(q.lon - p.lon) < 1e-9

    def test_out_of_bounds(self, proj):
        with pytest.raises(OutOfBoundsError):
            proj.project(GeoPoint(40.0, 139.0))

    def test_array_projection_matches_scalar(self, proj):
        rng = np.random.default_rng(1)
        lats = 35.0 + rng.uniform(-1, 1, 50)
        lons = 139.0 + rng.uniform(-1, 1, 50)
        xs, ys = proj.project_arrays(lats, lons)
        for i in range(50):
            xy = proj.project(GeoPoint(lats[i], lons[i]))
            assert xs[i] == pytest.approx(xy.x)
            assert ys[i] == pytest.approx(xy.y)

    def test_latlon_validation(self):
        with pytest.raises(ValueError):
            GeoPoint(91.0, 0.0)
        with pytest.raises(ValueError):
            GeoPoint(0.0, 181.0)


class TestHexGrid:
    def test_default_cell_area(self):
        assert cell_area_m2(8) == pytest.approx(0.74e6, rel=1e-3)
        assert edge_length_m(8) == pytest.approx(533.6, abs=0.2)

    def test_origin_cell(self):
        assert hex_index(LocalXY(0.0, 0.0)) == HexCellId(0, 0, 8)

    def test_neighbor_cell_brute_force(self):
        # brute-force nearest center over the 5x5 axial neighborhood
        e = edge_length_m(8)
        p = LocalXY(math.sqrt(3) * e, 0.0)
        best = None
        for q in range(-2, 3):
            for r in range(-2, 3):
                c = hex_center(HexCellId(q, r, 8))
                d = math.hypot(c.x - p.x, c.y - p.y)
                if best is None or d < best[0]:
                    best = (d, (q, r))
        assert best[1] == (1, 0)
        assert hex_index(p) == HexCellId(1, 0, 8)

    def test_center_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            cell = HexCellId(int(rng.integers(-200, 200)), int(rng.integers(-200, 200)), 8)
            assert hex_index(hex_center(cell)) == cell

    def test_center_formula(self):
        e = edge_length_m(8)
        c = hex_center(HexCellId(1, 0, 8))
        assert c.x == pytest.approx(math.sqrt(3) * e)
        assert c.y == pytest.approx(0.0)

    def test_partition_distance_bound(self):
        # every point lies within one edge length of its assigned center
        rng = np.random.default_rng(3)
        e = edge_length_m(8)
        xs = rng.uniform(-50_000, 50_000, 10_000)
        ys = rng.uniform(-50_000, 50_000, 10_000)
        for x, y in zip(xs, ys):
            cell = hex_index(LocalXY(x, y))
            c = hex_center(cell)
            assert math.hypot(c.x - x, c.y - y) <= e + 1e-9

    def test_neighbor_spacing(self):
        e = edge_length_m(8)
        base = hex_center(HexCellId(3, -2, 8))
        for n in hex_neighbors(HexCellId(3, -2, 8)):
            c = hex_center(n)
            d = math.hypot(c.x - base.x, c.y - base.y)
            assert d == pytest.approx(math.sqrt(3) * e, rel=1e-6)

    def test_pack_unpack(self):
        rng = np.random.default_rng(4)
        qs = rng.integers(-10_000, 10_000, 1000)
        rs = rng.integers(-10_000, 10_000, 1000)
        q2, r2 = unpack_cells(pack_cells(qs, rs))
        assert np.array_equal(qs, q2)
        assert np.array_equal(rs, r2)


def _write_graph(tmp_path, nodes_rows, links_rows):
    (tmp_path / "nodes.csv").write_text("node_id,lat,lon\n" + "\n".join(nodes_rows) + "\n")
    (tmp_path / "links.csv").write_text(
        "link_id,from,to,length_m,modes,class,speed_mps\n" + "\n".join(links_rows) + "\n"
    )
    return tmp_path


class TestGraph:
    def test_two_node_one_link(self, tmp_path):
        path = _write_graph(
            tmp_path,
            ["a,35.0,139.0", "b,35.001,139.0"],
            ["l1,a,b,120.0,CAR|WALK,road,11.1"],
        )
        g = load_graph(path)
        assert len(g.nodes) == 2
        assert len(g.links) == 1
        assert g.links["l1"].modes == frozenset({Mode.CAR, Mode.WALK})
        assert g.adjacency["a"] == ("l1",)

    def test_dangling_endpoint(self, tmp_path):
        path = _write_graph(
            tmp_path,
            ["a,35.0,139.0"],
            ["l1,a,missing,120.0,CAR,road,11.1"],
        )
        with pytest.raises(GraphIntegrityError):
            load_graph(path)

    def test_malformed_row_reports_line(self, tmp_path):
        path = _write_graph(
            tmp_path,
            ["a,35.0,139.0", "b,not_a_number,139.0"],
            [],
        )
        with pytest.raises(GraphParseError) as err:
            load_graph(path)
        assert err.value.line_no == 3

    def test_length_shorter_than_straight_line(self, tmp_path):
        path = _write_graph(
            tmp_path,
            ["a,35.0,139.0", "b,35.01,139.0"],
            ["l1,a,b,10.0,CAR,road,11.1"],
        )
        with pytest.raises(GraphIntegrityError):
            load_graph(path)

    def test_adjacency_reconstruction(self, tmp_path):
        path = _write_graph(
            tmp_path,
            ["a,35.0,139.0", "b,35.001,139.0", "c,35.002,139.0"],
            [
                "l1,a,b,120.0,CAR,road,11.1",
                "l2,b,c,120.0,CAR,road,11.1",
                "l3,b,a,120.0,CAR,road,11.1",
            ],
        )
        g = load_graph(path)
        rebuilt = {}
        for lid, link in g.links.items():
            rebuilt.setdefault(link.from_node, []).append(lid)
        for node in g.nodes:
            assert tuple(sorted(rebuilt.get(node, []))) == tuple(sorted(g.adjacency[node]))

    def test_save_load_round_trip(self, tmp_path):
        g = TransportGraph(
            nodes={"a": GeoPoint(35.0, 139.0), "b": GeoPoint(35.001, 139.0)},
            links={
                "l1": Link("l1", "a", "b", 120.0, frozenset({Mode.TRAIN}), "rail", 16.0)
            },
        )
        out = tmp_path / "g"
        save_graph(g, out)
        g2 = load_graph(out)
        assert g2.nodes == g.nodes
        assert g2.links == g.links
