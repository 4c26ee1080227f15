"""Local map projection, hexagonal spatial indexing, and the multimodal transport graph.

Everything downstream (cell vocabularies, map matching, retrieval) works in a
local equirectangular plane anchored at a configurable origin. Locations are
discretized on a flat axial hex grid (pointy-top) whose default cell area is
0.74 km^2.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EARTH_RADIUS_M = 6371008.8
METERS_PER_DEGREE = EARTH_RADIUS_M * math.pi / 180.0

DEFAULT_CELL_AREA_M2 = 0.74e6
DEFAULT_RESOLUTION = 8
_HEX_AREA_FACTOR = 1.5 * math.sqrt(3.0)  # area = 1.5*sqrt(3)*edge^2

# Edge lengths per resolution, halving per level, anchored so that the
# default resolution yields the default cell area (edge ~533.7 m).
EDGE_LENGTHS_M = tuple(
    math.sqrt(DEFAULT_CELL_AREA_M2 / _HEX_AREA_FACTOR) * 2.0 ** (DEFAULT_RESOLUTION - r)
    for r in range(16)
)

SQRT3 = math.sqrt(3.0)


class GeoError(ValueError):
    """Base class for geographic domain errors."""


class OutOfBoundsError(GeoError):
    """Point falls outside the projection's configured bounding box."""


class GraphParseError(GeoError):
    def __init__(self, path: str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class GraphIntegrityError(GeoError):
    """Graph violates a structural invariant (dangling endpoint, bad length...)."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise GeoError(f"latitude out of range: {self.lat}")
        if not (-180.0 <= self.lon <= 180.0):
            raise GeoError(f"longitude out of range: {self.lon}")


@dataclass(frozen=True)
class LocalXY:
    x: float  # meters east of origin
    y: float  # meters north of origin


@dataclass(frozen=True)
class BoundingBox:
    min_lat: float
    min_lon: float
    max_lat: float
    max_lon: float

    def contains(self, p: GeoPoint) -> bool:
        return self.min_lat <= p.lat <= self.max_lat and self.min_lon <= p.lon <= self.max_lon


class Projection:
    """Equirectangular local projection around a fixed origin.

    x = (lon - lon0) * cos(lat0) * R * pi/180, y = (lat - lat0) * R * pi/180.
    Distortion stays below ~1.5% over metropolitan extents, which is fine for
    cell assignment and nearest-neighbor distances.
    """

    def __init__(self, origin: GeoPoint, bbox: BoundingBox | None = None):
        self.origin = origin
        if bbox is None:
            bbox = BoundingBox(
                min_lat=max(origin.lat - 1.5, -90.0),
                min_lon=max(origin.lon - 2.0, -180.0),
                max_lat=min(origin.lat + 1.5, 90.0),
                max_lon=min(origin.lon + 2.0, 180.0),
            )
        self.bbox = bbox
        self._coslat0 = math.cos(math.radians(origin.lat))

    def project(self, p: GeoPoint) -> LocalXY:
        if not self.bbox.contains(p):
            raise OutOfBoundsError(f"point {p} outside bounding box {self.bbox}")
        x = (p.lon - self.origin.lon) * self._coslat0 * METERS_PER_DEGREE
        y = (p.lat - self.origin.lat) * METERS_PER_DEGREE
        return LocalXY(x, y)

    def unproject(self, xy: LocalXY) -> GeoPoint:
        lon = xy.x / (self._coslat0 * METERS_PER_DEGREE) + self.origin.lon
        lat = xy.y / METERS_PER_DEGREE + self.origin.lat
        return GeoPoint(lat, lon)

    def project_arrays(self, lats: np.ndarray, lons: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized projection; no bounds check (bulk callers pre-filter)."""
        xs = (np.asarray(lons) - self.origin.lon) * (self._coslat0 * METERS_PER_DEGREE)
        ys = (np.asarray(lats) - self.origin.lat) * METERS_PER_DEGREE
        return xs, ys

    def unproject_arrays(self, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lats = np.asarray(ys) / METERS_PER_DEGREE + self.origin.lat
        lons = np.asarray(xs) / (self._coslat0 * METERS_PER_DEGREE) + self.origin.lon
        return lats, lons

    def __eq__(self, other):
        return (
            isinstance(other, Projection)
            and self.origin == other.origin
            and self.bbox == other.bbox
        )


@dataclass(frozen=True)
class HexCellId:
    q: int
    r: int
    resolution: int = DEFAULT_RESOLUTION

    def key(self) -> tuple[int, int, int]:
        """Canonical ordering key (used for deterministic tie-breaks)."""
        return (self.resolution, self.q, self.r)


def edge_length_m(resolution: int = DEFAULT_RESOLUTION) -> float:
    if not 0 <= resolution < len(EDGE_LENGTHS_M):
        raise GeoError(f"invalid hex resolution: {resolution}")
    return EDGE_LENGTHS_M[resolution]


def cell_area_m2(resolution: int = DEFAULT_RESOLUTION) -> float:
    e = edge_length_m(resolution)
    return _HEX_AREA_FACTOR * e * e


def hex_index(xy: LocalXY, resolution: int = DEFAULT_RESOLUTION) -> HexCellId:
    """Cell whose center is nearest to the point (pointy-top axial grid)."""
    q, r = hex_index_arrays(np.array([xy.x]), np.array([xy.y]), resolution)
    return HexCellId(int(q[0]), int(r[0]), resolution)


def hex_index_arrays(
    xs: np.ndarray, ys: np.ndarray, resolution: int = DEFAULT_RESOLUTION
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized point-to-cell assignment via fractional axial + cube rounding."""
    e = edge_length_m(resolution)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    qf = (SQRT3 / 3.0 * xs - ys / 3.0) / e
    rf = (2.0 / 3.0 * ys) / e
    sf = -qf - rf
    q = np.round(qf)
    r = np.round(rf)
    s = np.round(sf)
    dq = np.abs(q - qf)
    dr = np.abs(r - rf)
    ds = np.abs(s - sf)
    fix_q = (dq > dr) & (dq > ds)
    fix_r = ~fix_q & (dr > ds)
    q = np.where(fix_q, -r - s, q)
    r = np.where(fix_r, -q - s, r)
    return q.astype(np.int64), r.astype(np.int64)


def hex_center(cell: HexCellId) -> LocalXY:
    e = edge_length_m(cell.resolution)
    x = SQRT3 * e * (cell.q + cell.r / 2.0)
    y = 1.5 * e * cell.r
    return LocalXY(x, y)


def hex_centers_arrays(
    qs: np.ndarray, rs: np.ndarray, resolution: int = DEFAULT_RESOLUTION
) -> tuple[np.ndarray, np.ndarray]:
    e = edge_length_m(resolution)
    qs = np.asarray(qs, dtype=np.float64)
    rs = np.asarray(rs, dtype=np.float64)
    return SQRT3 * e * (qs + rs / 2.0), 1.5 * e * rs


_AXIAL_NEIGHBORS = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1))


def hex_neighbors(cell: HexCellId) -> list[HexCellId]:
    return [HexCellId(cell.q + dq, cell.r + dr, cell.resolution) for dq, dr in _AXIAL_NEIGHBORS]


_PACK_BIAS = 1 << 20  # axial coordinates stay well inside +-2^20 at any sane extent


def pack_cells(qs: np.ndarray, rs: np.ndarray) -> np.ndarray:
    """Pack axial (q, r) into one nonnegative int64 key (bias-shifted halves)."""
    qs = np.asarray(qs, dtype=np.int64)
    rs = np.asarray(rs, dtype=np.int64)
    if np.any(np.abs(qs) >= _PACK_BIAS) or np.any(np.abs(rs) >= _PACK_BIAS):
        raise GeoError("axial coordinate out of packable range")
    return (qs + _PACK_BIAS) * (2 * _PACK_BIAS) + (rs + _PACK_BIAS)


def unpack_cells(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    keys = np.asarray(keys, dtype=np.int64)
    qs = keys // (2 * _PACK_BIAS) - _PACK_BIAS
    rs = keys % (2 * _PACK_BIAS) - _PACK_BIAS
    return qs, rs


class Mode(str, enum.Enum):
    WALK = "WALK"
    BICYCLE = "BICYCLE"
    CAR = "CAR"
    TRAIN = "TRAIN"
    OTHER = "OTHER"  # only valid as a trip label, never on a link


LINK_MODES = (Mode.WALK, Mode.BICYCLE, Mode.CAR, Mode.TRAIN)


@dataclass(frozen=True)
class Link:
    link_id: str
    from_node: str
    to_node: str
    length_m: float
    modes: frozenset[Mode]
    road_class: str
    speed_mps: float


@dataclass
class TransportGraph:
    """Directed multimodal graph; bidirectional roads are two directed links.

    Immutable after construction; safe for concurrent reads.
    """

    nodes: dict[str, GeoPoint]
    links: dict[str, Link]
    adjacency: dict[str, tuple[str, ...]] = field(init=False)
    projection: Projection = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.projection is None:
            lats = [p.lat for p in self.nodes.values()]
            lons = [p.lon for p in self.nodes.values()]
            origin = GeoPoint(float(np.mean(lats)), float(np.mean(lons)))
            self.projection = Projection(origin)
        self._validate()
        adj: dict[str, list[str]] = {n: [] for n in self.nodes}
        for lid in sorted(self.links):
            adj[self.links[lid].from_node].append(lid)
        self.adjacency = {n: tuple(v) for n, v in adj.items()}
        self._node_ids = sorted(self.nodes)
        self._node_pos = {n: i for i, n in enumerate(self._node_ids)}
        xs, ys = [], []
        for n in self._node_ids:
            xy = self.projection.project(self.nodes[n])
            xs.append(xy.x)
            ys.append(xy.y)
        self._node_xy = np.column_stack([np.array(xs), np.array(ys)])

    def _validate(self):
        for lid, link in self.links.items():
            if link.from_node not in self.nodes:
                raise GraphIntegrityError(f"link {lid}: unknown from node {link.from_node}")
            if link.to_node not in self.nodes:
                raise GraphIntegrityError(f"link {lid}: unknown to node {link.to_node}")
            if not link.modes or not link.modes <= set(LINK_MODES):
                raise GraphIntegrityError(f"link {lid}: invalid mode set {link.modes}")
            d = self.straight_line_m(link.from_node, link.to_node)
            if link.length_m < d * 0.999:
                raise GraphIntegrityError(
                    f"link {lid}: length {link.length_m:.1f} m shorter than straight line {d:.1f} m"
                )
            if link.speed_mps <= 0:
                raise GraphIntegrityError(f"link {lid}: nonpositive speed")

    # --- indexed access used by routing and aggregation ---

    @property
    def node_ids(self) -> list[str]:
        return self._node_ids

    def node_index(self, node_id: str) -> int:
        return self._node_pos[node_id]

    def node_xy(self, node_id: str) -> LocalXY:
        x, y = self._node_xy[self._node_pos[node_id]]
        return LocalXY(float(x), float(y))

    def node_xy_matrix(self) -> np.ndarray:
        return self._node_xy

    def straight_line_m(self, a: str, b: str) -> float:
        pa, pb = self.nodes[a], self.nodes[b]
        ax = (pa.lon - pb.lon) * math.cos(math.radians((pa.lat + pb.lat) / 2)) * METERS_PER_DEGREE
        ay = (pa.lat - pb.lat) * METERS_PER_DEGREE
        return math.hypot(ax, ay)

    def links_with_mode(self, mode: Mode) -> list[Link]:
        return [l for l in self.links.values() if mode in l.modes]


def _parse_modes(text: str) -> frozenset[Mode]:
    modes = frozenset(Mode(m) for m in text.split("|") if m)
    if not modes:
        raise ValueError("empty mode set")
    if Mode.OTHER in modes:
        raise ValueError("OTHER is not a link mode")
    return modes


def load_graph(path: str | Path, projection: Projection | None = None) -> TransportGraph:
    """Load a graph from `<path>/nodes.csv` and `<path>/links.csv`.

    nodes.csv: node_id,lat,lon
    links.csv: link_id,from,to,length_m,modes,class,speed_mps
    with modes a |-separated subset of WALK|BICYCLE|CAR|TRAIN.
    """
    path = Path(path)
    nodes: dict[str, GeoPoint] = {}
    nodes_file = path / "nodes.csv"
    with open(nodes_file, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["node_id", "lat", "lon"]:
            raise GraphParseError(str(nodes_file), 1, f"bad header {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                node_id, lat, lon = row
                nodes[node_id] = GeoPoint(float(lat), float(lon))
            except (ValueError, GeoError) as exc:
                raise GraphParseError(str(nodes_file), line_no, str(exc)) from exc

    links: dict[str, Link] = {}
    links_file = path / "links.csv"
    expected = ["link_id", "from", "to", "length_m", "modes", "class", "speed_mps"]
    with open(links_file, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != expected:
            raise GraphParseError(str(links_file), 1, f"bad header {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                link_id, from_n, to_n, length_m, modes, road_class, speed = row
                links[link_id] = Link(
                    link_id=link_id,
                    from_node=from_n,
                    to_node=to_n,
                    length_m=float(length_m),
                    modes=_parse_modes(modes),
                    road_class=road_class,
                    speed_mps=float(speed),
                )
            except ValueError as exc:
                raise GraphParseError(str(links_file), line_no, str(exc)) from exc

    return TransportGraph(nodes=nodes, links=links, projection=projection)


def save_graph(graph: TransportGraph, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "nodes.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["node_id", "lat", "lon"])
        for node_id in sorted(graph.nodes):
            p = graph.nodes[node_id]
            writer.writerow([node_id, f"{p.lat:.8f}", f"{p.lon:.8f}"])
    with open(path / "links.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["link_id", "from", "to", "length_m", "modes", "class", "speed_mps"])
        for link_id in sorted(graph.links):
            l = graph.links[link_id]
            modes = "|".join(sorted(m.value for m in l.modes))
            writer.writerow(
                [link_id, l.from_node, l.to_node, f"{l.length_m:.3f}", modes, l.road_class, f"{l.speed_mps:.3f}"]
            )
