"""HTTP service exposing prediction rounds, what-if simulation, and aggregates.

The service is stateless beyond an LRU cache of prediction sets; every number
a client renders is traceable to one of these endpoints. Artifacts (graph,
vocabulary, model checkpoint, trajectory database, day tables) are loaded
once at startup from an artifact directory.
"""

from __future__ import annotations

import csv
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query
from pydantic import BaseModel

from .engine import (
    EngineConfig,
    PredictionSet,
    RoundInput,
    ScenarioFilter,
    predict_round,
    simulate_with_filter,
    station_series,
    link_volume_series,
)
from .geo import Mode, TransportGraph, load_graph
from .ingest import day_start_epoch
from .predictor import Model, load_checkpoint
from .trajdb import TrajectoryDatabase


@dataclass
class ServiceArtifacts:
    graph: TransportGraph
    model: Model
    db: TrajectoryDatabase
    tables: dict[date, dict]                  # day -> {clusters, positions}
    user_ids: list[str]
    stations: dict[str, list[str]]            # station_id -> node ids
    lines: dict[str, list[str]]               # line_id -> link ids
    engine_config: EngineConfig = field(default_factory=EngineConfig)
    labels: dict = field(default_factory=dict)

    @classmethod
    def load(cls, root: str | Path) -> "ServiceArtifacts":
        root = Path(root)
        graph = load_graph(root / "graph")
        model = load_checkpoint(root / "model_ours.npz")
        db = TrajectoryDatabase.load(root / "db")
        stations: dict[str, list[str]] = {}
        with open(root / "stations.csv", newline="") as f:
            reader = csv.reader(f)
            next(reader)
            for row in reader:
                if row:
                    stations.setdefault(row[0], []).append(row[1])
        lines: dict[str, list[str]] = {}
        with open(root / "lines.csv", newline="") as f:
            reader = csv.reader(f)
            next(reader)
            for row in reader:
                if row:
                    lines.setdefault(row[0], []).append(row[1])
        users = (root / "users.csv").read_text().splitlines()
        tables: dict[date, dict] = {}
        for f in sorted(root.glob("table_*.npz")):
            day = date.fromisoformat(f.stem.split("_", 1)[1])
            with np.load(f) as z:
                tables[day] = {"clusters": z["clusters"], "positions": z["positions"]}
        labels = {}
        meta = root / "meta.json"
        if meta.exists():
            labels = json.loads(meta.read_text())
        return cls(
            graph=graph, model=model, db=db, tables=tables, user_ids=users,
            stations=stations, lines=lines, labels=labels,
        )


def save_day_table(path: Path, clusters: np.ndarray, positions: np.ndarray) -> None:
    np.savez_compressed(path, clusters=clusters, positions=positions)


class PredictBody(BaseModel):
    slot: int
    day: str | None = None
    seed: int = 0
    samples: int = 1


class SimulateBody(PredictBody):
    excluded_links: list[str] = []
    excluded_line: str | None = None


def build_app(artifacts: ServiceArtifacts, cache_size: int = 16) -> FastAPI:
    app = FastAPI(title="metrotwin")
    cache: OrderedDict[str, PredictionSet] = OrderedDict()
    counter = {"n": 0}
    last_timing: dict = {}

    def _store(ps: PredictionSet, kind: str) -> str:
        counter["n"] += 1
        set_id = f"{kind}-{counter['n']:04d}"
        cache[set_id] = ps
        while len(cache) > cache_size:
            cache.popitem(last=False)
        return set_id

    def _round_input(body: PredictBody) -> RoundInput:
        if not artifacts.tables:
            raise HTTPException(status_code=409, detail="no day tables loaded")
        day = date.fromisoformat(body.day) if body.day else sorted(artifacts.tables)[0]
        table = artifacts.tables.get(day)
        if table is None:
            raise HTTPException(status_code=404, detail=f"no table for day {day}")
        dT = artifacts.model.config.window
        T = artifacts.model.config.n_time_slots
        if not dT <= body.slot < T:
            raise HTTPException(status_code=422, detail=f"slot must be in [{dT}, {T})")
        clusters = table["clusters"][:, body.slot - dT : body.slot].astype(np.int64)
        times = np.ascontiguousarray(
            np.broadcast_to(np.arange(body.slot - dT, body.slot), clusters.shape)
        )
        positions = table["positions"][:, body.slot - 1, :].astype(np.float64)
        return RoundInput(
            day=day, slot=body.slot, user_ids=artifacts.user_ids,
            window_clusters=clusters, window_times=times, positions_xy=positions,
        )

    def _get_set(set_id: str) -> PredictionSet:
        ps = cache.get(set_id)
        if ps is None:
            raise HTTPException(status_code=404, detail=f"unknown prediction set {set_id}")
        return ps

    @app.post("/predict")
    def predict(body: PredictBody):
        ri = _round_input(body)
        cfg = EngineConfig(
            k_neighbors=artifacts.engine_config.k_neighbors,
            beta=artifacts.engine_config.beta,
            samples_per_user=body.samples,
        )
        result = predict_round(ri, artifacts.model, artifacts.db, cfg, master_seed=body.seed)
        last_timing.clear()
        last_timing.update(result.timing.as_dict())
        return {"set_id": _store(result, "pred"), "predictions": len(result.predictions),
                "timing": result.timing.as_dict()}

    @app.post("/simulate")
    def simulate(body: SimulateBody):
        ri = _round_input(body)
        excluded = set(body.excluded_links)
        if body.excluded_line is not None:
            links = artifacts.lines.get(body.excluded_line)
            if links is None:
                raise HTTPException(status_code=404, detail=f"unknown line {body.excluded_line}")
            excluded.update(links)
        scenario = ScenarioFilter(excluded_links=frozenset(excluded))
        cfg = EngineConfig(
            k_neighbors=artifacts.engine_config.k_neighbors,
            beta=artifacts.engine_config.beta,
            samples_per_user=body.samples,
        )
        result = simulate_with_filter(
            ri, scenario, artifacts.model, artifacts.db, cfg,
            master_seed=body.seed, graph=artifacts.graph,
        )
        last_timing.clear()
        last_timing.update(result.timing.as_dict())
        return {"set_id": _store(result, "sim"), "predictions": len(result.predictions),
                "timing": result.timing.as_dict()}

    @app.get("/aggregate")
    def aggregate(
        set: str = Query(...),
        kind: str = Query(...),
        id: str = Query(...),
        from_t: float = Query(None, alias="from"),
        to_t: float = Query(None, alias="to"),
        bin_s: float = Query(900.0),
        line: str | None = Query(None),
        from_line: str | None = Query(None),
        to_line: str | None = Query(None),
    ):
        ps = _get_set(set)
        slot_s = artifacts.db.config.slot_seconds
        horizon = artifacts.db.config.delta_t_slots * slot_s
        t0 = day_start_epoch(ps.day) + ps.slot * slot_s
        lo = from_t if from_t is not None else t0
        hi = to_t if to_t is not None else t0 + horizon
        if hi <= lo:
            raise HTTPException(status_code=422, detail="empty window")
        edges = np.arange(lo, hi + 1e-9, bin_s)
        bins = [(float(a), float(b)) for a, b in zip(edges, edges[1:])]
        norm = max(ps.samples_per_user, 1)

        def line_links(name):
            if name is None:
                return None
            links = artifacts.lines.get(name)
            if links is None:
                raise HTTPException(status_code=404, detail=f"unknown line {name}")
            return links

        if kind == "link":
            if id not in artifacts.db.link_table:
                raise HTTPException(status_code=404, detail=f"unknown link {id}")
            values = [v / norm for v in link_volume_series(ps.predictions, id, bins, artifacts.db)]
        elif kind in ("station", "transfer"):
            nodes = artifacts.stations.get(id)
            if nodes is None:
                raise HTTPException(status_code=404, detail=f"unknown station {id}")
            if kind == "station":
                values = [
                    v / norm
                    for v in station_series(
                        ps.predictions, nodes, bins, artifacts.db,
                        line_links=line_links(line), kind="alightings",
                    )
                ]
            else:
                from .engine import aggregate_station

                values = []
                for b in bins:
                    c = aggregate_station(
                        ps.predictions, nodes, b, artifacts.db,
                        transfer_from=line_links(from_line), transfer_to=line_links(to_line),
                    )
                    values.append(c.transfers / norm)
        else:
            raise HTTPException(status_code=422, detail=f"unknown kind {kind}")
        return {"set_id": set, "kind": kind, "id": id,
                "bins": [b[0] for b in bins], "bin_s": bin_s, "values": values}

    @app.get("/trajectories")
    def trajectories(
        set: str = Query(...),
        bbox: str | None = Query(None),
        limit: int = Query(100),
    ):
        ps = _get_set(set)
        node_lat = np.array([artifacts.graph.nodes[n].lat for n in artifacts.db.node_table])
        node_lon = np.array([artifacts.graph.nodes[n].lon for n in artifacts.db.node_table])
        box = None
        if bbox:
            try:
                min_lon, min_lat, max_lon, max_lat = (float(v) for v in bbox.split(","))
                box = (min_lon, min_lat, max_lon, max_lat)
            except ValueError:
                raise HTTPException(status_code=422, detail="bbox must be minLon,minLat,maxLon,maxLat")
        out = []
        for pred in ps.predictions:
            lats = node_lat[pred.node_idx]
            lons = node_lon[pred.node_idx]
            if box is not None:
                inside = (
                    (lons >= box[0]) & (lats >= box[1]) & (lons <= box[2]) & (lats <= box[3])
                )
                if not inside.any():
                    continue
            out.append(
                {
                    "user_id": pred.user_id,
                    "sample": pred.sample_index,
                    "points": [
                        [float(t), float(la), float(lo)]
                        for t, la, lo in zip(pred.times, lats, lons)
                    ],
                }
            )
            if len(out) >= limit:
                break
        return {"set_id": set, "count": len(out), "trajectories": out}

    @app.get("/status")
    def status():
        return {
            "users": len(artifacts.user_ids),
            "db_slices": artifacts.db.total_slices(),
            "shards": len(artifacts.db.shard_ids()),
            "days": [d.isoformat() for d in sorted(artifacts.tables)],
            "stations": sorted(artifacts.stations),
            "lines": sorted(artifacts.lines),
            "model": artifacts.model.config.to_dict(),
            "cached_sets": list(cache),
            "last_round_timing": dict(last_timing),
            "labels": artifacts.labels,
        }

    return app
