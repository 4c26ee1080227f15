"""Command-line front end: metrotwin <command> --config <file> --seed N --out DIR.

Commands chain through an artifact directory: synth writes raw data and the
city; ingest resamples it into day tables; vocab/train/matchdb build the
model-side artifacts; predict/simulate/evaluate/serve consume them.
Exit codes: 0 ok, 2 configuration error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from datetime import date
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _load_toml(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        import tomllib  # python >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as f:
        return tomllib.load(f)


def _experiment_config(options: dict):
    from .experiment import ExperimentConfig

    cfg = ExperimentConfig()
    for key, value in options.items():
        if not hasattr(cfg, key):
            raise KeyError(f"unknown config key: {key}")
        if key == "start_day":
            value = date.fromisoformat(value)
        if isinstance(getattr(cfg, key), tuple):
            value = tuple(value)
        setattr(cfg, key, value)
    cfg.__post_init__() if hasattr(cfg, "__post_init__") else None
    return cfg


def _meta(out: Path) -> dict:
    return json.loads((out / "meta.json").read_text())


def cmd_synth(args) -> int:
    from .experiment import ExperimentConfig
    from .geo import save_graph
    from .synth import (
        CityRuntime, CitySpec, default_calendar, generate_city,
        generate_population, simulate_day, write_lines_csv, write_raw_csv,
        write_stations_csv,
    )

    cfg = _experiment_config(_load_toml(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    city = generate_city(CitySpec(grid_n=cfg.city_n, seed=args.seed))
    runtime = CityRuntime(city)
    population = generate_population(cfg.n_agents, city, seed=args.seed)
    calendar, train_days, test_days = default_calendar(
        start=cfg.start_day, n_train_days=cfg.n_train_days, n_test_days=cfg.n_test_days
    )
    save_graph(city.graph, out / "graph")
    write_lines_csv(city, out / "lines.csv")
    write_stations_csv(city, out / "stations.csv")
    calendar.save_csv(out / "calendar.csv")
    (out / "users.csv").write_text("\n".join(a.agent_id for a in population))
    for day in train_days + test_days:
        sim = simulate_day(
            population, runtime, calendar.regime(day), day,
            seed=args.seed, noise_sigma_m=cfg.noise_sigma_m,
        )
        write_raw_csv(sim, out / f"raw_{day.isoformat()}.csv")
    meta = {
        "seed": args.seed,
        "config": {k: (v.isoformat() if isinstance(v, date) else v) for k, v in asdict(cfg).items()},
        "train_days": [d.isoformat() for d in train_days],
        "test_days": [d.isoformat() for d in test_days],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    print(f"synth: wrote {len(train_days) + len(test_days)} days to {out}")
    return EXIT_OK


def _day_tables(out: Path, cfg, days: list[str], graph):
    from .ingest import CellIndexer, parse_raw, resample_day_arrays

    indexer = CellIndexer(graph.projection, cfg.resolution)
    users = (out / "users.csv").read_text().splitlines()
    user_pos = {u: i for i, u in enumerate(users)}
    for day_s in days:
        day = date.fromisoformat(day_s)
        result = parse_raw(out / f"raw_{day_s}.csv")
        codes = np.array([user_pos[r.user_id] for r in result.records], dtype=np.int64)
        ts = np.array([r.timestamp for r in result.records])
        lats = np.array([r.position.lat for r in result.records])
        lons = np.array([r.position.lon for r in result.records])
        keys, xy = resample_day_arrays(codes, ts, lats, lons, len(users), day, indexer)
        yield day, keys, xy, len(result.rejects)


def cmd_ingest(args) -> int:
    from .geo import load_graph

    out = Path(args.out)
    meta = _meta(out)
    cfg = _experiment_config(meta["config"])
    graph = load_graph(out / "graph")
    total_rejects = 0
    for day, keys, xy, rejects in _day_tables(out, cfg, meta["train_days"] + meta["test_days"], graph):
        np.savez_compressed(out / f"slots_{day.isoformat()}.npz", keys=keys, positions=xy)
        total_rejects += rejects
    print(f"ingest: resampled {len(meta['train_days']) + len(meta['test_days'])} days, {total_rejects} rejects")
    return EXIT_OK


def cmd_vocab(args) -> int:
    from collections import Counter

    from .geo import HexCellId, load_graph, unpack_cells
    from .ingest import build_vocabulary

    out = Path(args.out)
    meta = _meta(out)
    cfg = _experiment_config(meta["config"])
    counts: Counter = Counter()
    for day_s in meta["train_days"]:
        with np.load(out / f"slots_{day_s}.npz") as z:
            keys = z["keys"]
        pop = keys[keys >= 0]
        uniq, ucounts = np.unique(pop, return_counts=True)
        qs, rs = unpack_cells(uniq)
        for q, r, c in zip(qs, rs, ucounts):
            counts[HexCellId(int(q), int(r), cfg.resolution)] += int(c)
    vocab = build_vocabulary(
        counts, n_top=cfg.n_top, n_sampled=cfg.n_sampled, seed=args.seed, resolution=cfg.resolution
    )
    vocab.save_csv(out / "vocabulary.csv")
    print(f"vocab: {vocab.n_clusters} clusters from {len(counts)} cells")
    return EXIT_OK


def _cluster_tables(out: Path, meta, cfg):
    from .ingest import ClusterVocabulary, cluster_matrix_from_keys

    vocab = ClusterVocabulary.load_csv(out / "vocabulary.csv")
    tables = {}
    for day_s in meta["train_days"] + meta["test_days"]:
        with np.load(out / f"slots_{day_s}.npz") as z:
            keys, xy = z["keys"], z["positions"]
        tables[date.fromisoformat(day_s)] = (
            cluster_matrix_from_keys(keys, vocab).astype(np.int16),
            xy,
        )
    return vocab, tables


def cmd_train(args) -> int:
    from .predictor import Adam, TrainConfig, build_model, loss_and_gradients, save_checkpoint
    from .experiment import MODEL_VARIANTS
    import hashlib

    out = Path(args.out)
    meta = _meta(out)
    cfg = _experiment_config(meta["config"])
    vocab, tables = _cluster_tables(out, meta, cfg)
    variants = args.models.split(",") if args.models else list(MODEL_VARIANTS)
    train_days = [date.fromisoformat(d) for d in meta["train_days"]]
    dT = cfg.window
    from .experiment import _hour_slots

    slots = _hour_slots(cfg.train_hours, cfg.slot_seconds, cfg.train_origin_stride)
    for variant in variants:
        pcfg = cfg.predictor_config(vocab.n_clusters, variant)
        model = build_model(pcfg, seed=args.seed)
        tag = int.from_bytes(hashlib.sha256(variant.encode()).digest()[:4], "little")
        rng = np.random.default_rng([args.seed, tag])
        opt = Adam(model.params, TrainConfig(learning_rate=cfg.learning_rate, seed=args.seed))
        groups = [(d, int(s)) for d in train_days for s in slots]
        for _epoch in range(cfg.epochs):
            for gi in rng.permutation(len(groups))[: cfg.groups_per_epoch]:
                day, t = groups[gi]
                clusters, _ = tables[day]
                targets = clusters[:, t + dT]
                valid = np.flatnonzero(targets >= 0)
                if len(valid) == 0:
                    continue
                pick = valid if len(valid) <= pcfg.batch_size else rng.choice(
                    valid, size=pcfg.batch_size, replace=False
                )
                windows = clusters[pick, t - dT : t].astype(np.int64)
                times = np.ascontiguousarray(np.broadcast_to(np.arange(t - dT, t), windows.shape))
                dow = np.full(len(pick), day.weekday()) if pcfg.day_embed_dim else None
                _, grads = loss_and_gradients(model, windows, times, targets[pick].astype(np.int64), dow)
                opt.step(model.params, grads)
        save_checkpoint(model, out / f"model_{variant}.npz")
        print(f"train: saved model_{variant}.npz")
    return EXIT_OK


def cmd_matchdb(args) -> int:
    from .geo import load_graph
    from .ingest import parse_raw
    from .mapmatch import (
        MatchConfig, ModeRouter, RailProximity, Track, process_user_day,
        write_node_trajectories,
    )
    from .trajdb import DbConfig, TrajectoryDatabase

    out = Path(args.out)
    meta = _meta(out)
    cfg = _experiment_config(meta["config"])
    graph = load_graph(out / "graph")
    router = ModeRouter(graph)
    rail = RailProximity(graph)
    _, tables = _cluster_tables(out, meta, cfg)
    users = (out / "users.csv").read_text().splitlines()
    rng = np.random.default_rng([args.seed, 0xD5])
    db_users = set(
        rng.choice(len(users), size=min(cfg.db_users, len(users)), replace=False).tolist()
    )
    all_trajs = []
    lookup = {}
    for day_s in meta["train_days"]:
        day = date.fromisoformat(day_s)
        result = parse_raw(out / f"raw_{day_s}.csv")
        per_user: dict[str, list] = {}
        for rec in result.records:
            per_user.setdefault(rec.user_id, []).append(rec)
        for ui in sorted(db_users):
            recs = per_user.get(users[ui])
            if not recs:
                continue
            track = Track.from_records(recs, graph.projection)
            all_trajs.extend(process_user_day(track, router, day, MatchConfig(), rail).trajectories)
            lookup[(users[ui], day)] = tables[day][0][ui]
    write_node_trajectories(all_trajs, out / "node_trajectories.csv")
    db_cfg = DbConfig(
        delta_t_slots=cfg.window, slot_seconds=cfg.slot_seconds,
        stride_slots=cfg.db_stride_slots, alpha_m=cfg.alpha_m,
    )
    db = TrajectoryDatabase.build(all_trajs, lookup, db_cfg, graph)
    db.persist(out / "db")
    print(f"matchdb: {db.total_slices()} slices in {len(db.shard_ids())} shards")
    return EXIT_OK


def _write_day_tables_for_service(out: Path, meta, cfg) -> None:
    from .service import save_day_table

    _, tables = _cluster_tables(out, meta, cfg)
    for day_s in meta["test_days"]:
        day = date.fromisoformat(day_s)
        clusters, xy = tables[day]
        save_day_table(out / f"table_{day_s}.npz", clusters, xy)


def _service_artifacts(out: Path):
    from .service import ServiceArtifacts

    meta = _meta(out)
    cfg = _experiment_config(meta["config"])
    if not list(out.glob("table_*.npz")):
        _write_day_tables_for_service(out, meta, cfg)
    arts = ServiceArtifacts.load(out)
    arts.engine_config.k_neighbors = cfg.k_neighbors
    arts.engine_config.beta = cfg.beta
    return arts


def cmd_predict(args, simulate: bool = False) -> int:
    from .engine import EngineConfig, ScenarioFilter, predict_round, simulate_with_filter
    from .service import ServiceArtifacts

    out = Path(args.out)
    arts = _service_artifacts(out)
    day = date.fromisoformat(args.day) if args.day else sorted(arts.tables)[0]
    table = arts.tables[day]
    dT = arts.model.config.window
    clusters = table["clusters"][:, args.slot - dT : args.slot].astype(np.int64)
    times = np.ascontiguousarray(np.broadcast_to(np.arange(args.slot - dT, args.slot), clusters.shape))
    from .engine import RoundInput

    ri = RoundInput(
        day=day, slot=args.slot, user_ids=arts.user_ids,
        window_clusters=clusters, window_times=times,
        positions_xy=table["positions"][:, args.slot - 1, :].astype(np.float64),
    )
    cfg = EngineConfig(samples_per_user=args.samples, k_neighbors=arts.engine_config.k_neighbors,
                       beta=arts.engine_config.beta)
    if simulate:
        excluded = set(args.exclude_links.split(",")) if args.exclude_links else set()
        if args.exclude_line:
            excluded.update(arts.lines.get(args.exclude_line, []))
        result = simulate_with_filter(
            ri, ScenarioFilter(excluded_links=frozenset(excluded)),
            arts.model, arts.db, cfg, master_seed=args.seed, graph=arts.graph,
        )
    else:
        result = predict_round(ri, arts.model, arts.db, cfg, master_seed=args.seed)
    rows = []
    for pred in result.predictions:
        rows.append(
            {
                "user_id": pred.user_id,
                "sample": pred.sample_index,
                "cluster": pred.provenance.cluster,
                "source_user": pred.provenance.source_key.user,
                "epsilon": pred.provenance.epsilon,
                "nodes": [arts.db.node_table[i] for i in pred.node_idx],
                "times": [float(t) for t in pred.times],
            }
        )
    target = out / (args.dump or ("simulation.json" if simulate else "prediction.json"))
    target.write_text(json.dumps({"day": day.isoformat(), "slot": args.slot,
                                  "timing": result.timing.as_dict(), "predictions": rows}))
    print(f"{'simulate' if simulate else 'predict'}: {len(rows)} trajectories -> {target}")
    print(f"timing: {result.timing.as_dict()}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .experiment import ExperimentConfig, run_experiment

    cfg = _experiment_config(_load_toml(args.config))
    against = args.against.split(",") if args.against else []
    report, _ = run_experiment(cfg, seed=args.seed, out_dir=args.out)
    print(json.dumps(report.to_dict(), indent=2, default=str))
    if against:
        print(f"baselines compared: {against}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_app

    out = Path(args.out)
    arts = _service_artifacts(out)
    app = build_app(arts)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="metrotwin", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="artifact directory")

    for name in ("synth", "ingest", "vocab", "matchdb"):
        common(sub.add_parser(name))
    p_train = sub.add_parser("train")
    common(p_train)
    p_train.add_argument("--models", default=None, help="comma-separated variant list")
    for name, simulate in (("predict", False), ("simulate", True)):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--day", default=None)
        p.add_argument("--slot", type=int, required=True)
        p.add_argument("--samples", type=int, default=1)
        p.add_argument("--dump", default=None)
        if simulate:
            p.add_argument("--exclude-links", default=None)
            p.add_argument("--exclude-line", default=None)
    p_eval = sub.add_parser("evaluate")
    common(p_eval)
    p_eval.add_argument("--against", default="persistence,seasonal")
    p_serve = sub.add_parser("serve")
    common(p_serve)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8321)

    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "ingest": cmd_ingest,
        "vocab": cmd_vocab,
        "train": cmd_train,
        "matchdb": cmd_matchdb,
        "predict": lambda a: cmd_predict(a, simulate=False),
        "simulate": lambda a: cmd_predict(a, simulate=True),
        "evaluate": cmd_evaluate,
        "serve": cmd_serve,
    }
    try:
        return handlers[args.command](args)
    except (KeyError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IOError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
