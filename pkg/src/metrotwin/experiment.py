"""End-to-end experiment orchestration on the synthetic city.

Pipeline: simulate raw GPS -> forward-fill and hex-index -> cluster
vocabulary -> train the predictor family -> map-match a database subset ->
build the retrieval database -> run prediction rounds over test days ->
aggregate against ground truth.

Training batches are drawn within one (day, slot) group so the mini-batch
pool approximates the crowd context of that moment; evaluation pools the
context over the evaluation population of each origin.
"""

from __future__ import annotations

import hashlib
import json
import time
from collections import Counter
from dataclasses import dataclass, field, asdict
from datetime import date
from pathlib import Path
from typing import Iterable

import numpy as np

from .engine import EngineConfig, PredictionSet, RoundInput, ScenarioFilter, predict_round, station_series
from .geo import GeoPoint, HexCellId, Mode, Projection, unpack_cells
from .ingest import (
    CellIndexer,
    ClusterVocabulary,
    build_vocabulary,
    day_start_epoch,
    resample_day_arrays,
)
from .mapmatch import MatchConfig, ModeRouter, NodeTrajectory, RailProximity, Track, process_user_day
from .metrics import MetricReport, metric_mape, rolling_forecast
from .predictor import (
    Adam,
    ContextMode,
    Model,
    Pooling,
    PredictorConfig,
    TrainConfig,
    TrainingDivergedError,
    _context_forward,
    _forward_individual,
    _head_forward,
    _softmax,
    baseline_conditional_config,
    baseline_gru_config,
    build_model,
    context_pooled_config,
    cross_entropy,
    loss_and_gradients,
    pool_crowd,
    precompute_context,
    predict_distribution,
)
from .synth import (
    CityRuntime,
    CitySpec,
    Regime,
    RegimeCalendar,
    SimDay,
    default_calendar,
    generate_city,
    generate_population,
    simulate_day,
)
from .trajdb import MODE_TABLE, DbConfig, TrajectoryDatabase

MODEL_VARIANTS = ("ours", "context_mean", "context_max", "conditional", "gru")


@dataclass
class ExperimentConfig:
    # data scale (the default synthetic configuration)
    city_n: int = 32
    n_agents: int = 10_000
    n_train_days: int = 28
    n_test_days: int = 7
    start_day: date = date(2024, 6, 3)
    noise_sigma_m: float = 20.0

    # vocabulary
    n_top: int = 80
    n_sampled: int = 80
    resolution: int = 8

    # predictor (desk-scale dims; the library defaults mirror the full scale)
    window: int = 12
    slot_seconds: int = 300
    cluster_embed_dim: int = 32
    time_embed_dim: int = 16
    individual_layers: int = 1
    individual_hidden: int = 64
    context_hidden: int = 32
    head_hidden: int = 96
    batch_size: int = 2048
    dtype: str = "float32"

    # training
    epochs: int = 2
    groups_per_epoch: int = 150
    learning_rate: float = 2e-3
    train_hours: tuple[float, float] = (6.0, 21.0)
    train_origin_stride: int = 3

    # evaluation
    eval_hours: tuple[float, float] = (6.0, 21.0)
    eval_origin_stride: int = 6
    eval_users: int = 1536

    # retrieval database
    db_users: int = 1000
    db_stride_slots: int = 3
    alpha_m: float = 2000.0

    # online engine
    k_neighbors: int = 10
    beta: float = 0.005
    samples_per_user: int = 1
    round_hours: tuple[float, float] = (6.0, 22.0)

    def n_slots(self) -> int:
        return 86400 // self.slot_seconds

    def predictor_config(self, n_clusters: int, variant: str) -> PredictorConfig:
        base = PredictorConfig(
            n_clusters=n_clusters,
            window=self.window,
            slot_seconds=self.slot_seconds,
            cluster_embed_dim=self.cluster_embed_dim,
            time_embed_dim=self.time_embed_dim,
            individual_layers=self.individual_layers,
            individual_hidden=self.individual_hidden,
            context_hidden=self.context_hidden,
            head_hidden=self.head_hidden,
            batch_size=self.batch_size,
            pooling=Pooling.MEAN,
            context_mode=ContextMode.RECURRENT,
            dtype=self.dtype,
        )
        if variant == "ours":
            return base
        if variant == "context_mean":
            return context_pooled_config(base, Pooling.MEAN)
        if variant == "context_max":
            return context_pooled_config(base, Pooling.MAX)
        if variant == "gru":
            return baseline_gru_config(base)
        if variant == "conditional":
            return baseline_conditional_config(base, day_embed_dim=8)
        raise ValueError(f"unknown variant {variant}")

    def config_hash(self) -> str:
        payload = {k: (v.isoformat() if isinstance(v, date) else v) for k, v in asdict(self).items()}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class DayTable:
    """Slot-level state of the whole population for one day."""

    day: date
    regime: Regime
    clusters: np.ndarray             # (n_users, T) int16, -1 empty
    positions: np.ndarray | None     # (n_users, T, 2) float32, test days only


@dataclass
class SyntheticDataset:
    config: ExperimentConfig
    seed: int
    city: object
    runtime: CityRuntime
    population: list
    calendar: RegimeCalendar
    train_days: list[date]
    test_days: list[date]
    vocabulary: ClusterVocabulary
    indexer: CellIndexer
    tables: dict[date, DayTable]
    test_sims: dict[date, SimDay]
    matched: dict[date, list[NodeTrajectory]]   # db-subset map-matched output
    matched_cluster_lookup: dict
    db_user_indices: np.ndarray
    user_ids: list[str]

    def n_clusters(self) -> int:
        return self.vocabulary.n_clusters


def _tables_from_days(
    sims: Iterable[SimDay],
    indexer: CellIndexer,
    vocabulary_counts: Counter | None,
) -> list[tuple[SimDay, np.ndarray, np.ndarray]]:
    """Resample each day; optionally accumulate visit counts for the vocabulary."""
    out = []
    for sim in sims:
        keys, xy = resample_day_arrays(
            sim.gps_user, sim.gps_t, sim.gps_lat, sim.gps_lon,
            n_users=len(sim.user_ids), day=sim.day, indexer=indexer,
        )
        if vocabulary_counts is not None:
            pop = keys[keys >= 0]
            uniq, counts = np.unique(pop, return_counts=True)
            qs, rs = unpack_cells(uniq)
            for q, r, c in zip(qs, rs, counts):
                vocabulary_counts[HexCellId(int(q), int(r), indexer.resolution)] += int(c)
        out.append((sim, keys, xy))
    return out


def build_dataset(
    config: ExperimentConfig,
    seed: int,
    with_retrieval: bool = True,
    match_config: MatchConfig | None = None,
) -> SyntheticDataset:
    """Generate the synthetic world for one master seed and preprocess it."""
    city = generate_city(CitySpec(grid_n=config.city_n, seed=seed))
    runtime = CityRuntime(city)
    population = generate_population(config.n_agents, city, seed=seed)
    calendar, train_days, test_days = default_calendar(
        start=config.start_day,
        n_train_days=config.n_train_days,
        n_test_days=config.n_test_days,
    )
    indexer = CellIndexer(city.graph.projection, config.resolution)
    rng = np.random.default_rng([seed, 0xD5])
    db_user_indices = np.sort(
        rng.choice(config.n_agents, size=min(config.db_users, config.n_agents), replace=False)
    )
    user_ids = [a.agent_id for a in population]

    counts: Counter = Counter()
    tables: dict[date, DayTable] = {}
    test_sims: dict[date, SimDay] = {}
    matched: dict[date, list[NodeTrajectory]] = {}
    matched_lookup: dict = {}
    pending: list[tuple[SimDay, np.ndarray, np.ndarray]] = []
    rail = RailProximity(city.graph)
    mcfg = match_config or MatchConfig()
    proj = city.graph.projection

    for day in train_days + test_days:
        regime = calendar.regime(day)
        is_test = day in set(test_days)
        sim = simulate_day(
            population, runtime, regime, day,
            seed=seed, noise_sigma_m=config.noise_sigma_m,
        )
        keys, xy = resample_day_arrays(
            sim.gps_user, sim.gps_t, sim.gps_lat, sim.gps_lon,
            n_users=len(sim.user_ids), day=sim.day, indexer=indexer,
        )
        if not is_test:
            pop = keys[keys >= 0]
            uniq, ucounts = np.unique(pop, return_counts=True)
            qs, rs = unpack_cells(uniq)
            for q, r, c in zip(qs, rs, ucounts):
                counts[HexCellId(int(q), int(r), config.resolution)] += int(c)
        pending.append((sim if is_test else None, keys, xy, day, regime))

        if with_retrieval and not is_test:
            # map-match the database subset while the day's GPS is in memory
            day_matched: list[NodeTrajectory] = []
            for ui in db_user_indices:
                mask = sim.gps_user == ui
                if not mask.any():
                    continue
                xs, ys = proj.project_arrays(sim.gps_lat[mask], sim.gps_lon[mask])
                track = Track.from_arrays(
                    sim.gps_t[mask], xs, ys, user_ids[ui], projection=proj
                )
                result = process_user_day(track, runtime.router, day, mcfg, rail)
                day_matched.extend(result.trajectories)
            matched[day] = day_matched
        if is_test:
            test_sims[day] = sim

    vocabulary = build_vocabulary(
        counts, n_top=config.n_top, n_sampled=config.n_sampled, seed=seed,
        resolution=config.resolution,
    )

    from .ingest import cluster_matrix_from_keys

    for sim, keys, xy, day, regime in pending:
        clusters = cluster_matrix_from_keys(keys, vocabulary).astype(np.int16)
        tables[day] = DayTable(
            day=day,
            regime=regime,
            clusters=clusters,
            positions=xy if sim is not None else None,
        )

    dataset = SyntheticDataset(
        config=config, seed=seed, city=city, runtime=runtime, population=population,
        calendar=calendar, train_days=train_days, test_days=test_days,
        vocabulary=vocabulary, indexer=indexer, tables=tables, test_sims=test_sims,
        matched=matched, matched_cluster_lookup={}, db_user_indices=db_user_indices,
        user_ids=user_ids,
    )
    if with_retrieval:
        lookup = {}
        for day in train_days:
            table = dataset.tables[day]
            for ui in db_user_indices:
                lookup[(user_ids[ui], day)] = table.clusters[ui]
        dataset.matched_cluster_lookup = lookup
    return dataset


# --- training ---------------------------------------------------------------


def _hour_slots(hours: tuple[float, float], slot_seconds: int, stride: int) -> np.ndarray:
    lo = int(hours[0] * 3600 // slot_seconds)
    hi = int(hours[1] * 3600 // slot_seconds)
    return np.arange(lo, hi, stride)


def train_variant(
    dataset: SyntheticDataset,
    variant: str,
    seed: int,
) -> tuple[Model, list[float]]:
    """Train one model variant with (day, slot)-grouped mini-batches."""
    config = dataset.config
    pcfg = config.predictor_config(dataset.n_clusters(), variant)
    model = build_model(pcfg, seed=seed)
    variant_tag = int.from_bytes(hashlib.sha256(variant.encode()).digest()[:4], "little")
    rng = np.random.default_rng([seed, variant_tag])
    opt = Adam(model.params, TrainConfig(learning_rate=config.learning_rate, seed=seed))

    slots = _hour_slots(config.train_hours, config.slot_seconds, config.train_origin_stride)
    groups = [(day, int(s)) for day in dataset.train_days for s in slots]
    dT = config.window
    losses: list[float] = []
    for _epoch in range(config.epochs):
        order = rng.permutation(len(groups))[: config.groups_per_epoch]
        for gi in order:
            day, t = groups[gi]
            table = dataset.tables[day]
            targets = table.clusters[:, t + dT]
            valid = np.flatnonzero(targets >= 0)
            if len(valid) == 0:
                continue
            pick = valid if len(valid) <= pcfg.batch_size else rng.choice(
                valid, size=pcfg.batch_size, replace=False
            )
            windows = table.clusters[pick, t - dT : t].astype(np.int64)
            times = np.broadcast_to(np.arange(t - dT, t), windows.shape)
            dow = None
            if pcfg.day_embed_dim > 0:
                dow = np.full(len(pick), day.weekday(), dtype=np.int64)
            loss, grads = loss_and_gradients(
                model, windows, np.ascontiguousarray(times), targets[pick].astype(np.int64), dow
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(_epoch)
            opt.step(model.params, grads)
            losses.append(loss)
    return model, losses


def _batch_probs(model: Model, windows: np.ndarray, times: np.ndarray, dow: int | None) -> np.ndarray:
    """One shared encoder pass serving both the pooled context and the heads."""
    states_per_layer, _, _, _ = _forward_individual(model, windows, times)
    top = states_per_layer[-1]
    feats = [top[:, -1, :]]
    cfg = model.config
    if cfg.context_mode != ContextMode.NONE:
        phi = pool_crowd(top, cfg.pooling)
        if cfg.context_mode == ContextMode.POOLED:
            ctx_feat = phi[-1]
        else:
            ctx_states, _ = _context_forward(model, phi)
            ctx_feat = ctx_states[0, -1, :]
        feats.append(np.broadcast_to(ctx_feat, (top.shape[0], ctx_feat.shape[0])))
    if cfg.day_embed_dim > 0:
        feats.append(model.params["embed_day"][np.full(top.shape[0], dow)])
    logits, _ = _head_forward(model, np.concatenate(feats, axis=1))
    return _softmax(logits)


def evaluate_variant(
    dataset: SyntheticDataset,
    model: Model,
    days: list[date] | None = None,
    regime_filter: Regime | None = None,
) -> float:
    """Test cross entropy over evaluation origins.

    The crowd context of an origin is pooled over that origin's evaluation
    population (the same examples for every model variant).
    """
    config = dataset.config
    days = days if days is not None else dataset.test_days
    slots = _hour_slots(config.eval_hours, config.slot_seconds, config.eval_origin_stride)
    dT = config.window
    rng = np.random.default_rng([dataset.seed, 0xE7A1])
    total, n = 0.0, 0
    for day in days:
        table = dataset.tables[day]
        if regime_filter is not None and table.regime != regime_filter:
            continue
        for t in slots:
            targets = table.clusters[:, t + dT]
            valid = np.flatnonzero(targets >= 0)
            if len(valid) == 0:
                continue
            pick = valid if len(valid) <= config.eval_users else valid[
                rng.choice(len(valid), size=config.eval_users, replace=False)
            ]
            windows = table.clusters[pick, t - dT : t].astype(np.int64)
            times = np.ascontiguousarray(np.broadcast_to(np.arange(t - dT, t), windows.shape))
            dow = day.weekday() if model.config.day_embed_dim > 0 else None
            probs = _batch_probs(model, windows, times, dow)
            total += cross_entropy(probs, targets[pick].astype(np.int64)) * len(pick)
            n += len(pick)
    if n == 0:
        raise ValueError("no evaluation examples matched the filter")
    return total / n


def train_all_variants(
    dataset: SyntheticDataset, seed: int, variants: Iterable[str] = MODEL_VARIANTS
) -> dict[str, Model]:
    return {v: train_variant(dataset, v, seed)[0] for v in variants}


# --- retrieval database and rounds -------------------------------------------


def build_database(dataset: SyntheticDataset) -> TrajectoryDatabase:
    config = dataset.config
    db_cfg = DbConfig(
        delta_t_slots=config.window,
        slot_seconds=config.slot_seconds,
        stride_slots=config.db_stride_slots,
        alpha_m=config.alpha_m,
    )
    trajectories = (t for day in dataset.train_days for t in dataset.matched.get(day, []))
    return TrajectoryDatabase.build(
        trajectories, dataset.matched_cluster_lookup, db_cfg, dataset.city.graph
    )


def round_input_at(dataset: SyntheticDataset, day: date, slot: int) -> RoundInput:
    table = dataset.tables[day]
    dT = dataset.config.window
    windows = table.clusters[:, slot - dT : slot].astype(np.int64)
    times = np.ascontiguousarray(np.broadcast_to(np.arange(slot - dT, slot), windows.shape))
    if table.positions is None:
        raise ValueError(f"no position matrix retained for {day}")
    positions = table.positions[:, slot - 1, :].astype(np.float64)
    return RoundInput(
        day=day, slot=slot, user_ids=dataset.user_ids,
        window_clusters=windows, window_times=times, positions_xy=positions,
    )


def truth_station_alightings(
    sim: SimDay, station_nodes: set[int], bins: list[tuple[float, float]]
) -> np.ndarray:
    """Ground-truth train alightings at the given nodes per time bin."""
    train_idx = MODE_TABLE.index(Mode.TRAIN)
    counts = np.zeros(len(bins))
    starts = np.array([b[0] for b in bins])
    ends = np.array([b[1] for b in bins])
    offs = sim.visit_offsets
    modes = sim.visit_mode
    for ai in range(len(sim.user_ids)):
        s, e = offs[ai], offs[ai + 1]
        for k in range(s, e):
            if modes[k] != train_idx:
                continue
            if k + 1 < e and modes[k + 1] == train_idx:
                continue
            if int(sim.visit_node[k]) in station_nodes:
                t = sim.visit_t[k]
                hit = np.flatnonzero((starts <= t) & (t < ends))
                if len(hit):
                    counts[hit[0]] += 1
    return counts


@dataclass
class AggregateEvaluation:
    bins: list[tuple[float, float]]
    bin_days: list[date]
    truth: np.ndarray
    predicted: np.ndarray
    naive_seasonal: np.ndarray
    mape_ours: float
    mape_naive_festival: float
    mape_ours_festival: float
    round_timings: list[dict] = field(default_factory=list)


def evaluate_aggregates(
    dataset: SyntheticDataset,
    model: Model,
    db: TrajectoryDatabase,
    master_seed: int = 0,
) -> AggregateEvaluation:
    """Hour-ahead CBD-station arrival series: prediction vs truth vs naive."""
    config = dataset.config
    T = config.n_slots()
    dT = config.window
    ecfg = EngineConfig(
        k_neighbors=config.k_neighbors, beta=config.beta,
        samples_per_user=config.samples_per_user,
    )
    cbd_station_ids = dataset.city.cbd_stations()
    cbd_station_idx = {dataset.city.graph.node_index(n) for n in cbd_station_ids}

    bin_slots = _hour_slots(config.round_hours, config.slot_seconds, config.db_stride_slots)
    slot_s = config.slot_seconds

    # truth over the last train day (naive history) plus all test days
    history_days = [dataset.train_days[-1]] + dataset.test_days
    truth_parts, all_bins, bin_days = [], [], []
    for day in history_days:
        day0 = day_start_epoch(day)
        bins = [(day0 + s * slot_s, day0 + (s + config.db_stride_slots) * slot_s) for s in bin_slots]
        if day in dataset.test_sims:
            truth_parts.append(truth_station_alightings(dataset.test_sims[day], cbd_station_idx, bins))
        else:
            sim = simulate_day(
                dataset.population, dataset.runtime, dataset.calendar.regime(day), day,
                seed=dataset.seed, noise_sigma_m=config.noise_sigma_m,
            )
            truth_parts.append(truth_station_alightings(sim, cbd_station_idx, bins))
        all_bins.extend(bins)
        bin_days.extend([day] * len(bins))
    truth = np.concatenate(truth_parts)

    # predictions: each test-day bin is served by the round one hour earlier
    per_day_bins = len(bin_slots)
    predicted = np.full(len(all_bins), np.nan)
    timings = []
    for di, day in enumerate(dataset.test_days):
        for bi, s in enumerate(bin_slots):
            round_slot = int(s) - dT
            if round_slot < dT:
                continue
            ri = round_input_at(dataset, day, round_slot)
            result = predict_round(ri, model, db, ecfg, master_seed=master_seed)
            timings.append(result.timing.as_dict())
            global_bi = (di + 1) * per_day_bins + bi
            window = all_bins[global_bi]
            counts = station_series(
                result.predictions, cbd_station_ids, [window], db, kind="alightings"
            )[0]
            predicted[global_bi] = counts / config.samples_per_user

    naive = rolling_forecast(truth, horizon=dT // config.db_stride_slots, method="seasonal", period=per_day_bins)

    test_mask = np.zeros(len(all_bins), dtype=bool)
    test_mask[per_day_bins:] = True
    ok = test_mask & ~np.isnan(predicted) & ~np.isnan(naive)
    fest_days = {d for d in dataset.test_days if dataset.calendar.regime(d) == Regime.FESTIVAL}
    fest_mask = np.array([d in fest_days for d in bin_days]) & ok

    nz = truth != 0
    mape_ours = metric_mape(predicted[ok & nz], truth[ok & nz])
    mape_ours_fest = metric_mape(predicted[fest_mask & nz], truth[fest_mask & nz])
    mape_naive_fest = metric_mape(naive[fest_mask & nz], truth[fest_mask & nz])
    return AggregateEvaluation(
        bins=all_bins,
        bin_days=bin_days,
        truth=truth,
        predicted=predicted,
        naive_seasonal=naive,
        mape_ours=mape_ours,
        mape_naive_festival=mape_naive_fest,
        mape_ours_festival=mape_ours_fest,
        round_timings=timings,
    )


# --- the experiment op --------------------------------------------------------


def run_experiment(
    config: ExperimentConfig,
    seed: int = 0,
    out_dir: str | Path | None = None,
    with_retrieval: bool = True,
    variants: Iterable[str] = MODEL_VARIANTS,
) -> tuple[MetricReport, dict]:
    """Full protocol: data, vocabulary, model family, database, rounds, report."""
    t_start = time.perf_counter()
    dataset = build_dataset(config, seed, with_retrieval=with_retrieval)
    models = train_all_variants(dataset, seed, variants)
    report = MetricReport(
        config_hash=config.config_hash(), seed=seed, dataset_id=f"synth-{config.city_n}x{config.city_n}-{seed}"
    )
    for name, model in models.items():
        report.cross_entropy[name] = evaluate_variant(dataset, model)
    fest_ce = {}
    for name, model in models.items():
        fest_ce[name] = evaluate_variant(dataset, model, regime_filter=Regime.FESTIVAL)
    report.extras["festival_cross_entropy"] = fest_ce

    artifacts: dict = {"dataset": dataset, "models": models}
    if with_retrieval:
        db = build_database(dataset)
        artifacts["db"] = db
        agg = evaluate_aggregates(dataset, models["ours"], db, master_seed=seed)
        artifacts["aggregate"] = agg
        ok = ~np.isnan(agg.predicted)
        report.add_series("cbd_station_arrivals", agg.predicted[ok], agg.truth[ok])
        report.extras["mape_naive_festival"] = agg.mape_naive_festival
        report.extras["mape_ours_festival"] = agg.mape_ours_festival
        report.extras["db_slices"] = db.total_slices()
    report.extras["runtime_s"] = time.perf_counter() - t_start

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dataset.vocabulary.save_csv(out / "vocabulary.csv")
        from .predictor import save_checkpoint

        for name, model in models.items():
            save_checkpoint(model, out / f"model_{name}.npz")
        if with_retrieval:
            artifacts["db"].persist(out / "db")
        checksums = {}
        for f in sorted(out.rglob("*")):
            if f.is_file():
                checksums[str(f.relative_to(out))] = hashlib.sha256(f.read_bytes()).hexdigest()
        report.extras["artifact_checksums"] = checksums
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, default=str))
    return report, artifacts
