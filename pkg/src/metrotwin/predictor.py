"""Cluster-level destination predictor with a crowd-context pathway.

A per-user gated recurrent encoder reads the most recent window of cluster
ids and time-of-day embeddings; a second recurrent encoder reads the pooled
(crowd) hidden states and adapts the prediction head to the current citywide
regime. During training the crowd context is approximated by the mini-batch
pool; at test time it is precomputed over the whole population.

The network is implemented directly on numpy with hand-written backprop so
training is reproducible bit-for-bit under a fixed seed and every gradient
can be validated against finite differences.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, asdict
from typing import Iterable

import numpy as np
from scipy.special import expit as _sigmoid

PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


class PredictorError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class CheckpointError(RuntimeError):
    pass


class Pooling(str, enum.Enum):
    MEAN = "MEAN"
    MAX = "MAX"


class ContextMode(str, enum.Enum):
    NONE = "NONE"          # plain sequence model, no crowd information
    POOLED = "POOLED"      # pooled crowd features enter the head directly
    RECURRENT = "RECURRENT"  # pooled features run through their own encoder


@dataclass
class PredictorConfig:
    n_clusters: int = 3600
    window: int = 12               # steps of recent history and prediction horizon
    slot_seconds: int = 300
    cluster_embed_dim: int = 128
    time_embed_dim: int = 64
    individual_layers: int = 2
    individual_hidden: int = 256
    context_layers: int = 1
    context_hidden: int = 64
    head_hidden: int = 256
    batch_size: int = 4096
    pooling: Pooling = Pooling.MEAN
    context_mode: ContextMode = ContextMode.RECURRENT
    day_embed_dim: int = 0         # > 0 enables the day-of-week conditional input
    dtype: str = "float64"

    def __post_init__(self):
        self.pooling = Pooling(self.pooling)
        self.context_mode = ContextMode(self.context_mode)
        for name in (
            "n_clusters", "window", "slot_seconds", "cluster_embed_dim", "time_embed_dim",
            "individual_layers", "individual_hidden", "context_hidden", "head_hidden",
            "batch_size",
        ):
            if getattr(self, name) < 1:
                raise PredictorError(f"{name} must be >= 1")
        if self.context_layers != 1:
            raise PredictorError("context encoder is single-layer")
        if 86400 % self.slot_seconds != 0:
            raise PredictorError("slot_seconds must divide 86400")

    @property
    def n_time_slots(self) -> int:
        return 86400 // self.slot_seconds

    @property
    def context_feature_dim(self) -> int:
        if self.context_mode == ContextMode.NONE:
            return 0
        if self.context_mode == ContextMode.POOLED:
            return self.individual_hidden
        return self.context_hidden

    @property
    def head_input_dim(self) -> int:
        return self.individual_hidden + self.context_feature_dim + self.day_embed_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pooling"] = self.pooling.value
        d["context_mode"] = self.context_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        return cls(**d)


class Model:
    """Parameter container; all state lives in the `params` dict of arrays."""

    def __init__(self, config: PredictorConfig, params: dict[str, np.ndarray], seed: int = 0):
        self.config = config
        self.params = params
        self.seed = seed

    def check_finite(self):
        for name, p in self.params.items():
            if not np.all(np.isfinite(p)):
                raise PredictorError(f"non-finite parameter: {name}")


def build_model(config: PredictorConfig, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    H, Hc = config.individual_hidden, config.context_hidden
    params: dict[str, np.ndarray] = {}

    def uniform(shape, k):
        return rng.uniform(-k, k, size=shape).astype(dt)

    params["embed_cluster"] = (rng.standard_normal((config.n_clusters, config.cluster_embed_dim)) * 0.1).astype(dt)
    params["embed_empty"] = (rng.standard_normal(config.cluster_embed_dim) * 0.1).astype(dt)
    params["embed_time"] = (rng.standard_normal((config.n_time_slots, config.time_embed_dim)) * 0.1).astype(dt)
    if config.day_embed_dim > 0:
        params["embed_day"] = (rng.standard_normal((7, config.day_embed_dim)) * 0.1).astype(dt)

    in_dim = config.cluster_embed_dim + config.time_embed_dim
    k = 1.0 / np.sqrt(H)
    for l in range(config.individual_layers):
        params[f"ind{l}_Wx"] = uniform((in_dim, 3 * H), k)
        params[f"ind{l}_Wh"] = uniform((H, 3 * H), k)
        params[f"ind{l}_b"] = np.zeros(3 * H, dtype=dt)
        in_dim = H

    if config.context_mode == ContextMode.RECURRENT:
        kc = 1.0 / np.sqrt(Hc)
        params["ctx_Wx"] = uniform((H, 3 * Hc), kc)
        params["ctx_Wh"] = uniform((Hc, 3 * Hc), kc)
        params["ctx_b"] = np.zeros(3 * Hc, dtype=dt)

    kh = 1.0 / np.sqrt(config.head_input_dim)
    params["head_W1"] = uniform((config.head_input_dim, config.head_hidden), kh)
    params["head_b1"] = np.zeros(config.head_hidden, dtype=dt)
    k2 = 1.0 / np.sqrt(config.head_hidden)
    params["head_W2"] = uniform((config.head_hidden, config.n_clusters), k2)
    params["head_b2"] = np.zeros(config.n_clusters, dtype=dt)
    return Model(config, params, seed)


# --- recurrent cell -------------------------------------------------------


def _gru_forward(x_seq, Wx, Wh, b, h0):
    """Run a gated recurrent layer over (B, T, in) inputs; returns states and caches."""
    B, T, D = x_seq.shape
    H = Wh.shape[0]
    h = h0
    states = np.empty((B, T, H), dtype=x_seq.dtype)
    caches = []
    xp_all = (x_seq.reshape(B * T, D) @ Wx + b).reshape(B, T, 3 * H)
    for t in range(T):
        xp = xp_all[:, t, :]
        hp = h @ Wh
        rz = _sigmoid(xp[:, : 2 * H] + hp[:, : 2 * H])
        r = rz[:, :H]
        z = rz[:, H:]
        hp_n = hp[:, 2 * H :]
        n = np.tanh(xp[:, 2 * H :] + r * hp_n)
        h_new = z * h + (1.0 - z) * n
        caches.append((h, r, z, n, hp_n))
        states[:, t, :] = h_new
        h = h_new
    return states, caches


def _gru_backward(d_states, x_seq, states, caches, Wx, Wh):
    """Backprop through time. d_states: (B, T, H) gradients on each output state."""
    B, T, H = d_states.shape
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(Wx.shape[1], dtype=Wx.dtype)
    dx_seq = np.empty_like(x_seq)
    dh = np.zeros((B, H), dtype=Wx.dtype)
    d_xp_all = np.empty((B, T, 3 * H), dtype=Wx.dtype)
    d_hp = np.empty((B, 3 * H), dtype=Wx.dtype)
    for t in range(T - 1, -1, -1):
        dh = dh + d_states[:, t, :]
        h_prev, r, z, n, hp_n = caches[t]
        dz = dh * (h_prev - n)
        dn = dh * (1.0 - z)
        dh_next = dh * z
        dn_pre = dn * (1.0 - n * n)
        dr = dn_pre * hp_n
        d_xp = d_xp_all[:, t, :]
        np.multiply(dr, r * (1.0 - r), out=d_xp[:, :H])
        np.multiply(dz, z * (1.0 - z), out=d_xp[:, H : 2 * H])
        d_xp[:, 2 * H :] = dn_pre
        d_hp[:, : 2 * H] = d_xp[:, : 2 * H]
        np.multiply(dn_pre, r, out=d_hp[:, 2 * H :])
        dWh += h_prev.T @ d_hp
        dh = dh_next + d_hp @ Wh.T
    flat_dxp = d_xp_all.reshape(B * T, 3 * H)
    flat_x = x_seq.reshape(B * T, -1)
    dWx += flat_x.T @ flat_dxp
    db += flat_dxp.sum(axis=0)
    dx_seq[:] = (flat_dxp @ Wx.T).reshape(x_seq.shape)
    return dx_seq, dWx, dWh, db


# --- public operations ----------------------------------------------------


def _as_batch(arr, window):
    a = np.asarray(arr)
    if a.ndim == 1:
        a = a[None, :]
    if a.shape[1] != window:
        raise PredictorError(f"window length {a.shape[1]} != configured {window}")
    return a


def _embed_inputs(model: Model, clusters: np.ndarray, times: np.ndarray):
    cfg = model.config
    p = model.params
    if clusters.max(initial=-1) >= cfg.n_clusters:
        raise PredictorError("cluster index out of range")
    if times.min(initial=0) < 0 or times.max(initial=0) >= cfg.n_time_slots:
        raise PredictorError("time slot index out of range")
    mask_empty = clusters < 0
    emb_c = p["embed_cluster"][np.maximum(clusters, 0)]
    if mask_empty.any():
        emb_c = np.where(mask_empty[:, :, None], p["embed_empty"][None, None, :], emb_c)
    emb_t = p["embed_time"][times]
    return np.concatenate([emb_c, emb_t], axis=2), mask_empty


def _forward_individual(model: Model, clusters: np.ndarray, times: np.ndarray):
    """All-layer forward; returns (per-layer state tensors, caches, inputs, empty mask)."""
    x, mask_empty = _embed_inputs(model, clusters, times)
    cfg = model.config
    states_per_layer = []
    caches_per_layer = []
    inputs_per_layer = []
    h0 = np.zeros((x.shape[0], cfg.individual_hidden), dtype=x.dtype)
    cur = x
    for l in range(cfg.individual_layers):
        inputs_per_layer.append(cur)
        states, caches = _gru_forward(
            cur, model.params[f"ind{l}_Wx"], model.params[f"ind{l}_Wh"], model.params[f"ind{l}_b"], h0
        )
        states_per_layer.append(states)
        caches_per_layer.append(caches)
        cur = states
    return states_per_layer, caches_per_layer, inputs_per_layer, mask_empty


def forward_individual(model: Model, clusters, times) -> np.ndarray:
    """Per-step hidden states of the top recurrent layer, h_1..h_window.

    `clusters` uses -1 for empty slots (mapped to the learned empty token);
    initial hidden state is zero.
    """
    cfg = model.config
    squeeze = np.asarray(clusters).ndim == 1
    clusters = _as_batch(clusters, cfg.window).astype(np.int64)
    times = _as_batch(times, cfg.window).astype(np.int64)
    states_per_layer, _, _, _ = _forward_individual(model, clusters, times)
    out = states_per_layer[-1]
    return out[0] if squeeze else out


def pool_crowd(hidden_states: np.ndarray, pooling: Pooling) -> np.ndarray:
    """Pool a batch of per-step hidden states into the crowd context sequence.

    (B, T, H) -> (T, H); permutation-invariant in the batch dimension.
    """
    h = np.asarray(hidden_states)
    if h.ndim != 3 or h.shape[0] == 0:
        raise PredictorError("pool_crowd expects a nonempty (B, T, H) batch")
    if Pooling(pooling) == Pooling.MEAN:
        return h.mean(axis=0)
    return h.max(axis=0)


def _context_forward(model: Model, phi: np.ndarray):
    p = model.params
    states, caches = _gru_forward(
        phi[None, :, :],
        p["ctx_Wx"],
        p["ctx_Wh"],
        p["ctx_b"],
        np.zeros((1, model.config.context_hidden), dtype=phi.dtype),
    )
    return states, caches


def _head_forward(model: Model, feats: np.ndarray):
    p = model.params
    a_pre = feats @ p["head_W1"] + p["head_b1"]
    a = np.tanh(a_pre)
    logits = a @ p["head_W2"] + p["head_b2"]
    return logits, (feats, a_pre, a)


def _softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def predict_distribution(
    model: Model,
    clusters,
    times,
    phi: np.ndarray | None = None,
    day_of_week: np.ndarray | int | None = None,
) -> np.ndarray:
    """Probability simplex over clusters for each window in the batch.

    `phi` is the precomputed crowd-context sequence (window, hidden); when
    omitted it is pooled from the batch itself (the training approximation).
    """
    cfg = model.config
    squeeze = np.asarray(clusters).ndim == 1
    clusters = _as_batch(clusters, cfg.window).astype(np.int64)
    times = _as_batch(times, cfg.window).astype(np.int64)
    states_per_layer, _, _, _ = _forward_individual(model, clusters, times)
    top = states_per_layer[-1]
    feats = [top[:, -1, :]]

    if cfg.context_mode != ContextMode.NONE:
        if phi is None:
            phi = pool_crowd(top, cfg.pooling)
        phi = np.asarray(phi, dtype=top.dtype)
        if phi.shape != (cfg.window, cfg.individual_hidden):
            raise PredictorError(
                f"phi shape {phi.shape} != {(cfg.window, cfg.individual_hidden)}"
            )
        if cfg.context_mode == ContextMode.POOLED:
            ctx_feat = phi[-1]
        else:
            ctx_states, _ = _context_forward(model, phi)
            ctx_feat = ctx_states[0, -1, :]
        feats.append(np.broadcast_to(ctx_feat, (top.shape[0], ctx_feat.shape[0])))

    if cfg.day_embed_dim > 0:
        if day_of_week is None:
            raise PredictorError("day_of_week required for the conditional model")
        dow = np.asarray(day_of_week)
        if dow.ndim == 0:
            dow = np.full(top.shape[0], int(dow))
        feats.append(model.params["embed_day"][dow])

    logits, _ = _head_forward(model, np.concatenate(feats, axis=1))
    probs = _softmax(logits)
    return probs[0] if squeeze else probs


def cross_entropy(probs: np.ndarray, targets) -> float:
    """Mean -ln p[target]; probabilities are floored at 1e-12 before the log."""
    p = np.asarray(probs)
    t = np.asarray(targets)
    if p.ndim == 1:
        p = p[None, :]
        t = t.reshape(1)
    picked = p[np.arange(len(t)), t]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def precompute_context(
    model: Model,
    clusters,
    times,
    chunk_size: int = 8192,
) -> np.ndarray:
    """Crowd-context sequence pooled over the whole population at one slot.

    Processes the population in chunks to bound memory; chunk pools combine
    exactly (weighted average for MEAN, elementwise max for MAX).
    """
    cfg = model.config
    clusters = _as_batch(clusters, cfg.window).astype(np.int64)
    times = _as_batch(times, cfg.window).astype(np.int64)
    n = clusters.shape[0]
    if n == 0:
        raise PredictorError("population must be nonempty")
    acc = None
    seen = 0
    for lo in range(0, n, chunk_size):
        hi = min(lo + chunk_size, n)
        states_per_layer, _, _, _ = _forward_individual(model, clusters[lo:hi], times[lo:hi])
        chunk = states_per_layer[-1]
        if cfg.pooling == Pooling.MEAN:
            part = chunk.sum(axis=0)
            acc = part if acc is None else acc + part
        else:
            part = chunk.max(axis=0)
            acc = part if acc is None else np.maximum(acc, part)
        seen += hi - lo
    return acc / seen if cfg.pooling == Pooling.MEAN else acc


def context_series(model: Model, per_slot_windows: Iterable[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Final-step crowd context per successive slot, for trend inspection."""
    rows = [precompute_context(model, c, t)[-1] for c, t in per_slot_windows]
    return np.stack(rows, axis=0)


# --- training -------------------------------------------------------------


@dataclass
class TrainingSet:
    """Flat example table; `group_keys` ties examples that share (day, slot)."""

    windows_clusters: np.ndarray  # (N, window) int, -1 = empty
    windows_times: np.ndarray     # (N, window) int
    targets: np.ndarray           # (N,) int
    group_keys: np.ndarray        # (N,) int
    day_of_week: np.ndarray | None = None  # (N,) int, for the conditional model

    def __post_init__(self):
        n = len(self.targets)
        if not (len(self.windows_clusters) == len(self.windows_times) == len(self.group_keys) == n):
            raise PredictorError("training arrays disagree on length")
        if n == 0:
            raise PredictorError("training set is empty")

    def __len__(self) -> int:
        return len(self.targets)


@dataclass
class TrainConfig:
    epochs: int = 5
    learning_rate: float = 1e-3
    seed: int = 0
    groups_per_epoch: int | None = None     # subsample of (day, slot) groups
    max_batches_per_group: int | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class TrainResult:
    loss_history: list[float] = field(default_factory=list)
    batches: int = 0


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        c = self.cfg
        self.t += 1
        b1t = 1.0 - c.adam_beta1 ** self.t
        b2t = 1.0 - c.adam_beta2 ** self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = c.adam_beta1 * self.m[k] + (1.0 - c.adam_beta1) * g
            self.v[k] = c.adam_beta2 * self.v[k] + (1.0 - c.adam_beta2) * (g * g)
            params[k] -= c.learning_rate * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + c.adam_eps)


def loss_and_gradients(
    model: Model,
    clusters: np.ndarray,
    times: np.ndarray,
    targets: np.ndarray,
    day_of_week: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Batch cross entropy and gradients for every parameter.

    The crowd context is pooled from this batch, so gradients flow through the
    pooling into every example's encoder (the training-time computation graph).
    """
    cfg = model.config
    p = model.params
    B = clusters.shape[0]
    grads = {k: np.zeros_like(v) for k, v in p.items()}

    states_per_layer, caches_per_layer, inputs_per_layer, mask_empty = _forward_individual(
        model, clusters, times
    )
    top = states_per_layer[-1]
    feats = [top[:, -1, :]]

    phi = None
    ctx_states = ctx_caches = None
    if cfg.context_mode != ContextMode.NONE:
        phi = pool_crowd(top, cfg.pooling)
        if cfg.context_mode == ContextMode.POOLED:
            ctx_feat = phi[-1]
        else:
            ctx_states, ctx_caches = _context_forward(model, phi)
            ctx_feat = ctx_states[0, -1, :]
        feats.append(np.broadcast_to(ctx_feat, (B, ctx_feat.shape[0])))

    if cfg.day_embed_dim > 0:
        if day_of_week is None:
            raise PredictorError("day_of_week required for the conditional model")
        feats.append(p["embed_day"][day_of_week])

    head_in = np.concatenate(feats, axis=1)
    logits, (feats_cache, a_pre, a) = _head_forward(model, head_in)
    probs = _softmax(logits)
    picked = probs[np.arange(B), targets]
    loss = float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())

    # softmax + CE backward
    dlogits = probs.copy()
    dlogits[np.arange(B), targets] -= 1.0
    dlogits /= B

    grads["head_W2"] = a.T @ dlogits
    grads["head_b2"] = dlogits.sum(axis=0)
    da = dlogits @ p["head_W2"].T
    da_pre = da * (1.0 - a * a)
    grads["head_W1"] = head_in.T @ da_pre
    grads["head_b1"] = da_pre.sum(axis=0)
    d_head_in = da_pre @ p["head_W1"].T

    H = cfg.individual_hidden
    d_top = np.zeros_like(top)
    d_top[:, -1, :] += d_head_in[:, :H]
    offset = H

    if cfg.context_mode != ContextMode.NONE:
        Fc = cfg.context_feature_dim
        d_ctx_feat = d_head_in[:, offset : offset + Fc].sum(axis=0)
        offset += Fc
        if cfg.context_mode == ContextMode.POOLED:
            d_phi = np.zeros_like(phi)
            d_phi[-1] = d_ctx_feat
        else:
            d_ctx_states = np.zeros_like(ctx_states)
            d_ctx_states[0, -1, :] = d_ctx_feat
            d_phi_b, dWx, dWh, db = _gru_backward(
                d_ctx_states, phi[None, :, :], ctx_states, ctx_caches, p["ctx_Wx"], p["ctx_Wh"]
            )
            grads["ctx_Wx"] = dWx
            grads["ctx_Wh"] = dWh
            grads["ctx_b"] = db
            d_phi = d_phi_b[0]
        # pooling backward: distribute context gradient to individual states
        if cfg.pooling == Pooling.MEAN:
            d_top += d_phi[None, :, :] / B
        else:
            winners = top.argmax(axis=0)  # (T, H)
            t_idx, h_idx = np.meshgrid(
                np.arange(top.shape[1]), np.arange(H), indexing="ij"
            )
            d_top[winners, t_idx, h_idx] += d_phi

    if cfg.day_embed_dim > 0:
        d_day = d_head_in[:, offset:]
        np.add.at(grads["embed_day"], day_of_week, d_day)

    # individual stack backward, top layer down
    d_states = d_top
    for l in range(cfg.individual_layers - 1, -1, -1):
        dx_seq, dWx, dWh, db = _gru_backward(
            d_states,
            inputs_per_layer[l],
            states_per_layer[l],
            caches_per_layer[l],
            p[f"ind{l}_Wx"],
            p[f"ind{l}_Wh"],
        )
        grads[f"ind{l}_Wx"] = dWx
        grads[f"ind{l}_Wh"] = dWh
        grads[f"ind{l}_b"] = db
        d_states = dx_seq

    # embedding backward
    d_emb_c = d_states[:, :, : cfg.cluster_embed_dim]
    d_emb_t = d_states[:, :, cfg.cluster_embed_dim :]
    flat_mask = mask_empty.ravel()
    flat_clusters = clusters.ravel()
    flat_demb = d_emb_c.reshape(-1, cfg.cluster_embed_dim)
    np.add.at(grads["embed_cluster"], flat_clusters[~flat_mask], flat_demb[~flat_mask])
    if flat_mask.any():
        grads["embed_empty"] = flat_demb[flat_mask].sum(axis=0)
    np.add.at(grads["embed_time"], times.ravel(), d_emb_t.reshape(-1, cfg.time_embed_dim))

    return loss, grads


def train(model: Model, data: TrainingSet, train_config: TrainConfig) -> TrainResult:
    """Seeded mini-batch training; batches are drawn within one (day, slot) group
    so the batch pool is a faithful stand-in for the crowd context."""
    cfg = model.config
    rng = np.random.default_rng(train_config.seed)
    opt = Adam(model.params, train_config)
    result = TrainResult()

    order = np.argsort(data.group_keys, kind="stable")
    keys_sorted = data.group_keys[order]
    boundaries = np.flatnonzero(np.diff(keys_sorted)) + 1
    group_slices = np.split(order, boundaries)

    clusters = np.asarray(data.windows_clusters, dtype=np.int64)
    times = np.asarray(data.windows_times, dtype=np.int64)
    targets = np.asarray(data.targets, dtype=np.int64)
    dow = None if data.day_of_week is None else np.asarray(data.day_of_week, dtype=np.int64)

    for epoch in range(train_config.epochs):
        group_order = rng.permutation(len(group_slices))
        if train_config.groups_per_epoch is not None:
            group_order = group_order[: train_config.groups_per_epoch]
        epoch_losses = []
        for gi in group_order:
            members = group_slices[gi]
            perm = rng.permutation(len(members))
            members = members[perm]
            n_batches = 0
            for lo in range(0, len(members), cfg.batch_size):
                if (
                    train_config.max_batches_per_group is not None
                    and n_batches >= train_config.max_batches_per_group
                ):
                    break
                idx = members[lo : lo + cfg.batch_size]
                loss, grads = loss_and_gradients(
                    model,
                    clusters[idx],
                    times[idx],
                    targets[idx],
                    None if dow is None else dow[idx],
                )
                if not np.isfinite(loss):
                    raise TrainingDivergedError(epoch)
                opt.step(model.params, grads)
                epoch_losses.append(loss)
                n_batches += 1
                result.batches += 1
        result.loss_history.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
    return result


# --- checkpointing --------------------------------------------------------


def save_checkpoint(model: Model, path) -> None:
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
    }
    arrays = {f"param_{k}": v for k, v in model.params.items()}
    np.savez(path, __manifest__=np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path, expected_config: PredictorConfig | None = None) -> Model:
    with np.load(path) as archive:
        manifest = json.loads(bytes(archive["__manifest__"]).decode())
        if manifest.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
        config = PredictorConfig.from_dict(manifest["config"])
        if expected_config is not None and expected_config.to_dict() != config.to_dict():
            raise CheckpointError("checkpoint config does not match the expected config")
        params = {}
        for key in archive.files:
            if key.startswith("param_"):
                params[key[len("param_") :]] = archive[key]
        for name, shape in manifest["shapes"].items():
            if name not in params or list(params[name].shape) != shape:
                raise CheckpointError(f"parameter {name} missing or misshaped")
    return Model(config, params, manifest["seed"])


# --- baseline factories ---------------------------------------------------


def baseline_gru_config(base: PredictorConfig) -> PredictorConfig:
    d = base.to_dict()
    d.update(context_mode=ContextMode.NONE.value, day_embed_dim=0)
    return PredictorConfig.from_dict(d)


def baseline_conditional_config(base: PredictorConfig, day_embed_dim: int = 8) -> PredictorConfig:
    d = base.to_dict()
    d.update(context_mode=ContextMode.NONE.value, day_embed_dim=day_embed_dim)
    return PredictorConfig.from_dict(d)


def context_pooled_config(base: PredictorConfig, pooling: Pooling) -> PredictorConfig:
    d = base.to_dict()
    d.update(context_mode=ContextMode.POOLED.value, pooling=Pooling(pooling).value, day_embed_dim=0)
    return PredictorConfig.from_dict(d)
