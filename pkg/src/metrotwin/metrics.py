"""Aggregate-series metrics and dependency-free time-series baselines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


def _paired(predicted, truth):
    p = np.asarray(predicted, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1 or len(p) < 1:
        raise MetricError(f"series shapes disagree: {p.shape} vs {y.shape}")
    return p, y


def metric_rmse(predicted, truth) -> float:
    p, y = _paired(predicted, truth)
    return float(np.sqrt(np.mean((p - y) ** 2)))


def metric_mae(predicted, truth) -> float:
    p, y = _paired(predicted, truth)
    return float(np.mean(np.abs(p - y)))


def metric_mape(predicted, truth) -> float:
    """Mean absolute percentage error over nonzero ground-truth points."""
    p, y = _paired(predicted, truth)
    mask = y != 0
    if not mask.any():
        raise MetricError("MAPE undefined: all ground-truth points are zero")
    return float(np.mean(np.abs(p[mask] - y[mask]) / np.abs(y[mask])))


def baseline_persistence(history, horizon: int) -> np.ndarray:
    """Repeat the last observed value."""
    h = np.asarray(history, dtype=np.float64)
    if len(h) < 1:
        raise MetricError("persistence needs at least one observation")
    return np.full(horizon, h[-1])


def baseline_seasonal_naive(history, horizon: int, period: int) -> np.ndarray:
    """Repeat the value one period earlier."""
    h = np.asarray(history, dtype=np.float64)
    if len(h) < period:
        raise MetricError(f"seasonal-naive needs at least one period ({period}) of history")
    reps = int(np.ceil(horizon / period))
    tail = np.tile(h[-period:], reps)
    return tail[:horizon]


def rolling_forecast(series, horizon: int, method: str, period: int | None = None) -> np.ndarray:
    """One-step rolling forecasts at lag `horizon` over an observed series.

    forecast[t] predicts series[t] using only values up to t - horizon
    (persistence) or the value one period before t (seasonal naive); the
    first points without enough history are NaN.
    """
    y = np.asarray(series, dtype=np.float64)
    out = np.full(len(y), np.nan)
    if method == "persistence":
        out[horizon:] = y[:-horizon] if horizon > 0 else y
    elif method == "seasonal":
        if period is None:
            raise MetricError("seasonal forecast needs a period")
        out[period:] = y[:-period]
    else:
        raise MetricError(f"unknown baseline {method}")
    return out


@dataclass
class MetricReport:
    """Per-target series metrics plus per-model cross entropies."""

    config_hash: str
    seed: int
    dataset_id: str
    cross_entropy: dict[str, float] = field(default_factory=dict)
    series_metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def add_series(self, target: str, predicted, truth):
        self.series_metrics[target] = {
            "rmse": metric_rmse(predicted, truth),
            "mae": metric_mae(predicted, truth),
            "mape": metric_mape(predicted, truth),
        }

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "dataset_id": self.dataset_id,
            "cross_entropy": self.cross_entropy,
            "series_metrics": self.series_metrics,
            "extras": self.extras,
        }
