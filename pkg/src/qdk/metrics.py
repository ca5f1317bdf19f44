"""Monocular-depth evaluation metrics (AbsRel, delta thresholds, RMSE, Silog, ...)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError, ShapeError

METRIC_NAMES = ("absrel", "delta1", "delta2", "delta3", "rmse", "rmse_log", "log10", "silog", "sqrel")


@dataclass
class DepthPair:
    prediction: np.ndarray
    ground_truth: np.ndarray
    valid_mask: np.ndarray | None = None


@dataclass
class DepthMetrics:
    absrel: float
    delta1: float
    delta2: float
    delta3: float
    rmse: float
    rmse_log: float
    log10: float
    silog: float
    sqrel: float

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(pair: DepthPair) -> DepthMetrics:
    """Standard depth metrics over the valid pixels.

    Silog is the variance form sqrt(mean(d^2) - mean(d)^2) with
    d = ln(pred) - ln(gt), reported without the usual x100 display factor.
    """
    pred = np.asarray(pair.prediction, dtype=np.float64)
    gt = np.asarray(pair.ground_truth, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    mask = np.ones(pred.shape, dtype=bool) if pair.valid_mask is None else np.asarray(pair.valid_mask, bool)
    if mask.shape != pred.shape:
        raise ShapeError(f"mask {mask.shape} does not match depth maps {pred.shape}")
    if not mask.any():
        raise DomainError("valid mask selects no pixels")
    p = pred[mask]
    g = gt[mask]
    if np.any(p <= 0) or np.any(g <= 0):
        raise DomainError("depths under the valid mask must be strictly positive")

    ratio = np.maximum(p / g, g / p)
    diff = p - g
    d = np.log(p) - np.log(g)
    return DepthMetrics(
        absrel=float(np.mean(np.abs(diff) / g)),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean(d**2))),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        silog=float(np.sqrt(np.mean((d - np.mean(d)) ** 2))),
        sqrel=float(np.mean(diff**2 / g)),
    )


def evaluate_batch(predictions: np.ndarray, ground_truth: np.ndarray) -> DepthMetrics:
    """Metrics pooled over every pixel of a batch of depth maps."""
    return evaluate(DepthPair(np.asarray(predictions), np.asarray(ground_truth)))
