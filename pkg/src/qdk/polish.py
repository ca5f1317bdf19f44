"""Log-domain polishing: a signed per-channel log transform that squeezes outliers
before uniform activation quantization, and its exact inverse."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, ShapeError
from .quant import QuantizedTensor, QuantParams, dequantize_uniform, fit_covering, quantize_uniform
from .tensor import channels_last, percentile

ALPHA_FLOOR = 1e-4
LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class PolishFactors:
    alpha: np.ndarray
    epsilon: float = 95.0
    channel_axis: int = -1
    sample_count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.atleast_1d(np.asarray(self.alpha, dtype=np.float64)))

    def broadcast(self, ndim: int) -> np.ndarray:
        if np.any(~(self.alpha > 0)):
            raise DomainError("polishing factors must be strictly positive")
        shape = [1] * ndim
        shape[self.channel_axis] = self.alpha.size
        return self.alpha.reshape(shape)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "epsilon": self.epsilon,
            "channel_axis": self.channel_axis,
            "sample_count": self.sample_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolishFactors":
        return cls(np.array(d["alpha"]), d["epsilon"], d["channel_axis"], d["sample_count"])


def calibrate_polish(calibration_batches: Sequence[np.ndarray], epsilon: float = 95.0,
                     channel_axis: int = -1) -> PolishFactors:
    """Per-channel polishing factors averaged over calibration samples.

    For every sample, each channel's factor is the ``epsilon`` percentile of
    its absolute values (floored at ``ALPHA_FLOOR``); the result is the mean
    over samples.
    """
    if len(calibration_batches) == 0:
        raise DomainError("calibrate_polish needs at least one calibration batch")
    if not 0.0 < epsilon < 100.0:
        raise DomainError(f"epsilon must lie in (0, 100), got {epsilon}")
    per_sample = []
    extent = None
    for batch in calibration_batches:
        batch = np.asarray(batch, dtype=np.float64)
        if extent is None:
            extent = batch.shape[channel_axis]
        elif batch.shape[channel_axis] != extent:
            raise ShapeError(f"inconsistent channel extent: {batch.shape[channel_axis]} vs {extent}")
        cols = channels_last(np.abs(batch), channel_axis)
        per_sample.append(np.maximum(percentile(cols, epsilon, axis=0), ALPHA_FLOOR))
    # sorting before the mean makes the result independent of batch order
    stacked = np.sort(np.stack(per_sample), axis=0)
    alpha = stacked.sum(axis=0) / len(per_sample)
    return PolishFactors(alpha, float(epsilon), channel_axis, len(per_sample))


def polish(x: np.ndarray, f: PolishFactors) -> np.ndarray:
    """sign(x) * (log2(|x| + a) - log2(a)), evaluated as log1p(|x|/a)/ln 2."""
    x = np.asarray(x, dtype=np.float64)
    a = f.broadcast(x.ndim)
    return np.sign(x) * (np.log1p(np.abs(x) / a) / LN2)


def unpolish(y: np.ndarray, f: PolishFactors) -> np.ndarray:
    """Inverse of :func:`polish`: sign(y) * a * (2^|y| - 1)."""
    y = np.asarray(y, dtype=np.float64)
    a = f.broadcast(y.ndim)
    return np.sign(y) * (a * np.expm1(np.abs(y) * LN2))


def polished_quantize(x: np.ndarray, f: PolishFactors, k: int) -> tuple[QuantizedTensor, QuantParams]:
    """Polish, fit per-channel asymmetric uniform params on the result, quantize.

    The grid is fitted with :func:`fit_covering`, so the polished extremes
    (the outliers) are never clipped.
    """
    y = polish(x, f)
    axis = f.channel_axis % y.ndim
    params = fit_covering(y, k, axis=axis)
    return quantize_uniform(y, params), params


def polished_dequantize(q: QuantizedTensor, f: PolishFactors) -> np.ndarray:
    return unpolish(dequantize_uniform(q), f)


def polished_fake_quantize(x: np.ndarray, f: PolishFactors, params: QuantParams) -> np.ndarray:
    """Polish -> quantize with frozen ``params`` -> dequantize -> unpolish."""
    return unpolish(dequantize_uniform(quantize_uniform(polish(x, f), params)), f)
