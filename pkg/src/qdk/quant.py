"""Uniform and Log2 quantizers with per-tensor / per-channel asymmetric fitting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import DomainError, ShapeError
from .tensor import _percentile, channels_last

SCALE_FLOOR = 1e-12

Scheme = Literal["uniform", "log2"]


@dataclass(frozen=True)
class QuantParams:
    """Scale/zero-point pairs for one quantization mapping.

    ``axis is None`` means per-tensor; otherwise ``scale`` and ``zero_point``
    hold one entry per channel along ``axis``.
    """

    scale: np.ndarray
    zero_point: np.ndarray
    bits: int
    axis: int | None = None
    scheme: Scheme = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "scale", np.atleast_1d(np.asarray(self.scale, dtype=np.float64)))
        object.__setattr__(self, "zero_point", np.atleast_1d(np.asarray(self.zero_point, dtype=np.float64)))
        if self.bits < 2:
            raise DomainError(f"bit width must be >= 2, got {self.bits}")
        if self.scale.shape != self.zero_point.shape:
            raise ShapeError("scale and zero_point must have the same shape")
        if self.axis is None and self.scale.size != 1:
            raise ShapeError("per-tensor params must hold a single scale")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    def broadcast(self, ndim: int) -> tuple[np.ndarray, np.ndarray]:
        """Scale and zero point reshaped to broadcast against a rank-``ndim`` tensor."""
        if self.axis is None:
            return self.scale.reshape(()), self.zero_point.reshape(())
        shape = [1] * ndim
        shape[self.axis] = self.scale.size
        return self.scale.reshape(shape), self.zero_point.reshape(shape)

    def to_dict(self) -> dict:
        return {
            "scale": self.scale.tolist(),
            "zero_point": self.zero_point.tolist(),
            "bits": self.bits,
            "axis": self.axis,
            "scheme": self.scheme,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(np.array(d["scale"]), np.array(d["zero_point"]), d["bits"], d["axis"], d["scheme"])


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray
    params: QuantParams


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_bits(k: int):
    if k < 2:
        raise DomainError(f"bit width must be >= 2, got {k}")


def _channel_ranges(x: np.ndarray, axis: int | None, lo_pct: float, hi_pct: float):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("cannot fit quantization range on non-finite data")
    if axis is None:
        flat = x.reshape(-1, 1)
    else:
        if not -x.ndim <= axis < x.ndim:
            raise ShapeError(f"channel axis {axis} invalid for rank {x.ndim}")
        flat = channels_last(x, axis)
    lo = _percentile(flat, lo_pct, axis=0)
    hi = _percentile(flat, hi_pct, axis=0)
    return np.atleast_1d(lo), np.atleast_1d(hi)


def _params_from_range(lo, hi, k: int, axis: int | None, ndim: int) -> QuantParams:
    qmax = (1 << k) - 1
    lo = np.array(lo, dtype=np.float64)
    hi = np.array(hi, dtype=np.float64)
    flat = hi == lo
    # constant groups: stretch the range to touch zero so the constant lands on a grid end
    lo[flat] = np.minimum(lo[flat], 0.0)
    hi[flat] = np.maximum(hi[flat], 0.0)
    scale = np.maximum((hi - lo) / qmax, SCALE_FLOOR)
    zp = np.clip(round_half_away(-lo / scale), 0, qmax)
    if axis is not None and axis < 0:
        axis += ndim
    return QuantParams(scale, zp, k, axis, "uniform")


def fit_minmax(x: np.ndarray, k: int, axis: int | None = None) -> QuantParams:
    """Asymmetric params covering [min, max] of each group."""
    _check_bits(k)
    lo, hi = _channel_ranges(x, axis, 0.0, 100.0)
    return _params_from_range(lo, hi, k, axis, np.ndim(x))


def fit_covering(x: np.ndarray, k: int, axis: int | None = None) -> QuantParams:
    """Min/max params whose scale is widened after zero-point rounding so that
    both extremes land inside the grid.

    Plain min/max rounding can leave the top (or bottom) of the range half a
    step outside the grid.  That is harmless in the linear domain but costly
    after a log transform, where the clipped half step is exponentiated back.
    """
    _check_bits(k)
    lo, hi = _channel_ranges(x, axis, 0.0, 100.0)
    p = _params_from_range(lo, hi, k, axis, np.ndim(x))
    zp = p.zero_point
    top = np.where(zp < p.qmax, hi / np.maximum(p.qmax - zp, 1), 0.0)
    bottom = np.where(zp > 0, -lo / np.maximum(zp, 1), 0.0)
    scale = np.maximum(p.scale, np.maximum(top, bottom))
    return QuantParams(scale, zp, k, p.axis, "uniform")


def fit_percentile(x: np.ndarray, k: int, clip_pct: float, axis: int | None = None) -> QuantParams:
    """Like :func:`fit_minmax` but with the range clipped to the
    ``[100 - clip_pct, clip_pct]`` percentiles."""
    _check_bits(k)
    if not 50.0 < clip_pct <= 100.0:
        raise DomainError(f"clip_pct must lie in (50, 100], got {clip_pct}")
    lo, hi = _channel_ranges(x, axis, 100.0 - clip_pct, clip_pct)
    return _params_from_range(lo, hi, k, axis, np.ndim(x))


def fit_log2(x: np.ndarray, k: int, axis: int | None = None) -> QuantParams:
    """Log2 params: the scale is the group maximum so that x/s lies in (0, 1]."""
    _check_bits(k)
    _, hi = _channel_ranges(x, axis, 0.0, 100.0)
    scale = np.where(hi > 0, hi, 1.0)
    if axis is not None and axis < 0:
        axis += np.ndim(x)
    return QuantParams(scale, np.zeros_like(scale), k, axis, "log2")


def quantize_uniform(x: np.ndarray, p: QuantParams) -> QuantizedTensor:
    if p.scheme != "uniform":
        raise DomainError(f"quantize_uniform needs a uniform scheme, got {p.scheme}")
    if np.any(p.scale <= 0):
        raise DomainError("quantization scale must be positive")
    x = np.asarray(x, dtype=np.float64)
    s, zp = p.broadcast(x.ndim)
    codes = np.clip(round_half_away(x / s) + zp, 0, p.qmax)
    return QuantizedTensor(codes, p)


def dequantize_uniform(q: QuantizedTensor) -> np.ndarray:
    s, zp = q.params.broadcast(q.codes.ndim)
    return s * (q.codes - zp)


def quantize_log2(x: np.ndarray, p: QuantParams) -> QuantizedTensor:
    """Codes are ``round(-log2(x/s))``; non-positive inputs map to the largest code."""
    if p.scheme != "log2":
        raise DomainError(f"quantize_log2 needs a log2 scheme, got {p.scheme}")
    if np.any(p.scale <= 0):
        raise DomainError("quantization scale must be positive")
    x = np.asarray(x, dtype=np.float64)
    s, _ = p.broadcast(x.ndim)
    ratio = x / s
    pos = ratio > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(pos, round_half_away(-np.log2(np.where(pos, ratio, 1.0))), p.qmax)
    return QuantizedTensor(np.clip(raw, 0, p.qmax), p)


def dequantize_log2(q: QuantizedTensor) -> np.ndarray:
    s, _ = q.params.broadcast(q.codes.ndim)
    return s * np.ldexp(1.0, -q.codes.astype(np.int64))


def fake_quantize(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """Quantize then dequantize with whichever scheme ``p`` carries."""
    if p.scheme == "log2":
        return dequantize_log2(quantize_log2(x, p))
    return dequantize_uniform(quantize_uniform(x, p))
