"""Dense float64 tensor helpers: channel views, percentiles, reference matmul/conv2d.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
Quantized integer codes are carried as exact small integers in float64 so
that a single array type flows through the whole toolkit.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DomainError, ShapeError


def as_tensor(x, name: str | None = None) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array (copying only if needed)."""
    t = np.ascontiguousarray(x, dtype=np.float64)
    if t.ndim and 0 in t.shape:
        raise ShapeError(f"{name or 'tensor'} has an empty extent: {t.shape}")
    return t


def channel_view(t: np.ndarray, axis: int, index: int) -> np.ndarray:
    """Read-only view of channel ``index`` along ``axis``."""
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"channel axis {axis} out of range for rank {t.ndim}")
    if not 0 <= index < t.shape[axis]:
        raise ShapeError(f"channel {index} out of range (extent {t.shape[axis]})")
    v = np.take(t, index, axis=axis)
    v.flags.writeable = False
    return v


def channels_last(t: np.ndarray, axis: int) -> np.ndarray:
    """Reshape ``t`` to (elements_per_channel, channels) with ``axis`` as the column."""
    moved = np.moveaxis(t, axis, -1)
    return moved.reshape(-1, t.shape[axis])


def percentile(values: Sequence[float] | np.ndarray, epsilon: float, axis: int | None = None):
    """Linearly interpolated ``epsilon``-th percentile.

    The fractional index into the sorted data is ``(epsilon / 100) * (n - 1)``.
    With ``axis`` given, the percentile is taken along that axis.
    """
    if not 0.0 < epsilon < 100.0:
        raise DomainError(f"percentile epsilon must lie in (0, 100), got {epsilon}")
    return _percentile(values, epsilon, axis)


def _percentile(values, epsilon: float, axis: int | None = None):
    # unchecked variant; accepts the closed range [0, 100]
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DomainError("percentile of an empty sequence")
    if not np.all(np.isfinite(v)):
        raise DomainError("percentile input contains non-finite values")
    out = np.percentile(v, epsilon, axis=axis, method="linear")
    return float(out) if np.ndim(out) == 0 else out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product with a fixed accumulation order.

    Every output element is accumulated as ``((a0*b0 + a1*b1) + a2*b2) + ...``
    along the inner dimension, exactly like a naive triple loop, so results
    are bit-reproducible regardless of the BLAS build.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    if m * n == 0:
        return out
    at = np.ascontiguousarray(a.T)
    tmp = np.empty_like(out)
    for p in range(k):
        np.multiply(at[p][:, None], b[p], out=tmp)
        out += tmp
    return out


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched :func:`matmul` over leading axes, same accumulation order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm shapes incompatible: {a.shape} x {b.shape}")
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(batch + (a.shape[-2], b.shape[-1]), dtype=np.float64)
    at = np.ascontiguousarray(np.moveaxis(a, -1, 0))
    bt = np.ascontiguousarray(np.moveaxis(b, -2, 0))
    tmp = np.empty_like(out)
    for p in range(a.shape[-1]):
        np.multiply(at[p][..., :, None], bt[p][..., None, :], out=tmp)
        out += tmp
    return out


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Lower an NCHW input to a patch matrix.

    Rows are ordered (n, oh, ow) and columns (c, kh, kw), matching an OIHW
    kernel reshaped to (O, C*kh*kw).
    """
    if x.ndim != 4:
        raise ShapeError(f"im2col expects NCHW input, got shape {x.shape}")
    if stride < 1 or padding < 0:
        raise DomainError(f"invalid stride={stride} / padding={padding}")
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = np.empty((n, oh, ow, c, kh, kw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            cols[..., i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n * oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int,
           stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back into an NCHW tensor."""
    n, c, h, w = shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                cols[..., i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        return xp[:, :, padding:-padding, padding:-padding]
    return xp


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct 2-D convolution (cross-correlation), NCHW input and OIHW kernel."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}")
    o, _, kh, kw = kernel.shape
    n, _, h, w = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    y = matmul(cols, kernel.reshape(o, -1).T)
    return y.reshape(n, oh, ow, o).transpose(0, 3, 1, 2).copy()
