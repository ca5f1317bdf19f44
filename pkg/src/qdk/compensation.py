"""Closed-form layer-wise weight update that absorbs activation quantization error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ShapeError, SolverError

DEFAULT_DAMP_RATIO = 0.01


@dataclass
class CompensationProblem:
    W: np.ndarray       # out x in
    X: np.ndarray       # in x n, float activations as columns
    X_hat: np.ndarray   # in x n, dequantized activations
    damp_ratio: float = DEFAULT_DAMP_RATIO

    def solve(self) -> np.ndarray:
        return compensate(self.W, self.X, self.X_hat, self.damp_ratio)


def compensate(W: np.ndarray, X: np.ndarray, X_hat: np.ndarray,
               damp_ratio: float = DEFAULT_DAMP_RATIO) -> np.ndarray:
    """Return dW minimising ||W X - (W + dW) X_hat||_F.

    Solves dW (X_hat X_hat^T + lam I) = W (X - X_hat) X_hat^T with
    lam = damp_ratio * mean(diag(X_hat X_hat^T)), through a Cholesky
    factorisation of the (symmetric) dampened Gram matrix.
    """
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    if X.shape != X_hat.shape:
        raise ShapeError(f"X {X.shape} and X_hat {X_hat.shape} differ")
    if X.ndim != 2 or W.ndim != 2 or W.shape[1] != X.shape[0]:
        raise ShapeError(f"W {W.shape} incompatible with activations {X.shape}")
    if damp_ratio < 0:
        raise ValueError(f"damp_ratio must be non-negative, got {damp_ratio}")

    gram = X_hat @ X_hat.T
    rhs = W @ ((X - X_hat) @ X_hat.T)
    if not np.any(rhs):
        return np.zeros_like(W)
    lam = damp_ratio * float(np.mean(np.diag(gram)))
    gram[np.diag_indices_from(gram)] += lam
    try:
        c, lower = scipy.linalg.cho_factor(gram, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise SolverError(
            f"activation Gram matrix is singular (damp_ratio={damp_ratio}); raise the dampening"
        ) from exc
    pivots = np.abs(np.diag(c))
    if pivots.min() <= np.sqrt(np.finfo(float).eps) * pivots.max():
        raise SolverError(
            f"activation Gram matrix is numerically singular (damp_ratio={damp_ratio}); "
            "raise the dampening"
        )
    return scipy.linalg.cho_solve((c, lower), rhs.T).T


def compensate_conv(kernel: np.ndarray, cols: np.ndarray, cols_hat: np.ndarray,
                    damp_ratio: float = DEFAULT_DAMP_RATIO) -> np.ndarray:
    """Conv variant on im2col matrices (rows = output positions, cols = C*kh*kw).

    Returns the OIHW kernel delta.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    o = kernel.shape[0]
    W = kernel.reshape(o, -1)
    if cols.shape[1] != W.shape[1]:
        raise ShapeError(f"patch width {cols.shape[1]} does not match kernel fan-in {W.shape[1]}")
    return compensate(W, cols.T, cols_hat.T, damp_ratio).reshape(kernel.shape)
