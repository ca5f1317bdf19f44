"""KFAC Fisher factors, the Kronecker quadratic weight-error loss, and
AdaRound-style learned rounding on top of it."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, OptimizationError, ShapeError
from .quant import QuantParams, fit_minmax, round_half_away

log = logging.getLogger(__name__)

ZETA = 1.1
GAMMA = -0.1


@dataclass
class KfacFactors:
    G: np.ndarray   # out x out
    A: np.ndarray   # in x in
    sample_count: int = 1

    def damped(self, ratio: float) -> "KfacFactors":
        """Copy with ``ratio * mean(diag)`` added to each factor's diagonal.

        An all-zero factor is replaced by the identity so the quadratic form
        stays informative.
        """
        def _damp(m):
            m = m.copy()
            d = float(np.mean(np.diag(m)))
            if d <= 0:
                return np.eye(m.shape[0])
            m[np.diag_indices_from(m)] += ratio * d
            return m
        return KfacFactors(_damp(self.G), _damp(self.A), self.sample_count)


def accumulate_kfac(gradients: np.ndarray, activations: np.ndarray, S: int | None = None) -> KfacFactors:
    """G = (1/sqrt(S)) sum_s g_s g_s^T and A = (1/sqrt(S)) sum_s x_s x_s^T.

    ``gradients`` is (S, out) and ``activations`` is (S, in); one row per sample.
    """
    g = np.asarray(gradients, dtype=np.float64)
    x = np.asarray(activations, dtype=np.float64)
    if g.ndim != 2 or x.ndim != 2:
        raise ShapeError(f"expected (S, out) and (S, in) arrays, got {g.shape} and {x.shape}")
    if g.shape[0] != x.shape[0]:
        raise ShapeError(f"sample counts differ: {g.shape[0]} gradients vs {x.shape[0]} activations")
    S = g.shape[0] if S is None else S
    if S < 1 or S != g.shape[0]:
        raise ShapeError(f"sample count S={S} does not match {g.shape[0]} rows")
    norm = 1.0 / math.sqrt(S)
    G = (g.T @ g) * norm
    A = (x.T @ x) * norm
    # exact symmetry regardless of BLAS blocking
    G = 0.5 * (G + G.T)
    A = 0.5 * (A + A.T)
    return KfacFactors(G, A, S)


def quadratic_loss(dW: np.ndarray, f: KfacFactors) -> float:
    """vec(dW)^T (G kron A) vec(dW) for row-major vec, i.e. sum((G dW A) * dW)."""
    dW = np.asarray(dW, dtype=np.float64)
    if dW.shape != (f.G.shape[0], f.A.shape[0]):
        raise ShapeError(f"dW {dW.shape} incompatible with factors {f.G.shape}, {f.A.shape}")
    return float(np.sum((f.G @ dW @ f.A) * dW))


def rectified_sigmoid(v: np.ndarray) -> np.ndarray:
    return np.clip(_sigmoid(v) * (ZETA - GAMMA) + GAMMA, 0.0, 1.0)


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(v, dtype=np.float64)))


def _rectified_sigmoid_grad(v: np.ndarray) -> np.ndarray:
    sig = _sigmoid(v)
    raw = sig * (ZETA - GAMMA) + GAMMA
    inside = (raw > 0.0) & (raw < 1.0)
    return np.where(inside, sig * (1.0 - sig) * (ZETA - GAMMA), 0.0)


def inverse_rectified_sigmoid(p: np.ndarray) -> np.ndarray:
    q = (np.asarray(p, dtype=np.float64) - GAMMA) / (ZETA - GAMMA)
    return np.log(q) - np.log1p(-q)


def adaround_quantize(w, s, zp, k: int, v) -> np.ndarray:
    """s * (clip(floor(w/s) + h(v) + zp, 0, 2^k - 1) - zp) with h the rectified sigmoid."""
    w = np.asarray(w, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise DomainError("quantization scale must be positive")
    qmax = (1 << k) - 1
    return s * (np.clip(np.floor(w / s) + rectified_sigmoid(v) + zp, 0, qmax) - zp)


def regularizer(v, beta: float) -> float:
    """sum_i (1 - |2 h(v_i) - 1|^beta); zero once every h(v_i) is binary."""
    if beta <= 0:
        raise DomainError(f"beta must be positive, got {beta}")
    h = rectified_sigmoid(v)
    return float(np.sum(1.0 - np.abs(2.0 * h - 1.0) ** beta))


def _regularizer_grad_h(h: np.ndarray, beta: float) -> np.ndarray:
    t = 2.0 * h - 1.0
    return -2.0 * beta * np.abs(t) ** (beta - 1.0) * np.sign(t)


@dataclass
class ReconstructionConfig:
    iterations: int = 2000
    learning_rate: float = 1e-2
    beta_start: float = 20.0
    beta_end: float = 2.0
    lambda_reg: float = 0.01
    batch_size: int = 1
    warmup_fraction: float = 0.2
    fisher_damp: float = 0.01
    log_every: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise DomainError("iterations must be >= 1")
        if not self.beta_start >= self.beta_end > 0:
            raise DomainError("need beta_start >= beta_end > 0")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise DomainError("warmup_fraction must lie in [0, 1)")


@dataclass
class RoundingState:
    v: np.ndarray
    beta: float
    lambda_reg: float
    step: int = 0


@dataclass
class ReconstructionResult:
    weights: np.ndarray          # dequantized quantized weights
    v: np.ndarray
    rounding: np.ndarray         # 0/1 rounding-up decisions
    params: QuantParams
    loss: float                  # quadratic loss of the final rounding
    rtn_loss: float
    trace: list[dict] = field(default_factory=list)


class RoundingObjective:
    """Differentiable surrogate: normalised Kronecker loss + lambda * h(v).

    The straight-through rule is used on the grid clip, so d w_hat / d h = s.
    """

    def __init__(self, W: np.ndarray, f: KfacFactors, params: QuantParams):
        self.W = np.asarray(W, dtype=np.float64)
        self.f = f
        self.s, self.zp = params.broadcast(2)
        self.qmax = params.qmax
        self.base = np.floor(self.W / self.s)
        mean_s2 = float(np.mean(np.broadcast_to(self.s, self.W.shape) ** 2))
        curv = float(np.trace(f.G) * np.trace(f.A)) / self.W.size
        self.norm = mean_s2 * curv if mean_s2 * curv > 0 else 1.0

    def quantized(self, h: np.ndarray) -> np.ndarray:
        return self.s * (np.clip(self.base + h + self.zp, 0, self.qmax) - self.zp)

    def loss(self, h: np.ndarray) -> float:
        return quadratic_loss(self.W - self.quantized(h), self.f)

    def __call__(self, v: np.ndarray, beta: float, lam: float) -> tuple[float, float, np.ndarray]:
        h = rectified_sigmoid(v)
        D = self.W - self.quantized(h)
        GDA = self.f.G @ D @ self.f.A
        rec = float(np.sum(GDA * D)) / self.norm
        d_h = (-2.0 / self.norm) * GDA * self.s
        pen = 0.0
        if lam > 0:
            pen = float(np.sum(1.0 - np.abs(2.0 * h - 1.0) ** beta))
            d_h = d_h + lam * _regularizer_grad_h(h, beta)
        return rec + lam * pen, pen, d_h * _rectified_sigmoid_grad(v)


def _beta_schedule(cfg: ReconstructionConfig, step: int, warmup: int) -> float:
    span = cfg.iterations - warmup
    if span <= 1:
        return cfg.beta_end
    t = (step - warmup) / (span - 1)
    return cfg.beta_start * (cfg.beta_end / cfg.beta_start) ** t


def reconstruct_layer(W: np.ndarray, f: KfacFactors, cfg: ReconstructionConfig | None = None,
                      params: QuantParams | None = None, bits: int = 4) -> ReconstructionResult:
    """Learn per-weight floor/ceil decisions minimising the Fisher-weighted error.

    ``params`` defaults to per-output-channel asymmetric min/max params.
    Adam runs on the rounding variables; the binarisation penalty switches
    on after the warm-up and its exponent is annealed geometrically.
    """
    cfg = cfg or ReconstructionConfig()
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeError(f"reconstruct_layer expects a 2-D weight, got {W.shape}")
    if not np.all(np.isfinite(W)):
        raise DomainError("layer weights must be finite")
    params = params or fit_minmax(W, bits, axis=0)
    obj = RoundingObjective(W, f, params)

    frac = W / obj.s - obj.base
    v = inverse_rectified_sigmoid(np.clip(frac, 0.0, 1.0))
    rtn = (round_half_away(frac) >= 1).astype(np.float64)
    rtn_loss = obj.loss(rtn)

    state = RoundingState(v, cfg.beta_start, cfg.lambda_reg)
    m = np.zeros_like(v)
    u = np.zeros_like(v)
    b1, b2, eps = 0.9, 0.999, 1e-8
    warmup = int(cfg.warmup_fraction * cfg.iterations)
    trace = []
    for step in range(cfg.iterations):
        lam = 0.0 if step < warmup else cfg.lambda_reg
        beta = _beta_schedule(cfg, step, warmup) if step >= warmup else cfg.beta_start
        total, pen, grad = obj(state.v, beta, lam)
        if not math.isfinite(total):
            raise OptimizationError(
                f"rounding optimisation diverged at step {step} (learning_rate={cfg.learning_rate})"
            )
        m = b1 * m + (1 - b1) * grad
        u = b2 * u + (1 - b2) * grad * grad
        mh = m / (1 - b1 ** (step + 1))
        uh = u / (1 - b2 ** (step + 1))
        state.v = state.v - cfg.learning_rate * mh / (np.sqrt(uh) + eps)
        state.step, state.beta = step + 1, beta
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.iterations - 1):
            rec = {"step": step, "loss": total, "penalty": pen, "beta": beta}
            trace.append(rec)
            log.debug("reconstruct %s", rec)

    hard = (rectified_sigmoid(state.v) >= 0.5).astype(np.float64)
    # local search; ambiguity = distance of the relaxed decision from 1/2
    hard = _local_search(obj, hard, np.abs(rectified_sigmoid(state.v) - 0.5))
    loss = obj.loss(hard)
    if rtn_loss < loss:
        hard, loss = rtn, rtn_loss
    # saturate v so the stored state agrees with the hard decision
    v_out = np.where(hard > 0, 10.0, -10.0)
    return ReconstructionResult(obj.quantized(hard), v_out, hard, params, loss, rtn_loss, trace)


PAIR_FLIP_MAX_SIZE = 256
BLOCK_SIZE = 12
MAX_BLOCKS = 8


def _flip_gains(obj: RoundingObjective, hard: np.ndarray):
    Wq = obj.quantized(hard)
    D = obj.W - Wq
    GDA = obj.f.G @ D @ obj.f.A
    # change of D at each entry if that entry alone were flipped (clip-aware)
    delta = Wq - obj.quantized(1.0 - hard)
    tol = 1e-15 * max(abs(float(np.sum(GDA * D))), 1e-300)
    return delta, GDA, tol


def _kron_block(obj: RoundingObjective, idx: np.ndarray) -> np.ndarray:
    r, c = np.unravel_index(idx, obj.W.shape)
    return obj.f.G[np.ix_(r, r)] * obj.f.A[np.ix_(c, c)]


def _flip_descent(obj: RoundingObjective, hard: np.ndarray, max_sweeps: int = 200) -> np.ndarray:
    """Greedy flips on the binary rounding until no single flip (or, on small
    layers, no pair of flips) lowers the loss.

    Uses the exact change in the quadratic form for each candidate move, so
    one sweep costs one G @ D @ A product plus O(size) work (O(size^2) for
    the pair stage, which is why it is limited to small layers).
    """
    dG = np.diag(obj.f.G)[:, None]
    dA = np.diag(obj.f.A)[None, :]
    pairs = hard.size <= PAIR_FLIP_MAX_SIZE
    K = np.kron(obj.f.G, obj.f.A) if pairs else None
    hard = hard.copy()
    flat = hard.reshape(-1)
    for _ in range(max_sweeps):
        delta, GDA, tol = _flip_gains(obj, hard)
        gain = 2.0 * delta * GDA + delta * delta * dG * dA
        i = int(np.argmin(gain))
        if gain.flat[i] < -tol:
            flat[i] = 1.0 - flat[i]
            continue
        if not pairs:
            break
        d = delta.ravel()
        g = gain.ravel()
        pg = g[:, None] + g[None, :] + 2.0 * np.outer(d, d) * K
        np.fill_diagonal(pg, np.inf)
        i, j = np.unravel_index(np.argmin(pg), pg.shape)
        if not pg[i, j] < -tol:
            break
        flat[i] = 1.0 - flat[i]
        flat[j] = 1.0 - flat[j]
    return hard


def _block_search(obj: RoundingObjective, hard: np.ndarray, ambiguity: np.ndarray,
                  block: int = BLOCK_SIZE, max_blocks: int = MAX_BLOCKS) -> tuple[np.ndarray, bool]:
    """Exact enumeration of every flip pattern inside small blocks of weights.

    Blocks are cut from the ``block * max_blocks`` most ambiguous weights
    (smallest ``ambiguity``).  A layer with at most ``block`` weights is a
    single block, so the search is then exhaustive.
    """
    hard = hard.copy()
    flat = hard.reshape(-1)
    order = np.argsort(ambiguity.ravel(), kind="stable")[: block * max_blocks]
    improved = False
    for start in range(0, order.size, block):
        idx = np.sort(order[start : start + block])
        delta, GDA, tol = _flip_gains(obj, hard)
        d = delta.ravel()[idx]
        u = d * GDA.ravel()[idx]
        M = np.outer(d, d) * _kron_block(obj, idx)
        Z = ((np.arange(1 << idx.size)[:, None] >> np.arange(idx.size)) & 1).astype(np.float64)
        change = 2.0 * Z @ u + np.einsum("pj,jk,pk->p", Z, M, Z)
        best = int(np.argmin(change))
        if change[best] < -tol:
            flip = idx[Z[best] > 0]
            flat[flip] = 1.0 - flat[flip]
            improved = True
    return hard, improved


def _local_search(obj: RoundingObjective, hard: np.ndarray, ambiguity: np.ndarray,
                  max_rounds: int = 20) -> np.ndarray:
    for _ in range(max_rounds):
        hard = _flip_descent(obj, hard)
        hard, improved = _block_search(obj, hard, ambiguity)
        if not improved:
            break
    return hard
