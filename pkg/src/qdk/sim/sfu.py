"""Software model of the VCU special-function unit: float32 log2 / exp2 via
range reduction plus minimax polynomials (coefficients from
scripts/fit_sfu_coefficients.py)."""

from __future__ import annotations

import numpy as np

from ..errors import DomainError

F32 = np.float32

# log2(m) = t * P(t^2), t = (m-1)/(m+1), m in [sqrt(1/2), sqrt(2)]
LOG2_COEFFS = np.array(
    [2.885390043258667, 0.9617988467216492, 0.5767143964767456, 0.4317358732223511], dtype=F32
)
# 2^f = Q(f), f in [-1/2, 1/2]
EXP2_COEFFS = np.array(
    [1.0, 0.6931471824645996, 0.24022646248340607, 0.05550328642129898,
     0.009618489071726799, 0.0013399930903688073, 0.0001534581242594868],
    dtype=F32,
)
EXP2_MIN, EXP2_MAX = -126.0, 127.0
SQRT2 = F32(np.sqrt(2.0))


def _horner(coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    acc = np.full_like(x, coeffs[-1])
    for c in coeffs[-2::-1]:
        acc = acc * x + c
    return acc


def sfu_log2(x):
    """float32 log2 for positive normal inputs."""
    x = np.asarray(x, dtype=F32)
    if np.any(~(x > 0)):
        raise DomainError("sfu_log2 is only defined for positive inputs")
    m, e = np.frexp(x)
    m = m * F32(2.0)                    # [1, 2)
    e = (e - 1).astype(F32)
    big = m > SQRT2
    m = np.where(big, m * F32(0.5), m)  # [sqrt(1/2), sqrt(2)]
    e = np.where(big, e + F32(1.0), e)
    t = (m - F32(1.0)) / (m + F32(1.0))
    r = t * _horner(LOG2_COEFFS, t * t)
    out = e + r
    return out if out.ndim else F32(out)


def sfu_exp2(x):
    """float32 2^x for x in [-126, 127] (normal results only)."""
    x = np.asarray(x, dtype=F32)
    if np.any((x < EXP2_MIN) | (x > EXP2_MAX)) or np.any(np.isnan(x)):
        raise DomainError(f"sfu_exp2 argument outside [{EXP2_MIN}, {EXP2_MAX}]")
    n = np.rint(x)
    f = x - n                            # exact, |f| <= 1/2
    out = np.ldexp(_horner(EXP2_COEFFS, f), n.astype(np.int32)).astype(F32)
    return out if out.ndim else F32(out)


def ulp_error(approx, reference) -> np.ndarray:
    """|approx - reference| in float32 units-in-the-last-place of ``reference``.

    ``reference`` is a float64 high-precision value; it is rounded to float32
    first so a correctly rounded result scores 0.
    """
    ref32 = np.asarray(reference, dtype=np.float64).astype(F32)
    spacing = np.spacing(np.abs(ref32)).astype(np.float64)
    return np.abs(np.asarray(approx, dtype=np.float64) - ref32.astype(np.float64)) / spacing
