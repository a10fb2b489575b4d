"""Compensated floating-point primitives.

Everything in this module manipulates IEEE binary64 values under
round-to-nearest-even and is deliberately written so that no compiler or
JIT transformation may reassociate or contract the arithmetic: the jitted
kernels are compiled with numba's default strict FP semantics (no
fastmath, no FMA contraction), and the interpreted paths use plain Python
floats, which map 1:1 onto hardware operations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

#: Significand width of the working binary64 arithmetic.
PRECISION = 53

#: Residual-to-ulp slack allowed for a compensated vector (see
#: CompensatedVector.validate).
RESIDUAL_SLACK = 4.0

_SPLITTER = 134217729.0  # 2**27 + 1, Dekker's splitting constant


class AccumulationError(ArithmeticError):
    """A compensated accumulation produced a non-finite component."""

    def __init__(self, component: int, message: str | None = None):
        self.component = component
        super().__init__(message or f"non-finite value in component {component}")


class EstimatorRangeError(ArithmeticError):
    """Scaling by 2**r overflowed in reduced-precision rounding."""


def assert_round_to_nearest() -> None:
    """Verify the ambient arithmetic rounds to nearest, ties to even.

    The error-capturing identities used throughout (Kahan residuals,
    reduced-precision rounding, exact-product residuals) are only valid
    under round-to-nearest-even, so we refuse to run otherwise.
    """
    probes = (
        1.0 + 2.0**-53 == 1.0,                    # tie rounds down to even
        1.0 + 2.0**-52 + 2.0**-53 == 1.0 + 2.0**-51,  # tie rounds up to even
        -1.0 - 2.0**-53 == -1.0,                  # symmetric in sign
        (1.0 + 2.0**-52) - 1.0 == 2.0**-52,       # exact small differences survive
    )
    if not all(probes):
        raise RuntimeError(
            "floating-point environment is not round-to-nearest-even; "
            "compensated arithmetic would be silently wrong"
        )


@njit(cache=True)
def two_sum(a, b):
    """Error-free transform of one addition.

    Returns (s, t) with s = fl(a + b) and s + t == a + b exactly
    (Knuth's branch-free 2Sum; valid for any finite operands).
    """
    s = a + b
    bv = s - a
    av = s - bv
    br = b - bv
    ar = a - av
    return s, ar + br


@njit(cache=True)
def product_residual(a, b, ab):
    """Exact residual a*b - ab for ab = fl(a*b), via Dekker splitting.

    Equivalent to fma(a, b, -ab) when the product neither overflows nor
    loses bits to subnormals; used where a fused multiply-add would be.
    """
    ah = a * _SPLITTER
    ah = ah - (ah - a)
    al = a - ah
    bh = b * _SPLITTER
    bh = bh - (bh - b)
    bl = b - bh
    return ((ah * bh - ab) + ah * bl + al * bh) + al * bl


@njit(cache=True)
def _kahan_kernel(main, resid, terms):
    """In-place compensated accumulation of `terms` rows into (main, resid).

    Implements, per component, the textbook compensated update
        X = fl(x + e); y' = fl(y + X); Xh = fl(y' - y); e' = fl(X - Xh)
    for each row x of `terms` in order. Returns the index of the first
    non-finite component, or -1.
    """
    n, d = terms.shape
    for c in range(d):
        y = main[c]
        e = resid[c]
        for l in range(n):
            x = terms[l, c] + e
            ynew = y + x
            xhat = ynew - y
            e = x - xhat
            y = ynew
        main[c] = y
        resid[c] = e
        if not (np.isfinite(y) and np.isfinite(e)):
            return c
    return -1


@njit(cache=True)
def _round_reduced_kernel(x, r):
    big = math.ldexp(x, r)  # exact scaling by 2**r
    t = big + x
    return t - big


@dataclass
class CompensatedVector:
    """A vector represented as an unevaluated sum main + residual.

    `main` holds the leading binary64 digits, `residual` the accumulated
    rounding corrections; the represented value is their exact real sum.
    """

    main: np.ndarray
    residual: np.ndarray

    def __post_init__(self):
        self.main = np.ascontiguousarray(self.main, dtype=np.float64)
        self.residual = np.ascontiguousarray(self.residual, dtype=np.float64)
        if self.main.shape != self.residual.shape or self.main.ndim != 1:
            raise ValueError("main and residual must be 1-D arrays of equal length")

    @classmethod
    def from_float(cls, values) -> "CompensatedVector":
        main = np.ascontiguousarray(values, dtype=np.float64)
        return cls(main, np.zeros_like(main))

    @property
    def dimension(self) -> int:
        return self.main.shape[0]

    def copy(self) -> "CompensatedVector":
        return CompensatedVector(self.main.copy(), self.residual.copy())

    def validate(self) -> None:
        """Check the type invariants: finiteness and residual scale.

        The residual of a well-formed compensated value stays at the
        rounding-error scale of the main part: |e_j| <= 4 ulp(y_j).
        """
        if not np.isfinite(self.main).all() or not np.isfinite(self.residual).all():
            bad = int(np.argmin(np.isfinite(self.main) & np.isfinite(self.residual)))
            raise AccumulationError(bad)
        limit = RESIDUAL_SLACK * np.abs(np.spacing(self.main))
        over = np.abs(self.residual) > limit
        if over.any():
            bad = int(np.argmax(over))
            raise AccumulationError(
                bad,
                f"residual {self.residual[bad]!r} exceeds {RESIDUAL_SLACK} ulp "
                f"of main {self.main[bad]!r} in component {bad}",
            )


def kahan_accumulate(acc: CompensatedVector, terms) -> CompensatedVector:
    """Accumulate a sequence of machine vectors into a compensated vector.

    Each term is folded in with one compensated update per component, so
    the returned pair (main, residual) represents the running sum with an
    error far below naive recursive addition. The input is not modified.

    Raises AccumulationError (with the offending component index) if the
    running sum overflows to a non-finite value.
    """
    t = np.ascontiguousarray(terms, dtype=np.float64)
    if t.ndim == 1:
        t = t.reshape(1, -1)
    if t.shape[1] != acc.dimension:
        raise ValueError(f"terms have length {t.shape[1]}, expected {acc.dimension}")
    if not np.isfinite(t).all():
        bad = int(np.argmin(np.isfinite(t).all(axis=0)))
        raise AccumulationError(bad, f"non-finite term in component {bad}")
    out = acc.copy()
    bad = _kahan_kernel(out.main, out.residual, t)
    if bad >= 0:
        raise AccumulationError(int(bad))
    out.validate()
    return out


def round_reduced(x: float, r: int) -> float:
    """Round a binary64 value to 53 - r significand bits.

    Computed literally as fl(2**r * x + x) - 2**r * x: the scaling is done
    by exponent manipulation (exact), the addition performs the single
    rounding, and the final subtraction is exact. Whenever the result does
    not cross a binade boundary its lowest r significand bits are zero.

    r = 0 is the identity. Raises EstimatorRangeError if 2**r * x
    overflows.
    """
    if not 0 <= r < PRECISION:
        raise ValueError(f"r must be in [0, {PRECISION}), got {r}")
    x = float(x)
    if r == 0 or x == 0.0 or not math.isfinite(x):
        return x
    big = math.ldexp(x, r)
    if not math.isfinite(big):
        raise EstimatorRangeError(f"2**{r} * {x!r} overflows")
    return _round_reduced_kernel(x, r)


def round_reduced_array(x: np.ndarray, r: int) -> np.ndarray:
    """Vectorized round_reduced for finite arrays (same formula)."""
    if not 0 <= r < PRECISION:
        raise ValueError(f"r must be in [0, {PRECISION}), got {r}")
    x = np.asarray(x, dtype=np.float64)
    big = np.ldexp(x, r)
    if not np.isfinite(big).all():
        raise EstimatorRangeError("2**r scaling overflowed")
    return (big + x) - big


assert_round_to_nearest()
