"""Gauss collocation tableaus and their machine-number counterparts.

Tableaus are generated at runtime in extended precision (gmpy2/MPFR) and
converted to binary64 with a single rounding per coefficient, never read
from decimal literals. The machine form stores the stage-coupling ratios
coupling[i][j] ~ a[i][j] / b[j], whose defining property is that
coupling[i][j] + coupling[j][i] == 1 holds bitwise, which is what makes
the binary64 scheme symplectic despite rounded coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import gmpy2
import numpy as np
from gmpy2 import mpfr

from .compensated import PRECISION, two_sum

#: Default working precision for tableau generation; comfortably above the
#: 2 * 53 + 16 bits needed for clean single-rounding conversion.
DEFAULT_BITS = 192

MAX_STAGES = 16

_NEWTON_LIMIT = 200


class TableauError(ValueError):
    """Tableau generation or conversion failed."""


@dataclass(frozen=True)
class GaussTableau:
    """Extended-precision Gauss collocation tableau.

    nodes, weights and matrix are tuples of gmpy2.mpfr carrying the full
    generation precision; immutable and safe to share between threads.
    """

    stages: int
    nodes: tuple
    weights: tuple
    matrix: tuple  # s tuples of s mpfr entries
    bits: int

    def validate(self) -> None:
        s = self.stages
        with gmpy2.local_context(gmpy2.context(), precision=self.bits + 16):
            tol = mpfr(2) ** (-2 * PRECISION)
            for i in range(s):
                if not (0 < self.nodes[i] < 1):
                    raise TableauError(f"node {i} outside (0, 1)")
                if i and self.nodes[i] <= self.nodes[i - 1]:
                    raise TableauError("nodes not strictly increasing")
                if abs(self.nodes[i] + self.nodes[s - 1 - i] - 1) > tol:
                    raise TableauError(f"node symmetry violated at {i}")
                if self.weights[i] <= 0:
                    raise TableauError(f"weight {i} not positive")
                if abs(self.weights[i] - self.weights[s - 1 - i]) > tol:
                    raise TableauError(f"weight symmetry violated at {i}")
            if abs(sum(self.weights) - 1) > tol:
                raise TableauError("weights do not sum to 1")
            b, a = self.weights, self.matrix
            for i in range(s):
                for j in range(s):
                    res = b[i] * a[i][j] + b[j] * a[j][i] - b[i] * b[j]
                    if abs(res) > tol:
                        raise TableauError(
                            f"symplecticity residual {float(res):.3e} at ({i},{j})"
                        )


@dataclass(frozen=True, eq=False)
class MachineTableau:
    """Binary64 tableau satisfying the symplecticity condition bitwise.

    weights are the rounded quadrature weights; coupling is the s x s
    matrix whose pairs sum to exactly 1.0. step_weights (the per-stage
    step fractions summing to the step size) are populated per step size
    via with_step_size and are None until then.
    """

    stages: int
    weights: np.ndarray
    coupling: np.ndarray
    step_weights: np.ndarray | None = None
    step_size: float | None = None
    source: GaussTableau | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen(self.weights))
        object.__setattr__(self, "coupling", _frozen(self.coupling))
        if self.step_weights is not None:
            object.__setattr__(self, "step_weights", _frozen(self.step_weights))

    def validate(self) -> None:
        s = self.stages
        for i in range(s):
            if self.coupling[i, i] != 0.5:
                raise TableauError(f"diagonal coupling at {i} is not exactly 1/2")
            for j in range(i):
                hi, lo = two_sum(self.coupling[i, j], self.coupling[j, i])
                if hi != 1.0 or lo != 0.0:
                    raise TableauError(
                        f"coupling pair ({i},{j}) does not sum to 1 bitwise"
                    )
                if not (0.5 < abs(self.coupling[i, j]) < 2.0):
                    raise TableauError(
                        f"coupling magnitude out of (1/2, 2) at ({i},{j})"
                    )

    def with_step_size(self, h: float) -> "MachineTableau":
        """Return a copy carrying the per-stage step fractions for h."""
        if self.source is None:
            raise TableauError("tableau has no extended-precision source attached")
        hb = step_fractions(self, self.source, h)
        return MachineTableau(
            self.stages, self.weights, self.coupling, hb, float(h), self.source
        )


def _frozen(arr) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


def _legendre_pair(t, n: int):
    """Value and derivative of the degree-n Legendre polynomial at t."""
    p0, p1 = mpfr(1), t
    if n == 0:
        return p0, mpfr(0)
    for k in range(1, n):
        p0, p1 = p1, ((2 * k + 1) * t * p1 - k * p0) / (k + 1)
    dp = n * (t * p1 - p0) / (t * t - 1)
    return p1, dp


def _legendre_roots(s: int, bits: int) -> list:
    """Roots of the degree-s Legendre polynomial on (-1, 1).

    Brackets come from a uniform sign-change scan (the scan resolution
    always separates the s simple roots); each bracket is polished by
    bisection-guarded Newton iteration. A root landing exactly on a scan
    point (t = 0 for odd s) is taken as-is.
    """
    n_grid = 8 * s + 8
    xs = [mpfr(-1) + mpfr(2 * i) / n_grid for i in range(n_grid + 1)]
    vals = [_legendre_pair(x, s)[0] for x in xs]
    roots = [xs[i] for i in range(n_grid + 1) if vals[i] == 0]
    brackets = [
        (xs[i], xs[i + 1])
        for i in range(n_grid)
        if vals[i] != 0 and vals[i + 1] != 0 and (vals[i] < 0) != (vals[i + 1] < 0)
    ]
    if len(roots) + len(brackets) != s:
        raise TableauError(f"root scan found {len(roots) + len(brackets)} != {s} roots")
    step_tol = mpfr(2) ** (2 - bits)
    for lo, hi in brackets:
        neg_lo = _legendre_pair(lo, s)[0] < 0
        x = (lo + hi) / 2
        for _ in range(_NEWTON_LIMIT):
            f, df = _legendre_pair(x, s)
            if f == 0:
                break
            if (f < 0) == neg_lo:
                lo = x
            else:
                hi = x
            xn = x - f / df if df != 0 else (lo + hi) / 2
            if not (lo < xn < hi):
                xn = (lo + hi) / 2
            if abs(xn - x) <= abs(x) * step_tol:
                x = xn
                break
            x = xn
        else:
            raise TableauError(
                f"Newton iteration for stage count {s} did not converge "
                f"within {_NEWTON_LIMIT} iterations"
            )
        roots.append(x)
    roots.sort()
    return roots


def generate_gauss(stages: int, bits: int = DEFAULT_BITS) -> GaussTableau:
    """Generate the s-stage Gauss collocation tableau at `bits` precision.

    Nodes are the roots of the shifted Legendre polynomial; weights come
    from the classical closed form; the matrix rows solve the collocation
    moment conditions sum_j a[i][j] * c[j]**(k-1) = c[i]**k / k.
    """
    if not 1 <= stages <= MAX_STAGES:
        raise TableauError(f"stage count must be in [1, {MAX_STAGES}], got {stages}")
    if bits < 2 * PRECISION:
        raise TableauError(f"generation precision must be >= {2 * PRECISION} bits")
    with gmpy2.local_context(gmpy2.context(), precision=bits):
        roots = _legendre_roots(stages, bits)
        nodes = [(t + 1) / 2 for t in roots]
        weights = []
        for t in roots:
            _, dp = _legendre_pair(t, stages)
            weights.append(1 / ((1 - t * t) * dp * dp))
        matrix = [_collocation_row(nodes, i, stages) for i in range(stages)]
    tab = GaussTableau(
        stages=stages,
        nodes=tuple(nodes),
        weights=tuple(weights),
        matrix=tuple(tuple(row) for row in matrix),
        bits=bits,
    )
    tab.validate()
    return tab


def _collocation_row(nodes, i: int, s: int) -> list:
    """Solve the i-th row of the collocation conditions (Gauss-Jordan)."""
    m = [
        [nodes[j] ** k for j in range(s)] + [nodes[i] ** (k + 1) / (k + 1)]
        for k in range(s)
    ]
    for col in range(s):
        piv = max(range(col, s), key=lambda r: abs(m[r][col]))
        m[col], m[piv] = m[piv], m[col]
        for r in range(s):
            if r != col:
                fac = m[r][col] / m[col][col]
                for cc in range(col, s + 1):
                    m[r][cc] -= fac * m[col][cc]
    return [m[j][s] / m[j][j] for j in range(s)]


def make_machine_tableau(gauss: GaussTableau) -> MachineTableau:
    """Convert an extended tableau to bitwise-symplectic binary64 form.

    The strictly-lower coupling entries are the extended ratios
    a[i][j]/b[j] rounded once to binary64; they must have magnitude in
    (1/2, 2) so that the mirror entries 1 - coupling[i][j] are computed
    exactly (Sterbenz). The diagonal is exactly 1/2. Violations are
    reported, never silently rounded.
    """
    s = gauss.stages
    coupling = np.empty((s, s), dtype=np.float64)
    with gmpy2.local_context(gmpy2.context(), precision=gauss.bits):
        for i in range(s):
            coupling[i, i] = 0.5
            for j in range(i):
                ratio = float(gauss.matrix[i][j] / gauss.weights[j])  # one rounding
                if not 0.5 < abs(ratio) < 2.0:
                    raise TableauError(
                        f"coupling ratio {ratio!r} at ({i},{j}) outside (1/2, 2); "
                        "tableau unsupported for exact mirroring"
                    )
                coupling[i, j] = ratio
                coupling[j, i] = 1.0 - ratio  # exact: ratio is in [1/2, 2]
        weights = np.array([float(b) for b in gauss.weights])
    tab = MachineTableau(s, weights, coupling, source=gauss)
    tab.validate()
    return tab


def step_fractions(
    machine: MachineTableau, gauss: GaussTableau, h: float
) -> np.ndarray:
    """Per-stage step fractions for step size h.

    Interior entries are fl(h * b_i) with the extended weight rounded
    once; the two end entries are set equal and absorb the remainder,
    fl(fl(h - sum_{i=2..s-1}) / 2), with the subtraction and halving in
    binary64. Their total matches h to within (s + 1) ulp of h.
    """
    h = float(h)
    if not np.isfinite(h):
        raise ValueError("step size must be finite")
    if h <= 0:
        raise ValueError("step size must be positive")
    if machine.stages != gauss.stages:
        raise TableauError("machine and extended tableaus have different stage counts")
    s = machine.stages
    hb = np.empty(s, dtype=np.float64)
    with gmpy2.local_context(gmpy2.context(), precision=gauss.bits):
        for i in range(1, s - 1):
            hb[i] = float(h * gauss.weights[i])
        if s == 1:
            # Single stage: nothing to redistribute, b_0 = 1 exactly.
            hb[0] = float(h * gauss.weights[0])
            return hb
    interior = 0.0
    for i in range(1, s - 1):
        interior = interior + hb[i]
    end = (h - interior) / 2.0
    hb[0] = end
    hb[s - 1] = end
    return hb
