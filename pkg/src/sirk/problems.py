"""Benchmark Hamiltonian systems behind a uniform machine-valued interface.

Two systems are shipped: the planar double pendulum (4 state components)
and the outer solar system, a six-body point-mass model (36 components).
Right-hand sides are binary64-in / binary64-out jitted functions; energies
and other conserved quantities evaluate in extended precision so that
measurement noise stays far below the round-off effects being studied.

Double pendulum conventions and derivation
------------------------------------------
State y = (phi, theta, p_phi, p_theta). phi is the first rod's angle from
the vertical; the second rod's angle is phi + theta. With

    A = l1^2 (m1 + m2),  B = l2^2 m2,  C = l1 l2 m2,  W = p_theta - p_phi,
    N = A p_theta^2 + B W^2 + 2 C p_theta W cos(theta),
    Q = l1^2 l2^2 m2 (-2 m1 - m2 + m2 cos(2 theta))        (Q < 0),

the Hamiltonian is

    H = -N/Q - g cos(phi) (l1 (m1 + m2) + l2 m2 cos(theta))
        + g l2 m2 sin(theta) sin(phi),

which equals the Legendre transform of the usual double-pendulum
Lagrangian in these coordinates (checked symbolically and, in the test
suite, by an independent extended-precision reconstruction). The frozen
partial derivatives below follow from the quotient rule:

    dH/dp_phi   = (2 B W + 2 C p_theta cos(theta)) / Q
    dH/dp_theta = -(2 A p_theta + 2 B W + 2 C (2 p_theta - p_phi) cos(theta)) / Q
    dH/dphi     = g sin(phi) (l1 (m1 + m2) + l2 m2 cos(theta))
                  + g l2 m2 sin(theta) cos(phi)
    dH/dtheta   = -N_theta / Q + N Q_theta / Q^2
                  + g l2 m2 (sin(theta) cos(phi) + cos(theta) sin(phi))
      with N_theta = -2 C p_theta W sin(theta),
           Q_theta = -2 l1^2 l2^2 m2^2 sin(2 theta).
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

import gmpy2
import numpy as np
from gmpy2 import mpfr
from numba import njit

#: Extended-precision default for energy / invariant evaluation.
ENERGY_BITS = 128


class SingularConfigurationError(ArithmeticError):
    """Two bodies coincide; the potential is singular."""


@dataclass(frozen=True, eq=False)
class ODESystem:
    """An autonomous ODE dy/dt = f(y) with machine-valued evaluation.

    rhs is a jitted pure function mapping a float64 vector of length
    `dimension` to a new float64 vector (bitwise deterministic).
    rhs_extended mirrors the same formulas on gmpy2 numbers under the
    caller's context. energy and quadratic_invariants map a list of
    extended values to extended scalars.
    """

    dimension: int
    rhs: object
    label: str
    energy: object | None = None
    rhs_extended: object | None = None
    quadratic_invariants: tuple = ()
    initial_states: dict = field(default_factory=dict)

    def energy_of(self, main, residual=None, bits: int = ENERGY_BITS):
        """Energy of a (compensated) state, evaluated in extended precision."""
        if self.energy is None:
            raise ValueError(f"system {self.label!r} has no energy function")
        with gmpy2.local_context(gmpy2.context(), precision=bits):
            y = _lift(main, residual)
            return self.energy(y)


def _lift(main, residual=None):
    """main + residual as exact extended values (one fused add per entry)."""
    if residual is None:
        return [mpfr(float(v)) for v in main]
    return [mpfr(float(a)) + mpfr(float(b)) for a, b in zip(main, residual)]


# ---------------------------------------------------------------------------
# Planar double pendulum
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DoublePendulumParams:
    gravity: float = 9.8
    length_1: float = 1.0
    length_2: float = 1.0
    mass_1: float = 1.0
    mass_2: float = 1.0

    def __post_init__(self):
        for name in ("gravity", "length_1", "length_2", "mass_1", "mass_2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def _dp_terms(params, num):
    """Shared parameter combinations, built with `num` as the scalar type."""
    g = num(params.gravity)
    l1 = num(params.length_1)
    l2 = num(params.length_2)
    m1 = num(params.mass_1)
    m2 = num(params.mass_2)
    return g, l1, l2, m1, m2


def dp_hamiltonian(q, p, params: DoublePendulumParams | None = None, bits: int = ENERGY_BITS):
    """Double-pendulum energy at (q, p) = ((phi, theta), (p_phi, p_theta)).

    Evaluated in extended precision; accepts floats or gmpy2 numbers.
    """
    params = params or DoublePendulumParams()
    with gmpy2.local_context(gmpy2.context(), precision=bits):
        y = [mpfr(v) for v in (*q, *p)]
        return _dp_energy_ext(y, params)


def _dp_energy_ext(y, params):
    g, l1, l2, m1, m2 = _dp_terms(params, mpfr)
    phi, theta, p_phi, p_theta = y
    a = l1 * l1 * (m1 + m2)
    b = l2 * l2 * m2
    c = l1 * l2 * m2
    w = p_theta - p_phi
    ct = gmpy2.cos(theta)
    num = a * p_theta * p_theta + b * w * w + 2 * c * p_theta * w * ct
    den = l1 * l1 * l2 * l2 * m2 * (-2 * m1 - m2 + m2 * gmpy2.cos(2 * theta))
    if den == 0:
        raise ValueError("degenerate parameters: kinetic denominator vanished")
    return (
        -num / den
        - g * gmpy2.cos(phi) * (l1 * (m1 + m2) + l2 * m2 * ct)
        + g * l2 * m2 * gmpy2.sin(theta) * gmpy2.sin(phi)
    )


def _make_dp_rhs(params: DoublePendulumParams):
    g, l1, l2, m1, m2 = _dp_terms(params, float)
    a_c = l1 * l1 * (m1 + m2)
    b_c = l2 * l2 * m2
    c_c = l1 * l2 * m2
    den_c = l1 * l1 * l2 * l2 * m2
    m2sq = m2 * m2
    den2_c = l1 * l1 * l2 * l2 * m2sq
    pot1 = l1 * (m1 + m2)
    pot2 = l2 * m2
    neg2m1m2 = -2.0 * m1 - m2

    @njit(cache=False)
    def rhs(y):
        phi = y[0]
        theta = y[1]
        p_phi = y[2]
        p_theta = y[3]
        st = np.sin(theta)
        ct = np.cos(theta)
        s2t = np.sin(2.0 * theta)
        c2t = np.cos(2.0 * theta)
        sp = np.sin(phi)
        cp = np.cos(phi)
        w = p_theta - p_phi
        q = den_c * (neg2m1m2 + m2 * c2t)
        num = a_c * p_theta * p_theta + b_c * w * w + 2.0 * c_c * p_theta * w * ct
        num_t = -2.0 * c_c * p_theta * w * st
        q_t = -2.0 * den2_c * s2t
        out = np.empty(4)
        out[0] = (2.0 * b_c * w + 2.0 * c_c * p_theta * ct) / q
        out[1] = -(2.0 * a_c * p_theta + 2.0 * b_c * w
                   + 2.0 * c_c * (2.0 * p_theta - p_phi) * ct) / q
        out[2] = -(g * sp * (pot1 + pot2 * ct) + g * pot2 * st * cp)
        out[3] = num_t / q - num * q_t / (q * q) - g * pot2 * (st * cp + ct * sp)
        return out

    return rhs


def _make_dp_rhs_ext(params: DoublePendulumParams):
    def rhs_ext(y):
        g, l1, l2, m1, m2 = _dp_terms(params, mpfr)
        phi, theta, p_phi, p_theta = y
        a = l1 * l1 * (m1 + m2)
        b = l2 * l2 * m2
        c = l1 * l2 * m2
        st = gmpy2.sin(theta)
        ct = gmpy2.cos(theta)
        s2t = gmpy2.sin(2 * theta)
        c2t = gmpy2.cos(2 * theta)
        sp = gmpy2.sin(phi)
        cp = gmpy2.cos(phi)
        w = p_theta - p_phi
        q = l1 * l1 * l2 * l2 * m2 * (-2 * m1 - m2 + m2 * c2t)
        num = a * p_theta * p_theta + b * w * w + 2 * c * p_theta * w * ct
        num_t = -2 * c * p_theta * w * st
        q_t = -2 * l1 * l1 * l2 * l2 * m2 * m2 * s2t
        pot1 = l1 * (m1 + m2)
        pot2 = l2 * m2
        return [
            (2 * b * w + 2 * c * p_theta * ct) / q,
            -(2 * a * p_theta + 2 * b * w + 2 * c * (2 * p_theta - p_phi) * ct) / q,
            -(g * sp * (pot1 + pot2 * ct) + g * pot2 * st * cp),
            num_t / q - num * q_t / (q * q) - g * pot2 * (st * cp + ct * sp),
        ]

    return rhs_ext


def dp_rhs(y, params: DoublePendulumParams | None = None) -> np.ndarray:
    """Machine-valued double-pendulum vector field at y (length 4)."""
    system = double_pendulum(params)
    return system.rhs(np.ascontiguousarray(y, dtype=np.float64))


_DP_CACHE: dict = {}


def double_pendulum(params: DoublePendulumParams | None = None) -> ODESystem:
    """The planar double pendulum as an ODESystem (state dimension 4)."""
    params = params or DoublePendulumParams()
    if params not in _DP_CACHE:
        def energy(y, params=params):
            return _dp_energy_ext(y, params)

        _DP_CACHE[params] = ODESystem(
            dimension=4,
            rhs=_make_dp_rhs(params),
            rhs_extended=_make_dp_rhs_ext(params),
            energy=energy,
            label="double-pendulum",
            initial_states={
                # Librating, regular motion vs. chaotic motion.
                "non-chaotic": np.array([1.1, -1.1, 2.7746, 2.7746]),
                "chaotic": np.array([0.0, 0.0, 3.873, 3.873]),
            },
        )
    return _DP_CACHE[params]


# ---------------------------------------------------------------------------
# Outer solar system
# ---------------------------------------------------------------------------

_N_BODIES = 6
_DATA_RESOURCE = "outer_solar_system.txt"


@dataclass(frozen=True, eq=False)
class NBodyParams:
    """Point-mass gravitational parameters (AU / day / solar-mass units)."""

    n_bodies: int
    gravitational_constant: float
    masses: np.ndarray
    gm: np.ndarray  # G * m_i, rounded once each
    raw: dict = field(repr=False, default_factory=dict)  # decimal strings from file

    def __post_init__(self):
        if not (self.gm > 0).all():
            raise ValueError("all gravitational parameters must be positive")


def parse_scalar_file(path_or_text) -> dict:
    """Parse a `name = decimal` file into {name: decimal string}.

    Blank lines and lines starting with '#' are ignored. Values are kept
    as strings so that callers can bind them at any precision.
    """
    if isinstance(path_or_text, Path):
        text = path_or_text.read_text()
    else:
        text = path_or_text
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected `name = decimal`, got {line!r}")
        name, _, value = line.partition("=")
        out[name.strip()] = value.strip()
    return out


def _oss_raw() -> dict:
    text = (
        importlib.resources.files("sirk.data").joinpath(_DATA_RESOURCE).read_text()
    )
    return parse_scalar_file(text)


def oss_params() -> NBodyParams:
    raw = _oss_raw()
    with gmpy2.local_context(gmpy2.context(), precision=256):
        g = float(mpfr(raw["gravitational_constant"]))
        masses = np.array(
            [float(mpfr(raw[f"mass_{i}"])) for i in range(_N_BODIES)]
        )
    gm = np.array([g * m for m in masses])  # one binary64 rounding each
    return NBodyParams(_N_BODIES, g, masses, gm, raw)


def oss_initial_state(bits: int = ENERGY_BITS) -> list:
    """Initial (q, p) of the benchmark as extended values.

    Momenta are mass * velocity, formed in extended precision; the state
    layout is (q_0..q_5, p_0..p_5) with 3 components per body.
    """
    raw = _oss_raw()
    with gmpy2.local_context(gmpy2.context(), precision=bits):
        qs, ps = [], []
        for i in range(_N_BODIES):
            m = mpfr(raw[f"mass_{i}"])
            for axis in "xyz":
                qs.append(mpfr(raw[f"position_{i}_{axis}"]))
                ps.append(m * mpfr(raw[f"velocity_{i}_{axis}"]))
        return qs + ps


def _oss_energy_ext(y, params: NBodyParams):
    n = params.n_bodies
    g = mpfr(params.raw["gravitational_constant"])
    masses = [mpfr(params.raw[f"mass_{i}"]) for i in range(n)]
    kinetic = mpfr(0)
    for i in range(n):
        p2 = mpfr(0)
        for c in range(3):
            pc = y[3 * n + 3 * i + c]
            p2 += pc * pc
        kinetic += p2 / masses[i]
    kinetic /= 2
    potential = mpfr(0)
    for i in range(n):
        for j in range(i + 1, n):
            r2 = mpfr(0)
            for c in range(3):
                d = y[3 * i + c] - y[3 * j + c]
                r2 += d * d
            if r2 == 0:
                raise SingularConfigurationError(f"bodies {i} and {j} coincide")
            potential += masses[i] * masses[j] / gmpy2.sqrt(r2)
    return kinetic - g * potential


def oss_hamiltonian(q, p, params: NBodyParams | None = None, bits: int = ENERGY_BITS):
    """Outer-solar-system energy for positions q and momenta p.

    q and p are flat sequences of length 3 * n_bodies.
    """
    params = params or oss_params()
    with gmpy2.local_context(gmpy2.context(), precision=bits):
        y = [mpfr(v) for v in (*q, *p)]
        return _oss_energy_ext(y, params)


def _make_oss_rhs(params: NBodyParams):
    n = params.n_bodies
    masses = np.ascontiguousarray(params.masses)
    gm = np.ascontiguousarray(params.gm)

    @njit(cache=False)
    def rhs(y):
        out = np.zeros(6 * n)
        for i in range(n):
            for c in range(3):
                out[3 * i + c] = y[3 * n + 3 * i + c] / masses[i]
        # Each pair force is evaluated once and applied with both signs,
        # so momentum cancellation is structural.
        for i in range(n):
            for j in range(i + 1, n):
                dx = y[3 * i] - y[3 * j]
                dy_ = y[3 * i + 1] - y[3 * j + 1]
                dz = y[3 * i + 2] - y[3 * j + 2]
                r2 = dx * dx + dy_ * dy_ + dz * dz
                w = gm[i] * masses[j] / (r2 * np.sqrt(r2))
                fx = w * dx
                fy = w * dy_
                fz = w * dz
                out[3 * n + 3 * i] -= fx
                out[3 * n + 3 * i + 1] -= fy
                out[3 * n + 3 * i + 2] -= fz
                out[3 * n + 3 * j] += fx
                out[3 * n + 3 * j + 1] += fy
                out[3 * n + 3 * j + 2] += fz
        return out

    return rhs


def _make_oss_rhs_ext(params: NBodyParams):
    def rhs_ext(y):
        n = params.n_bodies
        g = mpfr(params.raw["gravitational_constant"])
        masses = [mpfr(params.raw[f"mass_{i}"]) for i in range(n)]
        out = [mpfr(0) for _ in range(6 * n)]
        for i in range(n):
            for c in range(3):
                out[3 * i + c] = y[3 * n + 3 * i + c] / masses[i]
        for i in range(n):
            for j in range(i + 1, n):
                d = [y[3 * i + c] - y[3 * j + c] for c in range(3)]
                r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
                if r2 == 0:
                    raise SingularConfigurationError(f"bodies {i} and {j} coincide")
                w = g * masses[i] * masses[j] / (r2 * gmpy2.sqrt(r2))
                for c in range(3):
                    f = w * d[c]
                    out[3 * n + 3 * i + c] -= f
                    out[3 * n + 3 * j + c] += f
        return out

    return rhs_ext


def oss_rhs(y, params: NBodyParams | None = None) -> np.ndarray:
    """Machine-valued outer-solar-system vector field (length 36)."""
    system = outer_solar_system() if params is None else _build_oss(params)
    return system.rhs(np.ascontiguousarray(y, dtype=np.float64))


def oss_angular_momentum(q, p, bits: int = ENERGY_BITS) -> list:
    """Total angular momentum sum_i q_i x p_i in extended precision."""
    with gmpy2.local_context(gmpy2.context(), precision=bits):
        qs = [mpfr(v) for v in q]
        ps = [mpfr(v) for v in p]
        n = len(qs) // 3
        lx = ly = lz = mpfr(0)
        for i in range(n):
            qx, qy, qz = qs[3 * i: 3 * i + 3]
            px, py, pz = ps[3 * i: 3 * i + 3]
            lx += qy * pz - qz * py
            ly += qz * px - qx * pz
            lz += qx * py - qy * px
        return [lx, ly, lz]


def _angular_momentum_component(axis: int):
    def invariant(y):
        n = len(y) // 6
        total = mpfr(0)
        for i in range(n):
            q = y[3 * i: 3 * i + 3]
            p = y[3 * n + 3 * i: 3 * n + 3 * i + 3]
            j, k = (axis + 1) % 3, (axis + 2) % 3
            total += q[j] * p[k] - q[k] * p[j]
        return total

    return invariant


_OSS_CACHE: list = []


def _build_oss(params: NBodyParams) -> ODESystem:
    def energy(y, params=params):
        return _oss_energy_ext(y, params)

    return ODESystem(
        dimension=6 * params.n_bodies,
        rhs=_make_oss_rhs(params),
        rhs_extended=_make_oss_rhs_ext(params),
        energy=energy,
        label="outer-solar-system",
        quadratic_invariants=tuple(_angular_momentum_component(a) for a in range(3)),
    )


def outer_solar_system() -> ODESystem:
    """The six-body outer solar system benchmark as an ODESystem."""
    if not _OSS_CACHE:
        _OSS_CACHE.append(_build_oss(oss_params()))
    return _OSS_CACHE[0]
