"""Fixed-point solver and compensated stepper for symplectic IRK schemes.

One step solves the stage equations by plain fixed-point sweeps carried
out entirely in binary64:

    f_i = rhs(Y_i);  L_i = fl(hb_i * f_i);
    Z_i = ((e + cpl[i,0] L_0) + cpl[i,1] L_1) + ... + cpl[i,s-1] L_{s-1};
    Y_i' = fl(y + Z_i),

with the state held as a compensated pair (y, e). Iteration stops at a
computational fixed point (stage update exactly zero) or, failing that,
by a per-component non-improvement test: once every component's |delta|
is at or above the smallest nonzero |delta| it has ever shown, for a
required number of consecutive sweeps, further iteration can only churn
round-off. The accepted step is folded into (y, e) by compensated
summation of the stage increments plus their exact product residuals.

A secondary integration with slightly coarsened stage increments (lowest
r significand bits rounded away) runs alongside on request; its drift
away from the primary solution estimates the accumulated round-off error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import gmpy2
import numpy as np
from numba import njit

from .coefficients import MachineTableau
from .compensated import (
    PRECISION,
    CompensatedVector,
    product_residual,
)
from .problems import ODESystem

# Stop outcomes of the fixed-point loop (internal).
_STOP_FIXED = 0
_STOP_CRITERION = 1
_STOP_MAXITER = 2
_STOP_BAD_RHS = 3

# Step termination kinds (recorded per step).
TERM_FIXED_POINT = 0
TERM_CRITERION = 1
TERM_FALLBACK = 2

TERMINATION_NAMES = {
    TERM_FIXED_POINT: "fixed-point",
    TERM_CRITERION: "criterion",
    TERM_FALLBACK: "fallback-accepted",
}

# Kernel exit statuses.
_OK = 0
_DIVERGED = 1
_BAD_RHS = 2
_BAD_STATE = 3

STOP_RULES = ("component-min", "norm-nondecreasing")
ESTIMATOR_MODES = ("off", "parallel", "sequential")


class IntegrationError(RuntimeError):
    pass


class DivergedError(IntegrationError):
    """The fixed-point iteration did not contract; step size too large."""

    def __init__(self, step: int, delta_norm: float):
        self.step = step
        self.delta_norm = delta_norm
        super().__init__(
            f"fixed-point iteration diverged at step {step}; "
            f"max |stage update| = {delta_norm:.3e} exceeded the fallback tolerances"
        )


class RhsFailureError(IntegrationError):
    def __init__(self, step: int, stage: int):
        self.step = step
        self.stage = stage
        super().__init__(f"right-hand side returned a non-finite value at step {step}, stage {stage}")


class NonFiniteStateError(IntegrationError):
    def __init__(self, step: int, component: int):
        self.step = step
        self.component = component
        super().__init__(f"state went non-finite at step {step}, component {component}")


@dataclass
class IntegrationConfig:
    """Parameters of one integration run."""

    h: float
    n_steps: int
    sample_every: int = 1
    max_iterations: int = 100
    fallback_abs_tol: float = 1e-8
    fallback_rel_tol: float = 1e-8
    streak_required: int = 2
    estimator_r: int = 3
    estimator_mode: str = "off"
    stop_rule: str = "component-min"  # "norm-nondecreasing" exists for regression tests
    energy_bits: int = 128

    def __post_init__(self):
        self.h = float(self.h)
        if not (math.isfinite(self.h) and self.h > 0):
            raise ValueError("h must be a positive finite machine number")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        if self.sample_every < 1 or (self.n_steps > 0 and self.sample_every > self.n_steps):
            raise ValueError("sample_every must satisfy 1 <= sample_every <= n_steps")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.streak_required < 1:
            raise ValueError("streak_required must be at least 1")
        if not 0 <= self.estimator_r < PRECISION:
            raise ValueError(f"estimator_r must be in [0, {PRECISION})")
        if self.estimator_mode not in ESTIMATOR_MODES:
            raise ValueError(f"estimator_mode must be one of {ESTIMATOR_MODES}")
        if self.estimator_mode != "off" and self.estimator_r < 1:
            raise ValueError("error estimation requires estimator_r >= 1 "
                             "(r = 0 would reproduce the primary integration)")
        if self.stop_rule not in STOP_RULES:
            raise ValueError(f"stop_rule must be one of {STOP_RULES}")


@dataclass
class StageSet:
    """Stage data of one step: states, scaled slopes, last rhs values."""

    Y: np.ndarray  # (s, D) stage states
    L: np.ndarray  # (s, D) scaled slopes fl(hb_i * f_i)
    f: np.ndarray  # (s, D) last rhs evaluations
    k: int = 0     # sweeps performed so far

    @classmethod
    def initialized(cls, tableau: MachineTableau, state: CompensatedVector) -> "StageSet":
        """Fresh stages, every row started at fl(y + e)."""
        start = state.main + state.residual
        s, d = tableau.stages, state.dimension
        return cls(
            Y=np.tile(start, (s, 1)),
            L=np.zeros((s, d)),
            f=np.zeros((s, d)),
            k=0,
        )

    def validate(self, tableau: MachineTableau) -> None:
        if not (np.isfinite(self.Y).all() and np.isfinite(self.L).all()
                and np.isfinite(self.f).all()):
            raise NonFiniteStateError(-1, -1)
        expected = tableau.step_weights[:, None] * self.f
        if not (expected == self.L).all():
            raise ValueError("L rows are not bitwise fl(hb_i * f_i)")


@dataclass
class StepResult:
    state: CompensatedVector
    iterations: int
    termination: str
    delta_residual: np.ndarray


@dataclass
class Trajectory:
    """Sampled output of one integration."""

    system_label: str
    h: float
    sample_every: int
    sample_steps: np.ndarray          # (n_samples,) step index of each sample
    main: np.ndarray                  # (n_samples, D)
    residual: np.ndarray              # (n_samples, D)
    iterations: np.ndarray            # (n_steps,) sweeps per step
    terminations: np.ndarray          # (n_steps,) termination codes
    energies: np.ndarray | None = None  # (n_samples, 2) extended H as hi/lo pair

    @property
    def n_steps(self) -> int:
        return self.iterations.shape[0]

    @property
    def n_samples(self) -> int:
        return self.sample_steps.shape[0]

    def sample_iterations(self) -> np.ndarray:
        """Sweeps of the step that produced each sample (0 for the initial one)."""
        out = np.zeros(self.n_samples, dtype=np.int64)
        nonzero = self.sample_steps > 0
        out[nonzero] = self.iterations[self.sample_steps[nonzero] - 1]
        return out

    def sample_terminations(self) -> np.ndarray:
        out = np.full(self.n_samples, -1, dtype=np.int64)
        nonzero = self.sample_steps > 0
        out[nonzero] = self.terminations[self.sample_steps[nonzero] - 1]
        return out

    def states(self):
        for i in range(self.n_samples):
            yield CompensatedVector(self.main[i].copy(), self.residual[i].copy())

    def energy_extended(self, index: int):
        """Recombine the stored hi/lo energy at a sample index (call inside
        a gmpy2 context of at least 106 bits)."""
        hi, lo = self.energies[index]
        return gmpy2.mpfr(hi) + gmpy2.mpfr(lo)


@dataclass
class ErrorEstimateSeries:
    """Round-off estimates: primary minus secondary solution per sample."""

    sample_steps: np.ndarray
    estimates: np.ndarray      # (n_samples, D)
    secondary: Trajectory
    mode: str
    reduce_bits: int


# ---------------------------------------------------------------------------
# Stopping bookkeeping (interpreted mirror of the kernel logic)
# ---------------------------------------------------------------------------

CONTINUE = "continue"
STOP_FIXED_POINT = "stop-fixed-point"
STOP_CRITERION = "stop-criterion"


@dataclass
class StopTracker:
    """Per-component history of the non-improvement stopping test.

    min_nonzero[j] tracks the smallest nonzero |delta_j| seen in previous
    sweeps (+inf before any). A sweep "holds" when every component is
    either exactly zero, has no nonzero history, or fails to improve on
    its historical minimum; the iteration stops once the hold persists
    for `streak_required` consecutive sweeps, or immediately when the
    whole update is exactly zero.
    """

    size: int
    min_nonzero: np.ndarray = field(init=False)
    satisfied_streak: int = 0
    history_len: int = 0

    def __post_init__(self):
        self.min_nonzero = np.full(self.size, np.inf)

    def update(self, delta: np.ndarray, streak_required: int) -> str:
        delta = np.asarray(delta, dtype=np.float64).reshape(-1)
        if delta.shape[0] != self.size:
            raise ValueError("delta length does not match tracker size")
        mag = np.abs(delta)
        self.history_len += 1
        if not mag.any():
            return STOP_FIXED_POINT
        holds = (mag == 0.0) | np.isinf(self.min_nonzero) | (self.min_nonzero <= mag)
        if holds.all():
            self.satisfied_streak += 1
        else:
            self.satisfied_streak = 0
        nz = mag > 0.0
        np.minimum(self.min_nonzero, np.where(nz, mag, np.inf), out=self.min_nonzero)
        if self.satisfied_streak >= streak_required:
            return STOP_CRITERION
        return CONTINUE


def fallback_check(delta, stage_states, abs_tol: float, rel_tol: float) -> str:
    """Loose mixed test applied when no computational fixed point occurs.

    Accepts iff |delta_j| <= abs_tol + rel_tol * |Y_j| for every
    component; rejection means the step size is too large for the
    fixed-point iteration to contract.
    """
    d = np.asarray(delta, dtype=np.float64).reshape(-1)
    y = np.asarray(stage_states, dtype=np.float64).reshape(-1)
    if np.all(np.abs(d) <= abs_tol + rel_tol * np.abs(y)):
        return "accepted"
    return "diverged"


# ---------------------------------------------------------------------------
# Jitted kernels
# ---------------------------------------------------------------------------

@njit(nogil=True, cache=False)
def _sweep_kernel(rhs, coupling, hb, ymain, yres, Y, F, L, Ynew, delta):
    """One fixed-point sweep; fills F, L, Ynew, delta. Returns the stage
    index of a non-finite rhs value, or -1."""
    s, d = Y.shape
    for i in range(s):
        f = rhs(Y[i])
        for c in range(d):
            if not np.isfinite(f[c]):
                return i
            F[i, c] = f[c]
            L[i, c] = hb[i] * f[c]
    for i in range(s):
        for c in range(d):
            z = yres[c]
            for j in range(s):
                z = z + coupling[i, j] * L[j, c]
            yn = ymain[c] + z
            Ynew[i, c] = yn
            delta[i, c] = yn - Y[i, c]
    return -1


@njit(nogil=True, cache=False)
def _solve_kernel(rhs, coupling, hb, ymain, yres, Y, F, L, Ynew, delta,
                  min_nonzero, max_iterations, streak_required, use_norm_rule):
    """Fixed-point iteration from the preset stage values in Y.

    Returns (iterations, stop_code, bad_stage). On return Y holds the
    accepted stage states and delta the last stage update.
    """
    s, d = Y.shape
    min_nonzero[:] = np.inf
    streak = 0
    prev_norm = 0.0
    k = 0
    while True:
        k += 1
        bad = _sweep_kernel(rhs, coupling, hb, ymain, yres, Y, F, L, Ynew, delta)
        if bad >= 0:
            return k, _STOP_BAD_RHS, bad
        for i in range(s):
            for c in range(d):
                Y[i, c] = Ynew[i, c]
        if use_norm_rule:
            # Prior-work rule, kept for regression comparisons: stop when
            # the update norm stops decreasing.
            norm2 = 0.0
            all_zero = True
            for i in range(s):
                for c in range(d):
                    dv = delta[i, c]
                    norm2 += dv * dv
                    if dv != 0.0:
                        all_zero = False
            if all_zero:
                return k, _STOP_FIXED, -1
            norm = np.sqrt(norm2)
            if k >= 2 and norm >= prev_norm:
                return k, _STOP_CRITERION, -1
            prev_norm = norm
        else:
            all_zero = True
            holds = True
            for i in range(s):
                for c in range(d):
                    mag = abs(delta[i, c])
                    if mag != 0.0:
                        all_zero = False
                        idx = i * d + c
                        mn = min_nonzero[idx]
                        if mn != np.inf and mn > mag:
                            holds = False
                        if mag < mn:
                            min_nonzero[idx] = mag
            if all_zero:
                return k, _STOP_FIXED, -1
            if holds:
                streak += 1
            else:
                streak = 0
            if streak >= streak_required:
                return k, _STOP_CRITERION, -1
        if k >= max_iterations:
            return k, _STOP_MAXITER, -1


@njit(nogil=True, cache=False)
def _fallback_kernel(delta, Y, abs_tol, rel_tol):
    s, d = delta.shape
    for i in range(s):
        for c in range(d):
            if abs(delta[i, c]) > abs_tol + rel_tol * abs(Y[i, c]):
                return False
    return True


@njit(nogil=True, cache=False)
def _max_abs(delta):
    s, d = delta.shape
    worst = 0.0
    for i in range(s):
        for c in range(d):
            mag = abs(delta[i, c])
            if mag > worst:
                worst = mag
    return worst


@njit(nogil=True, cache=False)
def _finalize_kernel(ymain, yres, F, L, hb, reduce_r):
    """Fold the accepted stage increments into the compensated state.

    delta_residual = e + sum_i (exact residual of hb_i * f_i vs L_i) seeds
    the compensation term; the L rows (coarsened to 53 - reduce_r bits when
    reduce_r > 0) are then accumulated with one compensated update each.
    Returns the index of the first non-finite component, or -1.
    """
    s, d = L.shape
    for c in range(d):
        acc = yres[c]
        for i in range(s):
            acc = acc + product_residual(hb[i], F[i, c], L[i, c])
        y = ymain[c]
        e = acc
        for i in range(s):
            t = L[i, c]
            if reduce_r > 0:
                big = math.ldexp(t, reduce_r)
                t = (big + t) - big
            x = t + e
            yn = y + x
            xh = yn - y
            e = x - xh
            y = yn
        ymain[c] = y
        yres[c] = e
        if not (np.isfinite(y) and np.isfinite(e)):
            return c
    return -1


@njit(nogil=True, cache=False)
def _delta_residual_kernel(yres, F, L, hb, out):
    """delta_residual alone (diagnostic): e + sum_i residual(hb_i*f_i, L_i)."""
    s, d = L.shape
    for c in range(d):
        acc = yres[c]
        for i in range(s):
            acc = acc + product_residual(hb[i], F[i, c], L[i, c])
        out[c] = acc


@njit(nogil=True, cache=False)
def _integrate_kernel(rhs, coupling, hb, ymain, yres, n_steps, sample_every,
                      max_iterations, streak_required, abs_tol, rel_tol,
                      use_norm_rule, reduce_r,
                      out_main, out_res, out_steps, iters, terms):
    """Full integration loop. Returns (status, step, aux_int, aux_float)."""
    s = hb.shape[0]
    d = ymain.shape[0]
    Y = np.empty((s, d))
    F = np.empty((s, d))
    L = np.empty((s, d))
    Ynew = np.empty((s, d))
    delta = np.empty((s, d))
    min_nonzero = np.empty(s * d)
    out_steps[0] = 0
    for c in range(d):
        out_main[0, c] = ymain[c]
        out_res[0, c] = yres[c]
    ns = 1
    for n in range(n_steps):
        for i in range(s):
            for c in range(d):
                Y[i, c] = ymain[c] + yres[c]
        k, code, bad = _solve_kernel(rhs, coupling, hb, ymain, yres, Y, F, L,
                                     Ynew, delta, min_nonzero,
                                     max_iterations, streak_required,
                                     use_norm_rule)
        if code == _STOP_BAD_RHS:
            return _BAD_RHS, n, bad, 0.0
        if code == _STOP_FIXED:
            term = TERM_FIXED_POINT
        else:
            if not _fallback_kernel(delta, Y, abs_tol, rel_tol):
                return _DIVERGED, n, k, _max_abs(delta)
            term = TERM_CRITERION if code == _STOP_CRITERION else TERM_FALLBACK
        bad = _finalize_kernel(ymain, yres, F, L, hb, reduce_r)
        if bad >= 0:
            return _BAD_STATE, n, bad, 0.0
        iters[n] = k
        terms[n] = term
        if (n + 1) % sample_every == 0:
            out_steps[ns] = n + 1
            for c in range(d):
                out_main[ns, c] = ymain[c]
                out_res[ns, c] = yres[c]
            ns += 1
    return _OK, n_steps, 0, 0.0


@njit(nogil=True, cache=False)
def _integrate_pair_kernel(rhs, coupling, hb, ymain, yres, smain, sres,
                           n_steps, sample_every, max_iterations,
                           streak_required, abs_tol, rel_tol, reduce_r,
                           out_main, out_res, out_smain, out_sres, out_steps,
                           iters, terms, s_iters, s_terms):
    """Primary and coarsened secondary integration advanced in lock-step.

    The secondary stage solve starts from the primary's accepted stage
    values, which shortens its iteration; its finalization rounds the
    stage increments to 53 - reduce_r bits.
    """
    s = hb.shape[0]
    d = ymain.shape[0]
    Y = np.empty((s, d))
    F = np.empty((s, d))
    L = np.empty((s, d))
    Ynew = np.empty((s, d))
    delta = np.empty((s, d))
    min_nonzero = np.empty(s * d)
    Ys = np.empty((s, d))
    Fs = np.empty((s, d))
    Ls = np.empty((s, d))
    out_steps[0] = 0
    for c in range(d):
        out_main[0, c] = ymain[c]
        out_res[0, c] = yres[c]
        out_smain[0, c] = smain[c]
        out_sres[0, c] = sres[c]
    ns = 1
    for n in range(n_steps):
        for i in range(s):
            for c in range(d):
                Y[i, c] = ymain[c] + yres[c]
        k, code, bad = _solve_kernel(rhs, coupling, hb, ymain, yres, Y, F, L,
                                     Ynew, delta, min_nonzero,
                                     max_iterations, streak_required, False)
        if code == _STOP_BAD_RHS:
            return _BAD_RHS, n, bad, 0.0
        if code == _STOP_FIXED:
            term = TERM_FIXED_POINT
        else:
            if not _fallback_kernel(delta, Y, abs_tol, rel_tol):
                return _DIVERGED, n, k, _max_abs(delta)
            term = TERM_CRITERION if code == _STOP_CRITERION else TERM_FALLBACK
        # Warm-start the secondary solve from the primary's final stages.
        for i in range(s):
            for c in range(d):
                Ys[i, c] = Y[i, c]
        bad = _finalize_kernel(ymain, yres, F, L, hb, 0)
        if bad >= 0:
            return _BAD_STATE, n, bad, 0.0
        iters[n] = k
        terms[n] = term

        ks, code_s, bad = _solve_kernel(rhs, coupling, hb, smain, sres, Ys,
                                        Fs, Ls, Ynew, delta, min_nonzero,
                                        max_iterations, streak_required, False)
        if code_s == _STOP_BAD_RHS:
            return _BAD_RHS, n, bad, 1.0
        if code_s == _STOP_FIXED:
            term_s = TERM_FIXED_POINT
        else:
            if not _fallback_kernel(delta, Ys, abs_tol, rel_tol):
                return _DIVERGED, n, ks, _max_abs(delta)
            term_s = TERM_CRITERION if code_s == _STOP_CRITERION else TERM_FALLBACK
        bad = _finalize_kernel(smain, sres, Fs, Ls, hb, reduce_r)
        if bad >= 0:
            return _BAD_STATE, n, bad, 1.0
        s_iters[n] = ks
        s_terms[n] = term_s
        if (n + 1) % sample_every == 0:
            out_steps[ns] = n + 1
            for c in range(d):
                out_main[ns, c] = ymain[c]
                out_res[ns, c] = yres[c]
                out_smain[ns, c] = smain[c]
                out_sres[ns, c] = sres[c]
            ns += 1
    return _OK, n_steps, 0, 0.0


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def _step_weights_for(tableau: MachineTableau, h: float) -> MachineTableau:
    if tableau.step_weights is not None and tableau.step_size == float(h):
        return tableau
    return tableau.with_step_size(h)


def sweep(tableau: MachineTableau, state: CompensatedVector,
          stages: StageSet, system: ODESystem):
    """One fixed-point sweep; returns (new stages, flat stage update)."""
    if tableau.step_weights is None:
        raise ValueError("tableau carries no step fractions; call with_step_size first")
    s, d = stages.Y.shape
    F = np.empty((s, d))
    L = np.empty((s, d))
    Ynew = np.empty((s, d))
    delta = np.empty((s, d))
    bad = _sweep_kernel(system.rhs, tableau.coupling, tableau.step_weights,
                        state.main, state.residual, stages.Y, F, L, Ynew, delta)
    if bad >= 0:
        raise RhsFailureError(-1, int(bad))
    out = StageSet(Y=Ynew, L=L, f=F, k=stages.k + 1)
    return out, delta.reshape(-1)


def finalize_step(tableau: MachineTableau, state: CompensatedVector,
                  stages: StageSet, termination: str = "fixed-point") -> StepResult:
    """Fold accepted stages into the state with compensated accumulation."""
    if tableau.step_weights is None:
        raise ValueError("tableau carries no step fractions; call with_step_size first")
    if stages.k < 1:
        raise ValueError("finalize requires at least one completed sweep")
    main = state.main.copy()
    res = state.residual.copy()
    delta_residual = np.empty_like(res)
    _delta_residual_kernel(res, stages.f, stages.L, tableau.step_weights,
                           delta_residual)
    bad = _finalize_kernel(main, res, stages.f, stages.L,
                           tableau.step_weights, 0)
    if bad >= 0:
        raise NonFiniteStateError(-1, int(bad))
    return StepResult(
        state=CompensatedVector(main, res),
        iterations=stages.k,
        termination=termination,
        delta_residual=delta_residual,
    )


def _energies_for(system: ODESystem, main, res, bits: int):
    if system.energy is None:
        return None
    out = np.empty((main.shape[0], 2))
    with gmpy2.local_context(gmpy2.context(), precision=bits):
        for i in range(main.shape[0]):
            y = [gmpy2.mpfr(float(a)) + gmpy2.mpfr(float(b))
                 for a, b in zip(main[i], res[i])]
            h_val = system.energy(y)
            hi = float(h_val)
            lo = float(h_val - gmpy2.mpfr(hi))
            out[i, 0] = hi
            out[i, 1] = lo
    return out


def _prepare(system, tableau, config, y0):
    tab = _step_weights_for(tableau, config.h)
    if y0.dimension != system.dimension:
        raise ValueError("initial state dimension does not match the system")
    y0.validate()
    n_samples = 1 + config.n_steps // config.sample_every
    buffers = dict(
        out_main=np.empty((n_samples, system.dimension)),
        out_res=np.empty((n_samples, system.dimension)),
        out_steps=np.empty(n_samples, dtype=np.int64),
        iters=np.zeros(config.n_steps, dtype=np.int64),
        terms=np.zeros(config.n_steps, dtype=np.int64),
    )
    return tab, buffers


def _raise_for_status(status, step, aux_int, aux_float):
    if status == _OK:
        return
    if status == _DIVERGED:
        raise DivergedError(int(step), float(aux_float))
    if status == _BAD_RHS:
        raise RhsFailureError(int(step), int(aux_int))
    raise NonFiniteStateError(int(step), int(aux_int))


def integrate(system: ODESystem, tableau: MachineTableau,
              config: IntegrationConfig, y0: CompensatedVector,
              _reduce_r: int = 0) -> Trajectory:
    """Integrate n_steps of size h from the compensated state y0.

    Samples (state, extended-precision energy, iteration count,
    termination kind) every `sample_every` steps; the initial state is
    always sample 0. Bitwise deterministic for identical inputs.
    """
    tab, buf = _prepare(system, tableau, config, y0)
    ymain = y0.main.copy()
    yres = y0.residual.copy()
    status, step, aux_i, aux_f = _integrate_kernel(
        system.rhs, tab.coupling, tab.step_weights, ymain, yres,
        config.n_steps, config.sample_every, config.max_iterations,
        config.streak_required, config.fallback_abs_tol,
        config.fallback_rel_tol, config.stop_rule == "norm-nondecreasing",
        _reduce_r,
        buf["out_main"], buf["out_res"], buf["out_steps"],
        buf["iters"], buf["terms"],
    )
    _raise_for_status(status, step, aux_i, aux_f)
    return Trajectory(
        system_label=system.label,
        h=config.h,
        sample_every=config.sample_every,
        sample_steps=buf["out_steps"],
        main=buf["out_main"],
        residual=buf["out_res"],
        iterations=buf["iters"],
        terminations=buf["terms"],
        energies=_energies_for(system, buf["out_main"], buf["out_res"],
                               config.energy_bits),
    )


def _estimates_from(primary_main, primary_res, sec_main, sec_res, bits=128):
    out = np.empty_like(primary_main)
    with gmpy2.local_context(gmpy2.context(), precision=bits):
        rows, cols = out.shape
        for i in range(rows):
            for c in range(cols):
                v = (gmpy2.mpfr(float(primary_main[i, c]))
                     + gmpy2.mpfr(float(primary_res[i, c]))
                     - gmpy2.mpfr(float(sec_main[i, c]))
                     - gmpy2.mpfr(float(sec_res[i, c])))
                out[i, c] = float(v)
    return out


def integrate_with_estimate(system: ODESystem, tableau: MachineTableau,
                            config: IntegrationConfig, y0: CompensatedVector):
    """Integrate and estimate accumulated round-off error.

    A secondary solution whose stage increments are rounded to
    53 - estimator_r significand bits is advanced alongside the primary
    one; the per-sample difference (primary - secondary), evaluated in
    extended precision, tracks the primary's round-off error. In
    "parallel" mode the secondary runs as a fully independent
    integration; in "sequential" mode each of its stage solves starts
    from the primary's accepted stage values, which lowers its iteration
    count.
    """
    if config.estimator_mode == "off":
        raise ValueError("estimator_mode is 'off'; use integrate() instead")
    r = config.estimator_r
    if config.estimator_mode == "parallel":
        primary = integrate(system, tableau, config, y0)
        secondary = integrate(system, tableau, config, y0, _reduce_r=r)
    else:
        tab, buf = _prepare(system, tableau, config, y0)
        sbuf = dict(
            out_main=np.empty_like(buf["out_main"]),
            out_res=np.empty_like(buf["out_res"]),
            iters=np.zeros(config.n_steps, dtype=np.int64),
            terms=np.zeros(config.n_steps, dtype=np.int64),
        )
        ymain = y0.main.copy()
        yres = y0.residual.copy()
        smain = y0.main.copy()
        sres = y0.residual.copy()
        status, step, aux_i, aux_f = _integrate_pair_kernel(
            system.rhs, tab.coupling, tab.step_weights, ymain, yres,
            smain, sres, config.n_steps, config.sample_every,
            config.max_iterations, config.streak_required,
            config.fallback_abs_tol, config.fallback_rel_tol, r,
            buf["out_main"], buf["out_res"], sbuf["out_main"],
            sbuf["out_res"], buf["out_steps"], buf["iters"], buf["terms"],
            sbuf["iters"], sbuf["terms"],
        )
        try:
            _raise_for_status(status, step, aux_i, aux_f)
        except IntegrationError as exc:
            if status in (_BAD_RHS, _BAD_STATE) and aux_f == 1.0:
                raise type(exc)(int(step), int(aux_i)) from IntegrationError(
                    "failure occurred in the secondary integration")
            raise
        primary = Trajectory(
            system_label=system.label, h=config.h,
            sample_every=config.sample_every, sample_steps=buf["out_steps"],
            main=buf["out_main"], residual=buf["out_res"],
            iterations=buf["iters"], terminations=buf["terms"],
            energies=_energies_for(system, buf["out_main"], buf["out_res"],
                                   config.energy_bits),
        )
        secondary = Trajectory(
            system_label=system.label + " (secondary)", h=config.h,
            sample_every=config.sample_every, sample_steps=buf["out_steps"],
            main=sbuf["out_main"], residual=sbuf["out_res"],
            iterations=sbuf["iters"], terminations=sbuf["terms"],
            energies=None,
        )
    estimates = _estimates_from(primary.main, primary.residual,
                                secondary.main, secondary.residual)
    series = ErrorEstimateSeries(
        sample_steps=primary.sample_steps,
        estimates=estimates,
        secondary=secondary,
        mode=config.estimator_mode,
        reduce_bits=r,
    )
    return primary, series
