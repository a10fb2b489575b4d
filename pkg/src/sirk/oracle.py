"""Extended-precision reference integrator and error decomposition.

Runs the same stepping algorithm as the binary64 integrator, but with
every arithmetic operation outside the user right-hand side carried out
in software floating point (MPFR) at a configurable precision of at
least 106 bits. Selecting where reduced precision enters isolates the
individual error sources of the working-precision integrator:

    variant A: everything extended            -> truncation error alone
    variant B: A, but stop the stage iteration as soon as consecutive
               iterates coincide after rounding to binary64
                                               -> iteration error
    variant C: A with the binary64 right-hand side
                                               -> effect of rhs rounding
    variant D: A with the binary64 tableau (weights, couplings and
               redistributed step fractions)   -> effect of rounded
                                                  coefficients

With machine coefficients, the binary64 right-hand side, 53-bit
precision and exhaustive stopping, the oracle walks the working
integrator's trajectory bitwise as long as every step reaches a
computational fixed point, which the test suite uses as an end-to-end
cross-check of both implementations.
"""

from __future__ import annotations

from dataclasses import dataclass

import gmpy2
import numpy as np
from gmpy2 import mpfr

from .coefficients import GaussTableau, MachineTableau, make_machine_tableau, step_fractions
from .compensated import PRECISION, CompensatedVector
from .core import (
    DivergedError,
    IntegrationConfig,
    RhsFailureError,
    TERM_CRITERION,
    TERM_FALLBACK,
    TERM_FIXED_POINT,
    Trajectory,
)
from .problems import ODESystem

F_VARIANTS = ("extended", "machine")
COEFF_VARIANTS = ("extended", "machine")
STOP_MODES = ("exhaustive", "double-rounded-coincidence")

#: Error-source decomposition presets.
VARIANTS = {
    "A": dict(f_variant="extended", coeff_variant="extended", stop_mode="exhaustive"),
    "B": dict(f_variant="extended", coeff_variant="extended",
              stop_mode="double-rounded-coincidence"),
    "C": dict(f_variant="machine", coeff_variant="extended", stop_mode="exhaustive"),
    "D": dict(f_variant="extended", coeff_variant="machine", stop_mode="exhaustive"),
}


@dataclass
class OracleConfig:
    bits: int = 113
    f_variant: str = "extended"
    coeff_variant: str = "extended"
    stop_mode: str = "exhaustive"
    streak_required: int = 10

    def __post_init__(self):
        # bits == 53 is allowed as a special mode that replays the
        # binary64 integrator for cross-checking; everything else must be
        # genuinely extended.
        if self.bits != PRECISION and self.bits < 2 * PRECISION:
            raise ValueError(f"oracle precision must be >= {2 * PRECISION} bits"
                             f" (got {self.bits})")
        if self.f_variant not in F_VARIANTS:
            raise ValueError(f"f_variant must be one of {F_VARIANTS}")
        if self.coeff_variant not in COEFF_VARIANTS:
            raise ValueError(f"coeff_variant must be one of {COEFF_VARIANTS}")
        if self.stop_mode not in STOP_MODES:
            raise ValueError(f"stop_mode must be one of {STOP_MODES}")

    @classmethod
    def for_variant(cls, name: str, bits: int = 113, **kw) -> "OracleConfig":
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}; expected one of A, B, C, D")
        return cls(bits=bits, **VARIANTS[name], **kw)

    @classmethod
    def emulation_of_working_precision(cls, streak_required: int = 2) -> "OracleConfig":
        """Config that replays the binary64 integrator (53-bit check mode)."""
        return cls(bits=PRECISION, f_variant="machine", coeff_variant="machine",
                   stop_mode="exhaustive", streak_required=streak_required)


@dataclass
class OracleTrajectory:
    """Sampled extended-precision output; states kept as mpfr pairs."""

    system_label: str
    h: float
    sample_every: int
    bits: int
    sample_steps: np.ndarray
    main: list          # list of lists of mpfr
    residual: list
    iterations: np.ndarray
    terminations: np.ndarray
    energies: list | None   # list of mpfr

    @property
    def n_samples(self) -> int:
        return self.sample_steps.shape[0]

    def state_extended(self, index: int) -> list:
        """main + residual at a sample, exactly (caller sets the context)."""
        return [a + b for a, b in zip(self.main[index], self.residual[index])]


def _lift_tableau(gauss: GaussTableau, machine: MachineTableau | None,
                  config: OracleConfig, h: float):
    """Coupling matrix and step fractions as mpfr under the live context."""
    s = gauss.stages
    if config.coeff_variant == "machine":
        if machine is None:
            machine = make_machine_tableau(gauss)
        if machine.step_weights is None or machine.step_size != float(h):
            hb64 = step_fractions(machine, gauss, h)
        else:
            hb64 = machine.step_weights
        coupling = [[mpfr(machine.coupling[i, j]) for j in range(s)] for i in range(s)]
        hb = [mpfr(hb64[i]) for i in range(s)]
    else:
        coupling = [[gauss.matrix[i][j] / gauss.weights[j] for j in range(s)]
                    for i in range(s)]
        hb = [mpfr(h) * gauss.weights[i] for i in range(s)]
    return coupling, hb


def _call_rhs(system: ODESystem, config: OracleConfig, y):
    if config.f_variant == "machine":
        y64 = np.array([float(v) for v in y])
        f64 = system.rhs(y64)
        if not np.isfinite(f64).all():
            raise RhsFailureError(-1, int(np.argmin(np.isfinite(f64))))
        return [mpfr(float(v)) for v in f64]
    if system.rhs_extended is None:
        raise ValueError(f"system {system.label!r} has no extended right-hand side")
    return system.rhs_extended(y)


def oracle_integrate(system: ODESystem, tableau_source: GaussTableau,
                     oracle_config: OracleConfig,
                     integration_config: IntegrationConfig,
                     y0: CompensatedVector,
                     machine_tableau: MachineTableau | None = None) -> OracleTrajectory:
    """Reference integration at `oracle_config.bits` precision.

    Mirrors the working-precision algorithm operation for operation
    (stage sweeps with left-to-right accumulation, compensated state
    pair, exact-product residuals, compensated step accumulation), with
    the f/coefficient/stopping substitutions selected by the config.
    """
    cfg, icfg = oracle_config, integration_config
    s = tableau_source.stages
    d = system.dimension
    n_samples = 1 + icfg.n_steps // icfg.sample_every
    sample_steps = np.empty(n_samples, dtype=np.int64)
    mains: list = []
    residuals: list = []
    energies: list | None = [] if system.energy is not None else None
    iters = np.zeros(icfg.n_steps, dtype=np.int64)
    terms = np.zeros(icfg.n_steps, dtype=np.int64)

    # At 53 bits the context must reproduce binary64 exactly (including
    # subnormals and the exponent range); gmpy2.ieee(64) is that context.
    base_ctx = gmpy2.ieee(64) if cfg.bits == PRECISION else \
        gmpy2.context(precision=cfg.bits)
    with gmpy2.local_context(base_ctx):
        coupling, hb = _lift_tableau(tableau_source, machine_tableau, cfg, icfg.h)
        ymain = [mpfr(v) for v in y0.main]
        yres = [mpfr(v) for v in y0.residual]

        def record(step_index, slot):
            sample_steps[slot] = step_index
            mains.append(list(ymain))
            residuals.append(list(yres))
            if energies is not None:
                with gmpy2.local_context(gmpy2.context(),
                                         precision=cfg.bits + 64):
                    y = [a + b for a, b in zip(ymain, yres)]
                    energies.append(system.energy(y))

        record(0, 0)
        slot = 1
        fma = gmpy2.fma
        for n in range(icfg.n_steps):
            Y = [[ymain[c] + yres[c] for c in range(d)] for _ in range(s)]
            min_nonzero = [None] * (s * d)
            streak = 0
            k = 0
            F = L = None
            while True:
                k += 1
                F = [_call_rhs(system, cfg, Y[i]) for i in range(s)]
                L = [[hb[i] * F[i][c] for c in range(d)] for i in range(s)]
                Ynew = []
                for i in range(s):
                    row = []
                    for c in range(d):
                        z = yres[c]
                        for j in range(s):
                            z = z + coupling[i][j] * L[j][c]
                        row.append(ymain[c] + z)
                    Ynew.append(row)
                delta = [[Ynew[i][c] - Y[i][c] for c in range(d)] for i in range(s)]
                if cfg.stop_mode == "double-rounded-coincidence":
                    coincide = all(
                        float(Ynew[i][c]) == float(Y[i][c])
                        for i in range(s) for c in range(d)
                    )
                    all_zero = all(
                        delta[i][c] == 0 for i in range(s) for c in range(d)
                    )
                    Y = Ynew
                    if all_zero:
                        stop = "fixed"
                        break
                    if coincide:
                        stop = "criterion"
                        break
                else:
                    all_zero = True
                    holds = True
                    for i in range(s):
                        for c in range(d):
                            mag = abs(delta[i][c])
                            if mag != 0:
                                all_zero = False
                                idx = i * d + c
                                mn = min_nonzero[idx]
                                if mn is not None and mn > mag:
                                    holds = False
                                if mn is None or mag < mn:
                                    min_nonzero[idx] = mag
                    Y = Ynew
                    if all_zero:
                        stop = "fixed"
                        break
                    streak = streak + 1 if holds else 0
                    if streak >= cfg.streak_required:
                        stop = "criterion"
                        break
                if k >= icfg.max_iterations:
                    stop = "maxiter"
                    break
            if stop == "fixed":
                terms[n] = TERM_FIXED_POINT
            else:
                ok = all(
                    abs(delta[i][c]) <= icfg.fallback_abs_tol
                    + icfg.fallback_rel_tol * abs(Y[i][c])
                    for i in range(s) for c in range(d)
                )
                if not ok:
                    worst = max(abs(delta[i][c]) for i in range(s) for c in range(d))
                    raise DivergedError(n, float(worst))
                terms[n] = TERM_CRITERION if stop == "criterion" else TERM_FALLBACK
            iters[n] = k
            # Compensated step accumulation with exact product residuals.
            for c in range(d):
                acc = yres[c]
                for i in range(s):
                    acc = acc + fma(hb[i], F[i][c], -L[i][c])
                y = ymain[c]
                e = acc
                for i in range(s):
                    x = L[i][c] + e
                    yn = y + x
                    xh = yn - y
                    e = x - xh
                    y = yn
                ymain[c] = y
                yres[c] = e
            if (n + 1) % icfg.sample_every == 0:
                record(n + 1, slot)
                slot += 1

    return OracleTrajectory(
        system_label=system.label,
        h=icfg.h,
        sample_every=icfg.sample_every,
        bits=cfg.bits,
        sample_steps=sample_steps,
        main=mains,
        residual=residuals,
        iterations=iters,
        terminations=terms,
        energies=energies,
    )


@dataclass
class ErrorSeries:
    """Componentwise and energy error of a primary run against a reference."""

    sample_steps: np.ndarray
    component_error: np.ndarray    # (n_samples, D) primary minus reference
    energy_relative_error: np.ndarray | None


def _states_of(traj, index):
    return traj.main[index], traj.residual[index]


def true_roundoff_error(primary, oracle, bits: int = 256) -> ErrorSeries:
    """Error series of `primary` against the reference `oracle`.

    Both runs must share the sampling grid (same steps and step size);
    differences are evaluated in extended precision.
    """
    if primary.sample_steps.shape != oracle.sample_steps.shape or \
            (primary.sample_steps != oracle.sample_steps).any() or \
            float(primary.h) != float(oracle.h):
        raise ValueError("sampling grids do not match; comparison is invalid")
    n = primary.sample_steps.shape[0]
    pm = primary.main
    pr = primary.residual
    d = len(pm[0]) if isinstance(pm, list) else pm.shape[1]
    err = np.empty((n, d))
    has_energy = (
        getattr(primary, "energies", None) is not None
        and getattr(oracle, "energies", None) is not None
    )
    energy_err = np.empty(n) if has_energy else None
    with gmpy2.local_context(gmpy2.context(), precision=bits):
        for idx in range(n):
            a_main, a_res = _states_of(primary, idx)
            b_main, b_res = _states_of(oracle, idx)
            for c in range(d):
                v = (mpfr(_as_float_or_mpfr(a_main[c])) + mpfr(_as_float_or_mpfr(a_res[c]))
                     - mpfr(_as_float_or_mpfr(b_main[c])) - mpfr(_as_float_or_mpfr(b_res[c])))
                err[idx, c] = float(v)
            if has_energy:
                ha = _energy_at(primary, idx)
                hb = _energy_at(oracle, idx)
                h0 = _energy_at(oracle, 0)
                energy_err[idx] = float((ha - hb) / h0)
    return ErrorSeries(primary.sample_steps.copy(), err, energy_err)


def _as_float_or_mpfr(v):
    return v if isinstance(v, mpfr) else float(v)


def _energy_at(traj, index):
    if isinstance(traj, OracleTrajectory):
        return traj.energies[index]
    return traj.energy_extended(index)


def relative_energy_errors(traj, bits: int = 256) -> np.ndarray:
    """(H(t_k) - H(t_0)) / H(t_0) per sample, in extended precision."""
    n = traj.n_samples
    out = np.empty(n)
    with gmpy2.local_context(gmpy2.context(), precision=bits):
        h0 = _energy_at(traj, 0)
        for idx in range(n):
            out[idx] = float((_energy_at(traj, idx) - h0) / h0)
    return out
