"""Ensemble experiments and round-off statistics.

Round-off errors are studied statistically: many integrations from
slightly perturbed initial states, energy-jump distributions between
sampling times, and the growth law of the ensemble standard deviation
(a random-walk accumulation shows sigma(t) ~ t**0.5, a biased one drifts
linearly). Energies always come from the extended-precision samples so
the measurement itself adds no binary64 noise.

Randomness uses NumPy's PCG64 generator; an ensemble derives one child
seed per member via SeedSequence(seed).spawn(P), so results are
reproducible bit for bit for a fixed seed, independent of scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import gmpy2
import numpy as np

from .coefficients import MachineTableau
from .compensated import CompensatedVector
from .core import TERM_FIXED_POINT, IntegrationConfig, Trajectory, integrate
from .oracle import _energy_at, relative_energy_errors
from .problems import ODESystem

__all__ = [
    "EnsembleSpec", "HistogramResult", "DriftWalkFit", "perturb",
    "run_ensemble", "energy_jumps", "ensemble_energy_errors",
    "energy_jump_histogram", "drift_and_walk_fit", "linear_drift",
    "iteration_stats", "moment_diagnostics", "write_csv",
]


@dataclass
class EnsembleSpec:
    """A base problem plus the size/seed of its perturbed ensemble."""

    system: ODESystem
    y0: CompensatedVector
    config: IntegrationConfig
    size: int
    perturb_rel: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.size < 2:
            raise ValueError("ensemble size must be at least 2")
        if not self.perturb_rel > 0:
            raise ValueError("perturb_rel must be positive")

    def member_states(self) -> list[CompensatedVector]:
        """The perturbed initial states, one per member, reproducibly."""
        children = np.random.SeedSequence(self.seed).spawn(self.size)
        return [
            perturb(self.y0, self.perturb_rel, np.random.default_rng(child))
            for child in children
        ]


def perturb(y0: CompensatedVector, perturb_rel: float,
            rng: np.random.Generator) -> CompensatedVector:
    """Relative random perturbation of a compensated state.

    Each main component becomes fl(y_j * (1 + perturb_rel * u_j)) with
    u_j uniform on [-1, 1]; the residual part is carried over unchanged.
    perturb_rel = 0 leaves the state bitwise intact (the generator is
    still advanced by one draw per component).
    """
    u = 2.0 * rng.random(y0.dimension) - 1.0
    main = y0.main * (1.0 + perturb_rel * u)
    return CompensatedVector(main, y0.residual.copy())


def run_ensemble(spec: EnsembleSpec, tableau: MachineTableau,
                 workers: int | None = None) -> list[Trajectory]:
    """Integrate every perturbed member; order follows member index.

    Members run concurrently (the stepping kernel releases the GIL);
    they share only the immutable tableau and system definition.
    """
    states = spec.member_states()
    tab = tableau if tableau.step_weights is not None and \
        tableau.step_size == spec.config.h else tableau.with_step_size(spec.config.h)
    workers = workers or min(spec.size, os.cpu_count() or 1)
    if workers == 1:
        return [integrate(spec.system, tab, spec.config, y) for y in states]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(integrate, spec.system, tab, spec.config, y)
                   for y in states]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# Energy statistics
# ---------------------------------------------------------------------------

def energy_jumps(traj, bits: int = 256) -> np.ndarray:
    """Scaled energy jumps (H(t_k) - H(t_{k-1})) / H(t_0) per sample gap."""
    n = traj.n_samples
    out = np.empty(n - 1)
    with gmpy2.local_context(gmpy2.context(), precision=bits):
        h0 = _energy_at(traj, 0)
        prev = h0
        for k in range(1, n):
            cur = _energy_at(traj, k)
            out[k - 1] = float((cur - prev) / h0)
            prev = cur
    return out


def ensemble_energy_errors(trajectories, bits: int = 256) -> np.ndarray:
    """Relative energy error series, stacked (runs x samples)."""
    return np.vstack([relative_energy_errors(t, bits=bits) for t in trajectories])


@dataclass
class HistogramResult:
    mean: float
    std: float
    bin_edges: np.ndarray
    counts: np.ndarray
    normal_density: np.ndarray  # matching N(mean, std) curve per bin, in counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def energy_jump_histogram(samples, bins: int = 60) -> HistogramResult:
    """Histogram of energy jumps with the matching normal curve.

    Returns sample mean, standard deviation, bin counts, and the
    N(mean, std) density evaluated at bin centres scaled to counts.
    Requires at least 100 samples.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size < 100:
        raise ValueError(f"need at least 100 jump samples, got {samples.size}")
    mean = float(samples.mean())
    std = float(samples.std(ddof=1))
    counts, edges = np.histogram(samples, bins=bins)
    centres = 0.5 * (edges[:-1] + edges[1:])
    width = edges[1] - edges[0]
    if std > 0:
        density = np.exp(-0.5 * ((centres - mean) / std) ** 2) / (std * np.sqrt(2 * np.pi))
    else:
        density = np.zeros_like(centres)
    return HistogramResult(mean, std, edges, counts, density * samples.size * width)


def moment_diagnostics(samples) -> tuple[float, float]:
    """(skewness, excess kurtosis) of a sample set."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    x = x - x.mean()
    m2 = np.mean(x * x)
    if m2 == 0:
        return 0.0, 0.0
    m3 = np.mean(x ** 3)
    m4 = np.mean(x ** 4)
    return float(m3 / m2 ** 1.5), float(m4 / m2 ** 2 - 3.0)


@dataclass
class DriftWalkFit:
    drift_slope: float
    drift_stderr: float
    walk_exponent: float | None   # None when the series is degenerate
    walk_points: int = 0


def linear_drift(times, series) -> tuple[float, float]:
    """Least-squares slope and its standard error for one error series."""
    t = np.asarray(times, dtype=np.float64)
    y = np.asarray(series, dtype=np.float64)
    if t.size != y.size or t.size < 3:
        raise ValueError("need matching series with at least 3 points")
    coef, cov = np.polyfit(t, y, 1, cov=True)
    return float(coef[0]), float(np.sqrt(cov[0, 0]))


def drift_and_walk_fit(times, series_matrix) -> DriftWalkFit:
    """Ensemble drift slope and sigma(t) power-law exponent.

    times has one entry per sample; series_matrix is (runs x samples)
    relative energy errors. The drift slope is fitted to the ensemble
    mean; the random-walk exponent alpha is the log-log slope of the
    across-run standard deviation (alpha = 1/2 for unbiased round-off
    accumulation, 1 for a dominating linear drift).
    """
    t = np.asarray(times, dtype=np.float64)
    m = np.asarray(series_matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != t.size:
        raise ValueError("series_matrix must be (runs x samples)")
    if t.size < 8:
        raise ValueError("need at least 8 sample times")
    if m.shape[0] < 16:
        raise ValueError("need at least 16 runs")
    mean_series = m.mean(axis=0)
    slope, stderr = linear_drift(t, mean_series)
    sigma = m.std(axis=0, ddof=1)
    mask = (t > 0) & (sigma > 0)
    if mask.sum() < 2:
        return DriftWalkFit(slope, stderr, None, int(mask.sum()))
    alpha = float(np.polyfit(np.log(t[mask]), np.log(sigma[mask]), 1)[0])
    return DriftWalkFit(slope, stderr, alpha, int(mask.sum()))


def iteration_stats(trajectories) -> tuple[float, float]:
    """(fixed-point percentage, mean sweeps per step) over trajectories."""
    if not trajectories:
        raise ValueError("need at least one trajectory")
    iters = np.concatenate([t.iterations for t in trajectories])
    terms = np.concatenate([t.terminations for t in trajectories])
    if iters.size == 0:
        return 100.0, 0.0
    fixed = float((terms == TERM_FIXED_POINT).mean() * 100.0)
    return fixed, float(iters.mean())


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path, header, rows) -> None:
    """Plain CSV, one header row, floats at 17 significant digits."""
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
