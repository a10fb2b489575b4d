"""Run manifests: lossless text configuration for experiments.

The format is line-based ``key = value`` under ``[section]`` headers.
Numeric fields accept plain decimals, hex-float literals (``0x1.8p-1``),
integer powers (``2^-7``, ``10^7``) and integer rationals (``500/3``), so
machine numbers and exact step sizes can be written without decimal
double-rounding. Expressions are kept verbatim; a rational step size is
rounded to binary64 exactly once and the rounded value is reported in the
run metadata.
"""

from __future__ import annotations

import configparser
import io
import re
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from .compensated import CompensatedVector
from .core import IntegrationConfig
from .problems import (
    ODESystem,
    double_pendulum,
    outer_solar_system,
    oss_initial_state,
    parse_scalar_file,
)

PROBLEMS = ("ncdp", "cdp", "oss", "custom")


class ManifestError(ValueError):
    """Invalid manifest; the message names the offending field."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"manifest field {field_name!r}: {message}")


_POWER = re.compile(r"^([+-]?\d+)\^([+-]?\d+)$")
_RATIONAL = re.compile(r"^([+-]?\d+)\s*/\s*(\d+)$")


def parse_number(text: str) -> tuple[float, Fraction]:
    """Parse a numeric expression; returns (binary64 value, exact value).

    The float is the single correct rounding of the exact value.
    """
    s = str(text).strip()
    low = s.lower()
    if low.startswith(("0x", "-0x", "+0x")):
        v = float.fromhex(s)
        return v, Fraction(v)
    m = _POWER.match(s)
    if m:
        frac = Fraction(int(m.group(1))) ** int(m.group(2))
        return float(frac), frac
    m = _RATIONAL.match(s)
    if m:
        frac = Fraction(int(m.group(1)), int(m.group(2)))
        return float(frac), frac
    try:
        frac = Fraction(s)  # handles ints and decimal/scientific literals exactly
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"cannot parse numeric expression {s!r}") from exc
    return float(frac), frac


#: Benchmark parameter presets: step size, horizon, sampling stride.
PRESETS = {
    "ncdp": dict(h="2^-7", t_end="2^12", sample_every=2**10),
    "cdp": dict(h="2^-7", t_end="2^8", sample_every=2**8),
    "oss": dict(h="500/3", t_end="10^7", sample_every=120),
}


@dataclass
class RunManifest:
    problem: str = "ncdp"
    stages: int = 6
    h: str = "2^-7"
    t_end: str = "2^12"
    sample_every: int = 1024
    seed: int = 0
    out_dir: str = "."
    estimator_r: int = 3
    estimator_mode: str = "parallel"
    ensemble_size: int = 64
    perturb_rel: str = "1e-6"
    oracle_bits: int = 113
    oracle_variant: str = "A"
    max_iterations: int = 100
    fallback_abs_tol: str = "1e-8"
    fallback_rel_tol: str = "1e-8"
    streak_required: int = 2
    system: str = ""        # for problem = custom: "dp" or "oss"
    initial_file: str = ""  # for problem = custom: `name = decimal` state file

    @classmethod
    def for_problem(cls, problem: str, **overrides) -> "RunManifest":
        if problem not in PROBLEMS:
            raise ManifestError("problem", f"expected one of {PROBLEMS}, got {problem!r}")
        base = dict(PRESETS.get(problem, {}))
        base.update(overrides)
        return cls(problem=problem, **base)

    # -- derived values ----------------------------------------------------

    def _number(self, name: str, positive: bool = True) -> tuple[float, Fraction]:
        try:
            value, frac = parse_number(getattr(self, name))
        except ValueError as exc:
            raise ManifestError(name, str(exc)) from exc
        if positive and not value > 0:
            raise ManifestError(name, f"must be positive, got {getattr(self, name)!r}")
        return value, frac

    def h_value(self) -> float:
        return self._number("h")[0]

    def n_steps(self) -> int:
        _, h_frac = self._number("h")
        _, t_frac = self._number("t_end")
        ratio = t_frac / h_frac
        steps = round(ratio)
        if steps < 0 or abs(ratio - steps) > Fraction(1, 10**9):
            raise ManifestError("t_end", f"t_end/h = {float(ratio)} is not a whole "
                                         "number of steps")
        return int(steps)

    def validate(self) -> None:
        if self.problem not in PROBLEMS:
            raise ManifestError("problem", f"expected one of {PROBLEMS}")
        if not 1 <= self.stages <= 16:
            raise ManifestError("stages", "must be between 1 and 16")
        self._number("h")
        self._number("t_end")
        n = self.n_steps()
        if self.sample_every < 1 or (n > 0 and self.sample_every > n):
            raise ManifestError("sample_every", f"must be in [1, {max(n, 1)}]")
        if self.estimator_mode not in ("off", "parallel", "sequential"):
            raise ManifestError("estimator_mode", "must be off, parallel or sequential")
        if not 0 <= self.estimator_r < 53:
            raise ManifestError("estimator_r", "must be in [0, 53)")
        if self.ensemble_size < 2:
            raise ManifestError("ensemble_size", "must be at least 2")
        self._number("perturb_rel")
        if self.oracle_variant not in ("A", "B", "C", "D"):
            raise ManifestError("oracle_variant", "must be A, B, C or D")
        if self.oracle_bits != 53 and self.oracle_bits < 106:
            raise ManifestError("oracle_bits", "must be >= 106 (or exactly 53)")
        if self.max_iterations < 1:
            raise ManifestError("max_iterations", "must be at least 1")
        if self.streak_required < 1:
            raise ManifestError("streak_required", "must be at least 1")
        self._number("fallback_abs_tol")
        self._number("fallback_rel_tol")
        if self.problem == "custom":
            if self.system not in ("dp", "oss"):
                raise ManifestError("system", "custom problem needs system = dp|oss")
            if not self.initial_file:
                raise ManifestError("initial_file", "custom problem needs a state file")

    def integration_config(self, estimator: bool = False) -> IntegrationConfig:
        self.validate()
        return IntegrationConfig(
            h=self.h_value(),
            n_steps=self.n_steps(),
            sample_every=self.sample_every,
            max_iterations=self.max_iterations,
            fallback_abs_tol=self._number("fallback_abs_tol")[0],
            fallback_rel_tol=self._number("fallback_rel_tol")[0],
            streak_required=self.streak_required,
            estimator_r=self.estimator_r,
            estimator_mode=self.estimator_mode if estimator else "off",
        )

    def resolve_problem(self) -> tuple[ODESystem, CompensatedVector]:
        """The system and compensated initial state this manifest names."""
        self.validate()
        if self.problem == "ncdp":
            system = double_pendulum()
            return system, CompensatedVector.from_float(
                system.initial_states["non-chaotic"])
        if self.problem == "cdp":
            system = double_pendulum()
            return system, CompensatedVector.from_float(
                system.initial_states["chaotic"])
        if self.problem == "oss":
            return outer_solar_system(), compensated_from_extended(oss_initial_state())
        system = double_pendulum() if self.system == "dp" else outer_solar_system()
        values = parse_scalar_file(Path(self.initial_file))
        try:
            ordered = [values[f"y_{i}"] for i in range(system.dimension)]
        except KeyError as exc:
            raise ManifestError("initial_file",
                                f"missing entry {exc.args[0]!r}; expected y_0 .. "
                                f"y_{system.dimension - 1}") from exc
        import gmpy2
        with gmpy2.local_context(gmpy2.context(), precision=128):
            return system, compensated_from_extended([gmpy2.mpfr(v) for v in ordered])

    # -- text form ----------------------------------------------------------

    _SECTIONS = {
        "run": ("problem", "stages", "h", "t_end", "sample_every", "seed", "out_dir"),
        "fixed_point": ("max_iterations", "streak_required",
                        "fallback_abs_tol", "fallback_rel_tol"),
        "estimator": ("estimator_r", "estimator_mode"),
        "ensemble": ("ensemble_size", "perturb_rel"),
        "oracle": ("oracle_bits", "oracle_variant"),
        "custom": ("system", "initial_file"),
    }

    def emit(self) -> str:
        out = io.StringIO()
        for section, names in self._SECTIONS.items():
            out.write(f"[{section}]\n")
            for name in names:
                out.write(f"{name} = {getattr(self, name)}\n")
            out.write("\n")
        return out.getvalue()

    @classmethod
    def parse(cls, text: str) -> "RunManifest":
        cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ManifestError("<file>", f"malformed config: {exc}") from exc
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for section in cp.sections():
            for key, value in cp.items(section):
                if key not in known:
                    raise ManifestError(key, "unknown field")
                kwargs[key] = int(value) if known[key] == "int" else value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.parse(Path(path).read_text())


def compensated_from_extended(values) -> CompensatedVector:
    """Split extended-precision values into (main, residual) binary64 pairs."""
    import gmpy2
    main = np.empty(len(values))
    resid = np.empty(len(values))
    with gmpy2.local_context(gmpy2.context(), precision=128):
        for i, v in enumerate(values):
            v = gmpy2.mpfr(v)
            hi = float(v)
            main[i] = hi
            resid[i] = float(v - gmpy2.mpfr(hi))
    return CompensatedVector(main, resid)
