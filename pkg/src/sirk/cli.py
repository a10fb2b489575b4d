"""Command-line front end.

Subcommands::

    sirk coeffs    --stages S [--hex]        print tableau coefficients
    sirk integrate [--config F] [...]        trajectory + diagnostics CSV
    sirk estimate  [--config F] [...]        trajectory + round-off estimate CSV
    sirk ensemble  [--config F] [...]        perturbed-ensemble statistics CSVs
    sirk decompose --variant A|B|C|D [...]   reference-run energy-error CSV

All numeric output is CSV with a header row and 17-significant-digit
decimals; coefficients print as lossless hex-float literals with --hex.
Exit status: 0 on success with all outputs written, 2 for invalid
configuration (the message names the field), 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .coefficients import generate_gauss, make_machine_tableau, TableauError
from .core import (
    IntegrationError,
    TERMINATION_NAMES,
    integrate,
    integrate_with_estimate,
)
from .manifest import ManifestError, RunManifest, PRESETS
from .oracle import OracleConfig, oracle_integrate, relative_energy_errors
from .stats import (
    EnsembleSpec,
    drift_and_walk_fit,
    energy_jump_histogram,
    energy_jumps,
    ensemble_energy_errors,
    iteration_stats,
    run_ensemble,
    write_csv,
)

_EXIT_OK = 0
_EXIT_RUNTIME = 1
_EXIT_CONFIG = 2


def _add_manifest_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="manifest file (key = value sections)")
    p.add_argument("--problem", choices=("ncdp", "cdp", "oss", "custom"))
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--stages", type=int, metavar="S")
    p.add_argument("--h", metavar="EXPR", help="step size (e.g. 2^-7, 500/3, 0x1p-7)")
    p.add_argument("--t-end", dest="t_end", metavar="EXPR", help="integration horizon")
    p.add_argument("--sample-every", dest="sample_every", type=int, metavar="M")


def _manifest_from(args) -> RunManifest:
    if args.config:
        manifest = RunManifest.load(args.config)
    elif args.problem:
        manifest = RunManifest.for_problem(args.problem)
    else:
        manifest = RunManifest.for_problem("ncdp")
    overrides = {}
    if args.problem:
        overrides["problem"] = args.problem
        if not args.config:
            for key, value in PRESETS.get(args.problem, {}).items():
                setattr(manifest, key, value)
    for name in ("out_dir", "seed", "stages", "h", "t_end", "sample_every"):
        cli_name = "out" if name == "out_dir" else name
        value = getattr(args, cli_name, None)
        if value is not None:
            overrides[name] = value
    for name, value in overrides.items():
        setattr(manifest, name, value)
    if getattr(args, "r", None) is not None:
        manifest.estimator_r = args.r
    if getattr(args, "mode", None) is not None:
        manifest.estimator_mode = args.mode
    if getattr(args, "size", None) is not None:
        manifest.ensemble_size = args.size
    if getattr(args, "bits", None) is not None:
        manifest.oracle_bits = args.bits
    if getattr(args, "variant", None) is not None:
        manifest.oracle_variant = args.variant
    manifest.validate()
    return manifest


def _out_dir(manifest: RunManifest) -> Path:
    out = Path(manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _metadata_rows(manifest: RunManifest) -> list:
    h = manifest.h_value()
    return [
        ("version", __version__),
        ("problem", manifest.problem),
        ("stages", manifest.stages),
        ("h_expression", manifest.h),
        ("h_rounded", h),
        ("h_rounded_hex", float.hex(h)),
        ("t_end_expression", manifest.t_end),
        ("n_steps", manifest.n_steps()),
        ("sample_every", manifest.sample_every),
        ("seed", manifest.seed),
        ("rng", "numpy PCG64 via SeedSequence(seed).spawn(member)"),
        ("perturbation_distribution", "uniform on [-1, 1], relative"),
    ]


# ---------------------------------------------------------------------------
# coeffs
# ---------------------------------------------------------------------------

def _fmt_value(x: float, hex_mode: bool) -> str:
    return float.hex(x) if hex_mode else format(x, ".17g")


def cmd_coeffs(args) -> int:
    try:
        gauss = generate_gauss(args.stages, bits=args.bits)
        machine = make_machine_tableau(gauss)
    except TableauError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_CONFIG
    s = machine.stages
    print(f"stages = {s}")
    for i in range(s):
        print(f"weights[{i}] = {_fmt_value(machine.weights[i], args.hex)}")
    for i in range(s):
        for j in range(s):
            print(f"coupling[{i}][{j}] = {_fmt_value(machine.coupling[i, j], args.hex)}")
    try:
        machine.validate()
        print("symplecticity-self-check = PASS")
        return _EXIT_OK
    except TableauError as exc:
        print("symplecticity-self-check = FAIL")
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_RUNTIME


def parse_coeffs_output(text: str):
    """Parse cmd_coeffs output back into (stages, weights, coupling)."""
    values = {}
    stages = None
    for line in text.splitlines():
        if "=" not in line:
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key == "stages":
            stages = int(value)
        elif key.startswith(("weights[", "coupling[")):
            values[key] = float.fromhex(value) if value.lower().startswith(("0x", "-0x")) \
                else float(value)
    if stages is None:
        raise ValueError("no stages line found")
    weights = np.array([values[f"weights[{i}]"] for i in range(stages)])
    coupling = np.array([[values[f"coupling[{i}][{j}]"] for j in range(stages)]
                         for i in range(stages)])
    return stages, weights, coupling


# ---------------------------------------------------------------------------
# integrate / estimate
# ---------------------------------------------------------------------------

def _trajectory_rows(traj):
    sample_iters = traj.sample_iterations()
    sample_terms = traj.sample_terminations()
    for idx in range(traj.n_samples):
        step = int(traj.sample_steps[idx])
        row = [step, step * traj.h]
        row.extend(traj.main[idx])
        row.extend(traj.residual[idx])
        if traj.energies is not None:
            row.extend(traj.energies[idx])
        row.append(int(sample_iters[idx]))
        row.append(TERMINATION_NAMES.get(int(sample_terms[idx]), "initial"))
        yield row


def _trajectory_header(d: int, with_energy: bool) -> list:
    head = ["step", "time"]
    head += [f"y_{c}" for c in range(d)]
    head += [f"e_{c}" for c in range(d)]
    if with_energy:
        head += ["energy_hi", "energy_lo"]
    head += ["iterations", "termination"]
    return head


def _write_trajectory(path, traj) -> None:
    d = traj.main.shape[1]
    write_csv(path, _trajectory_header(d, traj.energies is not None),
              _trajectory_rows(traj))


def _diagnostics_rows(manifest, traj) -> list:
    fixed_pct, mean_iters = iteration_stats([traj])
    rows = _metadata_rows(manifest)
    rows += [
        ("fixed_point_percentage", fixed_pct),
        ("mean_iterations", mean_iters),
    ]
    return rows


def cmd_integrate(args) -> int:
    manifest = _manifest_from(args)
    system, y0 = manifest.resolve_problem()
    tableau = make_machine_tableau(generate_gauss(manifest.stages))
    config = manifest.integration_config()
    traj = integrate(system, tableau.with_step_size(config.h), config, y0)
    out = _out_dir(manifest)
    _write_trajectory(out / "trajectory.csv", traj)
    write_csv(out / "diagnostics.csv", ["key", "value"],
              _diagnostics_rows(manifest, traj))
    print(f"wrote {out / 'trajectory.csv'} and {out / 'diagnostics.csv'}")
    return _EXIT_OK


def cmd_estimate(args) -> int:
    manifest = _manifest_from(args)
    if manifest.estimator_mode == "off":
        raise ManifestError("estimator_mode",
                            "the estimate command requires parallel or sequential mode")
    system, y0 = manifest.resolve_problem()
    tableau = make_machine_tableau(generate_gauss(manifest.stages))
    config = manifest.integration_config(estimator=True)
    traj, series = integrate_with_estimate(
        system, tableau.with_step_size(config.h), config, y0)
    out = _out_dir(manifest)
    _write_trajectory(out / "trajectory.csv", traj)
    d = traj.main.shape[1]
    rows = (
        [int(series.sample_steps[i]), int(series.sample_steps[i]) * traj.h,
         *series.estimates[i]]
        for i in range(series.sample_steps.shape[0])
    )
    write_csv(out / "estimate.csv",
              ["step", "time"] + [f"est_{c}" for c in range(d)], rows)
    diag = _diagnostics_rows(manifest, traj)
    diag += [
        ("estimator_mode", series.mode),
        ("estimator_r", series.reduce_bits),
        ("secondary_mean_iterations", float(series.secondary.iterations.mean())),
    ]
    write_csv(out / "diagnostics.csv", ["key", "value"], diag)
    print(f"wrote {out / 'trajectory.csv'}, {out / 'estimate.csv'} "
          f"and {out / 'diagnostics.csv'}")
    return _EXIT_OK


# ---------------------------------------------------------------------------
# ensemble
# ---------------------------------------------------------------------------

def cmd_ensemble(args) -> int:
    manifest = _manifest_from(args)
    system, y0 = manifest.resolve_problem()
    tableau = make_machine_tableau(generate_gauss(manifest.stages))
    config = manifest.integration_config()
    spec = EnsembleSpec(
        system=system, y0=y0, config=config,
        size=manifest.ensemble_size,
        perturb_rel=manifest._number("perturb_rel")[0],
        seed=manifest.seed,
    )
    trajectories = run_ensemble(spec, tableau.with_step_size(config.h))
    out = _out_dir(manifest)

    jumps = np.concatenate([energy_jumps(t) for t in trajectories])
    hist = energy_jump_histogram(jumps)
    write_csv(out / "energy_jump_histogram.csv",
              ["bin_low", "bin_high", "count", "normal_count"],
              ([hist.bin_edges[i], hist.bin_edges[i + 1], int(hist.counts[i]),
                hist.normal_density[i]] for i in range(hist.counts.shape[0])))

    errors = ensemble_energy_errors(trajectories)
    times = trajectories[0].sample_steps * config.h
    write_csv(out / "energy_error_evolution.csv",
              ["time", "mean_error", "sigma_error"],
              ([times[i], errors[:, i].mean(),
                errors[:, i].std(ddof=1)] for i in range(times.shape[0])))

    fit = drift_and_walk_fit(times, errors)
    fixed_pct, mean_iters = iteration_stats(trajectories)
    write_csv(out / "drift_walk_fit.csv", ["key", "value"], [
        ("jump_mean", hist.mean),
        ("jump_sigma", hist.std),
        ("jump_count", hist.total),
        ("drift_slope", fit.drift_slope),
        ("drift_stderr", fit.drift_stderr),
        ("walk_exponent", "undefined" if fit.walk_exponent is None else fit.walk_exponent),
        ("walk_points", fit.walk_points),
    ])
    write_csv(out / "iteration_stats.csv", ["key", "value"], [
        ("runs", len(trajectories)),
        ("steps_per_run", config.n_steps),
        ("fixed_point_percentage", fixed_pct),
        ("mean_iterations", mean_iters),
    ])
    write_csv(out / "run_metadata.csv", ["key", "value"],
              _metadata_rows(manifest) + [
                  ("ensemble_size", manifest.ensemble_size),
                  ("perturb_rel", manifest.perturb_rel),
              ])
    print(f"wrote ensemble statistics to {out}")
    return _EXIT_OK


# ---------------------------------------------------------------------------
# decompose
# ---------------------------------------------------------------------------

def cmd_decompose(args) -> int:
    manifest = _manifest_from(args)
    system, y0 = manifest.resolve_problem()
    gauss = generate_gauss(manifest.stages)
    machine = make_machine_tableau(gauss)
    oracle_config = OracleConfig.for_variant(manifest.oracle_variant,
                                             bits=manifest.oracle_bits)
    config = manifest.integration_config()
    traj = oracle_integrate(system, gauss, oracle_config, config, y0,
                            machine_tableau=machine.with_step_size(config.h))
    out = _out_dir(manifest)
    d = system.dimension
    rows = []
    for idx in range(traj.n_samples):
        step = int(traj.sample_steps[idx])
        row = [step, step * config.h]
        row.extend(float(v) for v in traj.state_extended(idx))
        rows.append(row)
    write_csv(out / "oracle_trajectory.csv",
              ["step", "time"] + [f"y_{c}" for c in range(d)], rows)
    rel = relative_energy_errors(traj)
    write_csv(out / "oracle_energy_error.csv",
              ["step", "time", "relative_energy_error"],
              ([int(traj.sample_steps[i]), int(traj.sample_steps[i]) * config.h,
                rel[i]] for i in range(traj.n_samples)))
    write_csv(out / "run_metadata.csv", ["key", "value"],
              _metadata_rows(manifest) + [
                  ("oracle_variant", manifest.oracle_variant),
                  ("oracle_bits", manifest.oracle_bits),
              ])
    print(f"wrote reference-run outputs to {out}")
    return _EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sirk",
        description="Symplectic implicit Runge-Kutta integration with "
                    "round-off aware fixed-point iteration.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("coeffs", help="print machine tableau coefficients")
    p.add_argument("--stages", type=int, required=True, metavar="S")
    p.add_argument("--hex", action="store_true", help="lossless hex-float output")
    p.add_argument("--bits", type=int, default=192, help="generation precision")
    p.set_defaults(func=cmd_coeffs)

    p = sub.add_parser("integrate", help="run one integration")
    _add_manifest_args(p)
    p.set_defaults(func=cmd_integrate)

    p = sub.add_parser("estimate", help="integrate with round-off estimation")
    _add_manifest_args(p)
    p.add_argument("--r", type=int, metavar="N", help="significand bits to round away")
    p.add_argument("--mode", choices=("parallel", "sequential"))
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("ensemble", help="perturbed-ensemble statistics")
    _add_manifest_args(p)
    p.add_argument("--size", type=int, metavar="P", help="ensemble size")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("decompose", help="reference run isolating one error source")
    _add_manifest_args(p)
    p.add_argument("--variant", choices=("A", "B", "C", "D"))
    p.add_argument("--bits", type=int, metavar="N", help="reference precision")
    p.set_defaults(func=cmd_decompose)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_CONFIG
    except (TableauError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_CONFIG
    except IntegrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
