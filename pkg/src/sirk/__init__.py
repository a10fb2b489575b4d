"""Round-off aware symplectic implicit Runge-Kutta integration.

Gauss collocation schemes implemented with machine-number coefficients
that satisfy the symplecticity condition bitwise, a per-component
fixed-point stopping test, compensated step accumulation, and a built-in
round-off error estimator, validated against an extended-precision
reference integrator.
"""

from .compensated import (
    AccumulationError,
    CompensatedVector,
    EstimatorRangeError,
    PRECISION,
    assert_round_to_nearest,
    kahan_accumulate,
    product_residual,
    round_reduced,
    two_sum,
)
from .coefficients import (
    GaussTableau,
    MachineTableau,
    TableauError,
    generate_gauss,
    make_machine_tableau,
    step_fractions,
)
from .core import (
    DivergedError,
    ErrorEstimateSeries,
    IntegrationConfig,
    IntegrationError,
    NonFiniteStateError,
    RhsFailureError,
    StageSet,
    StepResult,
    StopTracker,
    Trajectory,
    fallback_check,
    finalize_step,
    integrate,
    integrate_with_estimate,
    sweep,
)
from .problems import (
    DoublePendulumParams,
    NBodyParams,
    ODESystem,
    double_pendulum,
    dp_hamiltonian,
    dp_rhs,
    oss_angular_momentum,
    oss_hamiltonian,
    oss_initial_state,
    oss_params,
    oss_rhs,
    outer_solar_system,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"

assert_round_to_nearest()
