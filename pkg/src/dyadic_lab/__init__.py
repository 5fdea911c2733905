"""Numerical laboratory for dyadic shell models with transport noise."""

from .errors import (
    BlowUpError,
    ConfigError,
    ConvergenceError,
    NormOverflowError,
    UsageError,
)
from .shells import (
    DiagonalOperator,
    ShellVector,
    apply_rotation_generator,
    bilinear,
    dissipation_operator,
    hs_norm,
    neighbor_corrector,
    semigroup_apply,
    stratonovich_corrector,
)
from .noise import (
    BrownianDriver,
    ThetaFamily,
    sample_increment_block,
    theta_custom,
    theta_power_law,
    theta_power_tail,
    theta_uniform,
)

__version__ = "0.1.0"
