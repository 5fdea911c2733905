"""Exception types shared across the package."""

from __future__ import annotations


class UsageError(ValueError):
    """An argument violates a documented precondition."""


class NormOverflowError(OverflowError):
    """A weighted norm overflowed; carries the first offending shell."""

    def __init__(self, shell: int, message: str | None = None):
        self.shell = shell
        super().__init__(message or f"norm term overflowed at shell {shell}")


class BlowUpError(RuntimeError):
    """A trajectory left the finite (or admissible) region.

    Attributes record where the integration failed: `time` and `step` of the
    offending update and, when known, the first bad `shell` (1-based).
    """

    def __init__(self, time: float, step: int, shell: int | None = None,
                 message: str | None = None):
        self.time = time
        self.step = step
        self.shell = shell
        where = f"t={time:.6g}, step={step}"
        if shell is not None:
            where += f", shell {shell}"
        super().__init__(message or f"trajectory blew up ({where})")


class ConvergenceError(RuntimeError):
    """An iterative solve failed to contract; carries the last residual."""

    def __init__(self, residual: float, iterations: int,
                 message: str | None = None):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            message
            or f"no convergence after {iterations} iterations "
               f"(last residual {residual:.3e})")


class ConfigError(ValueError):
    """Config parsing/validation failure; carries every violation found."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n" +
                         "\n".join(f"  - {v}" for v in self.violations))
