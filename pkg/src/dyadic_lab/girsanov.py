"""Change-of-measure densities and reweighting estimators.

The linear and nonlinear models differ, under equivalent measures, by a
drift on the first noise column only.  Along a simulated path the running
stochastic integral of the states against exactly the increments the
simulation consumed gives the log-density between the two measures; the
reweighting estimator then expresses nonlinear-model expectations through
linear-model ensembles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .stochastic import StochPath

__all__ = ["DensityPath", "ReweightedEstimate", "density_path",
           "novikov_bound", "reweighted_expectation", "log_weight_terms"]


@dataclass(frozen=True)
class DensityPath:
    """Running exponential density along one path.

    log_density = integral - quadratic_variation / 2 holds exactly by
    construction; `density` is its exponential (positive, possibly 0.0 in
    floating point for very negative exponents).
    """

    times: np.ndarray
    integral: np.ndarray             # running stochastic integral
    quadratic_variation: np.ndarray  # running [.,.]
    sign: int

    @property
    def log_density(self) -> np.ndarray:
        return self.integral - 0.5 * self.quadratic_variation

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    def final_log_density(self) -> float:
        return float(self.log_density[-1])


def log_weight_terms(states: np.ndarray, dw_first_column: np.ndarray,
                     dt: float, nu: float, theta1: float,
                     sign: int = 1) -> tuple[float, float]:
    """Increment contributions of one step batch (left-point Ito sums).

    `states` holds X(t_k) rows, `dw_first_column` the matching increments of
    the first noise column; rows pair state k with the increment consumed
    over [t_k, t_k+dt).  Returns (integral_sum, qv_sum) for
    sign/(sqrt(2 nu) theta1) sum_i int X_i dW_{i,1} and its quadratic
    variation.  Only the first i_max shells enter (the drift lives on rows
    i = 1..i_max of the noise).
    """
    if theta1 == 0.0:
        raise UsageError("first noise coefficient must be nonzero")
    if nu <= 0:
        raise UsageError("noise intensity must be positive")
    n_rows = dw_first_column.shape[-1]
    scale = 1.0 / (math.sqrt(2.0 * nu) * theta1)
    xs = states[..., :n_rows]
    integral = sign * scale * float(np.sum(xs * dw_first_column))
    qv = scale * scale * dt * float(np.sum(xs * xs))
    return integral, qv


def density_path(path: StochPath, nu: float, theta1: float,
                 sign: int = 1) -> DensityPath:
    """Running change-of-measure density along a recorded path.

    The j = 1 increment column is regenerated from the path's driver, so the
    sums use exactly the increments the simulation consumed; the path must
    have been recorded every step.  sign=+1 integrates +X dW (density of the
    nonlinear measure relative to the linear one along linear simulations);
    sign=-1 integrates -X dW (the reverse direction along nonlinear ones).
    """
    if theta1 == 0.0:
        raise UsageError("first noise coefficient must be nonzero")
    if sign not in (-1, 1):
        raise UsageError("sign must be +1 or -1")
    steps = path.times.size - 1
    dt = path.driver.dt
    if abs(path.times[1] - path.times[0] - dt) > 1e-12 * max(1.0, dt):
        raise UsageError("density needs a path recorded every step")
    i_max = min(path.driver.i_max, path.dim)
    scale = 1.0 / (math.sqrt(2.0 * nu) * theta1)

    integral = np.zeros(steps + 1)
    qv = np.zeros(steps + 1)
    for k in range(steps):
        col = path.driver.increment_block(path.trajectory, k)[:i_max, 0]
        xs = path.states[k, :i_max]
        integral[k + 1] = integral[k] + sign * scale * float(xs @ col)
        qv[k + 1] = qv[k] + scale * scale * dt * float(xs @ xs)
    return DensityPath(path.times.copy(), integral, qv, sign)


def novikov_bound(x_norm: float, horizon: float, nu: float,
                  theta1: float) -> float:
    """Exponential-moment bound exp(||x||^2 T / (4 nu theta_1^2)).

    Finiteness of this bound is what makes the exponential density a true
    martingale; keeping the exponent below ~2 keeps reweighting well
    conditioned at desk scale.
    """
    if theta1 == 0.0:
        raise UsageError("first noise coefficient must be nonzero")
    if nu <= 0:
        raise UsageError("noise intensity must be positive")
    return math.exp(x_norm ** 2 * horizon / (4.0 * nu * theta1 ** 2))


@dataclass(frozen=True)
class ReweightedEstimate:
    estimate: float
    stderr: float
    ess: float
    degenerate: bool

    def __iter__(self):
        yield self.estimate
        yield self.stderr


def reweighted_expectation(f_values, log_weights,
                           ess_floor: float = 10.0) -> ReweightedEstimate:
    """Self-normalized importance-sampling estimate with delta-method error.

    Self-normalization trades the unbiasedness of raw reweighting for
    bounded weights relative to their sum; f identically 1 returns exactly
    1.  An effective sample size below `ess_floor` flags the estimate as
    degenerate (returned, not raised).
    """
    f = np.asarray(f_values, dtype=float)
    lw = np.asarray(log_weights, dtype=float)
    if f.shape != lw.shape or f.ndim != 1 or f.size == 0:
        raise UsageError("need matching one-dimensional samples and weights")
    w = np.exp(lw - np.max(lw))
    total = float(np.sum(w))
    est = float(np.sum(w * f) / total)
    resid = f - est
    stderr = float(np.sqrt(np.sum((w * resid) ** 2)) / total)
    ess = float(total ** 2 / np.sum(w * w))
    return ReweightedEstimate(est, stderr, ess, bool(ess < ess_floor))
