"""Second-moment system of the rotation-noise linear model.

The expected squared amplitudes Y_n(t) = E[X_n(t)^2] of the linear model
close on themselves: Y' = Y M for a symmetric matrix M whose diagonal is
twice the Ito-corrector drift and whose off-diagonal entries encode the
pairwise energy exchange of the rotations.  Truncated at `dim` rows the
matrix is strictly sub-conservative (mass leaks into the discarded shells);
the analytic deficit is reported rather than patched.

Evolving Y with an L-stable implicit scheme gives the deterministic oracle
for Monte Carlo second moments of the stochastic linear solver.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import UsageError

__all__ = ["MomentMatrix", "MomentTrajectory", "build_moment_matrix",
           "row_conservation_residuals", "evolve_moments",
           "compare_mc_moments"]


@dataclass(frozen=True)
class MomentMatrix:
    """Dense truncation of the moment-evolution matrix (units 1/time)."""

    matrix: np.ndarray
    lam: float
    nu: float
    theta_sq: np.ndarray   # squared coefficients, padded to dim

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise UsageError("moment matrix must be square")
        if not np.allclose(m, m.T, rtol=0, atol=0):
            raise UsageError("moment matrix must be exactly symmetric")
        if np.any(np.diag(m) > 0):
            raise UsageError("diagonal entries must be nonpositive")
        off = m - np.diag(np.diag(m))
        if np.any(off < 0):
            raise UsageError("off-diagonal entries must be nonnegative")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def build_moment_matrix(theta, lam: float, nu: float, dim: int) -> MomentMatrix:
    """Entries of the second-moment generator.

    m_{n,n} = -2 nu (lam^(2n) + sum_{j<n} theta_j^2 lam^(2(n-j))),
    m_{n,j} =  2 nu lam^(2j) theta_{n-j}^2   for n > j  (symmetric).
    """
    coeffs = np.atleast_1d(np.asarray(
        getattr(theta, "coefficients", theta), dtype=float))
    l2sq = float(np.sum(coeffs ** 2))
    if abs(l2sq - 1.0) > 1e-12:
        raise UsageError("moment matrix needs unit-l2 coefficients")
    if nu < 0:
        raise UsageError("intensity must be nonnegative")
    th_sq = np.zeros(dim)
    take = min(coeffs.size, dim)
    th_sq[:take] = coeffs[:take] ** 2

    lam2 = np.power(lam, 2.0 * np.arange(1, dim + 1, dtype=float))
    m = np.zeros((dim, dim))
    for n in range(1, dim + 1):
        cross = sum(th_sq[j - 1] * lam ** (2.0 * (n - j)) for j in range(1, n))
        m[n - 1, n - 1] = -2.0 * nu * (lam2[n - 1] + cross)
        for j in range(1, n):
            val = 2.0 * nu * lam2[j - 1] * th_sq[n - j - 1]
            m[n - 1, j - 1] = val
            m[j - 1, n - 1] = val
    return MomentMatrix(m, lam, nu, th_sq)


def row_conservation_residuals(mm: MomentMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Row sums of the truncated matrix and their analytic explanation.

    Returns (residuals, deficits) where residual_n = m_{n,n} + sum_{j != n}
    m_{n,j} over the stored columns and deficit_n = 2 nu lam^(2n)
    (1 - sum_{k <= dim-n} theta_k^2) is the mass rate lost to the discarded
    shells.  For the untruncated matrix the residual would vanish row by row;
    here residual_n = -deficit_n up to rounding.
    """
    m = mm.matrix
    residuals = m.sum(axis=1)
    dim = mm.dim
    lam2n = np.power(mm.lam, 2.0 * np.arange(1, dim + 1, dtype=float))
    tail = np.array([1.0 - np.sum(mm.theta_sq[:dim - n]) for n in range(1, dim + 1)])
    deficits = 2.0 * mm.nu * lam2n * tail
    return residuals, deficits


@dataclass
class MomentTrajectory:
    times: np.ndarray
    values: np.ndarray   # (K+1, dim)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def total_mass(self) -> np.ndarray:
        return self.values.sum(axis=1)

    def at_time(self, t: float, tol: float = 1e-9) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > tol * max(1.0, abs(t)):
            raise UsageError(f"time {t} not on the moment grid")
        return self.values[k]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time"] +
                            [f"y_{n}" for n in range(1, self.dim + 1)] +
                            ["total_mass"])
            mass = self.total_mass()
            for k in range(self.times.size):
                writer.writerow([repr(float(self.times[k]))] +
                                [repr(float(v)) for v in self.values[k]] +
                                [repr(float(mass[k]))])


def evolve_moments(y0, mm: MomentMatrix, horizon: float,
                   dt: float) -> MomentTrajectory:
    """Integrate Y' = Y M with implicit Euler (row form, direct solves).

    The diagonal scales like lam^(2 dim), so the system is stiff in exactly
    the sense the diagonal models are; implicit Euler is L-stable and the
    constant matrix lets us factor I - dt M^T once.  Componentwise
    nonnegativity and l1-mass monotonicity are enforced as post-checks.
    """
    y = np.atleast_1d(np.asarray(y0, dtype=float)).copy()
    if y.size != mm.dim:
        raise UsageError(f"y0 has {y.size} entries, matrix dim {mm.dim}")
    if np.any(y < 0):
        raise UsageError("initial moments must be nonnegative")
    if not (dt > 0 and horizon >= dt):
        raise UsageError("need 0 < dt <= horizon")
    steps = max(round(horizon / dt), 1)
    dt = horizon / steps

    lhs = np.eye(mm.dim) - dt * mm.matrix.T
    lu = lu_factor(lhs)
    out = np.empty((steps + 1, mm.dim))
    out[0] = y
    mass_prev = y.sum()
    for k in range(1, steps + 1):
        y = lu_solve(lu, y)
        if np.any(y < -1e-10):
            raise ArithmeticError(
                f"moment solver produced negative component at step {k}")
        mass = y.sum()
        if mass > mass_prev * (1.0 + 1e-12) + 1e-300:
            raise ArithmeticError(
                f"moment solver gained mass at step {k}")
        mass_prev = mass
        out[k] = y
    times = np.linspace(0.0, horizon, steps + 1)
    return MomentTrajectory(times, out)


def compare_mc_moments(sq_means: np.ndarray, sq_stderrs: np.ndarray,
                       oracle: np.ndarray) -> np.ndarray:
    """Z-scores of Monte Carlo squared amplitudes against the moment oracle.

    Inputs are per-shell sample means of X_n^2, their standard errors and
    the oracle values Y_n at one checkpoint.  Exact 0/0 agreements count as
    z = 0.
    """
    sq_means = np.asarray(sq_means, dtype=float)
    sq_stderrs = np.asarray(sq_stderrs, dtype=float)
    oracle = np.asarray(oracle, dtype=float)
    diff = sq_means - oracle
    z = np.zeros_like(diff)
    live = sq_stderrs > 0
    z[live] = diff[live] / sq_stderrs[live]
    dead_mismatch = ~live & (diff != 0)
    z[dead_mismatch] = np.inf * np.sign(diff[dead_mismatch])
    return z
