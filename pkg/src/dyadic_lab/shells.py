"""Core algebra of the dyadic phase space.

Finite truncations of shell-amplitude sequences live here, together with the
weighted norms, the quadratic cascade coupling, the plane-rotation generators
that the energy-preserving noise is built from, the diagonal dissipation /
Ito-corrector operators, and the exact diagonal semigroup.

Shells are indexed 1..D throughout the public API, matching the usual
convention for shell models; amplitudes beyond the truncation are treated as
zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NormOverflowError, UsageError

__all__ = [
    "ShellVector",
    "DiagonalOperator",
    "hs_norm",
    "hs_weights",
    "bilinear",
    "bilinear_raw",
    "apply_rotation_generator",
    "dissipation_operator",
    "stratonovich_corrector",
    "neighbor_corrector",
    "semigroup_apply",
    "truncation_tail_bound",
]

# Sobolev smoothness index: a bare real number, no sign restriction.
SobolevIndex = float


def _as_coefficients(theta) -> np.ndarray:
    """Accept a ThetaFamily-like object or a plain coefficient sequence."""
    coeffs = getattr(theta, "coefficients", theta)
    arr = np.asarray(coeffs, dtype=float)
    if arr.ndim != 1:
        raise UsageError("coefficient sequence must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise UsageError("coefficient sequence must be finite")
    if np.any(arr < 0):
        raise UsageError("coefficients must be nonnegative")
    return arr


@dataclass(frozen=True)
class ShellVector:
    """Finite truncation of a shell-amplitude sequence.

    values : amplitudes x_1..x_D
    lam    : shell ratio between consecutive wavenumbers, > 1
    """

    values: np.ndarray
    lam: float

    def __post_init__(self):
        arr = np.atleast_1d(np.asarray(self.values, dtype=float))
        if arr.ndim != 1 or arr.size < 1:
            raise UsageError("shell vector needs at least one amplitude")
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0]) + 1
            raise UsageError(f"non-finite amplitude at shell {bad}")
        if not (np.isfinite(self.lam) and self.lam > 1.0):
            raise UsageError("shell ratio must satisfy lam > 1")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return self.values.size

    @classmethod
    def zeros(cls, dim: int, lam: float) -> "ShellVector":
        return cls(np.zeros(dim), lam)

    @classmethod
    def basis(cls, shell: int, dim: int, lam: float,
              amplitude: float = 1.0) -> "ShellVector":
        """Unit vector (times `amplitude`) on a single 1-based shell."""
        if not 1 <= shell <= dim:
            raise UsageError(f"shell {shell} outside 1..{dim}")
        v = np.zeros(dim)
        v[shell - 1] = amplitude
        return cls(v, lam)

    def l2_norm(self) -> float:
        return hs_norm(self, 0.0)

    def _require_compatible(self, other: "ShellVector"):
        if self.dim != other.dim or self.lam != other.lam:
            raise UsageError(
                f"incompatible shell vectors: (D={self.dim}, lam={self.lam}) "
                f"vs (D={other.dim}, lam={other.lam})")


def hs_weights(lam: float, dim: int, s: SobolevIndex) -> np.ndarray:
    """Weights lam^(2 n s) for n = 1..dim."""
    n = np.arange(1, dim + 1, dtype=float)
    return np.power(lam, 2.0 * s * n)


def hs_norm(x: ShellVector, s: SobolevIndex) -> float:
    """Weighted norm (sum_n lam^(2ns) x_n^2)^(1/2) over the truncation.

    Terms are accumulated exactly (math.fsum), walking from the largest shell
    downward so the lam^(2ns) dynamic range cannot swamp low-shell content.
    """
    if not np.isfinite(s):
        raise UsageError("smoothness index must be finite")
    w = hs_weights(x.lam, x.dim, s)
    terms = w * x.values * x.values
    bad = np.flatnonzero(~np.isfinite(terms))
    if bad.size:
        raise NormOverflowError(int(bad[0]) + 1)
    total = math.fsum(terms[::-1])
    return math.sqrt(total)


def truncation_tail_bound(x: ShellVector, s: SobolevIndex) -> float:
    """A-priori bound on the squared norm tail omitted by the truncation.

    For s < 0 the discarded shells contribute at most lam^(2 s D) ||x||_l2^2
    when the full sequence carries no more mass than the truncation.
    Diagnostic only.
    """
    return float(x.lam ** (2.0 * s * x.dim) * hs_norm(x, 0.0) ** 2)


def bilinear(x: ShellVector, y: ShellVector) -> ShellVector:
    """Quadratic cascade coupling.

    Component n of the result is lam^(n-1) x_{n-1} y_{n-1} - lam^n x_n y_{n+1}
    with x_0 = 0 and y_{D+1} = 0.
    """
    x._require_compatible(y)
    lam_pows = np.power(x.lam, np.arange(1, x.dim + 1, dtype=float))
    return ShellVector(bilinear_raw(x.values, y.values, lam_pows), x.lam)


def bilinear_raw(x: np.ndarray, y: np.ndarray,
                 lam_pows: np.ndarray) -> np.ndarray:
    """Cascade coupling on raw arrays; batched over leading axes.

    `lam_pows[n-1]` must hold lam^n for n = 1..D.  The last axis is the shell
    axis.
    """
    out = np.empty_like(x)
    # production: lam^(n-1) x_{n-1} y_{n-1} lands on shell n >= 2
    out[..., 0] = 0.0
    out[..., 1:] = lam_pows[:-1] * x[..., :-1] * y[..., :-1]
    # drain: lam^n x_n y_{n+1} leaves shell n <= D-1
    out[..., :-1] -= lam_pows[:-1] * x[..., :-1] * y[..., 1:]
    return out


def apply_rotation_generator(i: int, j: int, x: ShellVector) -> ShellVector:
    """Apply the skew generator coupling shells i and i+j (1-based).

    The result has component i equal to -x_{i+j}, component i+j equal to x_i,
    and zeros elsewhere.
    """
    if j < 1:
        raise UsageError("rotation offset j must be >= 1")
    if i < 1 or i + j > x.dim:
        raise IndexError(
            f"rotation pair ({i}, {i + j}) outside truncation 1..{x.dim}")
    out = np.zeros(x.dim)
    out[i - 1] = -x.values[i + j - 1]
    out[i + j - 1] = x.values[i - 1]
    return ShellVector(out, x.lam)


@dataclass(frozen=True)
class DiagonalOperator:
    """Diagonal operator acting shellwise; entries carry units of 1/time.

    kind is one of:
      "dissipation"            -lam^(2n)
      "fractional_dissipation" -lam^(2 a n) for a dissipation degree a
      "ito_corrector"          closed-form Stratonovich-Ito corrector
      "ito_corrector_galerkin" corrector of the level-N truncated noise
      "neighbor_corrector"     corrector of nearest-neighbour noise
    """

    entries: np.ndarray
    kind: str
    alpha: float | None = None
    galerkin_level: int | None = None

    _STRICT_KINDS = ("dissipation", "fractional_dissipation", "ito_corrector")

    def __post_init__(self):
        arr = np.atleast_1d(np.asarray(self.entries, dtype=float))
        if not np.all(np.isfinite(arr)):
            raise UsageError("diagonal entries must be finite")
        if self.kind in self._STRICT_KINDS and not np.all(arr < 0):
            raise UsageError(f"{self.kind} entries must be strictly negative")
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def dim(self) -> int:
        return self.entries.size


def dissipation_operator(alpha: float, lam: float, dim: int) -> DiagonalOperator:
    """Diagonal -lam^(2 alpha n); alpha = 1 is the plain viscous diagonal."""
    if not (np.isfinite(alpha) and alpha > 0):
        raise UsageError("dissipation degree alpha must be > 0")
    if not lam > 1:
        raise UsageError("shell ratio must satisfy lam > 1")
    n = np.arange(1, dim + 1, dtype=float)
    entries = -np.power(lam, 2.0 * alpha * n)
    kind = "dissipation" if alpha == 1.0 else "fractional_dissipation"
    return DiagonalOperator(entries, kind, alpha=alpha)


def stratonovich_corrector(theta, lam: float, dim: int,
                           galerkin_level: int | None = None
                           ) -> DiagonalOperator:
    """Diagonal drift appearing when the rotation noise is written in Ito form.

    Without `galerkin_level` the closed form for a unit-l2 coefficient family
    is used:

        d_n = -( lam^(2n) + sum_{j=1}^{n-1} theta_j^2 lam^(2(n-j)) ).

    With `galerkin_level = N` the corrector of the level-N truncated noise is
    built instead:

        d_n = -( sum_{j=1}^{n-1} lam^(2j) theta_{n-j}^2
                 + lam^(2n) sum_{j=1}^{N-n} theta_j^2 )      for n <= N,
        d_n = 0                                              for n > N.
    """
    coeffs = _as_coefficients(theta)
    if not lam > 1:
        raise UsageError("shell ratio must satisfy lam > 1")
    th_sq = np.zeros(max(dim, 1))
    take = min(coeffs.size, th_sq.size)
    th_sq[:take] = coeffs[:take] ** 2

    lam2j = np.power(lam, 2.0 * np.arange(1, dim + 1, dtype=float))
    entries = np.zeros(dim)
    if galerkin_level is None:
        l2sq = math.fsum(float(c) * float(c) for c in coeffs)
        if abs(l2sq - 1.0) > 1e-12:
            raise UsageError(
                "closed-form corrector needs unit-l2 coefficients "
                f"(got ||theta||_l2^2 = {l2sq:.12g}); "
                "pass galerkin_level for unnormalized families")
        for n in range(1, dim + 1):
            # sum_{j<n} theta_j^2 lam^(2(n-j)) accumulated exactly
            cross = math.fsum(th_sq[j - 1] * lam ** (2.0 * (n - j))
                              for j in range(1, n))
            entries[n - 1] = -(lam ** (2.0 * n) + cross)
    else:
        level = int(galerkin_level)
        if level < 1:
            raise UsageError("galerkin_level must be >= 1")
        for n in range(1, min(level, dim) + 1):
            cross = math.fsum(lam ** (2.0 * j) * th_sq[n - j - 1]
                              for j in range(1, n))
            tail = math.fsum(th_sq[j - 1] for j in range(1, level - n + 1))
            entries[n - 1] = -(cross + lam ** (2.0 * n) * tail)
    kind = "ito_corrector" if galerkin_level is None else "ito_corrector_galerkin"
    return DiagonalOperator(entries, kind, galerkin_level=galerkin_level)


def neighbor_corrector(theta, lam: float, dim: int) -> DiagonalOperator:
    """Corrector of nearest-neighbour rotation noise with weights theta_i.

    d_1 = -theta_1^2 lam^2,
    d_n = -( theta_{n-1}^2 lam^(2(n-1)) + theta_n^2 lam^(2n) ), n >= 2;
    shellwise it is O(max_i theta_i^2), which is why this noise leaves no
    dissipation behind in the wide-spectrum limit.
    """
    coeffs = _as_coefficients(theta)
    th_sq = np.zeros(dim + 1)
    take = min(coeffs.size, dim)
    th_sq[:take] = coeffs[:take] ** 2
    lam2n = np.power(lam, 2.0 * np.arange(0, dim + 1, dtype=float))
    entries = np.zeros(dim)
    entries[0] = -th_sq[0] * lam2n[1]
    for n in range(2, dim + 1):
        entries[n - 1] = -(th_sq[n - 2] * lam2n[n - 1] + th_sq[n - 1] * lam2n[n])
    return DiagonalOperator(entries, "neighbor_corrector")


def semigroup_apply(t: float, nu: float, op: DiagonalOperator,
                    x: ShellVector) -> ShellVector:
    """Multiply component n by exp(nu * t * d_n); exact, no time stepping."""
    if t < 0:
        raise UsageError("semigroup time must be nonnegative")
    if nu < 0:
        raise UsageError("intensity must be nonnegative")
    if op.dim != x.dim:
        raise UsageError(
            f"operator dimension {op.dim} does not match vector {x.dim}")
    if np.any(op.entries > 0):
        raise UsageError("semigroup only supports nonpositive diagonals")
    return ShellVector(np.exp(nu * t * op.entries) * x.values, x.lam)
