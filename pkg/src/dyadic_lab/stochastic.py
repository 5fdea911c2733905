"""Time-stepping engines for the stochastic dyadic systems.

Two schemes cover all models:

ito_exponential
    The Ito form is stepped with the diagonal drift integrated exactly via
    its exponential, the cascade term explicit, and the rotation noise
    applied through the component form.  The Stratonovich-Ito corrector is
    never simulated as noise; it enters only through the diagonal.  By
    default the per-shell noise injection carries the exact
    Ornstein-Uhlenbeck variance factor sqrt((1 - e^(2 a dt)) / (2|a| dt)),
    which keeps the stationary variance of heavily damped shells correct at
    any step size ("ou" filter).  The textbook variant that adds the raw
    increments before the exponential is available as noise_filter="plain".

stratonovich_rotation_split
    Exact plane rotations exp(sqrt(2 nu) lam^i theta_j dW A) applied in a
    fixed lexicographic (i, j) sweep.  Each rotation is orthogonal, so the
    l2 norm of the linear model is conserved to rounding; with an
    exponential cascade/viscosity stage prepended it doubles as an
    alternative nonlinear scheme and as the energy-exact reference.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BlowUpError, ConvergenceError, UsageError
from .noise import BrownianDriver, ThetaFamily
from .shells import ShellVector, bilinear_raw, hs_weights, stratonovich_corrector

__all__ = ["SdeConfig", "StochPath", "driver_for", "simulate",
           "simulate_fluctuation", "stochastic_convolution_path",
           "picard_fluctuation", "iter_coupled"]

MODELS = ("nonlinear", "nonlinear_viscous", "linear_girsanov",
          "fluctuation", "convolution_only")
SCHEMES = ("ito_exponential", "stratonovich_rotation_split")
NOISE_FILTERS = ("ou", "plain")

# models whose exact solutions cannot gain l2 mass
_BOUNDED_MODELS = ("nonlinear", "nonlinear_viscous", "linear_girsanov")


def _grid_steps(horizon: float, dt: float) -> int:
    n = round(horizon / dt)
    if n < 1 or abs(n * dt - horizon) > 1e-9 * max(1.0, horizon):
        n = max(math.ceil(horizon / dt), 1)
    return n


def driver_for(dim: int, horizon: float, dt: float, seed: int,
               extra_steps: int = 0) -> BrownianDriver:
    """Driver sized for a `dim`-shell run: indices i, j range over 1..dim-1."""
    steps = _grid_steps(horizon, dt)
    return BrownianDriver(seed, horizon / steps, steps + extra_steps,
                          max(dim - 1, 1), max(dim - 1, 1))


@dataclass(frozen=True)
class SdeConfig:
    """Parameters of one stochastic run.

    `nu` is the noise intensity, `kappa` an optional true viscosity; `theta`
    the coefficient family (for the fluctuation model: the unnormalized
    power-tail weights).  `xtilde_states` attaches a deterministic path
    sampled on the full step grid; the fluctuation and convolution models
    require it.
    """

    dim: int
    lam: float
    nu: float
    theta: ThetaFamily
    x0: np.ndarray
    horizon: float
    dt: float
    driver: BrownianDriver
    model: str = "nonlinear"
    scheme: str = "ito_exponential"
    kappa: float = 0.0
    output_stride: int = 1
    noise_filter: str = "ou"
    record_martingale: bool = False
    xtilde_states: np.ndarray | None = None

    def __post_init__(self):
        if self.dim < 2:
            raise UsageError("stochastic models need at least two shells")
        if not self.lam > 1:
            raise UsageError("shell ratio must satisfy lam > 1")
        if self.nu < 0 or self.kappa < 0:
            raise UsageError("nu and kappa must be nonnegative")
        if self.model not in MODELS:
            raise UsageError(f"unknown model {self.model!r}")
        if self.scheme not in SCHEMES:
            raise UsageError(f"unknown scheme {self.scheme!r}")
        if self.noise_filter not in NOISE_FILTERS:
            raise UsageError(f"unknown noise filter {self.noise_filter!r}")
        if not (self.dt > 0 and self.horizon >= self.dt):
            raise UsageError("need 0 < dt <= horizon")
        if self.output_stride < 1:
            raise UsageError("output stride must be >= 1")
        if self.model in ("nonlinear", "nonlinear_viscous", "linear_girsanov") \
                and abs(self.theta.l2 - 1.0) > 1e-12:
            raise UsageError(f"model {self.model!r} needs ||theta||_l2 = 1")
        if self.scheme == "stratonovich_rotation_split" \
                and self.model in ("fluctuation", "convolution_only"):
            raise UsageError(
                "rotation splitting needs multiplicative rotation noise; "
                f"model {self.model!r} is driven additively")
        if self.record_martingale and self.scheme != "ito_exponential":
            raise UsageError("martingale recording needs the Ito scheme")

        steps = self.steps
        dt_eff = self.horizon / steps
        if abs(self.driver.dt - dt_eff) > 1e-12 * max(1.0, dt_eff):
            raise UsageError(
                f"driver dt {self.driver.dt} does not match grid dt {dt_eff}")
        if self.driver.step_count < steps:
            raise UsageError("driver holds fewer steps than the run needs")
        if self.driver.i_max < self.dim - 1 or self.driver.j_max < self.dim - 1:
            raise UsageError("driver index bounds too small for this truncation")

        x0 = np.zeros(self.dim)
        given = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if given.size > self.dim:
            raise UsageError(f"x0 has {given.size} entries but dim={self.dim}")
        if not np.all(np.isfinite(given)):
            raise UsageError("x0 must be finite")
        x0[:given.size] = given
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)

        if self.model in ("fluctuation", "convolution_only"):
            if self.xtilde_states is None:
                raise UsageError(
                    f"model {self.model!r} needs an attached source path")
            src = np.asarray(self.xtilde_states, dtype=float)
            if src.shape != (steps + 1, self.dim):
                raise UsageError(
                    f"source path shape {src.shape} does not match the "
                    f"step grid ({steps + 1}, {self.dim})")
            src = src.copy()
            src.setflags(write=False)
            object.__setattr__(self, "xtilde_states", src)

    @property
    def steps(self) -> int:
        return _grid_steps(self.horizon, self.dt)

    @property
    def dt_effective(self) -> float:
        return self.horizon / self.steps

    def stability_audit(self) -> dict:
        x0_norm = float(np.sqrt(np.sum(self.x0 ** 2)))
        dt = self.dt_effective
        return {
            "advective_cfl": dt * self.lam ** (self.dim + 1) * x0_norm,
            "noise_cfl": math.sqrt(2.0 * self.nu * dt)
                         * self.lam ** self.dim * self.theta.linf,
            "diagonal_stiffness": (self.nu + self.kappa) * dt
                                  * self.lam ** (2 * self.dim),
        }


@dataclass
class StochPath:
    """One recorded sample path plus reproducibility references."""

    times: np.ndarray
    states: np.ndarray            # (K+1, dim)
    lam: float
    driver: BrownianDriver
    trajectory: int
    diagnostics: dict = field(default_factory=dict)
    martingale: np.ndarray | None = None
    l2_norms: np.ndarray = field(init=False)

    def __post_init__(self):
        self.l2_norms = np.sqrt(np.sum(self.states ** 2, axis=1))

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def state(self, k: int) -> ShellVector:
        return ShellVector(self.states[k], self.lam)

    def write_csv(self, path):
        """Same shape as deterministic trajectories (h_alpha column at a=1)."""
        w = hs_weights(self.lam, self.dim, 1.0)
        h1 = np.sqrt(self.states ** 2 @ w)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time"] +
                            [f"x_{n}" for n in range(1, self.dim + 1)] +
                            ["l2_norm", "h_alpha_norm"])
            for k in range(self.times.size):
                writer.writerow([repr(float(self.times[k]))] +
                                [repr(float(v)) for v in self.states[k]] +
                                [repr(float(self.l2_norms[k])), repr(float(h1[k]))])


class _PairTable:
    """Index machinery for the active rotation pairs (i, j), i + j <= dim.

    Pairs are kept in lexicographic (i, j) order; that fixes the splitting
    order of the rotation scheme and gives contiguous groups for the
    per-source reductions of the Ito diffusion.
    """

    def __init__(self, dim: int, lam: float, theta: ThetaFamily,
                 j_stride: int):
        pairs = [(i, j)
                 for i in range(1, dim)
                 for j in range(1, dim - i + 1)
                 if theta.coefficient(j) > 0.0]
        if not pairs:
            # noise switched off entirely (theta identically zero inside range)
            self.count = 0
            return
        i_arr = np.array([p[0] for p in pairs])
        j_arr = np.array([p[1] for p in pairs])
        self.count = i_arr.size
        self.flat = (i_arr - 1) * j_stride + (j_arr - 1)   # into (i_max*j_max,)
        self.coef = (lam ** i_arr.astype(float)
                     * np.array([theta.coefficient(int(j)) for j in j_arr]))
        self.src = i_arr - 1           # 0-based column of x_i
        self.tgt = i_arr + j_arr - 1   # 0-based column of x_{i+j}

        # production side: group pairs by target shell i+j
        order = np.argsort(self.tgt, kind="stable")
        tgt_sorted = self.tgt[order]
        starts = np.flatnonzero(np.concatenate(
            ([True], tgt_sorted[1:] != tgt_sorted[:-1])))
        self.prod_perm = order
        self.prod_starts = starts
        self.prod_cols = tgt_sorted[starts]
        # damping side: lexicographic order is already grouped by i
        starts2 = np.flatnonzero(np.concatenate(
            ([True], self.src[1:] != self.src[:-1])))
        self.damp_starts = starts2
        self.damp_cols = self.src[starts2]

    def diffusion(self, x: np.ndarray, dwflat: np.ndarray,
                  out_dim: int) -> np.ndarray:
        """Rotation-noise increment sum_{i,j} lam^i theta_j dW_ij (A_ij x).

        `x` is (M, dim) or (1, dim); `dwflat` is (M, i_max*j_max).  The
        sqrt(2 nu) factor is applied by the caller.
        """
        m = dwflat.shape[0]
        out = np.zeros((m, out_dim))
        if self.count == 0:
            return out
        c = self.coef * dwflat[:, self.flat]                     # (M, P)
        prod = np.add.reduceat(
            (c * x[:, self.src])[:, self.prod_perm], self.prod_starts, axis=1)
        damp = np.add.reduceat(c * x[:, self.tgt], self.damp_starts, axis=1)
        out[:, self.prod_cols] += prod
        out[:, self.damp_cols] -= damp
        return out

    def rotate(self, x: np.ndarray, dwflat: np.ndarray, sqrt2nu: float):
        """Apply the exact plane rotations in place, lexicographic order."""
        for k in range(self.count):
            phi = (sqrt2nu * self.coef[k]) * dwflat[:, self.flat[k]]
            ca = np.cos(phi)
            sa = np.sin(phi)
            p = self.src[k]
            q = self.tgt[k]
            a_old = x[:, p].copy()
            x[:, p] = ca * a_old - sa * x[:, q]
            x[:, q] = sa * a_old + ca * x[:, q]


class _Engine:
    """Precomputed stepping machinery for one configuration."""

    def __init__(self, cfg: SdeConfig):
        self.cfg = cfg
        dim = cfg.dim
        dt = cfg.dt_effective
        self.dt = dt
        self.sqrt2nu = math.sqrt(2.0 * cfg.nu)
        self.lam_pows = np.power(cfg.lam, np.arange(1, dim + 1, dtype=float))
        self.pairs = _PairTable(dim, cfg.lam, cfg.theta, cfg.driver.j_max)
        self.has_cascade = cfg.model in ("nonlinear", "nonlinear_viscous")
        self.source = cfg.xtilde_states

        diag_s = -np.power(cfg.lam, 2.0 * np.arange(1, dim + 1, dtype=float))
        if cfg.model in ("nonlinear", "nonlinear_viscous", "linear_girsanov"):
            corrector = stratonovich_corrector(cfg.theta, cfg.lam, dim).entries
            drift_diag = cfg.nu * corrector + cfg.kappa * diag_s
        else:
            drift_diag = cfg.nu * diag_s
        self.drift_diag = drift_diag

        if cfg.scheme == "stratonovich_rotation_split":
            # only the true viscosity is integrated on the diagonal; the
            # corrector is realized by the rotations themselves
            self.decay = np.exp(cfg.kappa * dt * diag_s)
            self.use_decay = cfg.kappa > 0
        else:
            self.decay = np.exp(dt * drift_diag)
            u = -2.0 * dt * drift_diag          # >= 0
            gains = np.ones(dim)
            pos = u > 0
            gains[pos] = np.sqrt(-np.expm1(-u[pos]) / u[pos])
            self.gains = gains if cfg.noise_filter == "ou" else None
            if cfg.model == "convolution_only":
                self.gains = None               # pinned exact recursion

        self.martingale_acc: np.ndarray | None = None
        if cfg.record_martingale:
            self.martingale_acc = np.zeros(0)   # sized on first use

    def init_states(self, m: int) -> np.ndarray:
        if self.martingale_acc is not None:
            self.martingale_acc = np.zeros((m, self.cfg.dim))
        return np.tile(self.cfg.x0, (m, 1))

    def _noise_source(self, x: np.ndarray, k: int) -> np.ndarray:
        if self.cfg.model in ("fluctuation", "convolution_only"):
            return self.source[k][None, :]
        return x

    def step(self, x: np.ndarray, dwflat: np.ndarray, k: int) -> np.ndarray:
        cfg = self.cfg
        dt = self.dt
        if cfg.scheme == "stratonovich_rotation_split":
            if self.has_cascade:
                x = x + dt * bilinear_raw(x, x, self.lam_pows)
            if self.use_decay:
                x = x * self.decay
            elif not self.has_cascade:
                x = np.array(x)       # rotations mutate in place
            self.pairs.rotate(x, dwflat, self.sqrt2nu)
            return x

        diff = self.sqrt2nu * self.pairs.diffusion(
            self._noise_source(x, k), dwflat, cfg.dim)
        if self.martingale_acc is not None:
            self.martingale_acc += diff
        drift = x
        if self.has_cascade:
            drift = x + dt * bilinear_raw(x, x, self.lam_pows)
        elif cfg.model == "fluctuation":
            xt = self.source[k][None, :]
            drift = x + dt * (bilinear_raw(x, xt, self.lam_pows)
                              + bilinear_raw(xt, x, self.lam_pows))
        if self.gains is None:
            return self.decay * (drift + diff)
        return self.decay * drift + self.gains * diff


class CoupledRun:
    """Several configurations stepped in lockstep on shared increments.

    All configurations must share the driver and grid.  Iterating yields
    (record_index, step, time, states_list) where states_list[c] is the live
    (M, dim) state matrix of configuration c; consumers must copy anything
    they keep.  Record 0 is the initial condition.  The engines (and their
    martingale accumulators) stay accessible on `self.engines`.
    """

    def __init__(self, cfgs: list[SdeConfig], trajectories):
        if not cfgs:
            raise UsageError("need at least one configuration")
        base = cfgs[0]
        for c in cfgs[1:]:
            if c.driver is not base.driver and c.driver != base.driver:
                raise UsageError("coupled runs must share one driver")
            if c.steps != base.steps or c.output_stride != base.output_stride:
                raise UsageError("coupled runs must share the time grid")
        self.cfgs = list(cfgs)
        self.trajs = np.atleast_1d(np.asarray(trajectories, dtype=np.int64))
        self.engines = [_Engine(c) for c in cfgs]

    def __iter__(self):
        base = self.cfgs[0]
        trajs = self.trajs
        m = trajs.size
        states = [eng.init_states(m) for eng in self.engines]
        steps = base.steps
        dt = base.dt_effective
        stride = base.output_stride
        guard_sq = [None if c.model not in _BOUNDED_MODELS
                    else 4.0 * float(np.sum(c.x0 ** 2)) for c in self.cfgs]

        yield 0, 0, 0.0, states
        cursor = 1
        block_shape = (m, base.driver.block_size)
        for k in range(steps):
            dwflat = base.driver.increment_blocks(trajs, k).reshape(block_shape)
            for idx, eng in enumerate(self.engines):
                x = eng.step(states[idx], dwflat, k)
                if not np.isfinite(np.sum(x)):
                    bad = np.argwhere(~np.isfinite(x))
                    path, shell = ((int(bad[0][0]), int(bad[0][1]) + 1)
                                   if bad.size else (0, None))
                    raise BlowUpError(
                        (k + 1) * dt, k + 1, shell,
                        f"non-finite state in trajectory {int(trajs[path])} "
                        f"at step {k + 1}")
                states[idx] = x
            if (k + 1) % stride == 0 or k + 1 == steps:
                for idx, g in enumerate(guard_sq):
                    if g is None or g == 0.0:
                        continue
                    energy = np.sum(states[idx] ** 2, axis=1)
                    worst = int(np.argmax(energy))
                    if energy[worst] > g:
                        raise BlowUpError(
                            (k + 1) * dt, k + 1, None,
                            f"l2 norm of trajectory {int(trajs[worst])} "
                            f"exceeded twice its initial value at "
                            f"t={(k + 1) * dt:.6g} (scheme failure; theory "
                            "forbids any increase)")
                yield cursor, k + 1, (k + 1) * dt, states
                cursor += 1


def iter_coupled(cfgs: list[SdeConfig], trajectories):
    """Generator form of CoupledRun for callers without engine access needs."""
    return iter(CoupledRun(cfgs, trajectories))


def _bound_margin_tolerance(cfg: SdeConfig) -> float:
    """Heuristic per-path allowance for discrete-in-time energy overshoot."""
    x0_norm = float(np.sqrt(np.sum(cfg.x0 ** 2)))
    return x0_norm * max(20.0 * math.sqrt(cfg.dt_effective), 1e-8)


def simulate(cfg: SdeConfig, trajectory: int) -> StochPath:
    """Integrate one sample path on the recorded grid."""
    run = CoupledRun([cfg], [trajectory])
    eng = run.engines[0]
    records, times, mart = [], [], [] if cfg.record_martingale else None
    for _, step, t, states in run:
        records.append(states[0][0].copy())
        times.append(t)
        if mart is not None:
            mart.append(np.zeros(cfg.dim) if step == 0
                        else eng.martingale_acc[0].copy())

    states = np.vstack(records)
    path = StochPath(np.array(times), states, cfg.lam, cfg.driver, trajectory,
                     martingale=np.vstack(mart) if mart is not None else None)
    if cfg.model in _BOUNDED_MODELS:
        x0_norm = float(np.sqrt(np.sum(cfg.x0 ** 2)))
        margin = float(np.max(path.l2_norms - x0_norm))
        path.diagnostics["l2_bound_margin"] = margin
        path.diagnostics["l2_bound_warning"] = \
            bool(margin > _bound_margin_tolerance(cfg))
    return path


def simulate_fluctuation(cfg: SdeConfig, trajectory: int) -> StochPath:
    """Sample the additive-noise fluctuation equation around the attached path."""
    if cfg.model != "fluctuation":
        raise UsageError("configuration is not a fluctuation model")
    return simulate(cfg, trajectory)


def stochastic_convolution_path(cfg: SdeConfig, source, trajectory: int
                                ) -> StochPath:
    """Convolution of the semigroup with rotation noise driven by `source`.

    Z_0 = 0 and Z_{t+dt} = e^(nu dt S) (Z_t + increments(source_t)); the
    discrete mild solution of dZ = nu S Z dt + noise(source) dW.
    """
    src = np.asarray(getattr(source, "states", source), dtype=float)
    conv = replace(cfg, model="convolution_only",
                   scheme="ito_exponential", x0=np.zeros(cfg.dim),
                   xtilde_states=src, record_martingale=False)
    return simulate(conv, trajectory)


def _hminus_norms(states: np.ndarray, lam: float, s: float) -> np.ndarray:
    w = hs_weights(lam, states.shape[-1], s)
    return np.sqrt(states ** 2 @ w)


def picard_fluctuation(m_states, xtilde_states, nu: float, lam: float,
                       dt: float, beta: float = 0.9, tolerance: float = 1e-10,
                       max_iterations: int = 80) -> np.ndarray:
    """Fixed point of the mild fluctuation equation by Picard iteration.

    `m_states` is the driving stochastic convolution on the step grid,
    `xtilde_states` the deterministic background on the same grid.  The
    contraction estimate (2/sqrt(e)) (1 + lam^beta) ||x|| sqrt(T/nu) decides
    how many time windows the horizon is split into; iteration inside each
    window stops when successive iterates are `tolerance`-close in the
    sup-in-time H^(-beta) distance.
    """
    m_arr = np.asarray(getattr(m_states, "states", m_states), dtype=float)
    xt = np.asarray(getattr(xtilde_states, "states", xtilde_states), dtype=float)
    if m_arr.shape != xt.shape:
        raise UsageError("driving and background paths must share the grid")
    k_max, dim = m_arr.shape
    steps = k_max - 1
    if steps < 1:
        raise UsageError("need at least one step")
    horizon = steps * dt
    x_norm = float(np.sqrt(np.sum(xt[0] ** 2)))

    contraction = (2.0 / math.sqrt(math.e)) * (1.0 + lam ** beta) \
        * max(x_norm, 1e-300) * math.sqrt(horizon / nu)
    n_windows = max(1, math.ceil((contraction / 0.8) ** 2))
    n_windows = min(n_windows, steps)
    bounds = np.unique(np.linspace(0, steps, n_windows + 1).astype(int))

    lam_pows = np.power(lam, np.arange(1, dim + 1, dtype=float))
    decay = np.exp(-nu * dt * np.power(lam, 2.0 * np.arange(1, dim + 1)))
    w = hs_weights(lam, dim, -beta)

    phi = np.zeros_like(m_arr)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        span = slice(lo, hi + 1)
        seg = phi[span].copy()
        seg[0] = phi[lo]
        m_seg = m_arr[span]
        xt_seg = xt[span]
        base = seg[0] - m_seg[0]
        for it in range(max_iterations):
            new = np.empty_like(seg)
            acc = base.copy()
            new[0] = seg[0]
            for k in range(hi - lo):
                g = (bilinear_raw(seg[k], xt_seg[k], lam_pows)
                     + bilinear_raw(xt_seg[k], seg[k], lam_pows))
                acc = decay * (acc + dt * g)
                new[k + 1] = acc + m_seg[k + 1]
            dist = float(np.max(np.sqrt((new - seg) ** 2 @ w)))
            seg = new
            if dist < tolerance:
                break
        else:
            raise ConvergenceError(dist, max_iterations)
        phi[span] = seg
    return phi
