"""Orchestrated Monte Carlo studies of the dyadic models.

Every experiment is a pure function of its configuration (which includes the
master seed): trajectories are indexed globally, each index owns a
counter-based noise stream, and reductions act on index-ordered per-path
arrays, so the worker count never changes a single output bit.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .artifacts import (config_hash, write_dat, write_results_csv,
                        write_summary_json)
from .deterministic import DetConfig, solve_deterministic
from .errors import BlowUpError, UsageError
from .girsanov import (density_path, log_weight_terms, novikov_bound,
                       reweighted_expectation)
from .moments import build_moment_matrix, compare_mc_moments, evolve_moments
from .noise import theta_power_law, theta_power_tail, theta_uniform
from .shells import hs_weights, neighbor_corrector, stratonovich_corrector
from .stochastic import CoupledRun, SdeConfig, driver_for

__all__ = [
    "EnsembleSummary", "RateFit", "fit_loglog_slope", "summarize",
    "ScalingLimitConfig", "run_scaling_limit",
    "CltConfig", "run_clt",
    "DissipationConfig", "run_dissipation", "dissipation_bracket",
    "MartingaleConfig", "run_martingale_vanishing",
    "CorrectorDecayConfig", "run_corrector_decay",
    "GirsanovCheckConfig", "run_girsanov_check",
    "MomentCheckConfig", "run_moment_check",
]


# ---------------------------------------------------------------------------
# statistics helpers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnsembleSummary:
    """Monte Carlo summary of one scalar per path."""

    mean: float
    variance: float
    ci_halfwidth: float
    samples: int

    @classmethod
    def from_values(cls, values) -> "EnsembleSummary":
        v = np.asarray(values, dtype=float)
        m = v.size
        mean = float(np.mean(v))
        var = float(np.var(v, ddof=1)) if m > 1 else 0.0
        return cls(mean, var, 1.96 * math.sqrt(var / m) if m > 1 else 0.0, m)


def summarize(values) -> EnsembleSummary:
    return EnsembleSummary.from_values(values)


@dataclass(frozen=True)
class RateFit:
    """Least-squares line through (log x, log y)."""

    xs: tuple
    ys: tuple
    slope: float
    intercept: float
    residual_norm: float


def fit_loglog_slope(xs, ys) -> RateFit:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size != ys.size or xs.size < 3:
        raise UsageError("log-log fit needs at least three points")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise UsageError("log-log fit needs positive coordinates")
    lx, ly = np.log(xs), np.log(ys)
    a = np.vstack([lx, np.ones_like(lx)]).T
    coef, *_ = np.linalg.lstsq(a, ly, rcond=None)
    resid = ly - a @ coef
    return RateFit(tuple(xs), tuple(ys), float(coef[0]), float(coef[1]),
                   float(np.sqrt(np.sum(resid ** 2))))


def _record_steps(steps: int, stride: int) -> np.ndarray:
    recs = list(range(0, steps + 1, stride))
    if recs[-1] != steps:
        recs.append(steps)
    return np.asarray(recs)


def _map_paths(fn, payload, samples: int, workers: int) -> dict:
    """Run `fn(payload, lo, hi)` over contiguous path ranges and concatenate.

    Each chunk returns a dict of arrays with leading path axis; merging
    concatenates in index order, so results do not depend on `workers`.
    """
    workers = max(1, int(workers))
    if workers == 1 or samples <= 1:
        return fn(payload, 0, samples)
    n_chunks = min(workers, samples)
    bounds = np.linspace(0, samples, n_chunks + 1).astype(int)
    with ProcessPoolExecutor(max_workers=n_chunks) as pool:
        futures = [pool.submit(fn, payload, int(lo), int(hi))
                   for lo, hi in zip(bounds[:-1], bounds[1:])]
        parts = [f.result() for f in futures]
    return {key: np.concatenate([p[key] for p in parts], axis=0)
            for key in parts[0]}


def _solve_background(dim, lam, nu, x0, horizon, dt) -> np.ndarray:
    """Deterministic path on the full step grid with the coupling scheme.

    Coupled stochastic runs integrate the cascade term with the same
    first-order rule, so systematic time-stepping error cancels in
    differences against this path.
    """
    cfg = DetConfig(dim=dim, lam=lam, nu=nu, alpha=1.0, x0=x0,
                    horizon=horizon, dt=dt, output_stride=1,
                    scheme="exp_euler")
    return solve_deterministic(cfg).states


# ---------------------------------------------------------------------------
# scaling limit (stochastic model -> deterministic viscous model)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalingLimitConfig:
    family_sizes: tuple = (4, 8, 16, 32, 64)
    alpha: float = 0.9
    delta: float = 0.75
    nu: float = 1.0
    lam: float = 2.0
    dim: int = 16
    x0: tuple = (0.5,)
    horizon: float = 1.0
    dt: float = 1e-3
    samples: int = 200
    seed: int = 2024
    output_stride: int = 10
    workers: int = 1

    def __post_init__(self):
        if len(self.family_sizes) < 1:
            raise UsageError("need at least one theta family")
        if not 0.5 < self.delta < 1.0:
            raise UsageError("delta must lie in (1/2, 1)")
        if not 2.0 - 2.0 * self.delta < self.alpha < 1.0:
            raise UsageError("alpha must lie in (2 - 2 delta, 1)")
        if self.samples < 2:
            raise UsageError("need at least two sample paths")


def _scaling_chunk(payload, lo, hi):
    sde_cfg, xt_records, weights = payload
    run = CoupledRun([sde_cfg], np.arange(lo, hi))
    running_max = np.zeros(hi - lo)
    for rec, step, t, states in run:
        diff = states[0] - xt_records[rec][None, :]
        norms_sq = diff ** 2 @ weights
        np.maximum(running_max, norms_sq, out=running_max)
    return {"max_diff_sq": running_max}


def run_scaling_limit(cfg: ScalingLimitConfig) -> dict:
    """Distance of the stochastic model to its deterministic limit, per family.

    For each uniform family the Monte Carlo estimate of
    E max_t ||X - Xtilde||^2_{H^(-alpha)} is tabulated against the family's
    sup-norm; the log-log slope (expected near 2) is fitted when at least
    three families survive.
    """
    dt = cfg.dt
    steps_probe = driver_for(cfg.dim, cfg.horizon, dt, cfg.seed)
    xtilde = _solve_background(cfg.dim, cfg.lam, cfg.nu, np.asarray(cfg.x0),
                               cfg.horizon, dt)
    recs = _record_steps(steps_probe.step_count, cfg.output_stride)
    xt_records = xtilde[recs]
    weights = hs_weights(cfg.lam, cfg.dim, -cfg.alpha)

    rows = []
    for n in cfg.family_sizes:
        theta = theta_uniform(n)
        driver = driver_for(cfg.dim, cfg.horizon, dt, cfg.seed)
        sde_cfg = SdeConfig(dim=cfg.dim, lam=cfg.lam, nu=cfg.nu, theta=theta,
                            x0=np.asarray(cfg.x0), horizon=cfg.horizon, dt=dt,
                            driver=driver, model="nonlinear",
                            scheme="ito_exponential",
                            output_stride=cfg.output_stride)
        try:
            out = _map_paths(_scaling_chunk, (sde_cfg, xt_records, weights),
                             cfg.samples, cfg.workers)
        except BlowUpError as exc:
            rows.append({"family_n": n, "theta_linf": theta.linf,
                         "estimate": None, "variance": None,
                         "ci_halfwidth": None, "samples": 0,
                         "error": str(exc)})
            continue
        summ = summarize(out["max_diff_sq"])
        rows.append({"family_n": n, "theta_linf": theta.linf,
                     "estimate": summ.mean, "variance": summ.variance,
                     "ci_halfwidth": summ.ci_halfwidth,
                     "samples": summ.samples, "error": ""})

    good = [r for r in rows if r["estimate"] is not None]
    fit = None
    fit_error = ""
    if len(good) >= 3:
        fit = fit_loglog_slope([r["theta_linf"] for r in good],
                               [r["estimate"] for r in good])
    else:
        fit_error = "need at least 3 valid families for a slope fit"
    return {"rows": rows, "fit": fit, "fit_error": fit_error,
            "config": asdict(cfg), "config_hash": config_hash(asdict(cfg))}


# ---------------------------------------------------------------------------
# central limit fluctuations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CltConfig:
    family_sizes: tuple = (4, 16, 64)
    alpha1: float = 0.25
    beta: float = 0.9
    nu: float = 1.0
    lam: float = 2.0
    dim: int = 16
    x0: tuple = (0.5,)
    horizon: float = 1.0
    dt: float = 1e-3
    samples: int = 200
    seed: int = 2024
    output_stride: int = 10
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.alpha1 < 0.5:
            raise UsageError("alpha1 must lie in (0, 1/2)")
        if not 0.0 < self.beta < 1.0:
            raise UsageError("beta must lie in (0, 1)")
        if self.samples < 8:
            raise UsageError("need at least eight sample paths")


def _clt_chunk(payload, lo, hi):
    xn_cfg, xi_cfg, xt_records, weights, eps_n = payload
    trajs = np.arange(lo, hi)
    run = CoupledRun([xn_cfg, xi_cfg], trajs)
    n_rec = xt_records.shape[0]
    sq_err = np.zeros((hi - lo, n_rec))
    sqrt_eps = math.sqrt(eps_n)
    xi_final_1 = np.zeros(hi - lo)
    xi_final_2 = np.zeros(hi - lo)
    for rec, step, t, states in run:
        xi_n = (states[0] - xt_records[rec][None, :]) / sqrt_eps
        diff = xi_n - states[1]
        sq_err[:, rec] = diff ** 2 @ weights
        if rec == n_rec - 1:
            xi_final_1 = states[1][:, 0].copy()
            xi_final_2 = states[1][:, 1].copy()
    return {"sq_err": sq_err, "xi_1": xi_final_1, "xi_2": xi_final_2}


def _moment_stats(samples: np.ndarray) -> dict:
    """Skewness and excess kurtosis with their normal-theory standard errors."""
    m = samples.size
    centered = samples - samples.mean()
    s2 = np.mean(centered ** 2)
    skew = float(np.mean(centered ** 3) / s2 ** 1.5)
    kurt = float(np.mean(centered ** 4) / s2 ** 2 - 3.0)
    return {"skewness": skew, "skewness_se": math.sqrt(6.0 / m),
            "excess_kurtosis": kurt, "kurtosis_se": math.sqrt(24.0 / m)}


def run_clt(cfg: CltConfig) -> dict:
    """Fluctuation-field convergence and Gaussianity of the limit.

    For each family size the rescaled deviation (X^N - Xtilde)/sqrt(eps_N)
    is coupled to the limit fluctuation equation on the same increments, and
    sup over the record grid of E || . ||^2_{H^(-beta)} is tabulated; the
    limit field's first two shell components are tested for Gaussian shape.
    """
    dt = cfg.dt
    xtilde = _solve_background(cfg.dim, cfg.lam, cfg.nu, np.asarray(cfg.x0),
                               cfg.horizon, dt)
    tail = theta_power_tail(cfg.alpha1, cfg.dim - 1)
    weights = hs_weights(cfg.lam, cfg.dim, -cfg.beta)

    rows = []
    gauss = None
    for n in cfg.family_sizes:
        theta_n = theta_power_law(n, cfg.alpha1)
        driver = driver_for(cfg.dim, cfg.horizon, dt, cfg.seed)
        steps = driver.step_count
        recs = _record_steps(steps, cfg.output_stride)
        xn_cfg = SdeConfig(dim=cfg.dim, lam=cfg.lam, nu=cfg.nu, theta=theta_n,
                           x0=np.asarray(cfg.x0), horizon=cfg.horizon, dt=dt,
                           driver=driver, model="nonlinear",
                           scheme="ito_exponential",
                           output_stride=cfg.output_stride)
        xi_cfg = SdeConfig(dim=cfg.dim, lam=cfg.lam, nu=cfg.nu, theta=tail,
                           x0=np.zeros(cfg.dim), horizon=cfg.horizon, dt=dt,
                           driver=driver, model="fluctuation",
                           scheme="ito_exponential",
                           output_stride=cfg.output_stride,
                           xtilde_states=xtilde)
        payload = (xn_cfg, xi_cfg, xtilde[recs], weights, theta_n.eps_n)
        out = _map_paths(_clt_chunk, payload, cfg.samples, cfg.workers)
        mean_curve = out["sq_err"].mean(axis=0)
        sup_idx = int(np.argmax(mean_curve))
        sup_summary = summarize(out["sq_err"][:, sup_idx])
        rows.append({"family_n": n, "eps_n": theta_n.eps_n,
                     "sup_mean_sq_err": float(mean_curve[sup_idx]),
                     "sup_time": float(recs[sup_idx] * dt),
                     "ci_halfwidth": sup_summary.ci_halfwidth,
                     "samples": cfg.samples})
        gauss = {"component_1": _moment_stats(out["xi_1"]),
                 "component_2": _moment_stats(out["xi_2"])}

    return {"rows": rows, "gaussianity": gauss, "config": asdict(cfg),
            "config_hash": config_hash(asdict(cfg))}


# ---------------------------------------------------------------------------
# dissipation enhancement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DissipationConfig:
    schedule: tuple = ((1.0, 4), (4.0, 16), (16.0, 64))  # (nu, theta size)
    kappa: float = 0.01
    lam: float = 2.0
    dim: int = 20
    x0: tuple = (1.0,)
    horizon: float = 2.0
    dt: float = 2.5e-4
    samples: int = 128
    seed: int = 2024
    rho: float = 0.5
    workers: int = 1

    def __post_init__(self):
        if self.kappa <= 0:
            raise UsageError("dissipation experiment needs kappa > 0")
        if not 0.0 < self.rho < 1.0:
            raise UsageError("rho must lie in (0, 1)")
        if self.horizon < 1.0:
            raise UsageError("need at least one unit-time checkpoint")


def dissipation_bracket(nu: float, kappa: float, lam: float,
                        theta_linf: float, x0_norm: float,
                        rho: float) -> float:
    """Upper-bound bracket for the one-step energy contraction factor.

    1/(mu lam^2) + lam^2 ||x0||^2 / mu^2 + nu^2 C1(lam) theta_linf^4 / mu^2
      + theta_linf^2 nu C_rho^2 C2(lam, rho) / (kappa mu^rho (1 - rho)),
    mu = kappa + nu, with C1 = lam^-4 / (1 - lam^-2)^2,
    C2 = 2 lam^(-2 rho) / (1 - lam^(-2 rho)) and the smoothing constant
    C_rho = (rho / (2 e))^(rho / 2).
    """
    mu = kappa + nu
    c1 = lam ** -4 / (1.0 - lam ** -2) ** 2
    c2 = 2.0 * lam ** (-2.0 * rho) / (1.0 - lam ** (-2.0 * rho))
    c_rho = (rho / (2.0 * math.e)) ** (rho / 2.0)
    return (1.0 / (mu * lam ** 2)
            + lam ** 2 * x0_norm ** 2 / mu ** 2
            + nu ** 2 * c1 * theta_linf ** 4 / mu ** 2
            + theta_linf ** 2 * nu * c_rho ** 2 * c2
              / (kappa * mu ** rho * (1.0 - rho)))


def _dissipation_chunk(payload, lo, hi):
    (sde_cfg,) = payload
    run = CoupledRun([sde_cfg], np.arange(lo, hi))
    n_rec = _record_steps(sde_cfg.steps, sde_cfg.output_stride).size
    energies = np.zeros((hi - lo, n_rec))
    for rec, step, t, states in run:
        energies[:, rec] = np.sum(states[0] ** 2, axis=1)
    return {"energies": energies}


def run_dissipation(cfg: DissipationConfig) -> dict:
    """Energy decay of the viscous model along a (nu, theta) schedule.

    Records per-path energies at unit-time checkpoints with the energy-exact
    rotation scheme, tabulates ensemble ratios r_n = E||X(n)||^2 /
    E||X(n-1)||^2, fits per-path exponential decay rates, and evaluates the
    analytic contraction bracket for comparison.
    """
    dt = cfg.dt
    probe = driver_for(cfg.dim, cfg.horizon, dt, cfg.seed)
    steps = probe.step_count
    per_unit = steps / cfg.horizon
    stride = int(round(per_unit))
    if abs(per_unit - stride) > 1e-9:
        raise UsageError("dt must divide the unit time for integer checkpoints")
    x0 = np.asarray(cfg.x0)
    x0_norm = float(np.sqrt(np.sum(np.asarray(cfg.x0, dtype=float) ** 2)))
    baseline = cfg.kappa * cfg.lam ** 2

    rows = []
    for nu, n_theta in cfg.schedule:
        theta = theta_uniform(int(n_theta))
        driver = driver_for(cfg.dim, cfg.horizon, dt, cfg.seed)
        sde_cfg = SdeConfig(dim=cfg.dim, lam=cfg.lam, nu=float(nu),
                            theta=theta, x0=x0, horizon=cfg.horizon, dt=dt,
                            driver=driver, model="nonlinear_viscous",
                            scheme="stratonovich_rotation_split",
                            kappa=cfg.kappa, output_stride=stride)
        out = _map_paths(_dissipation_chunk, (sde_cfg,), cfg.samples,
                         cfg.workers)
        energies = out["energies"]                  # (M, checkpoints)
        mean_energy = energies.mean(axis=0)
        ratios = mean_energy[1:] / mean_energy[:-1]
        # pathwise monotonicity margin (positive = growth = scheme failure)
        path_ratio = energies[:, 1:] / np.maximum(energies[:, :-1], 1e-300)
        worst_growth = float(np.max(path_ratio) - 1.0)
        # per-path decay rate of log ||X(t)|| over the checkpoints
        times = np.arange(mean_energy.size) * 1.0
        logs = 0.5 * np.log(np.maximum(energies, 1e-300))
        t_c = times - times.mean()
        slopes = (logs @ t_c) / np.sum(t_c ** 2)
        rate_summary = summarize(-slopes)
        measured_rate = -0.5 * math.log(max(mean_energy[-1] / mean_energy[0],
                                            1e-300)) / times[-1]
        rows.append({
            "nu": float(nu), "n_theta": int(n_theta),
            "theta_linf": theta.linf,
            **{f"r_{k}": float(ratios[k - 1]) for k in range(1, ratios.size + 1)},
            "worst_pathwise_growth": worst_growth,
            "mean_path_rate": rate_summary.mean,
            "rate_ci_halfwidth": rate_summary.ci_halfwidth,
            "ensemble_rate": measured_rate,
            "delta_bracket": dissipation_bracket(
                float(nu), cfg.kappa, cfg.lam, theta.linf, x0_norm, cfg.rho),
            "baseline_rate": baseline,
            "samples": cfg.samples,
        })
    return {"rows": rows, "baseline_rate": baseline, "config": asdict(cfg),
            "config_hash": config_hash(asdict(cfg))}


# ---------------------------------------------------------------------------
# martingale vanishing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MartingaleConfig:
    family_sizes: tuple = (4, 8, 16, 32, 64)
    y: tuple = (1.0,)              # finite-support test vector
    nu: float = 1.0
    lam: float = 2.0
    dim: int = 16
    x0: tuple = (0.5,)
    horizon: float = 0.5
    dt: float = 1e-3
    samples: int = 200
    seed: int = 2024
    output_stride: int = 50
    workers: int = 1

    def __post_init__(self):
        if len(self.family_sizes) < 1:
            raise UsageError("need at least one theta family")
        if len(self.y) > self.dim:
            raise UsageError("test vector support exceeds the truncation")


def _martingale_chunk(payload, lo, hi):
    sde_cfg, y_vec, n_rec = payload
    run = CoupledRun([sde_cfg], np.arange(lo, hi))
    eng = run.engines[0]
    proj_sq = np.zeros((hi - lo, n_rec))
    for rec, step, t, states in run:
        if step == 0:
            continue
        proj_sq[:, rec] = (eng.martingale_acc @ y_vec) ** 2
    return {"proj_sq": proj_sq}


def run_martingale_vanishing(cfg: MartingaleConfig) -> dict:
    """Mean squared projection of the martingale part onto a fixed vector.

    Tabulates E <M(t), y>^2 at the final time per family with the
    checkpointed growth curve, and fits the log-log slope against the family
    sup-norm (expected near 2).
    """
    y_vec = np.zeros(cfg.dim)
    y_vec[:len(cfg.y)] = np.asarray(cfg.y, dtype=float)
    rows = []
    for n in cfg.family_sizes:
        theta = theta_uniform(n)
        driver = driver_for(cfg.dim, cfg.horizon, cfg.dt, cfg.seed)
        recs = _record_steps(driver.step_count, cfg.output_stride)
        sde_cfg = SdeConfig(dim=cfg.dim, lam=cfg.lam, nu=cfg.nu, theta=theta,
                            x0=np.asarray(cfg.x0), horizon=cfg.horizon,
                            dt=cfg.dt, driver=driver, model="nonlinear",
                            scheme="ito_exponential",
                            output_stride=cfg.output_stride,
                            record_martingale=True)
        out = _map_paths(_martingale_chunk, (sde_cfg, y_vec, recs.size),
                         cfg.samples, cfg.workers)
        curve = out["proj_sq"].mean(axis=0)
        summ = summarize(out["proj_sq"][:, -1])
        rows.append({"family_n": n, "theta_linf": theta.linf,
                     "mean_sq_final": summ.mean,
                     "ci_halfwidth": summ.ci_halfwidth,
                     "samples": summ.samples,
                     "growth_curve": [float(v) for v in curve],
                     "growth_times": [float(recs[i] * cfg.dt)
                                      for i in range(recs.size)]})
    fit = None
    fit_error = ""
    if len(rows) >= 3:
        fit = fit_loglog_slope([r["theta_linf"] for r in rows],
                               [r["mean_sq_final"] for r in rows])
    else:
        fit_error = "need at least 3 families for a slope fit"
    return {"rows": rows, "fit": fit, "fit_error": fit_error,
            "config": asdict(cfg), "config_hash": config_hash(asdict(cfg))}


# ---------------------------------------------------------------------------
# corrector degeneration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorrectorDecayConfig:
    family_sizes: tuple = (4, 16, 64, 256)
    lam: float = 2.0
    shells: tuple = (1, 2, 3, 4)
    dim: int = 8
    seed: int = 0          # unused; kept for uniform reproducibility records

    def __post_init__(self):
        if max(self.shells) > self.dim:
            raise UsageError("watched shell outside the truncation")


def run_corrector_decay(cfg: CorrectorDecayConfig) -> dict:
    """Entrywise decay of the nearest-neighbour corrector versus the full one.

    For uniform families the nearest-neighbour corrector entries scale like
    1/N (entry times N constant), while the full corrector entries converge
    to the bare dissipation diagonal -lam^(2n); both are tabulated per shell
    with the geometric error bound for the latter.
    """
    rows = []
    for n_family in cfg.family_sizes:
        theta = theta_uniform(n_family)
        neigh = neighbor_corrector(theta, cfg.lam, cfg.dim).entries
        full = stratonovich_corrector(theta, cfg.lam, cfg.dim).entries
        for shell in cfg.shells:
            limit = -cfg.lam ** (2.0 * shell)
            bound = (theta.linf ** 2 * cfg.lam ** (2.0 * (shell - 1))
                     / (1.0 - cfg.lam ** -2.0))
            rows.append({
                "family_n": n_family, "shell": shell,
                "neighbor_entry": float(neigh[shell - 1]),
                "neighbor_entry_times_n": float(neigh[shell - 1] * n_family),
                "full_entry": float(full[shell - 1]),
                "limit_entry": limit,
                "full_error": float(abs(full[shell - 1] - limit)),
                "full_error_bound": bound,
            })
    return {"rows": rows, "config": asdict(cfg),
            "config_hash": config_hash(asdict(cfg))}


# ---------------------------------------------------------------------------
# moment-oracle comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MomentCheckConfig:
    dim: int = 8
    theta_size: int = 4
    nu: float = 1.0
    lam: float = 2.0
    x0: tuple = (1.0, 0.5)
    checkpoints: tuple = (0.1, 0.5)
    dt: float = 1e-3
    samples: int = 10000
    seed: int = 2024
    moment_dt: float = 1e-5
    workers: int = 1


def _moment_chunk(payload, lo, hi):
    sde_cfg, rec_indices = payload
    run = CoupledRun([sde_cfg], np.arange(lo, hi))
    snaps = {}
    for rec, step, t, states in run:
        if rec in rec_indices:
            snaps[rec] = states[0].copy() ** 2
    return {f"sq_{rec}": snaps[rec] for rec in rec_indices}


def run_moment_check(cfg: MomentCheckConfig) -> dict:
    """Monte Carlo second moments of the linear model against the moment ODE.

    Returns per-shell z-scores at each requested checkpoint; the ODE side is
    integrated implicitly at `moment_dt`.
    """
    theta = theta_uniform(cfg.theta_size)
    horizon = max(cfg.checkpoints)
    driver = driver_for(cfg.dim, horizon, cfg.dt, cfg.seed)
    steps = driver.step_count
    dt_eff = horizon / steps
    sde_cfg = SdeConfig(dim=cfg.dim, lam=cfg.lam, nu=cfg.nu, theta=theta,
                        x0=np.asarray(cfg.x0), horizon=horizon, dt=cfg.dt,
                        driver=driver, model="linear_girsanov",
                        scheme="ito_exponential", output_stride=1)
    recs = _record_steps(steps, 1)
    rec_indices = []
    for t in cfg.checkpoints:
        k = int(round(t / dt_eff))
        if abs(k * dt_eff - t) > 1e-9:
            raise UsageError(f"checkpoint {t} is not on the time grid")
        rec_indices.append(k)

    out = _map_paths(_moment_chunk, (sde_cfg, tuple(rec_indices)),
                     cfg.samples, cfg.workers)

    mm = build_moment_matrix(theta, cfg.lam, cfg.nu, cfg.dim)
    y0 = np.zeros(cfg.dim)
    x0 = np.asarray(cfg.x0, dtype=float)
    y0[:x0.size] = x0 ** 2
    oracle = evolve_moments(y0, mm, horizon, cfg.moment_dt)

    rows = []
    for t, rec in zip(cfg.checkpoints, rec_indices):
        sq = out[f"sq_{rec}"]
        mean = sq.mean(axis=0)
        se = sq.std(axis=0, ddof=1) / math.sqrt(sq.shape[0])
        z = compare_mc_moments(mean, se, oracle.at_time(t))
        for shell in range(1, cfg.dim + 1):
            rows.append({"time": t, "shell": shell,
                         "mc_mean": float(mean[shell - 1]),
                         "mc_stderr": float(se[shell - 1]),
                         "oracle": float(oracle.at_time(t)[shell - 1]),
                         "z": float(z[shell - 1])})
    return {"rows": rows, "config": asdict(cfg),
            "config_hash": config_hash(asdict(cfg))}


# ---------------------------------------------------------------------------
# Girsanov consistency check
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GirsanovCheckConfig:
    dim: int = 12
    theta_size: int = 4
    nu: float = 1.0
    lam: float = 2.0
    x0: tuple = (0.25,)
    horizon: float = 0.2
    dt: float = 1e-3
    samples: int = 10000
    seed: int = 2024
    observable_shell: int = 2
    workers: int = 1
    theta_coefficients: tuple | None = None   # overrides theta_size

    def __post_init__(self):
        if not 1 <= self.observable_shell <= self.dim:
            raise UsageError("observable shell outside the truncation")
        if self.theta_coefficients is not None \
                and self.theta_coefficients[0] == 0.0:
            raise UsageError("the change of measure needs a nonzero first "
                             "noise coefficient")

    def theta_family(self):
        if self.theta_coefficients is not None:
            return theta_custom(np.asarray(self.theta_coefficients))
        return theta_uniform(self.theta_size)


def _girsanov_linear_chunk(payload, lo, hi):
    sde_cfg, shell, theta1 = payload
    run = CoupledRun([sde_cfg], np.arange(lo, hi))
    m = hi - lo
    dt = sde_cfg.dt_effective
    i_max = min(sde_cfg.driver.i_max, sde_cfg.dim)
    scale = 1.0 / (math.sqrt(2.0 * sde_cfg.nu) * theta1)
    integral = np.zeros(m)
    qv = np.zeros(m)
    trajs = np.arange(lo, hi)
    prev = None
    weight_checkpoints = []
    for rec, step, t, states in run:
        if prev is not None:
            cols = sde_cfg.driver.increment_blocks(trajs, step - 1)[:, :i_max, 0]
            xs = prev[:, :i_max]
            integral += scale * np.sum(xs * cols, axis=1)
            qv += scale * scale * dt * np.sum(xs * xs, axis=1)
        prev = states[0].copy()
        weight_checkpoints.append(integral - 0.5 * qv)
    final = prev
    return {"f_values": final[:, shell - 1],
            "log_weights": integral - 0.5 * qv,
            "mid_log_weights": weight_checkpoints[len(weight_checkpoints) // 2]}


def _girsanov_nonlinear_chunk(payload, lo, hi):
    sde_cfg, shell = payload
    run = CoupledRun([sde_cfg], np.arange(lo, hi))
    final = None
    for rec, step, t, states in run:
        final = states[0]
    return {"f_values": final[:, shell - 1].copy()}


def run_girsanov_check(cfg: GirsanovCheckConfig) -> dict:
    """Reweighted linear ensemble versus direct nonlinear Monte Carlo.

    The linear model is simulated with every step recorded internally so the
    running log-density uses exactly the consumed increments; the single
    observable E[X_shell(T)] is then estimated both ways.
    """
    theta = theta_uniform(cfg.theta_size)
    theta1 = theta.coefficient(1)
    x0 = np.asarray(cfg.x0, dtype=float)
    x0_norm = float(np.sqrt(np.sum(x0 ** 2)))

    lin_driver = driver_for(cfg.dim, cfg.horizon, cfg.dt, cfg.seed)
    lin_cfg = SdeConfig(dim=cfg.dim, lam=cfg.lam, nu=cfg.nu, theta=theta,
                        x0=x0, horizon=cfg.horizon, dt=cfg.dt,
                        driver=lin_driver, model="linear_girsanov",
                        scheme="ito_exponential", output_stride=1)
    lin = _map_paths(_girsanov_linear_chunk,
                     (lin_cfg, cfg.observable_shell, theta1),
                     cfg.samples, cfg.workers)
    est = reweighted_expectation(lin["f_values"], lin["log_weights"])
    weights = np.exp(lin["log_weights"])
    weight_mean = summarize(weights)
    mid_weights = np.exp(lin["mid_log_weights"])
    mid_weight_mean = summarize(mid_weights)

    # independent nonlinear ensemble (fresh stream)
    non_driver = driver_for(cfg.dim, cfg.horizon, cfg.dt, cfg.seed + 1)
    non_cfg = SdeConfig(dim=cfg.dim, lam=cfg.lam, nu=cfg.nu, theta=theta,
                        x0=x0, horizon=cfg.horizon, dt=cfg.dt,
                        driver=non_driver, model="nonlinear",
                        scheme="ito_exponential", output_stride=1)
    non = _map_paths(_girsanov_nonlinear_chunk, (non_cfg, cfg.observable_shell),
                     cfg.samples, cfg.workers)
    direct = summarize(non["f_values"])

    combined_se = math.sqrt(est.stderr ** 2 + direct.variance / cfg.samples)
    result = {
        "reweighted_estimate": est.estimate,
        "reweighted_stderr": est.stderr,
        "ess": est.ess,
        "degenerate": est.degenerate,
        "direct_estimate": direct.mean,
        "direct_stderr": math.sqrt(direct.variance / cfg.samples),
        "combined_stderr": combined_se,
        "discrepancy": est.estimate - direct.mean,
        "discrepancy_sigmas": (est.estimate - direct.mean) / combined_se
            if combined_se > 0 else 0.0,
        "weight_mean": weight_mean.mean,
        "weight_mean_se": math.sqrt(weight_mean.variance / cfg.samples),
        "mid_weight_mean": mid_weight_mean.mean,
        "mid_weight_mean_se": math.sqrt(mid_weight_mean.variance / cfg.samples),
        "novikov_bound": novikov_bound(x0_norm, cfg.horizon, cfg.nu, theta1),
        "novikov_exponent": x0_norm ** 2 * cfg.horizon
            / (4.0 * cfg.nu * theta1 ** 2),
        "samples": cfg.samples,
    }
    return {"rows": [result], "config": asdict(cfg),
            "config_hash": config_hash(asdict(cfg))}


# ---------------------------------------------------------------------------
# artifact writing shared by the CLI
# ---------------------------------------------------------------------------

def write_experiment_artifacts(result: dict, outdir, name: str,
                               extra_summary: dict | None = None):
    """Write results.csv, summary.json and a plot-ready .dat when possible."""
    os.makedirs(outdir, exist_ok=True)
    rows = result.get("rows", [])
    if rows:
        fieldnames = []
        for row in rows:
            for key in row:
                if key not in fieldnames and not isinstance(row[key], list):
                    fieldnames.append(key)
        flat = [{k: r.get(k) for k in fieldnames} for r in rows]
        write_results_csv(os.path.join(outdir, "results.csv"), fieldnames, flat)
    summary = {"experiment": name,
               "config": result.get("config"),
               "config_hash": result.get("config_hash")}
    for key, value in result.items():
        if key in ("rows", "config", "config_hash"):
            continue
        if hasattr(value, "__dataclass_fields__"):
            value = asdict(value)
        summary[key] = value
    summary["rows"] = result.get("rows")
    if extra_summary:
        summary.update(extra_summary)
    write_summary_json(os.path.join(outdir, "summary.json"), summary)

    xcol = next((c for c in ("theta_linf", "family_n", "nu") if rows
                 and rows[0].get(c) is not None), None)
    ycol = next((c for c in ("estimate", "sup_mean_sq_err", "mean_sq_final",
                             "ensemble_rate", "mc_mean") if rows
                 and rows[0].get(c) is not None), None)
    if xcol and ycol:
        pts = [(r[xcol], r[ycol], r.get("ci_halfwidth") or 0.0)
               for r in rows if r.get(ycol) is not None]
        if pts:
            xs, ys, es = zip(*pts)
            write_dat(os.path.join(outdir, f"{name}.dat"), xs, ys, es)
