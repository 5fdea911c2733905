"""TOML run configuration: parsing, validation, defaults.

The config file is the source of truth; the CLI overrides scalar fields
(seed, workers, output directory) only.  Validation collects every
violation instead of stopping at the first, and unknown keys are rejected.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:                       # Python 3.10
    import tomli as tomllib

import numpy as np

from .errors import ConfigError, UsageError
from .experiments import (CltConfig, CorrectorDecayConfig, DissipationConfig,
                          GirsanovCheckConfig, MartingaleConfig,
                          MomentCheckConfig, ScalingLimitConfig)
from .noise import (ThetaFamily, theta_custom, theta_power_law,
                    theta_power_tail, theta_uniform)

__all__ = ["RunConfig", "parse_config", "COMMANDS"]

COMMANDS = ("simulate-det", "simulate-sde", "moments", "girsanov-check",
            "exp-scaling", "exp-clt", "exp-dissipation", "exp-martingale",
            "exp-corrector")

SEED_ENV_VAR = "DYADIC_LAB_SEED"


@dataclass
class RunConfig:
    command: str
    parameters: dict
    seed: int
    output_dir: str
    workers: int = 1


class _Checker:
    """Collects violations while pulling typed values out of a dict."""

    def __init__(self, table: dict, context: str):
        self.table = dict(table)
        self.context = context
        self.violations: list[str] = []
        self.seen: set[str] = set()

    def fail(self, message: str):
        self.violations.append(f"{self.context}: {message}")

    def leftover_keys(self):
        for key in self.table:
            if key not in self.seen:
                self.fail(f"unknown key {key!r}")

    def _get(self, key, default):
        self.seen.add(key)
        return self.table.get(key, default)

    def number(self, key, default=None, *, low=None, high=None,
               low_open=False, high_open=False, constraint=""):
        raw = self._get(key, default)
        if raw is None:
            if default is None:
                self.fail(f"missing required key {key!r}")
            return default
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            self.fail(f"{key} must be a number, got {raw!r}")
            return default
        value = float(raw)
        ok = True
        if low is not None:
            ok = ok and (value > low if low_open else value >= low)
        if high is not None:
            ok = ok and (value < high if high_open else value <= high)
        if not ok:
            self.fail(f"{key} = {raw} violates {constraint or 'range bound'}")
            return default
        return value

    def integer(self, key, default=None, *, low=None, high=None,
                constraint=""):
        raw = self._get(key, default)
        if raw is None:
            if default is None:
                self.fail(f"missing required key {key!r}")
            return default
        if isinstance(raw, bool) or not isinstance(raw, int):
            self.fail(f"{key} must be an integer, got {raw!r}")
            return default
        if (low is not None and raw < low) or (high is not None and raw > high):
            self.fail(f"{key} = {raw} violates {constraint or 'range bound'}")
            return default
        return int(raw)

    def choice(self, key, options, default=None):
        raw = self._get(key, default)
        if raw is None:
            if default is None:
                self.fail(f"missing required key {key!r}")
            return default
        if raw not in options:
            self.fail(f"{key} = {raw!r} not one of {sorted(options)}")
            return default
        return raw

    def number_list(self, key, default=None, *, min_len=1):
        raw = self._get(key, default)
        if raw is None:
            if default is None:
                self.fail(f"missing required key {key!r}")
            return default
        if not isinstance(raw, (list, tuple)) or len(raw) < min_len or \
                any(isinstance(v, bool) or not isinstance(v, (int, float))
                    for v in raw):
            self.fail(f"{key} must be a list of >= {min_len} numbers")
            return default
        return tuple(float(v) for v in raw)

    def integer_list(self, key, default=None, *, min_len=1, low=None):
        raw = self._get(key, default)
        if raw is None:
            if default is None:
                self.fail(f"missing required key {key!r}")
            return default
        bad = (not isinstance(raw, (list, tuple)) or len(raw) < min_len or
               any(isinstance(v, bool) or not isinstance(v, int) for v in raw))
        if not bad and low is not None:
            bad = any(v < low for v in raw)
        if bad:
            self.fail(f"{key} must be a list of >= {min_len} integers"
                      + (f" >= {low}" if low is not None else ""))
            return default
        return tuple(int(v) for v in raw)

    def table(self, key, default=None):
        raw = self._get(key, default)
        if raw is None:
            return default
        if not isinstance(raw, dict):
            self.fail(f"{key} must be a table")
            return default
        return raw


def _parse_theta(checker: _Checker, spec, dim: int | None):
    """Build a ThetaFamily from a {kind = ...} table."""
    if spec is None:
        return None
    sub = _Checker(spec, checker.context + ".theta")
    kind = sub.choice("kind", ("uniform", "power_law", "power_tail", "custom"))
    theta = None
    if kind == "uniform":
        n = sub.integer("n", low=1, constraint="n >= 1")
        if n is not None:
            theta = theta_uniform(n)
    elif kind == "power_law":
        n = sub.integer("n", low=1, constraint="n >= 1")
        alpha1 = sub.number("alpha1", low=0.0, high=0.5, low_open=True,
                            high_open=True, constraint="alpha1 in (0, 1/2)")
        if n is not None and alpha1 is not None:
            theta = theta_power_law(n, alpha1)
    elif kind == "power_tail":
        alpha1 = sub.number("alpha1", low=0.0, high=0.5, low_open=True,
                            high_open=True, constraint="alpha1 in (0, 1/2)")
        length = sub.integer("length", (dim - 1) if dim else None,
                             low=1, constraint="length >= 1")
        if alpha1 is not None and length is not None:
            theta = theta_power_tail(alpha1, length)
    elif kind == "custom":
        coeffs = sub.number_list("coefficients")
        if coeffs is not None:
            if any(c < 0 for c in coeffs):
                sub.fail("coefficients must be nonnegative")
            else:
                theta = theta_custom(np.asarray(coeffs))
    sub.leftover_keys()
    checker.violations.extend(sub.violations)
    return theta


def _build_simulate_det(checker: _Checker) -> dict:
    dim = checker.integer("dim", 16, low=1, constraint="dim >= 1")
    lam = checker.number("lam", 2.0, low=1.0, low_open=True,
                         constraint="lam > 1")
    nu = checker.number("nu", 1.0, low=0.0, constraint="nu >= 0")
    alpha = checker.number("alpha", 1.0, low=0.0, low_open=True,
                           constraint="alpha > 0")
    x0 = checker.number_list("x0")
    horizon = checker.number("horizon", low=0.0, low_open=True,
                             constraint="horizon > 0")
    dt = checker.number("dt", 0.0, low=0.0, constraint="dt > 0 when given")
    stride = checker.integer("output_stride", 1, low=1,
                             constraint="output_stride >= 1")
    scheme = checker.choice("scheme", ("exp_euler", "exp_heun"), "exp_euler")
    checker.leftover_keys()
    if checker.violations:
        return {}
    if not dt:
        x0_norm = math.sqrt(sum(v * v for v in x0))
        dt = 0.1 / (lam ** (dim + 1) * max(x0_norm, 1e-12))
        dt = min(dt, horizon)
        if horizon / dt > 2e6:
            checker.fail("default advective step is impractically small "
                         "for this truncation; set dt explicitly")
            return {}
    return dict(dim=dim, lam=lam, nu=nu, alpha=alpha, x0=x0, horizon=horizon,
                dt=dt, output_stride=stride, scheme=scheme)


def _build_simulate_sde(checker: _Checker) -> dict:
    dim = checker.integer("dim", 16, low=2, constraint="dim >= 2")
    lam = checker.number("lam", 2.0, low=1.0, low_open=True,
                         constraint="lam > 1")
    nu = checker.number("nu", 1.0, low=0.0, constraint="nu >= 0")
    kappa = checker.number("kappa", 0.0, low=0.0, constraint="kappa >= 0")
    theta_tbl = checker.table("theta")
    if theta_tbl is None:
        checker.fail("missing required table 'theta'")
        theta = None
    else:
        theta = _parse_theta(checker, theta_tbl, dim)
    x0 = checker.number_list("x0")
    horizon = checker.number("horizon", low=0.0, low_open=True,
                             constraint="horizon > 0")
    dt = checker.number("dt", 0.0, low=0.0, constraint="dt > 0 when given")
    model = checker.choice("model", ("nonlinear", "nonlinear_viscous",
                                     "linear_girsanov"), "nonlinear")
    scheme = checker.choice("scheme", ("ito_exponential",
                                       "stratonovich_rotation_split"),
                            "ito_exponential")
    noise_filter = checker.choice("noise_filter", ("ou", "plain"), "ou")
    stride = checker.integer("output_stride", 1, low=1,
                             constraint="output_stride >= 1")
    trajectory = checker.integer("trajectory", 0, low=0,
                                 constraint="trajectory >= 0")
    checker.leftover_keys()
    if checker.violations:
        return {}
    if theta is not None and abs(theta.l2 - 1.0) > 1e-12:
        checker.fail("theta must be l2-normalized for the simulated models")
        return {}
    if not dt:
        x0_norm = math.sqrt(sum(v * v for v in x0))
        adv = 0.1 / (lam ** (dim + 1) * max(x0_norm, 1e-12))
        noise = 0.01 / max(2.0 * nu * lam ** (2 * dim) * theta.linf ** 2,
                           1e-12)
        dt = min(adv, noise, horizon)
        if horizon / dt > 2e6:
            checker.fail("default stability step is impractically small "
                         "for this truncation; set dt explicitly")
            return {}
    return dict(dim=dim, lam=lam, nu=nu, kappa=kappa, theta=theta, x0=x0,
                horizon=horizon, dt=dt, model=model, scheme=scheme,
                noise_filter=noise_filter, output_stride=stride,
                trajectory=trajectory)


def _build_moments(checker: _Checker) -> dict:
    dim = checker.integer("dim", 8, low=1, constraint="dim >= 1")
    lam = checker.number("lam", 2.0, low=1.0, low_open=True,
                         constraint="lam > 1")
    nu = checker.number("nu", 1.0, low=0.0, constraint="nu >= 0")
    theta_tbl = checker.table("theta")
    if theta_tbl is None:
        checker.fail("missing required table 'theta'")
        theta = None
    else:
        theta = _parse_theta(checker, theta_tbl, dim)
    y0 = checker.number_list("y0")
    horizon = checker.number("horizon", low=0.0, low_open=True,
                             constraint="horizon > 0")
    dt = checker.number("dt", 1e-5, low=0.0, low_open=True,
                        constraint="dt > 0")
    checker.leftover_keys()
    if checker.violations:
        return {}
    if y0 is not None and any(v < 0 for v in y0):
        checker.fail("y0 must be componentwise nonnegative")
        return {}
    if theta is not None and abs(theta.l2 - 1.0) > 1e-12:
        checker.fail("theta must be l2-normalized for the moment system")
        return {}
    return dict(dim=dim, lam=lam, nu=nu, theta=theta, y0=y0,
                horizon=horizon, dt=dt)


def _experiment_builder(cls, fields_spec):
    def build(checker: _Checker) -> dict:
        kwargs = {}
        for name, getter in fields_spec.items():
            value = getter(checker)
            if value is not None:
                kwargs[name] = value
        checker.leftover_keys()
        if checker.violations:
            return {}
        try:
            cfg = cls(**kwargs)
        except (UsageError, TypeError) as exc:
            checker.fail(str(exc))
            return {}
        return {"experiment_config": cfg}
    return build


def _girsanov_builder(checker: _Checker) -> dict:
    kwargs = {}
    for name, getter in _GIRSANOV_FIELDS.items():
        value = getter(checker)
        if value is not None:
            kwargs[name] = value
    theta_tbl = checker.table("theta")
    theta = _parse_theta(checker, theta_tbl, kwargs.get("dim")) \
        if theta_tbl is not None else None
    checker.leftover_keys()
    if theta is not None:
        if theta.coefficient(1) == 0.0:
            checker.fail("girsanov-check needs a nonzero first noise "
                         "coefficient (theta_1 != 0)")
        else:
            kwargs["theta_coefficients"] = tuple(theta.coefficients)
    if checker.violations:
        return {}
    try:
        cfg = GirsanovCheckConfig(**kwargs)
    except (UsageError, TypeError) as exc:
        checker.fail(str(exc))
        return {}
    return {"experiment_config": cfg}


def _opt_int(key, low=None, constraint=""):
    return lambda c: c.integer(key, None, low=low, constraint=constraint)


def _opt_num(key, **kw):
    return lambda c: c.number(key, None, **kw)


def _opt_numlist(key, **kw):
    return lambda c: c.number_list(key, None, **kw)


def _opt_intlist(key, **kw):
    return lambda c: c.integer_list(key, None, **kw)


_COMMON_MC = {
    "nu": _opt_num("nu", low=0.0, low_open=True, constraint="nu > 0"),
    "lam": _opt_num("lam", low=1.0, low_open=True, constraint="lam > 1"),
    "dim": _opt_int("dim", low=2, constraint="dim >= 2"),
    "x0": _opt_numlist("x0"),
    "horizon": _opt_num("horizon", low=0.0, low_open=True,
                        constraint="horizon > 0"),
    "dt": _opt_num("dt", low=0.0, low_open=True, constraint="dt > 0"),
    "samples": _opt_int("samples", low=2, constraint="samples >= 2"),
}

_SCALING_FIELDS = {
    "family_sizes": _opt_intlist("family_sizes", low=1),
    "alpha": _opt_num("alpha", low=0.0, high=1.0, low_open=True,
                      high_open=True, constraint="alpha in (0, 1)"),
    "delta": _opt_num("delta", low=0.5, high=1.0, low_open=True,
                      high_open=True, constraint="delta in (1/2, 1)"),
    "output_stride": _opt_int("output_stride", low=1,
                              constraint="output_stride >= 1"),
    **_COMMON_MC,
}

_CLT_FIELDS = {
    "family_sizes": _opt_intlist("family_sizes", low=1),
    "alpha1": _opt_num("alpha1", low=0.0, high=0.5, low_open=True,
                       high_open=True, constraint="alpha1 in (0, 1/2)"),
    "beta": _opt_num("beta", low=0.0, high=1.0, low_open=True,
                     high_open=True, constraint="beta in (0, 1)"),
    "output_stride": _opt_int("output_stride", low=1,
                              constraint="output_stride >= 1"),
    **_COMMON_MC,
}

_DISSIPATION_FIELDS = {
    "schedule": lambda c: _parse_schedule(c),
    "kappa": _opt_num("kappa", low=0.0, low_open=True,
                      constraint="kappa > 0"),
    "rho": _opt_num("rho", low=0.0, high=1.0, low_open=True, high_open=True,
                    constraint="rho in (0, 1)"),
    **{k: v for k, v in _COMMON_MC.items() if k != "nu"},
}

_MARTINGALE_FIELDS = {
    "family_sizes": _opt_intlist("family_sizes", low=1),
    "y": _opt_numlist("y"),
    "output_stride": _opt_int("output_stride", low=1,
                              constraint="output_stride >= 1"),
    **_COMMON_MC,
}

_CORRECTOR_FIELDS = {
    "family_sizes": _opt_intlist("family_sizes", low=1),
    "lam": _opt_num("lam", low=1.0, low_open=True, constraint="lam > 1"),
    "shells": _opt_intlist("shells", low=1),
    "dim": _opt_int("dim", low=1, constraint="dim >= 1"),
}

_GIRSANOV_FIELDS = {
    "theta_size": _opt_int("theta_size", low=1, constraint="theta_size >= 1"),
    "observable_shell": _opt_int("observable_shell", low=1,
                                 constraint="observable_shell >= 1"),
    **_COMMON_MC,
}

def _parse_schedule(checker: _Checker):
    raw = checker._get("schedule", None)
    if raw is None:
        return None
    ok = isinstance(raw, (list, tuple)) and len(raw) >= 1 and all(
        isinstance(p, (list, tuple)) and len(p) == 2
        and isinstance(p[0], (int, float)) and not isinstance(p[0], bool)
        and isinstance(p[1], int) and not isinstance(p[1], bool) and p[1] >= 1
        and p[0] > 0
        for p in raw)
    if not ok:
        checker.fail("schedule must be a list of [nu > 0, theta_size >= 1] "
                     "pairs")
        return None
    return tuple((float(p[0]), int(p[1])) for p in raw)


_BUILDERS = {
    "simulate-det": _build_simulate_det,
    "simulate-sde": _build_simulate_sde,
    "moments": _build_moments,
    "girsanov-check": _girsanov_builder,
    "exp-scaling": _experiment_builder(ScalingLimitConfig, _SCALING_FIELDS),
    "exp-clt": _experiment_builder(CltConfig, _CLT_FIELDS),
    "exp-dissipation": _experiment_builder(DissipationConfig,
                                           _DISSIPATION_FIELDS),
    "exp-martingale": _experiment_builder(MartingaleConfig,
                                          _MARTINGALE_FIELDS),
    "exp-corrector": _experiment_builder(CorrectorDecayConfig,
                                         _CORRECTOR_FIELDS),
}


def parse_config(text: str, command: str | None = None,
                 *, cli_seed: int | None = None,
                 cli_workers: int | None = None,
                 cli_output_dir: str | None = None) -> RunConfig:
    """Parse and validate a TOML config; collect every violation found.

    Seed precedence is CLI flag > DYADIC_LAB_SEED environment variable >
    config file > default 1.
    """
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"TOML syntax error: {exc}"]) from exc

    top = _Checker(data, "config")
    file_command = top.choice("command", COMMANDS, command)
    file_seed = top.integer("seed", 1)
    output_dir = top._get("output_dir", None)
    if output_dir is not None and not isinstance(output_dir, str):
        top.fail("output_dir must be a string")
        output_dir = None
    workers = top.integer("workers", 1, low=1, constraint="workers >= 1")
    params = top.table("parameters", {})
    top.leftover_keys()

    if command is not None and file_command is not None \
            and file_command != command:
        top.fail(f"config command {file_command!r} does not match "
                 f"invoked command {command!r}")
    effective = command or file_command
    if effective is None:
        top.fail("no command given (neither CLI nor config)")
        raise ConfigError(top.violations)

    seed = file_seed if file_seed is not None else 1
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            top.fail(f"environment {SEED_ENV_VAR}={env_seed!r} is not an "
                     "integer")
    if cli_seed is not None:
        seed = cli_seed
    if cli_workers is not None:
        workers = cli_workers
    if cli_output_dir is not None:
        output_dir = cli_output_dir
    if output_dir is None:
        output_dir = "out"

    sub = _Checker(params if isinstance(params, dict) else {},
                   "parameters")
    built = _BUILDERS[effective](sub) if effective in _BUILDERS else {}
    violations = top.violations + sub.violations
    if violations:
        raise ConfigError(violations)

    # push the resolved seed/workers into experiment configs
    exp = built.get("experiment_config")
    if exp is not None:
        from dataclasses import replace as dc_replace
        updates = {}
        if hasattr(exp, "seed"):
            updates["seed"] = seed
        if hasattr(exp, "workers"):
            updates["workers"] = workers
        if updates:
            built["experiment_config"] = dc_replace(exp, **updates)

    return RunConfig(command=effective, parameters=built, seed=seed,
                     output_dir=output_dir, workers=workers)
