"""Experiment configuration: a TOML file of flat dotted keys, strictly validated.

Example::

    model.name = "CP1"
    grid.N = 512
    initial.family = "bump"
    initial.amplitude = 0.5
    run.t_end = 25.0

Nested tables are accepted too (TOML treats ``grid.N`` and ``[grid] N`` the
same way); every leaf is addressed by its dotted name.  Unknown keys and
out-of-range values raise :class:`~krflow.errors.ConfigError` naming the key.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

MODEL_NAMES = ("CP1", "CPn_radial", "Hirzebruch1")
FAMILIES = ("zero", "bump", "kink", "random_bumps")


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit(v):
    return 0 < v < 1


@dataclass(frozen=True)
class Key:
    kind: type | tuple
    default: Any
    check: Callable[[Any], bool] | None = None
    doc: str = ""


SCHEMA: dict[str, Key] = {
    "model.name": Key(str, "CP1", lambda v: v in MODEL_NAMES, "one of " + ", ".join(MODEL_NAMES)),
    "model.dim_n": Key(int, 2, lambda v: 1 <= v <= 8, "complex dimension for CPn_radial, 1..8"),
    "model.field_coeff": Key((float, str), 0.0, lambda v: v == "oracle" or isinstance(v, float),
                             "soliton field coefficient, or \"oracle\" to use the shooting oracle's value"),
    "grid.N": Key(int, 512, lambda v: 16 <= v <= 65537, "number of nodes, >= 16"),
    "grid.x_min": Key(float, -20.0, lambda v: -60 <= v < 0, "left end of the log-fiber window"),
    "grid.x_max": Key(float, 20.0, lambda v: 0 < v <= 60, "right end of the log-fiber window"),
    "initial.family": Key(str, "bump", lambda v: v in FAMILIES, "one of " + ", ".join(FAMILIES)),
    "initial.amplitude": Key(float, 0.5, lambda v: abs(v) <= 10, "amplitude of the initial perturbation"),
    "initial.width": Key(float, 2.0, _positive, "bump width (exp(-(x-c)^2/width^2)) or kink width"),
    "initial.center": Key(float, 0.0, None, "bump centre"),
    "initial.asymptotic_tol": Key(float, 1e-4, _positive, "largest |phi'| allowed at the grid ends"),
    "initial.count": Key(int, 3, lambda v: 1 <= v <= 50, "number of bumps for random_bumps"),
    "run.t_end": Key(float, 25.0, lambda v: 0 < v <= 1e4, "final time"),
    "stepper.scheme": Key(str, "sdirk2", lambda v: v in ("sdirk2", "rk2"), "sdirk2 (implicit) or rk2 (explicit, coarse grids)"),
    "stepper.frame": Key(str, "fixed", lambda v: v in ("fixed", "comoving"), "fixed or comoving (modified flow)"),
    "stepper.rtol": Key(float, 1e-4, _unit, "local error tolerance relative to sup|slopes|"),
    "stepper.atol": Key(float, 1e-14, _positive, "absolute floor of the error scale"),
    "stepper.dt_init": Key(float, 1e-3, _positive, "first trial step"),
    "stepper.dt_max": Key(float, 0.25, _positive, "step-size cap"),
    "stepper.dt_min": Key(float, 1e-10, _positive, "step-size underflow threshold"),
    "diagnostics.sample_every": Key(float, 0.25, _positive, "diagnostic cadence in flow time"),
    "diagnostics.holder_alpha": Key(float, 0.5, _unit, "Holder exponent of the C^alpha monitor"),
    "diagnostics.k_energy_nodes": Key(int, 64, lambda v: v >= 2 and v % 2 == 0, "path quadrature nodes (even)"),
    "diagnostics.monotonicity_tol": Key(float, 1e-8, _nonneg, "allowed per-sample K-energy increase"),
    "diagnostics.u_mod_tol": Key(float, 1e-6, _positive, "final sup|u_mod| required for the convergence flag"),
    "diagnostics.fit_mode": Key(str, "window", lambda v: v in ("window", "above_floor"),
                                "window (fit_start..fit_end) or above_floor (t = 1 until 100x the final value)"),
    "diagnostics.fit_start": Key(float, -1.0, None, "start of the rate-fit window; negative = t_end / 2"),
    "diagnostics.fit_end": Key(float, -1.0, None, "end of the rate-fit window; negative = t_end"),
    "oracle.bracket_low": Key(float, -0.5, None, "lower end of the lambda bracket"),
    "oracle.bracket_high": Key(float, 2.0, None, "upper end of the lambda bracket"),
    "mt.c_trial": Key(float, -1.0, None, "Moser-Trudinger slope C; negative = fit"),
    "mt.d_trial": Key(float, -1.0, None, "Moser-Trudinger offset D; negative = fit"),
    "mt.fit_method": Key(str, "ratio", lambda v: v in ("ratio", "regression"), "ratio (half the smallest mu/J_G) or regression"),
    "mt.holdout_every": Key(int, 2, lambda v: v >= 2, "every k-th snapshot is held out of the fit"),
    "mt.s_max": Key(float, 4.0, _positive, "translation range of the gauge-orbit minimisation"),
    "smoothing.widths": Key(list, [0.4, 0.2, 0.1, 0.05], lambda v: len(v) >= 2 and all(isinstance(w, (int, float)) and w > 0 for w in v), "kink widths"),
    "smoothing.times": Key(list, [0.0, 1.0, 2.0], lambda v: len(v) >= 1 and all(isinstance(t, (int, float)) and t >= 0 for t in v), "sample times"),
    "smoothing.amplitude": Key(float, 0.3, _positive, "kink amplitude A (admissible for A < (b - a) / 4)"),
    "output.dir": Key(str, "out", None, "output directory"),
    "output.plots": Key(bool, True, None, "write SVG plots"),
    "seed": Key(int, 0, _nonneg, "seed for random perturbation families"),
}


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, name + "."))
        else:
            out[name] = v
    return out


def _coerce(name: str, key: Key, v: Any) -> Any:
    kinds = key.kind if isinstance(key.kind, tuple) else (key.kind,)
    if isinstance(v, bool) and bool not in kinds:
        raise ConfigError(f"{name}: expected {kinds[0].__name__}, got a boolean")
    if float in kinds and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if not isinstance(v, kinds):
        raise ConfigError(f"{name}: expected {' or '.join(k.__name__ for k in kinds)}, got {type(v).__name__}")
    if key.check is not None and not key.check(v):
        raise ConfigError(f"{name}: value {v!r} out of range ({key.doc})")
    return v


class ExperimentConfig:
    """Validated flat mapping from dotted keys to values (defaults filled in)."""

    def __init__(self, values: dict[str, Any] | None = None):
        merged = {k: key.default for k, key in SCHEMA.items()}
        for name, v in (values or {}).items():
            if name not in SCHEMA:
                raise ConfigError(f"unknown configuration key {name!r}")
            merged[name] = _coerce(name, SCHEMA[name], v)
        if merged["grid.x_min"] >= merged["grid.x_max"]:
            raise ConfigError("grid.x_min: must be smaller than grid.x_max")
        if merged["oracle.bracket_low"] >= merged["oracle.bracket_high"]:
            raise ConfigError("oracle.bracket_low: must be smaller than oracle.bracket_high")
        self._values = merged

    def __getitem__(self, name: str) -> Any:
        return self._values[name]

    def with_overrides(self, **dotted) -> "ExperimentConfig":
        vals = {k: v for k, v in self._values.items()}
        vals.update({k.replace("__", "."): v for k, v in dotted.items()})
        return ExperimentConfig(vals)

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"could not parse configuration: {exc}") from None
    return ExperimentConfig(_flatten(data))


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from None
    return parse_config(text)
