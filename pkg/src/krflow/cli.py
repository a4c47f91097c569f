"""Command-line entry point: ``krflow {run,soliton-oracle,mt-scan,smoothing-test}``.

Exit status: 0 when every summary flag holds, 1 for usage or configuration
errors, 2 for numerical failures, 3 when a run finished but a flag failed.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import flow
from .config import ExperimentConfig, load_config
from .errors import ConfigError, KRFlowError, NonKahler, NonPositiveValues
from .functionals import fit_mt_constants, mt_scan
from .geometry import Grid, ModelDescriptor, Profile, end_slopes_within, make_model
from .plots import write_chart
from .soliton import find_soliton, write_reference

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_FLAG = 0, 1, 2, 3
MT_TOL = 1e-8
SMOOTHING_INITIAL_SPREAD = 50.0
SMOOTHING_LATER_SPREAD = 10.0


# --- building blocks from a config -----------------------------------------


def build_grid(cfg: ExperimentConfig) -> Grid:
    return Grid(cfg["grid.x_min"], cfg["grid.x_max"], cfg["grid.N"])


def build_model(cfg: ExperimentConfig, grid: Grid) -> ModelDescriptor:
    """Model with its field coefficient; ``"oracle"`` asks the shooting solver."""
    base = make_model(cfg["model.name"], cfg["model.dim_n"])
    lam = cfg["model.field_coeff"]
    if lam == "oracle":
        bracket = (cfg["oracle.bracket_low"], cfg["oracle.bracket_high"])
        lam = find_soliton(base, grid, bracket, residual_check=False).lambda_star
    return make_model(cfg["model.name"], cfg["model.dim_n"], float(lam))


def initial_profile(cfg: ExperimentConfig, model: ModelDescriptor, grid: Grid) -> Profile:
    family = cfg["initial.family"]
    amp, width, centre = cfg["initial.amplitude"], cfg["initial.width"], cfg["initial.center"]
    try:
        if family == "zero":
            prof = Profile.zero(model, grid)
        elif family == "bump":
            prof = Profile.from_function(model, grid, lambda x: amp * np.exp(-((x - centre) / width) ** 2))
        elif family == "kink":
            prof = flow.kink_profile(model, grid, width, amp)
        else:
            rng = np.random.default_rng(cfg["seed"])
            k = cfg["initial.count"]
            centres = rng.uniform(-3.0, 3.0, k)
            widths = rng.uniform(1.0, 3.0, k)
            amps = rng.uniform(-1.0, 1.0, k) * amp / k

            def phi(x):
                return sum(a * np.exp(-(((x - c) / s) ** 2)) for a, c, s in zip(amps, centres, widths))

            prof = Profile.from_function(model, grid, phi)
        prof.cells
    except NonKahler as exc:
        raise ConfigError(f"initial.amplitude: initial profile is not admissible ({exc})") from None
    if not end_slopes_within(prof, cfg["initial.asymptotic_tol"]):
        raise ConfigError("initial.asymptotic_tol: the initial profile is not asymptotically flat on this grid")
    return prof


def flow_config(cfg: ExperimentConfig) -> flow.FlowConfig:
    return flow.FlowConfig(
        scheme=cfg["stepper.scheme"],
        rtol=cfg["stepper.rtol"],
        atol=cfg["stepper.atol"],
        dt_init=cfg["stepper.dt_init"],
        dt_max=cfg["stepper.dt_max"],
        dt_min=cfg["stepper.dt_min"],
        frame=cfg["stepper.frame"],
        sample_every=cfg["diagnostics.sample_every"],
        holder_alpha=cfg["diagnostics.holder_alpha"],
        monotonicity_tol=cfg["diagnostics.monotonicity_tol"],
        k_energy_path_nodes=cfg["diagnostics.k_energy_nodes"],
    )


def fit_window(cfg: ExperimentConfig) -> tuple[float, float]:
    t_end = cfg["run.t_end"]
    lo = cfg["diagnostics.fit_start"]
    hi = cfg["diagnostics.fit_end"]
    return (t_end / 2 if lo < 0 else lo, t_end if hi < 0 else hi)


# --- output helpers ---------------------------------------------------------


def _json_float(v):
    v = float(v)
    return v if math.isfinite(v) else None


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_json(path: Path, data: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _exit_for(flags: dict) -> int:
    return EXIT_OK if all(flags.values()) else EXIT_FLAG


# --- subcommands ------------------------------------------------------------


def _rate_summary(records, window):
    try:
        fit = flow.rate_fit(records, "u_mod_sup", window)
    except (ValueError, NonPositiveValues) as exc:
        return None, str(exc)
    return fit, None


def cmd_run(cfg: ExperimentConfig) -> int:
    grid = build_grid(cfg)
    model = build_model(cfg, grid)
    prof0 = initial_profile(cfg, model, grid)
    res = flow.run(model, prof0, cfg["run.t_end"], flow_config(cfg), keep_states=False)
    out = _prepare_out(cfg)
    write_csv(out / "diagnostics.csv", flow.DIAGNOSTIC_FIELDS, (r.as_row() for r in res.records))

    window = flow.decay_window(res.records) if cfg["diagnostics.fit_mode"] == "above_floor" else fit_window(cfg)
    fit, fit_error = _rate_summary(res.records, window)
    final = res.records[-1]
    flags = {
        "k_energy_monotone": bool(res.monotone),
        "c_norm_nonpositive": bool(res.flags["c_norm_nonpositive"]),
        "converged": bool(fit is not None and fit.decaying and final.u_mod_sup <= cfg["diagnostics.u_mod_tol"]),
    }
    summary = {
        "model": model.name,
        "field_coeff": model.field_coeff,
        "N": grid.num_points,
        "t_end": final.t,
        "samples": len(res.records),
        "max_k_energy_increase": _json_float(res.max_k_energy_increase),
        "final": {k: _json_float(v) for k, v in zip(flow.DIAGNOSTIC_FIELDS, final.as_row())},
        "rate_fit": None if fit is None else {
            "key": "u_mod_sup",
            "rate": fit.rate,
            "amplitude": fit.amplitude,
            "r_squared": fit.r_squared,
            "window": list(fit.window),
            "decaying": fit.decaying,
        },
        "rate_fit_error": fit_error,
        "flags": flags,
    }
    write_json(out / "summary.json", summary)
    if cfg["output.plots"]:
        ts = [r.t for r in res.records]
        for key in flow.DIAGNOSTIC_FIELDS[1:]:
            write_chart(out / f"{key}.svg", ts, [getattr(r, key) for r in res.records], key, ylabel=key)
    return _exit_for(flags)


def cmd_soliton_oracle(cfg: ExperimentConfig) -> int:
    grid = build_grid(cfg)
    base = make_model(cfg["model.name"], cfg["model.dim_n"])
    bracket = (cfg["oracle.bracket_low"], cfg["oracle.bracket_high"])
    sol = find_soliton(base, grid, bracket)
    out = _prepare_out(cfg)
    header = write_reference(sol, out / "soliton_reference")
    write_json(out / "summary.json", {"reference": header, "flags": {}})
    if cfg["output.plots"]:
        write_chart(out / "soliton_profile.svg", grid.nodes, sol.profile.relative_values, "soliton profile",
                    xlabel="x", ylabel="phi - phi(x_min)", log_y=False)
        write_chart(out / "soliton_moment.svg", grid.nodes, sol.moment, "soliton moment map",
                    xlabel="x", ylabel="u'", log_y=False)
    return EXIT_OK


def mt_family(cfg: ExperimentConfig, model: ModelDescriptor, grid: Grid) -> list[Profile]:
    """Flow snapshots from the configured initial profile (the initial one alone if run.t_end is tiny)."""
    prof0 = initial_profile(cfg, model, grid)
    res = flow.run(model, prof0, cfg["run.t_end"], flow_config(cfg), keep_states=True)
    return [s.prof for s in res.states]


def split_holdout(n: int, every: int) -> tuple[list[int], list[int]]:
    held = [i for i in range(n) if i % every == every - 1]
    train = [i for i in range(n) if i % every != every - 1]
    return train, held


def run_mt_scan(cfg: ExperimentConfig, model: ModelDescriptor, profiles: list[Profile]) -> dict:
    """Fit (C, D) on the training snapshots unless fixed in the config; evaluate all."""
    if not profiles:
        raise ConfigError("mt: the profile family is empty")
    s_max = cfg["mt.s_max"]
    train, held = split_holdout(len(profiles), cfg["mt.holdout_every"])
    if not train:
        train, held = list(range(len(profiles))), []
    c, d = cfg["mt.c_trial"], cfg["mt.d_trial"]
    if c < 0 or d < 0:
        first = mt_scan(model, [profiles[i] for i in train], 1.0, 0.0, s_max)
        fc, fd = fit_mt_constants([r["k_energy"] for r in first["rows"]], [r["j_g"] for r in first["rows"]],
                                  method=cfg["mt.fit_method"])
        c = fc if c < 0 else c
        d = fd if d < 0 else d
    scan = mt_scan(model, profiles, c, d, s_max)
    held_set = set(held)
    for r in scan["rows"]:
        r["held_out"] = r["id"] in held_set
    held_gaps = [r["gap"] for r in scan["rows"] if r["held_out"]]
    scan["min_gap_held_out"] = min(held_gaps) if held_gaps else None
    return scan


def cmd_mt_scan(cfg: ExperimentConfig) -> int:
    grid = build_grid(cfg)
    model = build_model(cfg, grid)
    scan = run_mt_scan(cfg, model, mt_family(cfg, model, grid))
    out = _prepare_out(cfg)
    write_csv(out / "mt_scan.csv", ("profile_id", "mu", "j_g", "gap", "held_out"),
              ([r["id"], r["k_energy"], r["j_g"], r["gap"], int(r["held_out"])] for r in scan["rows"]))
    check = scan["min_gap_held_out"] if scan["min_gap_held_out"] is not None else scan["min_gap"]
    flags = {"min_gap_nonnegative": bool(check >= -MT_TOL)}
    write_json(out / "summary.json", {
        "C": scan["C"],
        "D": scan["D"],
        "min_gap": scan["min_gap"],
        "min_gap_held_out": scan["min_gap_held_out"],
        "profiles": len(scan["rows"]),
        "flags": flags,
    })
    if cfg["output.plots"]:
        ids = [r["id"] for r in scan["rows"]]
        write_chart(out / "mt_gap.svg", ids, [r["gap"] for r in scan["rows"]], "Moser-Trudinger gap",
                    xlabel="profile id", ylabel="gap", log_y=False)
    return _exit_for(flags)


def cmd_smoothing_test(cfg: ExperimentConfig) -> int:
    grid = build_grid(cfg)
    model = build_model(cfg, grid)
    widths = [float(w) for w in cfg["smoothing.widths"]]
    times = sorted(float(t) for t in cfg["smoothing.times"])
    res = flow.smoothing_experiment(model, grid, widths, times, cfg["smoothing.amplitude"], flow_config(cfg))
    out = _prepare_out(cfg)
    write_csv(out / "smoothing.csv", ("width", "t", "c2_norm"),
              ([w, t, res.norms[i, k]] for i, w in enumerate(widths) for k, t in enumerate(times)))
    spreads = {repr(t): res.spread(k) for k, t in enumerate(times)}
    flags = {}
    if times[0] == 0.0:
        flags["initial_spread_ge_50"] = bool(res.spread(0) >= SMOOTHING_INITIAL_SPREAD)
    later = [k for k, t in enumerate(times) if t > 0]
    if later:
        flags["later_spread_le_10"] = bool(all(res.spread(k) <= SMOOTHING_LATER_SPREAD for k in later))
    write_json(out / "summary.json", {"widths": widths, "times": times, "spreads": spreads,
                                      "norms": res.norms.tolist(), "flags": flags})
    if cfg["output.plots"]:
        for i, w in enumerate(widths):
            write_chart(out / f"smoothing_width_{i}.svg", times, res.norms[i], f"C2 norm, kink width {w:g}",
                        ylabel="C2 norm")
    return _exit_for(flags)


COMMANDS = {
    "run": cmd_run,
    "soliton-oracle": cmd_soliton_oracle,
    "mt-scan": cmd_mt_scan,
    "smoothing-test": cmd_smoothing_test,
}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="krflow", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML file of dotted keys (defaults are used without one)")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--plots", choices=("on", "off"), help="write SVG plots (overrides output.plots)")
        p.add_argument("--seed", type=int, help="seed for random perturbation families (overrides seed)")
    return ap


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.out is not None:
        over["output.dir"] = args.out
    if args.plots is not None:
        over["output.plots"] = args.plots == "on"
    if args.seed is not None:
        over["seed"] = args.seed
    return ExperimentConfig({**cfg.as_dict(), **over}) if over else cfg


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"krflow: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KRFlowError as exc:
        print(f"krflow: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
