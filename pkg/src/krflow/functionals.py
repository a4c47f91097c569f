"""Ricci potential, Hamiltonian, modified Ricci potential and energy functionals.

All normalizations are taken against the discrete reference volume
``V_h = sum(omega_0^n weights)``, which differs from the analytic volume
only by the exponentially small mass beyond the truncation.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq, minimize_scalar

from .errors import (
    MinimizationDidNotBracket,
    NonKahler,
    OutOfDomain,
    PathLeavesKahlerCone,
    QuadratureOverflow,
)
from .geometry import (
    GAUSS_NODES,
    GAUSS_WEIGHTS,
    Grid,
    ModelDescriptor,
    Profile,
    discrete_reference_ricci,
    divergence,
    gradient_norm,
    reduced_laplacian,
    reference_weights,
    softplus,
    volume_weights,
)


@dataclass(frozen=True, eq=False)
class PotentialReport:
    f: np.ndarray
    theta: np.ndarray
    u_mod: np.ndarray
    c_norm: float


@dataclass(frozen=True)
class EnergyReport:
    j_value: float
    j_g_value: float
    k_energy: float
    mt_gap: float


@lru_cache(maxsize=64)
def _reference_data(model: ModelDescriptor, grid: Grid):
    """(V_h, normalized f_{omega_0} at nodes, Hamiltonian constant c_theta)."""
    zero = Profile.zero(model, grid)
    mu0 = reference_weights(zero)
    vol = float(mu0.sum())
    if model.einstein_reference:
        f0 = np.zeros(grid.num_points)
    else:
        raw = discrete_reference_ricci(model, grid)
        f0 = raw + np.log(np.sum(mu0 * np.exp(-raw)) / vol)
    f0.flags.writeable = False
    lam = model.field_coeff
    if lam == 0.0:
        c_theta = 0.0
    else:
        log_avg = _log_cell_average(model, zero.cells.p_bounds, lam)
        c_theta = float(np.log(vol / np.sum(mu0 * np.exp(log_avg))))
    return vol, f0, c_theta


def reference_volume(model: ModelDescriptor, grid: Grid) -> float:
    return _reference_data(model, grid)[0]


def reference_ricci_potential(model: ModelDescriptor, grid: Grid) -> np.ndarray:
    return _reference_data(model, grid)[1]


def _log_cell_average(model, p_bounds, lam):
    """log of the w dp - average of exp(lam p) over each control cell."""
    pl, pr = p_bounds[:-1], p_bounds[1:]
    mid, half = 0.5 * (pr + pl), 0.5 * (pr - pl)
    num = np.zeros_like(mid)
    den = np.zeros_like(mid)
    for xi, gw in zip(GAUSS_NODES, GAUSS_WEIGHTS):
        pk = mid + half * xi
        wk = gw * model.w(pk)
        num += wk * np.exp(lam * half * xi)
        den += wk
    return lam * mid + np.log(num / den)


def ricci_potential(model: ModelDescriptor, prof: Profile) -> tuple[np.ndarray, float]:
    """Ricci potential f with int e^{-f} omega^n = V and the constant c_norm.

    With psi = phi - sup phi the potential is
    ``f = log(omega^n / omega_0^n) + psi + f_0 - c_norm`` and the constant
    ``c_norm = log(V / int e^{-psi - f_0} omega_0^n)`` is never positive.
    """
    vol, f0, _ = _reference_data(model, prof.grid)
    rel = prof.relative_values
    psi = rel - rel.max()
    mu0 = reference_weights(prof)
    with np.errstate(over="raise"):
        try:
            s = np.sum(mu0 * np.exp(-f0) * np.expm1(-psi)) / vol
        except FloatingPointError:
            raise QuadratureOverflow("e^{-psi} overflowed in the normalization integral") from None
    if not np.isfinite(s):
        raise QuadratureOverflow("normalization integral is not finite")
    c_norm = -float(np.log1p(s))
    f = prof.cells.log_ratio + psi + f0 - c_norm
    return f, c_norm


def hamiltonian(model: ModelDescriptor, prof: Profile) -> np.ndarray:
    """theta_{X,omega} = theta_{X,omega_0} + X phi, with X phi = lambda phi'.

    Node values are cell averages of ``exp(lambda u')`` against the weighted
    measure so that ``int e^theta omega^n = V`` is inherited from the base
    metric for every profile instead of being re-imposed.
    """
    lam = model.field_coeff
    if lam == 0.0:
        return np.zeros(prof.grid.num_points)
    _, _, c_theta = _reference_data(model, prof.grid)
    return c_theta + _log_cell_average(model, prof.cells.p_bounds, lam)


def hamiltonian_half(model: ModelDescriptor, prof: Profile) -> np.ndarray:
    """theta on the half nodes (used for weighted fluxes)."""
    lam = model.field_coeff
    if lam == 0.0:
        return np.zeros(prof.grid.num_points - 1)
    _, _, c_theta = _reference_data(model, prof.grid)
    return c_theta + lam * prof.cells.p_half


def modified_ricci_potential(model: ModelDescriptor, prof: Profile) -> PotentialReport:
    f, c = ricci_potential(model, prof)
    theta = hamiltonian(model, prof)
    return PotentialReport(f=f, theta=theta, u_mod=f + theta, c_norm=c)


def scalar_curvature(model: ModelDescriptor, prof: Profile) -> np.ndarray:
    """R = n - Delta f (trace of -Ric + omega = i ddbar f)."""
    f, _ = ricci_potential(model, prof)
    return model.dim_n - reduced_laplacian(model, prof, f)


def perelman_monitors(model: ModelDescriptor, prof: Profile, f=None) -> tuple[float, float, float]:
    if f is None:
        f, _ = ricci_potential(model, prof)
    return (
        float(np.max(np.abs(f))),
        float(np.max(gradient_norm(model, prof, f))),
        float(np.max(np.abs(reduced_laplacian(model, prof, f)))),
    )


# --- energy functionals -----------------------------------------------------


def _mixed_energy(model: ModelDescriptor, prof: Profile) -> float:
    """Monge-Ampere energy (1/V) int_0^1 int phi omega_{s phi}^n ds.

    The integrand is a polynomial of degree n in s, so an (n+1)-point
    Gauss-Legendre rule is exact.
    """
    vol = reference_volume(model, prof.grid)
    phi = prof.relative_values
    xs, ws = np.polynomial.legendre.leggauss(model.dim_n + 1)
    total = 0.0
    for xi, wi in zip(xs, ws):
        s = 0.5 * (xi + 1.0)
        total += 0.5 * wi * np.dot(phi, volume_weights(prof.scaled(s)))
    return float(total / vol)


def j_functional(model: ModelDescriptor, prof: Profile) -> float:
    """Aubin-Yau J(phi) = (1/V) int phi omega_0^n - MA energy(phi)."""
    vol = reference_volume(model, prof.grid)
    phi = prof.relative_values
    return float(np.dot(phi, reference_weights(prof)) / vol) - _mixed_energy(model, prof)


def gauge_act_potential(model: ModelDescriptor, prof: Profile, s: float, mass_tol: float = 1e-6) -> Profile:
    """Potential of the pullback of omega under the translation x -> x + s.

    ``(sigma_s . phi)(x) = phi(x + s) + u0(x + s) - u0(x)``; the additive
    constant of ``sigma_s . 0`` is fixed to zero, which makes the action a
    group action on the nose.
    """
    if s == 0.0:
        return prof
    grid = prof.grid
    x = grid.nodes
    a, b = model.moment_interval
    lo = x[0] + s
    if _lost_mass(model, grid, s) > mass_tol:
        raise OutOfDomain(f"translation s = {s:g} moves volume outside the truncated grid")
    # translate the slope data itself so the exponentially small tails keep
    # their relative precision; beyond the grid slopes decay like exp(-|x|)
    xh = grid.half_nodes
    v = prof.slopes
    spline = CubicSpline(xh, v, bc_type="natural")
    y = xh + s
    moved = spline(np.clip(y, xh[0], xh[-1]))
    below, above = y < xh[0], y > xh[-1]
    moved[below] = v[0] * np.exp(y[below] - xh[0])
    moved[above] = v[-1] * np.exp(xh[-1] - y[above])
    u0_shift = model.u0(x + s) - model.u0(x)
    slopes = moved + (b - a) * _softplus_shift_increments(x, s) / grid.h
    rel = np.concatenate([[0.0], np.cumsum(grid.h * v)])
    start = CubicSpline(x, rel, bc_type="natural")(np.clip(lo, x[0], x[-1]))
    if lo < x[0]:
        start = -v[0] * (1.0 - np.exp(lo - x[0]))
    out = Profile(model, grid, slopes, prof.offset + float(start) + float(u0_shift[0]))
    out.cells  # admissibility check
    return out


def _lost_mass(model, grid, s):
    """Reference volume fraction that a translation by s moves off the grid."""
    x0, x1 = grid.x_min, grid.x_max
    a, b = model.moment_interval
    lo, hi = min(x1, max(x0 + s, x0)), max(x0, min(x1 + s, x1))
    return 1.0 - (model.W(model.du0(hi)) - model.W(model.du0(lo))) / (model.W(b) - model.W(a))


def max_translation(model: ModelDescriptor, grid: Grid, s_max: float, mass_tol: float = 1e-6) -> float:
    """Largest |s| <= s_max such that both translations by +-s keep the volume on the grid."""
    def excess(t):
        return max(_lost_mass(model, grid, t), _lost_mass(model, grid, -t)) - mass_tol

    if excess(s_max) <= 0:
        return s_max
    if excess(0.0) > 0:
        return 0.0
    return float(brentq(excess, 0.0, s_max, xtol=1e-12)) * (1.0 - 1e-9)


def _softplus_shift_increments(x, s):
    """np.diff of softplus(x + s) - softplus(x) without cancellation in either tail."""
    left = softplus(x + s) - softplus(x)
    right = softplus(-x - s) - softplus(-x)  # equals left - s
    d = np.diff(left)
    pos = x[:-1] >= 0.0
    d[pos] = np.diff(right)[pos]
    return d


def j_g(model: ModelDescriptor, prof: Profile, s_max: float = 4.0, num_scan: int = 49, return_argmin: bool = False):
    """Infimum of J over the translation subgroup of the gauge group."""
    s_max = max_translation(model, prof.grid, s_max)
    ss = np.linspace(-s_max, s_max, num_scan)
    vals = np.array([j_functional(model, gauge_act_potential(model, prof, s)) for s in ss])
    k = int(np.argmin(vals))
    if k == 0 or k == num_scan - 1:
        raise MinimizationDidNotBracket(f"minimum of J along the orbit is at the scan edge s = {ss[k]:g}")
    res = minimize_scalar(
        lambda s: j_functional(model, gauge_act_potential(model, prof, s)),
        bounds=(ss[k - 1], ss[k + 1]),
        method="bounded",
        options={"xatol": 1e-9},
    )
    best_s, best = (float(res.x), float(res.fun)) if res.fun <= vals[k] else (float(ss[k]), float(vals[k]))
    return (best, best_s) if return_argmin else best


def k_energy_gradient(model: ModelDescriptor, prof: Profile) -> np.ndarray:
    """Nodal gradient of the modified K-energy.

    ``delta mu[xi] = dot(gradient, xi)`` discretizes
    ``(1/V) int xi (Delta u + X u) e^theta omega^n``, written as flux
    differences of ``e^theta w(u') u_mod'``.  The resulting 1-form is exactly
    closed on the discrete level.
    """
    vol = reference_volume(model, prof.grid)
    rep = modified_ricci_potential(model, prof)
    coeff = np.exp(hamiltonian_half(model, prof)) * model.w(prof.cells.p_half)
    return model.angular_volume * divergence(prof, coeff, rep.u_mod) / vol


def k_energy_integrand(model: ModelDescriptor, prof: Profile) -> np.ndarray:
    """R - n - div X - X(u) = -(Delta u + X u) at the nodes."""
    vol = reference_volume(model, prof.grid)
    mu = np.exp(hamiltonian(model, prof)) * volume_weights(prof)
    return -k_energy_gradient(model, prof) * vol / mu


def k_energy(model: ModelDescriptor, prof: Profile, path_nodes: int = 64, path: str = "linear") -> float:
    """Modified Mabuchi K-energy by Simpson quadrature along s -> s phi.

    ``path="quadratic"`` reparametrizes by s^2 (same segment, used to test
    quadrature independence of the parametrization).
    """
    if path_nodes % 2:
        raise ValueError("path_nodes must be even for Simpson's rule")
    phi = prof.relative_values
    if not np.any(phi):
        return 0.0
    ts = np.linspace(0.0, 1.0, path_nodes + 1)
    vals = np.empty_like(ts)
    for k, t in enumerate(ts):
        s, ds = (t, 1.0) if path == "linear" else (t * t, 2.0 * t)
        try:
            g = k_energy_gradient(model, prof.scaled(s))
        except NonKahler as exc:
            raise PathLeavesKahlerCone(f"path leaves the Kahler cone at s = {s:g}: {exc}") from None
        vals[k] = ds * np.dot(g, phi)
    w = np.ones_like(ts)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return float(np.dot(w, vals) / (3.0 * path_nodes))


def energy_report(model, prof, c_trial=1.0, d_trial=0.0, s_max=4.0) -> EnergyReport:
    mu = k_energy(model, prof)
    jv = j_functional(model, prof)
    jg = min(j_g(model, prof, s_max=s_max), jv)
    return EnergyReport(j_value=jv, j_g_value=jg, k_energy=mu, mt_gap=mu - c_trial * jg + d_trial)


def mt_scan(model, profiles, c_trial: float, d_trial: float, s_max: float = 4.0) -> dict:
    """Evaluate mu - C J_G + D over a family of profiles."""
    profiles = list(profiles)
    if not profiles:
        raise ValueError("mt_scan needs a non-empty family of profiles")
    rows = []
    for i, prof in enumerate(profiles):
        mu = k_energy(model, prof)
        jg = 0.0 if not np.any(prof.slopes) else min(j_g(model, prof, s_max=s_max), j_functional(model, prof))
        rows.append({"id": i, "k_energy": mu, "j_g": jg, "gap": mu - c_trial * jg + d_trial})
    return {"rows": rows, "min_gap": min(r["gap"] for r in rows), "C": c_trial, "D": d_trial}


def fit_mt_constants(k_energies, j_gs, method: str = "ratio", safety: float = 0.5) -> tuple[float, float]:
    """Constants (C, D) with mu >= C J_G - D on the given samples.

    ``method="regression"`` takes C as the least-squares slope of mu against
    J_G.  The default ``"ratio"`` takes ``safety`` times the smallest ratio
    mu / J_G over samples with J_G > 0, which keeps a margin on profiles not
    used in the fit (the mu-J_G curve of a flow line is not straight, so a
    chord fitted to some snapshots can cut below others).  Either way D is
    the smallest non-negative offset covering every sample.
    """
    mu = np.asarray(k_energies, dtype=float)
    jg = np.asarray(j_gs, dtype=float)
    pos = jg > 1e-14
    c = 1.0
    if method == "regression":
        if np.ptp(jg) > 0:
            c = float(np.polyfit(jg, mu, 1)[0])
    elif method == "ratio":
        if np.any(pos):
            c = safety * float(np.min(mu[pos] / jg[pos]))
    else:
        raise ValueError(f"unknown fit method {method!r}")
    if c <= 0:
        c = float(np.finfo(float).eps)
    d = float(np.max(c * jg - mu)) if mu.size else 0.0
    return c, max(d, 0.0)
