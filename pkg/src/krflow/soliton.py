"""Shooting oracle for reduced Kähler-Ricci solitons.

In the log-fiber coordinate the soliton equation ``u_{X,omega} = 0`` for the
potential ``u(x)`` with moment ``p = u'`` becomes the autonomous system

    p'   = Phi / w(p),
    Phi' = (w(p) (n - p) - lam Phi) Phi / w(p),

where ``Phi = w(p) u''``.  Both ends are fixed points and are left along
their unstable directions with a three-term power series in the distance
``s`` to the end of the moment interval.  The orbits are integrated in the
variables ``(log s, log Phi)`` so that exponentially small tails keep full
relative precision, and they are matched where ``p = n``; the mismatch of
``Phi`` there is the shooting function of ``lam``.

This module deliberately avoids the flow discretization: it only shares the
model descriptor and the :class:`Profile` container.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp
from scipy.special import expit

from .errors import AsymptoticsInvalid, IntegrationBlowUp, NoBracket
from .geometry import GAUSS_NODES, GAUSS_WEIGHTS, Grid, ModelDescriptor, Profile

FORMAT_VERSION = 1
ODE_RTOL = 3e-14  # near the DOP853 floor; log s carries |log s| ~ 20
ODE_ATOL = 1e-15
SERIES_TOL = 1e-14


@dataclass(frozen=True)
class EndSeries:
    """Local expansion at one end of the moment interval."""

    end: float
    sign: int  # p = end + sign * s
    phi_coeffs: tuple[float, float, float]
    kappa: float  # s ~ exp(sign * kappa * x)
    d1: float  # x = sign * (log s / kappa + d1 s) + const

    def phi(self, s):
        c1, c2, c3 = self.phi_coeffs
        return s * (c1 + s * (c2 + s * c3))

    def x_of_s(self, s):
        return self.sign * (math.log(s) / self.kappa + self.d1 * s)


def _taylor(poly: np.polynomial.Polynomial, at: float, sign: int, order: int) -> list[float]:
    out, d = [], poly
    for k in range(order + 1):
        out.append(float(d(at)) * sign**k / math.factorial(k))
        d = d.deriv()
    return out


def end_series(model: ModelDescriptor, lam: float, sign: int) -> EndSeries:
    a, b = model.moment_interval
    e = a if sign > 0 else b
    wpoly = np.polynomial.Polynomial(model.weight_coeffs)
    gpoly = wpoly * np.polynomial.Polynomial([model.dim_n, -1.0])
    w0, w1 = _taylor(wpoly, e, sign, 1)
    if w0 <= 0:
        raise AsymptoticsInvalid("the orbit weight vanishes at the end; series start unsupported")
    g = _taylor(gpoly, e, sign, 3)
    # (k+1) c_{k+1} = sign * (g_k - lam c_k),  c_0 = 0
    c = [0.0]
    for k in range(4):
        c.append(sign * (g[k] - lam * c[k]) / (k + 1))
    c1, c2, c3, c4 = c[1:]
    if c1 <= 0:
        raise AsymptoticsInvalid("end is not a source of the reduced soliton system")
    kappa = c1 / w0
    d1 = (w1 - w0 * c2 / c1) / c1
    return EndSeries(e, sign, (c1, c2, c3), kappa, d1), abs(c4)


def _rhs(model, lam, end, sign):
    n = model.dim_n

    def f(x, y):
        s, Phi = math.exp(y[0]), math.exp(y[1])
        p = end + sign * s
        w = float(model.w(p))
        return [sign * Phi / (w * s), (w * (n - p) - lam * Phi) / w]

    return f


@dataclass
class _Branch:
    sol: object
    series: EndSeries
    x_match: float
    log_phi_match: float


def _branch(model, lam, sign, s_start):
    ser, c4 = end_series(model, lam, sign)
    if c4 * s_start**3 > SERIES_TOL * ser.phi_coeffs[0]:
        raise AsymptoticsInvalid(f"series truncation too large at s = {s_start:g}")
    x0 = ser.x_of_s(s_start)
    y0 = [math.log(s_start), math.log(ser.phi(s_start))]
    n_mid = model.dim_n
    dist = abs(n_mid - ser.end)

    def hit(x, y):
        return y[0] - math.log(dist)

    hit.terminal = True
    span = 60.0 + abs(x0)
    try:
        sol = solve_ivp(
            _rhs(model, lam, ser.end, sign),
            (x0, x0 + sign * span),
            y0,
            method="DOP853",
            rtol=ODE_RTOL,
            atol=ODE_ATOL,
            events=hit,
            dense_output=True,
        )
    except (OverflowError, ValueError) as exc:
        raise IntegrationBlowUp(f"orbit integration failed for lambda = {lam:g}: {exc}") from None
    if sol.status != 1 or not sol.t_events[0].size:
        raise IntegrationBlowUp(f"orbit from p = {ser.end:g} never reached p = n for lambda = {lam:g}")
    return _Branch(sol, ser, float(sol.t_events[0][0]), float(sol.y_events[0][0][1]))


def is_reflection_symmetric(model: ModelDescriptor) -> bool:
    """True when p -> a + b - p preserves the weight and fixes the match point p = n.

    The soliton system is then equivariant under (x, lam) -> (-x, -lam), so
    the mismatch is odd in lam and the soliton constant is exactly zero.
    """
    a, b = model.moment_interval
    if model.dim_n != 0.5 * (a + b):
        return False
    p = np.linspace(a, b, 9)
    return bool(np.allclose(model.w(p), model.w(a + b - p), rtol=1e-14, atol=0.0))


def shooting_mismatch(model: ModelDescriptor, lam: float) -> float:
    """Phi(left orbit) - Phi(right orbit) at p = n; strictly decreasing in lam."""
    left = _branch(model, lam, +1, 1e-10)
    right = _branch(model, lam, -1, 1e-10)
    return math.exp(left.log_phi_match) - math.exp(right.log_phi_match)


@dataclass(frozen=True)
class SolitonProfile:
    lambda_star: float
    profile: Profile
    residual_sup: float
    mismatch: float = 0.0
    moment: np.ndarray | None = None  # p = u' at the nodes


class OrbitSolution:
    """Glued, centred soliton orbit (p(0) = n), evaluable anywhere on a range."""

    def __init__(self, model: ModelDescriptor, lam: float, x_cover: float):
        self.model, self.lam = model, lam
        self.left = self._covering(+1, x_cover)
        self.right = self._covering(-1, x_cover)
        self.mismatch = math.exp(self.left.log_phi_match) - math.exp(self.right.log_phi_match)

    def _covering(self, sign, x_cover):
        s = 1e-10
        for _ in range(20):
            br = _branch(self.model, self.lam, sign, s)
            reach = sign * (br.x_match - br.sol.t[0])
            if reach >= x_cover + 1.0:
                return br
            s *= math.exp(-br.series.kappa * (x_cover + 2.0 - reach))
        raise AsymptoticsInvalid("could not start the series far enough out")

    def _state(self, x):
        """(branch sign, log s, log Phi) at centred coordinate(s) x."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        ls = np.empty_like(x)
        lp = np.empty_like(x)
        sgn = np.where(x <= 0.0, 1, -1)
        for sign, br in ((1, self.left), (-1, self.right)):
            sel = sgn == sign
            if np.any(sel):
                y = br.sol.sol(x[sel] + br.x_match)
                ls[sel], lp[sel] = y[0], y[1]
        return sgn, ls, lp

    def moment(self, x):
        sgn, ls, _ = self._state(x)
        a, b = self.model.moment_interval
        return np.where(sgn > 0, a + np.exp(ls), b - np.exp(ls))

    def log_phi(self, x):
        return self._state(x)[2]

    def potential_slope(self, x):
        """phi' = p - u0' with cancellation-free tails."""
        sgn, ls, _ = self._state(x)
        a, b = self.model.moment_interval
        x = np.atleast_1d(np.asarray(x, dtype=float))
        s = np.exp(ls)
        left = s - (b - a) * expit(x)
        right = (b - a) * expit(-x) - s
        return np.where(sgn > 0, left, right)


def solve_soliton_ode(model: ModelDescriptor, lambda_trial: float, grid: Grid | None = None):
    """Integrate the orbit for one trial lambda; return (Profile, mismatch)."""
    grid = grid or Grid()
    orbit = OrbitSolution(model, lambda_trial, max(abs(grid.x_min), abs(grid.x_max)))
    return sample_profile(orbit, grid), orbit.mismatch


def sample_profile(orbit: OrbitSolution, grid: Grid) -> Profile:
    """Profile whose slopes are exact cell means of phi' (Gauss-Legendre per cell)."""
    x = grid.nodes
    h = grid.h
    mid = 0.5 * (x[1:] + x[:-1])
    slopes = np.zeros(mid.size)
    for xi, gw in zip(GAUSS_NODES, GAUSS_WEIGHTS):
        slopes += 0.5 * gw * orbit.potential_slope(mid + 0.5 * h * xi)
    m = orbit.model
    x0 = x[0]
    p0 = float(orbit.moment(x0)[0])
    offset = float(-orbit.log_phi(x0)[0] - m.u0(x0) + m.dim_n * x0 - orbit.lam * p0)
    return Profile(m, grid, slopes, offset)


def find_soliton(model: ModelDescriptor, grid: Grid | None = None, bracket: tuple[float, float] = (-0.5, 2.0),
                 tol: float = 1e-12, residual_check: bool = True) -> SolitonProfile:
    """Bisection on the shooting mismatch, then one secant polish step."""
    grid = grid or Grid()
    lo, hi = bracket
    m_lo, m_hi = shooting_mismatch(model, lo), shooting_mismatch(model, hi)
    if is_reflection_symmetric(model) and lo < 0.0 < hi:
        lo = hi = 0.0
        m_lo = m_hi = shooting_mismatch(model, 0.0)
    elif m_lo == 0.0:
        hi, m_hi = lo, m_lo
    elif m_hi == 0.0:
        lo, m_lo = hi, m_hi
    elif m_lo * m_hi > 0:
        raise NoBracket(f"mismatch has the same sign at {lo:g} and {hi:g}")
    while hi - lo > 4e-16 * max(1.0, abs(lo)):
        mid = 0.5 * (lo + hi)
        m_mid = shooting_mismatch(model, mid)
        if abs(m_mid) <= tol:
            lo = hi = mid
            m_lo = m_hi = m_mid
            break
        if (m_mid > 0) == (m_lo > 0):
            lo, m_lo = mid, m_mid
        else:
            hi, m_hi = mid, m_mid
        if hi - lo < 1e-10:
            break
    if hi != lo and m_hi != m_lo:
        lam = lo - m_lo * (hi - lo) / (m_hi - m_lo)
    else:
        lam = lo
    orbit = OrbitSolution(model, lam, max(abs(grid.x_min), abs(grid.x_max)))
    prof = sample_profile(orbit, grid)
    prof = Profile(_with_field(model, lam), grid, prof.slopes, prof.offset)
    resid = float("nan")
    if residual_check:
        # independent cross-check through the discrete functional code path
        from .functionals import modified_ricci_potential

        resid = float(np.max(np.abs(modified_ricci_potential(prof.model, prof).u_mod)))
    return SolitonProfile(lam, prof, resid, orbit.mismatch, orbit.moment(grid.nodes))


def _with_field(model, lam):
    return replace(model, field_coeff=float(lam))


def ode_residual_4th_order(orbit: OrbitSolution, x_lo: float, x_hi: float, h: float = 0.01) -> np.ndarray:
    """Residual of (w(u') u'')' = (w(u') (n - u') - lam w(u') u'') u'' by 4th-order stencils.

    Only the moment ``p = u'`` is sampled from the orbit; both derivatives are
    recomputed by five-point differences, so this is an independent check of
    the integrated system.  On each half line the stencils act on the
    distance to the nearer end of the moment interval, which has the same
    derivatives as ``p`` up to sign but keeps relative precision in the tails.
    Returned residuals are relative to ``u''``.
    """
    m = orbit.model
    a, b = m.moment_interval
    xs = np.arange(x_lo - 4 * h, x_hi + 4 * h + 0.5 * h, h)
    sgn, ls, _ = orbit._state(xs)
    dist = np.exp(ls)
    p = np.where(sgn > 0, a + dist, b - dist)

    def d1(f):
        return (f[:-4] - 8 * f[1:-3] + 8 * f[3:-1] - f[4:]) / (12 * h)

    def residual(q, sign):
        upp = sign * d1(q)
        Phi = m.w(p[2:-2]) * upp
        lhs = d1(Phi)
        pc = p[4:-4]
        uc = upp[2:-2]
        return (lhs - (m.w(pc) * (m.dim_n - pc) - orbit.lam * Phi[2:-2]) * uc) / uc

    from_left = residual(np.where(sgn > 0, dist, (b - a) - dist), 1.0)
    from_right = residual(np.where(sgn < 0, dist, (b - a) - dist), -1.0)
    return np.where(xs[4:-4] <= 0.0, from_left, from_right)


# --- reference file ---------------------------------------------------------


def write_reference(sol: SolitonProfile, stem, tolerances: dict | None = None):
    """Write ``stem.csv`` (x, profile value) and ``stem.json`` (header)."""
    stem = Path(stem)
    prof = sol.profile
    header = {
        "format_version": FORMAT_VERSION,
        "model": prof.model.name,
        "lambda_star": float(sol.lambda_star),
        "N": int(prof.grid.num_points),
        "x_min": float(prof.grid.x_min),
        "x_max": float(prof.grid.x_max),
        "residual_sup": float(sol.residual_sup),
        "mismatch": float(sol.mismatch),
        "tolerances": tolerances or {"mismatch": 1e-12, "residual_sup": 1e-6},
        "csv": stem.name + ".csv",
    }
    vals = prof.values
    with open(stem.with_suffix(".csv"), "w", newline="\n") as fh:
        fh.write("x,profile_value,slope_right\n")
        for i, (x, v) in enumerate(zip(prof.grid.nodes, vals)):
            s = prof.slopes[i] if i < prof.slopes.size else 0.0
            fh.write(f"{float(x)!r},{float(v)!r},{float(s)!r}\n")
    with open(stem.with_suffix(".json"), "w", newline="\n") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return header


def read_reference(stem, model: ModelDescriptor) -> SolitonProfile:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported reference format {header.get('format_version')!r}")
    data = np.loadtxt(stem.with_suffix(".csv"), delimiter=",", skiprows=1)
    grid = Grid(header["x_min"], header["x_max"], header["N"])
    m = _with_field(model, header["lambda_star"])
    prof = Profile(m, grid, data[:-1, 2], float(data[0, 1]))
    return SolitonProfile(header["lambda_star"], prof, header["residual_sup"], header["mismatch"])
