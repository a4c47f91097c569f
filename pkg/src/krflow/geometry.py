"""Symmetry-reduced Fano models and pointwise metric quantities on a 1D grid.

A model is a Calabi-ansatz (or toric) reduction in the log-fiber coordinate
``x``.  A metric is ``omega = i ddbar u(x)`` with ``u = u0 + phi``; the
moment coordinate ``p = u'(x)`` sweeps the moment interval ``(a, b)`` and the
volume form reduces to ``w(u') u'' dx`` times the orbit volume.

Discretization
--------------
``phi`` is stored through its cell slopes ``v[k] = (phi[k+1] - phi[k]) / h``
on the half nodes plus one additive offset.  Node ``i`` owns the control
cell between neighbouring half nodes (half cells at the two ends), and the
cell-integrated density is the exact increment ``W(p_right) - W(p_left)`` of
the antiderivative ``W`` of the weight.  The moment on an interior half node
is the difference quotient of the full potential ``u``, so the discrete
equations depend on ``u`` alone and commute with translations by ``h``.  At the truncation ends phi' follows
the exp(-|x|) asymptotics of smooth invariant functions.  All log-ratios are formed from the slope
increments with ``log1p`` so that the exponentially thin end cells keep full
relative precision.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable

import numpy as np
from scipy.special import expit

from .errors import NonKahler

GAUSS_NODES, GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(4)


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class ModelDescriptor:
    """A symmetry-reduced Fano model.

    The reference potential is ``u0(x) = a x + (b - a) log(1 + e^x)`` whose
    moment map ``u0'`` is an affine image of the logistic function; with the
    weights below it is the Fubini-Study metric on CP^n and the standard
    Calabi-ansatz metric on the first Hirzebruch surface.
    """

    name: str
    dim_n: int
    moment_interval: tuple[float, float]
    weight_coeffs: tuple[float, ...]
    angular_volume: float
    field_coeff: float = 0.0
    einstein_reference: bool = False

    def __post_init__(self):
        a, b = self.moment_interval
        if not a < b:
            raise ValueError("moment interval must satisfy a < b")
        if self.dim_n < 1:
            raise ValueError("dim_n must be a positive integer")
        p = a + (b - a) * 0.5 * (GAUSS_NODES + 1.0)
        if np.any(self.w(p) <= 0):
            raise ValueError("weight must be positive inside the moment interval")

    # weight polynomial -------------------------------------------------
    def w(self, p):
        return np.polynomial.polynomial.polyval(p, self.weight_coeffs)

    def W(self, p):
        coeffs = np.polynomial.polynomial.polyint(self.weight_coeffs)
        return np.polynomial.polynomial.polyval(p, coeffs)

    def mean_weight(self, pl, pr):
        """Average of w over [pl, pr] (as a symmetric polynomial, no division)."""
        out = np.zeros(np.broadcast(pl, pr).shape)
        for k, c in enumerate(self.weight_coeffs):
            s = sum(pr**j * pl ** (k - j) for j in range(k + 1))
            out = out + c * s / (k + 1)
        return out

    def mean_weight_change(self, pl0, dl, pr0, dr):
        """mean_weight(pl0 + dl, pr0 + dr) - mean_weight(pl0, pr0), accurately."""
        out = np.zeros(np.broadcast(pl0, pr0, dl, dr).shape)
        for k, c in enumerate(self.weight_coeffs):
            for j in range(k + 1):
                m = k - j
                term = _power_change(pr0, dr, j) * (pl0 + dl) ** m + pr0**j * _power_change(pl0, dl, m)
                out = out + c * term / (k + 1)
        return out

    @property
    def volume(self) -> float:
        """Analytic volume V = angular_volume * int_a^b w(p) dp."""
        a, b = self.moment_interval
        return float(self.angular_volume * (self.W(b) - self.W(a)))

    # reference potential ----------------------------------------------
    def u0(self, x):
        a, b = self.moment_interval
        return a * x + (b - a) * softplus(x)

    def du0(self, x):
        a, b = self.moment_interval
        return a + (b - a) * expit(x)

    def d2u0(self, x):
        a, b = self.moment_interval
        s = expit(x)
        return (b - a) * s * (1.0 - s)

    def f0_unnormalized(self, x):
        """log(w(u0') u0'') + u0 - n x, the Ricci potential of omega_0 up to a constant.

        This is the continuum expression; the discrete schemes use
        :func:`discrete_reference_ricci` instead.
        """
        if self.einstein_reference:
            return np.zeros_like(np.asarray(x, dtype=float))
        a, b = self.moment_interval
        n = self.dim_n
        return (
            np.log(b - a)
            + (1.0 + a - n) * x
            + (b - a - 2.0) * softplus(x)
            + np.log(self.w(self.du0(x)))
        )


def _power_change(base, delta, k):
    """(base + delta)**k - base**k computed as delta * sum(...)."""
    if k == 0:
        return np.zeros(np.broadcast(base, delta).shape)
    new = base + delta
    return delta * sum(new**i * base ** (k - 1 - i) for i in range(k))


def cp1(field_coeff: float = 0.0) -> ModelDescriptor:
    return cpn(1, field_coeff)


def cpn(n: int, field_coeff: float = 0.0) -> ModelDescriptor:
    """U(n)-invariant metrics on CP^n; w(p) = p^(n-1) on (0, n+1)."""
    coeffs = tuple([0.0] * (n - 1) + [1.0])
    ang = (2.0 * np.pi) ** n / float(np.prod(np.arange(1, n)))
    return ModelDescriptor(
        name="CP1" if n == 1 else "CPn_radial",
        dim_n=n,
        moment_interval=(0.0, float(n + 1)),
        weight_coeffs=coeffs,
        angular_volume=float(ang),
        field_coeff=field_coeff,
        einstein_reference=True,
    )


def hirzebruch1(field_coeff: float = 0.0) -> ModelDescriptor:
    """Calabi-ansatz metrics on the blow-up of CP^2 at a point, class c_1.

    The line at infinity sits at p = 1 and the exceptional curve at p = 3;
    the weight w(p) = 4 - p is the area of the orbit sphere over p.
    """
    return ModelDescriptor(
        name="Hirzebruch1",
        dim_n=2,
        moment_interval=(1.0, 3.0),
        weight_coeffs=(4.0, -1.0),
        angular_volume=4.0 * np.pi**2,
        field_coeff=field_coeff,
    )


MODEL_FACTORIES: dict[str, Callable[..., ModelDescriptor]] = {
    "CP1": cp1,
    "Hirzebruch1": hirzebruch1,
}


def make_model(name: str, dim_n: int | None = None, field_coeff: float = 0.0) -> ModelDescriptor:
    if name == "CPn_radial":
        return cpn(int(dim_n or 2), field_coeff)
    try:
        return MODEL_FACTORIES[name](field_coeff)
    except KeyError:
        raise ValueError(f"unknown model {name!r}") from None


@dataclass(frozen=True)
class Grid:
    x_min: float = -20.0
    x_max: float = 20.0
    num_points: int = 512

    def __post_init__(self):
        if int(self.num_points) < 16:
            raise ValueError("num_points must be >= 16")
        if not self.x_min < self.x_max:
            raise ValueError("x_min must be < x_max")

    @cached_property
    def nodes(self) -> np.ndarray:
        x = np.linspace(self.x_min, self.x_max, self.num_points)
        if self.x_min == -self.x_max:
            x = 0.5 * (x - x[::-1])  # exactly mirror-symmetric nodes
        x.flags.writeable = False
        return x

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / (self.num_points - 1)

    @cached_property
    def half_nodes(self) -> np.ndarray:
        x = self.nodes
        return 0.5 * (x[1:] + x[:-1])

    @cached_property
    def cell_bounds(self) -> np.ndarray:
        """Boundaries of the node control cells (N + 1 values)."""
        x = self.nodes
        return np.concatenate([[x[0]], self.half_nodes, [x[-1]]])

    @cached_property
    def masses(self) -> np.ndarray:
        m = np.full(self.num_points, self.h)
        m[0] = m[-1] = 0.5 * self.h
        return m

    def refine(self) -> "Grid":
        """Nested refinement sharing every node of this grid."""
        return Grid(self.x_min, self.x_max, 2 * self.num_points - 1)


@dataclass(frozen=True, eq=False)
class Profile:
    """Discretized invariant Kähler potential phi relative to u0.

    ``slopes`` holds the N - 1 cell slopes; ``offset`` is phi at the first node.
    """

    model: ModelDescriptor
    grid: Grid
    slopes: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        s = np.array(self.slopes, dtype=float)
        if s.shape != (self.grid.num_points - 1,):
            raise ValueError("slopes must have num_points - 1 entries")
        s.flags.writeable = False
        object.__setattr__(self, "slopes", s)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_values(cls, model, grid, values) -> "Profile":
        values = np.asarray(values, dtype=float)
        return cls(model, grid, np.diff(values) / grid.h, values[0])

    @classmethod
    def from_function(cls, model, grid, func) -> "Profile":
        return cls.from_values(model, grid, func(grid.nodes))

    @classmethod
    def zero(cls, model, grid) -> "Profile":
        return cls(model, grid, np.zeros(grid.num_points - 1))

    def with_slopes(self, slopes, offset=None) -> "Profile":
        return Profile(self.model, self.grid, slopes, self.offset if offset is None else offset)

    def shifted(self, c: float) -> "Profile":
        return Profile(self.model, self.grid, self.slopes, self.offset + c)

    def scaled(self, s: float) -> "Profile":
        return Profile(self.model, self.grid, s * self.slopes, s * self.offset)

    @cached_property
    def relative_values(self) -> np.ndarray:
        """phi - phi(x_0); free of the (possibly huge) additive offset."""
        return np.concatenate([[0.0], np.cumsum(self.grid.h * self.slopes)])

    @property
    def values(self) -> np.ndarray:
        return self.offset + self.relative_values

    @cached_property
    def background(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = self.grid.nodes
        m = self.model
        return m.u0(x), m.du0(x), m.d2u0(x)

    @cached_property
    def cells(self) -> "CellGeometry":
        return CellGeometry.build(self)


@dataclass(frozen=True, eq=False)
class CellGeometry:
    """Per-cell discrete quantities shared by all reduced operators."""

    p_bounds: np.ndarray  # moment coordinate at cell boundaries (N + 1)
    p0_bounds: np.ndarray
    dp0: np.ndarray  # cell increments of u0'
    dv: np.ndarray  # cell increments of phi'
    dW: np.ndarray  # W(p_right) - W(p_left)
    dW0: np.ndarray
    log_ratio: np.ndarray  # log(omega^n / omega_0^n) at nodes
    p_nodes: np.ndarray
    q_nodes: np.ndarray  # u'' at nodes (density / weight)

    @classmethod
    def build(cls, prof: Profile) -> "CellGeometry":
        model, grid = prof.model, prof.grid
        a, b = model.moment_interval
        p0b, dp0 = reference_moments(model, grid)
        delta = boundary_slopes(prof)
        pb = p0b + delta
        dv = np.diff(delta)
        dp = dp0 + dv
        bad = np.flatnonzero(dp <= 0)
        if bad.size:
            i = int(bad[0])
            raise NonKahler(f"u'' <= 0 at node {i} (x = {grid.nodes[i]:.6g})")
        if np.any(pb <= a) or np.any(pb >= b):
            raise NonKahler("u' left the open moment interval")
        wbar0 = model.mean_weight(p0b[:-1], p0b[1:])
        dwbar = model.mean_weight_change(p0b[:-1], delta[:-1], p0b[1:], delta[1:])
        wbar = wbar0 + dwbar
        if np.any(wbar <= 0):
            raise NonKahler("weight is non-positive on a cell")
        log_ratio = np.log1p(dv / dp0) + np.log1p(dwbar / wbar0)
        _, du0, _ = prof.background
        p_nodes = du0.copy()
        p_nodes[1:-1] += 0.5 * (prof.slopes[1:] + prof.slopes[:-1])
        p_nodes[[0, -1]] += delta[[0, -1]]
        dW = dp * wbar
        q_nodes = dW / grid.masses / model.w(p_nodes)
        return cls(pb, p0b, dp0, dv, dW, dp0 * wbar0, log_ratio, p_nodes, q_nodes)

    @property
    def p_half(self) -> np.ndarray:
        return self.p_bounds[1:-1]


@lru_cache(maxsize=64)
def reference_moments(model: ModelDescriptor, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Moments of u0 on the cell boundaries and their cell increments.

    Interior boundaries carry ``(u0[k+1] - u0[k]) / h``; the two outer ones
    carry ``u0'`` at the end nodes.  Closed forms in ``log1p``/``expm1`` keep
    the increments and the distances to the moment-interval ends accurate to
    relative precision in both tails.
    """
    a, b = model.moment_interval
    x = grid.nodes
    h = grid.h
    e = np.expm1(h)
    xl, xr = x[:-1], x[1:]
    left = a + (b - a) * np.log1p(expit(xl) * e) / h
    right = b - (b - a) * np.log1p(expit(-xr) * e) / h
    half = np.where(0.5 * (xl + xr) < 0.0, left, right)
    p0b = np.concatenate([[model.du0(x[0])], half, [model.du0(x[-1])]])
    dp0 = np.empty(grid.num_points)
    xi = x[1:-1]
    dp0[1:-1] = (b - a) * np.log1p(4.0 * np.sinh(0.5 * h) ** 2 * expit(xi) * expit(-xi)) / h

    def end_cell(sig):
        y = sig * e
        return (b - a) * ((np.log1p(y) - y) / h + sig * (e / h - 1.0))

    dp0[0] = end_cell(expit(x[0]))
    dp0[-1] = end_cell(expit(-x[-1]))
    for arr in (p0b, dp0):
        arr.flags.writeable = False
    return p0b, dp0


def boundary_slopes(prof: Profile) -> np.ndarray:
    """phi' on the N + 1 cell boundaries.

    Half nodes carry the stored slopes; at the truncation ends phi' follows
    the asymptotics of a smooth invariant function near the fixed divisors,
    phi' ~ exp(-|x|); the end value is recovered exactly for such a tail from
    the mean slope of the adjacent cell.
    """
    v = prof.slopes
    h = prof.grid.h
    decay = h / np.expm1(h)
    return np.concatenate([[decay * v[0]], v, [decay * v[-1]]])


def end_slopes_within(prof: Profile, tol: float) -> bool:
    """Asymptotic admissibility: |phi'| at both truncation ends is at most ``tol``."""
    ends = boundary_slopes(prof)[[0, -1]]
    return bool(np.all(np.abs(ends) <= tol))


def discrete_reference_ricci(model: ModelDescriptor, grid: Grid) -> np.ndarray:
    """Unnormalized Ricci potential of the discrete reference metric.

    Same formula as :meth:`ModelDescriptor.f0_unnormalized` with the density
    replaced by the cell density of omega_0; zero for Einstein references.
    """
    if model.einstein_reference:
        return np.zeros(grid.num_points)
    zero = Profile.zero(model, grid).cells
    x = grid.nodes
    raw = np.log(zero.dW0 / grid.masses) + model.u0(x) - model.dim_n * x
    # the end half cells are off-centre by h/4; use the continuum value there,
    # carrying over the neighbour's O(h^2) cell-averaging offset
    cont = model.f0_unnormalized(x[[0, 1, -2, -1]])
    raw[0] = cont[0] + (raw[1] - cont[1])
    raw[-1] = cont[3] + (raw[-2] - cont[2])
    return raw


def volume_weights(prof: Profile) -> np.ndarray:
    """Node weights of the measure omega^n (sum = total volume)."""
    return prof.model.angular_volume * prof.cells.dW


def reference_weights(prof_or_model, grid: Grid | None = None) -> np.ndarray:
    """Node weights of omega_0^n."""
    if isinstance(prof_or_model, Profile):
        return prof_or_model.model.angular_volume * prof_or_model.cells.dW0
    return prof_or_model.angular_volume * Profile.zero(prof_or_model, grid).cells.dW0


def discrete_volume(model: ModelDescriptor, grid: Grid) -> float:
    return float(np.sum(reference_weights(model, grid)))


def total_volume(prof: Profile) -> float:
    return float(np.sum(volume_weights(prof)))


def ma_density(model: ModelDescriptor, prof: Profile) -> np.ndarray:
    """Ratio omega^n / omega_0^n at the nodes; raises NonKahler off the cone."""
    _check_model(model, prof)
    return np.exp(prof.cells.log_ratio)


def reduced_laplacian(model: ModelDescriptor, prof: Profile, g) -> np.ndarray:
    """Finite-volume discretization of Delta_omega g = (w(u') g')' / (w(u') u'').

    The end cells stop at the truncation ends, so the flux through them is
    not zero for a general g; it is closed with the exponential-tail slope
    of :func:`boundary_slopes`.  Use :func:`divergence` for the strictly
    conservative (zero end flux) form.
    """
    _check_model(model, prof)
    g = np.asarray(g, dtype=float)
    div = divergence(prof, model.w(prof.cells.p_half), g)
    h = prof.grid.h
    decay = h / np.expm1(h)
    pb = prof.cells.p_bounds
    div[0] -= model.w(pb[0]) * decay * (g[1] - g[0]) / h
    div[-1] += model.w(pb[-1]) * decay * (g[-1] - g[-2]) / h
    return div / prof.cells.dW


def divergence(prof: Profile, coeff_half, g) -> np.ndarray:
    """Flux differences of coeff * g' (no division by cell volume)."""
    g = np.asarray(g, dtype=float)
    flux = coeff_half * np.diff(g) / prof.grid.h
    return np.concatenate([flux, [0.0]]) - np.concatenate([[0.0], flux])


def gradient_norm(model: ModelDescriptor, prof: Profile, g) -> np.ndarray:
    """|grad g|_omega = |g'| / sqrt(u'') at the nodes."""
    _check_model(model, prof)
    dg = np.gradient(np.asarray(g, dtype=float), prof.grid.h, edge_order=2)
    return np.abs(dg) / np.sqrt(prof.cells.q_nodes)


def _check_model(model, prof):
    if model is not prof.model and model != prof.model:
        raise ValueError("profile belongs to a different model")
