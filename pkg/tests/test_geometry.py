import numpy as np
import pytest

from krflow.errors import NonKahler
from krflow.geometry import (
    Grid,
    Profile,
    cp1,
    cpn,
    discrete_volume,
    end_slopes_within,
    gradient_norm,
    hirzebruch1,
    ma_density,
    make_model,
    reduced_laplacian,
    total_volume,
    volume_weights,
)

MODELS = [cp1(), cpn(2), cpn(3), hirzebruch1()]


def smooth_invariant(model, grid, coeffs):
    """A polynomial in the reference moment coordinate: smooth on the compact manifold."""
    return np.polynomial.Polynomial(coeffs)(model.du0(grid.nodes))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_profile(model, grid, rng, scale=0.05):
    coeffs = rng.normal(size=4) * scale
    return Profile.from_values(model, grid, smooth_invariant(model, grid, coeffs))


@pytest.mark.parametrize("model", MODELS, ids=lambda m: f"{m.name}{m.dim_n}")
def test_volume_of_reference_metric(model):
    assert model.volume == pytest.approx(model.angular_volume * (model.W(model.moment_interval[1])
                                                                 - model.W(model.moment_interval[0])))
    assert discrete_volume(model, Grid()) == pytest.approx(model.volume, rel=1e-8)


def test_known_volumes():
    assert cp1().volume == pytest.approx(4 * np.pi)
    assert hirzebruch1().volume == pytest.approx(16 * np.pi**2)


@pytest.mark.parametrize("model", MODELS, ids=lambda m: f"{m.name}{m.dim_n}")
def test_zero_profile_has_unit_density(model):
    assert np.array_equal(ma_density(model, Profile.zero(model, Grid())), np.ones(512))


@pytest.mark.parametrize("model", MODELS, ids=lambda m: f"{m.name}{m.dim_n}")
def test_density_integrates_to_volume(model, rng):
    grid = Grid(-30.0, 30.0, 600)
    prof = random_profile(model, grid, rng)
    assert total_volume(prof) == pytest.approx(model.volume, rel=1e-8)
    # same integral through the density and the reference weights
    ref = volume_weights(Profile.zero(model, grid))
    assert np.dot(ma_density(model, prof), ref) == pytest.approx(model.volume, rel=1e-8)


def test_density_linearization_cp1():
    """For w = 1 the density ratio is u''/u0''; phi = eps tanh gives 1 - 2 eps sech^2 tanh / u0''."""
    m = cp1()
    g = Grid(-10.0, 10.0, 2001)
    x = g.nodes
    expected = -2 * np.tanh(x) / np.cosh(x) ** 2 / m.d2u0(x)
    errs = []
    for eps in (1e-3, 5e-4):
        ratio = ma_density(m, Profile.from_values(m, g, eps * np.tanh(x)))
        errs.append(np.max(np.abs((ratio - 1) / eps - expected)[1:-1]))
    # residual is O(h^2) + O(eps); both small
    assert max(errs) < 2e-3


def test_non_convex_profile_rejected():
    m = cp1()
    g = Grid(-10.0, 10.0, 101)
    with pytest.raises(NonKahler):
        Profile.from_values(m, g, -3.0 * np.exp(-g.nodes**2)).cells


def test_grid_validation_and_refinement():
    with pytest.raises(ValueError):
        Grid(num_points=8)
    g = Grid(-5.0, 5.0, 33)
    fine = g.refine()
    assert np.allclose(fine.nodes[::2], g.nodes, atol=1e-15)
    assert np.array_equal(g.nodes, -g.nodes[::-1])


def test_make_model_names():
    assert make_model("CP1").dim_n == 1
    assert make_model("CPn_radial", 3).moment_interval == (0.0, 4.0)
    with pytest.raises(ValueError):
        make_model("K3")


@pytest.mark.parametrize("model", MODELS, ids=lambda m: f"{m.name}{m.dim_n}")
def test_laplacian_constant_and_divergence_theorem(model, rng):
    # wide window: the flux through the truncation ends is ~exp(-30)
    grid = Grid(-30.0, 30.0, 900)
    prof = random_profile(model, grid, rng)
    assert np.max(np.abs(reduced_laplacian(model, prof, np.full(900, 3.7)))) == 0.0
    gfun = smooth_invariant(model, grid, rng.normal(size=5))
    lap = reduced_laplacian(model, prof, gfun)
    integral = np.dot(lap, volume_weights(prof))
    assert abs(integral) <= 1e-8 * np.dot(np.abs(lap), volume_weights(prof))


def test_laplacian_of_reference_moment_on_cp1():
    """u0' - 1 is a first eigenfunction: Delta u0' = -(u0' - 1) for the Kähler Laplacian."""
    m = cp1()
    g = Grid(-20.0, 20.0, 1024)
    p0 = m.du0(g.nodes)
    lap = reduced_laplacian(m, Profile.zero(m, g), p0)
    assert np.max(np.abs(lap + (p0 - 1))) < 2e-4


def test_laplacian_refinement_order():
    m = hirzebruch1()
    grids = [Grid(-16.0, 16.0, 129)]
    for _ in range(2):
        grids.append(grids[-1].refine())
    vals = []
    for j, g in enumerate(grids):
        prof = Profile.from_function(m, g, lambda x: 0.2 * np.exp(-x**2 / 4))
        vals.append(reduced_laplacian(m, prof, np.cos(m.du0(g.nodes)))[:: 2**j])
    e1, e2 = np.max(np.abs(vals[0] - vals[1])), np.max(np.abs(vals[1] - vals[2]))
    assert np.log2(e1 / e2) >= 1.9


def test_gradient_norm_identities(rng):
    m = hirzebruch1()
    coeffs = rng.normal(size=4) * 0.05
    errs = []
    for n in (1024, 2047):
        g = Grid(-20.0, 20.0, n)
        prof = Profile.from_values(m, g, smooth_invariant(m, g, coeffs))
        assert np.max(gradient_norm(m, prof, np.ones(n))) < 1e-9
        # |grad u'|^2 = u'': checked against the density-based u'' at the nodes
        gn = gradient_norm(m, prof, prof.cells.p_nodes)
        inner = np.abs(g.nodes) <= 15.0
        errs.append(np.max(np.abs(gn[inner] ** 2 / prof.cells.q_nodes[inner] - 1)))
        mono = gradient_norm(m, prof, g.nodes.copy())
        assert np.all(mono[1:-1] > 0)
    assert errs[1] < 1e-3
    assert errs[0] / errs[1] > 3.5


def test_asymptotic_admissibility():
    m = cp1()
    g = Grid(-15.0, 15.0, 300)
    assert end_slopes_within(Profile.zero(m, g), 0.0)
    assert end_slopes_within(Profile.from_function(m, g, lambda x: 0.3 * np.exp(-x**2)), 1e-12)
    # a tail decaying like exp(-|x| / 4) is still far from flat at |x| = 15
    assert not end_slopes_within(Profile.from_function(m, g, lambda x: 0.3 / np.cosh(x / 4)), 1e-4)
