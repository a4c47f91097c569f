import json

import numpy as np
import pytest
from scipy.optimize import brentq

from krflow.errors import AsymptoticsInvalid, NoBracket
from krflow.functionals import modified_ricci_potential
from krflow.geometry import Grid, cp1, cpn, hirzebruch1
from krflow.soliton import (
    OrbitSolution,
    find_soliton,
    is_reflection_symmetric,
    ode_residual_4th_order,
    read_reference,
    shooting_mismatch,
    solve_soliton_ode,
    write_reference,
)


def test_cp1_soliton_is_the_reference_metric():
    m = cp1()
    assert is_reflection_symmetric(m)
    prof, mismatch = solve_soliton_ode(m, 0.0)
    assert abs(mismatch) <= 1e-10
    assert np.max(np.abs(prof.relative_values)) <= 1e-10
    sol = find_soliton(m)
    assert sol.lambda_star == 0.0
    assert sol.residual_sup <= 1e-10


def test_hirzebruch_mismatch_brackets_a_positive_root():
    m = hirzebruch1()
    assert not is_reflection_symmetric(m)
    assert shooting_mismatch(m, -0.5) * shooting_mismatch(m, 2.0) < 0
    sol = find_soliton(m, Grid(-20.0, 20.0, 512), residual_check=False)
    assert sol.lambda_star > 0
    assert abs(sol.mismatch) <= 1e-12
    assert np.all(np.diff(sol.moment) > 0)


def test_orbit_centred_at_mid_moment(hirzebruch_oracle_1024):
    orbit = OrbitSolution(hirzebruch1(), hirzebruch_oracle_1024.lambda_star, 20.0)
    assert float(orbit.moment(0.0)[0]) == pytest.approx(2.0, abs=1e-9)


def test_fourth_order_ode_residual(hirzebruch_oracle_1024):
    orbit = OrbitSolution(hirzebruch1(), hirzebruch_oracle_1024.lambda_star, 16.0)
    resid = ode_residual_4th_order(orbit, -15.0, 15.0, 0.01)
    assert np.max(np.abs(resid)) <= 1e-8


def test_lambda_stable_under_refinement(hirzebruch_oracle_1024, hirzebruch_oracle_2048):
    assert abs(hirzebruch_oracle_2048.lambda_star - hirzebruch_oracle_1024.lambda_star) <= 1e-8


def test_discrete_residual_is_second_order():
    m = hirzebruch1()
    res = []
    for n in (256, 512, 1024):
        sol = find_soliton(m, Grid(-20.0, 20.0, n))
        res.append(sol.residual_sup)
    assert np.log2(res[0] / res[1]) == pytest.approx(2.0, abs=0.2)
    assert np.log2(res[1] / res[2]) == pytest.approx(2.0, abs=0.2)


def test_reference_round_trip(tmp_path):
    m = hirzebruch1()
    sol = find_soliton(m, Grid(-20.0, 20.0, 256))
    header = write_reference(sol, tmp_path / "ref")
    assert json.loads((tmp_path / "ref.json").read_text()) == header
    back = read_reference(tmp_path / "ref", m)
    assert back.lambda_star == sol.lambda_star
    assert np.array_equal(back.profile.slopes, sol.profile.slopes)
    assert np.array_equal(back.profile.values, sol.profile.values)
    first = (tmp_path / "ref.csv").read_text().splitlines()
    assert first[0] == "x,profile_value,slope_right" and len(first) == 257


def test_bad_bracket_and_unsupported_model():
    with pytest.raises(NoBracket):
        find_soliton(hirzebruch1(), bracket=(1.0, 2.0))
    with pytest.raises(AsymptoticsInvalid):
        find_soliton(cpn(2))


def test_oracle_u_mod_agrees_with_functionals(hirzebruch_oracle_1024):
    sol = hirzebruch_oracle_1024
    direct = float(np.max(np.abs(modified_ricci_potential(sol.profile.model, sol.profile).u_mod)))
    assert sol.residual_sup == direct


def test_lambda_is_the_root_of_the_weighted_moment_condition(hirzebruch_oracle_1024):
    """The soliton field balances the barycenter: int (p - n) e^{lam p} w(p) dp = 0."""
    m = hirzebruch1()
    a, b = m.moment_interval
    nodes, weights = np.polynomial.legendre.leggauss(40)
    p = 0.5 * (a + b) + 0.5 * (b - a) * nodes

    def moment(lam):
        return float(np.dot(weights, (p - m.dim_n) * m.w(p) * np.exp(lam * p)))

    root = brentq(moment, 0.1, 1.5, xtol=1e-16)
    assert abs(hirzebruch_oracle_1024.lambda_star - root) <= 1e-12
