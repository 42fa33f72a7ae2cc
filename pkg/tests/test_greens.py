import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dhankel.core import ClosedForms, DomainError, make_params, params_from_beta
from dhankel.greens import (
    GridFunction,
    NonIntegrableSource,
    RadialGrid,
    TipFundamentalSystem,
    TipOperatorParams,
    cuspidal_decomposition,
    frobenius_system_tip,
    solve_cuspidal,
    solve_tip,
    tip_cone_system,
    tip_origin_system,
)

from conftest import fd_d1


# ---------------------------------------------------------------------------
# manufactured solutions
# ---------------------------------------------------------------------------


def cuspidal_manufactured(params, R):
    """Exact pair (V*, g) with g = (-d2 - (2/R) d + alpha/R^2 - 5 W^4) V*."""
    cf = ClosedForms(params)
    c = (params.beta + 3.0) / 2.0
    d = 1.0 + R**2
    V = R**c / d
    Vp = c * R ** (c - 1) / d - 2 * R ** (c + 1) / d**2
    Vpp = (
        c * (c - 1) * R ** (c - 2) / d
        - 2 * c * R**c / d**2
        - 2 * (c + 1) * R**c / d**2
        + 8 * R ** (c + 2) / d**3
    )
    g = -Vpp - 2 * Vp / R + (params.alpha / R**2 - 5 * cf.W4(R)) * V
    return V, g


def tip_manufactured(top, a, m=2):
    """Exact pair (W*, g) with W* = a^(m+2) (1-a)^2 and g = L_gamma W*."""
    W = a ** (m + 2) * (1 - a) ** 2
    Wp = (m + 2) * a ** (m + 1) * (1 - a) ** 2 - 2 * a ** (m + 2) * (1 - a)
    Wpp = (
        (m + 2) * (m + 1) * a**m * (1 - a) ** 2
        - 4 * (m + 2) * a ** (m + 1) * (1 - a)
        + 2 * a ** (m + 2)
    )
    return W, top.apply(a, W, Wp, Wpp)


GRID = RadialGrid.log_uniform(1e-3, 1e3, 512)


# ---------------------------------------------------------------------------
# cuspidal-region solver
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("beta", [0.8, 1.0, 1.5, 2.0, 2.5, 3.5])
def test_cuspidal_manufactured_solution(beta):
    params = params_from_beta(beta, nu=1.6)
    V_exact, g = cuspidal_manufactured(params, GRID.nodes)
    V = solve_cuspidal(params, GridFunction(GRID, g))
    rel = np.max(np.abs(V.values - V_exact)) / np.max(np.abs(V_exact))
    assert rel < 1e-4


def test_cuspidal_linearity():
    params = params_from_beta(1.5, nu=1.6)
    R = GRID.nodes
    g1 = GridFunction(GRID, np.exp(-((np.log(R)) ** 2)) * R ** 0.5)
    g2 = GridFunction(GRID, R ** 0.8 / (1 + R**3))
    v1 = solve_cuspidal(params, g1).values
    v2 = solve_cuspidal(params, g2).values
    v12 = solve_cuspidal(params, GridFunction(GRID, 2.0 * g1.values - 3.0 * g2.values))
    scale = np.max(np.abs(v12.values))
    assert np.max(np.abs(v12.values - (2 * v1 - 3 * v2))) < 1e-10 * scale


def test_cuspidal_zero_cauchy_data():
    # solution must vanish at the origin faster than the decaying zero mode
    params = params_from_beta(2.5, nu=1.6)
    _, g = cuspidal_manufactured(params, GRID.nodes)
    V = solve_cuspidal(params, GridFunction(GRID, g))
    R = GRID.nodes[:32]
    slope = np.polyfit(np.log(R), np.log(np.abs(V.values[:32])), 1)[0]
    assert slope == pytest.approx((params.beta + 3) / 2, abs=0.05)


def test_cuspidal_nonintegrable_source_raises():
    params = params_from_beta(1.5, nu=1.6)
    R = GRID.nodes
    g = GridFunction(GRID, R ** (-4.0) * np.exp(-R))
    with pytest.raises(NonIntegrableSource):
        solve_cuspidal(params, g)


def test_cuspidal_residual_metadata():
    params = params_from_beta(1.0, nu=1.6)
    _, g = cuspidal_manufactured(params, GRID.nodes)
    V = solve_cuspidal(params, GridFunction(GRID, g))
    assert V.meta["residual"] < 1e-2  # np.gradient check, coarse by design


def test_cuspidal_rebased_decomposition_matches():
    params = params_from_beta(1.5, nu=1.6)
    _, g = cuspidal_manufactured(params, GRID.nodes)
    gf = GridFunction(GRID, g)
    V_direct = solve_cuspidal(params, gf).values
    c1, c2, V_split = cuspidal_decomposition(params, gf, R0=10.0)
    scale = np.max(np.abs(V_direct))
    assert np.max(np.abs(V_split.values - V_direct)) < 1e-8 * scale
    assert np.isfinite(c1) and np.isfinite(c2)


def test_cuspidal_rebase_point_must_be_interior():
    params = params_from_beta(1.5, nu=1.6)
    _, g = cuspidal_manufactured(params, GRID.nodes)
    with pytest.raises(DomainError):
        cuspidal_decomposition(params, GridFunction(GRID, g), R0=1e5)


@settings(max_examples=20, deadline=None)
@given(
    a=st.floats(min_value=-3, max_value=3),
    b=st.floats(min_value=-3, max_value=3),
)
def test_cuspidal_linearity_property(a, b):
    params = params_from_beta(1.5, nu=1.6)
    R = GRID.nodes
    g1 = R**0.5 * np.exp(-R)
    g2 = R**1.5 / (1 + R**4)
    v1 = solve_cuspidal(params, GridFunction(GRID, g1)).values
    v2 = solve_cuspidal(params, GridFunction(GRID, g2)).values
    v = solve_cuspidal(params, GridFunction(GRID, a * g1 + b * g2)).values
    scale = np.max(np.abs(v)) + 1.0
    assert np.max(np.abs(v - (a * v1 + b * v2))) < 1e-10 * scale


# ---------------------------------------------------------------------------
# tip operator: Frobenius systems
# ---------------------------------------------------------------------------


def _series_residual_origin(top, psi, a):
    d2 = fd_d1(psi.eval_deriv, a, h=1e-5)
    return top.apply(a, psi.eval(a), psi.eval_deriv(a), d2)


@pytest.mark.parametrize("beta", [0.8, 1.5, 2.0, 2.5, 3.5])
def test_origin_series_solve_operator(beta):
    params = params_from_beta(beta, nu=1.6)
    top = TipOperatorParams(gamma=beta if beta <= 2 else 4 - beta, params=params)
    psi1, psi2 = tip_origin_system(top, n_terms=48)
    a = np.linspace(0.05, 0.3, 12)
    for psi in (psi1, psi2):
        res = _series_residual_origin(top, psi, a)
        scale = np.max(np.abs(psi.eval(a))) + 1.0
        assert np.max(np.abs(res)) < 1e-6 * scale


def test_origin_series_leading_exponents():
    params = params_from_beta(1.5, nu=1.6)
    top = TipOperatorParams(gamma=1.5, params=params)
    psi1, psi2 = tip_origin_system(top)
    a = np.array([1e-6, 2e-6])
    for psi, sigma in ((psi1, 0.25), (psi2, -1.25)):
        v = psi.eval(a)
        slope = np.log(np.abs(v[1] / v[0])) / np.log(2.0)
        assert slope == pytest.approx(sigma, abs=1e-6)


def test_origin_series_resonant_beta_two_has_log():
    params = params_from_beta(2.0, nu=1.6)
    top = TipOperatorParams(gamma=2.0, params=params)
    psi1, psi2 = tip_origin_system(top, n_terms=48)
    assert psi2.log_coupling != 0.0
    a = np.linspace(0.05, 0.3, 12)
    res = _series_residual_origin(top, psi2, a)
    scale = np.max(np.abs(psi2.eval(a)))
    assert np.max(np.abs(res)) < 1e-6 * scale


@pytest.mark.parametrize("gn", [2.4, 3.0, 5.0])
def test_cone_series_solve_operator(gn):
    params = params_from_beta(1.5, nu=1.6)
    top = TipOperatorParams(gamma=gn / params.nu, params=params)
    phi1, phi2 = tip_cone_system(top, n_terms=48)
    x = np.linspace(0.02, 0.25, 12)
    for phi in (phi1, phi2):
        def u(aa):
            return phi.eval(1.0 - aa)

        def du(aa):
            return -phi.eval_deriv(1.0 - aa)

        a = 1.0 - x
        d2 = fd_d1(du, a, h=1e-5)
        res = top.apply(a, u(a), du(a), d2)
        scale = np.max(np.abs(u(a))) + 1.0
        assert np.max(np.abs(res)) < 1e-6 * scale


def test_cone_series_resonant_integer_exponent_has_log():
    # gamma*nu = 3 puts the second exponent (gn+1)/2 = 2 on the integer lattice
    params = params_from_beta(1.5, nu=1.5)
    top = TipOperatorParams(gamma=2.0, params=params)
    assert top.gn == pytest.approx(3.0)
    phi1, phi2 = tip_cone_system(top, n_terms=48)
    assert phi1.log_coupling != 0.0
    assert phi2.log_coupling == 0.0


def test_frobenius_endpoint_dispatch():
    params = params_from_beta(1.5, nu=1.6)
    top = TipOperatorParams(gamma=1.5, params=params)
    p0 = frobenius_system_tip(top, 0)
    p1 = frobenius_system_tip(top, 1)
    assert p0[0].sigma == pytest.approx(0.25)
    assert p1[0].sigma == 0.0
    with pytest.raises(DomainError):
        frobenius_system_tip(top, 2)


# ---------------------------------------------------------------------------
# tip fundamental system on (0,1) and the solver
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("beta", [0.8, 1.5, 2.0, 3.5])
def test_tip_wronskian_closed_form(beta):
    params = params_from_beta(beta, nu=1.6)
    top = TipOperatorParams(gamma=beta if beta <= 2 else 4 - beta, params=params)
    system = TipFundamentalSystem(top)
    a = np.linspace(0.05, 0.95, 60)
    u1, du1, u2, du2 = system.psi(a)
    W = u1 * du2 - du1 * u2
    expect = -params.beta * (1 - a * a) ** ((top.gn - 1) / 2) / (a * a)
    assert np.max(np.abs(W - expect) / np.abs(expect)) < 1e-8
    # log-Wronskian slope in (1 - a^2) recovers the exponent
    y = np.log(np.abs(W) * a * a)
    x = np.log(1 - a * a)
    slope = np.polyfit(x, y, 1)[0]
    assert slope == pytest.approx((top.gn - 1) / 2, abs=1e-3)


@pytest.mark.parametrize("beta", [0.8, 1.5, 2.0, 2.5, 3.5])
def test_tip_manufactured_solution(beta):
    params = params_from_beta(beta, nu=1.6)
    top = TipOperatorParams(gamma=beta if beta <= 2 else 4 - beta, params=params)
    a = np.geomspace(1e-3, 0.995, 512)
    W_exact, g = tip_manufactured(top, a, m=2)
    W = solve_tip(top, a, g)
    rel = np.max(np.abs(W - W_exact)) / np.max(np.abs(W_exact))
    assert rel < 1e-4


def test_tip_linearity():
    params = params_from_beta(1.5, nu=1.6)
    top = TipOperatorParams(gamma=1.5, params=params)
    system = TipFundamentalSystem(top)
    a = np.geomspace(1e-3, 0.99, 400)
    _, g1 = tip_manufactured(top, a, m=2)
    _, g2 = tip_manufactured(top, a, m=4)
    w1 = solve_tip(top, a, g1, system=system)
    w2 = solve_tip(top, a, g2, system=system)
    w = solve_tip(top, a, 0.7 * g1 - 1.3 * g2, system=system)
    scale = np.max(np.abs(w))
    assert np.max(np.abs(w - (0.7 * w1 - 1.3 * w2))) < 1e-10 * scale


def test_tip_zero_cauchy_data_exponent():
    params = params_from_beta(1.5, nu=1.6)
    top = TipOperatorParams(gamma=1.5, params=params)
    a = np.geomspace(1e-3, 0.99, 400)
    _, g = tip_manufactured(top, a, m=2)
    W = solve_tip(top, a, g)
    head = slice(0, 24)
    slope = np.polyfit(np.log(a[head]), np.log(np.abs(W[head])), 1)[0]
    assert slope == pytest.approx(4.0, abs=0.02)


def test_tip_nodes_must_be_interior():
    params = params_from_beta(1.5, nu=1.6)
    top = TipOperatorParams(gamma=1.5, params=params)
    with pytest.raises(DomainError):
        solve_tip(top, np.linspace(0.0, 0.9, 64), np.ones(64))


def test_tip_gamma_must_be_positive():
    params = params_from_beta(1.5, nu=1.6)
    from dhankel.core import OutOfRange

    with pytest.raises(OutOfRange):
        TipOperatorParams(gamma=-1.0, params=params)
