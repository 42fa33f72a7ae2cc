"""Scattering pipeline for the linearized half-line operator.

For L = -d^2/dR^2 + alpha/R^2 - 5 W^4 (the reduced radial operator acting
on u = R v) this module builds:

* the regular solution ``phi(R, xi)`` (power series in R^2 xi near the
  origin, ODE continuation outward),
* the outgoing Jost solution ``psi+(R, xi) ~ xi^{-1/4} e^{i sqrt(xi) R}``,
* the connection coefficient ``a(xi) = -(i/2) W(phi, psi+)`` and the
  spectral density ``rho = 1/(pi |a|^2)``,
* the discrete spectrum (one negative eigenvalue; a zero-energy
  eigenfunction when the decaying zero mode is square integrable),
* the generalized-eigenfunction transform pair diagonalizing L.

A ``free=True`` switch disables the -5 W^4 well everywhere, reducing the
problem to the pure inverse-square potential whose modes are Bessel
functions; that closed-form case is the oracle for the numerics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson, solve_ivp
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq
from scipy.special import gamma as gamma_fn
from scipy.special import hankel1, jv, kv

from .core import ClosedForms, DomainError, PotentialParams
from .greens import GridFunction, RadialGrid, _cumulative_from_zero

__all__ = [
    "ConvergenceBudgetExceeded",
    "IterationDiverged",
    "MatchingFailure",
    "NoEigenvalueFound",
    "TailNotResolved",
    "SpectralMeasure",
    "SpectralVector",
    "DELTA_MATCH",
    "UNITARY_DENSITY_FACTOR",
    "phi_series",
    "phi_layer",
    "regular_mode",
    "jost_solution",
    "free_jost_closed_form",
    "free_regular_closed_form",
    "free_connection_closed_form",
    "connection_coefficient",
    "spectral_density",
    "discrete_spectrum",
    "mode_matrix",
    "forward_transform",
    "inverse_transform",
]


class ConvergenceBudgetExceeded(RuntimeError):
    pass


class IterationDiverged(RuntimeError):
    pass


class MatchingFailure(RuntimeError):
    pass


class NoEigenvalueFound(RuntimeError):
    pass


class TailNotResolved(RuntimeError):
    pass


DELTA_MATCH = 0.4  # series/continuation matching radius in sqrt(R^2 xi)

# Completeness weight of the continuous channel relative to the reported
# density rho = 1/(pi |a|^2).  With the conventions used here
# (phi ~ phi0 at the origin, psi+ ~ xi^{-1/4} e^{i sqrt(xi) R}, and
# a = -(i/2)(phi psi+' - phi' psi+)), the half-line completeness relation
# gives the weight 1/(4 pi |a|^2); the factor is pinned by the free-case
# (pure inverse-square) Hankel-transform oracle in the test suite.
UNITARY_DENSITY_FACTOR = 0.25


# ---------------------------------------------------------------------------
# problem description (full vs. free)
# ---------------------------------------------------------------------------


class _Problem:
    """Potential and zero-mode pair entering every construction."""

    def __init__(self, params: PotentialParams, free: bool = False):
        self.params = params
        self.free = bool(free)
        self.cf = ClosedForms(params)
        self.beta = params.beta

    def V(self, R):
        R = np.asarray(R, dtype=float)
        v = self.params.alpha / R**2
        if not self.free:
            v = v - 5.0 * self.cf.W4(R)
        return v

    # zero-energy fundamental pair with phi' theta - phi theta' = +1
    def phi0(self, R):
        if self.free:
            return np.asarray(R, dtype=float) ** ((self.beta + 1.0) / 2.0)
        return self.cf.phi0(R)

    def dphi0(self, R):
        if self.free:
            m = (self.beta + 1.0) / 2.0
            return m * np.asarray(R, dtype=float) ** (m - 1.0)
        return self.cf.dphi0(R)

    def theta0(self, R):
        if self.free:
            return np.asarray(R, dtype=float) ** ((1.0 - self.beta) / 2.0) / self.beta
        return self.cf.theta0(R)

    def key(self):
        return (round(self.beta, 12), round(self.params.nu, 12), self.free)


# ---------------------------------------------------------------------------
# regular solution: series layers phi_j
# ---------------------------------------------------------------------------

_LAYER_CACHE: dict = {}
_J_MAX = 30


def _u_nodes(beta: float) -> np.ndarray:
    """Log grid in u = R^(2 beta) sized so that the recursion's largest
    intermediate factor u^(J/beta + 1/2) stays inside float64 range.

    The layers tend to constants as u -> 0, so evaluations below the low
    end may clamp to the first node; the high end is a hard cap."""
    top = min(16.0, 0.80 * 308.0 / (_J_MAX / beta + 0.5))
    low = min(12.0, 0.80 * 308.0 / (_J_MAX / beta + 0.5))
    return np.geomspace(10.0 ** -low, 10.0**top, 6000)


def _series_radius_cap(beta: float) -> float:
    """Largest radius the cached series layers can serve."""
    return float(_u_nodes(beta)[-1] ** (1.0 / (2.0 * beta)) / 1.001)


def _layer_splines(prob: _Problem, j_max: int) -> list:
    """Splines of phi_j(u), u = R^(2 beta), built by the integral recursion.

    phi(R,z) = phi0(R) + R^((beta+1)/2) sum_j (R^2 z)^j phi_j(R^(2 beta));
    each shell solves L F_j = F_{j-1} with vanishing data at 0, which in
    the u variable reads

        phi_j(u) = u^(-j/b-1/2) (1+u)^(-3/2) / (2 b^2)
                   * [ (1-6u+u^2) I_A(u) - u^(1/2) (1-u) I_B(u) ],
        I_A = int_0^u s^(j/b-1/2) (1-s)     (1+s)^(-3/2) phi_(j-1) ds,
        I_B = int_0^u s^(j/b-1)   (1-6s+s^2)(1+s)^(-3/2) phi_(j-1) ds,

    for the full problem; the free problem replaces the bracketed zero-mode
    factors by their pure-power analogues.
    """
    key = prob.key()
    layers = _LAYER_CACHE.setdefault(key, [])
    if len(layers) >= j_max:
        return layers[:j_max]
    u = _u_nodes(prob.beta)
    b = prob.beta
    if not layers:
        if prob.free:
            base = np.ones_like(u)
        else:
            base = b * (1.0 - u) / (1.0 + u) ** 1.5
        layers.append(CubicSpline(np.log(u), base))
    while len(layers) < j_max:
        j = len(layers)
        prev = layers[-1](np.log(u))
        if prob.free:
            IA = _cumulative_from_zero(u, u ** (j / b - 0.5) * prev)
            IB = _cumulative_from_zero(u, u ** (j / b - 1.0) * prev)
            # free pair phi0 = R^{(b+1)/2}, theta0 = R^{(1-b)/2}/b:
            # F_j = theta0 * int phi0 F_{j-1} - phi0 * int theta0 F_{j-1}
            vals = (u ** (-j / b - 0.5) * IA - u ** (-j / b) * IB) / (2.0 * b * b)
        else:
            IA = _cumulative_from_zero(
                u, u ** (j / b - 0.5) * (1 - u) * (1 + u) ** -1.5 * prev
            )
            IB = _cumulative_from_zero(
                u, u ** (j / b - 1.0) * (1 - 6 * u + u * u) * (1 + u) ** -1.5 * prev
            )
            vals = (
                (u ** (-j / b - 0.5) * (1 - 6 * u + u * u) * IA
                 - u ** (-j / b) * (1 - u) * IB)
                * (1 + u) ** -1.5
                / (2.0 * b * b)
            )
        layers.append(CubicSpline(np.log(u), vals))
    return layers[:j_max]


def phi_layer(params: PotentialParams, j: int, u, free: bool = False):
    """phi_j(u), the j-th series layer of the regular solution."""
    prob = _Problem(params, free)
    spl = _layer_splines(prob, j + 1)[j]
    u = np.asarray(u, dtype=float)
    nodes = _u_nodes(params.beta)
    if np.any(u > nodes[-1]):
        raise DomainError("u beyond the cached layer range")
    return spl(np.log(np.maximum(u, nodes[0])))


def phi_series(params: PotentialParams, R, z, J: int = 30, free: bool = False,
               derivative: bool = False):
    """Regular solution phi(R, z) by the truncated origin series.

    Valid for R^2 |z| <= DELTA_MATCH^2; complex z with moderate imaginary
    part is allowed.  Raises ConvergenceBudgetExceeded when the last kept
    term is still above 1e-12 relative.
    """
    scalar_in = np.isscalar(R) or np.ndim(R) == 0
    Rarr = np.atleast_1d(np.asarray(R, dtype=float))
    if np.any(Rarr**2 * abs(z) > DELTA_MATCH**2 * (1.0 + 1e-12)):
        raise DomainError("series requested outside its disc R^2|z| <= delta^2")
    prob = _Problem(params, free)
    layers = _layer_splines(prob, J)
    b = params.beta
    u = Rarr ** (2.0 * b)
    nodes_b = _u_nodes(b)
    if np.any(u > nodes_b[-1]):
        raise DomainError("series requested beyond the cached layer range")
    lu = np.log(np.maximum(u, nodes_b[0]))
    pref = Rarr ** ((b + 1.0) / 2.0)
    val = prob.phi0(Rarr).astype(complex)
    dval = prob.dphi0(Rarr).astype(complex) if derivative else None
    scale = np.max(np.abs(val)) + 1e-300
    w = np.ones_like(Rarr, dtype=complex)
    converged = z == 0
    for j in range(1, J):
        w = w * (Rarr**2 * z)
        lay = layers[j](lu)
        term = pref * w * lay
        val = val + term
        if derivative:
            dlay = layers[j](lu, 1) * 2.0 * b / Rarr  # d/dR of phi_j(R^2b)
            dval = dval + ((b + 1.0) / 2.0 + 2.0 * j) / Rarr * term + pref * w * dlay
        if np.max(np.abs(term)) < 1e-14 * scale:
            converged = True
            break
    if not converged and np.max(np.abs(term)) > 1e-12 * scale:
        raise ConvergenceBudgetExceeded(
            f"series term still {np.max(np.abs(term)) / scale:.2e} relative at j={J}"
        )
    if scalar_in:
        val = val[0]
        if derivative:
            dval = dval[0]
    if derivative:
        return val, dval
    return val


def regular_mode(params: PotentialParams, xi: float, R_targets,
                 free: bool = False):
    """phi(R, xi) and its R-derivative at the requested radii (xi > 0 real).

    Series inside R sqrt(xi) <= delta, high-accuracy ODE continuation
    outside; output is real.
    """
    if xi <= 0.0:
        raise DomainError("regular_mode expects xi > 0; use the shooting path")
    R_targets = np.atleast_1d(np.asarray(R_targets, dtype=float))
    prob = _Problem(params, free)
    R_switch = min(DELTA_MATCH / math.sqrt(xi), _series_radius_cap(params.beta))
    out = np.empty_like(R_targets)
    dout = np.empty_like(R_targets)
    near = R_targets <= R_switch
    if np.any(near):
        v, dv = phi_series(params, R_targets[near], xi, free=free, derivative=True)
        out[near] = v.real
        dout[near] = dv.real
    far = ~near
    if np.any(far):
        v0, dv0 = phi_series(params, np.array([R_switch]), xi, free=free,
                             derivative=True)

        def rhs(R, y):
            return [y[1], (prob.V(R) - xi) * y[0]]

        R_max = float(np.max(R_targets[far]))
        sol = solve_ivp(rhs, (R_switch, R_max), [v0[0].real, dv0[0].real],
                        method="DOP853", rtol=1e-11, atol=1e-13,
                        dense_output=True)
        if not sol.success:
            raise IterationDiverged(f"mode continuation failed: {sol.message}")
        vals = sol.sol(R_targets[far])
        out[far] = vals[0]
        dout[far] = vals[1]
    return out, dout


# ---------------------------------------------------------------------------
# Jost solution
# ---------------------------------------------------------------------------


def free_jost_closed_form(params: PotentialParams, R, xi: float):
    """Outgoing solution of the pure inverse-square problem and derivative.

    psi+(R) = xi^{-1/4} sqrt(pi q / 2) H^(1)_{beta/2}(q) e^{i pi (beta+1)/4},
    q = sqrt(xi) R; asymptotic to xi^{-1/4} e^{i q}.
    """
    R = np.asarray(R, dtype=float)
    nu = params.beta / 2.0
    k = math.sqrt(xi)
    q = k * R
    ph = np.exp(1j * math.pi * (params.beta + 1.0) / 4.0)
    f = np.sqrt(math.pi * q / 2.0) * hankel1(nu, q) * ph
    # d/dq [ sqrt(pi q/2) H(q) ] = sqrt(pi/2) [ H/(2 sqrt q) + sqrt q H' ]
    dH = 0.5 * (hankel1(nu - 1.0, q) - hankel1(nu + 1.0, q))
    df = math.sqrt(math.pi / 2.0) * (hankel1(nu, q) / (2.0 * np.sqrt(q))
                                     + np.sqrt(q) * dH) * ph
    pref = xi ** -0.25
    return pref * f, pref * df * k


def free_regular_closed_form(params: PotentialParams, R, xi: float):
    """Regular solution of the pure inverse-square problem (unit phi0 norm).

    phi_free = Gamma(beta/2+1) 2^{beta/2} xi^{-beta/4} sqrt(R)
               J_{beta/2}(sqrt(xi) R), asymptotic to R^{(beta+1)/2} at 0.
    """
    R = np.asarray(R, dtype=float)
    nu = params.beta / 2.0
    k = math.sqrt(xi)
    c = gamma_fn(nu + 1.0) * 2.0**nu * xi ** (-nu / 2.0)
    return c * np.sqrt(R) * jv(nu, k * R)


def free_connection_closed_form(params: PotentialParams, xi: float) -> complex:
    """a(xi) of the pure inverse-square problem (unit-normalized phi)."""
    nu = params.beta / 2.0
    return (
        gamma_fn(nu + 1.0)
        * 2.0**nu
        * math.sqrt(math.pi / 2.0)
        / math.pi
        * xi ** (-params.beta / 4.0)
        * np.exp(1j * math.pi * (params.beta + 1.0) / 4.0)
    )


def _soliton_tail_radius(params: PotentialParams, xi: float,
                         tol: float = 1e-10) -> float:
    """Radius beyond which dropping the -5 W^4 well perturbs the Jost
    solution by less than tol (Born-estimate of the neglected tail)."""
    beta = params.beta
    amp = 15.0 * beta * beta  # 5 W^4 ~ 15 beta^2 R^{-2 beta - 2}
    r = (amp / (tol * (2.0 * beta + 1.0) * math.sqrt(xi))) ** (1.0 / (2.0 * beta + 1.0))
    return max(r, 10.0)


def _jost_symbol(prob: _Problem, xi: float, R_lo: float, R_hi: float):
    """Slowly varying factor g with psi+ = xi^{-1/4} e^{i sqrt(xi) R} g(R).

    Integrates g'' + 2 i sqrt(xi) g' = V g inward from the radius where the
    soliton well is negligible, started from the inverse-square closed form.
    Returns a callable giving (g, g') on [R_lo, R_hi].
    """
    params = prob.params
    k = math.sqrt(xi)
    R_free = max(_soliton_tail_radius(params, xi), 2.0 * R_hi)
    fval, fder = free_jost_closed_form(params, R_free, xi)
    # strip prefactor and phase
    phase = np.exp(1j * k * R_free) * xi**-0.25
    g0 = fval / phase
    dg0 = fder / phase - 1j * k * g0

    def rhs(R, y):
        g, dg = y
        return [dg, prob.V(R) * g - 2j * k * dg]

    sol = solve_ivp(rhs, (R_free, R_lo), [g0, dg0], method="DOP853",
                    rtol=1e-11, atol=1e-13, dense_output=True)
    if not sol.success:
        raise IterationDiverged(f"inward symbol integration failed: {sol.message}")
    return sol.sol


def jost_solution(params: PotentialParams, R, xi: float, free: bool = False,
                  derivative: bool = False):
    """psi+(R, xi) (outgoing, ~ xi^{-1/4} e^{i sqrt(xi) R} at infinity).

    Precondition R sqrt(xi) >= 1 (the phase must be in the oscillatory
    regime); below that the inward integration loses its contraction and
    IterationDiverged is raised.
    """
    Rarr = np.atleast_1d(np.asarray(R, dtype=float))
    if xi <= 0.0:
        raise DomainError("jost_solution expects xi > 0")
    k = math.sqrt(xi)
    if np.min(Rarr) * k < 1.0 - 1e-12:
        raise IterationDiverged("R sqrt(xi) < 1: outside the Jost regime")
    if free:
        val, der = free_jost_closed_form(params, Rarr, xi)
    else:
        prob = _Problem(params, free=False)
        R_lo, R_hi = float(np.min(Rarr)), float(np.max(Rarr))
        if R_lo >= _soliton_tail_radius(params, xi):
            val, der = free_jost_closed_form(params, Rarr, xi)
        else:
            dense = _jost_symbol(prob, xi, R_lo, R_hi)
            g, dg = dense(Rarr)
            phase = xi**-0.25 * np.exp(1j * k * Rarr)
            val = phase * g
            der = phase * (dg + 1j * k * g)
    if derivative:
        return val, der
    return val


# ---------------------------------------------------------------------------
# connection coefficient and spectral density
# ---------------------------------------------------------------------------

_CONNECTION_CACHE: dict = {}


def connection_coefficient(params: PotentialParams, xi: float,
                           free: bool = False) -> complex:
    """a(xi) = -(i/2) [phi psi+' - phi' psi+], verified at two radii."""
    key = (round(params.beta, 12), round(params.nu, 12), free, float(xi))
    if key in _CONNECTION_CACHE:
        return _CONNECTION_CACHE[key]
    if xi <= 0.0:
        raise DomainError("connection coefficient defined for xi > 0")
    R_star = max(1.0, 2.0 / math.sqrt(xi))
    radii = np.array([R_star, 1.5 * R_star])
    phi, dphi = regular_mode(params, xi, radii, free=free)
    psi, dpsi = jost_solution(params, radii, xi, free=free, derivative=True)
    a_two = -0.5j * (phi * dpsi - dphi * psi)
    if abs(a_two[1] - a_two[0]) > 1e-6 * abs(a_two[0]):
        raise MatchingFailure(
            f"Wronskian drifts between radii: {a_two[0]} vs {a_two[1]} at xi={xi}"
        )
    a = complex(a_two[0])
    _CONNECTION_CACHE[key] = a
    return a


@dataclass
class SpectralMeasure:
    xi: np.ndarray
    rho: np.ndarray
    a_vals: np.ndarray
    xi_d: float | None
    has_zero_eigenvalue: bool
    meta: dict = field(default_factory=dict)


_DENSE_GRID_THRESHOLD = 320
_COARSE_PER_DECADE = 15


def spectral_density(params: PotentialParams, xi_grid,
                     free: bool = False, with_discrete: bool = True
                     ) -> SpectralMeasure:
    """Continuous spectral density rho = 1/(pi |a|^2) on the grid, plus the
    discrete data (skipped in the free case, which has no point spectrum).

    The connection coefficient is smooth and non-oscillatory in xi, so on
    dense grids (needed to resolve the *modes'* oscillation in transforms)
    it is computed on a coarse logarithmic subgrid and interpolated through
    a cubic spline of (log|a|, unwrapped arg a) against log xi; the
    interpolation error is ~1e-7 relative at 15 nodes per decade.
    """
    xi = np.asarray(xi_grid, dtype=float)
    if xi.size > _DENSE_GRID_THRESHOLD and not free:
        decades = math.log10(xi[-1] / xi[0])
        n_coarse = max(60, int(_COARSE_PER_DECADE * decades))
        coarse = np.geomspace(xi[0], xi[-1], n_coarse)
        a_coarse = np.array(
            [connection_coefficient(params, x, free=free) for x in coarse])
        lx = np.log(coarse)
        s_mag = CubicSpline(lx, np.log(np.abs(a_coarse)))
        s_arg = CubicSpline(lx, np.unwrap(np.angle(a_coarse)))
        lxi = np.log(xi)
        a_vals = np.exp(s_mag(lxi)) * np.exp(1j * s_arg(lxi))
    else:
        a_vals = np.array(
            [connection_coefficient(params, x, free=free) for x in xi])
    rho = 1.0 / (math.pi * np.abs(a_vals) ** 2)
    xi_d = None
    has_zero = False
    if with_discrete and not free:
        xi_d, _, phi0n = discrete_spectrum(params)
        has_zero = phi0n is not None
    return SpectralMeasure(xi=xi, rho=rho, a_vals=a_vals, xi_d=xi_d,
                           has_zero_eigenvalue=has_zero)


# ---------------------------------------------------------------------------
# discrete spectrum
# ---------------------------------------------------------------------------

_DISCRETE_CACHE: dict = {}


def _shoot_mismatch(prob: _Problem, xi: float, R_in: float, R_match: float,
                    rtol: float):
    """Wronskian of the origin-regular and infinity-decaying solutions."""
    kap = math.sqrt(-xi)

    def rhs(R, y):
        return [y[1], (prob.V(R) - xi) * y[0]]

    sol_in = solve_ivp(rhs, (R_in, R_match),
                       [prob.phi0(R_in), prob.dphi0(R_in)],
                       method="DOP853", rtol=rtol, atol=1e-300)
    R_out = max(40.0 / kap, 40.0)
    nu = prob.beta / 2.0
    # outer start: sqrt(R) K_nu(kap R), exact for the pure inverse-square tail
    q = kap * R_out
    u0 = math.sqrt(R_out) * kv(nu, q)
    dK = -0.5 * (kv(nu - 1.0, q) + kv(nu + 1.0, q))
    du0 = 0.5 / math.sqrt(R_out) * kv(nu, q) + math.sqrt(R_out) * dK * kap
    sol_out = solve_ivp(rhs, (R_out, R_match), [u0, du0],
                        method="DOP853", rtol=rtol, atol=1e-300)
    yi, dyi = sol_in.y[0][-1], sol_in.y[1][-1]
    yo, dyo = sol_out.y[0][-1], sol_out.y[1][-1]
    # scale-invariant mismatch
    return (yi * dyo - dyi * yo) / (abs(yi * dyo) + abs(dyi * yo))


def _eigenvalue_once(params: PotentialParams, R_in: float, rtol: float) -> float:
    prob = _Problem(params, free=False)
    R_match = 1.5
    grid = -np.geomspace(1e-8, 50.0, 60)[::-1]  # from -50 up to -1e-8
    w = [_shoot_mismatch(prob, x, R_in, R_match, rtol) for x in grid]
    for i in range(len(grid) - 1):
        if w[i] == 0.0:
            return float(grid[i])
        if w[i] * w[i + 1] < 0.0:
            return float(
                brentq(
                    lambda x: _shoot_mismatch(prob, x, R_in, R_match, rtol),
                    grid[i],
                    grid[i + 1],
                    xtol=1e-13,
                    rtol=1e-13,
                )
            )
    raise NoEigenvalueFound(
        "no sign change of the matching Wronskian on xi in [-50, -1e-8]"
    )


def discrete_spectrum(params: PotentialParams):
    """(xi_d, phi_d, phi_0-normalized-or-None).

    xi_d < 0 by shooting; phi_d is the unit-L2 bound state (positive near
    the origin); the third entry is the normalized decaying zero mode when
    it is square integrable (beta > 2), else None.
    """
    key = (round(params.beta, 12),)
    if key in _DISCRETE_CACHE:
        return _DISCRETE_CACHE[key]
    xi_d = _eigenvalue_once(params, R_in=1e-4, rtol=1e-11)
    prob = _Problem(params, free=False)
    kap = math.sqrt(-xi_d)
    R_out = max(40.0 / kap, 40.0)
    grid = RadialGrid(np.geomspace(1e-4, R_out, 4000))
    R = grid.nodes

    def rhs(Rv, y):
        return [y[1], (prob.V(Rv) - xi_d) * y[0]]

    R_match = 1.5
    i_match = int(np.searchsorted(R, R_match))
    sol_in = solve_ivp(rhs, (R[0], R[i_match]),
                       [prob.phi0(R[0]), prob.dphi0(R[0])],
                       method="DOP853", rtol=1e-11, atol=1e-300,
                       dense_output=True)
    nu = prob.beta / 2.0
    q = kap * R_out
    u0 = math.sqrt(R_out) * kv(nu, q)
    dK = -0.5 * (kv(nu - 1.0, q) + kv(nu + 1.0, q))
    du0 = 0.5 / math.sqrt(R_out) * kv(nu, q) + math.sqrt(R_out) * dK * kap
    sol_out = solve_ivp(rhs, (R_out, R[i_match]), [u0, du0],
                        method="DOP853", rtol=1e-11, atol=1e-300,
                        dense_output=True)
    vals = np.empty_like(R)
    vals[: i_match + 1] = sol_in.sol(R[: i_match + 1])[0]
    scale = sol_in.sol(R[i_match])[0] / sol_out.sol(R[i_match])[0]
    vals[i_match + 1 :] = scale * sol_out.sol(R[i_match + 1 :])[0]
    norm = math.sqrt(simpson(vals**2, x=R))
    vals = vals / norm
    if vals[0] < 0:
        vals = -vals
    phi_d = GridFunction(grid, vals)
    phi0n = None
    if params.beta > 2.0:
        z = prob.phi0(R)
        z = z / math.sqrt(simpson(z**2, x=R))
        phi0n = GridFunction(grid, z)
    result = (xi_d, phi_d, phi0n)
    _DISCRETE_CACHE[key] = result
    return result


# ---------------------------------------------------------------------------
# transform pair
# ---------------------------------------------------------------------------

_MODE_CACHE: dict = {}


def mode_matrix(params: PotentialParams, R_grid: np.ndarray,
                xi_grid: np.ndarray, free: bool = False) -> np.ndarray:
    """phi(R, xi) sampled as an (n_xi, n_R) matrix, cached."""
    R = np.asarray(R_grid, dtype=float)
    xi = np.asarray(xi_grid, dtype=float)
    key = (round(params.beta, 12), free, R.tobytes(), xi.tobytes())
    if key in _MODE_CACHE:
        return _MODE_CACHE[key]
    out = np.empty((len(xi), len(R)))
    for i, x in enumerate(xi):
        out[i], _ = regular_mode(params, x, R, free=free)
    _MODE_CACHE[key] = out
    return out


@dataclass
class SpectralVector:
    xi: np.ndarray
    x_c: np.ndarray
    x_d: float = 0.0
    x_0: float | None = None  # present iff the measure has a zero eigenvalue


def _resample(f: GridFunction, R: np.ndarray) -> np.ndarray:
    spl = CubicSpline(np.log(f.grid.nodes), f.values)
    lo, hi = f.grid.nodes[0], f.grid.nodes[-1]
    out = np.zeros_like(R)
    inside = (R >= lo) & (R <= hi)
    out[inside] = spl(np.log(R[inside]))
    return out


def _check_tail(f: GridFunction) -> None:
    m = np.max(np.abs(f.values))
    if abs(f.values[0]) > 1e-8 * m or abs(f.values[-1]) > 1e-8 * m:
        raise DomainError("input must decay at the grid ends")
    R = f.grid.nodes
    tail = R > 0.95 * R[-1]
    head = simpson(np.abs(f.values), x=R)
    tail_est = simpson(np.abs(f.values[tail]), x=R[tail]) if tail.sum() > 2 else 0.0
    if tail_est > 1e-6 * head:
        raise TailNotResolved("grid tail carries more than 1e-6 of the mass")


def _low_tail_mass(measure: SpectralMeasure) -> float:
    """Analytic estimate of int_0^{xi_min} rho dxi from the edge power law."""
    xi, rho = measure.xi, measure.rho
    p = math.log(rho[1] / rho[0]) / math.log(xi[1] / xi[0])
    if p <= -1.0:
        return 0.0
    return rho[0] * xi[0] / (p + 1.0)


def _truncate_aliasing_tail(xi: np.ndarray, x_c: np.ndarray,
                            floor: float = 1e-8, window: int = 33
                            ) -> np.ndarray:
    """Zero the high-frequency tail of x_c past its quadrature noise floor.

    The radial quadrature stops resolving the oscillation of phi(R, xi)
    at large xi; past the point where the true coefficients have decayed
    into that noise, the computed tail *grows* again with xi and would be
    amplified by the density weight on inversion.  Detect the onset as the
    first local envelope dip below ``floor`` times the peak (after the
    peak itself) and zero everything above it.
    """
    a = np.abs(x_c)
    peak = float(np.max(a))
    if peak == 0.0:
        return x_c
    half = window // 2
    n = a.size
    env = np.array([np.max(a[max(0, i - half):min(n, i + half + 1)])
                    for i in range(n)])
    i_peak = int(np.argmax(a))
    below = np.nonzero(env[i_peak:] < floor * peak)[0]
    if below.size == 0:
        return x_c
    out = x_c.copy()
    out[i_peak + below[0]:] = 0.0
    return out


def forward_transform(params: PotentialParams, f: GridFunction,
                      measure: SpectralMeasure, free: bool = False
                      ) -> SpectralVector:
    """x(xi) = int phi(R, xi) f(R) dR plus the discrete components."""
    _check_tail(f)
    R = f.grid.nodes
    modes = mode_matrix(params, R, measure.xi, free=free)
    x_c = simpson(modes * f.values[None, :], x=R, axis=1)
    x_c = _truncate_aliasing_tail(measure.xi, x_c)
    x_d = 0.0
    x_0 = None
    if not free:
        xi_d, phi_d, phi0n = discrete_spectrum(params)
        fd = _resample(f, phi_d.grid.nodes)
        x_d = float(simpson(fd * phi_d.values, x=phi_d.grid.nodes))
        if phi0n is not None:
            x_0 = float(simpson(fd * phi0n.values, x=phi0n.grid.nodes))
    return SpectralVector(xi=measure.xi, x_c=x_c, x_d=x_d, x_0=x_0)


def inverse_transform(params: PotentialParams, x: SpectralVector,
                      measure: SpectralMeasure, R_grid: RadialGrid,
                      free: bool = False) -> GridFunction:
    """f(R) = x_d phi_d + x_0 phi_0 + int phi(R, xi) x_c(xi) w(xi) dxi,
    with the unitary weight w = UNITARY_DENSITY_FACTOR * rho."""
    R = R_grid.nodes
    modes = mode_matrix(params, R, measure.xi, free=free)
    w = UNITARY_DENSITY_FACTOR * measure.rho
    vals = simpson((x.x_c * w)[:, None] * modes, x=measure.xi, axis=0)
    # analytic low-frequency tail (rho may be only slowly integrable at 0)
    vals = vals + x.x_c[0] * modes[0] * UNITARY_DENSITY_FACTOR * _low_tail_mass(measure)
    if not free:
        xi_d, phi_d, phi0n = discrete_spectrum(params)
        vals = vals + x.x_d * _resample(
            GridFunction(phi_d.grid, phi_d.values), R
        )
        if phi0n is not None and x.x_0 is not None:
            vals = vals + x.x_0 * _resample(GridFunction(phi0n.grid, phi0n.values), R)
    return GridFunction(R_grid, vals)


def parseval_components(params: PotentialParams, f: GridFunction,
                        measure: SpectralMeasure, free: bool = False):
    """(||f||^2, |x_d|^2, |x_0|^2, continuous-channel energy)."""
    x = forward_transform(params, f, measure, free=free)
    w = UNITARY_DENSITY_FACTOR * measure.rho
    cont = float(simpson(np.abs(x.x_c) ** 2 * w, x=measure.xi))
    cont += abs(x.x_c[0]) ** 2 * UNITARY_DENSITY_FACTOR * _low_tail_mass(measure)
    norm2 = float(simpson(f.values**2, x=f.grid.nodes))
    x0sq = 0.0 if x.x_0 is None else x.x_0**2
    return norm2, x.x_d**2, x0sq, cont
