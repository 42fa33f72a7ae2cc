"""Variation-of-parameters solvers for the two singular ODE regions.

Two boundary-value solvers, both imposing zero Cauchy data at the singular
left endpoint:

* :func:`solve_cuspidal` -- the radial problem
  ``(-d^2/dR^2 - (2/R) d/dR + alpha/R^2 - 5 W^4) V = g`` on ``(0, inf)``,
  solved via the explicit zero-mode pair of the reduced operator.
* :func:`solve_tip` -- the light-cone-tip problem ``L_gamma W = g`` on
  ``(0, 1)``, where ``L_gamma`` is a degenerate-hyperbolic operator with
  regular singular points at ``a = 0`` and ``a = 1``; its fundamental
  system is built from Frobenius series at the origin continued by
  high-accuracy ODE integration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .core import ClosedForms, DomainError, OutOfRange, PotentialParams, decay_base_powers

logger = logging.getLogger(__name__)

__all__ = [
    "RadialGrid",
    "GridFunction",
    "TipOperatorParams",
    "NonIntegrableSource",
    "EndpointSingularity",
    "ResonanceDetected",
    "solve_cuspidal",
    "cuspidal_decomposition",
    "solve_tip",
    "frobenius_system_tip",
    "TipFundamentalSystem",
]


class NonIntegrableSource(ValueError):
    """Quadrature toward the singular endpoint does not converge."""


class EndpointSingularity(ValueError):
    """Endpoint exponent collides with the Frobenius lattice (log case)."""


class ResonanceDetected(EndpointSingularity):
    pass


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RadialGrid:
    nodes: np.ndarray

    def __post_init__(self) -> None:
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 16:
            raise DomainError("grid needs at least 16 nodes")
        if nodes[0] <= 0.0 or np.any(np.diff(nodes) <= 0.0):
            raise DomainError("grid nodes must be positive and strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def log_uniform(cls, lo: float, hi: float, n: int) -> "RadialGrid":
        return cls(np.geomspace(lo, hi, n))

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class GridFunction:
    grid: RadialGrid
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.shape != self.grid.nodes.shape:
            raise DomainError("values must align with grid nodes")

    @classmethod
    def sample(cls, grid: RadialGrid, f) -> "GridFunction":
        return cls(grid, np.asarray(f(grid.nodes), dtype=float))

    def __add__(self, other: "GridFunction") -> "GridFunction":
        return GridFunction(self.grid, self.values + other.values)


# ---------------------------------------------------------------------------
# cumulative quadrature with a power-law first panel
# ---------------------------------------------------------------------------


def _cumulative_from_zero(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """I(x_i) = integral of h from 0 to x_i.

    The bulk uses the exact antiderivative of a cubic spline of
    ``h(e^t) e^t`` in ``t = log x`` (product integration on a log grid);
    the panel ``(0, x_0]`` uses a local power-law model fitted to the
    first two samples, which is exact for pure powers and flags
    non-integrable behavior.
    """
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    t = np.log(x)
    w = h * x  # integrand after dx = x dt
    spline = CubicSpline(t, w)
    anti = spline.antiderivative()
    bulk = anti(t) - anti(t[0])

    # first panel: h ~ C x^p from the two innermost samples
    h0, h1 = h[0], h[1]
    scale = np.max(np.abs(h)) + 1e-300
    if abs(h0) < 1e-14 * scale:
        head = 0.0
    elif h0 * h1 > 0.0:
        p = math.log(abs(h1) / abs(h0)) / math.log(x[1] / x[0])
        if p <= -1.0 + 1e-9:
            raise NonIntegrableSource(
                f"integrand behaves like x^{p:.3f} near 0; integral diverges"
            )
        head = h0 * x[0] / (p + 1.0)
    else:
        # sign change in the innermost panel: fall back to a linear model
        head = 0.5 * h0 * x[0]
    return head + bulk


def _integral_between(x: np.ndarray, h: np.ndarray, a_idx: int) -> np.ndarray:
    """I(x_i) = integral of h from x[a_idx] to x_i (signed), spline-based."""
    t = np.log(x)
    spline = CubicSpline(t, h * x)
    anti = spline.antiderivative()
    return anti(t) - anti(t[a_idx])


# ---------------------------------------------------------------------------
# cuspidal-region solver
# ---------------------------------------------------------------------------


def solve_cuspidal(params: PotentialParams, g: GridFunction) -> GridFunction:
    """Solve (-d^2/dR^2 - (2/R) d/dR + alpha/R^2 - 5 W^4) V = g, V(0)=V'(0)=0.

    Reduction u = R V turns the operator into ``-u'' + (alpha/R^2 - 5W^4) u``
    with the explicit zero-mode pair (phi, theta); variation of parameters
    with integrals anchored at R = 0 picks the solution with vanishing
    Cauchy data there:

        V(R) = R^{-1} [ theta(R) I_phi(R) - phi(R) I_theta(R) ],
        I_psi(R) = integral_0^R psi(R') R' g(R') dR'.

    (The ordering of the two terms is fixed by the sign convention under
    which the zero-mode Wronskian is +1; see ``core.wronskian_zero_modes``.)
    """
    cf = ClosedForms(params)
    R = g.grid.nodes
    gv = np.asarray(g.values, dtype=float)
    phi = cf.phi0(R)
    theta = cf.theta0(R)
    I_phi = _cumulative_from_zero(R, phi * R * gv)
    I_theta = _cumulative_from_zero(R, theta * R * gv)
    V = (theta * I_phi - phi * I_theta) / R
    out = GridFunction(g.grid, V)
    out.meta["residual"] = _cuspidal_residual(params, out, gv)
    return out


def _cuspidal_residual(params: PotentialParams, V: GridFunction, gv: np.ndarray) -> float:
    """Max relative defect of the ODE on the interior 80% of the grid."""
    cf = ClosedForms(params)
    R = V.grid.nodes
    t = np.log(R)
    v = V.values
    dv = np.gradient(v, t, edge_order=2)
    d2v = np.gradient(dv, t, edge_order=2)
    Vrr = (d2v - dv) / R**2
    Vr = dv / R
    lhs = -Vrr - 2.0 / R * Vr + cf.V(R) * v
    n = len(R)
    sl = slice(n // 10, n - n // 10)
    scale = np.max(np.abs(gv)) + 1e-300
    return float(np.max(np.abs(lhs[sl] - gv[sl])) / scale)


def cuspidal_decomposition(
    params: PotentialParams, g: GridFunction, R0: float = 10.0
) -> tuple[float, float, GridFunction]:
    """Rewrite the cuspidal solution with quadratures re-based at R0.

    Returns ``(c1, c2, V)`` such that on the grid

        V(R) = c1 phi(R)/R + c2 theta(R)/R
               + R^{-1}[ theta(R) J_phi(R) - phi(R) J_theta(R) ],

    with J_psi anchored at R0 instead of 0.  The function V is identical
    to :func:`solve_cuspidal` output (same solution, re-based constants);
    the split isolates the large-R asymptotics.
    """
    cf = ClosedForms(params)
    R = g.grid.nodes
    if not (R[0] < R0 < R[-1]):
        raise DomainError("base point R0 must lie inside the grid")
    gv = np.asarray(g.values, dtype=float)
    phi = cf.phi0(R)
    theta = cf.theta0(R)
    i0 = int(np.searchsorted(R, R0))
    c2 = float(_cumulative_from_zero(R, phi * R * gv)[i0])
    c1 = float(-_cumulative_from_zero(R, theta * R * gv)[i0])
    J_phi = _integral_between(R, phi * R * gv, i0)
    J_theta = _integral_between(R, theta * R * gv, i0)
    V = (c1 * phi + c2 * theta + theta * J_phi - phi * J_theta) / R
    return c1, c2, GridFunction(g.grid, V)


# ---------------------------------------------------------------------------
# tip operator: Frobenius machinery
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TipOperatorParams:
    """Coefficients of L = (a^2-1) d^2/da^2 + ((3-gn) a - 2/a) d/da + (c + alpha/a^2)

    with gn = gamma*nu and c = (gn-1)(gn-3)/4."""

    gamma: float
    params: PotentialParams

    def __post_init__(self) -> None:
        if self.gamma <= 0.0:
            raise OutOfRange("gamma must be positive")
        lattice_vals = _tip_lattice_membership(self.gamma, self.params)
        if not lattice_vals:
            logger.info(
                "gamma=%g is not on the admissible-power lattice for beta=%g; "
                "solver proceeds anyway",
                self.gamma,
                self.params.beta,
            )

    @property
    def gn(self) -> float:
        return self.gamma * self.params.nu

    @property
    def const(self) -> float:
        gn = self.gn
        return (gn - 1.0) / 2.0 * (gn - 3.0) / 2.0

    def p(self, a):
        return a * a - 1.0

    def q(self, a):
        return (3.0 - self.gn) * a - 2.0 / a

    def r(self, a):
        return self.const + self.params.alpha / (a * a)

    def apply(self, a, u, du, d2u):
        return self.p(a) * d2u + self.q(a) * du + self.r(a) * u


def _tip_lattice_membership(gamma: float, params: PotentialParams) -> bool:
    """True when gamma = beta-or-(4-beta) + lattice point, up to 1e-9."""
    from .core import ExponentLattice

    beta = params.beta
    base = beta if beta <= 2.0 else 4.0 - beta
    lat = ExponentLattice(decay_base_powers(beta))
    vals = lat.first(64)
    return any(abs(gamma - (base + m)) < 1e-9 for m in vals)


def _origin_series(top: TipOperatorParams, sigma: float, n_terms: int,
                   log_source: np.ndarray | None = None):
    """Even Frobenius series sum c_k a^(sigma+2k) at a = 0.

    Recursion (m = sigma + 2k):
        c_k * [alpha - m(m-1) - 2m] + c_(k-1) * B(m-2) + (log terms) = 0,
        B(m') = m'(m'-1) + (3-gn) m' + c.

    When ``log_source`` is given (coefficients G_k of the log-augmentation
    inhomogeneity times the log coupling C), the returned tuple carries the
    computed coupling constant; the resonant coefficient is set to zero.
    """
    alpha = top.params.alpha
    gn = top.gn
    cconst = top.const
    beta = top.params.beta

    c = np.zeros(n_terms)
    c[0] = 1.0
    coupling = 0.0
    for k in range(1, n_terms):
        m = sigma + 2 * k
        denom = alpha - m * (m - 1.0) - 2.0 * m
        mp = m - 2.0
        rhs = -c[k - 1] * (mp * (mp - 1.0) + (3.0 - gn) * mp + cconst)
        if log_source is not None:
            rhs -= coupling * log_source[k]
        if abs(denom) < 1e-9 * (1.0 + m * m):
            if log_source is None:
                raise ResonanceDetected(
                    f"origin series resonance at k={k} (beta={beta})"
                )
            # resonant shell: solve for the log coupling instead
            gk = log_source[k]
            if abs(gk) < 1e-300:
                raise ResonanceDetected("resonant shell with vanishing log source")
            coupling = rhs / gk  # rhs was computed with coupling still zero
            c[k] = 0.0
            continue
        c[k] = rhs / denom
    return c, coupling


def _origin_log_source(top: TipOperatorParams, sigma1: float, c1: np.ndarray):
    """Coefficients G_k of the log-augmentation series at the origin.

    For psi2 = a^sigma2 sum d_k a^2k + C psi1 log a, the extra terms are
    C * [2 p psi1'/a - p psi1/a^2 + q psi1/a]; collecting the coefficient
    of a^(sigma2 + 2k - 2) (= a^(sigma1 + 2(k - beta/2) - 2)) gives, with
    j indexing psi1's shells,

        G_k = c1[k-2] (2(sigma1 + 2(k-2)) + 2 - gn)
            + c1[k-1] (-2(sigma1 + 2(k-1)) - 1).

    (Valid when sigma1 - sigma2 = beta = 2, the only resonant case in the
    admissible window.)
    """
    gn = top.gn
    n = len(c1)
    G = np.zeros(n + 1)
    for k in range(n + 1):
        g = 0.0
        if 0 <= k - 2 < n:
            g += c1[k - 2] * (2.0 * (sigma1 + 2.0 * (k - 2)) + 2.0 - gn)
        if 0 <= k - 1 < n:
            g += c1[k - 1] * (-2.0 * (sigma1 + 2.0 * (k - 1)) - 1.0)
        G[k] = g
    return G


@dataclass
class _Series:
    sigma: float
    coeffs: np.ndarray  # shell coefficients, step 2 at a=0, step 1 at a=1
    step: int
    log_coupling: float = 0.0
    log_partner: "_Series | None" = None  # series multiplied by log(arg)

    def eval(self, a):
        a = np.asarray(a, dtype=float)
        k = np.arange(len(self.coeffs))
        val = a[..., None] ** (self.sigma + self.step * k) @ self.coeffs
        if self.log_partner is not None and self.log_coupling != 0.0:
            val = val + self.log_coupling * np.log(a) * self.log_partner.eval(a)
        return val

    def eval_deriv(self, a):
        a = np.asarray(a, dtype=float)
        k = np.arange(len(self.coeffs))
        expo = self.sigma + self.step * k
        val = a[..., None] ** (expo - 1.0) @ (self.coeffs * expo)
        if self.log_partner is not None and self.log_coupling != 0.0:
            val = val + self.log_coupling * (
                np.log(a) * self.log_partner.eval_deriv(a)
                + self.log_partner.eval(a) / a
            )
        return val


def tip_origin_system(top: TipOperatorParams, n_terms: int = 48):
    """Frobenius fundamental system (psi1, psi2) at a = 0.

    psi1 ~ a^((beta-1)/2), psi2 ~ a^((-beta-1)/2), both with unit leading
    coefficient and even series; when beta is an even integer psi2 carries
    a ``log a`` multiple of psi1.
    """
    beta = top.params.beta
    s1 = (beta - 1.0) / 2.0
    s2 = (-beta - 1.0) / 2.0
    c1, _ = _origin_series(top, s1, n_terms)
    psi1 = _Series(sigma=s1, coeffs=c1, step=2)
    resonant = abs(beta / 2.0 - round(beta / 2.0)) < 1e-9
    if not resonant:
        c2, _ = _origin_series(top, s2, n_terms)
        psi2 = _Series(sigma=s2, coeffs=c2, step=2)
    else:
        G = _origin_log_source(top, s1, c1)
        c2, coupling = _origin_series(top, s2, n_terms, log_source=G)
        psi2 = _Series(sigma=s2, coeffs=c2, step=2,
                       log_coupling=coupling, log_partner=psi1)
    return psi1, psi2


# --- cone endpoint (a = 1, variable x = 1 - a) ------------------------------


def _cone_polys(top: TipOperatorParams):
    """Polynomial coefficient arrays of the operator at x = 1 - a.

    The operator times (1-x)^2 becomes P u_xx + Q u_x + S u with
        P = x^4 - 4x^3 + 5x^2 - 2x,
        Q = (2-A) + (3A-2)x - 3A x^2 + A x^3,   A = 3 - gn,
        S = (c + alpha) - 2c x + c x^2.
    """
    A = 3.0 - top.gn
    c = top.const
    alpha = top.params.alpha
    P = np.array([0.0, -2.0, 5.0, -4.0, 1.0])
    Q = np.array([2.0 - A, 3.0 * A - 2.0, -3.0 * A, A])
    S = np.array([c + alpha, -2.0 * c, c])
    return P, Q, S


def _cone_series(top: TipOperatorParams, sigma: float, n_terms: int,
                 log_source: np.ndarray | None = None):
    """Frobenius series at x = 0 (the cone endpoint), integer steps.

    Indicial polynomial F(s) = -2 s(s-1) + (gn-1) s, roots 0 and (gn+1)/2.
    """
    P, Q, S = _cone_polys(top)

    def F(s):
        return P[1] * s * (s - 1.0) + Q[0] * s

    c = np.zeros(n_terms)
    c[0] = 1.0
    coupling = 0.0
    for n in range(1, n_terms):
        rhs = 0.0
        for j in range(2, 5):
            k = n + 1 - j
            if 0 <= k < n:
                rhs -= P[j] * c[k] * (sigma + k) * (sigma + k - 1.0)
        for j in range(1, 4):
            k = n - j
            if 0 <= k < n:
                rhs -= Q[j] * c[k] * (sigma + k)
        for j in range(0, 3):
            k = n - 1 - j
            if 0 <= k < n:
                rhs -= S[j] * c[k]
        if log_source is not None:
            rhs -= coupling * log_source[n]
        denom = F(sigma + n)
        if abs(denom) < 1e-9 * (1.0 + n * n):
            if log_source is None:
                raise ResonanceDetected(
                    f"cone series resonance at shell {n} (gamma*nu = {top.gn})"
                )
            gk = log_source[n]
            if abs(gk) < 1e-300:
                raise ResonanceDetected("resonant shell with vanishing log source")
            coupling = rhs / gk  # rhs computed with coupling=0 so far
            c[n] = 0.0
            continue
        c[n] = rhs / denom
    return c, coupling


def _cone_log_source(top: TipOperatorParams, sigma2: float, c2: np.ndarray,
                     n_out: int):
    """Coefficients (by power of x, absolute) of the log-augmentation term.

    For phi1 = sum d_n x^n + C phi2 log x, the extra inhomogeneity is
    C * [2 P phi2'/x - P phi2/x^2 + Q phi2/x].  Returns the array G with
    G[n] = coefficient of x^(n-1) in that series (aligned with the
    recursion's order-n equation).
    """
    P, Q, _ = _cone_polys(top)
    nmax = n_out + 6
    # phi2 = x^sigma2 * series(c2); here sigma2 is a nonnegative integer.
    m = int(round(sigma2))
    s = np.zeros(nmax)
    s[m : m + min(len(c2), nmax - m)] = c2[: max(0, nmax - m)]
    ds = np.zeros(nmax)  # phi2' as absolute power coefficients (power i-1 -> slot i-1)
    for i in range(1, nmax):
        ds[i - 1] = s[i] * i

    def polymul(a, b):
        out = np.convolve(a, b)[:nmax]
        return out

    # 2 P phi2' / x  -> coefficients of x^j: (2 P * ds) shifted down by 1
    t1 = 2.0 * polymul(P, ds)
    # -P phi2 / x^2 -> shifted down by 2
    t2 = -polymul(P, s)
    # Q phi2 / x    -> shifted down by 1
    t3 = polymul(Q, s)
    # combine into coefficients of x^e; P has zero constant term so t2/x^2 is
    # a Laurent series starting at x^(m-1) -- same for the others.
    total = np.zeros(nmax)
    total[: nmax - 1] += t1[1:nmax]
    total[: nmax - 2] += t2[2:nmax]
    total[: nmax - 1] += t3[1:nmax]
    # recursion order n multiplies x^(sigma+n-1) with sigma = 0
    G = np.zeros(n_out + 1)
    for n in range(n_out + 1):
        if 0 <= n - 1 < nmax:
            G[n] = total[n - 1]
    return G


def tip_cone_system(top: TipOperatorParams, n_terms: int = 48):
    """Frobenius fundamental system (phi1, phi2) at a = 1 in x = 1 - a.

    phi1 ~ 1 + ..., phi2 ~ x^((gn+1)/2) (1 + ...); when (gn+1)/2 is a
    nonnegative integer, phi1 carries a ``log x`` multiple of phi2.
    """
    gn = top.gn
    s2 = (gn + 1.0) / 2.0
    c2, _ = _cone_series(top, s2, n_terms)
    phi2 = _Series(sigma=s2, coeffs=c2, step=1)
    resonant = abs(s2 - round(s2)) < 1e-8 and round(s2) >= 0
    if not resonant:
        c1, _ = _cone_series(top, 0.0, n_terms)
        phi1 = _Series(sigma=0.0, coeffs=c1, step=1)
    else:
        G = _cone_log_source(top, s2, c2, n_terms)
        c1, coupling = _cone_series(top, 0.0, n_terms, log_source=G)
        phi1 = _Series(sigma=0.0, coeffs=c1, step=1,
                       log_coupling=coupling, log_partner=phi2)
    return phi1, phi2


def frobenius_system_tip(top: TipOperatorParams, endpoint: int, n_terms: int = 32):
    """Truncated Frobenius fundamental system at a = 0 or a = 1.

    Returns a pair of series objects; each has attributes ``sigma``
    (leading exponent), ``coeffs`` (shell coefficients) and
    ``log_coupling`` (coefficient of the log-augmented partner, zero in
    the generic case).
    """
    if endpoint == 0:
        return tip_origin_system(top, n_terms)
    if endpoint == 1:
        return tip_cone_system(top, n_terms)
    raise DomainError("endpoint must be 0 or 1")


# ---------------------------------------------------------------------------
# fundamental system on (0, 1): series + ODE continuation
# ---------------------------------------------------------------------------


class TipFundamentalSystem:
    """(psi1, psi2) evaluable on all of (0, 1 - margin).

    Near the origin the Frobenius series are used directly; past a stitch
    point (where the series tail is below 1e-10 relative) the pair is
    continued by stiff-safe ODE integration with dense output.
    """

    def __init__(self, top: TipOperatorParams, a_stitch: float = 0.35,
                 a_max: float = 0.999, n_terms: int = 56):
        self.top = top
        self.a_stitch = float(a_stitch)
        self.a_max = float(a_max)
        self.psi1, self.psi2 = tip_origin_system(top, n_terms)
        self._sols = []
        for psi in (self.psi1, self.psi2):
            y0 = [float(psi.eval(self.a_stitch)), float(psi.eval_deriv(self.a_stitch))]
            sol = solve_ivp(
                self._rhs,
                (self.a_stitch, self.a_max),
                y0,
                method="DOP853",
                rtol=1e-12,
                atol=1e-14,
                dense_output=True,
            )
            if not sol.success:
                raise EndpointSingularity(
                    f"continuation of the fundamental system failed: {sol.message}"
                )
            self._sols.append(sol)

    def _rhs(self, a, y):
        top = self.top
        u, du = y
        d2 = -(top.q(a) * du + top.r(a) * u) / top.p(a)
        return [du, d2]

    def _eval_one(self, idx, a):
        a = np.asarray(a, dtype=float)
        psi = (self.psi1, self.psi2)[idx]
        out = np.empty_like(a)
        dout = np.empty_like(a)
        near = a <= self.a_stitch
        out[near] = psi.eval(a[near])
        dout[near] = psi.eval_deriv(a[near])
        far = ~near
        if np.any(far):
            vals = self._sols[idx].sol(a[far])
            out[far] = vals[0]
            dout[far] = vals[1]
        return out, dout

    def psi(self, a):
        """Return (psi1, psi1', psi2, psi2') at a."""
        u1, du1 = self._eval_one(0, a)
        u2, du2 = self._eval_one(1, a)
        return u1, du1, u2, du2

    def weight(self, a):
        """p(a) * Wronskian(psi1, psi2)(a) = beta (1-a^2)^((gn+1)/2) / a^2.

        Abel's identity gives W = k (1-a^2)^((gn-1)/2) a^-2 with
        k = -beta for unit leading coefficients; p = a^2 - 1 flips the sign.
        """
        beta = self.top.params.beta
        gn = self.top.gn
        a = np.asarray(a, dtype=float)
        return beta * (1.0 - a * a) ** ((gn + 1.0) / 2.0) / (a * a)


def solve_tip(top: TipOperatorParams, a_nodes: np.ndarray, g_vals: np.ndarray,
              system: TipFundamentalSystem | None = None) -> np.ndarray:
    """Solve L_gamma W = g on (0,1) with zero Cauchy data at a = 0.

    Variation of parameters:
        W(a) = psi2(a) J1(a) - psi1(a) J2(a),
        J_i(a) = integral_0^a psi_i g / (p W12),
    with the combination p(a) W12(a) known in closed form (see
    :meth:`TipFundamentalSystem.weight`).
    """
    a = np.asarray(a_nodes, dtype=float)
    g_vals = np.asarray(g_vals, dtype=float)
    if np.any(a <= 0.0) or np.any(a >= 1.0):
        raise DomainError("tip solve requires nodes strictly inside (0, 1)")
    if system is None:
        system = TipFundamentalSystem(top, a_max=min(0.9995, a[-1] + 1e-4))
    u1, _, u2, _ = system.psi(a)
    wgt = system.weight(a)
    J1 = _cumulative_from_zero(a, u1 * g_vals / wgt)
    J2 = _cumulative_from_zero(a, u2 * g_vals / wgt)
    return u2 * J1 - u1 * J2
