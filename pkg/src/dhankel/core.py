"""Parameters, closed-form special solutions, and series utilities.

Everything downstream (Green's solvers, spectral theory, transference
kernel, parametrix) is built on top of the objects in this module:

* ``PotentialParams`` -- the admissible parameter window for the
  inverse-square coupling ``alpha``, the derived exponent
  ``beta = sqrt(1 + 4*alpha)`` and the blow-up rate ``nu``.
* ``ClosedForms`` -- the ground state, the two explicit zero modes of the
  linearized operator, and the commutator potential, all in overflow-safe
  closed form with analytic first derivatives.
* ``ExponentLattice`` -- the increasing semigroup generated by a finite
  set of base powers (used for decay bookkeeping of the corrections).
* ``GeneralizedSeries`` -- evaluator for multi-power series
  ``R^delta * sum a_I R^(i1*p1 + ... + iN*pN)``.
"""

from __future__ import annotations

import heapq
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "OutOfRange",
    "DomainError",
    "DivergenceWarning",
    "PotentialParams",
    "make_params",
    "ClosedForms",
    "eval_ground_state",
    "eval_zero_modes",
    "eval_commutator_potential",
    "ExponentLattice",
    "GeneralizedSeries",
    "eval_generalized_series",
]

# Admissible window for the potential strength.  The lower end keeps the
# operator -d^2/dR^2 + alpha/R^2 in the range where the construction
# applies (beta > 1/2); the upper end keeps beta < 4.
ALPHA_MIN = -1.0 / 4.0 + 1.0 / 16.0
ALPHA_MAX = 15.0 / 4.0


class OutOfRange(ValueError):
    """Parameter outside the admissible window."""


class DomainError(ValueError):
    """Function argument outside its domain (e.g. R <= 0)."""


class DivergenceWarning(UserWarning):
    """A truncated series was cut while terms were still significant."""


@dataclass(frozen=True)
class PotentialParams:
    """Validated triple (alpha, beta, nu).

    beta = sqrt(1 + 4*alpha) governs every endpoint exponent in the
    problem; nu is the blow-up rate exponent (scaling factor
    lambda(t) = t^(-1-nu)).

    Note on bookkeeping: throughout the package the symbol ``b`` in decay
    budgets denotes the inverse of t*lambda(t), i.e. b = (t*lambda)^(-1)
    = t^nu.  This is the unique choice that makes the stage-k error
    prefactors lambda^(1/2) * b^(2k) dimensionally consistent, and it is
    an inference, not an independently specified input.
    """

    alpha: float
    beta: float
    nu: float

    def __post_init__(self) -> None:
        if not (ALPHA_MIN < self.alpha < ALPHA_MAX):
            raise OutOfRange(
                f"alpha={self.alpha} outside admissible window "
                f"({ALPHA_MIN}, {ALPHA_MAX})"
            )
        if abs(self.beta * self.beta - (1.0 + 4.0 * self.alpha)) > 1e-12 * (
            1.0 + abs(self.beta) ** 2
        ):
            raise OutOfRange(
                f"beta={self.beta} inconsistent with alpha={self.alpha}: "
                "need beta^2 = 1 + 4*alpha"
            )
        if self.nu <= 1.0 / (2.0 * self.beta):
            raise OutOfRange(
                f"nu={self.nu} violates the bound nu > 1/(2*beta) = "
                f"{1.0 / (2.0 * self.beta)}"
            )


def make_params(alpha: float, nu: float) -> PotentialParams:
    """Validate (alpha, nu) and derive beta."""
    alpha = float(alpha)
    nu = float(nu)
    if not (ALPHA_MIN < alpha < ALPHA_MAX):
        raise OutOfRange(
            f"alpha={alpha} outside admissible window ({ALPHA_MIN}, {ALPHA_MAX})"
        )
    beta = math.sqrt(1.0 + 4.0 * alpha)
    return PotentialParams(alpha=alpha, beta=beta, nu=nu)


def params_from_beta(beta: float, nu: float) -> PotentialParams:
    """Convenience constructor from the derived exponent beta."""
    beta = float(beta)
    alpha = (beta * beta - 1.0) / 4.0
    return make_params(alpha, nu)


def _check_positive(R: np.ndarray | float) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if np.any(R <= 0.0):
        raise DomainError("radial argument must be positive")
    return R


class ClosedForms:
    """Closed-form ground state, zero modes and commutator potential.

    All evaluations branch on R <=> 1 so that the dominant power of
    R^(2*beta) is factored out before any addition; this keeps the
    formulas finite and relatively accurate out to extreme radii.
    """

    def __init__(self, params: PotentialParams):
        self.params = params

    # -- ground state ---------------------------------------------------

    def W(self, R):
        """Ground state (3 beta^2)^(1/4) (R^(beta-1)/(1+R^(2 beta)))^(1/2)."""
        p = self.params
        R = _check_positive(R)
        b = p.beta
        c = (3.0 * b * b) ** 0.25
        small = R <= 1.0
        out = np.empty_like(R)
        Rs = R[small]
        out[small] = c * Rs ** ((b - 1.0) / 2.0) / np.sqrt(1.0 + Rs ** (2.0 * b))
        Rl = R[~small]
        # R^(beta-1)/(1+R^(2 beta)) = R^(-beta-1)/(1+R^(-2 beta))
        out[~small] = c * Rl ** (-(b + 1.0) / 2.0) / np.sqrt(1.0 + Rl ** (-2.0 * b))
        return out if out.shape else float(out)

    def W4(self, R):
        """W^4 = 3 beta^2 R^(2 beta - 2) / (1 + R^(2 beta))^2."""
        p = self.params
        R = _check_positive(R)
        b = p.beta
        small = R <= 1.0
        out = np.empty_like(R)
        Rs = R[small]
        out[small] = 3.0 * b * b * Rs ** (2.0 * b - 2.0) / (1.0 + Rs ** (2.0 * b)) ** 2
        Rl = R[~small]
        out[~small] = (
            3.0 * b * b * Rl ** (-2.0 * b - 2.0) / (1.0 + Rl ** (-2.0 * b)) ** 2
        )
        return out if out.shape else float(out)

    def RdR_W(self, R):
        """(R d/dR) W, closed form via the log-derivative of W."""
        p = self.params
        R = _check_positive(R)
        b = p.beta
        # R dW/dR = W * [ (beta-1)/2 - beta s/(1+s) ],  s = R^(2 beta)
        frac = self._s_over_1ps(R)
        out = self.W(R) * ((b - 1.0) / 2.0 - b * frac)
        return out

    def RdR2_W(self, R):
        """(R d/dR)^2 W."""
        p = self.params
        R = _check_positive(R)
        b = p.beta
        frac = self._s_over_1ps(R)  # s/(1+s)
        h = (b - 1.0) / 2.0 - b * frac
        # (R d/dR) h = -2 beta^2 s/(1+s)^2 = -2 beta^2 frac*(1-frac)
        dh = -2.0 * b * b * frac * (1.0 - frac)
        return self.W(R) * (h * h + dh)

    def _s_over_1ps(self, R):
        """s/(1+s) with s = R^(2 beta), evaluated without overflow."""
        b = self.params.beta
        R = np.asarray(R, dtype=float)
        small = R <= 1.0
        out = np.empty_like(R)
        s = R[small] ** (2.0 * b)
        out[small] = s / (1.0 + s)
        si = R[~small] ** (-2.0 * b)
        out[~small] = 1.0 / (1.0 + si)
        return out

    # -- zero modes ------------------------------------------------------

    def phi0(self, R):
        """First zero mode beta R^((beta+1)/2) (1-s)/(1+s)^(3/2)."""
        p = self.params
        R = _check_positive(R)
        b = p.beta
        small = R <= 1.0
        out = np.empty_like(R)
        Rs = R[small]
        s = Rs ** (2.0 * b)
        out[small] = b * Rs ** ((b + 1.0) / 2.0) * (1.0 - s) / (1.0 + s) ** 1.5
        Rl = R[~small]
        si = Rl ** (-2.0 * b)  # 1/s
        # (1-s)/(1+s)^(3/2) = (s^(-3/2) - s^(-1/2)) / (1+1/s)^(3/2)
        out[~small] = (
            b
            * Rl ** ((b + 1.0) / 2.0)
            * (Rl ** (-3.0 * b) - Rl ** (-b))
            / (1.0 + si) ** 1.5
        )
        return out if out.shape else float(out)

    def dphi0(self, R):
        """d(phi0)/dR.

        phi0' = beta R^((beta-1)/2) (1+s)^(-5/2)
                * [ (beta+1)/2 (1 - s^2) + beta s (s - 5) ].
        """
        p = self.params
        R = _check_positive(R)
        b = p.beta
        small = R <= 1.0
        out = np.empty_like(R)
        Rs = R[small]
        s = Rs ** (2.0 * b)
        br = (b + 1.0) / 2.0 * (1.0 - s * s) + b * s * (s - 5.0)
        out[small] = b * Rs ** ((b - 1.0) / 2.0) * br / (1.0 + s) ** 2.5
        Rl = R[~small]
        si = Rl ** (-2.0 * b)
        # bracket / s^(5/2) expressed in inverse powers:
        #  (beta+1)/2 (s^(-5/2) - s^(-1/2)) + beta (s^(-1/2) - 5 s^(-3/2))
        br_i = (b + 1.0) / 2.0 * (Rl ** (-5.0 * b) - Rl ** (-b)) + b * (
            Rl ** (-b) - 5.0 * Rl ** (-3.0 * b)
        )
        out[~small] = b * Rl ** ((b - 1.0) / 2.0) * br_i / (1.0 + si) ** 2.5
        return out if out.shape else float(out)

    def theta0(self, R):
        """Second zero mode R^((1-beta)/2) (1-6s+s^2) / (beta^2 (1+s)^(3/2))."""
        p = self.params
        R = _check_positive(R)
        b = p.beta
        small = R <= 1.0
        out = np.empty_like(R)
        Rs = R[small]
        s = Rs ** (2.0 * b)
        out[small] = (
            Rs ** ((1.0 - b) / 2.0)
            * (1.0 - 6.0 * s + s * s)
            / (b * b * (1.0 + s) ** 1.5)
        )
        Rl = R[~small]
        si = Rl ** (-2.0 * b)
        # (1-6s+s^2)/(1+s)^(3/2) = s^(1/2) (s^(-2)-6 s^(-1)+1)/(1+1/s)^(3/2)
        out[~small] = (
            Rl ** ((1.0 - b) / 2.0 + b)
            * (Rl ** (-4.0 * b) - 6.0 * Rl ** (-2.0 * b) + 1.0)
            / (b * b * (1.0 + si) ** 1.5)
        )
        return out if out.shape else float(out)

    def dtheta0(self, R):
        """d(theta0)/dR.

        With h(s) = (1-6s+s^2)(1+s)^(-3/2),
        h'(s) = (1+s)^(-5/2) (s^2/2 + 5s - 15/2), one has
        theta0' = R^((-1-beta)/2)/beta^2 [ (1-beta)/2 h(s) + 2 beta s h'(s) ].
        """
        p = self.params
        R = _check_positive(R)
        b = p.beta
        small = R <= 1.0
        out = np.empty_like(R)
        Rs = R[small]
        s = Rs ** (2.0 * b)
        h = (1.0 - 6.0 * s + s * s) / (1.0 + s) ** 1.5
        shp = s * (s * s / 2.0 + 5.0 * s - 15.0 / 2.0) / (1.0 + s) ** 2.5
        out[small] = Rs ** ((-1.0 - b) / 2.0) / (b * b) * (
            (1.0 - b) / 2.0 * h + 2.0 * b * shp
        )
        Rl = R[~small]
        si = Rl ** (-2.0 * b)
        # h = s^(1/2) (s^(-2) - 6 s^(-1) + 1) / (1+1/s)^(3/2)
        h_i = (
            Rl ** b
            * (Rl ** (-4.0 * b) - 6.0 * Rl ** (-2.0 * b) + 1.0)
            / (1.0 + si) ** 1.5
        )
        # s h'(s) = s^(1/2) (1/2 + 5 s^(-1) - (15/2) s^(-2)) / (1+1/s)^(5/2)
        shp_i = (
            Rl ** b
            * (0.5 + 5.0 * Rl ** (-2.0 * b) - 7.5 * Rl ** (-4.0 * b))
            / (1.0 + si) ** 2.5
        )
        out[~small] = Rl ** ((-1.0 - b) / 2.0) / (b * b) * (
            (1.0 - b) / 2.0 * h_i + 2.0 * b * shp_i
        )
        return out if out.shape else float(out)

    # -- potentials ------------------------------------------------------

    def V(self, R):
        """Potential alpha/R^2 - 5 W^4 of the linearized operator."""
        p = self.params
        R = _check_positive(R)
        return p.alpha / R**2 - 5.0 * self.W4(R)

    def U(self, R):
        """Commutator potential U = 10 W^4 + 5 R (W^4)'.

        Closed form: U(R) = 30 beta^3 R^(2 beta - 2) (1-s)/(1+s)^3,
        s = R^(2 beta).  Derivation: the kinetic part of the operator
        satisfies [-d^2/dR^2, R d/dR] = -2 d^2/dR^2, while a multiplication
        operator M(R) contributes -R M'(R); applied to alpha/R^2 this
        reproduces +2 alpha/R^2, and applied to -5 W^4 it yields
        +5 R (W^4)'.  Together: twice the full operator plus U as above.
        """
        p = self.params
        R = _check_positive(R)
        b = p.beta
        small = R <= 1.0
        out = np.empty_like(R)
        Rs = R[small]
        s = Rs ** (2.0 * b)
        out[small] = 30.0 * b**3 * Rs ** (2.0 * b - 2.0) * (1.0 - s) / (1.0 + s) ** 3
        Rl = R[~small]
        si = Rl ** (-2.0 * b)
        # R^(2b-2) (1-s)/(1+s)^3 = (R^(-4b-2) - R^(-2b-2)) / (1+1/s)^3
        out[~small] = (
            30.0
            * b**3
            * (Rl ** (-4.0 * b - 2.0) - Rl ** (-2.0 * b - 2.0))
            / (1.0 + si) ** 3
        )
        return out if out.shape else float(out)

    def dU(self, R):
        """dU/dR, by logarithmic differentiation of the closed form."""
        p = self.params
        Rarr = _check_positive(R)
        b = p.beta
        small = Rarr <= 1.0
        out = np.empty_like(Rarr)
        Rs = Rarr[small]
        s = Rs ** (2.0 * b)
        pref = 30.0 * b**3 * Rs ** (2.0 * b - 3.0) / (1.0 + s) ** 3
        out[small] = pref * (
            (2.0 * b - 2.0) * (1.0 - s)
            - 2.0 * b * s
            - 6.0 * b * s * (1.0 - s) / (1.0 + s)
        )
        # large-R branch: product rule on
        #   U = 30 b^3 (R^(-4b-2) - R^(-2b-2)) / (1 + R^(-2b))^3
        Rl = Rarr[~small]
        si = Rl ** (-2.0 * b)
        A = Rl ** (-4.0 * b - 2.0)
        B = Rl ** (-2.0 * b - 2.0)
        dA = (-4.0 * b - 2.0) * A / Rl
        dB = (-2.0 * b - 2.0) * B / Rl
        dsi = -2.0 * b * si / Rl
        out[~small] = 30.0 * b**3 * (
            (dA - dB) / (1.0 + si) ** 3 - 3.0 * (A - B) * dsi / (1.0 + si) ** 4
        )
        return out if out.shape else float(out)

    # -- operator applications (dense-grid helpers) ----------------------

    def apply_L(self, R, f, d2f):
        """Apply the linearized operator -f'' + V f given f'' samples."""
        return -d2f + self.V(R) * f


def eval_ground_state(params: PotentialParams, R):
    return ClosedForms(params).W(R)


def eval_zero_modes(params: PotentialParams, R):
    """Return (phi, theta, phi', theta') at R."""
    cf = ClosedForms(params)
    return cf.phi0(R), cf.theta0(R), cf.dphi0(R), cf.dtheta0(R)


def wronskian_zero_modes(params: PotentialParams, R):
    """Wronskian of the zero-mode pair, == 1 identically.

    Convention: W(phi, theta) = phi' theta - phi theta'.  This is the
    ordering under which the explicit pair above has unit Wronskian
    (the opposite ordering gives -1 everywhere).
    """
    phi, theta, dphi, dtheta = eval_zero_modes(params, R)
    return dphi * theta - phi * dtheta


def eval_commutator_potential(params: PotentialParams, R):
    return ClosedForms(params).U(R)


# ---------------------------------------------------------------------------
# Exponent lattice
# ---------------------------------------------------------------------------


def decay_base_powers(beta: float) -> tuple[float, ...]:
    """Base powers generating the decay lattice for a given beta.

    Zero entries (which occur when beta is 1, 2 or 3) are dropped: they
    generate nothing new.
    """
    raw = (beta, abs(beta - 1.0), abs(beta - 2.0), abs(beta - 3.0), 4.0 - beta)
    return tuple(sorted({p for p in raw if p > 1e-12}))


@dataclass
class ExponentLattice:
    """Increasing enumeration of nonnegative-integer combinations of base powers.

    The sequence starts at m_0 = 0, is strictly increasing after
    deduplication (tolerance 1e-12), and, being closed under addition,
    satisfies m_i + m_j >= m_(i+j).
    """

    base_powers: tuple[float, ...]
    _cache: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        powers = tuple(sorted({float(p) for p in self.base_powers if p > 1e-12}))
        if not powers:
            raise OutOfRange("lattice needs at least one positive base power")
        object.__setattr__(self, "base_powers", powers)

    @classmethod
    def for_params(cls, params: PotentialParams) -> "ExponentLattice":
        return cls(decay_base_powers(params.beta))

    def first(self, n: int) -> list[float]:
        """Return the first n lattice points m_0 < m_1 < ... (Dijkstra walk)."""
        if len(self._cache) >= n:
            return self._cache[:n]
        out: list[float] = []
        heap: list[float] = [0.0]
        seen: set[int] = set()
        tol = 1e-12

        def key(v: float) -> int:
            return round(v / tol)

        seen.add(key(0.0))
        while heap and len(out) < n:
            v = heapq.heappop(heap)
            # merge duplicates that slipped past the key rounding
            if out and v - out[-1] < tol:
                continue
            out.append(v)
            for p in self.base_powers:
                w = v + p
                k = key(w)
                if k not in seen:
                    seen.add(k)
                    heapq.heappush(heap, w)
        self._cache = out
        return out

    def index_below(self, cutoff: float) -> int:
        """Largest index I with m_I < cutoff."""
        n = 8
        while True:
            vals = self.first(n)
            if vals[-1] >= cutoff:
                return max(i for i, v in enumerate(vals) if v < cutoff)
            n *= 2


# ---------------------------------------------------------------------------
# Generalized multi-power series
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneralizedSeries:
    """f(R) = R^delta * sum over multi-indices I of coeff[I] * R^(I . p).

    ``coefficients`` maps tuples (i_1, ..., i_N) of nonnegative integers
    to real coefficients; ``base_powers`` is (p_1, ..., p_N).  The
    evaluator keeps terms whose induced power I.p does not exceed
    ``truncation_order * min(p)`` (i.e. ``truncation_order`` shells of the
    slowest base power).
    """

    delta: float
    base_powers: tuple[float, ...]
    coefficients: dict
    truncation_order: int = 64

    def __post_init__(self) -> None:
        if any(p <= 0 for p in self.base_powers):
            raise OutOfRange("base powers must be positive")
        if self.truncation_order < 0:
            raise OutOfRange("truncation_order must be >= 0")
        for idx in self.coefficients:
            if len(idx) != len(self.base_powers):
                raise OutOfRange(
                    f"multi-index {idx} does not match {len(self.base_powers)} powers"
                )

    def cutoff(self) -> float:
        return self.truncation_order * min(self.base_powers)

    def __call__(self, R):
        return eval_generalized_series(self, R)


def eval_generalized_series(series: GeneralizedSeries, R):
    R = np.asarray(R, dtype=float)
    if np.any(R <= 0.0):
        raise DomainError("series evaluation requires R > 0")
    cut = series.cutoff()
    powers = np.array(series.base_powers)
    kept = []
    for idx, c in series.coefficients.items():
        tot = float(np.dot(idx, powers))
        if tot <= cut + 1e-12:
            kept.append((tot, c))
    if not kept:
        out = np.zeros_like(R)
        return out if out.shape else 0.0
    kept.sort()
    tots = np.array([t for t, _ in kept])
    cs = np.array([c for _, c in kept])
    terms = cs * R[..., None] ** tots  # broadcast over sample points
    total = terms.sum(axis=-1)
    # divergence check on the outermost shell at the largest radius
    flatterms = np.atleast_2d(terms)
    last = np.abs(flatterms[..., -1]).max()
    scale = np.abs(total).max() + 1e-300
    if last / scale > 1e-8:
        warnings.warn(
            "last retained series shell still contributes "
            f"{last / scale:.2e} relatively; increase truncation_order",
            DivergenceWarning,
            stacklevel=2,
        )
    out = R**series.delta * total
    return out if out.shape else float(out)


def ground_state_series(params: PotentialParams, n_terms: int = 40) -> GeneralizedSeries:
    """Small-R expansion of the ground state as a GeneralizedSeries.

    W(R) = (3 beta^2)^(1/4) R^((beta-1)/2) (1 + R^(2 beta))^(-1/2); the
    binomial series of (1+u)^(-1/2) in u = R^(2 beta) yields coefficients
    on the base-power pair (2, 2*beta) with the first slot unused.
    """
    b = params.beta
    c0 = (3.0 * b * b) ** 0.25
    coeffs = {}
    binom = 1.0
    for k in range(n_terms):
        if k > 0:
            binom *= -(0.5 + (k - 1)) / k  # C(-1/2, k) recursion
        coeffs[(0, k)] = c0 * binom
    return GeneralizedSeries(
        delta=(b - 1.0) / 2.0,
        base_powers=(2.0, 2.0 * b),
        coefficients=coeffs,
        truncation_order=2 * n_terms,
    )
