"""Special functions and closed asymptotics of the conditioned-volume limits.

Centerpiece is psi, the unique positive solution of psi'' = psi^2 + psi with
psi -> infinity at 0 and psi -> 0 at infinity.  Three routes are provided:

* ``inversion``: psi = F^{-1} where F(x) = int_x^inf (2u^3/3 + u^2)^{-1/2} du,
  computed by adaptive quadrature up to a large cutoff plus the asymptotic
  series of F beyond it, then inverted by bracketed root finding;
* ``series``: the small-t expansion psi(t) = 6/t^2 - 1/2 + t^2/40 - t^4/1008
  + t^6/28800 + O(t^8);
* ``closed``: the candidate psi(t) = 3/(cosh t - 1), certified at import of
  first use by substituting into the ODE on a grid (residual <= 1e-10 via the
  exact cosh/sinh derivatives) and matching the series and both boundary
  behaviors.  Only after certification do downstream limits rely on it.

Also here: the tilt machinery Phi_t / h_t(infinity), the tilted (subcritical)
scheme, t(r, alpha), R(alpha) and the limit Laplace transforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .errors import InternalInconsistencyError, PreconditionError
from .schemes import Outcome, SchemeSpec, scheme_moments

# coefficients of psi(t) - 6/t^2 in powers of t^2
SERIES_COEFFS = (-0.5, 1.0 / 40.0, -1.0 / 1008.0, 1.0 / 28800.0)

_CUTOFF = 1.0e4  # quadrature upper end; the series tail takes over beyond


def _f_integrand(u):
    return 1.0 / math.sqrt(2.0 * u**3 / 3.0 + u * u)


def _f_tail(x):
    # sqrt(6) (x^-1/2 - x^-3/2/4 + 27/160 x^-5/2 - 135/896 x^-7/2 + ...)
    s = x**-0.5 - 0.25 * x**-1.5 + (27.0 / 160.0) * x**-2.5 - (135.0 / 896.0) * x**-3.5
    return math.sqrt(6.0) * s


def f_of(x):
    """F(x) = int_x^inf (2u^3/3 + u^2)^{-1/2} du, decreasing, F(0+) = +inf."""
    if x <= 0:
        raise PreconditionError("F is defined for x > 0")
    if x >= _CUTOFF:
        return _f_tail(x)
    # split at 1 to help the quadrature with the 1/u behavior near 0
    pieces = []
    if x < 1.0:
        pieces.append(quad(_f_integrand, x, 1.0, epsabs=1e-13, epsrel=1e-13, limit=200)[0])
        lo = 1.0
    else:
        lo = x
    pieces.append(quad(_f_integrand, lo, _CUTOFF, epsabs=1e-13, epsrel=1e-13, limit=200)[0])
    return math.fsum(pieces) + _f_tail(_CUTOFF)


def psi_series(t):
    t2 = t * t
    acc = 6.0 / t2
    pw = 1.0
    for c in SERIES_COEFFS:
        acc += c * pw
        pw *= t2
    return acc


def psi_closed(t):
    return 3.0 / (math.cosh(t) - 1.0)


def psi_inversion(t):
    """Invert F by bracketing + brentq; independent of the closed candidate."""
    if t <= 0:
        raise PreconditionError("psi is defined for t > 0")
    # bracket around the series-based guess (valid order of magnitude for all t)
    guess = max(psi_series(t), 1e-12) if t < 1.0 else 6.0 * math.exp(-t)
    lo, hi = guess, guess
    while f_of(lo) < t:  # F decreasing: need F(lo) >= t
        lo /= 4.0
        if lo < 1e-300:
            raise InternalInconsistencyError("failed to bracket psi from below")
    while f_of(hi) > t:
        hi *= 4.0
        if hi > 1e12:
            raise InternalInconsistencyError("failed to bracket psi from above")
    return brentq(lambda x: f_of(x) - t, lo, hi, xtol=1e-300, rtol=1e-15)


def psi_inversion_mp(t, dps=30):
    """High-precision inversion via mpmath; backs the coefficient-recovery oracle."""
    import mpmath as mp

    with mp.workdps(dps):
        tt = mp.mpf(t)
        cutoff = mp.mpf(_CUTOFF)

        def F(x):
            tail = mp.sqrt(6) * (
                cutoff**-0.5
                - cutoff**-1.5 / 4
                + mp.mpf(27) / 160 * cutoff**-2.5
                - mp.mpf(135) / 896 * cutoff**-3.5
                + mp.mpf(315) / 2048 * cutoff**-4.5
            )
            integ = mp.quad(lambda u: 1 / mp.sqrt(2 * u**3 / 3 + u * u), [x, 1, cutoff])
            return integ + tail

        # Newton on F(x) - t = 0 from the float64 solution; F' = -(2x^3/3+x^2)^-1/2
        x = mp.mpf(psi_inversion(float(t)))
        for _ in range(8):
            step = (F(x) - tt) * mp.sqrt(2 * x**3 / 3 + x * x)
            x = x + step
            if abs(step) < x * mp.mpf(10) ** (-(dps - 2)):
                break
        return x


def recover_series_coefficients(n_coeffs=4, dps=30):
    """Taylor coefficients of psi(t) - 6/t^2 in t^2, refitted from the inversion.

    Richardson-style fit: evaluate the high-precision inversion on a geometric
    ladder of nodes and solve the Vandermonde system in u = t^2 with four
    guard coefficients beyond the requested ones (they absorb the truncation,
    whose scale is set by the (2 pi)^-2k decay of the true coefficients).
    """
    import mpmath as mp

    m = n_coeffs + 4
    nodes = [0.1 * 1.35**j for j in range(m)]
    with mp.workdps(dps):
        vals = [psi_inversion_mp(t, dps=dps) - 6 / mp.mpf(t) ** 2 for t in nodes]
        A = mp.matrix(m, m)
        for i, t in enumerate(nodes):
            u = mp.mpf(t) ** 2
            for j in range(m):
                A[i, j] = u**j
        c = mp.lu_solve(A, mp.matrix(vals))
    return [float(c[j]) for j in range(n_coeffs)]


@dataclass(frozen=True)
class OdeEval:
    t: float
    psi: float
    method: str
    est_error: float


_closed_certified = None


def certify_closed_form(n_grid=200):
    """Certify psi(t) = 3/(cosh t - 1) against the ODE, series and boundaries.

    The paper only provides the implicit F-representation and the series; the
    closed form is usable downstream only once this check passes.
    """
    ts = np.linspace(0.2, 8.0, n_grid)
    c, s = np.cosh(ts), np.sinh(ts)
    psi = 3.0 / (c - 1.0)
    # exact second derivative of the candidate: 3 (c + 2) / (c - 1)^2
    psi_dd = 3.0 * (c + 2.0) / (c - 1.0) ** 2
    ode_resid = float(np.max(np.abs(psi_dd - psi * psi - psi) / (1.0 + psi * psi)))
    if ode_resid > 1e-10:
        return False
    # series match on small t
    for t in np.linspace(0.05, 0.3, 20):
        if abs(psi_closed(t) - psi_series(t)) > 1e-8:
            return False
    # boundary behaviors: t^2 psi -> 6 at 0+, psi e^t -> constant (= 6) at infinity
    if abs(1e-4**2 * psi_closed(1e-4) - 6.0) > 1e-6:
        return False
    if abs(psi_closed(40.0) * math.exp(40.0) - 6.0) > 1e-6:
        return False
    return True


def _ensure_certified():
    global _closed_certified
    if _closed_certified is None:
        _closed_certified = certify_closed_form()
    if not _closed_certified:
        raise InternalInconsistencyError("closed-form candidate for psi failed certification")


def psi(t, method="closed") -> OdeEval:
    """Evaluate psi(t) for t > 0 by the requested method."""
    if t <= 0:
        raise PreconditionError("psi requires t > 0")
    if method == "closed" or method == "closed_candidate":
        _ensure_certified()
        return OdeEval(t, psi_closed(t), "closed_candidate", 1e-14 * psi_closed(t))
    if method == "series":
        # first omitted term is O(t^8) with coefficient ~ (2 pi)^-8
        return OdeEval(t, psi_series(t), "series", 8e-7 * t**8)
    if method == "inversion":
        val = psi_inversion(t)
        return OdeEval(t, val, "inversion", 1e-11 * (1.0 + val))
    raise PreconditionError(f"unknown psi method {method!r}")


# ---------------------------------------------------------------------------
# limits of Theorem-4 type


def laplace_limit_gt(alpha, sigma2, method="closed"):
    """Limit of E[exp(-t(r,a) sum D) | sup Lambda > r]: (2a/s^2) psi(sqrt(12a/s^2))."""
    if alpha < 0:
        raise PreconditionError("alpha must be >= 0")
    if alpha == 0.0:
        return 1.0
    u = alpha / sigma2
    return 2.0 * u * psi(math.sqrt(12.0 * u), method).psi


def laplace_limit_map_volume(alpha, sigma2, method="closed"):
    """Map-volume reading of the same limit: E[exp(-2 alpha^2 n)]."""
    return laplace_limit_gt(alpha, sigma2, method)


def big_R(alpha, sigma2, eta2, method="closed"):
    """R(alpha) = (6 eta^2/sigma^2)(2a/s^2 psi(sqrt(12a/s^2)) - 1 + a/s^2); R(0) = 0."""
    if alpha < 0:
        raise PreconditionError("alpha must be >= 0")
    if alpha == 0.0:
        return 0.0
    u = alpha / sigma2
    return (6.0 * eta2 / sigma2) * (laplace_limit_gt(alpha, sigma2, method) - 1.0 + u)


def big_R_series(alpha, sigma2, eta2):
    """Leading series (6 eta^2/s^2)(3/5 u^2 - 2/7 u^3 + 3/25 u^4), u = alpha/s^2."""
    u = alpha / sigma2
    return (6.0 * eta2 / sigma2) * (0.6 * u**2 - (2.0 / 7.0) * u**3 + 0.12 * u**4)


def t_of(r, alpha, sigma2, eta2):
    """t(r, alpha) = alpha^2/(2 sigma^2) * (6 eta^2 / (sigma^2 r^2))^2."""
    if r <= 0:
        raise PreconditionError("t_of requires r > 0")
    if alpha < 0:
        raise PreconditionError("alpha must be >= 0")
    return alpha**2 / (2.0 * sigma2) * (6.0 * eta2 / (sigma2 * r * r)) ** 2


# ---------------------------------------------------------------------------
# tilting


@dataclass(frozen=True)
class TiltData:
    t: float
    h_inf: float
    iterations: int
    residual: float


def _tabulated_only(spec):
    if spec.kind != "tabulated":
        raise PreconditionError("this operation needs a tabulated scheme")


def phi_t(spec: SchemeSpec, t, x):
    """Phi_t(x) = E[e^{-tD} x^{chi(R)}], exact over tabulated outcomes."""
    _tabulated_only(spec)
    return math.fsum(
        o.prob * math.exp(-t * o.weight) * x ** len(o.atoms) for o in spec.outcomes
    )


def phi_t_prime(spec: SchemeSpec, t, x):
    _tabulated_only(spec)
    return math.fsum(
        o.prob * math.exp(-t * o.weight) * len(o.atoms) * x ** (len(o.atoms) - 1)
        for o in spec.outcomes
        if len(o.atoms) > 0
    )


def h_t_infinity(spec: SchemeSpec, t) -> TiltData:
    """Fixed point of Phi_t on [0, 1]: the Laplace transform of the total weight.

    Phi_t is convex with Phi_t(0) > 0, so the fixed point is unique in [0, 1];
    located by bracketed root finding on x - Phi_t(x).
    """
    _tabulated_only(spec)
    if t < 0:
        raise PreconditionError("t must be >= 0")
    if t == 0.0:
        return TiltData(0.0, 1.0, 0, 0.0)

    def g(x):
        return x - phi_t(spec, t, x)

    if g(1.0) <= 0.0:
        # E[e^{-tD}] = 1 (all weights zero): the walk is never discounted
        return TiltData(t, 1.0, 0, abs(g(1.0)))
    iters = 0

    def g_counted(x):
        nonlocal iters
        iters += 1
        return g(x)

    root = brentq(g_counted, 0.0, 1.0, xtol=1e-16, rtol=8.9e-16)
    return TiltData(t, float(root), iters, abs(g(root)))


def tilted_scheme(spec: SchemeSpec, t) -> SchemeSpec:
    """Reweight outcomes by e^{-tD} h_t(inf)^{chi(R)-1}: the subcritical tilt.

    The tilted mean offspring equals Phi_t'(h_t(inf)) <= 1.
    """
    _tabulated_only(spec)
    if t == 0.0:
        return spec
    h = h_t_infinity(spec, t).h_inf
    weights = [
        o.prob * math.exp(-t * o.weight) * h ** (len(o.atoms) - 1) for o in spec.outcomes
    ]
    total = math.fsum(weights)  # equals Phi_t(h)/h = 1 up to roundoff
    outs = [
        Outcome(w / total, o.atoms, o.lam, o.weight)
        for w, o in zip(weights, spec.outcomes)
    ]
    return SchemeSpec.tabulated(outs)


def tilted_mean_offspring(spec: SchemeSpec, t):
    """Mean offspring of the tilted scheme, both directly and via Phi_t'(h_inf)."""
    tilted = tilted_scheme(spec, t)
    direct = scheme_moments(tilted).m
    via_phi = phi_t_prime(spec, t, h_t_infinity(spec, t).h_inf)
    return direct, via_phi
