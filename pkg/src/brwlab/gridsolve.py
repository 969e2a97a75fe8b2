"""Deterministic fixed-point solvers for the convolution equations on Z.

h_t(r) = E[e^{-tD} prod_i h_t(r - X_i) 1{Lambda <= r}] is iterated as a
synchronous (Jacobi) sweep T_t over the grid r = 0..r_max, starting from the
constant h == 1 (t = 0) or h == h_t(infinity).  Sweep n then equals the exact
probability/transform restricted to the first n generations, so the iterates
decrease monotonically to the fixed point and every sweep is an upper bound.

Boundary handling: arguments below 0 evaluate to 0 (Lambda >= 0 a.s.),
arguments above r_max evaluate to the start value, which preserves the
upper-bound property; the induced error is recorded as `boundary_bias`
(start - h(r_max), a bound on what the top of the grid still hides).

The stopping rule requires residual < tol AND a sweep count floor
proportional to r_max^2: survival to depth ~ r^2 contributes at the same
scale as the answer, so a small residual alone underestimates remaining bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError
from .schemes import SchemeSpec
from . import analysis


@dataclass
class GridSolution:
    t: float
    r_max: int
    h: np.ndarray
    iterations: int
    residual: float
    boundary_bias: float
    start_value: float
    converged: bool

    def w(self):
        """w_t(r) = h_t(inf)/h_t(r) - 1 (= 1/h - 1 when t = 0)."""
        return self.start_value / self.h - 1.0


def solve_h_grid(spec: SchemeSpec, r_max, t=0.0, tol=1e-12, max_iters=None,
                 floor_coeff=1.0, history_every=0) -> GridSolution:
    """Iterate the convolution map to its fixed point on r = 0..r_max."""
    if spec.kind != "tabulated":
        raise PreconditionError("grid solver needs a tabulated (integer-lattice) scheme")
    if tol <= 0:
        raise PreconditionError("tol must be > 0")
    if t < 0:
        raise PreconditionError("t must be >= 0")
    r_max = int(r_max)
    if r_max < 0:
        raise PreconditionError("r_max must be >= 0")
    start = 1.0 if t == 0.0 else analysis.h_t_infinity(spec, t).h_inf
    pad = max(spec.max_step_abs, 1)
    size = r_max + 1
    coef = np.array([o.prob * math.exp(-t * o.weight) for o in spec.outcomes])
    lams = [min(o.lam, r_max + 1) for o in spec.outcomes]
    atoms = [o.atoms for o in spec.outcomes]

    h = np.full(size, start)
    P = np.empty(size + 2 * pad)
    P[:pad] = 0.0
    P[pad + size:] = start
    min_iters = int(math.ceil(floor_coeff * r_max * r_max))
    if max_iters is None:
        max_iters = max(4 * min_iters, min_iters + 1_000_000)
    history = []
    new = np.empty(size)
    it = 0
    residual = math.inf
    while it < max_iters:
        P[pad:pad + size] = h
        new[:] = 0.0
        for c, lam, ats in zip(coef, lams, atoms):
            if lam > r_max:
                continue
            if not ats:
                new[lam:] += c
                continue
            prod = P[pad - ats[0]: pad - ats[0] + size]
            for a in ats[1:]:
                prod = prod * P[pad - a: pad - a + size]
            new[lam:] += c * prod[lam:]
        residual = float(np.max(np.abs(new - h)))
        h, new = new.copy(), new
        it += 1
        if history_every and it % history_every == 0:
            history.append(h.copy())
        if residual < tol and it >= min_iters:
            break
    sol = GridSolution(
        t=t,
        r_max=r_max,
        h=h,
        iterations=it,
        residual=residual,
        boundary_bias=float(start - h[-1]),
        start_value=start,
        converged=residual < tol,
    )
    if history_every:
        sol.history = history
    return sol


def pdf_from_grid(sol: GridSolution) -> np.ndarray:
    """g(r) = h(r) - h(r-1) with h(-1) = 0; needs the untilted (t = 0) solution."""
    if sol.t != 0.0:
        raise PreconditionError("pdf_from_grid needs a t = 0 solution")
    return np.diff(sol.h, prepend=0.0)


def theorem4_functionals(spec: SchemeSpec, r, alpha, r_max=None, tol=1e-12,
                         floor_coeff=1.0):
    """Deterministic Theorem-4 functionals at level r.

    scaled_gap = r^2 (1 - h_t(r)/h(r))           -> R(alpha)
    cond_gt    = (h_t(inf) - h_t(r))/(1 - h(r))  -> (2a/s^2) psi(sqrt(12a/s^2))
    with t = t(r, alpha) computed from the scheme's analytic moments.
    """
    mom = spec.moments()
    if abs(mom.m - 1.0) > 1e-9:
        raise PreconditionError(f"scheme not critical: m={mom.m}")
    r = int(r)
    if r_max is None:
        r_max = max(4 * r, 200)
    if r > r_max:
        raise PreconditionError("need r <= r_max")
    t = analysis.t_of(r, alpha, mom.sigma2, mom.eta2)
    sol0 = solve_h_grid(spec, r_max, 0.0, tol=tol, floor_coeff=floor_coeff)
    solt = solve_h_grid(spec, r_max, t, tol=tol, floor_coeff=floor_coeff)
    h_r = float(sol0.h[r])
    ht_r = float(solt.h[r])
    return {
        "t": t,
        "alpha": float(alpha),
        "r": r,
        "scaled_gap": r * r * (1.0 - ht_r / h_r),
        "cond_gt": (solt.start_value - ht_r) / (1.0 - h_r),
        "h_r": h_r,
        "ht_r": ht_r,
        "h_t_inf": solt.start_value,
        "boundary_bias_t0": sol0.boundary_bias,
        "boundary_bias_t": solt.boundary_bias,
        "iterations": (sol0.iterations, solt.iterations),
    }
