import math
from fractions import Fraction

import numpy as np
import pytest

import brwlab as bl
import brwlab.analysis as an
from brwlab.errors import PreconditionError
from brwlab.gridsolve import solve_h_grid
from brwlab.schemes import OffspringLaw, StepLaw

from helpers import certify_exact_binary_h, critical_tabulated_family, enumerate_sup_prob, exact_binary_h


def test_rejects_non_tabulated():
    spec = bl.SchemeSpec.iid_children(OffspringLaw.binary_critical(), StepLaw.gaussian(1.0))
    with pytest.raises(PreconditionError):
        solve_h_grid(spec, 10)


def test_binary_h0_exact(binary):
    sol = solve_h_grid(binary, 60, 0.0, tol=1e-12)
    assert sol.h[0] == 0.5
    assert sol.converged
    assert sol.residual <= 1e-12


def test_solution_basic_invariants(binary):
    for t in (0.0, 1e-3):
        sol = solve_h_grid(binary, 80, t, tol=1e-12)
        assert 0.0 < sol.h[0] < 1.0
        assert np.all(np.diff(sol.h) >= -1e-15)  # nondecreasing in r
        assert np.all(sol.h <= sol.start_value + 1e-15)
        assert sol.boundary_bias >= 0.0


def test_matches_certified_closed_form(binary):
    # the closed form is certified against the recursion before being trusted
    assert certify_exact_binary_h(300)
    sol = solve_h_grid(binary, 240, 0.0, tol=1e-13)
    for r in (0, 1, 5, 10, 50, 100):
        assert abs(float(sol.h[r]) - float(exact_binary_h(r))) <= 2e-8


def test_sweeps_match_generation_enumeration():
    # sweep n equals the survival probability restricted to n generations
    for spec in critical_tabulated_family()[:3]:
        pad = spec.max_step_abs
        r_max = 30
        for n in (1, 2, 3):
            sol = solve_h_grid(spec, r_max, 0.0, tol=1e-300, max_iters=n, floor_coeff=0.0)
            for r in (0, 1, 2, 5, 9):
                if r + n * pad > r_max:
                    continue
                assert abs(float(sol.h[r]) - enumerate_sup_prob(spec, n, r)) <= 1e-12


def test_monotone_bracketing(binary):
    sol = solve_h_grid(binary, 50, 0.0, tol=1e-300, max_iters=40, floor_coeff=0.0,
                       history_every=1)
    hist = sol.history
    for a, b in zip(hist, hist[1:]):
        assert np.all(b <= a + 1e-15)
    ref = solve_h_grid(binary, 50, 0.0, tol=1e-13).h
    for h in hist:
        assert np.all(h >= ref - 1e-12)


def test_distance_to_fixed_point_decays_like_inverse_n(binary):
    ref = solve_h_grid(binary, 300, 0.0, tol=1e-13).h
    pts = []
    for n in (100, 200, 400, 800, 1600):
        sol = solve_h_grid(binary, 300, 0.0, tol=1e-300, max_iters=n, floor_coeff=0.0)
        pts.append((n, float(np.max(np.abs(sol.h - ref)))))
    slope, _ = bl.loglog_slope(pts)
    assert -1.15 <= slope <= -0.85


def test_last_sweep_update_decays_like_inverse_n_squared(binary):
    pts = []
    for n in (100, 200, 400, 800, 1600):
        sol = solve_h_grid(binary, 300, 0.0, tol=1e-300, max_iters=n, floor_coeff=0.0)
        pts.append((n, sol.residual))
    slope, _ = bl.loglog_slope(pts)
    assert -2.2 <= slope <= -1.8


def test_negative_levels_are_zero_through_pdf():
    # deterministic extinction: g(0) = h(0) = 1 and nothing elsewhere
    spec = bl.SchemeSpec.tabulated([(1.0, (), 0, 1.0)])
    sol = solve_h_grid(spec, 10, 0.0, tol=1e-12, floor_coeff=0.0, max_iters=50)
    g = bl.pdf_from_grid(sol)
    assert g[0] == 1.0
    assert np.all(g[1:] == 0.0)


def test_pdf_binary(binary):
    sol = solve_h_grid(binary, 240, 0.0, tol=1e-13)
    g = bl.pdf_from_grid(sol)
    assert abs(g[0] - 0.5) <= 1e-12
    assert np.all(g >= -1e-15)
    assert abs(g.sum() - sol.h[-1]) <= 1e-10
    r = 100
    exact = float(exact_binary_h(r) - exact_binary_h(r - 1))
    assert abs(float(g[r]) - exact) <= 1e-10
    assert 10.2 <= r**3 * float(g[r]) <= 13.8


def test_pdf_rejects_tilted(binary):
    sol = solve_h_grid(binary, 20, 0.1, tol=1e-10, floor_coeff=0.0, max_iters=2000)
    with pytest.raises(PreconditionError):
        bl.pdf_from_grid(sol)


def test_tilted_solution_approaches_h_inf(binary):
    t = 1e-3
    sol = solve_h_grid(binary, 150, t, tol=1e-13)
    h_inf = sol.start_value
    h = sol.h
    r = 150
    # top-of-grid gap obeys the w_t upper bound against the untilted solve
    sol0 = solve_h_grid(binary, 150, 0.0, tol=1e-13)
    w = 1.0 / sol0.h[r] - 1.0
    bound = w / (sol0.h[r] - (1.0 - h_inf))
    w_t = h_inf / h[r] - 1.0
    assert 0.0 <= w_t <= bound + 1e-15


def test_theorem4_functionals_alpha_zero(binary):
    res = bl.theorem4_functionals(binary, 30, 0.0, r_max=120, tol=1e-12)
    assert res["scaled_gap"] == 0.0
    assert res["cond_gt"] == 1.0


def test_theorem4_functionals_binary_r100(binary):
    res = bl.theorem4_functionals(binary, 100, 1.0, r_max=400, tol=1e-12)
    assert abs(res["cond_gt"] - 0.4003) <= 0.10 * 0.4003
    assert abs(res["scaled_gap"] - 2.402) <= 0.15 * 2.402


def test_theorem4_requires_critical():
    sub = bl.SchemeSpec.tabulated([(0.6, (), 0, 1.0), (0.4, (1, -1), 1, 1.0)])  # m = 0.8
    with pytest.raises(PreconditionError):
        bl.theorem4_functionals(sub, 10, 1.0, r_max=40)
