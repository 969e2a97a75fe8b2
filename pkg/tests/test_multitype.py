import math

import numpy as np
import pytest

import brwlab as bl
from brwlab.errors import ConfigurationError, PreconditionError
from brwlab.multitype import (
    MultitypeSpec,
    TabulatedTypedLaw,
    mean_matrices,
    perron,
    reduced_one_step,
    reduced_params,
)


def single_type_binary():
    law = TabulatedTypedLaw([(0.5, [], 0, 1.0), (0.5, [(1, "x"), (-1, "x")], 1, 1.0)])
    return MultitypeSpec(("x",), {"x": law})


def test_validation():
    with pytest.raises(ConfigurationError):
        TabulatedTypedLaw([(0.9, [], 0, 1.0)])
    with pytest.raises(ConfigurationError):
        TabulatedTypedLaw([(1.0, [(2, "x")], 1, 1.0)])  # lambda below sup
    one = TabulatedTypedLaw([(1.0, [(0, "x")], 0, 1.0)])
    with pytest.raises(ConfigurationError):
        MultitypeSpec(("x",), {"x": one})  # degenerate: always exactly one child


def test_mean_matrices_single_type():
    mats = mean_matrices(single_type_binary(), "x")
    assert mats.M.tolist() == [[1.0]]
    assert mats.N.tolist() == [[0.0]]
    assert mats.O.tolist() == [[1.0]]
    assert mats.M_tilde.tolist() == [[0.0]]


def test_mean_matrices_childless_type_row_is_zero():
    laws = {
        "a": TabulatedTypedLaw([(0.5, [(0, "b"), (0, "b")], 0, 1.0), (0.5, [], 0, 1.0)]),
        "b": TabulatedTypedLaw([(1.0, [(1, "a")], 1, 1.0), ]),
    }
    spec = MultitypeSpec(("a", "b"), laws)
    mats = mean_matrices(spec)
    assert mats.M.tolist() == [[0.0, 1.0], [1.0, 0.0]]
    # now make b childless: the row must vanish (perron will then reject it)
    laws["b"] = TabulatedTypedLaw([(0.5, [], 0, 1.0), (0.5, [], 0, 1.0)])
    spec2 = MultitypeSpec(("a", "b"), laws)
    assert mean_matrices(spec2).M[1].tolist() == [0.0, 0.0]
    with pytest.raises(PreconditionError, match="reducible"):
        perron(mean_matrices(spec2).M, spec2.types)


def test_mobile_mean_matrices(quad_mobile):
    mats = mean_matrices(quad_mobile, "V")
    assert np.allclose(mats.M, [[0.0, 1.0], [1.0, 0.0]], atol=1e-12)
    assert np.allclose(mats.N, 0.0, atol=1e-15)
    assert abs(mats.O[1, 0] - 2.0 / 3.0) <= 1e-12


def test_perron_permutation_and_scalar():
    rho, a, b = perron(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert abs(rho - 1.0) <= 1e-12
    assert np.allclose(a, [1.0, 1.0]) and np.allclose(b, [1.0, 1.0])
    rho, _, _ = perron(np.array([[1.0]]))
    assert abs(rho - 1.0) <= 1e-12


def test_perron_characteristic_value():
    rho, a, b = perron(np.array([[0.0, 0.5], [1.0, 0.0]]))
    assert abs(rho - 1.0 / math.sqrt(2.0)) <= 1e-12


def test_perron_eigen_residuals(three_type_spec):
    mats = mean_matrices(three_type_spec, "A")
    rho, a, b = perron(mats.M, three_type_spec.types)
    assert np.max(np.abs(mats.M @ b - rho * b)) <= 1e-10 * np.max(np.abs(b))
    assert np.max(np.abs(mats.M.T @ a - rho * a)) <= 1e-10 * np.max(np.abs(a))
    assert abs(rho - 1.0) <= 1e-9
    assert np.allclose(b, [2.0, 1.0, 1.0], atol=1e-9)


def test_reduced_params_single_type_collapses_to_monotype():
    p = reduced_params(single_type_binary(), "x")
    assert abs(p.rho - 1.0) <= 1e-12
    assert abs(p.drift) <= 1e-12
    assert abs(p.eta2 - 1.0) <= 1e-12
    assert abs(p.mean_weight - 1.0) <= 1e-12


def test_reduced_params_mobile(quad_mobile):
    p = reduced_params(quad_mobile, "V")
    assert abs(p.rho - 1.0) <= 1e-9
    assert abs(p.drift) <= 1e-10
    assert abs(p.eta2 - 2.0 / 3.0) <= 1e-10
    assert p.eta2 > 0.0
    assert np.allclose(p.boundary_means, [1.0, 1.0], atol=1e-9)


def test_reduced_params_zero_displacements_zero_drift():
    laws = {
        "a": TabulatedTypedLaw([(0.5, [(0, "b"), (0, "b")], 0, 1.0), (0.5, [], 0, 1.0)]),
        "b": TabulatedTypedLaw([(1.0, [(0, "a")], 0, 1.0), ]),
    }
    spec = MultitypeSpec(("a", "b"), laws)
    p = reduced_params(spec, "a")
    assert p.drift == 0.0


def test_reduced_params_rejects_noncritical():
    laws = {
        "a": TabulatedTypedLaw([(0.4, [(0, "b"), (0, "b")], 0, 1.0), (0.6, [], 0, 1.0)]),
        "b": TabulatedTypedLaw([(1.0, [(0, "a")], 0, 1.0), ]),
    }
    spec = MultitypeSpec(("a", "b"), laws)
    with pytest.raises(PreconditionError, match="not critical"):
        reduced_params(spec, "a")


def test_reduced_params_three_type(three_type_spec):
    p = reduced_params(three_type_spec, "A")
    assert abs(p.rho - 1.0) <= 1e-9
    assert abs(p.drift) <= 1e-10
    assert p.eta2 > 0.0
    assert np.allclose(p.boundary_means, [1.0, 0.5, 0.5], atol=1e-9)
    # MC one-step displacement moments agree with the matrix formulas
    rng = bl.stream(41)
    disps, counts = [], []
    n = 20_000
    for _ in range(n):
        d = reduced_one_step(three_type_spec, "A", rng)
        disps.extend(d)
        counts.append(len(d))
    arr = np.asarray(disps, dtype=float)
    mean_children = np.mean(counts)
    assert abs(mean_children - 1.0) <= 4 * np.std(counts, ddof=1) / math.sqrt(n)
    se_mean = arr.std(ddof=1) / math.sqrt(len(arr))
    assert abs(arr.mean() - 0.0) <= 4 * se_mean
    per_tree = (arr**2).sum() / n
    # crude SE for the per-tree sum of squares
    sq = np.zeros(n)
    i = 0
    for j, c in enumerate(counts):
        sq[j] = float(np.sum(arr[i:i + c] ** 2))
        i += c
    se_sq = sq.std(ddof=1) / math.sqrt(n)
    assert abs(per_tree - p.eta2) <= 4 * se_sq


def test_simulate_reduced_single_type_is_identity():
    spec = single_type_binary()
    rng = bl.stream(43)
    for _ in range(200):
        st = bl.simulate_reduced(spec, "x", bl.SimCaps(max_nodes=5_000), rng)
        assert st.total_weight == pytest.approx(st.progeny)  # weights are 1


def test_simulate_reduced_mobile_conservation(quad_mobile):
    rng = bl.stream(47)
    saw_root_only = False
    for _ in range(800):
        st = bl.simulate_reduced(quad_mobile, "V", bl.SimCaps(max_nodes=20_000), rng)
        # D_V = 1, D_F = 0: total weight counts the reduced vertices
        assert st.total_weight == st.progeny
        if st.progeny == 1:
            saw_root_only = True
    assert saw_root_only


def test_simulate_reduced_three_type_conservation(three_type_spec):
    rng = bl.stream(53)
    for _ in range(500):
        bl.simulate_reduced(three_type_spec, "A", bl.SimCaps(max_nodes=20_000), rng)
    # conservation asserted inside simulate_reduced; reaching here is the test


def test_reduced_offspring_criticality(quad_mobile):
    rng = bl.stream(59)
    n = 20_000
    counts = [len(reduced_one_step(quad_mobile, "V", rng)) for _ in range(n)]
    se = np.std(counts, ddof=1) / math.sqrt(n)
    assert abs(np.mean(counts) - 1.0) <= 4 * se


def test_boundary_mean_check(quad_mobile, three_type_spec):
    res = bl.boundary_mean_check(quad_mobile, "V", "V", 200, seed=1)
    assert res["mc_mean"] == 1.0 and res["predicted"] == 1.0
    res = bl.boundary_mean_check(quad_mobile, "V", "F", 2_000, seed=2)
    assert res["predicted"] == 1.0
    assert abs(res["mc_mean"] - 1.0) <= 4 * max(res["se"], 1e-12)
    res = bl.boundary_mean_check(three_type_spec, "A", "B", 4_000, seed=3)
    assert abs(res["predicted"] - 0.5) <= 1e-9
    assert abs(res["mc_mean"] - res["predicted"]) <= 4 * res["se"]


def test_multitype_json_round_trip(three_type_spec):
    d = three_type_spec.to_json_dict()
    again = MultitypeSpec.from_json_dict(d)
    assert again.types == three_type_spec.types
    assert again.to_json_dict() == d
