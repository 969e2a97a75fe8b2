import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import brwlab as bl


@pytest.fixture(scope="session")
def binary():
    return bl.binary_pm1()


@pytest.fixture(scope="session")
def quad_data():
    return bl.solve_partition(bl.BoltzmannWeights.quadrangulations())


@pytest.fixture(scope="session")
def quad_mobile(quad_data):
    return bl.mobile_spec(quad_data, "vertices")


@pytest.fixture(scope="session")
def three_type_spec():
    """Critical centered 3-type cyclic scheme with Perron vector (2, 1, 1)."""
    from brwlab.multitype import MultitypeSpec, TabulatedTypedLaw

    law_a = TabulatedTypedLaw([(1.0, [(1, "B"), (-1, "B")], 1, 1.0)])
    law_b = TabulatedTypedLaw(
        [
            (1.0 / 3.0, [(1, "C")], 1, 1.0),
            (1.0 / 3.0, [(0, "C")], 0, 1.0),
            (1.0 / 3.0, [(-1, "C")], 0, 1.0),
        ]
    )
    law_c = TabulatedTypedLaw(
        [
            (0.25, [(2, "A")], 2, 1.0),
            (0.25, [(-2, "A")], 0, 1.0),
            (0.5, [], 0, 1.0),
        ]
    )
    return MultitypeSpec(("A", "B", "C"), {"A": law_a, "B": law_b, "C": law_c})
