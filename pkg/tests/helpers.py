"""Exhaustive enumeration oracles, kept independent of the library's solvers."""

import math
from fractions import Fraction
from functools import lru_cache

from brwlab.schemes import SchemeSpec


def enumerate_sup_prob(spec, n_gens, r):
    """P(every decoration in generations 0..n_gens-1 stays <= r), by recursion
    over outcome assignments (exact float arithmetic over tabulated outcomes)."""
    outs = spec.outcomes

    @lru_cache(maxsize=None)
    def srv(depth, slack):
        if depth == 0:
            return 1.0
        total = 0.0
        for o in outs:
            if o.lam > slack:
                continue
            prod = o.prob
            for a in o.atoms:
                prod *= srv(depth - 1, slack - a)
                if prod == 0.0:
                    break
            total += prod
        return total

    return srv(n_gens, r)


def palm_expectation(spec, f, threshold=math.inf, R=math.inf):
    """Brute-force E[int f(x, 1_E) dchi(x)] over a tabulated scheme."""
    total = 0.0
    for o in spec.outcomes:
        ind = 1 if (len(o.atoms) <= threshold and o.lam <= R) else 0
        for a in o.atoms:
            total += o.prob * f(float(a), ind)
    return total


def critical_tabulated_family():
    """Tabulated schemes with mean offspring exactly 1 (up to 10 outcomes)."""
    fam = [
        SchemeSpec.tabulated([(0.5, (), 0, 1.0), (0.5, (1, -1), 1, 1.0)]),
        SchemeSpec.tabulated(
            [
                (0.5, (), 0, 1.0),
                (0.25, (2, -1, -1), 2, 0.5),
                (0.25, (0,), 1, 2.0),
            ]
        ),
        SchemeSpec.tabulated(
            [
                (0.4, (), 0, 1.0),
                (0.3, (1,), 1, 1.0),
                (0.2, (-1, -1), 0, 1.0),
                (0.1, (3, -1, 1), 3, 1.0),
            ]
        ),
    ]
    sizes = [0, 1, 2, 3, 4, 1, 2, 0, 3, 5]
    probs = [0.48, 0.2] + [0.04] * 8
    atoms_of = {
        0: (),
        1: (1,),
        2: (1, -1),
        3: (2, 0, -2),
        4: (1, 1, -1, -1),
        5: (3, 1, 0, -2, -2),
    }
    outs = []
    for p, s in zip(probs, sizes):
        atoms = atoms_of[s]
        outs.append((p, atoms, max((0, *atoms)) if atoms else 0, 1.0))
    fam.append(SchemeSpec.tabulated(outs))
    return fam


def exact_binary_h(r):
    """Closed form for the binary +/-1 scheme, as an exact Fraction.

    Certify before use: h(r) = 1/2 + h(r-1) h(r+1)/2 with h(0) = 1/2,
    h(r<0) = 0 (see certify_exact_binary_h).
    """
    if r < 0:
        return Fraction(0)
    return Fraction((r + 1) * (r + 6), (r + 3) * (r + 4))


def certify_exact_binary_h(r_max=400):
    half = Fraction(1, 2)
    for r in range(0, r_max):
        if exact_binary_h(r) != half + half * exact_binary_h(r - 1) * exact_binary_h(r + 1):
            return False
    return exact_binary_h(0) == half


def bridge_label_moments_exact(bridges):
    """(E[sum labels], E[sum labels^2], E[(max path)^4]) over an enumeration."""
    n = len(bridges)
    s1 = sum(Fraction(sum(b.labels)) for b in bridges) / n
    s2 = sum(Fraction(sum(x * x for x in b.labels)) for b in bridges) / n
    m4 = sum(Fraction(max(b.path) ** 4) for b in bridges) / n
    return s1, s2, m4
