"""Reproduction schemes of the decorated branching random walk.

A scheme is the joint law of (chi, Lambda, D): chi is the point process of
children displacements, Lambda >= max(0, sup chi) is the decoration mark and
D >= 0 the vertex weight.  Tabulated schemes enumerate finitely many
integer-valued outcomes and back every exact oracle in the test suite; the
parametric kinds (`iid_children`, `shared_step`) are simulator conveniences.
Atoms and Lambda of tabulated schemes are integers by design so that the grid
solver and the brute-force enumeration oracles are exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, PreconditionError

PROB_TOL = 1e-12


def _as_prob_array(pairs):
    values = np.asarray([p["value"] for p in pairs], dtype=float)
    probs = np.asarray([p["prob"] for p in pairs], dtype=float)
    return values, probs


@dataclass(frozen=True)
class Pmf:
    """Finite probability mass function with cached cumulative weights."""

    values: tuple
    probs: tuple

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if len(probs) == 0:
            raise ConfigurationError("empty pmf")
        if np.any(probs < 0):
            raise ConfigurationError("pmf has negative probabilities")
        if abs(probs.sum() - 1.0) > PROB_TOL:
            raise ConfigurationError(
                f"pmf probabilities sum to {probs.sum()!r}, not 1 within {PROB_TOL}"
            )

    @property
    def _v(self):
        return np.asarray(self.values, dtype=float)

    @property
    def _p(self):
        return np.asarray(self.probs, dtype=float)

    @property
    def _cum(self):
        return np.cumsum(self._p)

    @property
    def mean(self):
        return float(np.dot(self._v, self._p))

    @property
    def second_moment(self):
        return float(np.dot(self._v**2, self._p))

    @property
    def second_factorial(self):
        v = self._v
        return float(np.dot(v * (v - 1.0), self._p))

    def sample(self, rng, size=None):
        idx = np.searchsorted(self._cum, rng.random(size), side="right")
        idx = np.minimum(idx, len(self.values) - 1)
        return self._v[idx]

    def to_json(self):
        return [{"value": v, "prob": p} for v, p in zip(self.values, self.probs)]

    @classmethod
    def from_json(cls, pairs):
        values, probs = _as_prob_array(pairs)
        return cls(tuple(values.tolist()), tuple(probs.tolist()))


# ---------------------------------------------------------------------------
# component laws


@dataclass(frozen=True)
class OffspringLaw:
    """Number-of-children law; built-ins all have mean exactly 1 (criticality)."""

    name: str
    pmf: Pmf | None = None

    @classmethod
    def binary_critical(cls):
        return cls("binary_critical")

    @classmethod
    def geometric_mean_one(cls):
        # p(k) = 2^-(k+1), k >= 0
        return cls("geometric_mean_one")

    @classmethod
    def poisson_mean_one(cls):
        return cls("poisson_mean_one")

    @classmethod
    def from_pmf(cls, values, probs):
        vals = [int(v) for v in values]
        if any(v < 0 for v in vals):
            raise ConfigurationError("offspring counts must be nonnegative integers")
        return cls("pmf", Pmf(tuple(vals), tuple(float(p) for p in probs)))

    @property
    def mean(self):
        if self.name == "pmf":
            return self.pmf.mean
        return 1.0

    @property
    def second_factorial(self):
        if self.name == "binary_critical":
            return 1.0  # 0.5 * 2 * 1
        if self.name == "geometric_mean_one":
            return 2.0  # E[k(k-1)] for geometric(1/2) on {0,1,...}
        if self.name == "poisson_mean_one":
            return 1.0  # lambda^2
        return self.pmf.second_factorial

    def sample(self, rng, size=None):
        if self.name == "binary_critical":
            return 2 * (np.asarray(rng.random(size)) < 0.5).astype(np.int64)
        if self.name == "geometric_mean_one":
            return rng.geometric(0.5, size) - 1
        if self.name == "poisson_mean_one":
            return rng.poisson(1.0, size)
        return np.asarray(self.pmf.sample(rng, size)).astype(np.int64)

    def sample_size_biased(self, rng):
        """One draw from q(k) = k p(k); requires mean exactly 1."""
        if self.name == "binary_critical":
            return 2
        if self.name == "geometric_mean_one":
            # q(k) = k 2^-(k+1) = 1 + NegBin(2, 1/2): sum of two geometrics minus 1
            return int(rng.geometric(0.5) + rng.geometric(0.5) - 1)
        if self.name == "poisson_mean_one":
            return int(1 + rng.poisson(1.0))
        if abs(self.pmf.mean - 1.0) > PROB_TOL:
            raise PreconditionError(
                f"size-biased sampling needs mean offspring 1, got {self.pmf.mean}"
            )
        v = self.pmf._v
        q = self.pmf._p * v  # sums to the mean = 1
        idx = np.searchsorted(np.cumsum(q), rng.random(), side="right")
        return int(v[min(idx, len(v) - 1)])

    def to_json(self):
        d = {"name": self.name}
        if self.pmf is not None:
            d["pmf"] = self.pmf.to_json()
        return d

    @classmethod
    def from_json(cls, d):
        if d["name"] == "pmf":
            values, probs = _as_prob_array(d["pmf"])
            return cls.from_pmf(values, probs)
        return cls(d["name"])


@dataclass(frozen=True)
class StepLaw:
    """Child displacement law; must be centered (Assumption: the BRW is centered)."""

    name: str
    a: int | None = None
    variance: float | None = None
    pmf: Pmf | None = None

    @classmethod
    def rademacher(cls):
        return cls("rademacher")

    @classmethod
    def uniform_pm(cls, a):
        if int(a) < 1:
            raise ConfigurationError("uniform_pm needs a >= 1")
        return cls("uniform_pm", a=int(a))

    @classmethod
    def from_pmf(cls, values, probs):
        vals = [int(v) for v in values]
        pmf = Pmf(tuple(vals), tuple(float(p) for p in probs))
        if abs(pmf.mean) > PROB_TOL:
            raise ConfigurationError(f"step law must be centered, mean={pmf.mean}")
        return cls("pmf", pmf=pmf)

    @classmethod
    def gaussian(cls, variance):
        if variance <= 0:
            raise ConfigurationError("gaussian step needs variance > 0")
        return cls("gaussian", variance=float(variance))

    @property
    def mean(self):
        return 0.0

    @property
    def second_moment(self):
        if self.name == "rademacher":
            return 1.0
        if self.name == "uniform_pm":
            # uniform on {-a..-1, 1..a}
            return (self.a + 1) * (2 * self.a + 1) / 6.0
        if self.name == "gaussian":
            return self.variance
        return self.pmf.second_moment

    @property
    def is_lattice(self):
        return self.name != "gaussian"

    def sample(self, rng, size=None):
        if self.name == "rademacher":
            return 2 * (rng.random(size) < 0.5).astype(np.int64) - 1
        if self.name == "uniform_pm":
            mag = rng.integers(1, self.a + 1, size=size)
            sign = 2 * (rng.random(size) < 0.5).astype(np.int64) - 1
            return mag * sign
        if self.name == "gaussian":
            return rng.normal(0.0, math.sqrt(self.variance), size)
        return self.pmf.sample(rng, size)

    def to_json(self):
        d = {"name": self.name}
        if self.a is not None:
            d["a"] = self.a
        if self.variance is not None:
            d["variance"] = self.variance
        if self.pmf is not None:
            d["pmf"] = self.pmf.to_json()
        return d

    @classmethod
    def from_json(cls, d):
        if d["name"] == "pmf":
            values, probs = _as_prob_array(d["pmf"])
            return cls.from_pmf(values, probs)
        if d["name"] == "uniform_pm":
            return cls.uniform_pm(d["a"])
        if d["name"] == "gaussian":
            return cls.gaussian(d["variance"])
        return cls(d["name"])


@dataclass(frozen=True)
class LambdaMode:
    """Decoration rule; always satisfies Lambda >= max(0, sup chi)."""

    name: str  # sup_chi_pos | sup_plus_noise
    noise: Pmf | None = None

    @classmethod
    def sup_chi_pos(cls):
        return cls("sup_chi_pos")

    @classmethod
    def sup_plus_noise(cls, values, probs):
        vals = [int(v) for v in values]
        if any(v < 0 for v in vals):
            raise ConfigurationError("lambda noise must be nonnegative")
        return cls("sup_plus_noise", Pmf(tuple(vals), tuple(float(p) for p in probs)))

    def draw(self, atoms, rng):
        base = max(0.0, float(np.max(atoms))) if len(atoms) else 0.0
        if self.name == "sup_plus_noise":
            return base + float(self.noise.sample(rng))
        return base

    def to_json(self):
        d = {"name": self.name}
        if self.noise is not None:
            d["pmf"] = self.noise.to_json()
        return d

    @classmethod
    def from_json(cls, d):
        if d["name"] == "sup_plus_noise":
            values, probs = _as_prob_array(d["pmf"])
            return cls.sup_plus_noise(values, probs)
        return cls.sup_chi_pos()


@dataclass(frozen=True)
class WeightMode:
    name: str  # constant | per_child | pmf
    c: float | None = None
    pmf: Pmf | None = None

    @classmethod
    def constant(cls, c=1.0):
        if c < 0:
            raise ConfigurationError("weights must be >= 0")
        return cls("constant", c=float(c))

    @classmethod
    def per_child(cls):
        return cls("per_child")

    @classmethod
    def from_pmf(cls, values, probs):
        vals = [float(v) for v in values]
        if any(v < 0 for v in vals):
            raise ConfigurationError("weights must be >= 0")
        return cls("pmf", pmf=Pmf(tuple(vals), tuple(float(p) for p in probs)))

    def mean(self, mean_offspring):
        if self.name == "constant":
            return self.c
        if self.name == "per_child":
            return mean_offspring
        return self.pmf.mean

    def draw(self, n_children, rng):
        if self.name == "constant":
            return self.c
        if self.name == "per_child":
            return float(n_children)
        return float(self.pmf.sample(rng))

    def to_json(self):
        d = {"name": self.name}
        if self.c is not None:
            d["c"] = self.c
        if self.pmf is not None:
            d["pmf"] = self.pmf.to_json()
        return d

    @classmethod
    def from_json(cls, d):
        if d["name"] == "constant":
            return cls.constant(d["c"])
        if d["name"] == "per_child":
            return cls.per_child()
        values, probs = _as_prob_array(d["pmf"])
        return cls.from_pmf(values, probs)


# ---------------------------------------------------------------------------
# schemes


@dataclass(frozen=True)
class Outcome:
    """One tabulated reproduction outcome: (prob, atoms, lambda, weight)."""

    prob: float
    atoms: tuple
    lam: int
    weight: float

    def __post_init__(self):
        if self.prob < 0:
            raise ConfigurationError("outcome probability < 0")
        if any(a != int(a) for a in self.atoms):
            raise ConfigurationError("tabulated atoms must be integers")
        if self.lam != int(self.lam):
            raise ConfigurationError("tabulated lambda must be an integer")
        sup = max([0] + [int(a) for a in self.atoms])
        if self.lam < sup:
            raise ConfigurationError(
                f"lambda={self.lam} violates Lambda >= max(0, sup chi)={sup}"
            )
        if self.weight < 0:
            raise ConfigurationError("outcome weight < 0")


@dataclass(frozen=True)
class ReproductionSample:
    atoms: tuple
    lam: float
    weight: float


@dataclass(frozen=True)
class SchemeMoments:
    """Analytic moments: m = E[chi(R)], second_factorial = sigma^2 when m=1,
    drift/eta2 the first/second moments of the mean measure, mean_weight = E[D]."""

    m: float
    second_factorial: float
    drift: float
    eta2: float
    mean_weight: float

    @property
    def sigma2(self):
        return self.second_factorial


@dataclass(frozen=True)
class SchemeSpec:
    kind: str  # tabulated | iid_children | shared_step
    outcomes: tuple = None
    offspring: OffspringLaw = None
    step: StepLaw = None
    lambda_mode: LambdaMode = None
    weight_mode: WeightMode = None

    # -- constructors ------------------------------------------------------

    @classmethod
    def tabulated(cls, outcomes):
        outs = []
        for o in outcomes:
            if isinstance(o, Outcome):
                outs.append(o)
            else:
                prob, atoms, lam, weight = o
                outs.append(Outcome(float(prob), tuple(int(a) for a in atoms), int(lam), float(weight)))
        total = math.fsum(o.prob for o in outs)
        if abs(total - 1.0) > PROB_TOL:
            raise ConfigurationError(f"outcome probabilities sum to {total!r}, not 1")
        return cls("tabulated", outcomes=tuple(outs))

    @classmethod
    def iid_children(cls, offspring, step, lambda_mode=None, weight_mode=None):
        return cls(
            "iid_children",
            offspring=offspring,
            step=step,
            lambda_mode=lambda_mode or LambdaMode.sup_chi_pos(),
            weight_mode=weight_mode or WeightMode.constant(1.0),
        )

    @classmethod
    def shared_step(cls, offspring, step, lambda_mode=None, weight_mode=None):
        """All children share a single displacement draw (the chi = L*delta_X case)."""
        return cls(
            "shared_step",
            offspring=offspring,
            step=step,
            lambda_mode=lambda_mode or LambdaMode.sup_chi_pos(),
            weight_mode=weight_mode or WeightMode.constant(1.0),
        )

    # -- properties --------------------------------------------------------

    @property
    def is_lattice(self):
        if self.kind == "tabulated":
            return True
        return self.step.is_lattice

    @property
    def max_step_abs(self):
        """Largest |displacement| (lattice schemes only); used to size grid pads."""
        if self.kind == "tabulated":
            atoms = [a for o in self.outcomes for a in o.atoms]
            return max((abs(int(a)) for a in atoms), default=0)
        if self.step.name == "rademacher":
            return 1
        if self.step.name == "uniform_pm":
            return self.step.a
        if self.step.name == "pmf":
            return int(max(abs(v) for v in self.step.pmf.values))
        raise PreconditionError("non-lattice scheme has no bounded step")

    def moments(self):
        return scheme_moments(self)

    # -- serialization ------------------------------------------------------

    def to_json_dict(self):
        if self.kind == "tabulated":
            return {
                "kind": "tabulated",
                "outcomes": [
                    {"prob": o.prob, "atoms": list(o.atoms), "lambda": o.lam, "weight": o.weight}
                    for o in self.outcomes
                ],
            }
        return {
            "kind": self.kind,
            "offspring": self.offspring.to_json(),
            "step": self.step.to_json(),
            "lambda_mode": self.lambda_mode.to_json(),
            "weight_mode": self.weight_mode.to_json(),
        }

    def to_json(self):
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json_dict(cls, d):
        kind = d.get("kind")
        if kind == "tabulated":
            return cls.tabulated(
                (o["prob"], o["atoms"], o["lambda"], o["weight"]) for o in d["outcomes"]
            )
        if kind in ("iid_children", "shared_step"):
            ctor = cls.iid_children if kind == "iid_children" else cls.shared_step
            return ctor(
                OffspringLaw.from_json(d["offspring"]),
                StepLaw.from_json(d["step"]),
                LambdaMode.from_json(d.get("lambda_mode", {"name": "sup_chi_pos"})),
                WeightMode.from_json(d.get("weight_mode", {"name": "constant", "c": 1.0})),
            )
        raise ConfigurationError(f"unknown scheme kind {kind!r}")

    @classmethod
    def from_json(cls, text):
        return cls.from_json_dict(json.loads(text))


def binary_pm1(weight=1.0):
    """Canonical critical scheme: no child w.p. 1/2, children at {+1,-1} w.p. 1/2.

    m = 1, sigma^2 = 1, drift = 0, eta^2 = 1.
    """
    return SchemeSpec.tabulated([
        (0.5, (), 0, weight),
        (0.5, (1, -1), 1, weight),
    ])


# ---------------------------------------------------------------------------
# operations


def scheme_moments(spec: SchemeSpec) -> SchemeMoments:
    """Exact analytic moments (closed-form sums for tabulated schemes)."""
    if spec.kind == "tabulated":
        m = math.fsum(o.prob * len(o.atoms) for o in spec.outcomes)
        sf = math.fsum(o.prob * len(o.atoms) * (len(o.atoms) - 1) for o in spec.outcomes)
        drift = math.fsum(o.prob * a for o in spec.outcomes for a in o.atoms)
        eta2 = math.fsum(o.prob * a * a for o in spec.outcomes for a in o.atoms)
        mw = math.fsum(o.prob * o.weight for o in spec.outcomes)
        return SchemeMoments(m, sf, drift, eta2, mw)
    # iid_children and shared_step: offspring count independent of the step draw,
    # so int x dM = m E[X] and int x^2 dM = m E[X^2] in both cases.
    m = spec.offspring.mean
    sf = spec.offspring.second_factorial
    drift = m * spec.step.mean
    eta2 = m * spec.step.second_moment
    return SchemeMoments(m, sf, drift, eta2, spec.weight_mode.mean(m))


def sample_scheme(spec: SchemeSpec, rng) -> ReproductionSample:
    """Draw one reproduction event (atoms, lambda, weight)."""
    if spec.kind == "tabulated":
        probs = np.array([o.prob for o in spec.outcomes])
        idx = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
        o = spec.outcomes[min(idx, len(spec.outcomes) - 1)]
        return ReproductionSample(o.atoms, float(o.lam), o.weight)
    k = int(spec.offspring.sample(rng))
    if spec.kind == "shared_step":
        x = spec.step.sample(rng)
        atoms = tuple([float(x)] * k)
    else:
        atoms = tuple(np.atleast_1d(spec.step.sample(rng, k)).astype(float)) if k else ()
    lam = spec.lambda_mode.draw(np.asarray(atoms), rng)
    weight = spec.weight_mode.draw(k, rng)
    return ReproductionSample(atoms, lam, weight)


def size_biased_atom(spec: SchemeSpec, rng, threshold=math.inf, R=math.inf):
    """Palm/size-biased atom draw (Z, I).

    Satisfies E[f(Z, I)] = E[int f(x, 1_E) dchi(x)] where
    E = {chi(R) <= threshold} and {Lambda <= R}; the caller supplies the
    count threshold directly (it stands in for delta/w(r-R)).
    Requires E[chi(R)] = 1.
    """
    if spec.kind == "tabulated":
        mom = scheme_moments(spec)
        if abs(mom.m - 1.0) > 1e-9:
            raise PreconditionError(f"size-biased atom needs mean offspring 1, got {mom.m}")
        # outcome o chosen with probability prob_o * k_o (sums to m = 1)
        sb = np.array([o.prob * len(o.atoms) for o in spec.outcomes])
        idx = int(np.searchsorted(np.cumsum(sb), rng.random(), side="right"))
        o = spec.outcomes[min(idx, len(spec.outcomes) - 1)]
        z = float(o.atoms[rng.integers(len(o.atoms))])
        ind = int(len(o.atoms) <= threshold and o.lam <= R)
        return z, ind
    k = spec.offspring.sample_size_biased(rng)
    if spec.kind == "shared_step":
        x = float(spec.step.sample(rng))
        atoms = np.full(k, x)
    else:
        atoms = np.atleast_1d(spec.step.sample(rng, k)).astype(float)
    lam = spec.lambda_mode.draw(atoms, rng)
    z = float(atoms[rng.integers(k)])
    return z, int(k <= threshold and lam <= R)


def size_biased_atom_distribution(spec: SchemeSpec, threshold=math.inf, R=math.inf):
    """Exact distribution of (Z, I) for a tabulated scheme: [((z, i), prob), ...]."""
    if spec.kind != "tabulated":
        raise PreconditionError("exact Palm distribution needs a tabulated scheme")
    mom = scheme_moments(spec)
    if abs(mom.m - 1.0) > 1e-9:
        raise PreconditionError(f"size-biased atom needs mean offspring 1, got {mom.m}")
    dist = {}
    for o in spec.outcomes:
        ind = int(len(o.atoms) <= threshold and o.lam <= R)
        for a in o.atoms:
            key = (float(a), ind)
            dist[key] = dist.get(key, 0.0) + o.prob
    return sorted(dist.items())


# ---------------------------------------------------------------------------
# refined Markov weight function


@dataclass(frozen=True)
class TailWeightFunction:
    """Increasing step function psi with E[X^p psi(X)] <= 2 E[X^p] on the sample.

    Level is 1 + 2^(k-1) on (t_k, t_{k+1}] (so 3/2 up to and including t_1),
    where t_k is the smallest t with sum_{x > t} x^p <= 4^-k sum x^p over the
    empirical sample.  Once the empirical tail is exhausted the breakpoints
    continue at unit spacing so psi still increases to infinity.
    """

    breakpoints: tuple
    p: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        bp = np.asarray(self.breakpoints)
        k = np.searchsorted(bp, x, side="left").astype(float)  # #{t_j < x}
        if len(bp):
            beyond = x > bp[-1]
            if np.any(beyond):
                k = np.where(beyond, len(bp) + np.floor(x - bp[-1]), k)
        k = np.minimum(k, 600.0)  # keep 2^(k-1) finite
        return 1.0 + np.exp2(k - 1.0)

    def levels(self):
        return [1.0 + 2.0 ** (k - 1) for k in range(len(self.breakpoints) + 1)]


def tail_weight_function(sample, p=1.0) -> TailWeightFunction:
    """Breakpoints t_k of the refined-Markov weight for an empirical sample.

    t_k = smallest sample value v with sum_{x > v} x^p <= 4^-k sum x^p; repeated
    values are collapsed (which only lowers psi, so the factor-2 bound survives).
    """
    xs = np.asarray(sample, dtype=float)
    if xs.size == 0:
        raise PreconditionError("empty sample")
    if np.any(xs < 0):
        raise PreconditionError("sample must be nonnegative")
    if p < 1:
        raise PreconditionError("need p >= 1")
    order = np.sort(xs)
    wp = order**p
    total = float(wp.sum())
    if total == 0.0:
        return TailWeightFunction((0.0,), float(p))
    u = np.unique(order)
    # strict tail S(v) = sum_{x > v} x^p at each distinct value; S is nonincreasing
    suffix = np.concatenate([np.cumsum(wp[::-1])[::-1], [0.0]])
    tail_u = suffix[np.searchsorted(order, u, side="right")]
    neg = -tail_u  # nondecreasing
    bps = []
    for k in range(1, 401):
        thr = total * 4.0 ** (-k)
        i = int(np.searchsorted(neg, -thr, side="left"))  # first i with S(u_i) <= thr
        v = float(u[min(i, len(u) - 1)])
        if not bps or v > bps[-1]:
            bps.append(v)
        if tail_u[min(i, len(u) - 1)] == 0.0:
            break
    return TailWeightFunction(tuple(bps), float(p))
