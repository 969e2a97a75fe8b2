"""Boltzmann bipartite planar maps through their two-type labeled mobiles.

A weight sequence q gives the partition function fixed point f_q(Z) = Z; for
generic critical q the pointed rooted Boltzmann map corresponds to a two-type
BRW (the mobile): even generations are type V (geometric mu_V offspring, zero
displacements), odd generations are type F (mu_F offspring whose displacements
are the downstep labels of a uniform +-1 bridge).  The graph distance between
the root and the pointed vertex is 1 + sup of the mobile's decorations, and
the map volumes are weight sums over the mobile.

Conventions (see README): the degenerate single-vertex map corresponds to a
mobile whose root draws no children; it is excluded from distance statistics
and reported separately.  The decoration of an F vertex is max(0, max label)
so the core invariant Lambda >= 0 holds; edge counts use D_V = D_F = 1 with
the Euler O(1) constant dropped.  Volume counts are mobile counts; the map's
vertex count differs by the pointed vertex only (O(1), irrelevant to every
asymptotic checked here).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .engine import SimCaps, stream, _segment_starts
from .errors import ConfigurationError, PreconditionError
from .multitype import MultitypeSpec
from .stats import wilson_ci
from . import analysis


@dataclass(frozen=True)
class BoltzmannWeights:
    q: tuple  # ((k, q_k), ...) sparse, finitely many nonzero

    @classmethod
    def of(cls, mapping):
        items = []
        for k, v in sorted(mapping.items()):
            k = int(k)
            v = float(v)
            if k < 1:
                raise ConfigurationError("face half-degrees k must be >= 1")
            if v < 0:
                raise ConfigurationError("weights q_k must be >= 0")
            if v > 0:
                items.append((k, v))
        if not items:
            raise ConfigurationError("weight sequence is identically zero")
        return cls(tuple(items))

    @classmethod
    def quadrangulations(cls):
        return cls.of({2: 1.0 / 12.0})

    def to_json_dict(self):
        return {str(k): v for k, v in self.q}

    @classmethod
    def from_json_dict(cls, d):
        return cls.of({int(k): float(v) for k, v in d.items()})


@dataclass
class PartitionData:
    weights: BoltzmannWeights
    Z: float | None
    fprime: float | None
    fsecond: float | None
    classification: str  # not_admissible | subcritical | critical_generic | critical_non_generic
    sigma2_map: float | None


def _f_and_derivs(q):
    coeffs = [(k, qk * math.comb(2 * k - 1, k)) for k, qk in q]

    def f(x):
        return 1.0 + math.fsum(c * x**k for k, c in coeffs)

    def fp(x):
        return math.fsum(k * c * x ** (k - 1) for k, c in coeffs)

    def fpp(x):
        return math.fsum(k * (k - 1) * c * x ** (k - 2) for k, c in coeffs if k >= 2)

    return f, fp, fpp


def solve_partition(q: BoltzmannWeights, crit_tol=1e-9) -> PartitionData:
    """Smallest positive fixed point of f_q and its criticality classification.

    f_q is convex increasing with f_q(0) = 1, so f_q(x) = x has a solution iff
    the convex gap g = f_q - id dips to <= 0; the dip bottom x* (f_q'(x*) = 1)
    certifies non-admissibility when g(x*) > 0.
    """
    from scipy.optimize import brentq

    f, fp, fpp = _f_and_derivs(q.q)
    max_k = max(k for k, _ in q.q)
    if fp(0.0) >= 1.0:
        return PartitionData(q, None, None, None, "not_admissible", None)
    if max_k == 1:
        # affine f: subcritical fixed point, never critical
        q1 = fp(0.0)
        Z = 1.0 / (1.0 - q1)
        return PartitionData(q, Z, q1, 0.0, "subcritical", Z * Z * 0.0)
    hi = 1.0
    while fp(hi) <= 1.0:
        hi *= 2.0
        if hi > 1e300:
            raise ConfigurationError("could not bracket f' = 1")
    xstar = brentq(lambda x: fp(x) - 1.0, 0.0, hi, xtol=1e-14, rtol=8.9e-16)
    gap = f(xstar) - xstar
    scale = max(1.0, xstar)
    if gap > crit_tol * scale:
        return PartitionData(q, None, None, None, "not_admissible", None)
    if abs(gap) <= crit_tol * scale:
        Z = xstar
        classification = "critical_generic" if math.isfinite(fpp(Z)) else "critical_non_generic"
        return PartitionData(q, Z, fp(Z), fpp(Z), classification, Z * Z * fpp(Z))
    Z = brentq(lambda x: f(x) - x, 0.0, xstar, xtol=1e-14, rtol=8.9e-16)
    return PartitionData(q, Z, fp(Z), fpp(Z), "subcritical", Z * Z * fpp(Z))


def _require_critical(data: PartitionData):
    if data.classification != "critical_generic":
        raise PreconditionError(
            f"operation needs generic critical weights, got {data.classification}"
        )


def mu_F_pmf(data: PartitionData, k) -> float:
    """mu_F(k) = C(2k+1, k+1) q_{k+1} Z^k / (1 - 1/Z)."""
    _require_critical(data)
    k = int(k)
    if k < 0:
        return 0.0
    qk1 = dict(data.weights.q).get(k + 1, 0.0)
    if qk1 == 0.0:
        return 0.0
    return math.comb(2 * k + 1, k + 1) * qk1 * data.Z**k / (1.0 - 1.0 / data.Z)


def mu_V_pmf(data: PartitionData, k) -> float:
    """mu_V(k) = (1/Z)(1 - 1/Z)^k, geometric."""
    _require_critical(data)
    k = int(k)
    if k < 0:
        return 0.0
    return (1.0 / data.Z) * (1.0 - 1.0 / data.Z) ** k


def mu_F_support(data: PartitionData):
    _require_critical(data)
    return tuple(k - 1 for k, qk in data.weights.q if qk > 0)


# ---------------------------------------------------------------------------
# bridges


@dataclass(frozen=True)
class Bridge:
    n: int
    path: tuple  # b_0 .. b_{2n+2}
    downsteps: tuple  # indices k >= 1 with b_{k+1} = b_k - 1
    labels: tuple  # b_k for k in downsteps

    def __post_init__(self):
        if len(self.downsteps) != self.n:
            raise ConfigurationError("bridge must have exactly n downsteps after index 0")


def _bridge_from_steps(n, steps):
    """steps = s_1..s_{2n+1} (each +-1, n of them -1); s_0 = -1 is forced."""
    path = [0, -1]
    for s in steps:
        path.append(path[-1] + int(s))
    downs = tuple(k for k in range(1, 2 * n + 2) if path[k + 1] == path[k] - 1)
    labels = tuple(path[k] for k in downs)
    return Bridge(n, tuple(path), downs, labels)


def sample_bridge(n, rng) -> Bridge:
    """Uniform bridge with b_0 = b_{2n+2} = 0, b_1 = -1, steps +-1.

    After the forced first downstep the remaining 2n+1 steps are a uniform
    shuffle of (n+1) up-steps and n down-steps (exact uniformity, linear time).
    """
    n = int(n)
    if n < 0:
        raise PreconditionError("bridge size must be >= 0")
    steps = np.concatenate([-np.ones(n, dtype=np.int64), np.ones(n + 1, dtype=np.int64)])
    rng.shuffle(steps)
    return _bridge_from_steps(n, steps)


def enumerate_bridges(n):
    """All C(2n+1, n) equally likely bridges; exact oracle for small n."""
    n = int(n)
    out = []
    slots = range(2 * n + 1)
    for downs in combinations(slots, n):
        steps = [1] * (2 * n + 1)
        for i in downs:
            steps[i] = -1
        out.append(_bridge_from_steps(n, steps))
    return out


# ---------------------------------------------------------------------------
# mobile reproduction laws (multitype interface, exact closed-form moments)


WEIGHT_SELECTORS = {"vertices": (1.0, 0.0), "faces": (0.0, 1.0), "edges": (1.0, 1.0)}


class MobileVertexLaw:
    """Type V: N_V ~ mu_V children of type F at displacement 0, Lambda = 0."""

    deterministic_single = False

    def __init__(self, data: PartitionData, weight):
        _require_critical(data)
        self.Z = data.Z
        self.weight = float(weight)

    def mean_row(self):
        return {"F": self.Z - 1.0}

    def first_moment_row(self):
        return {"F": 0.0}

    def second_moment_row(self):
        return {"F": 0.0}

    @property
    def mean_weight(self):
        return self.weight

    def sample(self, rng):
        k = int(rng.geometric(1.0 / self.Z)) - 1
        return tuple((0, "F") for _ in range(k)), 0, self.weight


class MobileFaceLaw:
    """Type F: N_F ~ mu_F children of type V at the bridge downstep labels."""

    deterministic_single = False

    def __init__(self, data: PartitionData, weight):
        _require_critical(data)
        self.data = data
        self.weight = float(weight)
        ks = mu_F_support(data)
        self.ks = np.array(ks, dtype=np.int64)
        probs = np.array([mu_F_pmf(data, k) for k in ks])
        total = probs.sum()
        if abs(total - 1.0) > 1e-10:
            raise ConfigurationError(f"mu_F sums to {total!r}; weights not critical enough")
        self.probs = probs / total
        self._cum = np.cumsum(self.probs)

    def mean_row(self):
        return {"V": float(np.dot(self.ks, self.probs))}

    def first_moment_row(self):
        # E[sum labels | N_F = n] = 0 for every n
        return {"V": 0.0}

    def second_moment_row(self):
        # E[sum labels^2 | N_F = n] = (n^2 + n) / 3
        return {"V": float(np.dot(self.ks * (self.ks + 1) / 3.0, self.probs))}

    @property
    def mean_weight(self):
        return self.weight

    def sample_n(self, rng):
        i = int(np.searchsorted(self._cum, rng.random(), side="right"))
        return int(self.ks[min(i, len(self.ks) - 1)])

    def sample(self, rng):
        n = self.sample_n(rng)
        br = sample_bridge(n, rng)
        lam = max(0, max(br.labels, default=0))
        return tuple((b, "V") for b in br.labels), lam, self.weight


def mobile_spec(data: PartitionData, weight_selector="vertices") -> MultitypeSpec:
    """Two-type mobile BRW as a MultitypeSpec (root type V by convention)."""
    if weight_selector not in WEIGHT_SELECTORS:
        raise ConfigurationError(f"weight_selector must be one of {sorted(WEIGHT_SELECTORS)}")
    dv, df = WEIGHT_SELECTORS[weight_selector]
    return MultitypeSpec(
        ("V", "F"),
        {"V": MobileVertexLaw(data, dv), "F": MobileFaceLaw(data, df)},
    )


# ---------------------------------------------------------------------------
# batched mobile simulation


class MobileBatch:
    __slots__ = ("sup_dec", "n_V", "n_F", "truncated", "dagger")


def _run_mobile_batch(data: PartitionData, B, rng, caps: SimCaps):
    """Step B mobiles by V-generations (V and its F children in one move).

    sup over mobile decorations = max over F vertices of pos + max(0, max
    label); V decorations never exceed their parent F's, so only F terms and
    the root's 0 matter.
    """
    face = MobileFaceLaw(data, 0.0)
    quad_path = len(face.ks) == 1 and int(face.ks[0]) == 1
    Zinv = 1.0 / data.Z
    pos = np.zeros(B, dtype=np.int32)
    tid = np.arange(B, dtype=np.int64)
    supdec = np.zeros(B, dtype=np.int32)  # root decoration is 0
    n_V = np.zeros(B, dtype=np.int64)
    n_F = np.zeros(B, dtype=np.int64)
    truncated = np.zeros(B, dtype=bool)
    dagger = np.zeros(B, dtype=bool)
    gen = 0
    while len(pos):
        f = len(pos)
        g = rng.geometric(Zinv, f).astype(np.int64) - 1
        starts = _segment_starts(tid)
        uids = tid[starts]
        nv = n_V[uids]
        nv += np.diff(starts, append=f)
        n_V[uids] = nv
        nf = n_F[uids]
        nf += np.add.reduceat(g, starts)
        n_F[uids] = nf
        if gen == 0:
            dagger = g == 0
        # F slots
        ppos = np.repeat(pos, g)
        ptid = np.repeat(tid, g)
        if quad_path:
            labels = rng.integers(-1, 2, size=len(ppos)).astype(np.int32)
            child = ppos + labels
            ctid = ptid
            fdeco = ppos + (labels == 1)
        else:
            ns = face.ks[
                np.minimum(
                    np.searchsorted(face._cum, rng.random(len(ppos)), side="right"),
                    len(face.ks) - 1,
                )
            ]
            childs, ctids, fdecos, ftids = [], [], [], []
            order = np.argsort(ns, kind="stable")
            bounds = np.searchsorted(ns[order], np.unique(ns))
            bounds = np.append(bounds, len(order))
            for gi in range(len(bounds) - 1):
                sel = order[bounds[gi] : bounds[gi + 1]]
                nn = int(ns[sel[0]]) if len(sel) else 0
                gp, gt = ppos[sel], ptid[sel]
                if nn == 0:
                    fdecos.append(gp)
                    ftids.append(gt)
                    continue
                m = len(sel)
                base = np.concatenate(
                    [-np.ones(nn, dtype=np.int32), np.ones(nn + 1, dtype=np.int32)]
                )
                keys = rng.random((m, 2 * nn + 1))
                signs = base[np.argsort(keys, axis=1)]
                cs = np.cumsum(signs, axis=1)
                # b_k for k = 1..2n+1: -1, then -1 + cs[:, :-1]
                bvals = np.concatenate(
                    [-np.ones((m, 1), dtype=np.int32), -1 + cs[:, :-1]], axis=1
                )
                labels = bvals[signs == -1].reshape(m, nn)
                fdecos.append(gp + np.maximum(labels.max(axis=1), 0))
                ftids.append(gt)
                childs.append((gp[:, None] + labels).reshape(-1))
                ctids.append(np.repeat(gt, nn))
            fdeco = np.concatenate(fdecos) if fdecos else np.empty(0, dtype=np.int32)
            ftid = np.concatenate(ftids) if ftids else np.empty(0, dtype=np.int64)
            child = np.concatenate(childs) if childs else np.empty(0, dtype=np.int32)
            ctid = np.concatenate(ctids) if ctids else np.empty(0, dtype=np.int64)
            if len(ftid):
                o2 = np.argsort(ftid, kind="stable")
                ftid, fdeco = ftid[o2], fdeco[o2]
            if len(ctid):
                o3 = np.argsort(ctid, kind="stable")
                ctid, child = ctid[o3], child[o3]
            ptid = ftid
        # per-tree decoration max over the F slots
        if len(ptid):
            fs = _segment_starts(ptid)
            fu = ptid[fs]
            cur = supdec[fu]
            np.maximum(cur, np.maximum.reduceat(fdeco, fs), out=cur)
            supdec[fu] = cur
        gen += 1
        over = (nv + nf) > caps.max_nodes
        if gen >= caps.max_depth:
            over = over | np.ones_like(over)
        if over.any():
            present = np.zeros(B, dtype=bool)
            present[ctid] = True  # only trees with a live frontier are truly cut
            newly = uids[over & ~truncated[uids] & present[uids]]
            truncated[newly] = True
            bad = np.zeros(B, dtype=bool)
            bad[uids[over]] = True
            keep = ~bad[ctid]
            child = child[keep]
            ctid = ctid[keep]
        pos, tid = child, ctid
    out = MobileBatch()
    out.sup_dec = supdec
    out.n_V = n_V
    out.n_F = n_F
    out.truncated = truncated
    out.dagger = dagger
    return out


def estimate_map_observables(data: PartitionData, r_list, n, caps: SimCaps = SimCaps(),
                             seed=0, alpha=None, workers=1, batch_size=100_000):
    """Distance tail/pdf and conditioned-volume Laplace points for Boltzmann maps.

    Distance d = 1 + sup decoration; the single-vertex map (dagger) is excluded
    from distance statistics and counted separately.  The Laplace point at
    level r conditions on {d > r} and transforms each volume/c as
    exp(-2 alpha^2 vol / (c sigma^2 r^4)); alpha defaults to sigma^2.
    """
    _require_critical(data)
    if n < 1:
        raise PreconditionError("need n >= 1")
    sigma2 = data.sigma2_map
    if alpha is None:
        alpha = sigma2
    rs = sorted(int(r) for r in r_list)
    c_V, c_F, c_E = 1.0, data.Z - 1.0, data.Z
    sizes = []
    left = n
    while left > 0:
        sizes.append(min(batch_size, left))
        left -= batch_size

    def one(b):
        rng = stream(seed, b)
        out = _run_mobile_batch(data, sizes[b], rng, caps)
        sup = out.sup_dec.astype(np.int64)
        res = {"dagger": int(out.dagger.sum()), "truncated": int(out.truncated.sum())}
        rows = []
        for r in rs:
            gt = (sup >= r) & ~out.dagger  # d = 1 + sup > r
            eq = (sup == r - 1) & ~out.dagger & ~out.truncated
            amb_gt = out.truncated & ~gt & ~out.dagger
            amb_eq = out.truncated & (sup <= r - 1) & ~out.dagger
            rows.append(
                (
                    int(gt.sum()),
                    int(eq.sum()),
                    int(amb_gt.sum()),
                    int(amb_eq.sum()),
                )
            )
        res["rows"] = rows
        # Laplace sums conditioned on d > max(rs)
        r = rs[-1]
        mem = (sup >= r) & ~out.dagger
        scale = 2.0 * alpha**2 / (sigma2 * float(r) ** 4)
        lap = {}
        for name, vol, c in (
            ("n_V", out.n_V, c_V),
            ("n_F", out.n_F, c_F),
            ("n_E", out.n_V + out.n_F, c_E),
        ):
            vals = np.exp(-scale * vol[mem] / c)
            lap[name] = (float(vals.sum()), float((vals * vals).sum()), int(mem.sum()))
        res["laplace"] = lap
        return res

    parts = [one(b) for b in range(len(sizes))] if workers <= 1 else _pool(one, len(sizes), workers)
    n_dagger = sum(p["dagger"] for p in parts)
    n_trunc = sum(p["truncated"] for p in parts)
    rows = []
    for i, r in enumerate(rs):
        gt = sum(p["rows"][i][0] for p in parts)
        eq = sum(p["rows"][i][1] for p in parts)
        agt = sum(p["rows"][i][2] for p in parts)
        aeq = sum(p["rows"][i][3] for p in parts)
        lo_gt, hi_gt = wilson_ci(gt, n)
        lo_eq, hi_eq = wilson_ci(eq, n)
        rows.append(
            {
                "r": r,
                "p_gt": gt / n,
                "p_gt_ci": (lo_gt, hi_gt),
                "hits_gt": gt,
                "ambiguous_gt": agt,
                "p_eq": eq / n,
                "p_eq_ci": (lo_eq, hi_eq),
                "hits_eq": eq,
                "ambiguous_eq": aeq,
            }
        )
    laplace = {}
    for name in ("n_V", "n_F", "n_E"):
        s1 = math.fsum(p["laplace"][name][0] for p in parts)
        s2 = math.fsum(p["laplace"][name][1] for p in parts)
        m = sum(p["laplace"][name][2] for p in parts)
        if m == 0:
            laplace[name] = {"estimate": None, "se": None, "n_conditioned": 0}
            continue
        mean = s1 / m
        var = max(s2 / m - mean * mean, 0.0)
        laplace[name] = {
            "estimate": mean,
            "se": math.sqrt(var / m),
            "n_conditioned": m,
        }
    return {
        "n": n,
        "alpha": float(alpha),
        "sigma2": sigma2,
        "r_laplace": rs[-1],
        "rows": rows,
        "laplace": laplace,
        "n_dagger": n_dagger,
        "n_truncated": n_trunc,
        "limit_laplace": analysis.laplace_limit_map_volume(alpha, sigma2),
    }


def _pool(fn, n_batches, workers):
    from concurrent.futures import ThreadPoolExecutor

    results = [None] * n_batches
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for b, res in zip(range(n_batches), pool.map(fn, range(n_batches))):
            results[b] = res
    return results
