"""Monte-Carlo engine for the decorated BRW.

Trees are expanded breadth first with an explicit frontier (critical trees are
shallow on average but heavy-tailed in size, so recursion is out).  Mass
experiments run through a batched kernel that steps many trees at once inside
numpy; trees are partitioned into fixed-size batches by index and every batch
owns a counter-based Philox stream keyed on (seed, batch index), which makes
every aggregate bitwise reproducible for any worker count.

Truncation policy: a tree that hits the node/depth cap keeps its partial
statistics, and the estimators fold it in pessimistically (see TailEstimate's
[p_low_bound, p_high_bound]); the conditional-Laplace estimator can instead
resolve the condition by continuing the saved frontier in a stats-free mode
(the e^{-tV} contribution of such a huge tree is bounded by e^{-t * partial V}
and is negligible in every regime exercised here).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, PreconditionError
from .schemes import SchemeSpec, scheme_moments
from .stats import wilson_ci
from . import analysis

DEFAULT_BATCH = 100_000
_MASK64 = (1 << 64) - 1


def stream(seed, index=0):
    """Counter-based RNG stream derived from (seed, index); order-independent."""
    return np.random.Generator(np.random.Philox(key=[seed & _MASK64, index & _MASK64]))


@dataclass(frozen=True)
class SimCaps:
    max_nodes: int = 1_000_000
    max_depth: int = 1_000_000

    def __post_init__(self):
        if self.max_nodes < 1 or self.max_depth < 1:
            raise ConfigurationError("caps must be >= 1")


@dataclass
class TreeStats:
    progeny: int
    max_displacement: float
    max_decoration: float
    total_weight: float
    depth: int
    truncated: bool
    decided_exceed: bool | None = None


@dataclass
class TailEstimate:
    r: float
    n: int
    hits: int
    ambiguous: int
    p_hat: float
    ci_low: float
    ci_high: float
    p_low_bound: float
    p_high_bound: float


@dataclass
class CondLaplace:
    t: float
    estimate: float | None
    ci_low: float | None
    ci_high: float | None
    n_conditioned: int
    n_ambiguous: int
    bracket_low: float | None
    bracket_high: float | None
    insufficient: bool


# ---------------------------------------------------------------------------
# compiled tabulated schemes


class _Tabulated:
    def __init__(self, spec: SchemeSpec):
        if spec.kind != "tabulated":
            raise PreconditionError("batched kernel needs a tabulated scheme")
        outs = spec.outcomes
        self.cum = np.cumsum([o.prob for o in outs])
        self.cum[-1] = np.inf  # guard searchsorted overflow on u ~ 1
        self.natoms = np.array([len(o.atoms) for o in outs], dtype=np.int64)
        self.lam = np.array([o.lam for o in outs], dtype=np.int32)
        self.weight = np.array([o.weight for o in outs], dtype=float)
        flat = [a for o in outs for a in o.atoms]
        self.atoms_flat = np.array(flat, dtype=np.int32)
        self.atom_start = np.concatenate([[0], np.cumsum(self.natoms)]).astype(np.int64)
        w0 = outs[0].weight
        self.uniform_weight = w0 if all(o.weight == w0 for o in outs) else None
        branching = np.flatnonzero(self.natoms > 0)
        self.single_branch = len(branching) == 1
        if self.single_branch:
            self.branch_idx = int(branching[0])
            self.branch_atoms = np.array(outs[self.branch_idx].atoms, dtype=np.int32)


def _segment_starts(tid):
    cut = np.flatnonzero(tid[1:] != tid[:-1])
    starts = np.empty(len(cut) + 1, dtype=np.int64)
    starts[0] = 0
    starts[1:] = cut + 1
    return starts


class _BatchOut:
    __slots__ = ("progeny", "maxdec", "weight", "depth", "truncated", "stopped", "leftover")


def _run_batch(tab: _Tabulated, B, rng, caps: SimCaps, stop_above=None, keep_leftovers=False):
    """Step B trees to extinction/caps; frontier kept sorted by tree id."""
    pos = np.zeros(B, dtype=np.int32)
    tid = np.arange(B, dtype=np.int64)
    progeny = np.zeros(B, dtype=np.int64)
    maxdec = np.full(B, np.iinfo(np.int32).min, dtype=np.int32)
    wsum = None if tab.uniform_weight is not None else np.zeros(B, dtype=float)
    depth = np.zeros(B, dtype=np.int32)
    truncated = np.zeros(B, dtype=bool)
    stopped = np.zeros(B, dtype=bool)
    leftover_tid, leftover_pos = [], []
    two = len(tab.cum) == 2
    gen = 0
    while len(pos):
        f = len(pos)
        u = rng.random(f)
        if two:
            oi = (u >= tab.cum[0]).view(np.int8)
        else:
            oi = np.searchsorted(tab.cum, u, side="right")
        deco = pos + tab.lam[oi]
        starts = _segment_starts(tid)
        uids = tid[starts]
        segmax = np.maximum.reduceat(deco, starts)
        cur = maxdec[uids]
        np.maximum(cur, segmax, out=cur)
        maxdec[uids] = cur
        pg = progeny[uids]
        pg += np.diff(starts, append=f)
        progeny[uids] = pg
        if wsum is not None:
            ws = wsum[uids]
            ws += np.add.reduceat(tab.weight[oi], starts)
            wsum[uids] = ws
        depth[uids] = gen
        # children
        if tab.single_branch:
            mask = oi == tab.branch_idx
            sel = pos[mask]
            k = len(tab.branch_atoms)
            child = (sel[:, None] + tab.branch_atoms[None, :]).reshape(-1)
            ctid = np.repeat(tid[mask], k)
        else:
            counts = tab.natoms[oi]
            tot = int(counts.sum())
            if tot:
                rep = np.repeat(np.arange(f), counts)
                within = np.arange(tot, dtype=np.int64) - np.repeat(
                    np.cumsum(counts) - counts, counts
                )
                child = pos[rep] + tab.atoms_flat[tab.atom_start[oi][rep] + within]
                ctid = tid[rep]
            else:
                child = np.empty(0, dtype=np.int32)
                ctid = np.empty(0, dtype=np.int64)
        gen += 1
        # drop trees that are decided (stop_above), truncated (caps), or done
        drop = None
        if stop_above is not None:
            st = cur > stop_above
            if st.any():
                stopped[uids[st]] = True
                drop = st
        over = pg > caps.max_nodes
        if gen >= caps.max_depth:
            over = over | np.ones_like(over)
        if over.any():
            present = np.zeros(B, dtype=bool)
            present[ctid] = True  # trees whose frontier just died are complete
            newly = over & ~truncated[uids] & ~stopped[uids] & present[uids]
            truncated[uids[newly]] = True
            drop = over if drop is None else (drop | over)
        if drop is not None and drop.any():
            bad = np.zeros(B, dtype=bool)
            bad[uids[drop]] = True
            cbad = bad[ctid]
            if keep_leftovers:
                tr = truncated[ctid] & cbad
                if tr.any():
                    leftover_tid.append(ctid[tr].copy())
                    leftover_pos.append(child[tr].copy())
            keep = ~cbad
            child = child[keep]
            ctid = ctid[keep]
        pos, tid = child, ctid
    out = _BatchOut()
    out.progeny = progeny
    out.maxdec = maxdec
    out.weight = wsum if wsum is not None else progeny * tab.uniform_weight
    out.depth = depth
    out.truncated = truncated
    out.stopped = stopped
    if keep_leftovers and leftover_tid:
        lt = np.concatenate(leftover_tid)
        lp = np.concatenate(leftover_pos)
        order = np.argsort(lt, kind="stable")
        lt, lp = lt[order], lp[order]
        starts = _segment_starts(lt)
        bounds = np.append(starts, len(lt))
        out.leftover = {
            int(lt[starts[i]]): lp[bounds[i] : bounds[i + 1]].copy()
            for i in range(len(starts))
        }
    else:
        out.leftover = {}
    return out


def _decide_final_max(tab: _Tabulated, frontier, max0, rng, level, budget):
    """Continue a truncated tree tracking only the running max decoration.

    Returns ('gt', None) as soon as the max exceeds `level`, ('done', final_max)
    on extinction, ('unknown', current_max) when the node budget runs out.
    """
    pos = frontier.astype(np.int32)
    cur = int(max0)
    done = 0
    while len(pos):
        if cur > level:
            return "gt", None
        f = len(pos)
        done += f
        if done > budget:
            return "unknown", cur
        u = rng.random(f)
        if len(tab.cum) == 2:
            oi = (u >= tab.cum[0]).view(np.int8)
        else:
            oi = np.searchsorted(tab.cum, u, side="right")
        deco = pos + tab.lam[oi]
        if len(deco):
            cur = max(cur, int(deco.max()))
        if tab.single_branch:
            sel = pos[oi == tab.branch_idx]
            pos = (sel[:, None] + tab.branch_atoms[None, :]).reshape(-1)
        else:
            counts = tab.natoms[oi]
            tot = int(counts.sum())
            if not tot:
                break
            rep = np.repeat(np.arange(f), counts)
            within = np.arange(tot, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
            pos = pos[rep] + tab.atoms_flat[tab.atom_start[oi][rep] + within]
    if cur > level:
        return "gt", None
    return "done", cur


# ---------------------------------------------------------------------------
# single-tree simulation (any scheme kind)


def simulate_tree(spec: SchemeSpec, caps: SimCaps = SimCaps(), query_r=None, rng=None) -> TreeStats:
    """Expand one decorated tree breadth first and collect exact statistics."""
    if rng is None:
        raise PreconditionError("simulate_tree needs an explicit rng")
    lattice = spec.is_lattice
    pos = np.zeros(1, dtype=np.int64 if lattice else float)
    progeny = 0
    max_disp = 0.0
    max_dec = -math.inf
    total_weight = 0.0
    depth = 0
    gen = 0
    truncated = False
    while len(pos):
        f = len(pos)
        progeny += f
        depth = gen
        max_disp = max(max_disp, float(pos.max()))
        lam, weights, child, offsets = _draw_generation(spec, pos, rng)
        max_dec = max(max_dec, float((pos + lam).max()))
        total_weight += float(weights.sum())
        if progeny > caps.max_nodes or gen + 1 > caps.max_depth:
            truncated = True
            break
        pos = child
        gen += 1
    decided = None
    if truncated and query_r is not None:
        decided = bool(max_dec > query_r)
    return TreeStats(progeny, max_disp, max_dec, total_weight, depth, truncated, decided)


def _draw_generation(spec, pos, rng):
    """Vectorized reproduction draws for one generation of `pos` vertices."""
    f = len(pos)
    if spec.kind == "tabulated":
        tab = _compiled(spec)
        u = rng.random(f)
        oi = np.searchsorted(tab.cum, u, side="right")
        lam = tab.lam[oi].astype(pos.dtype)
        weights = tab.weight[oi]
        counts = tab.natoms[oi]
        tot = int(counts.sum())
        rep = np.repeat(np.arange(f), counts)
        within = np.arange(tot, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
        child = pos[rep] + tab.atoms_flat[tab.atom_start[oi][rep] + within]
        return lam, weights, child, None
    counts = np.atleast_1d(spec.offspring.sample(rng, f)).astype(np.int64)
    tot = int(counts.sum())
    if spec.kind == "shared_step":
        steps = np.atleast_1d(spec.step.sample(rng, f))
        child_rel = np.repeat(steps, counts)
    else:
        child_rel = np.atleast_1d(spec.step.sample(rng, tot)) if tot else np.empty(0)
    child = np.repeat(pos, counts) + child_rel
    # per-vertex decoration: sup over own children, floored at 0
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    lam = np.zeros(f, dtype=float)
    nz = counts > 0
    if nz.any():
        sup = np.maximum.reduceat(child_rel, starts[nz]) if tot else np.empty(0)
        lam[nz] = np.maximum(sup, 0.0)
    if spec.lambda_mode.name == "sup_plus_noise":
        lam = lam + spec.lambda_mode.noise.sample(rng, f)
    wm = spec.weight_mode
    if wm.name == "constant":
        weights = np.full(f, wm.c)
    elif wm.name == "per_child":
        weights = counts.astype(float)
    else:
        weights = wm.pmf.sample(rng, f)
    return lam, weights, child, None


_compile_cache = {}


def _compiled(spec) -> _Tabulated:
    hit = _compile_cache.get(spec)
    if hit is None:
        hit = _Tabulated(spec)
        if len(_compile_cache) > 64:
            _compile_cache.clear()
        _compile_cache[spec] = hit
    return hit


# ---------------------------------------------------------------------------
# estimators


def _batches(n, batch_size):
    sizes = []
    left = n
    while left > 0:
        sizes.append(min(batch_size, left))
        left -= batch_size
    return sizes


def _map_batches(fn, n_batches, workers):
    if workers <= 1:
        return [fn(b) for b in range(n_batches)]
    results = [None] * n_batches
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for b, res in zip(range(n_batches), pool.map(fn, range(n_batches))):
            results[b] = res
    return results


def estimate_tail(spec, r_list, n, caps: SimCaps = SimCaps(), seed=0, workers=1,
                  batch_size=DEFAULT_BATCH):
    """MC estimate of P(sup_v Lambda_v > r) for every r in r_list in one pass.

    Truncated trees with partial max already above r count as hits (the sup can
    only grow); the rest widen [p_low_bound, p_high_bound].
    """
    if n < 1:
        raise PreconditionError("need n >= 1")
    rs = sorted(float(r) for r in r_list)
    sizes = _batches(n, batch_size)
    tab = _compiled(spec) if spec.kind == "tabulated" else None

    def one(b):
        rng = stream(seed, b)
        hits = np.zeros(len(rs), dtype=np.int64)
        ambiguous = np.zeros(len(rs), dtype=np.int64)
        if tab is not None:
            out = _run_batch(tab, sizes[b], rng, caps)
            md = out.maxdec
            tr = out.truncated
            for i, r in enumerate(rs):
                above = md > r
                hits[i] = int(np.count_nonzero(above))
                ambiguous[i] = int(np.count_nonzero(tr & ~above))
        else:
            for j in range(sizes[b]):
                st = simulate_tree(spec, caps, None, stream(seed, b * batch_size + j + (1 << 32)))
                for i, r in enumerate(rs):
                    if st.max_decoration > r:
                        hits[i] += 1
                    elif st.truncated:
                        ambiguous[i] += 1
        return hits, ambiguous

    parts = _map_batches(one, len(sizes), workers)
    hits = np.sum([p[0] for p in parts], axis=0)
    ambiguous = np.sum([p[1] for p in parts], axis=0)
    out = []
    for i, r in enumerate(rs):
        h, a = int(hits[i]), int(ambiguous[i])
        lo, hi = wilson_ci(h, n)
        out.append(TailEstimate(r, n, h, a, h / n, lo, hi, h / n, (h + a) / n))
    return out


def estimate_conditional_laplace(spec, r, alpha, condition, n, caps: SimCaps = SimCaps(),
                                 seed=0, workers=1, batch_size=DEFAULT_BATCH,
                                 decide_budget=30_000_000):
    """Estimate E[exp(-t(r,alpha) sum_v D_v) | sup Lambda {>,<=,=} r].

    t(r, alpha) comes from the scheme's analytic moments.  Zero conditioned
    samples yield an explicit `insufficient` result rather than a division.
    """
    if condition not in ("gt", "le", "eq"):
        raise ConfigurationError("condition must be one of gt|le|eq")
    if condition == "eq" and not spec.is_lattice:
        raise PreconditionError("condition 'eq' needs an integer-lattice scheme")
    mom = scheme_moments(spec)
    if abs(mom.m - 1.0) > 1e-9:
        raise PreconditionError(f"scheme not critical: m={mom.m}")
    t = analysis.t_of(r, alpha, mom.sigma2, mom.eta2)
    tab = _compiled(spec)
    rr = int(round(r))
    sizes = _batches(n, batch_size)
    # trees whose running max exceeds r are decided out of 'le'/'eq' immediately
    stop_above = rr if condition in ("le", "eq") else None

    def member_complete(md):
        if condition == "gt":
            return md > rr
        if condition == "le":
            return md <= rr
        return md == rr

    def one(b):
        rng = stream(seed, b)
        out = _run_batch(tab, sizes[b], rng, caps, stop_above=stop_above, keep_leftovers=True)
        md, tr, st = out.maxdec, out.truncated, out.stopped
        V = out.weight
        complete = ~tr & ~st
        mem = member_complete(md) & complete
        vals = np.exp(-t * V[mem])
        s1 = float(vals.sum())
        s2 = float((vals * vals).sum())
        hits = int(mem.sum())
        upper_extra = 0.0
        ambiguous = 0
        # resolve truncated trees by continuing their saved frontier
        for idx in np.flatnonzero(tr):
            frontier = out.leftover.get(int(idx), np.empty(0, dtype=np.int32))
            status, final = _decide_final_max(tab, frontier, int(md[idx]), rng, rr, decide_budget)
            if status == "unknown":
                ambiguous += 1
                continue
            is_mem = (
                (condition == "gt" and status == "gt")
                or (condition == "le" and status == "done" and final <= rr)
                or (condition == "eq" and status == "done" and final == rr)
            )
            if is_mem:
                hits += 1
                upper_extra += math.exp(-t * float(V[idx]))  # true V only larger
        return s1, s2, hits, ambiguous, upper_extra

    parts = _map_batches(one, len(sizes), workers)
    s1 = math.fsum(p[0] for p in parts)
    s2 = math.fsum(p[1] for p in parts)
    hits = sum(p[2] for p in parts)
    ambiguous = sum(p[3] for p in parts)
    upper = math.fsum(p[4] for p in parts)
    if hits == 0:
        return CondLaplace(t, None, None, None, 0, ambiguous, None, None, True)
    est = (s1 + upper) / hits
    var = max(s2 / hits - (s1 / hits) ** 2, 0.0)
    half = 1.959963984540054 * math.sqrt(var / hits)
    return CondLaplace(
        t,
        est,
        max(est - half, 0.0),
        min(est + half, 1.0),
        hits,
        ambiguous,
        s1 / (hits + ambiguous),
        (s1 + upper) / hits,
        False,
    )


def generation_snapshot(spec, n_gen, rng):
    """Positions of the generation-n_gen vertices (empty array if extinct)."""
    if n_gen < 0:
        raise PreconditionError("n_gen must be >= 0")
    lattice = spec.is_lattice
    pos = np.zeros(1, dtype=np.int64 if lattice else float)
    for _ in range(n_gen):
        if not len(pos):
            break
        _, _, pos, _ = _draw_generation(spec, pos, rng)
    return pos


def many_to_one_check(spec, n_gen, g):
    """Exact E[sum_{x in G_n} g(x)] (tree enumeration) vs E[g(U_n)] (convolution).

    Identity: for critical schemes both sides agree; lhs walks outcome trees
    depth first with memoization, rhs convolves the mean measure n times.
    """
    if spec.kind != "tabulated":
        raise PreconditionError("many_to_one_check needs a tabulated scheme")
    if n_gen < 0:
        raise PreconditionError("n_gen must be >= 0")

    from functools import lru_cache

    outs = spec.outcomes

    @lru_cache(maxsize=None)
    def expect(depth, shift):
        if depth == 0:
            return g(shift)
        return math.fsum(
            o.prob * math.fsum(expect(depth - 1, shift + a) for a in o.atoms)
            if o.atoms
            else 0.0
            for o in outs
        )

    lhs = expect(n_gen, 0)
    # n-fold convolution of the mean measure M
    pmf = {0: 1.0}
    mean_measure = {}
    for o in outs:
        for a in o.atoms:
            mean_measure[a] = mean_measure.get(a, 0.0) + o.prob
    for _ in range(n_gen):
        nxt = {}
        for x, px in pmf.items():
            for a, ma in mean_measure.items():
                nxt[x + a] = nxt.get(x + a, 0.0) + px * ma
        pmf = nxt
    rhs = math.fsum(px * g(x) for x, px in pmf.items())
    return {"lhs": lhs, "rhs": rhs}
