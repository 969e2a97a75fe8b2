"""Multitype decorated BRW: mean matrices, Perron data, and the reduction.

The reduced (monotype) BRW through a base type x keeps only the type-x
vertices; everything hanging strictly between consecutive type-x levels (a
"bush") is folded into the reduced vertex's decoration and weight, so the
total weight and the decoration supremum are conserved exactly.

Per-type reproduction laws are either tabulated (finite outcomes over
(displacement, child type) atoms; the JSON-facing form) or any object with
the same small interface exposing *exact* moment rows -- the mobile laws use
closed forms because their offspring counts have infinite support.

Matrix conventions follow the reduction formulas: M[x][y] is the mean number
of type-y children of a type-x vertex, N and O the first/second displacement
moment analogues, M_tilde is M with the base-type row zeroed.  The linear
systems are solved against (I - M_tilde) with the base-type entry of the
right-hand side zeroed first (the bush recursions start from e1_x = e2_x = 0;
feeding the x entry through would double-count the monotype case).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import SimCaps, TreeStats, stream
from .errors import ConfigurationError, InternalInconsistencyError, PreconditionError
from .schemes import PROB_TOL

MAX_TYPES = 64


@dataclass(frozen=True)
class TypedOutcome:
    prob: float
    atoms: tuple  # ((disp, child_type), ...)
    lam: int
    weight: float

    def __post_init__(self):
        if self.prob < 0:
            raise ConfigurationError("outcome probability < 0")
        sup = max([0] + [int(d) for d, _ in self.atoms])
        if self.lam < sup:
            raise ConfigurationError("lambda violates Lambda >= max(0, sup chi)")
        if self.weight < 0:
            raise ConfigurationError("weight < 0")


class TabulatedTypedLaw:
    """Finite-outcome reproduction law of one type."""

    def __init__(self, outcomes):
        outs = []
        for o in outcomes:
            if isinstance(o, TypedOutcome):
                outs.append(o)
            else:
                prob, atoms, lam, weight = o
                outs.append(
                    TypedOutcome(
                        float(prob),
                        tuple((int(d), str(k)) for d, k in atoms),
                        int(lam),
                        float(weight),
                    )
                )
        total = math.fsum(o.prob for o in outs)
        if abs(total - 1.0) > PROB_TOL:
            raise ConfigurationError(f"typed outcome probabilities sum to {total!r}")
        self.outcomes = tuple(outs)
        self._cum = np.cumsum([o.prob for o in outs])

    @property
    def deterministic_single(self):
        return all(len(o.atoms) == 1 for o in self.outcomes)

    def mean_row(self):
        row = {}
        for o in self.outcomes:
            for _, k in o.atoms:
                row[k] = row.get(k, 0.0) + o.prob
        return row

    def first_moment_row(self):
        row = {}
        for o in self.outcomes:
            for d, k in o.atoms:
                row[k] = row.get(k, 0.0) + o.prob * d
        return row

    def second_moment_row(self):
        row = {}
        for o in self.outcomes:
            for d, k in o.atoms:
                row[k] = row.get(k, 0.0) + o.prob * d * d
        return row

    @property
    def mean_weight(self):
        return math.fsum(o.prob * o.weight for o in self.outcomes)

    def sample(self, rng):
        i = int(np.searchsorted(self._cum, rng.random(), side="right"))
        o = self.outcomes[min(i, len(self.outcomes) - 1)]
        return o.atoms, o.lam, o.weight

    def to_json(self):
        return {
            "outcomes": [
                {
                    "prob": o.prob,
                    "atoms": [[d, k] for d, k in o.atoms],
                    "lambda": o.lam,
                    "weight": o.weight,
                }
                for o in self.outcomes
            ]
        }


class MultitypeSpec:
    def __init__(self, types, laws):
        types = tuple(types)
        if len(types) == 0:
            raise ConfigurationError("need at least one type")
        if len(types) > MAX_TYPES:
            raise ConfigurationError(f"at most {MAX_TYPES} types supported")
        if set(types) != set(laws):
            raise ConfigurationError("laws must cover exactly the declared types")
        self.types = types
        self.laws = dict(laws)
        if all(getattr(law, "deterministic_single", False) for law in self.laws.values()):
            raise ConfigurationError(
                "degenerate multitype scheme: every type always has exactly one child"
            )

    def index(self, ktype):
        try:
            return self.types.index(ktype)
        except ValueError:
            raise ConfigurationError(f"unknown type {ktype!r}") from None

    def to_json_dict(self):
        return {
            "types": list(self.types),
            "laws": {k: law.to_json() for k, law in self.laws.items()},
        }

    @classmethod
    def from_json_dict(cls, d):
        laws = {
            k: TabulatedTypedLaw(
                (o["prob"], [tuple(a) for a in o["atoms"]], o["lambda"], o["weight"])
                for o in payload["outcomes"]
            )
            for k, payload in d["laws"].items()
        }
        return cls(d["types"], laws)


@dataclass
class MeanMatrices:
    types: tuple
    M: np.ndarray
    M_tilde: np.ndarray | None
    N: np.ndarray
    O: np.ndarray


@dataclass
class ReducedParams:
    types: tuple
    base_type: str
    rho: float
    a: np.ndarray
    b: np.ndarray
    drift: float
    eta2: float
    boundary_means: np.ndarray  # e_y = b_y / b_x
    mean_weight: float


def _rows_to_matrix(spec, row_fn):
    k = len(spec.types)
    out = np.zeros((k, k))
    for i, x in enumerate(spec.types):
        row = row_fn(spec.laws[x])
        for ktype, val in row.items():
            out[i, spec.index(ktype)] = val
    return out


def mean_matrices(spec: MultitypeSpec, base_type=None) -> MeanMatrices:
    """Exact mean/displacement-moment matrices (closed-form per-type rows)."""
    M = _rows_to_matrix(spec, lambda law: law.mean_row())
    N = _rows_to_matrix(spec, lambda law: law.first_moment_row())
    O = _rows_to_matrix(spec, lambda law: law.second_moment_row())
    if not np.all(np.isfinite(M)):
        raise ConfigurationError("mean matrix has non-finite entries")
    M_tilde = None
    if base_type is not None:
        M_tilde = M.copy()
        M_tilde[spec.index(base_type), :] = 0.0
    return MeanMatrices(spec.types, M, M_tilde, N, O)


def _check_irreducible(M, types):
    k = len(M)
    reach = (M > 0).astype(bool) | np.eye(k, dtype=bool)
    for _ in range(max(1, int(math.ceil(math.log2(max(k, 2)))))):
        reach = reach @ reach
    if not reach.all():
        bad = np.argwhere(~reach)[0]
        raise PreconditionError(
            f"mean matrix is reducible: type {types[bad[0]]!r} cannot reach {types[bad[1]]!r}"
        )


def perron(M, types=None, tol=1e-12, max_iters=500_000):
    """Perron eigenvalue and positive left/right eigenvectors by power iteration.

    Iterates M + I (aperiodic shift, same eigenvectors) and its transpose;
    vectors are normalized to 1 at the first coordinate.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise PreconditionError("perron needs a square matrix")
    types = tuple(types) if types is not None else tuple(range(len(M)))
    _check_irreducible(M, types)
    k = len(M)
    A = M + np.eye(k)

    def power(mat):
        v = np.ones(k)
        lam = 1.0
        for _ in range(max_iters):
            w = mat @ v
            lam = w.sum() / v.sum()
            w = w / w.sum()
            resid = np.max(np.abs(mat @ w - lam * w)) / max(np.max(np.abs(w)), 1e-300)
            v = w
            if resid <= tol:
                break
        return lam - 1.0, v

    rho_r, b = power(A)
    rho_l, a = power(A.T)
    rho = 0.5 * (rho_r + rho_l)
    b = b / b[0]
    a = a / a[0]
    if np.max(np.abs(M @ b - rho * b)) > 1e-8 * max(1.0, np.max(np.abs(b))):
        raise InternalInconsistencyError("power iteration failed to converge")
    return float(rho), a, b


def reduced_params(spec: MultitypeSpec, base_type) -> ReducedParams:
    """Perron data and the reduced monotype parameters through `base_type`.

    Requires criticality (rho = 1 within 1e-9).  The linear solves run against
    (I - M_tilde) with the base entry of each right-hand side zeroed (bush
    recursions start at zero on the base type).
    """
    mats = mean_matrices(spec, base_type)
    xi = spec.index(base_type)
    rho, a, b = perron(mats.M, spec.types)
    if abs(rho - 1.0) > 1e-9:
        raise PreconditionError(f"multitype scheme not critical: rho={rho!r}")
    e = b / b[xi]
    I = np.eye(len(spec.types))
    A = I - mats.M_tilde

    def solve_bush(rhs):
        rhs = rhs.copy()
        rhs[xi] = 0.0
        sol = np.linalg.solve(A, rhs)
        if np.max(np.abs(A @ sol - rhs)) > 1e-10 * max(1.0, np.max(np.abs(rhs))):
            raise InternalInconsistencyError("(I - M_tilde) solve failed residual check")
        return sol

    e1 = solve_bush(mats.N @ e)
    drift = float((mats.N @ e + mats.M @ e1)[xi])
    e2 = solve_bush(mats.O @ e + mats.N @ e1)
    eta2 = float((mats.O @ e + mats.N @ e1 + mats.M @ e2)[xi])
    if eta2 < 0:
        raise InternalInconsistencyError(f"reduced eta^2 = {eta2} < 0")
    # mean weight of the reduced vertex = expected bush weight
    dvec = np.array([spec.laws[t].mean_weight for t in spec.types])
    dsol = solve_bush(dvec)
    mean_weight = float(dvec[xi] + (mats.M @ dsol)[xi])
    return ReducedParams(spec.types, base_type, rho, a, b, drift, eta2, e, mean_weight)


# ---------------------------------------------------------------------------
# simulation


def _simulate_multitype(spec, root_type, caps, rng):
    """BFS over the multitype tree; returns flat per-vertex records.

    Positions are integers so every derived identity is exact.
    """
    verts_type = [root_type]
    verts_pos = [0]
    verts_parent = [-1]
    verts_lam = []
    verts_weight = []
    frontier = [0]
    depth = [0]
    gen = 0
    truncated = False
    while frontier:
        nxt = []
        for vi in frontier:
            atoms, lam, weight = spec.laws[verts_type[vi]].sample(rng)
            verts_lam.append(int(lam))
            verts_weight.append(float(weight))
            for d, ck in atoms:
                verts_type.append(ck)
                verts_pos.append(verts_pos[vi] + int(d))
                verts_parent.append(vi)
                depth.append(depth[vi] + 1)
                nxt.append(len(verts_type) - 1)
        gen += 1
        if len(verts_type) > caps.max_nodes or gen >= caps.max_depth:
            truncated = len(nxt) > 0
            # close out queued-but-unexpanded vertices with zero draws
            for vi in nxt:
                verts_lam.append(0)
                verts_weight.append(0.0)
            break
        frontier = nxt
    n = len(verts_lam)
    return {
        "type": verts_type[:n],
        "pos": verts_pos[:n],
        "parent": verts_parent[:n],
        "lam": verts_lam,
        "weight": verts_weight,
        "depth": depth[:n],
        "truncated": truncated,
    }


def simulate_reduced(spec: MultitypeSpec, base_type, caps: SimCaps = SimCaps(),
                     rng=None) -> TreeStats:
    """Simulate the multitype tree from `base_type` and extract the reduced BRW.

    Verifies on the sample (explored portion) that the reduction conserves the
    total weight and the decoration supremum exactly; raises on violation.
    """
    if rng is None:
        raise PreconditionError("simulate_reduced needs an explicit rng")
    rec = _simulate_multitype(spec, base_type, caps, rng)
    n = len(rec["lam"])
    types, pos, parent = rec["type"], rec["pos"], rec["parent"]
    lam, weight, depth = rec["lam"], rec["weight"], rec["depth"]
    # bushes: a base-type vertex roots a new bush, others join the parent's
    bush = [-1] * n
    bush_root = []  # vertex index of each bush root
    red_depth = []
    for vi in range(n):
        if types[vi] == base_type:
            bush[vi] = len(bush_root)
            bush_root.append(vi)
            if parent[vi] < 0:
                red_depth.append(0)
            else:
                red_depth.append(red_depth[bush[parent[vi]]] + 1)
        else:
            bush[vi] = bush[parent[vi]]
    nb = len(bush_root)
    bush_relsup = [-math.inf] * nb
    bush_weights = [[] for _ in range(nb)]
    for vi in range(n):
        bi = bush[vi]
        rel = (pos[vi] + lam[vi]) - pos[bush_root[bi]]
        if rel > bush_relsup[bi]:
            bush_relsup[bi] = rel
        bush_weights[bi].append(weight[vi])
    # reduced stats, reassembled from relative bush data
    red_sup = max(pos[bush_root[bi]] + bush_relsup[bi] for bi in range(nb))
    red_weight = math.fsum(math.fsum(ws) for ws in bush_weights)
    # direct originals
    orig_sup = max(pos[vi] + lam[vi] for vi in range(n))
    orig_weight = math.fsum(weight)
    if red_sup != orig_sup:
        raise InternalInconsistencyError(
            f"reduction broke the decoration sup: {red_sup} != {orig_sup}"
        )
    integral = all(w == int(w) for w in weight)
    if integral:
        weight_ok = red_weight == orig_weight  # fsum is exact on integers
    else:
        weight_ok = math.isclose(red_weight, orig_weight, rel_tol=1e-12, abs_tol=1e-12)
    if not weight_ok:
        raise InternalInconsistencyError(
            f"reduction broke the weight sum: {red_weight} != {orig_weight}"
        )
    return TreeStats(
        progeny=nb,
        max_displacement=float(max(pos[v] for v in bush_root)),
        max_decoration=float(red_sup),
        total_weight=red_weight,
        depth=max(red_depth) if red_depth else 0,
        truncated=rec["truncated"],
    )


def reduced_one_step(spec: MultitypeSpec, base_type, rng, caps: SimCaps = SimCaps(max_nodes=100_000)):
    """Displacements of the root's reduced children (one bush exploration)."""
    frontier = [(0, base_type, True)]
    disps = []
    nodes = 0
    while frontier:
        nxt = []
        for posv, ktype, is_root in frontier:
            if ktype == base_type and not is_root:
                disps.append(posv)
                continue
            atoms, _, _ = spec.laws[ktype].sample(rng)
            for d, ck in atoms:
                nxt.append((posv + int(d), ck, False))
            nodes += 1
            if nodes > caps.max_nodes:
                raise InternalInconsistencyError("bush exploration exceeded caps")
        frontier = nxt
    return disps


def boundary_mean_check(spec: MultitypeSpec, base_type, start_type, n, seed=0):
    """MC mean of the boundary-measure mass started from `start_type` vs b_y/b_x."""
    params = reduced_params(spec, base_type)
    predicted = float(params.b[spec.index(start_type)] / params.b[spec.index(base_type)])
    counts = np.empty(n)
    rng = stream(seed, 0)
    for i in range(n):
        if start_type == base_type:
            counts[i] = 1.0  # the boundary measure of T~ started at x is delta_root
            continue
        frontier = [start_type]
        c = 0
        nodes = 0
        while frontier:
            nxt = []
            for ktype in frontier:
                if ktype == base_type:
                    c += 1
                    continue
                atoms, _, _ = spec.laws[ktype].sample(rng)
                nxt.extend(ck for _, ck in atoms)
                nodes += 1
                if nodes > 1_000_000:
                    raise InternalInconsistencyError("boundary exploration ran away")
            frontier = nxt
        counts[i] = c
    mean = float(counts.mean())
    se = float(counts.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return {"mc_mean": mean, "se": se, "predicted": predicted, "n": n}
