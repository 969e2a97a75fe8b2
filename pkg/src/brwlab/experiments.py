"""Experiment runner: wires schemes, engine, grid, analysis, mobile into
reproducible runs with CSV + JSON reports.

Every experiment requires an explicit seed (no ambient randomness).  CSV files
carry only the aggregate numbers (bitwise deterministic given the config);
the JSON report additionally echoes the config, derived ratios, declared
tolerance checks and the wall clock.  `Report.canonical_dict()` strips the
volatile wall-clock field; everything else is reproducible byte for byte.
"""

from __future__ import annotations

import io
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import analysis, engine, gridsolve, mobile as mobile_mod, multitype, stats
from .errors import ConfigurationError
from .schemes import SchemeSpec, scheme_moments

KINDS = (
    "tail",
    "pdf",
    "laplace_gt",
    "laplace_le",
    "laplace_eq",
    "grid",
    "multitype_reduce",
    "mobile",
    "ode_check",
)


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    scheme: dict | None = None
    scheme_file: str | None = None
    r_list: list = field(default_factory=list)
    alpha: float | None = None
    n: int | None = None
    t: float = 0.0
    r_max: int | None = None
    base_type: str | None = None
    selector: str = "vertices"
    caps: dict = field(default_factory=dict)
    workers: int = 1
    out_dir: str | None = None
    tolerances: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.seed is None:
            raise ConfigurationError("seed is mandatory (no ambient randomness)")
        needs_scheme = self.kind in (
            "tail", "pdf", "laplace_gt", "laplace_le", "laplace_eq", "grid",
            "multitype_reduce", "mobile",
        )
        if needs_scheme and self.scheme is None and self.scheme_file is None:
            raise ConfigurationError(f"kind {self.kind!r} requires scheme or scheme_file")
        mc = self.kind in ("tail", "pdf", "laplace_gt", "laplace_le", "laplace_eq", "mobile")
        if mc:
            if self.n is None or self.n < 1:
                raise ConfigurationError(f"kind {self.kind!r} requires n >= 1")
            if self.kind != "mobile" or True:
                if not self.r_list and self.kind in ("tail", "pdf", "mobile"):
                    raise ConfigurationError(f"kind {self.kind!r} requires a nonempty r_list")
        if self.kind.startswith("laplace"):
            if self.alpha is None:
                raise ConfigurationError("laplace experiments require alpha")
            if not self.r_list:
                raise ConfigurationError("laplace experiments require r_list with one level")
        if self.kind == "multitype_reduce" and self.base_type is None:
            raise ConfigurationError("multitype_reduce requires base_type")

    @classmethod
    def from_json_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ConfigurationError(f"unknown config fields: {sorted(bad)}")
        return cls(**d)

    def scheme_dict(self):
        if self.scheme is not None:
            return self.scheme
        with open(self.scheme_file) as fh:
            return json.load(fh)

    def sim_caps(self):
        return engine.SimCaps(
            max_nodes=int(self.caps.get("max_nodes", 1_000_000)),
            max_depth=int(self.caps.get("max_depth", 1_000_000)),
        )


@dataclass
class Report:
    config: dict
    kind: str
    rows: list
    derived: dict
    checks: list
    passed: bool
    wall_clock_s: float
    csv_text: str

    def canonical_dict(self):
        return {
            "config": self.config,
            "kind": self.kind,
            "rows": self.rows,
            "derived": self.derived,
            "checks": self.checks,
            "passed": self.passed,
        }

    def to_json(self):
        d = self.canonical_dict()
        d["wall_clock_s"] = self.wall_clock_s
        return json.dumps(d, indent=2, sort_keys=True)

    def canonical_json(self):
        return json.dumps(self.canonical_dict(), indent=2, sort_keys=True)


def _csv(columns, rows):
    buf = io.StringIO()
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(row[c]) for c in columns) + "\n")
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _check(checks, name, value, lo, hi):
    ok = (lo is None or value >= lo) and (hi is None or value <= hi)
    checks.append({"name": name, "value": value, "lo": lo, "hi": hi, "pass": bool(ok)})
    return ok


def run_experiment(config: ExperimentConfig) -> Report:
    """Dispatch one configured experiment; deterministic given (seed, config)."""
    t0 = time.perf_counter()
    kind = config.kind
    handler = _HANDLERS[kind]
    rows, derived, checks, csv_text = handler(config)
    passed = all(c["pass"] for c in checks) if checks else True
    report = Report(
        # workers/out_dir are execution details, not part of the experiment identity
        config={k: v for k, v in config.__dict__.items() if k not in ("out_dir", "workers")},
        kind=kind,
        rows=rows,
        derived=derived,
        checks=checks,
        passed=passed,
        wall_clock_s=time.perf_counter() - t0,
        csv_text=csv_text,
    )
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        base = os.path.join(config.out_dir, kind)
        with open(base + ".csv", "w", newline="") as fh:
            fh.write(csv_text)
        with open(base + ".json", "w") as fh:
            fh.write(report.to_json())
    return report


# --- handlers ---------------------------------------------------------------


def _load_scheme(config) -> SchemeSpec:
    return SchemeSpec.from_json_dict(config.scheme_dict())


def _tail(config):
    spec = _load_scheme(config)
    mom = scheme_moments(spec)
    ests = engine.estimate_tail(
        spec, config.r_list, config.n, config.sim_caps(), config.seed, config.workers
    )
    limit = 6.0 * mom.eta2 / mom.sigma2
    rows = []
    for e in ests:
        ratio = e.p_hat * e.r * e.r / limit if e.r > 0 else float("nan")
        rows.append(
            {
                "r": e.r, "n": e.n, "hits": e.hits, "ambiguous": e.ambiguous,
                "p_hat": e.p_hat, "ci_low": e.ci_low, "ci_high": e.ci_high,
                "ratio_to_limit": ratio,
                "p_low_bound": e.p_low_bound, "p_high_bound": e.p_high_bound,
            }
        )
    csv_text = _csv(["r", "n", "hits", "ambiguous", "p_hat", "ci_low", "ci_high"], rows)
    checks = []
    tol = config.tolerances.get("tail_ratio")
    if tol:
        for row in rows:
            if row["r"] >= config.tolerances.get("tail_ratio_min_r", 0):
                _check(checks, f"tail_ratio_r{row['r']:g}", row["ratio_to_limit"], tol[0], tol[1])
    derived = {"limit_constant": limit, "moments": mom.__dict__}
    return rows, derived, checks, csv_text


def _pdf(config):
    spec = _load_scheme(config)
    mom = scheme_moments(spec)
    levels = sorted({int(r) for r in config.r_list} | {int(r) - 1 for r in config.r_list})
    ests = {e.r: e for e in engine.estimate_tail(
        spec, levels, config.n, config.sim_caps(), config.seed, config.workers)}
    limit = 12.0 * mom.eta2 / mom.sigma2
    rows = []
    for r in sorted(int(r) for r in config.r_list):
        hits_eq = ests[r - 1].hits - ests[r].hits
        lo, hi = stats.wilson_ci(max(hits_eq, 0), config.n)
        g_hat = hits_eq / config.n
        rows.append(
            {
                "r": r, "n": config.n, "hits_eq": hits_eq, "g_hat": g_hat,
                "ci_low": lo, "ci_high": hi,
                "ratio_to_limit": g_hat * r**3 / limit if r > 0 else float("nan"),
            }
        )
    csv_text = _csv(["r", "n", "hits_eq", "g_hat", "ci_low", "ci_high"], rows)
    checks = []
    tol = config.tolerances.get("pdf_ratio")
    if tol:
        for row in rows:
            _check(checks, f"pdf_ratio_r{row['r']}", row["ratio_to_limit"], tol[0], tol[1])
    return rows, {"limit_constant": limit}, checks, csv_text


def _laplace(condition):
    def handler(config):
        spec = _load_scheme(config)
        mom = scheme_moments(spec)
        r = config.r_list[0]
        res = engine.estimate_conditional_laplace(
            spec, r, config.alpha, condition, config.n, config.sim_caps(),
            config.seed, config.workers,
        )
        limit = analysis.laplace_limit_gt(config.alpha, mom.sigma2)
        row = {
            "r": r, "alpha": config.alpha, "t": res.t, "n": config.n,
            "condition": condition,
            "estimate": res.estimate if res.estimate is not None else float("nan"),
            "ci_low": res.ci_low if res.ci_low is not None else float("nan"),
            "ci_high": res.ci_high if res.ci_high is not None else float("nan"),
            "n_conditioned": res.n_conditioned, "n_ambiguous": res.n_ambiguous,
        }
        csv_text = _csv(
            ["r", "alpha", "t", "n", "condition", "estimate", "ci_low", "ci_high",
             "n_conditioned", "n_ambiguous"],
            [row],
        )
        checks = []
        derived = {"limit_gt": limit, "insufficient": res.insufficient}
        if condition in ("gt", "eq"):
            if res.estimate is not None:
                derived["rel_error_vs_limit"] = abs(res.estimate - limit) / limit
                tol = config.tolerances.get("laplace_rel_tol")
                if tol is not None:
                    _check(checks, "laplace_vs_limit", derived["rel_error_vs_limit"], None, tol)
        else:
            big_r = analysis.big_R(config.alpha, mom.sigma2, mom.eta2)
            if res.estimate is not None:
                derived["scaled_gap"] = r * r * (1.0 - res.estimate)
                derived["big_R"] = big_r
        return [row], derived, checks, csv_text

    return handler


def _grid(config):
    spec = _load_scheme(config)
    mom = scheme_moments(spec)
    r_max = config.r_max or (max(int(r) for r in config.r_list) * 4 if config.r_list else 200)
    sol = gridsolve.solve_h_grid(spec, r_max, t=config.t)
    g = gridsolve.pdf_from_grid(sol) if config.t == 0.0 else None
    w = sol.w()
    rows = []
    for r in range(r_max + 1):
        rows.append(
            {
                "r": r,
                "h": float(sol.h[r]),
                "w": float(w[r]),
                "r2w": float(r * r * w[r]),
                "g": float(g[r]) if g is not None else float("nan"),
                "r3g": float(r**3 * g[r]) if g is not None else float("nan"),
            }
        )
    csv_text = _csv(["r", "h", "w", "r2w", "g", "r3g"], rows)
    derived = {
        "t": sol.t,
        "iterations": sol.iterations,
        "residual": sol.residual,
        "boundary_bias": sol.boundary_bias,
        "limit_r2w": 6.0 * mom.eta2 / mom.sigma2,
        "limit_r3g": 12.0 * mom.eta2 / mom.sigma2,
    }
    checks = []
    tol = config.tolerances.get("r2w_window")
    if tol:
        for r in config.r_list:
            _check(checks, f"r2w_r{int(r)}", rows[int(r)]["r2w"], tol[0], tol[1])
    tol = config.tolerances.get("r3g_window")
    if tol:
        for r in config.r_list:
            _check(checks, f"r3g_r{int(r)}", rows[int(r)]["r3g"], tol[0], tol[1])
    return rows, derived, checks, csv_text


def _multitype_reduce(config):
    spec = multitype.MultitypeSpec.from_json_dict(config.scheme_dict())
    params = multitype.reduced_params(spec, config.base_type)
    row = {
        "base_type": config.base_type,
        "rho": params.rho,
        "drift": params.drift,
        "eta2": params.eta2,
        "mean_weight": params.mean_weight,
    }
    n = config.n or 0
    derived = {
        "boundary_means": {t: float(v) for t, v in zip(params.types, params.boundary_means)},
    }
    if n:
        rng = engine.stream(config.seed, 0)
        disps = []
        for _ in range(n):
            disps.extend(multitype.reduced_one_step(spec, config.base_type, rng))
        arr = np.asarray(disps, dtype=float)
        derived["mc_one_step"] = {
            "n_trees": n,
            "mean_children": len(arr) / n,
            "mean_disp": float(arr.mean()) if len(arr) else 0.0,
            "mean_sq_disp_per_tree": float((arr**2).sum() / n),
        }
    csv_text = _csv(["base_type", "rho", "drift", "eta2", "mean_weight"], [row])
    checks = []
    tol = config.tolerances.get("rho_tol")
    if tol is not None:
        _check(checks, "rho_minus_1", abs(params.rho - 1.0), None, tol)
    return [row], derived, checks, csv_text


def _mobile(config):
    weights = mobile_mod.BoltzmannWeights.from_json_dict(config.scheme_dict())
    data = mobile_mod.solve_partition(weights)
    res = mobile_mod.estimate_map_observables(
        data, config.r_list, config.n, config.sim_caps(), config.seed,
        alpha=config.alpha, workers=config.workers,
    )
    rows = []
    for row in res["rows"]:
        r = row["r"]
        rows.append(
            {
                "r": r,
                "p_gt": row["p_gt"],
                "p_gt_ci_low": row["p_gt_ci"][0],
                "p_gt_ci_high": row["p_gt_ci"][1],
                "p_eq": row["p_eq"],
                "p_eq_ci_low": row["p_eq_ci"][0],
                "p_eq_ci_high": row["p_eq_ci"][1],
                "ratio_gt": row["p_gt"] * r * r / 2.0,
                "ratio_eq": row["p_eq"] * r**3 / 4.0,
            }
        )
    lap = res["laplace"]["n_V"]
    csv_text = _csv(
        ["r", "p_gt", "p_gt_ci_low", "p_gt_ci_high", "p_eq", "p_eq_ci_low", "p_eq_ci_high",
         "ratio_gt", "ratio_eq"],
        rows,
    )
    derived = {
        "Z": data.Z,
        "sigma2_map": data.sigma2_map,
        "laplace": res["laplace"],
        "limit_laplace": res["limit_laplace"],
        "n_dagger": res["n_dagger"],
        "n_truncated": res["n_truncated"],
    }
    checks = []
    tol = config.tolerances.get("distance_ratio")
    if tol:
        for row in rows:
            _check(checks, f"dist_gt_ratio_r{row['r']}", row["ratio_gt"], tol[0], tol[1])
    tol = config.tolerances.get("laplace_rel_tol")
    if tol is not None and lap["estimate"] is not None:
        rel = abs(lap["estimate"] - res["limit_laplace"]) / res["limit_laplace"]
        _check(checks, "mobile_laplace_vs_limit", rel, None, tol)
    return rows, derived, checks, csv_text


def _ode_check(config):
    checks = []
    rows = []
    for t in (0.1, 0.2, 0.3):
        inv = analysis.psi(t, "inversion").psi
        ser = analysis.psi(t, "series").psi
        clo = analysis.psi(t, "closed").psi
        rows.append({"t": t, "inversion": inv, "series": ser, "closed": clo})
        _check(checks, f"psi_methods_agree_t{t}", max(abs(inv - ser), abs(inv - clo)), None, 1e-8)
    for t in (0.05, 0.5, 2.0, 10.0):
        x = analysis.psi(t, "inversion").psi
        _check(checks, f"psi_roundtrip_t{t}", abs(analysis.f_of(x) - t), None, 1e-9)
    grid = np.linspace(0.2, 5.0, 25)
    h = 1e-4
    worst = 0.0
    for t in grid:
        p0 = analysis.psi_closed(t)
        pp = (analysis.psi_closed(t + h) - 2 * p0 + analysis.psi_closed(t - h)) / (h * h)
        worst = max(worst, abs(pp - p0 * p0 - p0) / (1.0 + p0 * p0))
    _check(checks, "psi_ode_fd_residual", worst, None, 1e-4)
    for u, tol in ((1e-2, 1e-2), (1e-3, 1e-3)):
        val = analysis.big_R(u, 1.0, 1.0) / 6.0
        _check(checks, f"bigR_series_ratio_u{u:g}", abs(val / (0.6 * u * u) - 1.0), None, 2 * tol)
    csv_text = _csv(["t", "inversion", "series", "closed"], rows)
    return rows, {}, checks, csv_text


_HANDLERS = {
    "tail": _tail,
    "pdf": _pdf,
    "laplace_gt": _laplace("gt"),
    "laplace_le": _laplace("le"),
    "laplace_eq": _laplace("eq"),
    "grid": _grid,
    "multitype_reduce": _multitype_reduce,
    "mobile": _mobile,
    "ode_check": _ode_check,
}
