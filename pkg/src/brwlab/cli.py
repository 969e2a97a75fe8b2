"""Command line entry points; thin wrappers around the experiment runner.

Exit codes: 0 all declared tolerances pass, 1 configuration error,
2 tolerance failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigurationError, PreconditionError
from .experiments import ExperimentConfig, run_experiment


def _common(p, scheme=True, mc=True):
    if scheme:
        p.add_argument("--scheme", required=True, help="scheme JSON file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=os.environ.get("BRWLAB_OUT"),
                   help="output directory (default: $BRWLAB_OUT)")
    if mc:
        p.add_argument("--n", type=int, required=True)
        p.add_argument("--max-nodes", type=int, default=1_000_000)
        p.add_argument("--max-depth", type=int, default=1_000_000)


def build_parser():
    ap = argparse.ArgumentParser(prog="brwlab", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("tail", help="MC tail of the maximum decoration")
    _common(p)
    p.add_argument("--r", type=float, action="append", required=True)

    p = sub.add_parser("pdf", help="MC point probabilities of the maximum")
    _common(p)
    p.add_argument("--r", type=int, action="append", required=True)

    p = sub.add_parser("laplace", help="conditioned-volume Laplace transform")
    _common(p)
    p.add_argument("--r", type=float, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--condition", choices=("gt", "le", "eq"), default="gt")

    p = sub.add_parser("grid", help="deterministic fixed-point solve")
    _common(p, mc=False)
    p.add_argument("--r-max", type=int, required=True)
    p.add_argument("--t", type=float, default=0.0)
    p.add_argument("--r", type=float, action="append", default=[])

    p = sub.add_parser("reduce", help="multitype reduction parameters")
    _common(p, mc=False)
    p.add_argument("--base-type", required=True)
    p.add_argument("--n", type=int, default=0, help="one-step MC cross-check sample count")

    p = sub.add_parser("mobile", help="Boltzmann map observables via mobiles")
    _common(p, scheme=False)
    p.add_argument("--weights", required=True, help="Boltzmann weights JSON file {k: q_k}")
    p.add_argument("--r", type=int, action="append", required=True)
    p.add_argument("--alpha", type=float, default=None)

    p = sub.add_parser("ode", help="ODE/special-function verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=os.environ.get("BRWLAB_OUT"))

    p = sub.add_parser("report", help="run a full experiment config JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)

    # analysis one-shots
    p = sub.add_parser("psi", help="evaluate psi(t)")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--method", default="closed", choices=("closed", "series", "inversion"))

    p = sub.add_parser("big-r", help="evaluate R(alpha)")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--sigma2", type=float, required=True)
    p.add_argument("--eta2", type=float, required=True)

    p = sub.add_parser("tilt", help="h_t(inf) and tilted scheme")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--scheme", required=True)
    return ap


def _config_from_args(args):
    caps = {}
    if getattr(args, "max_nodes", None):
        caps["max_nodes"] = args.max_nodes
    if getattr(args, "max_depth", None):
        caps["max_depth"] = args.max_depth
    common = dict(seed=args.seed, workers=getattr(args, "workers", 1),
                  caps=caps, out_dir=args.out)
    if args.cmd == "tail":
        return ExperimentConfig(kind="tail", scheme_file=args.scheme, r_list=args.r,
                                n=args.n, **common)
    if args.cmd == "pdf":
        return ExperimentConfig(kind="pdf", scheme_file=args.scheme, r_list=args.r,
                                n=args.n, **common)
    if args.cmd == "laplace":
        return ExperimentConfig(kind=f"laplace_{args.condition}", scheme_file=args.scheme,
                                r_list=[args.r], alpha=args.alpha, n=args.n, **common)
    if args.cmd == "grid":
        return ExperimentConfig(kind="grid", scheme_file=args.scheme, r_max=args.r_max,
                                t=args.t, r_list=args.r, **common)
    if args.cmd == "reduce":
        return ExperimentConfig(kind="multitype_reduce", scheme_file=args.scheme,
                                base_type=args.base_type, n=args.n, **common)
    if args.cmd == "mobile":
        return ExperimentConfig(kind="mobile", scheme_file=args.weights, r_list=args.r,
                                n=args.n, alpha=args.alpha, **common)
    if args.cmd == "ode":
        return ExperimentConfig(kind="ode_check", seed=args.seed, out_dir=args.out)
    raise ConfigurationError(f"unhandled command {args.cmd}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "psi":
            from . import analysis
            ev = analysis.psi(args.t, args.method)
            print(json.dumps({"t": ev.t, "psi": ev.psi, "method": ev.method,
                              "est_error": ev.est_error}))
            return 0
        if args.cmd == "big-r":
            from . import analysis
            print(json.dumps({"alpha": args.alpha,
                              "big_R": analysis.big_R(args.alpha, args.sigma2, args.eta2)}))
            return 0
        if args.cmd == "tilt":
            from . import analysis
            from .schemes import SchemeSpec
            with open(args.scheme) as fh:
                spec = SchemeSpec.from_json_dict(json.load(fh))
            td = analysis.h_t_infinity(spec, args.t)
            tilted = analysis.tilted_scheme(spec, args.t)
            print(json.dumps({"t": td.t, "h_inf": td.h_inf, "residual": td.residual,
                              "tilted": tilted.to_json_dict()}))
            return 0
        if args.cmd == "report":
            with open(args.config) as fh:
                cfg = json.load(fh)
            if args.out:
                cfg["out_dir"] = args.out
            config = ExperimentConfig.from_json_dict(cfg)
        else:
            config = _config_from_args(args)
        report = run_experiment(config)
        print(report.to_json())
        return 0 if report.passed else 2
    except (ConfigurationError, PreconditionError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
