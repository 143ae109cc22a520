"""Command-line entry points: fit, infer, varcomp, simulate.

Each run takes an optional JSON config document; command-line flags override
config fields.  Coordinates are 0-based everywhere.  Every JSON report
embeds the resolved configuration and seed, so a run can be reproduced from
its own output.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from qlmm import dataio
from qlmm.debias import InferenceOptions, bh_fdr, infer_coordinates
from qlmm.lasso import LassoOptions, cross_validate_a, fit_fixed_effects
from qlmm.model_core import Cluster, ClusteredDataset
from qlmm.simulate import (
    McOptions,
    Scenario,
    a_sweep,
    make_basis,
    run_mc,
    scenario_from_total,
)
from qlmm.solver_backend import BACKEND
from qlmm.varcomp import VarCompOptions, cross_fit_varcomp

__all__ = ["main", "run_command"]

DEFAULT_A_GRID = (0.0, 0.5, 1.0, 2.0)


def _add_common(parser):
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--out", help="output path (default: JSON to stdout)")
    parser.add_argument("--format", choices=("csv", "json"), default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--a", default=None,
                        help="proxy constant, or 'cv' to cross-validate")
    parser.add_argument("--a-grid", default=None,
                        help="comma-separated grid for --a cv")
    parser.add_argument("--alpha", type=float, default=None)
    parser.add_argument("--threads", type=int, default=None,
                        help="worker processes for simulation (0 = auto)")
    parser.add_argument("--mode", choices=("whitened", "a0-robust"),
                        default=None)


def _add_data(parser):
    parser.add_argument("--data", help="long-format CSV file")
    parser.add_argument("--cluster-col", default=None)
    parser.add_argument("--response-col", default=None)
    parser.add_argument("--fixed-cols", default=None,
                        help="comma-separated fixed-effect columns")
    parser.add_argument("--random-cols", default=None,
                        help="comma-separated random-effect columns")
    parser.add_argument("--x-matrix", default=None,
                        help="wide matrix file (.npy or headerless CSV) "
                             "holding the fixed-effect block")
    parser.add_argument("--intercept", action="store_true", default=None,
                        help="append an unpenalized intercept column")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="qlmm",
        description="Quasi-likelihood estimation and inference for "
                    "high-dimensional linear mixed-effects models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fixed-effects Lasso fit")
    _add_common(p_fit)
    _add_data(p_fit)
    p_fit.add_argument("--lam", default=None,
                       help="penalty level, or 'auto' (scaled-Lasso rule)")
    p_fit.set_defaults(func=_cmd_fit)

    p_inf = sub.add_parser("infer", help="debiased confidence intervals/tests")
    _add_common(p_inf)
    _add_data(p_inf)
    p_inf.add_argument("--targets", default=None,
                       help="comma-separated 0-based coordinates")
    p_inf.add_argument("--bh-level", type=float, default=None,
                       help="also run Benjamini-Hochberg selection")
    p_inf.set_defaults(func=_cmd_infer)

    p_var = sub.add_parser("varcomp", help="variance-component estimation")
    _add_common(p_var)
    _add_data(p_var)
    p_var.add_argument("--basis", default=None,
                       help="basis preset: diagonal-halves, identity, "
                            "free-diagonal (or matrices in the config)")
    p_var.add_argument("--split", choices=("cross", "single", "none"),
                       default=None)
    p_var.add_argument("--psd-project", action="store_true", default=None)
    p_var.set_defaults(func=_cmd_varcomp)

    p_sim = sub.add_parser("simulate", help="Monte-Carlo experiment")
    _add_common(p_sim)
    p_sim.add_argument("--reps", type=int, default=None)
    p_sim.set_defaults(func=_cmd_simulate)
    return parser


class _Resolved:
    """Config dict with CLI-flag overrides."""

    def __init__(self, args):
        self.cfg = {}
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                self.cfg = json.load(fh)
        self.args = args

    def get(self, name, default=None):
        cli = getattr(self.args, name.replace("-", "_"), None)
        if cli is not None:
            return cli
        return self.cfg.get(name, default)


def _parse_a(r):
    a = r.get("a", "cv")
    if isinstance(a, str) and a != "cv":
        a = float(a)
    return a


def _parse_grid(r):
    grid = r.get("a_grid", DEFAULT_A_GRID)
    if isinstance(grid, str):
        grid = [float(v) for v in grid.split(",")]
    return tuple(float(v) for v in grid)


def _load_dataset(r):
    data = r.get("data")
    if not data:
        raise ValueError("no input data file (--data or config 'data')")
    fixed = r.get("fixed_cols", ())
    if isinstance(fixed, str):
        fixed = [c for c in fixed.split(",") if c]
    random = r.get("random_cols", ())
    if isinstance(random, str):
        random = [c for c in random.split(",") if c]
    schema = dataio.LongFormatSchema(
        cluster_col=r.get("cluster_col", "cluster"),
        response_col=r.get("response_col", "y"),
        fixed_cols=tuple(fixed),
        random_cols=tuple(random),
    )
    dataset = dataio.load_csv(data, schema, x_matrix_path=r.get("x_matrix"))
    if r.get("intercept"):
        dataset = _append_intercept(dataset)
    return dataset, bool(r.get("intercept"))


def _append_intercept(dataset):
    clusters = [
        Cluster(id=c.id, y=c.y, X=np.hstack([c.X, np.ones((c.m, 1))]), Z=c.Z)
        for c in dataset.clusters
    ]
    return ClusteredDataset(clusters)


def _lasso_options(r, dataset, intercept):
    lam = r.get("lam", "auto")
    if isinstance(lam, str) and lam != "auto":
        lam = float(lam)
    unpen = (dataset.p - 1,) if intercept else ()
    return LassoOptions(lam=lam, unpenalized=unpen)


def _emit(results, r, provenance):
    fmt = r.get("format", "json")
    out = r.get("out")
    if out:
        dataio.write_report(results, out, fmt, provenance=provenance)
        print(f"wrote {fmt} report to {out}")
    else:
        doc = {"report": dataio._jsonable(results),
               "provenance": dataio._jsonable(provenance)}
        print(json.dumps(doc, indent=2))


def _provenance(r, **extra):
    base = {
        "config": {k: v for k, v in r.cfg.items()},
        "seed": r.get("seed", 0),
        "backend": BACKEND,
    }
    base.update(extra)
    return base


def _cmd_fit(args):
    r = _Resolved(args)
    dataset, intercept = _load_dataset(r)
    options = _lasso_options(r, dataset, intercept)
    fit, tf, cv = fit_fixed_effects(
        dataset, a=_parse_a(r), options=options, a_grid=_parse_grid(r),
        cv_seed=int(r.get("seed", 0)),
    )
    prov = _provenance(
        r, a=fit.a, lam=fit.lam, sigma_init=fit.sigma_init, t_a=fit.t_a,
        converged=fit.converged, kkt_residual=fit.kkt_residual,
        cv_criteria=None if cv is None else cv.criteria.tolist(),
        n_nonzero=int(np.count_nonzero(fit.beta)),
    )
    _emit(fit, r, prov)
    return 0


def _cmd_infer(args):
    r = _Resolved(args)
    dataset, intercept = _load_dataset(r)
    options = _lasso_options(r, dataset, intercept)
    targets = r.get("targets")
    if targets is None:
        raise ValueError("no target coordinates (--targets or config)")
    if isinstance(targets, str):
        targets = [int(v) for v in targets.split(",") if v]
    alpha = float(r.get("alpha", 0.05))
    a = _parse_a(r)
    if a == "cv":
        cv = cross_validate_a(dataset, _parse_grid(r), options,
                              seed=int(r.get("seed", 0)))
        a = cv.a_star
    res = infer_coordinates(
        dataset, a, targets, alpha,
        InferenceOptions(lasso=options, mode=r.get("mode", "whitened")),
    )
    prov = _provenance(
        r, a=a, alpha=alpha, mode=res.mode, lam=res.fit.lam,
        lambda_j={rec.j: rec.lam_j for rec in res.records},
        failures=res.failures,
    )
    bh_level = r.get("bh_level")
    if bh_level is not None:
        pvals = [rec.p_value for rec in res.records]
        selected = bh_fdr(pvals, float(bh_level))
        prov["bh_selected"] = [res.records[i].j for i in selected]
    _emit(res, r, prov)
    return 0


def _cmd_varcomp(args):
    r = _Resolved(args)
    dataset, intercept = _load_dataset(r)
    options = _lasso_options(r, dataset, intercept)
    basis_spec = r.get("basis_matrices") or r.get("basis", "diagonal-halves")
    basis = make_basis(basis_spec, dataset.q)
    a = _parse_a(r)
    if a == "cv":
        cv = cross_validate_a(dataset, _parse_grid(r), options,
                              seed=int(r.get("seed", 0)))
        a = cv.a_star
    vc = cross_fit_varcomp(
        dataset, a, basis,
        VarCompOptions(
            split=r.get("split", "cross"),
            seed=int(r.get("seed", 0)),
            lasso=options,
            psd_project=bool(r.get("psd_project", False)),
        ),
    )
    prov = _provenance(r, a=a, split=r.get("split", "cross"),
                       dg_condition=vc.dg_condition)
    _emit(vc, r, prov)
    return 0


def _cmd_simulate(args):
    r = _Resolved(args)
    m = int(r.get("m", 4))
    if "n" in r.cfg or getattr(args, "n", None):
        scenario = Scenario(
            n=int(r.get("n")), m=m, p=int(r.get("p", 300)),
            q=int(r.get("q", 2)), rho=float(r.get("rho", 0.0)),
            psi_kind=r.get("psi_kind", "pd"),
            psi_custom=r.get("psi_custom"),
            sigma2_e=float(r.get("sigma2_e", 0.25)),
            seed=int(r.get("seed", 0)),
        )
    else:
        scenario = scenario_from_total(
            int(r.get("N", 144)), m, p=int(r.get("p", 300)),
            q=int(r.get("q", 2)), rho=float(r.get("rho", 0.0)),
            psi_kind=r.get("psi_kind", "pd"),
            psi_custom=r.get("psi_custom"),
            sigma2_e=float(r.get("sigma2_e", 0.25)),
            seed=int(r.get("seed", 0)),
        )
    reps = int(r.get("reps", 10))
    threads = int(r.get("threads", 1))
    coverage = tuple(
        (int(j), float(v)) for j, v in r.get("coverage_coords",
                                             ((1, 0.5), (9, 0.0)))
    )
    power = tuple(
        (int(j), float(v))
        for j, v in r.get("power_coords",
                          ((0, 1.0), (1, 0.5), (2, 0.2), (9, 0.0)))
    )
    options = McOptions(
        a=_parse_a(r),
        a_grid=_parse_grid(r),
        alpha=float(r.get("alpha", 0.05)),
        coverage_coords=coverage,
        power_coords=power,
        do_inference=bool(r.get("inference", True)),
        do_varcomp=bool(r.get("varcomp", False)),
        varcomp_split=r.get("varcomp_split", "none"),
        basis=r.get("basis", "diagonal-halves"),
        mode=r.get("mode", "whitened"),
        n_jobs=threads,
    )
    if r.get("kind", "mc") == "a-sweep":
        results = a_sweep(scenario, options.a_grid, reps, options)
    else:
        results = run_mc(scenario, reps, options)
        print(
            f"completed {reps} replications in {results.wall_time_s:.1f}s "
            f"({results.n_failed} failed)",
            file=sys.stderr,
        )
    prov = _provenance(r, scenario=scenario.__dict__, reps=reps)
    _emit(results, r, prov)
    return 0


def run_command(argv) -> int:
    """Parse and execute one CLI invocation; returns the exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except Exception as exc:
        print(f"qlmm: error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
