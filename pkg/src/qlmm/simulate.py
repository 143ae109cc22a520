"""Data generation and the Monte-Carlo experiment driver.

Rows of the joint design ``(X, Z)`` are Gaussian with identity marginal
covariances; only the first ``q`` columns of ``X`` may correlate with ``Z``
(cross-covariance ``rho^j`` against the j-th random-effect column), so
sampling factors a single ``2q x 2q`` block instead of the full ``(p+q)``
covariance.  Random effects are drawn from the configured ``Psi``, noise is
homoscedastic.

``run_mc`` drives the full estimation/inference pipeline per replication and
aggregates coverage, interval spread, rejection rates, squared estimation
error, effective sample size, and variance-component errors.  Replication
seeds derive deterministically from the scenario seed, so reports are
reproducible bit for bit (wall time is tracked in memory but never
serialized).
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from qlmm.debias import InferenceOptions, infer_coordinates
from qlmm.lasso import LassoOptions, cross_validate_a, fit_fixed_effects
from qlmm.model_core import Cluster, ClusteredDataset
from qlmm.varcomp import VarCompOptions, cross_fit_varcomp, design_gram

__all__ = [
    "Scenario",
    "GroundTruth",
    "McOptions",
    "McReport",
    "make_psi",
    "make_basis",
    "scenario_from_total",
    "generate_dataset",
    "run_mc",
    "a_sweep",
]

_PSI_SCALE = 0.56  # covariance scale of the reference simulation designs


@dataclass(frozen=True)
class Scenario:
    """One simulation design cell.

    ``psi_kind``: "pd" (unit-diagonal Toeplitz, entries ``0.56^|j-k|``),
    "singular" (diagonal, ``0.56`` on the first half, zero after),
    "diag" (``0.56 I_q``), or "custom" with an explicit matrix.
    """

    n: int
    m: int
    p: int
    q: int
    rho: float = 0.0
    psi_kind: str = "pd"
    psi_custom: tuple | None = None
    sigma2_e: float = 0.25
    beta_nonzero: tuple = (1.0, 0.5, 0.2, 0.1, 0.05)
    seed: int = 0

    def __post_init__(self):
        if min(self.n, self.m, self.p) < 1 or self.q < 0:
            raise ValueError("dimensions must be positive (q may be zero)")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if self.psi_kind not in ("pd", "singular", "diag", "custom"):
            raise ValueError(f"unknown psi_kind {self.psi_kind!r}")
        if self.psi_kind == "custom" and self.psi_custom is None:
            raise ValueError("psi_kind='custom' needs psi_custom")
        if not self.sigma2_e > 0:
            raise ValueError("sigma2_e must be positive")
        if len(self.beta_nonzero) > self.p:
            raise ValueError("more nonzero coefficients than columns")

    @property
    def N(self) -> int:
        return self.n * self.m

    def beta_true(self) -> np.ndarray:
        beta = np.zeros(self.p)
        beta[: len(self.beta_nonzero)] = self.beta_nonzero
        return beta


@dataclass
class GroundTruth:
    beta: np.ndarray
    psi: np.ndarray
    sigma2_e: float
    gammas: list


def scenario_from_total(N: int, m: int, **kwargs) -> Scenario:
    """Scenario with ``n = N / m`` clusters; rejects non-divisible totals."""
    if N % m != 0:
        raise ValueError(f"total sample size {N} is not divisible by m={m}")
    return Scenario(n=N // m, m=m, **kwargs)


def make_psi(scenario: Scenario) -> np.ndarray:
    q = scenario.q
    if scenario.psi_kind == "custom":
        psi = np.asarray(scenario.psi_custom, dtype=np.float64)
        if psi.shape != (q, q) or not np.allclose(psi, psi.T):
            raise ValueError("custom Psi must be symmetric q x q")
        if q and np.linalg.eigvalsh(psi).min() < -1e-10:
            raise ValueError("custom Psi must be positive semidefinite")
        return psi
    if scenario.psi_kind == "pd":
        idx = np.arange(q)
        return _PSI_SCALE ** np.abs(idx[:, None] - idx[None, :])
    if scenario.psi_kind == "diag":
        return _PSI_SCALE * np.eye(q)
    diag = np.zeros(q)
    diag[: q // 2] = _PSI_SCALE
    return np.diag(diag)


def make_basis(name, q: int) -> list:
    """Named symmetric basis presets for the covariance parameterization."""
    if not isinstance(name, str):
        return [np.asarray(G, dtype=np.float64) for G in name]
    if name == "diagonal-halves":
        if q < 2:
            raise ValueError("diagonal-halves needs q >= 2")
        g1 = np.zeros((q, q))
        g2 = np.zeros((q, q))
        half = q // 2
        g1[np.arange(half), np.arange(half)] = 1.0
        g2[np.arange(half, q), np.arange(half, q)] = 1.0
        return [g1, g2]
    if name == "identity":
        return [np.eye(q)]
    if name == "free-diagonal":
        return [np.diag(np.eye(q)[j]) for j in range(q)]
    raise ValueError(f"unknown basis preset {name!r}")


def _active_cholesky(q: int, rho: float) -> np.ndarray:
    """Factor of the joint covariance of the correlated (x_{1:q}, z) block."""
    if q == 0:
        return np.zeros((0, 0))
    cov = np.eye(2 * q)
    cross = np.tile(rho ** np.arange(1, q + 1), (q, 1))
    cov[:q, q:] = cross
    cov[q:, :q] = cross.T
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        evals = np.linalg.eigvalsh(cov)
        raise ValueError(
            "joint (X, Z) covariance is not positive semidefinite "
            f"(smallest eigenvalue {evals.min():.3e})"
        ) from None


def generate_dataset(scenario: Scenario, seed=None):
    """Draw one dataset; returns ``(dataset, GroundTruth)``.

    Reproducible from the seed (``scenario.seed`` unless overridden).
    """
    rng = np.random.default_rng(scenario.seed if seed is None else seed)
    q, m, p = scenario.q, scenario.m, scenario.p
    beta = scenario.beta_true()
    psi = make_psi(scenario)
    if q:
        evals, vecs = np.linalg.eigh(psi)
        psi_sqrt = (vecs * np.sqrt(np.maximum(evals, 0.0))) @ vecs.T
    chol = _active_cholesky(q, scenario.rho)
    sd_e = math.sqrt(scenario.sigma2_e)

    clusters = []
    gammas = []
    for i in range(scenario.n):
        if q:
            block = rng.standard_normal((m, 2 * q)) @ chol.T
            x_act, Z = block[:, :q], block[:, q:]
            X = np.hstack([x_act, rng.standard_normal((m, p - q))])
            gamma = psi_sqrt @ rng.standard_normal(q)
        else:
            X = rng.standard_normal((m, p))
            Z = np.zeros((m, 0))
            gamma = np.zeros(0)
        eps = sd_e * rng.standard_normal(m)
        y = X @ beta + Z @ gamma + eps
        clusters.append(Cluster(id=i, y=y, X=X, Z=Z))
        gammas.append(gamma)
    return ClusteredDataset(clusters), GroundTruth(
        beta=beta, psi=psi, sigma2_e=scenario.sigma2_e, gammas=gammas
    )


@dataclass(frozen=True)
class McOptions:
    """Pipeline configuration for one Monte-Carlo cell.

    Coordinates are 0-based; each metric coordinate pairs an index with its
    true coefficient value, which also labels the reported rates.
    """

    a: float | str = "cv"
    a_grid: tuple = (0.0, 0.5, 1.0, 2.0)
    alpha: float = 0.05
    coverage_coords: tuple = ((1, 0.5), (9, 0.0))
    power_coords: tuple = ((0, 1.0), (1, 0.5), (2, 0.2), (9, 0.0))
    do_inference: bool = True
    do_varcomp: bool = False
    varcomp_split: str = "none"
    basis: object = "diagonal-halves"
    mode: str = "whitened"
    lasso: LassoOptions = LassoOptions()
    n_jobs: int = 1


@dataclass
class McReport:
    """Aggregated metrics of one cell; all rates lie in [0, 1]."""

    scenario: dict
    options: dict
    reps: int
    n_failed: int
    coverage: dict
    sd: dict
    se_mean: dict
    rejection: dict
    sse_mean: float | None
    sse_median: float | None
    l2_median: float | None
    t_a_mean: float | None
    a_mean: float | None
    a_positive_share: float | None
    mae_sigma2: float | None
    mae_eta: list | None
    eta_l2_median: float | None
    kkt_max: float
    degenerate_records: int
    failures: list
    backend: str
    wall_time_s: float = 0.0  # in-memory only, excluded from serialization


def _coord_label(value: float) -> str:
    return f"{value:g}"


def _resolve_a(dataset, options: McOptions, cv_seed):
    if options.a == "cv":
        cv = cross_validate_a(dataset, options.a_grid, options.lasso,
                              seed=cv_seed)
        return cv.a_star, cv
    return float(options.a), None


def _replicate(scenario: Scenario, options: McOptions, rep_seed) -> dict:
    data_seed, cv_seed, split_seed = rep_seed.spawn(3)
    dataset, truth = generate_dataset(scenario, seed=data_seed)
    out: dict = {"kkt_max": 0.0}

    a_star, cv = _resolve_a(dataset, options, cv_seed)
    if cv is not None:
        out["kkt_max"] = max(out["kkt_max"], cv.kkt_max)
    fit, tf, _ = fit_fixed_effects(dataset, a=a_star, options=options.lasso)
    out["kkt_max"] = max(out["kkt_max"], fit.kkt_residual)
    delta = fit.beta - truth.beta
    out["a_star"] = a_star
    out["t_a"] = tf.t_a
    out["sse"] = float(delta @ delta)
    out["l2"] = math.sqrt(out["sse"])

    if options.do_inference:
        targets = sorted(
            {j for j, _ in options.coverage_coords}
            | {j for j, _ in options.power_coords}
        )
        res = infer_coordinates(
            dataset, a_star, targets, options.alpha,
            InferenceOptions(lasso=options.lasso, mode=options.mode),
            fit=fit, transformed=tf,
        )
        by_j = {rec.j: rec for rec in res.records}
        out["degenerate"] = sum(rec.degenerate for rec in res.records)
        out["infer_failures"] = dict(res.failures)
        cover, est = {}, {}
        for j, value in options.coverage_coords:
            rec = by_j.get(j)
            if rec is None:
                continue
            cover[_coord_label(value)] = float(
                rec.ci_lo <= value <= rec.ci_hi
            )
            est[_coord_label(value)] = (rec.beta_db, rec.v_hat)
        reject = {}
        for j, value in options.power_coords:
            rec = by_j.get(j)
            if rec is None or rec.degenerate:
                continue
            reject[_coord_label(value)] = float(rec.p_value < options.alpha)
        out["cover"] = cover
        out["est"] = est
        out["reject"] = reject
        out["kkt_max"] = max(out["kkt_max"], res.kkt_max)

    if options.do_varcomp:
        basis = make_basis(options.basis, scenario.q)
        dg, _ = design_gram(basis)
        eta_true = np.linalg.solve(
            dg, [float(np.sum(G * truth.psi)) for G in basis]
        )
        vc = cross_fit_varcomp(
            dataset, a_star, basis,
            VarCompOptions(split=options.varcomp_split,
                           seed=int(split_seed.generate_state(1)[0]),
                           lasso=options.lasso),
        )
        out["sigma2_err"] = abs(vc.sigma2_e - truth.sigma2_e)
        out["eta_err"] = np.abs(vc.eta - eta_true)
        out["eta_l2"] = float(np.linalg.norm(vc.eta - eta_true))
    return out


def _mc_worker(args):
    scenario, options, rep_seed = args
    try:
        return _replicate(scenario, options, rep_seed)
    except Exception as exc:  # failed replications are counted, not fatal
        return {"failure": f"{type(exc).__name__}: {exc}"}


def _run_jobs(jobs, n_jobs):
    if n_jobs in (0, None):
        n_jobs = os.cpu_count() or 1
    if n_jobs == 1 or len(jobs) <= 1:
        return [_mc_worker(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        chunk = max(1, len(jobs) // (8 * n_jobs))
        return list(pool.map(_mc_worker, jobs, chunksize=chunk))


def _rate(values):
    return float(np.mean(values)) if len(values) else None


def run_mc(scenario: Scenario, reps: int, options: McOptions = McOptions()
           ) -> McReport:
    """Run ``reps`` independent replications of the configured pipeline."""
    from qlmm.solver_backend import BACKEND

    if reps < 1:
        raise ValueError("reps must be at least 1")
    start = time.perf_counter()
    seeds = np.random.SeedSequence(scenario.seed).spawn(reps)
    results = _run_jobs([(scenario, options, s) for s in seeds], options.n_jobs)

    ok = [r for r in results if "failure" not in r]
    failures = [
        {"rep": i, "error": r["failure"]}
        for i, r in enumerate(results)
        if "failure" in r
    ]

    coverage, sd, se_mean, rejection = {}, {}, {}, {}
    if options.do_inference and ok:
        for _, value in options.coverage_coords:
            lab = _coord_label(value)
            flags = [r["cover"][lab] for r in ok if lab in r["cover"]]
            coverage[lab] = _rate(flags)
            ests = np.array(
                [r["est"][lab][0] for r in ok if lab in r["est"]]
            )
            vhats = np.array(
                [r["est"][lab][1] for r in ok if lab in r["est"]]
            )
            sd[lab] = float(np.std(ests, ddof=1)) if ests.size > 1 else 0.0
            se_mean[lab] = float(np.mean(np.sqrt(vhats))) if vhats.size else None
        for _, value in options.power_coords:
            lab = _coord_label(value)
            flags = [r["reject"][lab] for r in ok if lab in r["reject"]]
            rejection[lab] = _rate(flags)

    def _collect(key):
        vals = [r[key] for r in ok if key in r]
        return np.asarray(vals, dtype=np.float64)

    sse = _collect("sse")
    l2 = _collect("l2")
    t_a = _collect("t_a")
    a_star = _collect("a_star")
    report = McReport(
        scenario=asdict(scenario),
        options={
            k: v for k, v in asdict(options).items() if k not in ("lasso",)
        },
        reps=reps,
        n_failed=len(failures),
        coverage=coverage,
        sd=sd,
        se_mean=se_mean,
        rejection=rejection,
        sse_mean=float(sse.mean()) if sse.size else None,
        sse_median=float(np.median(sse)) if sse.size else None,
        l2_median=float(np.median(l2)) if l2.size else None,
        t_a_mean=float(t_a.mean()) if t_a.size else None,
        a_mean=float(a_star.mean()) if a_star.size else None,
        a_positive_share=float(np.mean(a_star > 0)) if a_star.size else None,
        mae_sigma2=(
            float(_collect("sigma2_err").mean())
            if options.do_varcomp and ok
            else None
        ),
        mae_eta=(
            np.mean([r["eta_err"] for r in ok], axis=0).tolist()
            if options.do_varcomp and ok
            else None
        ),
        eta_l2_median=(
            float(np.median(_collect("eta_l2")))
            if options.do_varcomp and ok
            else None
        ),
        kkt_max=float(max((r["kkt_max"] for r in ok), default=np.nan)),
        degenerate_records=int(sum(r.get("degenerate", 0) for r in ok)),
        failures=failures,
        backend=BACKEND,
    )
    report.wall_time_s = time.perf_counter() - start
    return report


def _sweep_worker(args):
    scenario, a_grid, options, rep_seed = args
    data_seed, _, _ = rep_seed.spawn(3)
    dataset, truth = generate_dataset(scenario, seed=data_seed)
    rows = []
    for a in a_grid:
        fit, tf, _ = fit_fixed_effects(dataset, a=a, options=options.lasso)
        delta = fit.beta - truth.beta
        row = {"a": float(a), "sse": float(delta @ delta), "t_a": tf.t_a,
               "kkt_max": fit.kkt_residual}
        targets = [j for j, _ in options.coverage_coords]
        res = infer_coordinates(
            dataset, a, targets, options.alpha,
            InferenceOptions(lasso=options.lasso, mode=options.mode),
            fit=fit, transformed=tf,
        )
        by_j = {rec.j: rec for rec in res.records}
        row["kkt_max"] = max(row["kkt_max"], res.kkt_max)
        for j, value in options.coverage_coords:
            rec = by_j.get(j)
            if rec is None:
                continue
            lab = _coord_label(value)
            row[f"cover_{lab}"] = float(rec.ci_lo <= value <= rec.ci_hi)
            row[f"est_{lab}"] = rec.beta_db
        rows.append(row)
    return rows


def a_sweep(scenario: Scenario, a_grid, reps: int,
            options: McOptions = McOptions()) -> dict:
    """Fixed-``a`` sweep: per grid value, mean SSE, mean T_a, coverage, sd.

    Each replication generates one dataset and reuses it across the whole
    grid, so rows differ only through the proxy constant.
    """
    grid = [float(a) for a in a_grid]
    if not grid:
        raise ValueError("a_grid must be nonempty")
    seeds = np.random.SeedSequence(scenario.seed).spawn(reps)
    per_rep = _run_jobs_sweep(
        [(scenario, grid, options, s) for s in seeds], options.n_jobs
    )
    rows = []
    for ai, a in enumerate(grid):
        cells = [rep[ai] for rep in per_rep]
        row = {
            "a": a,
            "sse": float(np.mean([c["sse"] for c in cells])),
            "t_a_mean": float(np.mean([c["t_a"] for c in cells])),
            "kkt_max": float(max(c["kkt_max"] for c in cells)),
        }
        for _, value in options.coverage_coords:
            lab = _coord_label(value)
            covs = [c[f"cover_{lab}"] for c in cells if f"cover_{lab}" in c]
            ests = np.array(
                [c[f"est_{lab}"] for c in cells if f"est_{lab}" in c]
            )
            row[f"cov({lab})"] = _rate(covs)
            row[f"sd({lab})"] = (
                float(np.std(ests, ddof=1)) if ests.size > 1 else 0.0
            )
        rows.append(row)
    return {"scenario": asdict(scenario), "reps": reps, "rows": rows}


def _run_jobs_sweep(jobs, n_jobs):
    if n_jobs in (0, None):
        n_jobs = os.cpu_count() or 1
    if n_jobs == 1 or len(jobs) <= 1:
        return [_sweep_worker(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        chunk = max(1, len(jobs) // (8 * n_jobs))
        return list(pool.map(_sweep_worker, jobs, chunksize=chunk))
