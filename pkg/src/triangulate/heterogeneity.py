"""Similarity testing across an ensemble of correlated estimators.

The ensemble covariance comes from a shared patient bootstrap: each replicate
resamples the cohort once and runs every method on that same sample, which is
what carries the correlation between methods into the covariance.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from functools import partial
from itertools import combinations
from typing import Sequence

import numpy as np
import scipy.optimize
import scipy.special

from .cohort import Cohort
from .errors import SingularCovarianceWarning, TriangulateError, WeakInstrumentWarning, ZeroVariance
from .estimators import EstimatorOptions, canonical_method, point_estimate
from . import rng
from .parallel import ordered_map
from .resample import bootstrap_replicates

SIMILAR = "similar"
NOT_SIMILAR = "not_similar"
PINV_RTOL = 1e-10


# ---------------------------------------------------------------------------
# chi-square distribution
# ---------------------------------------------------------------------------


def chi2_sf(df: float, x: float) -> float:
    """Upper tail ``P(X > x)`` of a chi-square variable, via the regularized
    upper incomplete gamma function."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if x <= 0:
        return 1.0
    return float(scipy.special.gammaincc(df / 2.0, x / 2.0))


def chi2_quantile(df: float, level: float) -> float:
    """Point below which a chi-square variable falls with probability ``level``."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    target = 1.0 - level
    hi = max(1.0, 2.0 * df)
    while chi2_sf(df, hi) > target:
        hi *= 2.0
    return float(
        scipy.optimize.brentq(lambda x: chi2_sf(df, x) - target, 0.0, hi, xtol=1e-14, rtol=1e-15)
    )


# ---------------------------------------------------------------------------
# ensemble and test
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapEnsemble:
    methods: tuple[str, ...]
    replicates: np.ndarray = field(repr=False)
    point_estimates: np.ndarray
    covariance: np.ndarray
    n_failed: int = 0

    @property
    def correlation(self) -> np.ndarray:
        sd = np.sqrt(np.diag(self.covariance))
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.covariance / np.outer(sd, sd)

    def subset(self, methods: Sequence[str]) -> "BootstrapEnsemble":
        """Restrict to ``methods`` (in the given order) without re-running the bootstrap."""
        idx = [self.methods.index(canonical_method(m)) for m in methods]
        return BootstrapEnsemble(
            tuple(self.methods[i] for i in idx),
            self.replicates[:, idx],
            self.point_estimates[idx],
            self.covariance[np.ix_(idx, idx)],
            self.n_failed,
        )

    def write_correlation_csv(self, path) -> None:
        corr = self.correlation
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", *self.methods])
            for m, row in zip(self.methods, corr):
                w.writerow([m, *(repr(float(v)) for v in row)])


def ensemble_from_replicates(methods, replicates, point_estimates, n_failed=0) -> BootstrapEnsemble:
    reps = np.asarray(replicates, dtype=float)
    cov = np.atleast_2d(np.cov(reps, rowvar=False, ddof=1))
    cov = (cov + cov.T) / 2.0
    return BootstrapEnsemble(tuple(methods), reps, np.asarray(point_estimates, float), cov, n_failed)


def bootstrap_ensemble(
    cohort: Cohort,
    methods: Sequence[str],
    B: int = 500,
    seed: int = 0,
    options: EstimatorOptions | None = None,
    threads: int = 1,
) -> BootstrapEnsemble:
    """Point estimates plus the ``B x k`` matrix of shared-resample replicates."""
    opts = options or EstimatorOptions()
    methods = tuple(canonical_method(m) for m in methods)
    fns = [partial(point_estimate, m, opts) for m in methods]
    points = np.array([fn(cohort) for fn in fns])
    reps, failed = bootstrap_replicates(cohort, fns, B, seed, threads)
    return ensemble_from_replicates(methods, reps, points, failed)


def ivw_pool(estimates, variances) -> float:
    """Inverse-variance weighted mean."""
    est = np.asarray(estimates, dtype=float)
    var = np.asarray(variances, dtype=float)
    if np.any(~(var > 0)):
        raise ZeroVariance("inverse-variance weights need strictly positive variances")
    w = 1.0 / var
    return float(np.sum(w * est) / np.sum(w))


@dataclass(frozen=True)
class QTestResult:
    methods: tuple[str, ...]
    q: float
    df: int
    critical_value: float
    p_value: float
    decision: str
    ivw_pooled: float
    alpha: float = 0.05

    @property
    def similar(self) -> bool:
        return self.decision == SIMILAR

    def as_row(self) -> dict:
        return {
            "set": ", ".join(self.methods),
            "Q": self.q,
            "critical": self.critical_value,
            "df": self.df,
            "p": self.p_value,
            "decision": self.decision,
            "ivw_pooled": self.ivw_pooled,
        }


def decide(q: float, df: int, alpha: float = 0.05) -> tuple[float, float, str]:
    """Critical value, p-value and decision for an observed statistic."""
    crit = chi2_quantile(df, 1.0 - alpha)
    return crit, chi2_sf(df, q), NOT_SIMILAR if q > crit else SIMILAR


def _inverse(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    top = float(np.max(np.abs(vals))) if vals.size else 0.0
    keep = vals > PINV_RTOL * top
    if not np.all(keep):
        warnings.warn(
            "ensemble covariance is singular; using a pseudo-inverse",
            SingularCovarianceWarning,
            stacklevel=3,
        )
    inv_vals = np.zeros_like(vals)
    inv_vals[keep] = 1.0 / vals[keep]
    return (vecs * inv_vals) @ vecs.T


def q_from_parts(estimates, covariance, alpha: float = 0.05, methods=()) -> QTestResult:
    est = np.asarray(estimates, dtype=float)
    cov = np.atleast_2d(np.asarray(covariance, dtype=float))
    k = est.shape[0]
    if k < 2:
        raise ValueError("the similarity test needs at least two estimates")
    pooled = ivw_pool(est, np.diag(cov))
    d = est - pooled
    q = float(d @ _inverse(cov) @ d)
    q = max(q, 0.0)
    crit, p, decision = decide(q, k - 1, alpha)
    names = tuple(methods) or tuple(f"e{j + 1}" for j in range(k))
    return QTestResult(names, q, k - 1, crit, p, decision, pooled, alpha)


def q_statistic(ensemble: BootstrapEnsemble, alpha: float = 0.05) -> QTestResult:
    """Generalized heterogeneity statistic of the ensemble's point estimates."""
    return q_from_parts(ensemble.point_estimates, ensemble.covariance, alpha, ensemble.methods)


def all_subsets(methods: Sequence[str], min_size: int = 2) -> list[tuple[str, ...]]:
    out = []
    for r in range(min_size, len(methods) + 1):
        out.extend(combinations(methods, r))
    return out


def write_q_tests(results: Sequence[QTestResult], csv_path=None, json_path=None) -> None:
    rows = [r.as_row() for r in results]
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["set", "Q", "critical", "df", "p", "decision"])
            for r in rows:
                w.writerow(
                    [r["set"], f"{r['Q']:.6g}", f"{r['critical']:.3f}", r["df"], f"{r['p']:.6g}", r["decision"]]
                )
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")


# ---------------------------------------------------------------------------
# simulation study of pairwise decisions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _SimilarityRun:
    spec: object
    methods: tuple[str, ...]
    pairs: tuple[tuple[str, ...], ...]
    B: int
    seed: int
    alpha: float

    def __call__(self, run: int) -> np.ndarray:
        from .simulation import simulate_cohort

        out = np.full(len(self.pairs), np.nan)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", WeakInstrumentWarning)
            warnings.simplefilter("ignore", SingularCovarianceWarning)
            cohort = simulate_cohort(self.spec, self.seed, run).cohort
            try:
                # one bootstrap per simulated cohort, keyed by the run index
                ens = bootstrap_ensemble(cohort, self.methods, self.B, seed=_mix(self.seed, run))
            except TriangulateError:
                return out
            for j, pair in enumerate(self.pairs):
                res = q_statistic(ens.subset(pair), self.alpha)
                out[j] = float(not res.similar)
        return out


def _mix(seed: int, run: int) -> int:
    return int(np.random.SeedSequence(entropy=int(seed), spawn_key=(rng.SIMILARITY, int(run))).generate_state(1)[0])


@dataclass(frozen=True)
class SimilarityTable:
    scenario: str
    n_sim: int
    B: int
    pairs: tuple[tuple[str, ...], ...]
    rejections: np.ndarray = field(repr=False)  # (n_sim, n_pairs), NaN for failed runs

    def rejection_rate(self, pair: Sequence[str]) -> float:
        key = tuple(canonical_method(m) for m in pair)
        for j, p in enumerate(self.pairs):
            if p == key or tuple(reversed(p)) == key:
                col = self.rejections[:, j]
                col = col[np.isfinite(col)]
                return 100.0 * float(col.mean()) if col.size else float("nan")
        raise KeyError(pair)

    def retention_rate(self, pair: Sequence[str]) -> float:
        return 100.0 - self.rejection_rate(pair)

    def n_failed(self) -> int:
        return int(np.sum(~np.isfinite(self.rejections[:, 0]))) if self.pairs else 0

    def rows(self) -> list[dict]:
        return [
            {
                "scenario": self.scenario,
                "set": ", ".join(p),
                "rejected_pct": self.rejection_rate(p),
                "retained_pct": self.retention_rate(p),
                "n_sim": self.n_sim,
                "n_failed": self.n_failed(),
            }
            for p in self.pairs
        ]

    def write_csv(self, path) -> None:
        rows = self.rows()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "set", "rejected_pct", "retained_pct", "n_sim", "n_failed"])
            for r in rows:
                w.writerow(
                    [r["scenario"], r["set"], f"{r['rejected_pct']:.6g}", f"{r['retained_pct']:.6g}", r["n_sim"], r["n_failed"]]
                )

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.rows(), fh, indent=2)
            fh.write("\n")


def pairwise_similarity_study(
    scenario,
    n_sim: int = 200,
    B: int = 500,
    seed: int = 0,
    methods: Sequence[str] = ("CaT", "IV_TSLS", "DiD"),
    alpha: float = 0.05,
    threads: int = 1,
) -> SimilarityTable:
    """Share of simulated cohorts on which each method pair is declared not similar."""
    from .simulation import get_preset

    spec = get_preset(scenario)
    methods = tuple(canonical_method(m) for m in methods)
    pairs = tuple(combinations(methods, 2))
    task = _SimilarityRun(spec, methods, pairs, int(B), int(seed), float(alpha))
    rej = np.array(ordered_map(task, range(n_sim), threads)).reshape(n_sim, len(pairs))
    return SimilarityTable(spec.name, n_sim, int(B), pairs, rej)


