"""Causal effect estimators on the risk-difference scale.

Every estimator returns an :class:`EstimateResult`. Binary outcomes are fitted
with logistic models and summarised as average marginal effects; continuous
outcomes use least squares and report the coefficient directly.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable, NamedTuple

import numpy as np

from .cohort import Cohort, confounder_columns, partial_f_statistic, pool_for_did
from .errors import EmptyMatchedSet, WeakInstrumentWarning, ZeroDenominator
from .glm import (
    IDENTITY,
    LOGIT,
    DesignSpec,
    average_marginal_effect,
    fit_glm,
    fit_ols,
    interaction_ame,
)
from .matching import MatchResult, match_cohort
from .resample import bootstrap_replicates

Z_975 = 1.959964
WEAK_F = 10.0
ZERO_COEF = 1e-12

METHODS = (
    "CaT",
    "CaT_with_Z",
    "IV_ratio",
    "IV_TSLS",
    "POA_IV",
    "DiD",
    "DiD_with_Z",
    "PSM_CaT",
)

ALIASES = {
    "cat": "CaT",
    "cat+z": "CaT_with_Z",
    "cat_with_z": "CaT_with_Z",
    "iv": "IV_TSLS",
    "tsls": "IV_TSLS",
    "iv_tsls": "IV_TSLS",
    "iv_ratio": "IV_ratio",
    "wald": "IV_ratio",
    "poa-iv": "POA_IV",
    "poa_iv": "POA_IV",
    "did": "DiD",
    "did+z": "DiD_with_Z",
    "did_with_z": "DiD_with_Z",
    "psm": "PSM_CaT",
    "psm_cat": "PSM_CaT",
}


def canonical_method(name: str) -> str:
    if name in METHODS:
        return name
    try:
        return ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}") from None


def normal_p_value(t: float) -> float:
    return math.erfc(abs(t) / math.sqrt(2.0))


@dataclass(frozen=True)
class EstimateResult:
    method: str
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    p_value: float
    n_used: int
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def build(cls, method, estimate, se, n_used, diagnostics=None) -> "EstimateResult":
        estimate, se = float(estimate), float(se)
        if se > 0:
            p = normal_p_value(estimate / se)
        else:
            p = 1.0 if estimate == 0 else 0.0
        return cls(
            method,
            estimate,
            se,
            estimate - Z_975 * se,
            estimate + Z_975 * se,
            p,
            int(n_used),
            dict(diagnostics or {}),
        )

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high


@dataclass(frozen=True)
class EstimatorOptions:
    """Model and uncertainty settings shared by all estimators.

    ``se_method="auto"`` uses the bootstrap for the two-stage estimators and
    for logistic difference-in-differences, and model-based standard errors
    elsewhere. ``"analytic"`` forces model-based (delta-method) errors
    everywhere, which is what the Monte Carlo studies use.
    """

    include_z_as_covariate: bool = False
    outcome_link: str | None = None
    se_method: str = "auto"
    n_boot: int = 500
    seed: int = 0
    threads: int = 1
    poa_include_y0: bool = False
    psm_covariates: tuple[str, ...] | None = None
    caliper: float | None = None

    def link_for(self, cohort: Cohort) -> str:
        return self.outcome_link or cohort.link


class _Fitted(NamedTuple):
    estimate: float
    se: float
    n_used: int
    diagnostics: dict


def _design(y, cols, link):
    return DesignSpec.from_columns(y, cols, link=link)


# ---------------------------------------------------------------------------
# individual estimators
# ---------------------------------------------------------------------------


def _cat(cohort: Cohort, opts: EstimatorOptions, include_z: bool, point_only=False) -> _Fitted:
    cols = {"x": cohort.x, **confounder_columns(cohort.w1, cohort.w1_names)}
    if include_z:
        cols["z"] = cohort.require_z()
    design = _design(cohort.y1, cols, opts.link_for(cohort))
    fit = fit_glm(design)
    ame = average_marginal_effect(fit, design, "x")
    return _Fitted(ame.estimate, ame.se, cohort.n, {"iterations": fit.iterations})


def _iv_ratio(cohort: Cohort, opts: EstimatorOptions, point_only=False) -> _Fitted:
    z = cohort.require_z()
    g1, g0 = z == 1, z == 0
    n1, n0 = int(g1.sum()), int(g0.sum())
    if n1 == 0 or n0 == 0:
        raise ZeroDenominator("instrument is constant")
    y, x = cohort.y1, cohort.x
    num = y[g1].mean() - y[g0].mean()
    den = x[g1].mean() - x[g0].mean()
    if abs(den) < ZERO_COEF:
        raise ZeroDenominator("instrument does not shift treatment")
    est = num / den
    if point_only:
        return _Fitted(est, float("nan"), cohort.n, {})

    def group_cov(mask, m):
        if m < 2:
            return 0.0, 0.0, 0.0
        c = np.cov(y[mask], x[mask], ddof=1)
        return c[0, 0] / m, c[1, 1] / m, c[0, 1] / m

    vy1, vx1, cxy1 = group_cov(g1, n1)
    vy0, vx0, cxy0 = group_cov(g0, n0)
    var_num, var_den, cov_nd = vy1 + vy0, vx1 + vx0, cxy1 + cxy0
    var = var_num / den**2 - 2 * num * cov_nd / den**3 + num**2 * var_den / den**4
    return _Fitted(est, math.sqrt(max(var, 0.0)), cohort.n, {"first_stage_diff": den})


def _second_stage(cohort, opts, xhat, extra_cols, x_actual):
    link = opts.link_for(cohort)
    cols = {"xhat": xhat, **confounder_columns(cohort.w1, cohort.w1_names), **extra_cols}
    design = _design(cohort.y1, cols, link)
    fit = fit_glm(design)
    if link == IDENTITY:
        est = fit.coef("xhat")
        # residuals use the observed treatment, not its projection
        Xs = design.predictors.copy()
        Xs[:, design.index("xhat")] = x_actual
        resid = cohort.y1 - Xs @ fit.coefficients
        dof = design.n - len(design.names)
        sigma2 = float(resid @ resid) / dof
        scale = sigma2 / (fit.rss / dof) if fit.rss > 0 else 1.0
        se = math.sqrt(fit.covariance[design.index("xhat"), design.index("xhat")] * scale)
        return est, se, fit
    ame = average_marginal_effect(fit, design, "xhat")
    return ame.estimate, ame.se, fit


def _tsls(cohort: Cohort, opts: EstimatorOptions, point_only=False) -> _Fitted:
    z = cohort.require_z()
    if np.all(z == z[0]):
        raise ZeroDenominator("instrument is constant")
    w_cols = confounder_columns(cohort.w1, cohort.w1_names)
    design1 = _design(cohort.x, {"z": z, **w_cols}, IDENTITY)
    stage1 = fit_ols(design1)
    if abs(stage1.coef("z")) < ZERO_COEF:
        raise ZeroDenominator("first-stage instrument coefficient is zero")
    xhat = stage1.linear_predictor(design1.predictors)
    est, se, fit = _second_stage(cohort, opts, xhat, {}, cohort.x)
    if point_only:
        return _Fitted(est, float("nan"), cohort.n, {})
    f = partial_f_statistic(cohort.x, w_cols, {"z": z})
    diag = {"first_stage_f": f, "weak_instrument": float(f < WEAK_F)}
    if f < WEAK_F:
        warnings.warn(f"first-stage F = {f:.2f} is below {WEAK_F:g}", WeakInstrumentWarning, 2)
    return _Fitted(est, se, cohort.n, diag)


def _poa_iv(cohort: Cohort, opts: EstimatorOptions, point_only=False) -> _Fitted:
    z = cohort.require_z()
    y0 = cohort.require_y0()
    w_cols = confounder_columns(cohort.w1, cohort.w1_names)
    base = {"z": z, **w_cols, "y0": y0}
    inter = {"y0:z": y0 * z}
    design1 = _design(cohort.x, {**base, **inter}, IDENTITY)
    stage1 = fit_ols(design1)
    if abs(stage1.coef("y0:z")) < ZERO_COEF:
        raise ZeroDenominator("first-stage interaction coefficient is zero")
    xhat = stage1.linear_predictor(design1.predictors)
    extra = {"z": z}
    if opts.poa_include_y0:
        extra["y0"] = y0
    est, se, fit = _second_stage(cohort, opts, xhat, extra, cohort.x)
    if point_only:
        return _Fitted(est, float("nan"), cohort.n, {})
    f = partial_f_statistic(cohort.x, base, inter)
    diag = {
        "interaction_f": f,
        "weak_interaction": float(f < WEAK_F),
        "interaction_coef": stage1.coef("y0:z"),
    }
    if f < WEAK_F:
        warnings.warn(
            f"partial F of the prior-outcome x instrument term = {f:.2f} is below {WEAK_F:g}",
            WeakInstrumentWarning,
            2,
        )
    return _Fitted(est, se, cohort.n, diag)


def _did(cohort: Cohort, opts: EstimatorOptions, include_z: bool, point_only=False) -> _Fitted:
    view = pool_for_did(cohort)
    link = opts.link_for(cohort)
    design = view.design(link, include_z=include_z)
    fit = fit_glm(design)
    if link == IDENTITY:
        return _Fitted(fit.coef("x_star:p"), fit.se("x_star:p"), cohort.n, {})
    ame = interaction_ame(fit, design, "x_star", "p")
    return _Fitted(ame.estimate, ame.se, cohort.n, {"iterations": fit.iterations})


def _psm(cohort: Cohort, opts: EstimatorOptions, point_only=False, match: MatchResult = None):
    if match is None:
        match = match_cohort(cohort, opts.psm_covariates, opts.caliper)
    if not match.pairs:
        raise EmptyMatchedSet("no treated patient could be matched")
    rows = match.matched_rows
    res = _cat(cohort.subset(rows), opts, include_z=opts.include_z_as_covariate)
    diag = {**res.diagnostics, "pairs": float(len(match.pairs)), "discarded": float(match.discard_count)}
    return _Fitted(res.estimate, res.se, int(rows.size), diag)


_IMPL: dict[str, Callable] = {
    "CaT": partial(_cat, include_z=False),
    "CaT_with_Z": partial(_cat, include_z=True),
    "IV_ratio": _iv_ratio,
    "IV_TSLS": _tsls,
    "POA_IV": _poa_iv,
    "DiD": partial(_did, include_z=False),
    "DiD_with_Z": partial(_did, include_z=True),
    "PSM_CaT": _psm,
}


def point_estimate(method: str, options: EstimatorOptions, cohort: Cohort) -> float:
    """Point estimate only; argument order suits ``functools.partial``."""
    return float(_IMPL[method](cohort, options, point_only=True).estimate)


def _uses_bootstrap(method: str, opts: EstimatorOptions, cohort: Cohort) -> bool:
    if opts.se_method == "bootstrap":
        return True
    if opts.se_method == "analytic":
        return False
    if opts.se_method != "auto":
        raise ValueError(f"unknown se_method {opts.se_method!r}")
    if method in ("IV_TSLS", "POA_IV"):
        return True
    return method in ("DiD", "DiD_with_Z") and opts.link_for(cohort) == LOGIT


def bootstrap_se(method: str, cohort: Cohort, options: EstimatorOptions) -> tuple[float, int]:
    reps, failed = bootstrap_replicates(
        cohort,
        [partial(point_estimate, method, options)],
        options.n_boot,
        options.seed,
        options.threads,
    )
    return float(reps[:, 0].std(ddof=1)), failed


def estimate(method: str, cohort: Cohort, options: EstimatorOptions | None = None) -> EstimateResult:
    """Run estimator ``method`` (a tag from :data:`METHODS` or an alias)."""
    method = canonical_method(method)
    opts = options or EstimatorOptions()
    if method in ("CaT_with_Z", "DiD_with_Z"):
        opts = replace(opts, include_z_as_covariate=True)
    fitted = _IMPL[method](cohort, opts)
    se = fitted.se
    diag = dict(fitted.diagnostics)
    if _uses_bootstrap(method, opts, cohort):
        se, failed = bootstrap_se(method, cohort, opts)
        diag["bootstrap_failed"] = float(failed)
        diag["analytic_se"] = fitted.se
    return EstimateResult.build(method, fitted.estimate, se, fitted.n_used, diag)


def estimate_cat(cohort: Cohort, options: EstimatorOptions | None = None) -> EstimateResult:
    """Outcome regression on treatment and study-period confounders (optionally Z)."""
    opts = options or EstimatorOptions()
    return estimate("CaT_with_Z" if opts.include_z_as_covariate else "CaT", cohort, opts)


def estimate_iv_ratio(cohort: Cohort, options: EstimatorOptions | None = None) -> EstimateResult:
    """Wald ratio of instrument-outcome over instrument-treatment mean differences."""
    return estimate("IV_ratio", cohort, options)


def estimate_tsls(cohort: Cohort, options: EstimatorOptions | None = None) -> EstimateResult:
    return estimate("IV_TSLS", cohort, options)


def estimate_did(cohort: Cohort, options: EstimatorOptions | None = None) -> EstimateResult:
    opts = options or EstimatorOptions()
    return estimate("DiD_with_Z" if opts.include_z_as_covariate else "DiD", cohort, opts)


def estimate_poa_iv(cohort: Cohort, options: EstimatorOptions | None = None) -> EstimateResult:
    """Two-stage estimate instrumenting treatment with the prior outcome x Z interaction.

    Stage one regresses X on Z, W1, Y0 and Y0*Z; stage two regresses Y1 on
    the fitted treatment, W1 and Z (and Y0 when ``poa_include_y0`` is set).
    """
    return estimate("POA_IV", cohort, options)


def estimate_psm_cat(
    cohort: Cohort, match_result: MatchResult, options: EstimatorOptions | None = None
) -> EstimateResult:
    """CaT restricted to the patients retained by ``match_result``."""
    opts = options or EstimatorOptions()
    fitted = _psm(cohort, opts, match=match_result)
    se = fitted.se
    diag = dict(fitted.diagnostics)
    if opts.se_method == "bootstrap":
        se, failed = bootstrap_se("PSM_CaT", cohort, opts)
        diag["bootstrap_failed"] = float(failed)
    return EstimateResult.build("PSM_CaT", fitted.estimate, se, fitted.n_used, diag)
