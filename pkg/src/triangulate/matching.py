"""Propensity scores, greedy 1-1 nearest-neighbour matching and balance tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.special

from .cohort import Cohort, _py
from .errors import NoControls, UnknownTerm
from .glm import LOGIT, DesignSpec, GlmFit, fit_logistic


def covariate_column(cohort: Cohort, name: str) -> np.ndarray:
    if name in cohort.w0_names:
        return cohort.w0[:, cohort.w0_names.index(name)]
    if name in cohort.w1_names:
        return cohort.w1[:, cohort.w1_names.index(name)]
    if name == "z":
        return cohort.require_z()
    if name == "y0":
        return cohort.require_y0()
    raise UnknownTerm(name)


def default_covariates(cohort: Cohort) -> tuple[str, ...]:
    """Baseline (prior-period) confounders, the set used for matching by default."""
    return cohort.w0_names


def propensity_design(cohort: Cohort, covariate_names: Sequence[str]) -> DesignSpec:
    cols = {name: covariate_column(cohort, name) for name in covariate_names}
    return DesignSpec.from_columns(cohort.x, cols, link=LOGIT)


def fit_propensity(cohort: Cohort, covariate_names: Sequence[str]) -> GlmFit:
    """Logistic regression of treatment on the named covariates."""
    return fit_logistic(propensity_design(cohort, covariate_names))


@dataclass(frozen=True)
class MatchResult:
    pairs: list[tuple[object, object, float]]
    treated_rows: np.ndarray
    control_rows: np.ndarray
    discard_count: int
    propensity_fit: GlmFit | None = field(default=None, repr=False)

    @property
    def matched_ids(self) -> set:
        return {t for t, _, _ in self.pairs} | {c for _, c, _ in self.pairs}

    @property
    def matched_rows(self) -> np.ndarray:
        return np.sort(np.concatenate([self.treated_rows, self.control_rows]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["treated_id", "control_id", "distance"])
            for t, c, d in self.pairs:
                w.writerow([t, c, repr(float(d))])


def _sort_key(pid):
    # numeric ids (including numeric strings read from CSV) order by value
    pid = _py(pid)
    if isinstance(pid, (int, float)):
        return (0, pid, "")
    text = str(pid)
    try:
        return (0, int(text), text)
    except ValueError:
        return (1, 0, text)


def match_nearest(
    scores,
    x,
    caliper: float | None = None,
    patient_ids=None,
) -> MatchResult:
    """Greedy 1-1 matching without replacement on the logit of the score.

    Treated patients are visited in descending score order; each takes the
    closest still-unmatched control. Ties (in visiting order or distance) go to
    the smaller patient id, then the smaller row position. A treated patient
    whose nearest control lies beyond ``caliper`` stays unmatched and the
    control remains available.
    """
    scores = np.asarray(scores, dtype=float)
    x = np.asarray(x)
    n = scores.shape[0]
    if np.any((scores <= 0) | (scores >= 1)):
        raise ValueError("propensity scores must lie strictly inside (0, 1)")
    pids = np.arange(n) if patient_ids is None else np.asarray(patient_ids)
    lp = scipy.special.logit(scores)
    treated = np.flatnonzero(x == 1)
    controls = np.flatnonzero(x == 0)
    if controls.size == 0:
        raise NoControls("no control patients available for matching")

    t_order = sorted(treated, key=lambda i: (-scores[i], _sort_key(pids[i]), i))
    c_order = sorted(controls, key=lambda i: (lp[i], _sort_key(pids[i]), i))
    c_rows = np.array(c_order, dtype=int)
    c_val = lp[c_rows]
    m = c_rows.size
    # skip pointers over the sorted controls: right[i] / left[i] lead to the
    # nearest alive slot at or after / at or before i
    right = list(range(m + 1))
    left = list(range(m))

    def find_right(i):
        path = []
        while right[i] != i:
            path.append(i)
            i = right[i]
        for p in path:
            right[p] = i
        return i

    def find_left(i):
        path = []
        while i >= 0 and left[i] != i:
            path.append(i)
            i = left[i]
        for p in path:
            left[p] = i
        return i

    def remove(j):
        right[j] = j + 1
        left[j] = j - 1

    pairs, t_rows, m_rows = [], [], []
    discarded = 0
    for t in t_order:
        v = lp[t]
        pos = int(np.searchsorted(c_val, v, side="left"))
        cands = []
        r = find_right(pos)
        if r < m:
            cands.append(r)
        lo = find_left(pos - 1)
        if lo >= 0:
            # walk to the first alive slot of a run of equal scores
            while True:
                q = find_left(lo - 1)
                if q >= 0 and c_val[q] == c_val[lo]:
                    lo = q
                else:
                    break
            cands.append(lo)
        if not cands:
            discarded += 1
            continue
        best = min(
            cands,
            key=lambda j: (abs(c_val[j] - v), _sort_key(pids[c_rows[j]]), c_rows[j]),
        )
        dist = abs(c_val[best] - v)
        if caliper is not None and dist > caliper:
            discarded += 1
            continue
        remove(best)
        c = int(c_rows[best])
        pairs.append((_py(pids[t]), _py(pids[c]), float(dist)))
        t_rows.append(int(t))
        m_rows.append(c)
    return MatchResult(
        pairs, np.array(t_rows, dtype=int), np.array(m_rows, dtype=int), discarded
    )


def match_cohort(
    cohort: Cohort,
    covariate_names: Sequence[str] | None = None,
    caliper: float | None = None,
) -> MatchResult:
    """Fit the propensity model and match ``cohort`` in one step."""
    names = default_covariates(cohort) if covariate_names is None else tuple(covariate_names)
    if not np.any(cohort.x == 0):
        raise NoControls("no control patients available for matching")
    design = propensity_design(cohort, names)
    fit = fit_logistic(design)
    scores = fit.predict(design.predictors)
    res = match_nearest(scores, cohort.x, caliper=caliper, patient_ids=cohort.patient_id)
    return MatchResult(res.pairs, res.treated_rows, res.control_rows, res.discard_count, fit)


# ---------------------------------------------------------------------------
# balance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BalanceRow:
    name: str
    smd_before: float
    smd_after: float


@dataclass(frozen=True)
class BalanceReport:
    rows: list[BalanceRow]
    n_before: int
    n_after: int

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["covariate", "smd_before", "smd_after"])
            for r in self.rows:
                w.writerow([r.name, repr(r.smd_before), repr(r.smd_after)])

    def mean_abs(self) -> tuple[float, float]:
        before = float(np.mean([abs(r.smd_before) for r in self.rows]))
        after = float(np.mean([abs(r.smd_after) for r in self.rows]))
        return before, after


def _smd(v, x, rows, sd):
    xt = x[rows] == 1
    vv = v[rows]
    diff = vv[xt].mean() - vv[~xt].mean()
    if sd == 0:
        return 0.0
    return float(diff / sd)


def balance_report(
    cohort: Cohort, match_result: MatchResult, covariate_names: Sequence[str]
) -> BalanceReport:
    """Standardized mean differences before and after matching.

    Both columns divide by the pre-match pooled SD,
    ``sqrt((var_treated + var_control) / 2)``. Rows are ordered by decreasing
    absolute pre-match SMD (love-plot order).
    """
    x = cohort.x
    all_rows = np.arange(cohort.n)
    matched = match_result.matched_rows
    rows = []
    for name in covariate_names:
        v = covariate_column(cohort, name)
        t, c = v[x == 1], v[x == 0]
        vt = t.var(ddof=1) if t.size > 1 else 0.0
        vc = c.var(ddof=1) if c.size > 1 else 0.0
        sd = float(np.sqrt((vt + vc) / 2.0))
        before = _smd(v, x, all_rows, sd)
        after = _smd(v, x, matched, sd) if matched.size else float("nan")
        rows.append(BalanceRow(name, before, after))
    rows.sort(key=lambda r: -abs(r.smd_before))
    return BalanceReport(rows, cohort.n, int(matched.size))
