"""Small GLM engine: least squares, logistic IRLS and average marginal effects.

Only two links are supported. ``identity`` is ordinary least squares with the
classical ``sigma^2 (X'X)^-1`` covariance; ``logit`` is Bernoulli maximum
likelihood fitted by iteratively reweighted least squares, with the inverse
Fisher information as covariance.

Product terms are encoded by name: a column called ``"a:b"`` is understood to
be the elementwise product of columns ``a`` and ``b``. Counterfactual
predictions (used by the marginal-effect helpers) recompute such columns after
overriding their factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.special

from .errors import (
    DimensionMismatch,
    MissingInteractionColumn,
    NotConverged,
    RankDeficient,
    Separation,
    UnknownTerm,
)

IDENTITY = "identity"
LOGIT = "logit"
LINKS = (IDENTITY, LOGIT)

RANK_TOL = 1e-10
DEFAULT_MAX_ITER = 50
DEFAULT_TOL = 1e-8
DEFAULT_BOUND = 30.0


def sigmoid(eta):
    return scipy.special.expit(eta)


@dataclass(frozen=True)
class DesignSpec:
    """Response vector, named predictor matrix and link.

    The intercept is an ordinary named column (conventionally ``"const"``).
    """

    response: np.ndarray
    predictors: np.ndarray
    names: tuple[str, ...]
    link: str = IDENTITY

    def __post_init__(self):
        y = np.asarray(self.response, dtype=float)
        X = np.asarray(self.predictors, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "predictors", X)
        object.__setattr__(self, "names", tuple(self.names))
        if self.link not in LINKS:
            raise ValueError(f"unsupported link {self.link!r}")
        if y.ndim != 1 or X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DimensionMismatch(f"response has shape {y.shape}, predictors {X.shape}")
        if X.shape[1] != len(self.names):
            raise DimensionMismatch(f"{X.shape[1]} predictor columns but {len(self.names)} names")
        if len(set(self.names)) != len(self.names):
            raise DimensionMismatch(f"duplicate predictor names in {self.names}")
        if X.shape[0] < X.shape[1]:
            raise DimensionMismatch(f"{X.shape[0]} rows cannot identify {X.shape[1]} coefficients")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("non-finite values in design")
        if self.link == LOGIT and not np.all((y == 0) | (y == 1)):
            raise ValueError("logit response must be coded 0/1")

    @classmethod
    def from_columns(
        cls,
        response,
        columns: Mapping[str, np.ndarray],
        link: str = IDENTITY,
        intercept: bool = True,
    ) -> "DesignSpec":
        y = np.asarray(response, dtype=float)
        names = list(columns)
        cols = [np.asarray(columns[k], dtype=float) for k in names]
        if intercept:
            names.insert(0, "const")
            cols.insert(0, np.ones_like(y))
        X = np.column_stack(cols) if cols else np.empty((y.shape[0], 0))
        return cls(y, X, tuple(names), link)

    @property
    def n(self) -> int:
        return self.response.shape[0]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownTerm(name) from None

    def column(self, name: str) -> np.ndarray:
        return self.predictors[:, self.index(name)]

    def counterfactual(self, overrides: Mapping[str, float]) -> np.ndarray:
        """Predictor matrix with ``overrides`` applied and product columns rebuilt."""
        return _override(self.predictors, self.names, overrides)


def _override(X, names, overrides):
    X = X.copy()
    for term, value in overrides.items():
        X[:, names.index(term)] = value
    touched = set(overrides)
    for j, name in enumerate(names):
        if ":" not in name or name in overrides:
            continue
        parts = name.split(":")
        if touched.isdisjoint(parts):
            continue
        prod = np.ones(X.shape[0])
        for part in parts:
            if part not in names:
                raise MissingInteractionColumn(part)
            prod = prod * X[:, names.index(part)]
        X[:, j] = prod
    return X


@dataclass(frozen=True)
class GlmFit:
    coefficients: np.ndarray
    covariance: np.ndarray
    names: tuple[str, ...]
    link: str
    n_obs: int
    converged: bool = True
    iterations: int = 0
    rss: float | None = None
    loglik: float | None = None

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownTerm(name) from None

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.index(name)])

    def se(self, name: str) -> float:
        i = self.index(name)
        return float(np.sqrt(self.covariance[i, i]))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, map(float, self.coefficients)))

    def linear_predictor(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coefficients

    def predict(self, X) -> np.ndarray:
        eta = self.linear_predictor(X)
        return sigmoid(eta) if self.link == LOGIT else eta


@dataclass(frozen=True)
class AmeResult:
    estimate: float
    se: float
    target_term: str
    gradient: np.ndarray = field(default=None, repr=False, compare=False)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _pivoted_qr(X, names):
    Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True, check_finite=False)
    diag = np.abs(np.diag(R))
    if diag.size == 0:
        return Q, R, piv
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    if rank < X.shape[1]:
        raise RankDeficient([names[k] for k in piv[rank:]])
    return Q, R, piv


def fit_ols(spec: DesignSpec) -> GlmFit:
    """Least-squares fit with covariance ``RSS/(n-p) * (X'X)^-1``.

    When ``n == p`` the residual variance is undefined and the covariance is
    filled with NaN.
    """
    X, y, names = spec.predictors, spec.response, spec.names
    n, p = X.shape
    Q, R, piv = _pivoted_qr(X, names)
    beta = np.empty(p)
    beta[piv] = scipy.linalg.solve_triangular(R, Q.T @ y, check_finite=False)
    resid = y - X @ beta
    rss = float(resid @ resid)
    Rinv = scipy.linalg.solve_triangular(R, np.eye(p), check_finite=False)
    xtx_inv = np.empty((p, p))
    xtx_inv[np.ix_(piv, piv)] = Rinv @ Rinv.T
    if n > p:
        cov = rss / (n - p) * xtx_inv
    else:
        cov = np.full((p, p), np.nan)
    cov = 0.5 * (cov + cov.T)
    return GlmFit(beta, cov, names, IDENTITY, n, True, 0, rss=rss)


def _bernoulli_loglik(eta, y):
    # log sigma(eta) = -log1p(exp(-eta)), computed stably via logaddexp
    return float(-np.sum(np.logaddexp(0.0, np.where(y > 0, -eta, eta))))


def fit_logistic(
    spec: DesignSpec,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    bound: float = DEFAULT_BOUND,
    start: np.ndarray | None = None,
) -> GlmFit:
    """Bernoulli maximum likelihood by IRLS (Newton-Raphson on the canonical link).

    Convergence means the largest absolute coefficient change fell below
    ``tol``. Any coefficient exceeding ``bound`` in magnitude is taken as
    evidence of (quasi-)separation.
    """
    X, y, names = spec.predictors, spec.response, spec.names
    if spec.link != LOGIT:
        raise ValueError("fit_logistic needs a logit design")
    _pivoted_qr(X, names)
    beta, iters, converged = _irls(X, y, max_iter, tol, bound, start)
    if not converged:
        raise NotConverged(f"IRLS did not converge in {max_iter} iterations")
    eta = X @ beta
    mu = sigmoid(eta)
    w = mu * (1.0 - mu)
    info = X.T @ (w[:, None] * X)
    cov = _inverse_pd(info)
    return GlmFit(
        beta, cov, names, LOGIT, X.shape[0], converged, iters, loglik=_bernoulli_loglik(eta, y)
    )


def _irls(X, y, max_iter, tol, bound, start):
    p = X.shape[1]
    beta = np.zeros(p) if start is None else np.array(start, dtype=float)
    for it in range(1, max_iter + 1):
        eta = X @ beta
        mu = sigmoid(eta)
        w = mu * (1.0 - mu)
        info = X.T @ (w[:, None] * X)
        score = X.T @ (y - mu)
        try:
            step = scipy.linalg.solve(info, score, assume_a="pos", check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            raise Separation("information matrix became singular during IRLS") from None
        if not np.all(np.isfinite(step)):
            raise Separation("non-finite IRLS step")
        beta = beta + step
        if np.max(np.abs(beta)) > bound:
            raise Separation(f"coefficient magnitude exceeded {bound}")
        if np.max(np.abs(step)) < tol:
            return beta, it, True
    return beta, max_iter, False


def _inverse_pd(A):
    try:
        c = scipy.linalg.cho_factor(A, check_finite=False)
        inv = scipy.linalg.cho_solve(c, np.eye(A.shape[0]), check_finite=False)
    except np.linalg.LinAlgError:
        inv = np.linalg.pinv(A)
    return 0.5 * (inv + inv.T)


def fit_glm(spec: DesignSpec, **kwargs) -> GlmFit:
    if spec.link == LOGIT:
        return fit_logistic(spec, **kwargs)
    return fit_ols(spec)


# ---------------------------------------------------------------------------
# marginal effects
# ---------------------------------------------------------------------------


def _check_compatible(fit: GlmFit, data: DesignSpec):
    if tuple(fit.names) != tuple(data.names):
        raise DimensionMismatch("design columns differ from the fitted model")


def _mean_effect(fit: GlmFit, data: DesignSpec, scenarios: Sequence[tuple[float, dict]]):
    """Signed average of counterfactual predictions and its coefficient gradient."""
    beta = fit.coefficients
    if fit.link == IDENTITY:
        g = np.zeros_like(beta)
        for sign, overrides in scenarios:
            g += sign * data.counterfactual(overrides).mean(axis=0)
        est = float(g @ beta)
    else:
        est = 0.0
        g = np.zeros_like(beta)
        for sign, overrides in scenarios:
            Xc = data.counterfactual(overrides)
            mu = sigmoid(Xc @ beta)
            est += sign * float(mu.mean())
            g += sign * ((mu * (1.0 - mu)) @ Xc) / Xc.shape[0]
    var = float(g @ fit.covariance @ g)
    return est, float(np.sqrt(max(var, 0.0))), g


def average_marginal_effect(fit: GlmFit, data: DesignSpec, target_term: str) -> AmeResult:
    """Mean counterfactual difference between ``target_term = 1`` and ``= 0``.

    For an identity link without product terms involving the target this is
    exactly the target's coefficient. The standard error is the delta method
    over ``fit.covariance``.
    """
    _check_compatible(fit, data)
    fit.index(target_term)
    est, se, g = _mean_effect(fit, data, [(1.0, {target_term: 1.0}), (-1.0, {target_term: 0.0})])
    return AmeResult(est, se, target_term, g)


def interaction_ame(fit: GlmFit, data: DesignSpec, term_a: str, term_b: str) -> AmeResult:
    """Average double difference of predicted means over the 2x2 toggles of a and b."""
    _check_compatible(fit, data)
    fit.index(term_a)
    fit.index(term_b)
    product = _product_name(fit.names, term_a, term_b)
    scenarios = [
        (1.0, {term_a: 1.0, term_b: 1.0}),
        (-1.0, {term_a: 0.0, term_b: 1.0}),
        (-1.0, {term_a: 1.0, term_b: 0.0}),
        (1.0, {term_a: 0.0, term_b: 0.0}),
    ]
    est, se, g = _mean_effect(fit, data, scenarios)
    return AmeResult(est, se, product, g)


def _product_name(names, a, b):
    for cand in (f"{a}:{b}", f"{b}:{a}"):
        if cand in names:
            return cand
    raise MissingInteractionColumn(f"{a}:{b}")
