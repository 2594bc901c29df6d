import math

import numpy as np
import pytest

from triangulate.errors import (
    DimensionMismatch,
    MissingInteractionColumn,
    NotConverged,
    RankDeficient,
    Separation,
    UnknownTerm,
)
from triangulate.glm import (
    IDENTITY,
    LOGIT,
    DesignSpec,
    GlmFit,
    average_marginal_effect,
    fit_glm,
    fit_logistic,
    fit_ols,
    interaction_ame,
)

import oracles


def _logit_data(n, seed, beta=(-0.3, 0.8)):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    p = 1 / (1 + np.exp(-(beta[0] + beta[1] * x)))
    y = (rng.random(n) < p).astype(float)
    return x, y


# -- least squares ----------------------------------------------------------


def test_intercept_only_is_mean():
    fit = fit_ols(DesignSpec.from_columns([1.0, 2.0, 3.0], {}))
    assert fit.coef("const") == pytest.approx(2.0, abs=1e-14)


def test_two_point_interpolation():
    fit = fit_ols(DesignSpec.from_columns([1.0, 3.0], {"x": [0.0, 1.0]}))
    assert fit.coef("const") == pytest.approx(1.0, abs=1e-12)
    assert fit.coef("x") == pytest.approx(2.0, abs=1e-12)
    # no residual degrees of freedom
    assert np.all(np.isnan(fit.covariance))


def test_ols_matches_gaussian_elimination():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(10, 3))
    y = rng.normal(size=10)
    fit = fit_ols(DesignSpec.from_columns(y, {"a": X[:, 0], "b": X[:, 1], "c": X[:, 2]}))
    design = np.column_stack([np.ones(10), X])
    ref = oracles.ols_normal_equations(design.tolist(), y.tolist())
    np.testing.assert_allclose(fit.coefficients, ref, rtol=0, atol=1e-10)


def test_ols_covariance_formula():
    rng = np.random.default_rng(3)
    x = rng.normal(size=40)
    y = 1 + 2 * x + rng.normal(size=40)
    spec = DesignSpec.from_columns(y, {"x": x})
    fit = fit_ols(spec)
    X = spec.predictors
    resid = y - X @ fit.coefficients
    sigma2 = resid @ resid / (40 - 2)
    np.testing.assert_allclose(fit.covariance, sigma2 * np.linalg.inv(X.T @ X), rtol=1e-10)


def test_ols_residuals_orthogonal():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(200, 4))
    y = X @ [1, -2, 0.5, 0] + rng.normal(size=200)
    spec = DesignSpec.from_columns(y, {f"v{j}": X[:, j] for j in range(4)})
    fit = fit_ols(spec)
    r = y - spec.predictors @ fit.coefficients
    assert np.max(np.abs(spec.predictors.T @ r)) < 1e-8


def test_collinear_columns_raise():
    x = np.arange(10.0)
    with pytest.raises(RankDeficient) as err:
        fit_ols(DesignSpec.from_columns(x * 0.5, {"x": x, "x2": 2 * x}))
    assert "x2" in str(err.value) or "x" in str(err.value)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        DesignSpec(np.zeros(3), np.zeros((4, 1)), ("a",))
    with pytest.raises(DimensionMismatch):
        DesignSpec(np.zeros(3), np.zeros((3, 2)), ("a",))


# -- logistic ---------------------------------------------------------------


def test_intercept_only_logit():
    y = np.r_[np.ones(30), np.zeros(70)]
    fit = fit_logistic(DesignSpec.from_columns(y, {}, link=LOGIT))
    assert fit.coef("const") == pytest.approx(math.log(0.3 / 0.7), abs=1e-10)
    assert fit.converged


def test_logistic_beats_likelihood_grid():
    x, y = _logit_data(20, 5)
    fit = fit_logistic(DesignSpec.from_columns(y, {"x": x}, link=LOGIT))
    A, B, ll = oracles.logistic_grid(x, y)
    k = np.unravel_index(np.argmax(ll), ll.shape)
    assert abs(fit.coef("const") - A[k]) < 1e-2
    assert abs(fit.coef("x") - B[k]) < 1e-2
    mine = oracles.logistic_loglik(fit.coefficients, np.column_stack([np.ones(20), x]), y)
    assert mine > ll.max()
    assert fit.loglik == pytest.approx(mine, abs=1e-9)


def test_logistic_score_vanishes():
    x, y = _logit_data(300, 6)
    spec = DesignSpec.from_columns(y, {"x": x, "x2": x**2}, link=LOGIT)
    fit = fit_logistic(spec)
    mu = fit.predict(spec.predictors)
    score = spec.predictors.T @ (y - mu)
    assert np.max(np.abs(score)) < 10 * 1e-8 * len(y) or np.max(np.abs(score)) < 1e-6


def test_logistic_covariance_matches_numeric_hessian():
    x, y = _logit_data(200, 8)
    spec = DesignSpec.from_columns(y, {"x": x}, link=LOGIT)
    fit = fit_logistic(spec)
    X = spec.predictors
    h = 1e-4

    def nll(b):
        return -oracles.logistic_loglik(b, X, y)

    b0 = fit.coefficients
    H = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            ei, ej = np.eye(2)[i] * h, np.eye(2)[j] * h
            H[i, j] = (nll(b0 + ei + ej) - nll(b0 + ei - ej) - nll(b0 - ei + ej) + nll(b0 - ei - ej)) / (4 * h * h)
    np.testing.assert_allclose(np.diag(fit.covariance), np.diag(np.linalg.inv(H)), rtol=1e-4)


def test_separation_detected():
    x = np.linspace(-1, 1, 20)
    y = (x > 0).astype(float)
    with pytest.raises(Separation):
        fit_logistic(DesignSpec.from_columns(y, {"x": x}, link=LOGIT))


def test_not_converged_when_iterations_exhausted():
    x, y = _logit_data(100, 2)
    with pytest.raises(NotConverged):
        fit_logistic(DesignSpec.from_columns(y, {"x": x}, link=LOGIT), max_iter=1)


def test_logit_response_must_be_binary():
    with pytest.raises(ValueError):
        DesignSpec.from_columns([0.0, 0.5, 1.0], {}, link=LOGIT)


def test_fit_glm_dispatches_on_link():
    x, y = _logit_data(100, 9)
    assert fit_glm(DesignSpec.from_columns(y, {"x": x}, link=LOGIT)).link == LOGIT
    assert fit_glm(DesignSpec.from_columns(y, {"x": x})).link == IDENTITY


# -- marginal effects -------------------------------------------------------


def test_ame_identity_equals_coefficient_exactly():
    rng = np.random.default_rng(1)
    t = (rng.random(50) < 0.5).astype(float)
    w = rng.normal(size=50)
    y = 0.1 * t + 0.3 * w + rng.normal(size=50)
    spec = DesignSpec.from_columns(y, {"t": t, "w": w})
    fit = fit_ols(spec)
    assert average_marginal_effect(fit, spec, "t").estimate == fit.coef("t")


def test_ame_closed_form_sigmoid():
    spec = DesignSpec.from_columns([0.0, 1.0], {"t": [0.0, 1.0]}, link=LOGIT)
    fit = GlmFit(np.array([0.0, 1.0]), np.eye(2), ("const", "t"), LOGIT, 2, True, 1)
    ame = average_marginal_effect(fit, spec, "t")
    assert ame.estimate == pytest.approx(0.7310585786300049 - 0.5, abs=1e-12)
    assert round(ame.estimate, 4) == 0.2311


def test_ame_matches_row_loop():
    rng = np.random.default_rng(12)
    t = (rng.random(50) < 0.4).astype(float)
    w = rng.normal(size=50)
    y = (rng.random(50) < 1 / (1 + np.exp(-(-0.5 + t + 0.5 * w)))).astype(float)
    spec = DesignSpec.from_columns(y, {"t": t, "w": w}, link=LOGIT)
    fit = fit_logistic(spec)
    ref = oracles.ame_loop(fit.coefficients.tolist(), spec.names, spec.predictors.tolist(), "t")
    assert average_marginal_effect(fit, spec, "t").estimate == pytest.approx(ref, abs=1e-12)


def test_ame_delta_method_se_matches_finite_differences():
    rng = np.random.default_rng(2)
    t = (rng.random(400) < 0.4).astype(float)
    w = rng.normal(size=400)
    y = (rng.random(400) < 1 / (1 + np.exp(-(-0.5 + t + 0.5 * w)))).astype(float)
    spec = DesignSpec.from_columns(y, {"t": t, "w": w}, link=LOGIT)
    fit = fit_logistic(spec)
    ame = average_marginal_effect(fit, spec, "t")
    h = 1e-6
    grad = []
    for j in range(3):
        b = fit.coefficients.copy()
        b[j] += h
        up = oracles.ame_loop(b.tolist(), spec.names, spec.predictors.tolist(), "t")
        b[j] -= 2 * h
        dn = oracles.ame_loop(b.tolist(), spec.names, spec.predictors.tolist(), "t")
        grad.append((up - dn) / (2 * h))
    grad = np.array(grad)
    assert ame.se == pytest.approx(math.sqrt(grad @ fit.covariance @ grad), rel=1e-5)


def test_ame_unknown_term():
    spec = DesignSpec.from_columns([0.0, 1.0, 2.0], {"t": [0.0, 1.0, 1.0]})
    fit = fit_ols(spec)
    with pytest.raises(UnknownTerm):
        average_marginal_effect(fit, spec, "nope")


def test_ame_invariant_to_rescaling_other_covariate():
    rng = np.random.default_rng(21)
    t = (rng.random(300) < 0.5).astype(float)
    w = rng.normal(size=300)
    y = (rng.random(300) < 1 / (1 + np.exp(-(t - w)))).astype(float)
    a = DesignSpec.from_columns(y, {"t": t, "w": w}, link=LOGIT)
    b = DesignSpec.from_columns(y, {"t": t, "w": 3.0 * w + 7.0}, link=LOGIT)
    ea = average_marginal_effect(fit_logistic(a), a, "t").estimate
    eb = average_marginal_effect(fit_logistic(b), b, "t").estimate
    assert ea == pytest.approx(eb, abs=1e-9)


def test_interaction_ame_identity_is_coefficient():
    rng = np.random.default_rng(5)
    a = (rng.random(80) < 0.5).astype(float)
    b = (rng.random(80) < 0.5).astype(float)
    y = 0.2 + 0.1 * a + 0.05 * b + 0.15 * a * b + rng.normal(scale=0.1, size=80)
    spec = DesignSpec.from_columns(y, {"a": a, "b": b, "a:b": a * b})
    fit = fit_ols(spec)
    assert interaction_ame(fit, spec, "a", "b").estimate == pytest.approx(fit.coef("a:b"), abs=1e-15)


def test_interaction_ame_saturated_cells():
    cells = {(0, 0): 0.2, (0, 1): 0.25, (1, 0): 0.3, (1, 1): 0.5}
    a, b, y = [], [], []
    for (va, vb), p in cells.items():
        k = int(round(p * 20))
        for i in range(20):
            a.append(va)
            b.append(vb)
            y.append(1.0 if i < k else 0.0)
    a, b, y = map(np.array, (a, b, y))
    spec = DesignSpec.from_columns(y, {"a": a, "b": b, "a:b": a * b}, link=LOGIT)
    fit = fit_logistic(spec)
    assert interaction_ame(fit, spec, "a", "b").estimate == pytest.approx(0.15, abs=1e-9)


def test_interaction_ame_matches_row_loop():
    rng = np.random.default_rng(31)
    n = 100
    p = np.r_[np.zeros(n // 2), np.ones(n // 2)]
    x = (rng.random(n) < 0.5).astype(float)
    w = rng.normal(size=n)
    y = (rng.random(n) < 0.3 + 0.1 * x * p).astype(float)
    spec = DesignSpec.from_columns(y, {"p": p, "x": x, "x:p": x * p, "w": w, "w:p": w * p}, link=LOGIT)
    fit = fit_logistic(spec)
    ref = oracles.double_difference_loop(fit.coefficients.tolist(), spec.names, spec.predictors.tolist(), "x", "p")
    assert interaction_ame(fit, spec, "x", "p").estimate == pytest.approx(ref, abs=1e-12)


def test_interaction_ame_needs_product_column():
    spec = DesignSpec.from_columns([0.0, 1.0, 2.0, 3.0], {"a": [0, 1, 0, 1], "b": [0, 0, 1, 1]})
    fit = fit_ols(spec)
    with pytest.raises(MissingInteractionColumn):
        interaction_ame(fit, spec, "a", "b")
