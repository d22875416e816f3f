import math

import numpy as np
import pytest

from oracles import dense_m2ll, random_toy
from lascreen.errors import CollinearityError, LikelihoodAscentError
from lascreen.estimator import (
    FitOptions, FitResult, ModelParams, _push, analytic_gradient, fit, loglik, score_check,
)
from lascreen.model import DesignMatrices

LOG2PI = math.log(2 * math.pi)


def _interior_params(d, rng):
    q3, q2 = d.q_la, d.q_school
    A3 = rng.normal(size=(q3, q3)) * 0.4
    A2 = rng.normal(size=(q2, q2)) * 0.4
    return ModelParams(rng.normal(size=d.p), rng.uniform(0.3, 1.5),
                       A3 @ A3.T + 0.2 * np.eye(q3), A2 @ A2.T + 0.2 * np.eye(q2))


def _toys():
    rng = np.random.default_rng(42)
    return [random_toy(rng), random_toy(rng, slopes=True), random_toy(rng, slopes=True, la_slope=True)]


def test_single_pupil_loglik():
    d = DesignMatrices.from_arrays([0.0], [[1.0]], ["L"], ["S"], ("intercept",), {})
    assert loglik(d, None, ModelParams([0.0], 1.0)) == pytest.approx(LOG2PI, abs=1e-15)


@pytest.mark.parametrize("which", range(3))
def test_blockwise_matches_dense(which):
    d = _toys()[which]
    rng = np.random.default_rng(which)
    for _ in range(3):
        par = _interior_params(d, rng)
        dense = dense_m2ll(d, par.beta, par.omega_la, par.omega_school, par.sigma2)
        assert loglik(d, None, par) == pytest.approx(dense, rel=1e-10)


@pytest.mark.parametrize("which", range(3))
def test_score_check_interior(which):
    d = _toys()[which]
    rng = np.random.default_rng(10 + which)
    for _ in range(3):
        assert score_check(d, None, _interior_params(d, rng)) < 1e-5


def test_pure_residual_sigma_gradient():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(30), rng.normal(size=30)])
    y = rng.normal(size=30)
    d = DesignMatrices.from_arrays(y, X, ["L"] * 30, ["S"] * 30, ("intercept", "x"), {})
    beta, s2 = np.array([0.1, -0.2]), 0.7
    r = y - X @ beta
    g = analytic_gradient(d, None, ModelParams(beta, s2))
    assert g[2] == pytest.approx(-(-30 / s2 + r @ r / s2 ** 2), rel=1e-12)
    np.testing.assert_allclose(g[:2], -2 * X.T @ r / s2, rtol=1e-12)


def test_no_random_blocks_is_ols():
    rng = np.random.default_rng(1)
    n = 40
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = X @ [1.0, 2.0] + rng.normal(size=n)
    d = DesignMatrices.from_arrays(y, X, rng.integers(0, 3, n), rng.integers(0, 2, n),
                                   ("intercept", "x"), {})
    res = fit(d)
    b_ols, rss = np.linalg.lstsq(X, y, rcond=None)[:2]
    np.testing.assert_allclose(res.beta, b_ols, rtol=1e-10)
    assert res.sigma2 == pytest.approx(rss[0] / n, rel=1e-12)
    assert res.minus2ll == pytest.approx(n * (LOG2PI + math.log(rss[0] / n) + 1), rel=1e-12)


def test_gradient_vanishes_at_optimum():
    rng = np.random.default_rng(5)
    while True:
        d = random_toy(rng, schools=(3, 4), pupils=(5, 7))
        res = fit(d)
        if not res.boundary_flags:
            break
    assert np.linalg.norm(analytic_gradient(d, None, res.params)) < 1e-4


def test_history_non_increasing():
    for d in _toys():
        h = fit(d).history
        assert all(b <= a + 1e-10 * max(1, abs(a)) for a, b in zip(h, h[1:]))


def test_ascent_guard():
    hist = [10.0]
    _push(hist, 9.0)
    with pytest.raises(LikelihoodAscentError):
        _push(hist, 9.5)


def test_collinear_fixed_effects():
    rng = np.random.default_rng(2)
    x = rng.normal(size=20)
    X = np.column_stack([np.ones(20), x, 2 * x])
    d = DesignMatrices.from_arrays(rng.normal(size=20), X, ["L"] * 20, rng.integers(0, 3, 20),
                                   ("intercept", "a", "b"),
                                   {"la": ("intercept",), "school": ("intercept",)})
    with pytest.raises(CollinearityError):
        fit(d)


def test_max_iter_returns_best_iterate():
    d = _toys()[2]
    res = fit(d, opts=FitOptions(max_iter=1))
    assert np.isfinite(res.minus2ll)
    assert res.minus2ll >= fit(d).minus2ll - 1e-8
    assert res.converged in (True, False)


def test_invalid_params_rejected():
    d = _toys()[0]
    with pytest.raises(ValueError):
        loglik(d, None, ModelParams(np.zeros(2), 1.0, [[-1.0]], [[0.5]]))
    with pytest.raises(ValueError):
        FitOptions(tol_ll=0)


def _regroup(d, order):
    la = np.asarray(d.la_ids)[d.la_index][order]
    sch = np.asarray(d.school_ids)[d.school_index][order]
    return DesignMatrices.from_arrays(d.y[order], d.X[order], la, sch, d.term_names,
                                      {"la": d.spec.random_terms("la"),
                                       "school": d.spec.random_terms("school")})


@pytest.mark.parametrize("which", range(3))
def test_permutation_invariance(which):
    d = _toys()[which]
    base = fit(d)
    rng = np.random.default_rng(which)
    # shuffle rows; this reorders pupils within schools and schools within LAs
    perm = _regroup(d, rng.permutation(d.n))
    other = fit(perm)
    np.testing.assert_allclose(other.beta, base.beta, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(other.omega_school, base.omega_school, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(other.omega_la, base.omega_la, rtol=1e-8, atol=1e-10)
    assert other.minus2ll == pytest.approx(base.minus2ll, abs=1e-10 * abs(base.minus2ll))


def test_scale_equivariance():
    d = _toys()[1]
    base = fit(d)
    c = 3.0
    scaled = fit(d.with_outcome(c * d.y))
    np.testing.assert_allclose(scaled.beta, c * base.beta, rtol=1e-7, atol=1e-9)
    assert scaled.sigma2 == pytest.approx(c ** 2 * base.sigma2, rel=1e-7)
    np.testing.assert_allclose(scaled.omega_school, c ** 2 * base.omega_school, rtol=1e-6, atol=1e-9)
    assert scaled.minus2ll == pytest.approx(base.minus2ll + 2 * d.n * math.log(c), abs=1e-7)


def test_nesting():
    rng = np.random.default_rng(8)
    for _ in range(3):
        d = random_toy(rng, slopes=True, la_slope=True)
        full = fit(d).minus2ll
        la = np.asarray(d.la_ids)[d.la_index]
        sch = np.asarray(d.school_ids)[d.school_index]
        smaller = []
        for blocks in ({"la": ("intercept",), "school": ("intercept", "x")},
                       {"la": ("intercept",), "school": ("intercept",)},
                       {"school": ("intercept",)}, {}):
            sub = DesignMatrices.from_arrays(d.y, d.X, la, sch, d.term_names, blocks)
            smaller.append(fit(sub).minus2ll)
        chain = [full] + smaller
        assert all(a <= b + 1e-8 for a, b in zip(chain, chain[1:]))


def test_fit_result_json_roundtrip():
    res = fit(_toys()[2])
    back = FitResult.from_dict(res.to_dict())
    np.testing.assert_array_equal(back.beta, res.beta)
    np.testing.assert_array_equal(back.omega_school, res.omega_school)
    assert back.sigma2 == res.sigma2
    assert back.la_terms == res.la_terms
    doc = res.to_dict()
    assert {"fixed", "random", "minus2ll"} <= set(doc)


def test_standard_errors_positive():
    res = fit(_toys()[0])
    assert res.converged
    assert np.all(res.se_beta > 0)
    assert res.se_sigma2 > 0
