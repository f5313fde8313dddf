import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdsmooth.errors import ConfigurationError, ResourceError
from cdsmooth.models import GaussianState, make_double_well
from cdsmooth.quadrature import (cov_factor, cubature_rule, expect, expect_stat_jacobian,
                                 gauss_hermite_rule, hermite_nodes, unscented_rule)

RULES = [cubature_rule(3), unscented_rule(3, 1.0, 2.0, 0.0), unscented_rule(3, 0.5, 2.0, 1.0),
         gauss_hermite_rule(3, 3)]


def test_cubature_points():
    r = cubature_rule(1)
    np.testing.assert_allclose(r.points[:, 0], [1.0, -1.0])
    np.testing.assert_allclose(r.mean_weights, [0.5, 0.5])
    r = cubature_rule(2)
    s = np.sqrt(2)
    np.testing.assert_allclose(r.points, [[s, 0], [0, s], [-s, 0], [0, -s]])
    np.testing.assert_allclose(r.mean_weights, 0.25)


def test_unscented_weights():
    r = unscented_rule(1, 1.0, 2.0, 0.0)
    np.testing.assert_allclose(r.points[:, 0], [0.0, 1.0, -1.0])
    np.testing.assert_allclose(r.mean_weights, [0.0, 0.5, 0.5])
    assert r.cov_weights[0] == 2.0
    # beta = 0 reduces to cubature plus a zero-weight center
    for n in (1, 2, 4):
        u, c = unscented_rule(n, 1.0, 0.0, 0.0), cubature_rule(n)
        assert u.mean_weights[0] == 0.0 and u.cov_weights[0] == 0.0
        np.testing.assert_allclose(u.points[1:], c.points)
        np.testing.assert_allclose(u.mean_weights[1:], c.mean_weights)
    with pytest.raises(ConfigurationError):
        unscented_rule(2, 1.0, 2.0, -3.0)


def test_gauss_hermite_order3():
    x, w = hermite_nodes(3)
    np.testing.assert_allclose(x, [-np.sqrt(3), 0.0, np.sqrt(3)], atol=1e-14)
    np.testing.assert_allclose(w, [1 / 6, 2 / 3, 1 / 6], atol=1e-14)
    r = gauss_hermite_rule(1, 3)
    assert expect(lambda z: z ** 4, GaussianState([0.0], [[1.0]]), r)[0] == pytest.approx(3.0)
    r2 = gauss_hermite_rule(2, 3)
    assert r2.size == 9 and r2.mean_weights.sum() == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(ResourceError):
        gauss_hermite_rule(10, 5, cap=1000)


@pytest.mark.parametrize("rule", RULES, ids=lambda r: r.label)
def test_rule_moments(rule):
    n = rule.dim
    assert rule.mean_weights.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(rule.mean_weights @ rule.points, 0.0, atol=1e-10)
    cov = np.einsum("s,si,sj->ij", rule.cov_weights - (rule.cov_weights - rule.mean_weights)
                    * (np.arange(rule.size) == 0), rule.points, rule.points)
    np.testing.assert_allclose(cov, np.eye(n), atol=1e-10)


def _gauss_monomial(powers):
    # E[prod z_i^k_i] for independent standard normals
    out = 1.0
    for k in powers:
        out *= 0.0 if k % 2 else float(np.prod(np.arange(k - 1, 0, -2))) if k else 1.0
    return out


@pytest.mark.parametrize("rule", RULES, ids=lambda r: r.label)
def test_monomials_to_degree_three(rule):
    n = rule.dim
    for powers in itertools.product(range(4), repeat=n):
        if sum(powers) > 3:
            continue
        val = rule.mean_weights @ np.prod(rule.points ** np.array(powers), axis=1)
        assert val == pytest.approx(_gauss_monomial(powers), abs=1e-10)


@pytest.mark.parametrize("s", [1, 2, 3, 5, 7, 10])
def test_gauss_hermite_degree(s):
    x, w = hermite_nodes(s)
    for k in range(2 * s):
        scale = max(1.0, w @ np.abs(x) ** k)  # odd moments cancel large terms
        assert w @ x ** k == pytest.approx(_gauss_monomial([k]), abs=1e-10 * scale)


def test_cov_factor_examples():
    np.testing.assert_allclose(cov_factor(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(cov_factor(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))
    L = cov_factor(np.array([[0.0, 0.0], [0.0, 2.0]]))
    np.testing.assert_allclose(L[:, 0], 0.0)
    assert L[1, 1] == pytest.approx(np.sqrt(2))
    np.testing.assert_allclose(L @ L.T, [[0, 0], [0, 2]], atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10 ** 6))
def test_cov_factor_reconstructs(n, seed):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(n, n))
    P = B @ B.T + 1e-3 * np.eye(n)
    L = cov_factor(P)
    assert np.allclose(np.triu(L, 1), 0.0)
    assert np.max(np.abs(L @ L.T - P)) <= 1e-10 * np.max(np.abs(P))


def test_expect_examples():
    state = GaussianState([0.3, -1.0], [[2.0, 0.3], [0.3, 1.0]])
    for rule in (cubature_rule(2), unscented_rule(2), gauss_hermite_rule(2, 3)):
        np.testing.assert_allclose(expect(lambda x: x, state, rule), state.mean, atol=1e-12)
    gh3 = gauss_hermite_rule(1, 3)
    assert expect(lambda x: x ** 2, GaussianState([0.0], [[1.0]]), gh3)[0] == pytest.approx(1.0)
    model, _ = make_double_well()
    val = expect(model.drift, GaussianState([1.0], [[1.0]]), gauss_hermite_rule(1, 5))
    assert val[0] == pytest.approx(-12.0, abs=1e-10)


def test_stat_jacobian_examples():
    model, _ = make_double_well()
    gh3 = gauss_hermite_rule(1, 3)
    J = expect_stat_jacobian(model.drift, GaussianState([0.0], [[1.0]]), gh3)
    assert J[0, 0] == pytest.approx(-8.0, abs=1e-10)
    G = np.array([[1.0, 2.0], [-0.5, 3.0], [0.0, 1.0]])
    state = GaussianState([0.5, 1.0], [[1.0, 0.2], [0.2, 0.5]])
    for rule in (cubature_rule(2), unscented_rule(2), gauss_hermite_rule(2, 3)):
        np.testing.assert_allclose(expect_stat_jacobian(lambda x: x @ G.T, state, rule), G,
                                   atol=1e-10)
        np.testing.assert_allclose(
            expect_stat_jacobian(lambda x: np.ones(x.shape[:-1] + (2,)), state, rule), 0.0,
            atol=1e-12)


def test_stat_jacobian_matches_expected_jacobian_quadratic():
    # g(x) = x1^2 + x1 x2 has Jacobian (2 x1 + x2, x1)
    state = GaussianState([0.4, -0.7], [[1.0, 0.3], [0.3, 0.8]])

    def g(x):
        return (x[..., 0] ** 2 + x[..., 0] * x[..., 1])[..., None]

    exact = np.array([[2 * 0.4 - 0.7, 0.4]])
    for rule in (cubature_rule(2), unscented_rule(2), gauss_hermite_rule(2, 3)):
        np.testing.assert_allclose(expect_stat_jacobian(g, state, rule), exact, atol=1e-10)


def test_gauss_hermite_factor_invariance_1d():
    rule = gauss_hermite_rule(1, 7)
    a = expect(lambda x: np.sin(x), GaussianState([0.3], [[0.7]]), rule)
    # in 1-D any factor is +-sqrt(P); the symmetric rule gives the same result
    b = rule.mean_weights @ np.sin(0.3 - np.sqrt(0.7) * rule.points)
    assert a[0] == pytest.approx(b[0], abs=1e-12)
