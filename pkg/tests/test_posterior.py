import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sobn.network import Structure, builtin_structure
from sobn.posterior import (
    DirichletProduct,
    GaussianPosterior,
    SingularInformationError,
    beta_interval,
    build_D,
    constrained_inverse,
    dirichlet_mixed_moment,
    load_posterior,
    save_posterior,
    to_gaussian,
)

from conftest import simplex_moment

alphas = st.lists(st.integers(1, 12), min_size=2, max_size=3)


@settings(max_examples=25, deadline=None)
@given(alpha=alphas, data=st.data())
def test_mixed_moment_matches_integration(alpha, data):
    k = len(alpha)
    exps = data.draw(st.lists(st.integers(0, 3), min_size=k, max_size=k).filter(lambda e: sum(e) <= 3))
    # integer shapes make the integrand polynomial, so the rule is exact
    assert dirichlet_mixed_moment(alpha, exps) == pytest.approx(simplex_moment(alpha, exps), rel=1e-10)


def test_mixed_moment_known_values():
    assert dirichlet_mixed_moment([1, 1], [1, 0]) == pytest.approx(0.5)
    assert dirichlet_mixed_moment([1, 1, 1], [1, 1, 0]) == pytest.approx(1 / 12)
    with pytest.raises(ValueError):
        dirichlet_mixed_moment([1, 1], [2, 2])


def test_to_gaussian_matches_sampling():
    s = builtin_structure("chain3")
    rng = np.random.default_rng(5)
    alpha = rng.uniform(1, 10, s.n_params)
    dp = DirichletProduct(s, alpha)
    g = to_gaussian(dp)
    g.check()
    draws = np.concatenate(
        [rng.dirichlet(alpha[a : a + k], 200000) for a, k in zip(s.family_start, s.family_size)], axis=1
    )
    assert np.allclose(np.cov(draws.T), g.cov, atol=2e-3)
    assert np.allclose(draws.mean(axis=0), g.mean, atol=2e-3)


def test_build_D_structure():
    s = builtin_structure("chain3")
    D = build_D(s)
    assert D.n_free == s.n_params - s.n_families
    # rows annihilate the all-ones vector of every family
    assert np.allclose(D.matrix @ np.ones(s.n_params), 0)
    assert np.linalg.matrix_rank(D.matrix) == D.n_free


def test_constrained_inverse_properties():
    s = builtin_structure("chain3")
    rng = np.random.default_rng(1)
    A = rng.normal(size=(s.n_params, s.n_params))
    M = A @ A.T + np.eye(s.n_params)
    theta = np.concatenate([rng.dirichlet(np.ones(k)) for k in s.family_size])
    R = constrained_inverse(M, build_D(s))
    GaussianPosterior(s, theta, R).check()
    D = build_D(s).matrix
    # R restricted to free coordinates inverts the free information
    Rf = R[np.ix_(build_D(s).free_index, build_D(s).free_index)]
    assert np.allclose(Rf, np.linalg.inv(D @ M @ D.T), atol=1e-10)


def test_singular_information():
    s = Structure.from_edges(["A"], [3], [])
    with pytest.raises(SingularInformationError):
        constrained_inverse(-np.eye(3), build_D(s))


@settings(max_examples=60, deadline=None)
@given(
    m=st.floats(0.01, 0.99),
    frac=st.floats(0.001, 0.99),
    g1=st.floats(0, 1),
    g2=st.floats(0, 1),
)
def test_intervals_nested_and_contain_median(m, frac, g1, g2):
    v = frac * m * (1 - m)
    lo1, hi1 = beta_interval(m, v, min(g1, g2))
    lo2, hi2 = beta_interval(m, v, max(g1, g2))
    assert 0 <= lo2 <= lo1 + 1e-9 and hi1 <= hi2 + 1e-9 <= 1 + 1e-9


def test_interval_coverage_of_beta():
    from scipy import stats

    a, b = 3.0, 7.0
    m = a / (a + b)
    v = a * b / ((a + b) ** 2 * (a + b + 1))
    lo, hi = beta_interval(m, v, 0.9)
    assert stats.beta.cdf(hi, a, b) - stats.beta.cdf(lo, a, b) == pytest.approx(0.9, abs=1e-8)


def test_interval_edge_cases():
    assert beta_interval(0.3, 0.0, 0.95) == (0.3, 0.3)
    lo, hi = beta_interval(0.3, 0.01, 1.0)
    assert (lo, hi) == (0.0, 1.0)
    lo, hi = beta_interval(0.3, 0.01, 0.0)
    assert lo == hi
    # variance above the Bernoulli bound still yields a valid interval
    lo, hi = beta_interval(0.5, 0.3, 0.5)
    assert 0 <= lo <= hi <= 1
    with pytest.raises(ValueError):
        beta_interval(0.5, 0.01, 1.5)


def test_gaussian_interval_clipped():
    lo, hi = beta_interval(0.05, 0.01, 0.99, method="gaussian")
    assert lo == 0.0 and 0.05 < hi < 1


def test_serialization_roundtrip(tmp_path):
    s = builtin_structure("chain3")
    rng = np.random.default_rng(2)
    dp = DirichletProduct(s, rng.uniform(0.5, 4, s.n_params))
    save_posterior(dp, tmp_path / "d.json")
    assert np.allclose(load_posterior(s, tmp_path / "d.json").alpha, dp.alpha)
    g = to_gaussian(dp)
    save_posterior(g, tmp_path / "g.json")
    back = load_posterior(s, tmp_path / "g.json")
    assert np.allclose(back.cov, g.cov) and np.allclose(back.mean, g.mean)


def test_dirichlet_validation():
    s = builtin_structure("chain3")
    with pytest.raises(ValueError):
        DirichletProduct(s, np.zeros(s.n_params))
