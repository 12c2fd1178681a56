import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sobn.bmm import BmmState, bmm_fit, bmm_fit_state, bmm_moments, bmm_update, match_strength
from sobn.network import MISSING, ancestral_sample, builtin_structure, family_sums, sample_ground_truth
from sobn.posterior import DirichletProduct
from sobn.spn import compile_spn

from conftest import TwoNodeQuadrature, complete_counts, random_net


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rows=st.integers(1, 60))
def test_complete_data_is_conjugate(seed, rows):
    rng = np.random.default_rng(seed)
    net = random_net(rng, 4)
    data = ancestral_sample(net, rows, rng)
    post = bmm_fit(compile_spn(net), data)
    assert np.allclose(post.alpha, 1 + complete_counts(net.structure, data), rtol=0, atol=1e-9)


QUAD = TwoNodeQuadrature(n=16)
SPN2 = compile_spn(QUAD.structure)


@pytest.mark.parametrize(
    "row", [(0, MISSING), (1, MISSING), (MISSING, 0), (MISSING, 1), (0, 1), (1, 0)]
)
def test_single_step_moments_exact(row):
    rng = np.random.default_rng(hash(row) % 2**32)
    alpha = rng.integers(1, 6, 6).astype(float)
    state = BmmState(DirichletProduct(QUAD.structure, alpha))
    m, v = bmm_moments(state, SPN2, np.array(row))
    mean, cov = QUAD.moments(np.array([row]), alpha)
    assert np.allclose(m, mean, atol=1e-13)
    assert np.allclose(v, np.diag(cov) + mean**2, atol=1e-13)


def test_strength_recovers_dirichlet():
    # exact Dirichlet moments make every family's least-squares strength exact
    s = builtin_structure("chain3")
    rng = np.random.default_rng(4)
    alpha = rng.uniform(0.5, 9, s.n_params)
    dp = DirichletProduct(s, alpha)
    m = dp.mean
    S = dp.strength[s.family_of]
    v = m * (alpha + 1) / (S + 1)
    got = match_strength(s, m, m - v, v - m**2, np.ones(s.n_families))
    assert np.allclose(got, dp.strength, rtol=1e-10)


def test_means_stay_normalised(rng):
    net = sample_ground_truth(builtin_structure("dag9"), rng)
    data = ancestral_sample(net, 80, rng)
    data = np.where(rng.random(data.shape) < 0.5, data, MISSING)
    post = bmm_fit(compile_spn(net), data)
    assert np.allclose(family_sums(net.structure, post.mean), 1, atol=1e-12)
    assert np.all(post.alpha > 0)


def test_empty_rows_only_advance_time():
    s = builtin_structure("chain3")
    spn = compile_spn(s)
    data = np.full((4, 3), MISSING)
    st_ = bmm_fit_state(spn, data)
    assert st_.t == 4 and st_.skipped == 0
    assert np.array_equal(st_.posterior.alpha, np.ones(s.n_params))


def test_zero_support_row_skipped(monkeypatch):
    import sobn.bmm as bmm

    s = QUAD.structure
    state = BmmState(DirichletProduct(s, np.ones(6)))
    spn = compile_spn(s)
    monkeypatch.setattr(bmm, "backward_batch", lambda *a: (np.zeros(1), np.zeros((1, 6))))
    out = bmm_update(state, spn, np.array([1, 0]))
    assert (out.t, out.skipped) == (1, 1)
    assert out.posterior is state.posterior


def test_order_of_complete_rows_irrelevant(rng):
    net = sample_ground_truth(builtin_structure("chain3"), rng)
    spn = compile_spn(net)
    data = ancestral_sample(net, 30, rng)
    a = bmm_fit(spn, data).alpha
    b = bmm_fit(spn, data[::-1]).alpha
    assert np.allclose(a, b, atol=1e-9)
