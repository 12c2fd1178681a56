import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sobn.em import (
    EmConfig,
    build_fisher,
    build_hessian_ga,
    completions,
    em_fit,
    fit_em_fisher,
    fit_em_ga,
    m_step,
    observation_patterns,
    unique_rows,
)
from sobn.network import MISSING, ancestral_sample, builtin_structure, family_sums, mask_cells, sample_ground_truth
from sobn.spn import compile_spn

from conftest import TwoNodeQuadrature, complete_counts, random_net


def test_unique_rows_drops_empty():
    data = np.array([[0, 1], [0, 1], [MISSING, MISSING], [1, MISSING]])
    rows, counts = unique_rows(data)
    assert rows.tolist() == [[0, 1], [1, MISSING]]
    assert counts.tolist() == [2.0, 1.0]


def test_config_validation():
    with pytest.raises(ValueError):
        EmConfig(fisher_weighting=3)
    with pytest.raises(ValueError):
        EmConfig(tol=0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_complete_data_closed_form(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, 4)
    s = net.structure
    data = ancestral_sample(net, 50, rng)
    theta, trace = em_fit(compile_spn(net), data, EmConfig(), rng)
    expect = m_step(s, complete_counts(s, data), np.ones(s.n_params), 1e-6)
    assert trace.iterations <= 2
    assert np.allclose(theta, expect, atol=1e-12)


def test_m_step_empty_family_uniform():
    s = builtin_structure("chain3")
    counts = np.zeros(s.n_params)
    counts[:3] = [5, 0, 0]
    th = m_step(s, counts, np.ones(s.n_params), 1e-6)
    assert np.allclose(th[3:], 1 / 3)
    assert th[1] == pytest.approx(1e-6, rel=1e-3)
    assert np.allclose(family_sums(s, th), 1)


def test_log_posterior_monotone(rng):
    net = sample_ground_truth(builtin_structure("dag9"), rng)
    data = mask_cells(ancestral_sample(net, 120, rng), 0.5, rng)
    _, trace = em_fit(compile_spn(net), data, EmConfig(), rng)
    lp = np.array(trace.log_posterior)
    assert np.all(np.diff(lp) >= -1e-9)
    assert len(lp) == trace.iterations + 1 <= 201


def test_completions_enumerate_all():
    s = builtin_structure("chain3")
    ev = completions(s, (0, 2))
    assert ev.shape == (9, 3)
    assert (ev[:, 1] == MISSING).all()
    assert len({tuple(r) for r in ev}) == 9


def test_patterns_count_rows():
    data = np.array([[0, MISSING, 1], [2, MISSING, 0], [MISSING] * 3, [0, 1, 2]])
    pats = observation_patterns(data)
    assert dict(pats) == {(0, 2): 2, (0, 1, 2): 1}


def test_hessian_against_enumeration(rng):
    net = sample_ground_truth(builtin_structure("chain3"), rng)
    s = net.structure
    data = ancestral_sample(net, 10, rng)
    info = build_hessian_ga(compile_spn(net), net.theta, data)
    # complete row: d log p / d theta_j = 1/theta_j on the parameters it uses
    H = np.diag(s.param_card / net.theta)
    for row in data:
        u = np.zeros(s.n_params)
        for i in range(s.n_nodes):
            j = s.node_offset[i] + s.config_of_rows(i, row[None])[0] * s.cards[i] + row[i]
            u[j] = 1 / net.theta[j]
        H += np.outer(u, u)
    assert np.allclose(info.matrix, H, rtol=1e-12)


def test_fisher_complete_pattern_against_enumeration(rng):
    net = sample_ground_truth(builtin_structure("chain3"), rng)
    s = net.structure
    J1 = build_fisher(compile_spn(net), net.theta, [((0, 1, 2), 1)], weighting=1).matrix
    J2 = build_fisher(compile_spn(net), net.theta, [((0, 1, 2), 1)], weighting=2).matrix
    want1 = np.diag(s.param_card / net.theta)
    want2 = want1.copy()
    allx = s.all_assignments()
    px = net.joint(allx)
    for x, p in zip(allx, px):
        u = np.zeros(s.n_params)
        for i in range(s.n_nodes):
            j = s.node_offset[i] + s.config_of_rows(i, x[None])[0] * s.cards[i] + x[i]
            u[j] = 1 / net.theta[j]
        want1 += p * np.outer(u, u)
        want2 += np.outer(u, u)
    assert np.allclose(J1, want1, rtol=1e-11)
    assert np.allclose(J2, want2, rtol=1e-11)


def test_covariances_satisfy_constraints(rng):
    net = sample_ground_truth(builtin_structure("dag9"), rng)
    data = mask_cells(ancestral_sample(net, 120, rng), 0.6, rng)
    spn = compile_spn(net)
    for fit in (fit_em_ga, fit_em_fisher):
        post, _ = fit(spn, data, EmConfig(), np.random.default_rng(0))
        post.check(psd_tol=1e-8)


def test_large_sample_covariance_matches_quadrature():
    rng = np.random.default_rng(8)
    q0 = TwoNodeQuadrature(n=2)
    truth = np.array([0.35, 0.65, 0.7, 0.3, 0.2, 0.8])
    from sobn.network import BayesNet

    net = BayesNet(q0.structure, truth)
    data = mask_cells(ancestral_sample(net, 2000, rng), 0.7, rng)
    spn = compile_spn(net)
    post, _ = fit_em_fisher(spn, data, EmConfig(), rng)
    free = [0, 2, 4]
    sd = np.sqrt(np.diag(post.cov)[free])
    box = [(post.mean[j] - 8 * d, post.mean[j] + 8 * d) for j, d in zip(free, sd)]
    mean, cov = TwoNodeQuadrature(n=40, box=box).moments(data)
    exact_sd = np.sqrt(np.diag(cov)[free])
    assert np.allclose(sd, exact_sd, rtol=0.05)
    assert np.allclose(post.mean[free], mean[free], atol=0.01)
