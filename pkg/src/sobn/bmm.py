"""Online Bayesian moment matching over a product of Dirichlets.

Each observation multiplies the current posterior by the evidence likelihood
``p(e; theta)``, a multilinear polynomial with exactly one factor per node.
For a parameter ``a`` in family ``F`` of node ``i`` write the likelihood as
``sum_{b in F} theta_b d_b + rest`` where ``d`` is the backward-pass
derivative.  Neither ``d_b`` nor ``rest`` involves ``F``, and other families
are independent under the product prior, so their expectations are just the
values at the current means.  The raw moments ``E[theta_a^k p(e)]`` then
reduce to Dirichlet moments of order at most three inside ``F``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .network import Structure
from .posterior import DirichletProduct
from .spn import Spn, backward_batch

log = logging.getLogger(__name__)

STRENGTH_DENOM_GUARD = 1e-15


@dataclass(frozen=True)
class BmmState:
    posterior: DirichletProduct
    t: int = 0
    skipped: int = 0


class ZeroSupport(Exception):
    """Evidence has zero probability under the current means."""


def bmm_init(structure: Structure) -> BmmState:
    return BmmState(DirichletProduct.uniform(structure))


def _moment_terms(state: BmmState, spn: Spn, evidence):
    """New means plus ``m - v`` and ``v - m**2`` without cancellation.

    With ``u = (d_a - c_F) / p(e)`` the matched moments are
    ``m' = m (1 + u / (S+1))`` and ``v' = m (alpha+1) / (S+1) * (1 + 2u / (S+2))``,
    where ``c_F = sum_{b in F} m_b d_b``; the differences below are those two
    expressions expanded around the prior Dirichlet moments.
    """
    post = state.posterior
    s = post.structure
    fam = s.family_of
    alpha = post.alpha
    S = post.strength[fam]
    m = post.mean

    ev = np.asarray(evidence, dtype=int).reshape(1, -1)
    value, grads = backward_batch(spn, m, ev)
    z0 = float(value[0])
    if not z0 > 0.0:
        raise ZeroSupport("evidence has zero probability under the posterior means")
    d = grads[0]
    c = np.bincount(fam, weights=m * d, minlength=s.n_families)[fam]
    u = (d - c) / z0

    m_new = m * (1 + u / (S + 1))
    v_new = m * (alpha + 1) / (S + 1) * (1 + 2 * u / (S + 2))
    m_minus_v = m * S * (1 - m) / (S + 1) + m * u * (S - 2 * alpha) / ((S + 1) * (S + 2))
    central = (
        m * (1 - m) / (S + 1)
        + 2 * u * m * (1 - 2 * m) / ((S + 1) * (S + 2))
        - (m * u / (S + 1)) ** 2
    )
    return m_new, v_new, m_minus_v, central


def bmm_moments(state: BmmState, spn: Spn, evidence):
    """First and second raw moments of every parameter after absorbing ``evidence``.

    Returns ``(m, v)`` in the flat layout.  Raises :class:`ZeroSupport` when
    the evidence likelihood vanishes at the current means.
    """
    m, v, _, _ = _moment_terms(state, spn, evidence)
    return m, v


def match_strength(structure: Structure, m, m_minus_v, central, previous):
    """Per-family least-squares Dirichlet strength.

    ``m_minus_v`` and ``central`` are ``m - v`` and ``v - m**2`` for raw second
    moments ``v``; passing them separately avoids cancellation.
    """
    fam = structure.family_of
    w = m * (1 - m)
    num = np.bincount(fam, weights=w * m_minus_v, minlength=structure.n_families)
    den = np.bincount(fam, weights=w * central, minlength=structure.n_families)
    bad = den <= STRENGTH_DENOM_GUARD
    if np.any(bad):
        log.debug("degenerate strength in %d families; keeping previous", int(bad.sum()))
    with np.errstate(divide="ignore", invalid="ignore"):
        S = np.where(bad, previous, num / np.where(bad, 1.0, den))
    return S


def bmm_update(state: BmmState, spn: Spn, evidence) -> BmmState:
    s = state.posterior.structure
    try:
        m, _, m_minus_v, central = _moment_terms(state, spn, evidence)
    except ZeroSupport:
        log.debug("skipping zero-support row at t=%d", state.t)
        return BmmState(state.posterior, state.t + 1, state.skipped + 1)
    # remove rounding drift so family means sum to one
    m = m / np.bincount(s.family_of, weights=m, minlength=s.n_families)[s.family_of]
    S = match_strength(s, m, m_minus_v, central, state.posterior.strength)
    alpha = m * S[s.family_of]
    return BmmState(DirichletProduct(s, alpha), state.t + 1, state.skipped)


def bmm_fit_state(spn: Spn, data: np.ndarray, state: BmmState | None = None) -> BmmState:
    """Fold :func:`bmm_update` over the rows in order."""
    if state is None:
        state = bmm_init(spn.structure)
    observed = (np.asarray(data) >= 0).any(axis=1)
    for row, has_obs in zip(data, observed):
        if not has_obs:
            # the likelihood of an empty row is identically one
            state = BmmState(state.posterior, state.t + 1, state.skipped)
            continue
        state = bmm_update(state, spn, row)
    return state


def bmm_fit(spn: Spn, data: np.ndarray) -> DirichletProduct:
    return bmm_fit_state(spn, data).posterior
