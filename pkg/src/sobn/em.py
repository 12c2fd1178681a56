"""EM for MAP parameters plus Hessian and Fisher covariance estimates.

All likelihood and gradient evaluations go through the compiled circuit.
Identical rows are evaluated once and weighted by their multiplicity.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .network import MISSING, Structure, family_sums
from .posterior import FreeTransform, GaussianPosterior, build_D, constrained_inverse
from .spn import Spn, backward_batch, forward_batch

log = logging.getLogger(__name__)

FISHER_CHUNK = 4096


class EmError(RuntimeError):
    pass


@dataclass(frozen=True)
class EmConfig:
    prior: float | np.ndarray = 1.0
    max_iter: int = 200
    tol: float = 1e-8
    eps: float = 1e-6
    fisher_weighting: int = 1
    jitter: float = 0.01

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if not 0 < self.eps < 1e-2:
            raise ValueError("clamp epsilon must lie in (0, 1e-2)")
        if self.fisher_weighting not in (1, 2):
            raise ValueError("fisher_weighting must be 1 or 2")


@dataclass
class EmTrace:
    log_posterior: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    skipped_rows: int = 0


@dataclass(frozen=True, eq=False)
class InfoMatrix:
    matrix: np.ndarray
    kind: str
    j0: np.ndarray


def unique_rows(data: np.ndarray):
    """Distinct rows with at least one observed cell, and their counts."""
    data = np.asarray(data, dtype=int)
    if len(data) == 0:
        return data.reshape(0, data.shape[1] if data.ndim == 2 else 0), np.zeros(0)
    rows, counts = np.unique(data, axis=0, return_counts=True)
    keep = (rows != MISSING).any(axis=1)
    return rows[keep], counts[keep].astype(float)


def _prior_vector(structure: Structure, prior) -> np.ndarray:
    return np.broadcast_to(np.asarray(prior, dtype=float), (structure.n_params,)).copy()


def _log_prior(prior_alpha, theta) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = np.where(prior_alpha != 1.0, (prior_alpha - 1.0) * np.log(theta), 0.0)
    return float(lp.sum())


def log_posterior(spn: Spn, theta, rows, counts, prior_alpha) -> float:
    """Observed-data log-likelihood plus the Dirichlet log prior (up to a constant)."""
    ll = 0.0
    if len(rows):
        p = forward_batch(spn, theta, rows)
        with np.errstate(divide="ignore"):
            ll = float(np.dot(counts, np.log(p)))
    return ll + _log_prior(prior_alpha, theta)


def em_expected_counts(spn: Spn, theta, rows, counts=None):
    """Expected family counts ``sum_t p(x_i, pa_i | e_t)`` and the row log-likelihood.

    Returns ``(increments, loglik, skipped)``; zero-support rows are skipped.
    """
    theta = np.asarray(theta, dtype=float)
    rows = np.atleast_2d(np.asarray(rows, dtype=int))
    if counts is None:
        counts = np.ones(len(rows))
    if len(rows) == 0:
        return np.zeros_like(theta), 0.0, 0
    p, grads = backward_batch(spn, theta, rows)
    ok = p > 0
    w = np.where(ok, counts / np.where(ok, p, 1.0), 0.0)
    inc = theta * (w @ grads)
    ll = float(np.dot(counts[ok], np.log(p[ok])))
    return inc, ll, int(counts[~ok].sum())


def m_step(structure: Structure, expected: np.ndarray, prior_alpha: np.ndarray, eps: float):
    """Closed-form MAP per family, clamped into ``[eps, 1 - eps]`` and renormalised."""
    num = np.maximum(expected + prior_alpha - 1.0, 0.0)
    tot = family_sums(structure, num)[structure.family_of]
    # a family with no expected counts and a flat prior keeps the uniform value
    theta = np.where(tot > 0, num / np.where(tot > 0, tot, 1.0), 1.0 / structure.param_card)
    theta = np.clip(theta, eps, 1.0 - eps)
    return theta / family_sums(structure, theta)[structure.family_of]


def initial_theta(structure: Structure, rng: np.random.Generator, jitter: float) -> np.ndarray:
    theta = (1.0 / structure.param_card) * (1.0 + jitter * rng.uniform(-1, 1, structure.n_params))
    return theta / family_sums(structure, theta)[structure.family_of]


def em_fit(spn: Spn, data, cfg: EmConfig = EmConfig(), rng=None, theta0=None):
    """Run EM from a jittered uniform start (or ``theta0``).

    Returns ``(theta_hat, trace)``.  The trace holds the log-posterior at
    every iterate, starting with the initial point.
    """
    s = spn.structure
    if rng is None:
        rng = np.random.default_rng(0)
    prior = _prior_vector(s, cfg.prior)
    rows, counts = unique_rows(data)
    theta = initial_theta(s, rng, cfg.jitter) if theta0 is None else np.asarray(theta0, float)

    trace = EmTrace()
    inc, ll, skipped = em_expected_counts(spn, theta, rows, counts)
    if len(rows) and skipped == counts.sum():
        raise EmError("every row has zero probability under the initial parameters")
    trace.log_posterior.append(ll + _log_prior(prior, theta))

    for _ in range(cfg.max_iter):
        theta = m_step(s, inc, prior, cfg.eps)
        trace.iterations += 1
        inc, ll, skipped = em_expected_counts(spn, theta, rows, counts)
        if len(rows) and skipped == counts.sum():
            raise EmError("every row has zero probability under the current parameters")
        trace.log_posterior.append(ll + _log_prior(prior, theta))
        if abs(trace.log_posterior[-1] - trace.log_posterior[-2]) < cfg.tol:
            trace.converged = True
            break
    trace.skipped_rows = skipped
    return theta, trace


# --- information matrices ---------------------------------------------------------


def j0_matrix(structure: Structure, theta) -> np.ndarray:
    """``K diag(1/theta)`` with ``K`` holding each parameter's child cardinality."""
    return np.diag(structure.param_card / np.asarray(theta, float))


def build_hessian_ga(spn: Spn, theta, data) -> InfoMatrix:
    """Outer-product Hessian ``J0 + sum_t grad p grad p^T / p^2`` over the data."""
    s = spn.structure
    j0 = j0_matrix(s, theta)
    rows, counts = unique_rows(data)
    H = j0.copy()
    if len(rows):
        p, grads = backward_batch(spn, theta, rows)
        ok = p > 0
        if not ok.all():
            log.debug("hessian: skipping %d zero-support rows", int((~ok).sum()))
        g = grads[ok] / p[ok, None]
        H += (g * counts[ok, None]).T @ g
    return InfoMatrix((H + H.T) / 2, "hessian", j0)


def observation_patterns(data) -> list[tuple[tuple[int, ...], int]]:
    """Observed-node sets of the rows with multiplicities, in sorted order."""
    mask = np.asarray(data) != MISSING
    if len(mask) == 0:
        return []
    pats, counts = np.unique(mask, axis=0, return_counts=True)
    out = []
    for pat, c in zip(pats, counts):
        nodes = tuple(int(i) for i in np.flatnonzero(pat))
        if nodes:
            out.append((nodes, int(c)))
    return out


def completions(structure: Structure, observed: tuple[int, ...]) -> np.ndarray:
    """Every joint assignment of the observed nodes, others missing."""
    grids = np.meshgrid(*[np.arange(structure.cards[i]) for i in observed], indexing="ij")
    out = np.full((grids[0].size, structure.n_nodes), MISSING, dtype=int)
    for i, g in zip(observed, grids):
        out[:, i] = g.ravel()
    return out


def build_fisher(spn: Spn, theta, patterns, weighting: int = 1) -> InfoMatrix:
    """Fisher information summed over observation patterns.

    For each pattern every assignment ``e'`` of its observed nodes contributes
    ``w(e') grad p(e') grad p(e')^T`` with ``w = 1/p`` (``weighting=1``, the
    expected-information identity) or ``1/p**2`` (``weighting=2``).
    """
    if weighting not in (1, 2):
        raise ValueError("weighting must be 1 or 2")
    s = spn.structure
    theta = np.asarray(theta, float)
    j0 = j0_matrix(s, theta)
    J = j0.copy()
    for observed, mult in patterns:
        if not observed:
            continue
        acc = np.zeros_like(J)
        ev = completions(s, tuple(observed))
        for lo in range(0, len(ev), FISHER_CHUNK):
            p, grads = backward_batch(spn, theta, ev[lo : lo + FISHER_CHUNK])
            ok = p > 0
            g = grads[ok]
            w = 1.0 / p[ok] ** weighting
            acc += (g * w[:, None]).T @ g
        J += mult * acc
    return InfoMatrix((J + J.T) / 2, "fisher", j0)


def covariance_from_info(info, D: FreeTransform) -> np.ndarray:
    M = info.matrix if isinstance(info, InfoMatrix) else np.asarray(info, float)
    return constrained_inverse(M, D)


# --- learners --------------------------------------------------------------------


def fit_em_ga(spn: Spn, data, cfg: EmConfig = EmConfig(), rng=None):
    theta, trace = em_fit(spn, data, cfg, rng)
    info = build_hessian_ga(spn, theta, data)
    cov = covariance_from_info(info, build_D(spn.structure))
    return GaussianPosterior(spn.structure, theta, cov), trace


def fit_em_fisher(spn: Spn, data, cfg: EmConfig = EmConfig(), rng=None):
    theta, trace = em_fit(spn, data, cfg, rng)
    info = build_fisher(spn, theta, observation_patterns(data), cfg.fisher_weighting)
    cov = covariance_from_info(info, build_D(spn.structure))
    return GaussianPosterior(spn.structure, theta, cov), trace
