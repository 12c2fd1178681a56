"""Parameter posteriors: product of Dirichlets and constrained Gaussian.

Also home of the free-parameter transform ``D`` and the confidence interval
used for calibration (equal-tailed quantiles of a moment-matched Beta).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg, special, stats

from .network import Structure, family_sums

DIFFUSE_STRENGTH = 1e-6
QUANTILE_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class DirichletProduct:
    """One Dirichlet per family; ``alpha`` uses the flat parameter layout."""

    structure: Structure
    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float)
        if alpha.shape != (self.structure.n_params,):
            raise ValueError("alpha must have one entry per parameter")
        if not np.all(alpha > 0):
            raise ValueError("Dirichlet shapes must be strictly positive")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    @property
    def strength(self) -> np.ndarray:
        """Per-family strength ``S``."""
        return family_sums(self.structure, self.alpha)

    @property
    def mean(self) -> np.ndarray:
        return self.alpha / self.strength[self.structure.family_of]

    @classmethod
    def uniform(cls, structure: Structure) -> "DirichletProduct":
        return cls(structure, np.ones(structure.n_params))


@dataclass(frozen=True, eq=False)
class GaussianPosterior:
    """Mean vector and covariance over the full (constrained) parameter vector."""

    structure: Structure
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        cov = np.array(self.cov, dtype=float)
        p = self.structure.n_params
        if mean.shape != (p,) or cov.shape != (p, p):
            raise ValueError("mean/covariance shape does not match the structure")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def check(self, sym_tol=1e-10, psd_tol=1e-9, row_tol=1e-9) -> None:
        """Raise ``AssertionError`` unless the constraint invariants hold."""
        s = self.structure
        cov = self.cov
        assert np.max(np.abs(cov - cov.T), initial=0.0) <= sym_tol, "covariance not symmetric"
        assert np.linalg.eigvalsh((cov + cov.T) / 2).min() >= -psd_tol, "covariance not PSD"
        rows = np.zeros((s.n_params, s.n_families))
        np.add.at(rows.T, s.family_of, cov.T)
        assert np.max(np.abs(rows), initial=0.0) <= row_tol, "family block rows do not sum to 0"
        assert np.max(np.abs(family_sums(s, self.mean) - 1)) <= 1e-9, "mean rows do not sum to 1"


@dataclass(frozen=True, eq=False)
class FreeTransform:
    """``D`` maps full-parameter gradients to free-parameter total derivatives.

    Each family of size ``k`` contributes ``k - 1`` rows ``e_j - e_last``.
    ``free_index[r]`` is the flat position of free coordinate ``r``.
    """

    matrix: np.ndarray
    free_index: np.ndarray

    @property
    def n_free(self) -> int:
        return self.matrix.shape[0]


def build_D(structure: Structure) -> FreeTransform:
    p = structure.n_params
    rows, free = [], []
    for start, k in zip(structure.family_start, structure.family_size):
        last = start + k - 1
        for j in range(start, last):
            r = np.zeros(p)
            r[j] = 1.0
            r[last] = -1.0
            rows.append(r)
            free.append(j)
    return FreeTransform(np.array(rows).reshape(-1, p), np.array(free, dtype=int))


def rising(a, m: int):
    """Rising factorial ``a (a+1) ... (a+m-1)``."""
    out = np.ones_like(np.asarray(a, dtype=float))
    for r in range(m):
        out = out * (a + r)
    return out


def dirichlet_mixed_moment(alpha, exponents) -> float:
    """``E[prod theta_j ** n_j]`` under ``Dirichlet(alpha)`` for total order <= 3."""
    alpha = np.asarray(alpha, dtype=float)
    n = np.asarray(exponents, dtype=int)
    if alpha.shape != n.shape:
        raise ValueError("alpha and exponents must have the same length")
    if np.any(alpha <= 0):
        raise ValueError("Dirichlet shapes must be strictly positive")
    if np.any(n < 0) or n.sum() > 3:
        raise ValueError("exponents must be nonnegative with total order <= 3")
    num = np.prod([rising(a, int(k)) for a, k in zip(alpha, n)])
    return float(num / rising(alpha.sum(), int(n.sum())))


def to_gaussian(dp: DirichletProduct) -> GaussianPosterior:
    """Block-diagonal Dirichlet covariance ``m_a (delta_ab - m_b) / (S + 1)``."""
    s = dp.structure
    m = dp.mean
    S = dp.strength
    cov = np.zeros((s.n_params, s.n_params))
    for f, (start, k) in enumerate(zip(s.family_start, s.family_size)):
        mf = m[start : start + k]
        cov[start : start + k, start : start + k] = (np.diag(mf) - np.outer(mf, mf)) / (S[f] + 1)
    return GaussianPosterior(s, m, cov)


# --- intervals -----------------------------------------------------------------


def _beta_ppf(q, a, b):
    x = special.betaincinv(a, b, q)
    bad = ~np.isfinite(x)
    if np.any(bad):
        x = np.where(bad, _bisect_ppf(q, a, b), x)
    return x


def _bisect_ppf(q, a, b):
    q, a, b = np.broadcast_arrays(np.asarray(q, float), np.asarray(a, float), np.asarray(b, float))
    lo = np.zeros(q.shape)
    hi = np.ones(q.shape)
    while np.max(hi - lo, initial=0.0) > QUANTILE_TOL:
        mid = 0.5 * (lo + hi)
        below = special.betainc(a, b, mid) < q
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def beta_interval(mean, variance, gamma, method: str = "beta"):
    """Equal-tailed interval of mass ``gamma`` for a probability-valued quantity.

    Broadcasts over all three arguments and returns ``(lo, hi)``.  The Beta is
    matched to ``mean`` and ``variance``; a variance at or above the Bernoulli
    bound ``mean (1 - mean)`` falls back to a maximally diffuse Beta.
    ``method="gaussian"`` gives the normal interval clipped to [0, 1].
    """
    mean, variance, gamma = np.broadcast_arrays(
        np.asarray(mean, float), np.asarray(variance, float), np.asarray(gamma, float)
    )
    if np.any((gamma < 0) | (gamma > 1)):
        raise ValueError("gamma must lie in [0, 1]")
    if np.any((mean < 0) | (mean > 1)) or np.any(variance < 0):
        raise ValueError("mean must lie in [0, 1] and variance must be nonnegative")
    q_lo = (1.0 - gamma) / 2.0
    q_hi = (1.0 + gamma) / 2.0

    if method == "gaussian":
        sd = np.sqrt(variance)
        with np.errstate(divide="ignore", invalid="ignore"):
            lo = np.where(sd > 0, mean + sd * stats.norm.ppf(q_lo), mean)
            hi = np.where(sd > 0, mean + sd * stats.norm.ppf(q_hi), mean)
        return np.clip(lo, 0.0, 1.0), np.clip(hi, 0.0, 1.0)
    if method != "beta":
        raise ValueError(f"unknown interval method {method!r}")

    bound = mean * (1.0 - mean)
    point = (variance <= 0.0) | (bound <= 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        nu = np.where(variance < bound, bound / variance - 1.0, DIFFUSE_STRENGTH)
    nu = np.where(point, 1.0, nu)
    m = np.clip(mean, 1e-300, 1.0 - 1e-16)
    a = m * nu
    b = (1.0 - m) * nu
    lo = _beta_ppf(q_lo, a, b)
    hi = _beta_ppf(q_hi, a, b)
    lo = np.where(gamma >= 1.0, 0.0, lo)
    hi = np.where(gamma >= 1.0, 1.0, hi)
    lo = np.where(point, mean, lo)
    hi = np.where(point, mean, hi)
    return lo, hi


# --- covariance from an information matrix -------------------------------------


class SingularInformationError(np.linalg.LinAlgError):
    def __init__(self, msg, condition):
        super().__init__(f"{msg} (condition estimate {condition:.3e})")
        self.condition = condition


def constrained_inverse(info: np.ndarray, D: FreeTransform) -> np.ndarray:
    """``D^T (D M D^T)^{-1} D`` via Cholesky, with one ridge retry."""
    Dm = D.matrix
    A = Dm @ info @ Dm.T
    A = (A + A.T) / 2
    try:
        c = linalg.cho_factor(A)
    except linalg.LinAlgError:
        ridge = 1e-10 * np.trace(A) / max(D.n_free, 1)
        try:
            c = linalg.cho_factor(A + ridge * np.eye(len(A)))
        except linalg.LinAlgError:
            raise SingularInformationError(
                "free-space information matrix is not positive definite", np.linalg.cond(A)
            ) from None
    R = Dm.T @ linalg.cho_solve(c, Dm)
    return (R + R.T) / 2


# --- serialization ---------------------------------------------------------------


def posterior_to_dict(post) -> dict:
    s = post.structure
    if isinstance(post, DirichletProduct):
        fams = []
        for start, k in zip(s.family_start, s.family_size):
            i, pa, _ = s.locate(int(start))
            fams.append({"node": s.ids[i], "parents": list(pa), "alpha": post.alpha[start : start + k].tolist()})
        return {"kind": "dirichlet", "families": fams}
    tril = np.tril_indices(s.n_params)
    return {
        "kind": "gaussian",
        "mean": post.mean.tolist(),
        "cov_lower": post.cov[tril].tolist(),
    }


def posterior_from_dict(structure: Structure, doc: dict):
    kind = doc.get("kind")
    if kind == "dirichlet":
        alpha = np.concatenate([np.asarray(f["alpha"], float) for f in doc["families"]])
        return DirichletProduct(structure, alpha)
    if kind == "gaussian":
        p = structure.n_params
        cov = np.zeros((p, p))
        tril = np.tril_indices(p)
        cov[tril] = doc["cov_lower"]
        cov = cov + np.tril(cov, -1).T
        return GaussianPosterior(structure, doc["mean"], cov)
    raise ValueError(f"unknown posterior kind {kind!r}")


def save_posterior(post, path) -> None:
    Path(path).write_text(json.dumps(posterior_to_dict(post)) + "\n")


def load_posterior(structure: Structure, path):
    return posterior_from_dict(structure, json.loads(Path(path).read_text()))


def as_gaussian(post) -> GaussianPosterior:
    return to_gaussian(post) if isinstance(post, DirichletProduct) else post
