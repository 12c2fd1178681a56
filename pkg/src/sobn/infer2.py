"""Second-order queries: mean and variance of ``p(x_k | e)`` under a parameter posterior.

The conditional is a ratio of two network polynomials, so its gradient comes
from two backward passes (evidence alone, evidence plus ``X_k = x``).  The
variance is the delta-method quadratic form ``g^T R g``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import MISSING
from .posterior import as_gaussian
from .spn import Spn, backward_batch, forward_batch

VARIANCE_FLOOR = 1e-18


class QueryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class QueryResult:
    node: int
    mean: np.ndarray
    variance: np.ndarray

    def records(self, ids=None):
        name = ids[self.node] if ids is not None else self.node
        return [
            {"node": name, "value": x, "mean": float(m), "variance": float(v)}
            for x, (m, v) in enumerate(zip(self.mean, self.variance))
        ]


def _evidence(structure, evidence) -> np.ndarray:
    if evidence is None:
        return np.full(structure.n_nodes, MISSING, dtype=int)
    if isinstance(evidence, dict):
        ev = np.full(structure.n_nodes, MISSING, dtype=int)
        for k, v in evidence.items():
            ev[structure.index(k)] = int(v)
        return ev
    return np.asarray(evidence, dtype=int).copy()


def query_all(spn: Spn, posterior, evidence=None, nodes=None) -> list[QueryResult]:
    """Delta-method query for every unobserved node (or the listed ones).

    One batched backward pass covers the evidence row and every
    ``evidence + {X_k = x}`` extension.
    """
    s = spn.structure
    post = as_gaussian(posterior)
    theta, R = post.mean, post.cov
    ev = _evidence(s, evidence)
    hidden = [i for i in range(s.n_nodes) if ev[i] == MISSING]
    if nodes is not None:
        want = [s.index(k) for k in nodes]
        for k in want:
            if ev[k] != MISSING:
                raise QueryError(f"node {s.ids[k]} is observed in the evidence")
        hidden = want
    if not hidden:
        return []

    batch = [ev]
    for k in hidden:
        for x in range(s.cards[k]):
            e = ev.copy()
            e[k] = x
            batch.append(e)
    p, grads = backward_batch(spn, theta, np.array(batch))
    pe, ge = p[0], grads[0]
    if not pe > 0:
        raise QueryError("evidence has zero probability under the posterior mean")

    pj, gj = p[1:], grads[1:]
    mu = pj / pe
    g = (gj * pe - pj[:, None] * ge) / pe**2
    var = np.einsum("ij,jk,ik->i", g, R, g)
    var = np.maximum(var, 0.0)

    out, pos = [], 0
    for k in hidden:
        n = s.cards[k]
        out.append(QueryResult(k, mu[pos : pos + n], var[pos : pos + n]))
        pos += n
    return out


def query_second_order(spn: Spn, posterior, evidence, k) -> QueryResult:
    return query_all(spn, posterior, evidence, nodes=[k])[0]


def exact_conditionals(spn: Spn, theta, evidence, nodes) -> list[np.ndarray]:
    """First-order ``p(x_k | e)`` under fixed parameters for each listed node."""
    s = spn.structure
    ev = _evidence(s, evidence)
    batch = [ev]
    for k in nodes:
        for x in range(s.cards[k]):
            e = ev.copy()
            e[k] = x
            batch.append(e)
    p = forward_batch(spn, theta, np.array(batch))
    if not p[0] > 0:
        raise QueryError("evidence has zero probability")
    out, pos = [], 1
    for k in nodes:
        out.append(p[pos : pos + s.cards[k]] / p[0])
        pos += s.cards[k]
    return out
