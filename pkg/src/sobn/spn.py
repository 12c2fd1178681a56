"""Sum-product network compilation of a Bayesian network.

The circuit is built once per structure by variable elimination over factors
whose entries are circuit nodes.  Eliminating ``X`` multiplies every factor
mentioning ``X`` together with the indicator ``lambda_x`` and sums over ``x``.
Products and sums with identical children are shared.

Parameter values are not baked in: passes take a parameter vector, so one
compiled circuit serves every parameter setting of the structure.

For evaluation the n-ary arena is lowered to binary operations grouped by
depth.  A pass is then a few numpy ops per depth level, vectorised over a
batch of evidence rows.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .network import MISSING, BayesNet, Structure

SUM, PRODUCT, INDICATOR, PARAM = "SUM", "PRODUCT", "INDICATOR", "PARAM"


class UnderflowError(FloatingPointError):
    """Evidence with positive support evaluated to zero probability."""


@dataclass(frozen=True, eq=False)
class _Level:
    kind: str
    out: np.ndarray
    a: np.ndarray
    b: np.ndarray


@dataclass(frozen=True, eq=False)
class Spn:
    """Compiled circuit.

    ``kinds[n]``/``children[n]``/``args[n]`` describe arena node ``n``; leaf
    args are ``(node, value)`` for indicators and the flat parameter index for
    parameter leaves.  ``param_leaves[j]`` lists the arena nodes reading
    parameter ``j``.
    """

    structure: Structure
    order: tuple[int, ...]
    kinds: tuple[str, ...]
    children: tuple[tuple[int, ...], ...]
    args: tuple
    root: int
    eval_order: tuple[int, ...]
    param_leaves: tuple[tuple[int, ...], ...]
    # lowered evaluation plan
    n_slots: int
    ind_slots: np.ndarray
    ind_cols: np.ndarray
    param_slots: np.ndarray
    param_idx: np.ndarray
    levels: tuple[_Level, ...]

    def counts(self) -> dict[str, int]:
        out = {SUM: 0, PRODUCT: 0, INDICATOR: 0, PARAM: 0}
        for k in self.kinds:
            out[k] += 1
        return out

    def __len__(self):
        return len(self.kinds)


class _Builder:
    def __init__(self):
        self.kinds: list[str] = []
        self.children: list[tuple[int, ...]] = []
        self.args: list = []
        self.cache: dict = {}

    def leaf(self, kind, arg):
        key = (kind, arg)
        if key not in self.cache:
            self.cache[key] = self._push(kind, (), arg)
        return self.cache[key]

    def op(self, kind, kids):
        kids = tuple(sorted(kids))
        if len(kids) == 1:
            return kids[0]
        key = (kind, kids)
        if key not in self.cache:
            self.cache[key] = self._push(kind, kids, None)
        return self.cache[key]

    def _push(self, kind, kids, arg):
        self.kinds.append(kind)
        self.children.append(kids)
        self.args.append(arg)
        return len(self.kinds) - 1


def default_order(structure: Structure) -> tuple[int, ...]:
    """Reverse topological order: children are summed out before parents."""
    return tuple(reversed(structure.topo_order))


def compile_spn(net, elimination_order: Sequence | None = None) -> Spn:
    """Compile a network (or bare structure) by variable elimination."""
    s = net.structure if isinstance(net, BayesNet) else net
    if elimination_order is None:
        order = default_order(s)
    else:
        order = tuple(s.index(v) for v in elimination_order)
        if sorted(order) != list(range(s.n_nodes)):
            raise ValueError("elimination order must be a permutation of the nodes")

    b = _Builder()
    # factor: (scope tuple, int array of node ids with axes in scope order)
    factors = []
    for i in range(s.n_nodes):
        pos = np.arange(s.node_offset[i], s.node_offset[i + 1])
        table = np.array([b.leaf(PARAM, int(j)) for j in pos], dtype=int)
        shape = [s.cards[p] for p in s.parents[i]] + [s.cards[i]]
        factors.append((tuple(s.parents[i]) + (i,), table.reshape(shape)))

    for v in order:
        hit = [f for f in factors if v in f[0]]
        factors = [f for f in factors if v not in f[0]]
        scope = sorted(set().union(*(f[0] for f in hit)) - {v})
        new = np.empty([s.cards[u] for u in scope], dtype=int)
        for assign in itertools.product(*(range(s.cards[u]) for u in scope)):
            env = dict(zip(scope, assign))
            terms = []
            for x in range(s.cards[v]):
                env[v] = x
                kids = [b.leaf(INDICATOR, (v, x))]
                kids += [int(tab[tuple(env[u] for u in fs)]) for fs, tab in hit]
                terms.append(b.op(PRODUCT, kids))
            new[assign] = b.op(SUM, terms)
        factors.append((tuple(scope), new))

    roots = [int(tab[()]) for _, tab in factors]
    root = b.op(PRODUCT, roots)
    return _finish(s, order, b, root)


def _finish(s: Structure, order, b: _Builder, root: int) -> Spn:
    n = len(b.kinds)
    # children always precede parents in the arena, so index order is topological
    reachable = np.zeros(n, dtype=bool)
    reachable[root] = True
    for node in range(n - 1, -1, -1):
        if reachable[node]:
            for c in b.children[node]:
                reachable[c] = True
    eval_order = tuple(int(i) for i in np.flatnonzero(reachable))

    param_leaves = [[] for _ in range(s.n_params)]
    ind_slots, ind_cols, param_slots, param_idx = [], [], [], []
    col_offset = np.concatenate([[0], np.cumsum(s.cards)])
    for node in eval_order:
        if b.kinds[node] == PARAM:
            param_leaves[b.args[node]].append(node)
            param_slots.append(node)
            param_idx.append(b.args[node])
        elif b.kinds[node] == INDICATOR:
            i, x = b.args[node]
            ind_slots.append(node)
            ind_cols.append(col_offset[i] + x)

    # lower n-ary nodes to balanced binary ops on extra scratch slots
    depth = {}
    ops = []  # (depth, kind, out, a, b)
    next_slot = n
    for node in eval_order:
        kids = list(b.children[node])
        if not kids:
            depth[node] = 0
            continue
        kind = b.kinds[node]
        while len(kids) > 2:
            paired = []
            for k in range(0, len(kids) - 1, 2):
                t = next_slot
                next_slot += 1
                depth[t] = 1 + max(depth[kids[k]], depth[kids[k + 1]])
                ops.append((depth[t], kind, t, kids[k], kids[k + 1]))
                paired.append(t)
            if len(kids) % 2:
                paired.append(kids[-1])
            kids = paired
        depth[node] = 1 + max(depth[kids[0]], depth[kids[1]])
        ops.append((depth[node], kind, node, kids[0], kids[1]))

    ops.sort(key=lambda o: (o[0], o[1]))
    levels = []
    for (d, kind), group in itertools.groupby(ops, key=lambda o: (o[0], o[1])):
        g = list(group)
        levels.append(
            _Level(
                kind,
                np.array([o[2] for o in g], dtype=int),
                np.array([o[3] for o in g], dtype=int),
                np.array([o[4] for o in g], dtype=int),
            )
        )

    return Spn(
        structure=s,
        order=tuple(order),
        kinds=tuple(b.kinds),
        children=tuple(b.children),
        args=tuple(b.args),
        root=root,
        eval_order=eval_order,
        param_leaves=tuple(tuple(p) for p in param_leaves),
        n_slots=next_slot,
        ind_slots=np.array(ind_slots, dtype=int),
        ind_cols=np.array(ind_cols, dtype=int),
        param_slots=np.array(param_slots, dtype=int),
        param_idx=np.array(param_idx, dtype=int),
        levels=tuple(levels),
    )


# --- evaluation ----------------------------------------------------------------


def indicators(structure: Structure, evidence: np.ndarray) -> np.ndarray:
    """Indicator matrix ``(batch, sum cards)``: 1 where consistent with evidence."""
    ev = np.atleast_2d(np.asarray(evidence, dtype=int))
    node = np.repeat(np.arange(structure.n_nodes), structure.cards)
    value = np.concatenate([np.arange(k) for k in structure.cards])
    e = ev[:, node]
    return ((e == MISSING) | (e == value)).astype(float)


def _leaf_values(spn: Spn, theta: np.ndarray, lam: np.ndarray) -> np.ndarray:
    batch = lam.shape[0]
    vals = np.empty((spn.n_slots, batch))
    vals[spn.ind_slots] = lam.T[spn.ind_cols]
    if theta.ndim == 1:
        vals[spn.param_slots] = theta[spn.param_idx][:, None]
    else:
        vals[spn.param_slots] = theta.T[spn.param_idx]
    return vals


def _forward_slots(spn: Spn, theta, lam) -> np.ndarray:
    vals = _leaf_values(spn, theta, lam)
    for lv in spn.levels:
        if lv.kind == SUM:
            vals[lv.out] = vals[lv.a] + vals[lv.b]
        else:
            vals[lv.out] = vals[lv.a] * vals[lv.b]
    return vals


def _check_theta(spn: Spn, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != spn.structure.n_params:
        raise ValueError(
            f"expected {spn.structure.n_params} parameters, got {theta.shape[-1]}"
        )
    return theta


def _guard(values: np.ndarray, theta: np.ndarray) -> None:
    # with every parameter positive, any evidence has positive support
    if np.any(values <= 0.0) and np.all(theta > 0.0):
        raise UnderflowError("evidence probability underflowed to zero")


def forward_batch(spn: Spn, theta, evidence, lam=None) -> np.ndarray:
    """``p(e; theta)`` for every evidence row.

    ``theta`` is a single vector or one vector per row, shape ``(batch, P)``.
    ``lam`` overrides indicator values, which allows non-binary settings.
    """
    theta = _check_theta(spn, theta)
    check = lam is None
    if check:
        lam = indicators(spn.structure, evidence)
    vals = _forward_slots(spn, theta, np.atleast_2d(lam))
    out = vals[spn.root].copy()
    if check:
        _guard(out, theta)
    return out


def backward_batch(spn: Spn, theta, evidence, lam=None):
    """Forward values and the full parameter gradient for every evidence row.

    Returns ``(values, grads)`` with shapes ``(batch,)`` and ``(batch, P)``.
    """
    theta = _check_theta(spn, theta)
    check = lam is None
    if check:
        lam = indicators(spn.structure, evidence)
    vals = _forward_slots(spn, theta, np.atleast_2d(lam))
    value = vals[spn.root].copy()
    if check:
        _guard(value, theta)

    adj = np.zeros_like(vals)
    adj[spn.root] = 1.0
    for lv in reversed(spn.levels):
        g = adj[lv.out]
        if lv.kind == SUM:
            np.add.at(adj, lv.a, g)
            np.add.at(adj, lv.b, g)
        else:
            np.add.at(adj, lv.a, g * vals[lv.b])
            np.add.at(adj, lv.b, g * vals[lv.a])
    grads = np.zeros((spn.structure.n_params, vals.shape[1]))
    np.add.at(grads, spn.param_idx, adj[spn.param_slots])
    return value, grads.T


@dataclass(frozen=True)
class PassResult:
    value: float
    gradient: np.ndarray


def forward(spn: Spn, net: BayesNet, evidence=None) -> float:
    """Probability of a single (possibly partial) evidence vector."""
    ev = _single_evidence(spn.structure, evidence)
    return float(forward_batch(spn, net.theta, ev)[0])


def backward(spn: Spn, net: BayesNet, evidence=None) -> PassResult:
    ev = _single_evidence(spn.structure, evidence)
    value, grads = backward_batch(spn, net.theta, ev)
    return PassResult(float(value[0]), grads[0])


def joint_from_derivatives(result: PassResult, net: BayesNet, k, evidence=None) -> np.ndarray:
    """``p(x_k, e)`` for every value of an unobserved node ``k``."""
    s = net.structure
    k = s.index(k)
    if evidence is not None:
        ev = _single_evidence(s, evidence)[0]
        if ev[k] != MISSING:
            raise ValueError(f"node {s.ids[k]} is observed in the evidence")
    lo, hi = s.node_offset[k], s.node_offset[k + 1]
    contrib = (result.gradient[lo:hi] * net.theta[lo:hi]).reshape(s.n_configs[k], s.cards[k])
    return contrib.sum(axis=0)


def joint_batch(structure: Structure, theta, grads: np.ndarray, k: int) -> np.ndarray:
    """Batched ``p(x_k, e)``: ``grads`` shape ``(batch, P)`` -> ``(batch, |X_k|)``."""
    lo, hi = structure.node_offset[k], structure.node_offset[k + 1]
    theta = np.asarray(theta)
    t = theta[..., lo:hi]
    contrib = grads[:, lo:hi] * t
    return contrib.reshape(len(grads), structure.n_configs[k], structure.cards[k]).sum(axis=1)


def _single_evidence(structure: Structure, evidence) -> np.ndarray:
    if evidence is None:
        return np.full((1, structure.n_nodes), MISSING, dtype=int)
    if isinstance(evidence, dict):
        ev = np.full(structure.n_nodes, MISSING, dtype=int)
        for key, val in evidence.items():
            i = structure.index(key)
            if not 0 <= int(val) < structure.cards[i]:
                raise ValueError(f"value {val} outside domain of {structure.ids[i]}")
            ev[i] = int(val)
        return ev[None, :]
    ev = np.asarray(evidence, dtype=int)
    if ev.shape != (structure.n_nodes,):
        raise ValueError("evidence must have one entry per node")
    return ev[None, :]


# --- text dump -------------------------------------------------------------------


def dump(spn: Spn) -> str:
    """One line per reachable node: ``id TYPE args``; the last line is the root."""
    s = spn.structure
    lines = []
    for node in spn.eval_order:
        kind = spn.kinds[node]
        if kind == INDICATOR:
            i, x = spn.args[node]
            arg = f"{s.ids[i]} {x}"
        elif kind == PARAM:
            arg = str(spn.args[node])
        else:
            arg = " ".join(str(c) for c in spn.children[node])
        lines.append(f"{node} {kind} {arg}")
    lines.append(f"ROOT {spn.root}")
    return "\n".join(lines) + "\n"
