"""Discrete Bayesian networks, flat parameter indexing and data generation.

Parameters of every conditional probability table live in one flat vector.
Node ``i`` owns a contiguous block of ``n_configs[i] * cards[i]`` entries laid
out row-major: the parent assignment (mixed radix over ``parents[i]`` in the
listed order) selects a row, the child value selects the column.  Each row is
a *family* and sums to one.

Datasets are integer arrays of shape ``(rows, nodes)`` with ``MISSING`` (-1)
marking unobserved cells.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

MISSING = -1
BUILTIN_STRUCTURES = ("chain3", "dag9")


class StructureError(ValueError):
    """Malformed network structure (cycle, unknown parent, bad cardinality)."""


class DataFormatError(ValueError):
    """Dataset or network file that cannot be parsed."""


@dataclass(frozen=True, eq=False)
class Structure:
    """Graph and domain sizes of a discrete Bayesian network.

    Also owns the flat parameter index map: positions, family boundaries and
    the reverse lookup from a flat position to ``(node, parent config, value)``.
    """

    ids: tuple[str, ...]
    cards: tuple[int, ...]
    parents: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        n = len(self.ids)
        if len(self.cards) != n or len(self.parents) != n:
            raise StructureError("ids, cards and parents must have equal length")
        if len(set(self.ids)) != n:
            raise StructureError("duplicate node ids")
        for i, (k, pa) in enumerate(zip(self.cards, self.parents)):
            if k < 2:
                raise StructureError(f"node {self.ids[i]} has cardinality {k} < 2")
            for p in pa:
                if not 0 <= p < n or p == i:
                    raise StructureError(f"node {self.ids[i]} has invalid parent {p}")
            if len(set(pa)) != len(pa):
                raise StructureError(f"node {self.ids[i]} lists a parent twice")
        self.topo_order  # raises on cycles

    @classmethod
    def from_edges(cls, ids, cards, edges):
        """Build from ``(parent, child)`` pairs given as ids or positions."""
        ids = tuple(ids)
        pos = {name: i for i, name in enumerate(ids)}

        def resolve(v):
            if isinstance(v, str):
                if v not in pos:
                    raise StructureError(f"unknown node id {v!r}")
                return pos[v]
            return int(v)

        parents = [[] for _ in ids]
        for a, b in edges:
            parents[resolve(b)].append(resolve(a))
        return cls(ids, tuple(int(c) for c in cards), tuple(tuple(p) for p in parents))

    @property
    def n_nodes(self) -> int:
        return len(self.ids)

    def index(self, node) -> int:
        if isinstance(node, str):
            try:
                return self.ids.index(node)
            except ValueError:
                raise KeyError(f"unknown node id {node!r}") from None
        node = int(node)
        if not 0 <= node < self.n_nodes:
            raise KeyError(f"node index {node} out of range")
        return node

    @cached_property
    def topo_order(self) -> tuple[int, ...]:
        """Kahn's algorithm with smallest-index tie breaking."""
        n = self.n_nodes
        indeg = [len(pa) for pa in self.parents]
        kids = self.children
        ready = sorted(i for i in range(n) if indeg[i] == 0)
        order = []
        while ready:
            i = ready.pop(0)
            order.append(i)
            for c in kids[i]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
                    ready.sort()
        if len(order) != n:
            stuck = [self.ids[i] for i in range(n) if indeg[i] > 0]
            raise StructureError(f"cycle detected among {stuck}")
        return tuple(order)

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        kids = [[] for _ in range(self.n_nodes)]
        for i, pa in enumerate(self.parents):
            for p in pa:
                kids[p].append(i)
        return tuple(tuple(k) for k in kids)

    @property
    def leaves(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_nodes) if not self.children[i])

    @cached_property
    def n_configs(self) -> np.ndarray:
        return np.array(
            [int(np.prod([self.cards[p] for p in pa])) for pa in self.parents], dtype=int
        )

    @cached_property
    def node_offset(self) -> np.ndarray:
        sizes = self.n_configs * np.array(self.cards)
        return np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    @property
    def n_params(self) -> int:
        return int(self.node_offset[-1])

    @cached_property
    def param_node(self) -> np.ndarray:
        sizes = np.diff(self.node_offset)
        return np.repeat(np.arange(self.n_nodes), sizes)

    @cached_property
    def param_value(self) -> np.ndarray:
        return np.concatenate(
            [np.tile(np.arange(k), m) for k, m in zip(self.cards, self.n_configs)]
        ).astype(int)

    @cached_property
    def param_config(self) -> np.ndarray:
        return np.concatenate(
            [np.repeat(np.arange(m), k) for k, m in zip(self.cards, self.n_configs)]
        ).astype(int)

    @cached_property
    def param_card(self) -> np.ndarray:
        return np.asarray(self.cards)[self.param_node]

    @cached_property
    def family_of(self) -> np.ndarray:
        """Family id of every flat position; families are numbered in layout order."""
        starts = self.family_start
        fam = np.zeros(self.n_params, dtype=int)
        fam[starts[1:]] = 1
        return np.cumsum(fam)

    @cached_property
    def family_start(self) -> np.ndarray:
        return np.concatenate(
            [
                off + np.arange(m) * k
                for off, k, m in zip(self.node_offset[:-1], self.cards, self.n_configs)
            ]
        ).astype(int)

    @cached_property
    def family_size(self) -> np.ndarray:
        return self.param_card[self.family_start]

    @property
    def n_families(self) -> int:
        return len(self.family_start)

    def config_index(self, node: int, parent_values: Sequence[int]) -> int:
        """Row index of a parent assignment (row-major over ``parents[node]``)."""
        pa = self.parents[node]
        if len(parent_values) != len(pa):
            raise ValueError("parent assignment has wrong length")
        idx = 0
        for p, v in zip(pa, parent_values):
            if not 0 <= v < self.cards[p]:
                raise ValueError(f"value {v} outside domain of {self.ids[p]}")
            idx = idx * self.cards[p] + int(v)
        return idx

    def position(self, node: int, parent_values: Sequence[int], value: int) -> int:
        if not 0 <= value < self.cards[node]:
            raise ValueError(f"value {value} outside domain of {self.ids[node]}")
        row = self.config_index(node, parent_values)
        return int(self.node_offset[node] + row * self.cards[node] + value)

    def locate(self, j: int) -> tuple[int, tuple[int, ...], int]:
        """Inverse of :meth:`position`."""
        i = int(self.param_node[j])
        row = int(self.param_config[j])
        vals = []
        for p in reversed(self.parents[i]):
            vals.append(row % self.cards[p])
            row //= self.cards[p]
        return i, tuple(reversed(vals)), int(self.param_value[j])

    def config_of_rows(self, node: int, data: np.ndarray) -> np.ndarray:
        """Parent-config index per complete row of ``data``."""
        idx = np.zeros(len(data), dtype=int)
        for p in self.parents[node]:
            idx = idx * self.cards[p] + data[:, p]
        return idx

    def all_assignments(self) -> np.ndarray:
        """Every joint assignment, shape ``(prod cards, n)``."""
        grids = np.meshgrid(*[np.arange(k) for k in self.cards], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {
                    "id": name,
                    "cardinality": k,
                    "parents": [self.ids[p] for p in pa],
                }
                for name, k, pa in zip(self.ids, self.cards, self.parents)
            ]
        }


@dataclass(frozen=True, eq=False)
class BayesNet:
    """Structure plus a flat parameter vector satisfying the family constraint."""

    structure: Structure
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.shape != (self.structure.n_params,):
            raise ValueError(
                f"expected {self.structure.n_params} parameters, got shape {theta.shape}"
            )
        if np.any(theta < 0) or np.any(theta > 1):
            raise ValueError("parameters must lie in [0, 1]")
        sums = family_sums(self.structure, theta)
        if np.max(np.abs(sums - 1.0)) > 1e-12:
            raise ValueError("every CPT row must sum to 1")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def cpt(self, node) -> np.ndarray:
        s = self.structure
        i = s.index(node)
        block = self.theta[s.node_offset[i] : s.node_offset[i + 1]]
        return block.reshape(s.n_configs[i], s.cards[i])

    def with_theta(self, theta) -> "BayesNet":
        return BayesNet(self.structure, theta)

    def joint(self, assignments: np.ndarray) -> np.ndarray:
        """Probability of complete assignments by the chain-rule product."""
        s = self.structure
        out = np.ones(len(assignments))
        for i in range(s.n_nodes):
            rows = s.config_of_rows(i, assignments)
            out *= self.theta[s.node_offset[i] + rows * s.cards[i] + assignments[:, i]]
        return out

    def to_dict(self) -> dict:
        d = self.structure.to_dict()
        for i, node in enumerate(d["nodes"]):
            node["cpt"] = self.cpt(i).tolist()
        return d


def family_sums(structure: Structure, theta: np.ndarray) -> np.ndarray:
    return np.bincount(structure.family_of, weights=theta, minlength=structure.n_families)


def topo_order(net) -> list[str]:
    s = net.structure if isinstance(net, BayesNet) else net
    return [s.ids[i] for i in s.topo_order]


def sample_ground_truth(structure: Structure, rng: np.random.Generator) -> BayesNet:
    """Draw every CPT row independently from the flat Dirichlet."""
    theta = np.empty(structure.n_params)
    for start, k in zip(structure.family_start, structure.family_size):
        theta[start : start + k] = rng.dirichlet(np.ones(k))
    # dirichlet rows can miss 1 by a few ulps
    theta /= family_sums(structure, theta)[structure.family_of]
    return BayesNet(structure, theta)


def ancestral_sample(net: BayesNet, count: int, rng: np.random.Generator) -> np.ndarray:
    s = net.structure
    data = np.zeros((count, s.n_nodes), dtype=int)
    for i in s.topo_order:
        rows = s.config_of_rows(i, data)
        probs = net.cpt(i)[rows]
        u = rng.random(count)[:, None]
        cdf = np.cumsum(probs, axis=1)
        # guard against the last cdf entry rounding below u
        data[:, i] = np.minimum((u >= cdf).sum(axis=1), s.cards[i] - 1)
    return data


def mask_cells(data: np.ndarray, f: float, rng: np.random.Generator) -> np.ndarray:
    """Keep each cell independently with probability ``f``."""
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"retention fraction must be in [0, 1], got {f}")
    keep = rng.random(data.shape) < f
    return np.where(keep, data, MISSING)


def mask_pattern(data: np.ndarray, keep, structure: Structure | None = None) -> np.ndarray:
    """Hide every column not in ``keep`` (ids need ``structure`` to resolve)."""
    n = data.shape[1]
    cols = set()
    for k in keep:
        if isinstance(k, str):
            if structure is None:
                raise KeyError(f"cannot resolve node id {k!r} without a structure")
            cols.add(structure.index(k))
        else:
            if not 0 <= int(k) < n:
                raise KeyError(f"unknown node index {k}")
            cols.add(int(k))
    out = np.full_like(data, MISSING)
    idx = sorted(cols)
    out[:, idx] = data[:, idx]
    return out


def validate_dataset(structure: Structure, data: np.ndarray) -> None:
    if data.ndim != 2 or data.shape[1] != structure.n_nodes:
        raise DataFormatError(
            f"dataset must have {structure.n_nodes} columns, got shape {data.shape}"
        )
    cards = np.asarray(structure.cards)
    bad = (data != MISSING) & ((data < 0) | (data >= cards))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DataFormatError(
            f"row {r}: value {data[r, c]} outside domain of {structure.ids[c]}"
        )


# --- files -------------------------------------------------------------------


def _parse_network(doc: dict, source: str):
    try:
        nodes = doc["nodes"]
        ids = [str(nd["id"]) for nd in nodes]
        cards = [int(nd["cardinality"]) for nd in nodes]
        edges = [(p, nd["id"]) for nd in nodes for p in nd.get("parents", [])]
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"{source}: malformed network document ({exc})") from exc
    structure = Structure.from_edges(ids, cards, edges)
    cpts = [nd.get("cpt") for nd in nodes]
    if all(c is None for c in cpts):
        return structure
    if any(c is None for c in cpts):
        raise DataFormatError(f"{source}: either every node or no node must carry a cpt")
    theta = np.concatenate([np.asarray(c, dtype=float).ravel() for c in cpts])
    try:
        return BayesNet(structure, theta)
    except ValueError as exc:
        raise DataFormatError(f"{source}: {exc}") from exc


def load_network(path) -> Structure | BayesNet:
    """Read a network JSON file; returns a BayesNet when CPTs are present."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    return _parse_network(doc, str(path))


def builtin_structure(name: str) -> Structure:
    if name not in BUILTIN_STRUCTURES:
        raise KeyError(f"unknown structure {name!r}; choose from {BUILTIN_STRUCTURES}")
    text = resources.files("sobn").joinpath("data", f"{name}.json").read_text()
    return _parse_network(json.loads(text), name)


def save_network(net, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=2) + "\n")


def load_dataset(path, structure: Structure) -> np.ndarray:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if [h.strip() for h in header] != list(structure.ids):
            raise DataFormatError(
                f"{path}:1: header {header} does not match node ids {list(structure.ids)}"
            )
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != structure.n_nodes:
                raise DataFormatError(f"{path}:{lineno}: expected {structure.n_nodes} fields")
            try:
                rows.append([MISSING if v.strip() == "?" else int(v) for v in rec])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
    data = np.array(rows, dtype=int).reshape(-1, structure.n_nodes)
    validate_dataset(structure, data)
    return data


def save_dataset(data: np.ndarray, structure: Structure, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(structure.ids)
        for row in data:
            w.writerow(["?" if v == MISSING else int(v) for v in row])
