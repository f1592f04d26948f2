"""Medication co-occurrence graph and induced-subgraph queries."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cohort import IndexedPatient


@dataclass(frozen=True)
class EhrGraph:
    """Symmetric, zero-diagonal boolean adjacency over the medication vocab."""

    n: int
    adjacency: np.ndarray

    def __post_init__(self) -> None:
        adj = self.adjacency
        if adj.shape != (self.n, self.n):
            raise ValueError(f"adjacency shape {adj.shape} does not match n={self.n}")
        if adj.dtype != np.bool_:
            raise ValueError("adjacency must be boolean")
        if not np.array_equal(adj, adj.T):
            raise ValueError("adjacency must be symmetric")
        if adj.diagonal().any():
            raise ValueError("adjacency diagonal must be zero")


@dataclass(frozen=True)
class SubGraph:
    """Induced subgraph; node ids sorted ascending, isolated nodes retained."""

    nodes: tuple[int, ...]
    adjacency: np.ndarray

    def __post_init__(self) -> None:
        if list(self.nodes) != sorted(set(self.nodes)):
            raise ValueError("subgraph nodes must be ascending and duplicate-free")
        k = len(self.nodes)
        if self.adjacency.shape != (k, k):
            raise ValueError("subgraph adjacency shape does not match node count")

    def position(self, node: int) -> int:
        try:
            return self.nodes.index(node)
        except ValueError:
            raise ValueError(f"node {node} not in subgraph") from None


def build_cooccurrence_graph(
    train_records: Sequence[IndexedPatient], n: int
) -> EhrGraph:
    """Link two medications iff some visit's union medication set holds both."""
    adj = np.zeros((n, n), dtype=np.bool_)
    for rec in train_records:
        for visit in rec.visits:
            meds = visit.med_union
            if meds and (meds[0] < 0 or meds[-1] >= n):
                raise ValueError(f"medication indices {meds} out of range for n={n}")
            for a_pos, i in enumerate(meds):
                for j in meds[a_pos + 1 :]:
                    adj[i, j] = True
                    adj[j, i] = True
    return EhrGraph(n=n, adjacency=adj)


def subgraph(graph: EhrGraph, med_set: Iterable[int]) -> SubGraph:
    nodes = sorted(set(med_set))
    if not nodes:
        raise ValueError("cannot take the subgraph of an empty medication set")
    if nodes[0] < 0 or nodes[-1] >= graph.n:
        raise ValueError(f"medication indices {nodes} out of range for n={graph.n}")
    idx = np.asarray(nodes)
    return SubGraph(nodes=tuple(nodes), adjacency=graph.adjacency[np.ix_(idx, idx)])


def unvisited_neighbors(sub: SubGraph, node: int, visited: set[int]) -> list[int]:
    """Neighbors of ``node`` inside ``sub`` not yet visited, ascending."""
    pos = sub.position(node)
    return [
        sub.nodes[j]
        for j in range(len(sub.nodes))
        if sub.adjacency[pos, j] and sub.nodes[j] not in visited
    ]


def connected_components(sub: SubGraph) -> list[set[int]]:
    """Components of the subgraph, as sets of node ids."""
    remaining = set(range(len(sub.nodes)))
    components = []
    while remaining:
        seed = min(remaining)
        stack = [seed]
        comp = {seed}
        remaining.discard(seed)
        while stack:
            cur = stack.pop()
            for j in list(remaining):
                if sub.adjacency[cur, j]:
                    remaining.discard(j)
                    comp.add(j)
                    stack.append(j)
        components.append({sub.nodes[i] for i in comp})
    return components


def save_graph(graph: EhrGraph, path: str | Path) -> None:
    edges = [
        [int(i), int(j)]
        for i in range(graph.n)
        for j in range(i + 1, graph.n)
        if graph.adjacency[i, j]
    ]
    Path(path).write_text(json.dumps({"n": graph.n, "edges": edges}))


def load_graph(path: str | Path) -> EhrGraph:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict) or set(raw) != {"n", "edges"}:
        raise ValueError(f"{path}: graph file must contain exactly n and edges")
    n = int(raw["n"])
    adj = np.zeros((n, n), dtype=np.bool_)
    for edge in raw["edges"]:
        i, j = int(edge[0]), int(edge[1])
        if i == j:
            raise ValueError(f"{path}: self-loop {i} not allowed")
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"{path}: edge ({i},{j}) out of range for n={n}")
        adj[i, j] = True
        adj[j, i] = True
    return EhrGraph(n=n, adjacency=adj)
