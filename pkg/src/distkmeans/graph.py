"""Undirected communication graphs and the cluster subgraphs induced on them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class Graph:
    """Simple undirected graph on vertices ``0..vertex_count-1``.

    ``edges`` is an ``(m, 2)`` integer array with ``i < j`` on each row,
    sorted lexicographically, so two graphs with the same edge set compare
    and serialize identically.
    """

    vertex_count: int
    edges: np.ndarray
    neighborhoods: tuple[tuple[int, ...], ...] = field(repr=False)

    @classmethod
    def from_edges(cls, vertex_count: int, edges: Iterable[tuple[int, int]]) -> Graph:
        if vertex_count < 1:
            raise InputError("a graph needs at least one vertex")
        pairs = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if i == j:
                raise InputError(f"self-loop on vertex {i}")
            if not (0 <= i < vertex_count and 0 <= j < vertex_count):
                raise InputError(f"edge ({i}, {j}) outside 0..{vertex_count - 1}")
            pairs.add((min(i, j), max(i, j)))
        arr = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
        return cls(vertex_count, arr, _neighborhoods(vertex_count, arr))

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self.neighborhoods[i]

    def has_edge(self, i: int, j: int) -> bool:
        return j in self.neighborhoods[i]

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((self.vertex_count, self.vertex_count))
        a[self.edges[:, 0], self.edges[:, 1]] = 1.0
        a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def degrees(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighborhoods], dtype=np.int64)

    def to_edge_list(self) -> str:
        """Edge-list text, one ``i j`` pair per line, sorted."""
        return "".join(f"{i} {j}\n" for i, j in self.edges)

    @classmethod
    def from_edge_list(cls, vertex_count: int, text: str) -> Graph:
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise InputError(f"edge list line {lineno}: expected 'i j', got {line!r}")
            pairs.append((int(parts[0]), int(parts[1])))
        return cls.from_edges(vertex_count, pairs)


@dataclass(frozen=True)
class ClusterGraph:
    """Edge-masked view of a base graph.

    Only edges whose endpoints made the same centroid choice are kept; the
    base topology stays reachable through ``base`` for the global phases.
    """

    base: Graph
    mask: np.ndarray
    neighborhoods: tuple[tuple[int, ...], ...] = field(repr=False)

    @property
    def vertex_count(self) -> int:
        return self.base.vertex_count

    @property
    def edges(self) -> np.ndarray:
        return self.base.edges[self.mask]

    @property
    def edge_count(self) -> int:
        return int(self.mask.sum())

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self.neighborhoods[i]

    def has_edge(self, i: int, j: int) -> bool:
        return j in self.neighborhoods[i]

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((self.vertex_count, self.vertex_count))
        e = self.edges
        a[e[:, 0], e[:, 1]] = 1.0
        a[e[:, 1], e[:, 0]] = 1.0
        return a

    def degrees(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighborhoods], dtype=np.int64)


AnyGraph = Graph | ClusterGraph


def _neighborhoods(n: int, edges: np.ndarray) -> tuple[tuple[int, ...], ...]:
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for i, j in edges:
        nbrs[i].append(int(j))
        nbrs[j].append(int(i))
    return tuple(tuple(sorted(nb)) for nb in nbrs)


def unit_disk(positions: Sequence[Sequence[float]] | np.ndarray, rho: float) -> Graph:
    """Connect every pair of points strictly closer than ``rho``."""
    if rho < 0:
        raise InputError("rho must be nonnegative")
    try:
        pts = np.asarray(positions, dtype=float)
    except ValueError as exc:
        raise InputError("all points must share the same dimension") from exc
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    if pts.ndim != 2 or len(pts) == 0:
        raise InputError("positions must be a non-empty list of equal-length points")
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    i, j = np.nonzero(np.triu(dist < rho, k=1))
    return Graph.from_edges(len(pts), zip(i.tolist(), j.tolist()))


def induce_cluster_graph(g: Graph, choices: Sequence[int] | np.ndarray) -> ClusterGraph:
    choices = np.asarray(choices)
    if choices.shape != (g.vertex_count,):
        raise InputError("one choice per vertex is required")
    e = g.edges
    mask = choices[e[:, 0]] == choices[e[:, 1]] if len(e) else np.zeros(0, dtype=bool)
    return ClusterGraph(g, mask, _neighborhoods(g.vertex_count, e[mask]))


def is_connected(g: AnyGraph) -> bool:
    seen = _reach(g, 0)
    return len(seen) == g.vertex_count


def _reach(g: AnyGraph, start: int) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        v = stack.pop()
        for u in g.neighbors(v):
            if u not in seen:
                seen.add(u)
                stack.append(u)
    return seen


def connected_components(g: AnyGraph) -> list[list[int]]:
    """Vertex partition into components, each sorted, ordered by smallest member."""
    remaining = set(range(g.vertex_count))
    parts = []
    for v in range(g.vertex_count):
        if v in remaining:
            comp = _reach(g, v)
            remaining -= comp
            parts.append(sorted(comp))
    return parts


def component_labels(g: AnyGraph) -> np.ndarray:
    labels = np.empty(g.vertex_count, dtype=np.int64)
    for c, part in enumerate(connected_components(g)):
        labels[part] = c
    return labels
