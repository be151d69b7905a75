"""Sensor graphs and their regional hierarchy.

The regional level groups sensors by vertex-biconnected component.  A cut
vertex sits in every component that contains it, so the original->regional
mapping is a soft assignment with column sums of one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class DegenerateKernelError(ValueError):
    """All distances are identical, so the Gaussian kernel width is zero."""


class HierarchyError(ValueError):
    """The decomposition cannot produce a valid mapping."""


@dataclass
class SensorGraph:
    node_ids: list[str]
    adjacency: np.ndarray

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        n = len(self.node_ids)
        if self.adjacency.shape != (n, n):
            raise ValueError(f"adjacency shape {self.adjacency.shape} does not match {n} node ids")

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        rows, cols = np.nonzero(self.adjacency)
        return [(int(i), int(j), float(self.adjacency[i, j])) for i, j in zip(rows, cols)]

    def neighbors(self) -> list[list[int]]:
        """Undirected neighbor lists: an edge exists if either direction has weight > 0."""
        a = self.adjacency
        und = (a > 0) | (a.T > 0)
        np.fill_diagonal(und, False)
        return [np.flatnonzero(row).tolist() for row in und]

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]], node_ids: Optional[Sequence[str]] = None):
        a = np.zeros((n, n))
        for i, j in edges:
            a[i, j] = a[j, i] = 1.0
        ids = list(node_ids) if node_ids is not None else [str(i) for i in range(n)]
        return cls(ids, a)


def build_adjacency(
    distances: Iterable[tuple],
    threshold: float = 0.1,
    node_ids: Optional[Sequence[str]] = None,
) -> SensorGraph:
    """Thresholded Gaussian kernel over pairwise road distances.

    ``w_ij = exp(-d_ij^2 / sigma^2)`` with ``sigma`` the standard deviation of
    every supplied distance.  Weights below ``threshold`` are dropped, the
    result is symmetrized with ``max(w_ij, w_ji)`` and the diagonal cleared.
    Pairs that are not listed get no edge.
    """
    rows = [(str(i), str(j), float(d)) for i, j, d in distances]
    if not rows:
        raise ValueError("no distances supplied")
    if any(d < 0 or not np.isfinite(d) for _, _, d in rows):
        raise ValueError("distances must be finite and nonnegative")
    if node_ids is None:
        seen: dict[str, None] = {}
        for i, j, _ in rows:
            seen.setdefault(i)
            seen.setdefault(j)
        node_ids = list(seen)
    ids = [str(x) for x in node_ids]
    index = {nid: k for k, nid in enumerate(ids)}

    d = np.array([r[2] for r in rows])
    sigma = d.std()
    if sigma == 0:
        raise DegenerateKernelError("all distances are identical; kernel width would be zero")
    a = np.zeros((len(ids), len(ids)))
    for (i, j, _), w in zip(rows, np.exp(-np.square(d / sigma))):
        if i not in index or j not in index:
            continue
        if w >= threshold:
            a[index[i], index[j]] = max(a[index[i], index[j]], w)
    a = np.maximum(a, a.T)
    np.fill_diagonal(a, 0.0)
    return SensorGraph(ids, a)


@dataclass(frozen=True)
class BccDecomposition:
    components: tuple[frozenset[int], ...]
    cut_vertices: frozenset[int]

    @property
    def num_components(self) -> int:
        return len(self.components)

    def membership(self, node: int) -> list[int]:
        return [k for k, c in enumerate(self.components) if node in c]


def tarjan_bcc(graph: SensorGraph | Sequence[Sequence[int]]) -> BccDecomposition:
    """Vertex-biconnected components and cut vertices in O(|V| + |E|).

    Accepts a :class:`SensorGraph` (any positive weight in either direction is
    an edge) or plain neighbor lists.  Uses an explicit DFS stack and an edge
    stack; each edge lands in exactly one component.  Isolated nodes become
    singleton components.  Components are ordered by their smallest node.
    """
    adj = graph.neighbors() if isinstance(graph, SensorGraph) else [list(a) for a in graph]
    n = len(adj)
    disc = [-1] * n
    low = [0] * n
    clock = 0
    components: list[frozenset[int]] = []
    cuts: set[int] = set()

    for root in range(n):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = clock
        clock += 1
        if not adj[root]:
            components.append(frozenset((root,)))
            continue
        root_children = 0
        edge_stack: list[tuple[int, int]] = []
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            u, parent, it = stack[-1]
            descended = False
            for v in it:
                if disc[v] == -1:
                    edge_stack.append((u, v))
                    disc[v] = low[v] = clock
                    clock += 1
                    stack.append((v, u, iter(adj[v])))
                    descended = True
                    break
                if v != parent and disc[v] < disc[u]:
                    edge_stack.append((u, v))
                    if disc[v] < low[u]:
                        low[u] = disc[v]
            if descended:
                continue
            stack.pop()
            if not stack:
                break
            p = stack[-1][0]
            if low[u] < low[p]:
                low[p] = low[u]
            if low[u] >= disc[p]:
                comp: set[int] = set()
                while True:
                    a, b = edge_stack.pop()
                    comp.add(a)
                    comp.add(b)
                    if (a, b) == (p, u):
                        break
                components.append(frozenset(comp))
                if p == root:
                    root_children += 1
                else:
                    cuts.add(p)
        if root_children > 1:
            cuts.add(root)

    components.sort(key=lambda c: sorted(c))
    return BccDecomposition(tuple(components), frozenset(cuts))


def build_mor(decomp: BccDecomposition, num_nodes: int) -> np.ndarray:
    """Original->regional mapping ``M_or`` (num_nodes x num_components).

    Membership is binary, cut vertices belong to every component containing
    them, and each column is divided by its sum.
    """
    m = np.zeros((num_nodes, decomp.num_components))
    for j, comp in enumerate(decomp.components):
        if not comp:
            raise HierarchyError(f"component {j} is empty")
        for i in comp:
            if not 0 <= i < num_nodes:
                raise HierarchyError(f"component {j} references node {i} outside 0..{num_nodes - 1}")
            m[i, j] = 1.0
    uncovered = np.flatnonzero(m.sum(axis=1) == 0)
    if uncovered.size:
        raise HierarchyError(f"nodes {uncovered.tolist()} are not in any component")
    return m / m.sum(axis=0, keepdims=True)


def regional_adjacency(adjacency: np.ndarray, m_or: np.ndarray) -> np.ndarray:
    """``A_r = M_or^T A_o M_or``."""
    adjacency = np.asarray(adjacency, dtype=np.float64)
    if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1] or adjacency.shape[0] != m_or.shape[0]:
        raise ValueError(f"regional_adjacency: A_o {adjacency.shape} does not conform to M_or {m_or.shape}")
    return m_or.T @ adjacency @ m_or


@dataclass
class Hierarchy:
    """Fixed part of the hierarchy: sensor graph, its BCCs, ``M_or`` and ``A_r``."""

    graph: SensorGraph
    decomposition: BccDecomposition
    m_or: np.ndarray
    a_r: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def num_regions(self) -> int:
        return self.m_or.shape[1]

    @property
    def cut_vertex_ids(self) -> list[str]:
        return [self.graph.node_ids[i] for i in sorted(self.decomposition.cut_vertices)]

    def summary(self) -> str:
        return f"N_o={self.num_nodes} N_r={self.num_regions} cut={len(self.decomposition.cut_vertices)}"


def build_hierarchy(graph: SensorGraph) -> Hierarchy:
    decomp = tarjan_bcc(graph)
    m_or = build_mor(decomp, graph.num_nodes)
    hier = Hierarchy(graph, decomp, m_or, regional_adjacency(graph.adjacency, m_or))
    logger.info("built hierarchy: %s", hier.summary())
    return hier


def write_mapping(path: str | Path, hier: Hierarchy) -> None:
    """Text mapping file: ``N_o N_r`` then one ``node_id region_index weight`` line per positive entry."""
    lines = [f"{hier.num_nodes} {hier.num_regions}"]
    for i, nid in enumerate(hier.graph.node_ids):
        for j in np.flatnonzero(hier.m_or[i]):
            lines.append(f"{nid} {j} {float(hier.m_or[i, j])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_mapping(path: str | Path) -> tuple[list[str], np.ndarray]:
    text = Path(path).read_text().split("\n")
    n_o, n_r = (int(x) for x in text[0].split())
    ids: dict[str, int] = {}
    entries = []
    for line in text[1:]:
        if not line.strip():
            continue
        nid, j, w = line.split()
        ids.setdefault(nid, len(ids))
        entries.append((ids[nid], int(j), float(w)))
    if len(ids) != n_o:
        raise HierarchyError(f"mapping header says {n_o} nodes, found {len(ids)}")
    m = np.zeros((n_o, n_r))
    for i, j, w in entries:
        m[i, j] = w
    return list(ids), m


def write_summary(path: str | Path, hier: Hierarchy) -> None:
    cuts = hier.cut_vertex_ids
    Path(path).write_text(
        f"components {hier.num_regions}\n"
        f"nodes {hier.num_nodes}\n"
        f"cut_vertices {len(cuts)}\n"
        + "".join(f"cut {c}\n" for c in cuts)
    )
