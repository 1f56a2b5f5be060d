"""Graph ingestion, convolution kernels, anchor handling and synthetic generators."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DimensionError, ModeError, ParseError, UnknownIdError, ValidationError
from .tensor import SparseMatrix

log = logging.getLogger(__name__)

__all__ = [
    "Graph",
    "ConvKernel",
    "AnchorSet",
    "load_edge_list",
    "load_anchors",
    "write_anchors",
    "load_layout",
    "build_sym_kernel",
    "build_directed_kernels",
    "build_kernel",
    "split_anchors",
    "twinning_generate",
    "karate_fixture",
    "synthetic_digraph",
    "perturbed_pair",
]


@dataclass(frozen=True)
class Graph:
    """Vertex vocabulary plus binary adjacency without self-loops."""

    ids: tuple
    adjacency: SparseMatrix
    directed: bool
    self_loops_dropped: int = 0
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {v: i for i, v in enumerate(self.ids)})

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def num_edges(self) -> int:
        """Stored arcs for digraphs, unordered edges for undirected graphs."""
        nnz = self.adjacency.nnz
        return nnz if self.directed else nnz // 2

    @classmethod
    def from_edges(cls, n: int, edges, directed: bool, ids=None) -> "Graph":
        """Build from integer ``(src, dst)`` pairs; self-loops and duplicates are dropped."""
        e = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise ValidationError(f"edge endpoint out of range for {n} vertices")
        loops = e[:, 0] == e[:, 1]
        e = e[~loops]
        if not directed:
            e = np.concatenate([e, e[:, ::-1]], axis=0)
        if e.size:
            e = np.unique(e, axis=0)
        adj = SparseMatrix.from_coo(n, n, e[:, 0], e[:, 1], np.ones(e.shape[0]))
        ids = tuple(range(n)) if ids is None else tuple(ids)
        return cls(ids, adj, directed, int(loops.sum()))

    def edges(self) -> np.ndarray:
        """All stored arcs as an ``m x 2`` array (both orientations if undirected)."""
        a = self.adjacency
        src = np.repeat(np.arange(a.rows), np.diff(a.indptr))
        return np.stack([src, a.indices], axis=1)

    def out_degree(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr).astype(np.float64)

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.adjacency.indices, minlength=self.n).astype(np.float64)

    def degree(self) -> np.ndarray:
        if self.directed:
            return self.out_degree() + self.in_degree()
        return self.out_degree()

    def to_undirected(self) -> "Graph":
        if not self.directed:
            return self
        return Graph.from_edges(self.n, self.edges(), directed=False, ids=self.ids)

    def reversed(self) -> "Graph":
        e = self.edges()
        return Graph.from_edges(self.n, e[:, ::-1], directed=self.directed, ids=self.ids)

    def write_edge_list(self, path):
        """Write one ``src<TAB>dst`` line per arc (each undirected edge once)."""
        e = self.edges()
        if not self.directed:
            e = e[e[:, 0] < e[:, 1]]
        with open(path, "w", encoding="utf-8") as fh:
            for s, d in e:
                fh.write(f"{self.ids[s]}\t{self.ids[d]}\n")


@dataclass(frozen=True)
class ConvKernel:
    forward: SparseMatrix
    reverse: SparseMatrix | None = None

    @property
    def n(self) -> int:
        return self.forward.rows

    @property
    def directed(self) -> bool:
        return self.reverse is not None


@dataclass(frozen=True)
class AnchorSet:
    train: list
    test: list
    seed: int
    ratio: float


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split()


def load_edge_list(path, directed: bool) -> Graph:
    """Read a whitespace/tab separated edge list.

    Vertex indices follow first appearance in the file. Self-loop lines are
    dropped and counted in ``Graph.self_loops_dropped``.
    """
    index: dict[str, int] = {}
    ids: list[str] = []
    pairs = []
    for lineno, fields in _data_lines(path):
        if len(fields) != 2:
            raise ParseError(path, lineno, f"expected 'src<TAB>dst', got {len(fields)} fields")
        ends = []
        for tok in fields:
            if tok not in index:
                index[tok] = len(ids)
                ids.append(tok)
            ends.append(index[tok])
        pairs.append(ends)
    if not ids:
        raise ValidationError(f"{path}: graph has no edges")
    g = Graph.from_edges(len(ids), pairs, directed=directed, ids=ids)
    if g.self_loops_dropped:
        log.warning("%s: dropped %d self-loop lines", path, g.self_loops_dropped)
    return g


def load_anchors(path, ga: Graph, gb: Graph) -> list[tuple[int, int]]:
    pairs = []
    seen_a: dict[int, int] = {}
    seen_b: dict[int, int] = {}
    for lineno, fields in _data_lines(path):
        if len(fields) != 2:
            raise ParseError(path, lineno, f"expected 'idA<TAB>idB', got {len(fields)} fields")
        ida, idb = fields
        if ida not in ga.index:
            raise UnknownIdError(path, lineno, ida, "A")
        if idb not in gb.index:
            raise UnknownIdError(path, lineno, idb, "B")
        i, j = ga.index[ida], gb.index[idb]
        if i in seen_a:
            raise ValidationError(f"{path}:{lineno}: id {ida!r} already anchored on line {seen_a[i]}")
        if j in seen_b:
            raise ValidationError(f"{path}:{lineno}: id {idb!r} already anchored on line {seen_b[j]}")
        seen_a[i] = lineno
        seen_b[j] = lineno
        pairs.append((i, j))
    return pairs


def write_anchors(path, pairs, ga: Graph, gb: Graph):
    with open(path, "w", encoding="utf-8") as fh:
        for i, j in pairs:
            fh.write(f"{ga.ids[i]}\t{gb.ids[j]}\n")


def load_layout(path, g: Graph) -> np.ndarray:
    """Read ``id<TAB>x<TAB>y`` rows into an ``n x 2`` array ordered by ``g``'s indices."""
    out = np.full((g.n, 2), np.nan)
    for lineno, fields in _data_lines(path):
        if len(fields) != 3:
            raise ParseError(path, lineno, "expected 'id<TAB>x<TAB>y'")
        if fields[0] not in g.index:
            raise UnknownIdError(path, lineno, fields[0], "layout")
        try:
            out[g.index[fields[0]]] = [float(fields[1]), float(fields[2])]
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    if np.isnan(out).any():
        raise DimensionError(f"{path}: layout does not cover all {g.n} vertices")
    return out


def build_sym_kernel(g: Graph, renormalized: bool = False) -> ConvKernel:
    """Symmetric kernel ``D^-1/2 (M + I) D^-1/2``.

    ``D`` holds the degrees of ``M`` (without the self-loop) and isolated
    vertices use degree 1. ``renormalized=True`` takes degrees of ``M + I``
    instead.
    """
    if g.directed:
        raise ModeError("build_sym_kernel needs an undirected graph")
    deg = g.out_degree()
    if renormalized:
        deg = deg + 1.0
    deg[deg == 0] = 1.0
    inv_sqrt = 1.0 / np.sqrt(deg)
    m_i = _with_self_loops(g.adjacency)
    rows = np.repeat(np.arange(g.n), np.diff(m_i.indptr))
    data = inv_sqrt[rows] * m_i.data * inv_sqrt[m_i.indices]
    return ConvKernel(SparseMatrix(g.n, g.n, m_i.indptr, m_i.indices, data))


def build_directed_kernels(g: Graph, renormalized: bool = False) -> ConvKernel:
    """Out-neighbour kernel ``D^-1 (M + I)`` and in-neighbour kernel ``D~^-1 (M^T + I)``."""
    if not g.directed:
        raise ModeError("build_directed_kernels needs a directed graph")
    return ConvKernel(
        _row_normalized(g.adjacency, renormalized),
        _row_normalized(g.adjacency.transpose(), renormalized),
    )


def build_kernel(g: Graph, directed: bool, renormalized: bool = False) -> ConvKernel:
    """Kernel for an encoder of the given kind; undirected encoders symmetrize digraphs."""
    if directed:
        return build_directed_kernels(g, renormalized)
    return build_sym_kernel(g.to_undirected(), renormalized)


def _with_self_loops(m: SparseMatrix) -> SparseMatrix:
    n = m.rows
    rows = np.repeat(np.arange(n), np.diff(m.indptr))
    r = np.concatenate([rows, np.arange(n)])
    c = np.concatenate([m.indices, np.arange(n)])
    v = np.concatenate([m.data, np.ones(n)])
    return SparseMatrix.from_coo(n, n, r, c, v)


def _row_normalized(m: SparseMatrix, renormalized: bool) -> SparseMatrix:
    deg = np.diff(m.indptr).astype(np.float64)
    if renormalized:
        deg = deg + 1.0
    deg[deg == 0] = 1.0
    m_i = _with_self_loops(m)
    rows = np.repeat(np.arange(m.rows), np.diff(m_i.indptr))
    return SparseMatrix(m.rows, m.cols, m_i.indptr, m_i.indices, m_i.data / deg[rows])


def split_anchors(pairs, ratio: float, seed: int) -> AnchorSet:
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"train ratio must lie in (0, 1), got {ratio}")
    pairs = [tuple(map(int, p)) for p in pairs]
    if len(pairs) < 2:
        raise ValidationError("need at least 2 anchor pairs to split")
    order = np.random.default_rng(seed).permutation(len(pairs))
    cut = int(np.floor(ratio * len(pairs)))
    if cut == 0 or cut == len(pairs):
        raise ValidationError(f"ratio {ratio} on {len(pairs)} pairs leaves an empty split")
    shuffled = [pairs[i] for i in order]
    return AnchorSet(shuffled[:cut], shuffled[cut:], seed, ratio)


def twinning_generate(g: Graph, layout):
    """Mirror twin of ``g``: identical edges, x coordinate negated.

    Returns ``(graph_a, graph_b, anchors, h0_a, h0_b)`` with every vertex
    anchored to its own copy.
    """
    if g.directed:
        raise ModeError("twinning networks are built from an undirected graph")
    layout = np.asarray(layout, dtype=np.float64)
    if layout.shape != (g.n, 2):
        raise DimensionError(f"layout shape {layout.shape} does not match ({g.n}, 2)")
    ga = g
    gb = Graph(g.ids, g.adjacency, False)
    h0a = layout.copy()
    h0b = layout.copy()
    h0b[:, 0] = -h0b[:, 0]
    anchors = [(i, i) for i in range(g.n)]
    return ga, gb, anchors, h0a, h0b


def karate_fixture() -> tuple[Graph, np.ndarray]:
    """Bundled Zachary karate club graph with a fixed 2-D layout."""
    data = resources.files("dana") / "data"
    with resources.as_file(data / "karate_edges.tsv") as edges_path:
        g = load_edge_list(edges_path, directed=False)
    with resources.as_file(data / "karate_layout.tsv") as layout_path:
        layout = load_layout(layout_path, g)
    return g, layout


def synthetic_digraph(n: int = 200, seed: int = 0, out_degree: int = 4, reciprocity: float = 0.1,
                      communities: int = 5, p_in: float = 0.8) -> Graph:
    """Sparse directed test graph with community structure and asymmetric arcs.

    Vertices sit on an ordering within ``communities`` groups; each vertex
    links mostly forward inside its group (probability ``p_in``), otherwise
    to a random vertex. A fraction ``reciprocity`` of arcs is mirrored.
    """
    rng = np.random.default_rng(seed)
    group = np.arange(n) % communities
    members = [np.flatnonzero(group == c) for c in range(communities)]
    arcs = set()
    for u in range(n):
        same = members[group[u]]
        for _ in range(out_degree):
            if rng.random() < p_in:
                pos = np.searchsorted(same, u)
                step = 1 + rng.geometric(0.35)
                v = int(same[(pos + step) % len(same)])
            else:
                v = int(rng.integers(n))
            if v != u:
                arcs.add((u, v))
                if rng.random() < reciprocity:
                    arcs.add((v, u))
    return Graph.from_edges(n, sorted(arcs), directed=True)


def perturbed_pair(g: Graph, drop: float = 0.15, seed: int = 0) -> tuple[Graph, Graph, list]:
    """Two independent edge-deleted copies of ``g`` anchored vertex-to-vertex."""
    rng = np.random.default_rng(seed)
    e = g.edges()
    if not g.directed:
        e = e[e[:, 0] < e[:, 1]]
    out = []
    for _ in range(2):
        keep = rng.random(e.shape[0]) >= drop
        out.append(Graph.from_edges(g.n, e[keep], directed=g.directed, ids=g.ids))
    return out[0], out[1], [(i, i) for i in range(g.n)]
