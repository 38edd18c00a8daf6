"""Undirected graph topology with a fixed stored orientation per edge."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Graph:
    """Undirected graph stored as an oriented edge list.

    Each undirected edge appears exactly once as ``(src, dst)``. ``eps`` is the
    degree-smoothing constant used by :func:`edge_norm_weights`.
    """

    num_nodes: int
    edges: np.ndarray  # (E, 2) int64
    eps: float = 0.0
    degrees: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = int(self.num_nodes)
        if n < 1:
            raise GraphError(f"num_nodes must be positive, got {n}")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.eps < 0:
            raise GraphError("eps must be nonnegative")
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise GraphError("edge index out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                bad = int(np.flatnonzero(edges[:, 0] == edges[:, 1])[0])
                raise GraphError(f"self-loop at node {edges[bad, 0]}")
            key = np.sort(edges, axis=1)
            if len(np.unique(key, axis=0)) != len(key):
                raise GraphError("duplicate undirected edge")
        edges.setflags(write=False)
        deg = np.bincount(edges.ravel(), minlength=n).astype(np.int64)
        deg.setflags(write=False)
        object.__setattr__(self, "num_nodes", n)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "degrees", deg)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def src(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def dst(self) -> np.ndarray:
        return self.edges[:, 1]

    @classmethod
    def from_pairs(cls, num_nodes, pairs, eps=0.0) -> "Graph":
        """Build from possibly repeated (src, dst) pairs; keeps first orientation."""
        seen = set()
        kept = []
        for u, v in pairs:
            u, v = int(u), int(v)
            if u == v:
                raise GraphError(f"self-loop at node {u}")
            key = (min(u, v), max(u, v))
            if key in seen:
                continue
            seen.add(key)
            kept.append((u, v))
        return cls(num_nodes, np.array(kept, dtype=np.int64).reshape(-1, 2), eps)

    def with_eps(self, eps: float) -> "Graph":
        return Graph(self.num_nodes, self.edges, eps)

    def permuted(self, perm) -> "Graph":
        """Relabel node ``i`` as ``perm[i]``, keeping edge order and orientation."""
        perm = np.asarray(perm, dtype=np.int64)
        return Graph(self.num_nodes, perm[self.edges], self.eps)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        a[self.src, self.dst] = 1.0
        a[self.dst, self.src] = 1.0
        return a

    def is_connected(self) -> bool:
        parent = list(range(self.num_nodes))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for u, v in self.edges:
            parent[find(u)] = find(v)
        return len({find(i) for i in range(self.num_nodes)}) == 1

    def neighbors(self, u: int) -> np.ndarray:
        out = np.concatenate([self.dst[self.src == u], self.src[self.dst == u]])
        return np.sort(out)


def load_edge_list(path, num_nodes: int, eps: float = 0.0) -> Graph:
    """Read a ``src,dst[,weight]`` CSV. Weights are parsed and discarded."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"edge list not found: {path}")
    pairs = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            cells = [c.strip() for c in line.split(",")]
            if lineno == 1 and cells[:2] == ["src", "dst"]:
                continue
            if len(cells) not in (2, 3):
                raise GraphError(f"{path}:{lineno}: expected 'src,dst[,weight]', got {line!r}")
            try:
                u, v = int(cells[0]), int(cells[1])
                if len(cells) == 3:
                    float(cells[2])
            except ValueError:
                raise GraphError(f"{path}:{lineno}: malformed line {line!r}") from None
            if not (0 <= u < num_nodes and 0 <= v < num_nodes):
                raise GraphError(f"{path}:{lineno}: node index out of range for N={num_nodes}")
            if u == v:
                raise GraphError(f"{path}:{lineno}: self-loop at node {u}")
            pairs.append((u, v))
    return Graph.from_pairs(num_nodes, pairs, eps)


def save_edge_list(g: Graph, path) -> None:
    with Path(path).open("w") as fh:
        fh.write("src,dst\n")
        for u, v in g.edges:
            fh.write(f"{u},{v}\n")


def edge_norm_weights(g: Graph) -> np.ndarray:
    """w_e = ((deg(u)+eps)(deg(v)+eps))^(-1/2) for each stored edge."""
    deg = g.degrees.astype(float) + g.eps
    return 1.0 / np.sqrt(deg[g.src] * deg[g.dst])


def watts_strogatz(num_nodes=30, k=4, p=0.2, seed=0, eps=0.0) -> Graph:
    """Connected small-world ring; ``k`` is the total ring degree before rewiring."""
    import networkx as nx

    nxg = nx.connected_watts_strogatz_graph(num_nodes, k, p, tries=1000, seed=seed)
    return Graph.from_pairs(num_nodes, sorted(nxg.edges()), eps)


def path_graph(n: int) -> Graph:
    return Graph(n, np.array([(i, i + 1) for i in range(n - 1)]).reshape(-1, 2))


def cycle_graph(n: int) -> Graph:
    return Graph(n, np.array([(i, (i + 1) % n) for i in range(n)]))


def complete_graph(n: int) -> Graph:
    return Graph(n, np.array([(i, j) for i in range(n) for j in range(i + 1, n)]).reshape(-1, 2))
