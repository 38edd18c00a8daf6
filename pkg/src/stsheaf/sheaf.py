"""Cellular sheaves with diagonal restriction maps and their Laplacians."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Graph

DENSE_CAP = 4096
RANK_TOL = 1e-8


class DenseCapError(ValueError):
    """Raised when a dense Nd x Nd assembly would exceed the size cap."""


@dataclass(frozen=True)
class Sheaf:
    """Diagonal sheaf over ``graph``.

    ``r_src[e]`` is the restriction vector of the stored source endpoint of
    edge ``e``, ``r_dst[e]`` that of the destination. Both are ``(E, d)``.
    """

    graph: Graph
    stalk_dim: int
    r_src: np.ndarray
    r_dst: np.ndarray

    def __post_init__(self):
        shape = (self.graph.num_edges, int(self.stalk_dim))
        r_src = np.asarray(self.r_src, dtype=float).reshape(shape)
        r_dst = np.asarray(self.r_dst, dtype=float).reshape(shape)
        if not (np.all(np.isfinite(r_src)) and np.all(np.isfinite(r_dst))):
            raise ValueError("restriction vectors must be finite")
        object.__setattr__(self, "stalk_dim", int(self.stalk_dim))
        object.__setattr__(self, "r_src", r_src)
        object.__setattr__(self, "r_dst", r_dst)

    @classmethod
    def identity(cls, graph: Graph, stalk_dim: int) -> "Sheaf":
        ones = np.ones((graph.num_edges, stalk_dim))
        return cls(graph, stalk_dim, ones, ones.copy())

    @classmethod
    def random(cls, graph: Graph, stalk_dim: int, rng, low=None, high=None) -> "Sheaf":
        """Gaussian restriction vectors, or uniform on [low, high) when given."""
        shape = (graph.num_edges, stalk_dim)
        if low is None:
            return cls(graph, stalk_dim, rng.normal(size=shape), rng.normal(size=shape))
        return cls(graph, stalk_dim, rng.uniform(low, high, shape), rng.uniform(low, high, shape))

    @property
    def size(self) -> int:
        return self.graph.num_nodes * self.stalk_dim

    def flipped(self, edge_ids) -> "Sheaf":
        """Reverse the stored orientation of the given edges, swapping their maps."""
        edges = self.graph.edges.copy()
        r_src, r_dst = self.r_src.copy(), self.r_dst.copy()
        idx = np.asarray(edge_ids, dtype=np.int64)
        edges[idx] = edges[idx][:, ::-1]
        r_src[idx], r_dst[idx] = self.r_dst[idx], self.r_src[idx]
        g = Graph(self.graph.num_nodes, edges, self.graph.eps)
        return Sheaf(g, self.stalk_dim, r_src, r_dst)

    def to_json(self) -> dict:
        return {"stalk_dim": self.stalk_dim, "r_src": self.r_src.tolist(), "r_dst": self.r_dst.tolist()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def from_json(cls, graph: Graph, doc: dict) -> "Sheaf":
        unknown = set(doc) - {"stalk_dim", "r_src", "r_dst"}
        if unknown:
            raise ValueError(f"unknown sheaf fields: {sorted(unknown)}")
        d = int(doc["stalk_dim"])
        r_src = np.asarray(doc["r_src"], dtype=float)
        r_dst = np.asarray(doc["r_dst"], dtype=float)
        if r_src.shape != (graph.num_edges, d) or r_dst.shape != (graph.num_edges, d):
            raise ValueError(
                f"sheaf arrays must be ({graph.num_edges}, {d}), got {r_src.shape} / {r_dst.shape}"
            )
        return cls(graph, d, r_src, r_dst)

    @classmethod
    def load(cls, graph: Graph, path) -> "Sheaf":
        return cls.from_json(graph, json.loads(Path(path).read_text()))


def _check_signal(s: Sheaf, h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    expected = (s.graph.num_nodes, s.stalk_dim)
    if h.shape != expected:
        raise ValueError(f"signal shape {h.shape} does not match {expected}")
    return h


def _check_weights(s: Sheaf, w) -> np.ndarray:
    if w is None:
        return np.ones(s.graph.num_edges)
    w = np.asarray(w, dtype=float)
    if w.shape != (s.graph.num_edges,):
        raise ValueError(f"expected {s.graph.num_edges} edge weights, got shape {w.shape}")
    return w


def _aligned_disagreement(s: Sheaf, h: np.ndarray) -> np.ndarray:
    # r_u * h_u - r_v * h_v per stored edge (u, v)
    return s.r_src * h[s.graph.src] - s.r_dst * h[s.graph.dst]


def coboundary(s: Sheaf, h) -> np.ndarray:
    """(delta h)_e = r_dst_e * h_v - r_src_e * h_u for e = (u, v)."""
    h = _check_signal(s, h)
    return -_aligned_disagreement(s, h)


def sheaf_laplacian_apply(s: Sheaf, h, w=None) -> np.ndarray:
    """Matrix-free delta^T diag(w) delta h.

    Accumulation uses ``np.add.at`` which processes edges in stored order, so
    the per-node reduction order is fixed.
    """
    h = _check_signal(s, h)
    w = _check_weights(s, w)
    disc = w[:, None] * _aligned_disagreement(s, h)
    out = np.zeros_like(h)
    np.add.at(out, s.graph.src, s.r_src * disc)
    np.add.at(out, s.graph.dst, -s.r_dst * disc)
    return out


def coboundary_matrix(s: Sheaf) -> np.ndarray:
    """Dense (E*d, N*d) coboundary, built entry by entry."""
    n, d, g = s.graph.num_nodes, s.stalk_dim, s.graph
    delta = np.zeros((g.num_edges * d, n * d))
    for e, (u, v) in enumerate(g.edges):
        for k in range(d):
            delta[e * d + k, v * d + k] += s.r_dst[e, k]
            delta[e * d + k, u * d + k] -= s.r_src[e, k]
    return delta


def assemble_dense_laplacian(s: Sheaf, w=None, cap: int = DENSE_CAP) -> np.ndarray:
    """Block-assembled (N*d, N*d) sheaf Laplacian."""
    if s.size > cap:
        raise DenseCapError(f"N*d = {s.size} exceeds dense cap {cap}")
    w = _check_weights(s, w)
    d = s.stalk_dim
    lap = np.zeros((s.size, s.size))
    diag_idx = np.arange(d)
    for e, (u, v) in enumerate(s.graph.edges):
        ru, rv = s.r_src[e], s.r_dst[e]
        bu, bv = u * d + diag_idx, v * d + diag_idx
        lap[bu, bu] += w[e] * ru * ru
        lap[bv, bv] += w[e] * rv * rv
        lap[bu, bv] -= w[e] * ru * rv
        lap[bv, bu] -= w[e] * ru * rv
    return lap


def dirichlet_energy(g: Graph, h) -> float:
    h = np.asarray(h, dtype=float)
    if h.ndim != 2 or h.shape[0] != g.num_nodes:
        raise ValueError(f"signal shape {h.shape} does not match graph with {g.num_nodes} nodes")
    diff = h[g.src] - h[g.dst]
    return 0.5 * float(np.sum(diff * diff))


def sheaf_energy(s: Sheaf, h, w=None) -> float:
    h = _check_signal(s, h)
    w = _check_weights(s, w)
    disc = _aligned_disagreement(s, h)
    return 0.5 * float(np.sum(w * np.sum(disc * disc, axis=1)))


def numerical_rank(mat: np.ndarray, rank_tol: float = RANK_TOL) -> int:
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rank_tol * sv[0]))


def kernel_dimension(s: Sheaf, w=None, rank_tol: float = RANK_TOL, cap: int = DENSE_CAP) -> int:
    """N*d minus the numerical rank of the assembled Laplacian."""
    lap = assemble_dense_laplacian(s, w, cap=cap)
    return s.size - numerical_rank(lap, rank_tol)


def kernel_basis(s: Sheaf, w=None, rank_tol: float = RANK_TOL, cap: int = DENSE_CAP) -> np.ndarray:
    """Orthonormal basis of ker(L) as columns of an (N*d, k) array."""
    lap = assemble_dense_laplacian(s, w, cap=cap)
    _, sv, vt = np.linalg.svd(lap)
    rank = 0 if sv[0] == 0.0 else int(np.sum(sv > rank_tol * sv[0]))
    return vt[rank:].T.copy()
