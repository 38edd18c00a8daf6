"""Spectrum of the sheaf Laplacian, gradient-flow diffusion and oversmoothing."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import Graph
from .sheaf import (
    DENSE_CAP,
    RANK_TOL,
    DenseCapError,
    Sheaf,
    _check_signal,
    assemble_dense_laplacian,
    sheaf_energy,
    sheaf_laplacian_apply,
)

DENSE_DEFAULT_LIMIT = 1024


class ConvergenceError(RuntimeError):
    def __init__(self, msg, estimate=None, iterate=None):
        super().__init__(msg)
        self.estimate = estimate
        self.iterate = iterate


@dataclass(frozen=True)
class SpectrumReport:
    lambda_max: float
    lambda_min_pos: float | None
    kernel_dim: int | None
    stable_step_bound: float
    method: str = "dense"

    def to_json(self) -> dict:
        return {
            "lambda_max": self.lambda_max,
            "lambda_min_pos": self.lambda_min_pos,
            "kernel_dim": self.kernel_dim,
            "stable_step_bound": self.stable_step_bound,
            "method": self.method,
        }


def _step_bound(lmax: float) -> float:
    return 2.0 / lmax if lmax > 0 else float("inf")


def _dense_report(s: Sheaf, w, rank_tol: float, cap: int) -> SpectrumReport:
    evals = np.linalg.eigvalsh(assemble_dense_laplacian(s, w, cap=cap))
    lmax = max(float(evals[-1]), 0.0)
    positive = evals[evals > rank_tol * lmax] if lmax > 0 else evals[:0]
    lmin = float(positive[0]) if positive.size else 0.0
    return SpectrumReport(lmax, lmin, int(s.size - positive.size), _step_bound(lmax), "dense")


def power_lambda_max(s: Sheaf, w=None, tol=1e-8, max_iter=10_000, seed=0) -> float:
    """Largest eigenvalue by matrix-free power iteration with Rayleigh quotients."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(s.graph.num_nodes, s.stalk_dim))
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = sheaf_laplacian_apply(s, x, w)
        lam_new = float(np.sum(x * y))
        norm = np.linalg.norm(y)
        if norm == 0.0:
            # x landed in the kernel; L may still be nonzero elsewhere
            if not np.any(s.r_src) and not np.any(s.r_dst):
                return 0.0
            x = rng.normal(size=x.shape)
            x /= np.linalg.norm(x)
            continue
        x = y / norm
        if lam_new > 0 and abs(lam_new - lam) <= tol * lam_new:
            return lam_new
        lam = lam_new
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations", estimate=lam, iterate=x
    )


def spectrum(
    s: Sheaf,
    w=None,
    method: str = "auto",
    rank_tol: float = RANK_TOL,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    cap: int = DENSE_CAP,
    seed: int = 0,
) -> SpectrumReport:
    """Spectral summary of L.

    ``method="power"`` finds lambda_max matrix-free; lambda_min_pos and the
    kernel dimension come from the dense eigensolve when ``N*d <= cap`` and are
    ``None`` otherwise. ``"auto"`` picks dense up to N*d = 1024.
    """
    if method == "auto":
        method = "dense" if s.size <= DENSE_DEFAULT_LIMIT else "power"
    if method == "dense":
        return _dense_report(s, w, rank_tol, cap)
    if method != "power":
        raise ValueError(f"unknown spectrum method {method!r}")
    lmax = power_lambda_max(s, w, tol=tol, max_iter=max_iter, seed=seed)
    if s.size <= cap:
        dense = _dense_report(s, w, rank_tol, cap)
        return SpectrumReport(lmax, dense.lambda_min_pos, dense.kernel_dim, _step_bound(lmax), "power")
    return SpectrumReport(lmax, None, None, _step_bound(lmax), "power")


def oversmoothing_metric(g: Graph, h) -> float:
    """Mean Euclidean distance between representations of connected nodes."""
    if g.num_edges == 0:
        raise ValueError("oversmoothing metric needs at least one edge")
    h = np.asarray(h, dtype=float)
    return float(np.mean(np.linalg.norm(h[g.src] - h[g.dst], axis=1)))


@dataclass
class DiffusionTrace:
    states: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    pair_distances: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "energy", "pair_distance"])
            for i, (e, p) in enumerate(zip(self.energies, self.pair_distances)):
                writer.writerow([i, repr(e), repr(p)])

    def write_states_json(self, path) -> None:
        Path(path).write_text(json.dumps([np.asarray(x).tolist() for x in self.states]))


def diffuse_flow(s: Sheaf, w, h0, step: float, steps: int) -> DiffusionTrace:
    """Discrete gradient flow h <- h - step * L h, recorded at every step."""
    h = _check_signal(s, h0).copy()
    trace = DiffusionTrace()
    for i in range(steps + 1):
        if i:
            h = h - step * sheaf_laplacian_apply(s, h, w)
        trace.states.append(h)
        trace.energies.append(sheaf_energy(s, h, w))
        trace.pair_distances.append(oversmoothing_metric(s.graph, h))
    return trace


def gcn_diffuse_step(g: Graph, h) -> np.ndarray:
    """One step of self-loop symmetric-normalized propagation."""
    h = np.asarray(h, dtype=float)
    deg = g.degrees.astype(float) + 1.0
    coef = 1.0 / np.sqrt(deg[g.src] * deg[g.dst])
    out = h / deg.reshape((-1,) + (1,) * (h.ndim - 1))
    coef = coef.reshape((-1,) + (1,) * (h.ndim - 1))
    np.add.at(out, g.src, coef * h[g.dst])
    np.add.at(out, g.dst, coef * h[g.src])
    return out


def gcn_propagation_matrix(g: Graph) -> np.ndarray:
    a = g.adjacency() + np.eye(g.num_nodes)
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return dinv[:, None] * a * dinv[None, :]


__all__ = [
    "ConvergenceError",
    "DenseCapError",
    "DiffusionTrace",
    "SpectrumReport",
    "diffuse_flow",
    "gcn_diffuse_step",
    "gcn_propagation_matrix",
    "oversmoothing_metric",
    "power_lambda_max",
    "spectrum",
]
