"""Series files and synthetic spatio-temporal generators."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import Graph


class SeriesFormatError(ValueError):
    pass


@dataclass
class SeriesFile:
    """(T_total, N, F) values; ``mask`` is True where a value was observed.

    Generators also fill ``clean`` with the noise-free signal.
    """

    values: np.ndarray
    mask: np.ndarray | None = None
    clean: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.ndim != 3 or self.values.shape[0] < 1:
            raise SeriesFormatError(f"series must be (T_total, N, F), got {self.values.shape}")
        if self.mask is None:
            self.mask = np.isfinite(self.values)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(self.values.shape)
        self.values = np.where(self.mask, self.values, 0.0)

    @property
    def shape(self):
        return self.values.shape


def load_series_csv(path) -> SeriesFile:
    """One row per timestep, one column per node. Empty or ``nan`` cells are missing."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"series file not found: {path}")
    rows = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if rows and len(row) != len(rows[0]):
                raise SeriesFormatError(f"{path}:{lineno}: expected {len(rows[0])} columns, got {len(row)}")
            parsed = []
            for col, cell in enumerate(row, start=1):
                cell = cell.strip()
                if cell == "" or cell.lower() == "nan":
                    parsed.append(np.nan)
                    continue
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise SeriesFormatError(f"{path}:{lineno}:{col}: non-numeric cell {cell!r}") from None
            rows.append(parsed)
    if not rows:
        raise SeriesFormatError(f"{path}: empty series file")
    values = np.array(rows, dtype=float)[:, :, None]
    return SeriesFile(values, np.isfinite(values), meta={"source": str(path)})


def save_series_csv(series: SeriesFile, path, feature: int = 0) -> None:
    vals, mask = series.values[:, :, feature], series.mask[:, :, feature]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        for t in range(vals.shape[0]):
            writer.writerow([repr(float(v)) if m else "nan" for v, m in zip(vals[t], mask[t])])


def write_sidecar(path, params: dict) -> None:
    Path(path).write_text(json.dumps(params, indent=2, sort_keys=True))


def gen_heat_series(g: Graph, T_total: int, noise_std: float = 0.1, seed: int = 0, beta: float = 0.5) -> SeriesFile:
    """Random start diffused by x <- (I - beta L / lambda_max) x, plus process noise."""
    rng = np.random.default_rng(seed)
    lap = np.diag(g.degrees.astype(float)) - g.adjacency()
    lmax = float(np.linalg.eigvalsh(lap)[-1]) if g.num_edges else 1.0
    step = np.eye(g.num_nodes) - beta * lap / lmax
    x = rng.normal(size=g.num_nodes)
    out = np.empty((T_total, g.num_nodes))
    for t in range(T_total):
        out[t] = x
        x = step @ x + noise_std * rng.normal(size=g.num_nodes)
    meta = {"generator": "heat", "T_total": T_total, "noise_std": noise_std, "seed": seed, "beta": beta}
    return SeriesFile(out[:, :, None], meta=meta)


def cascade_targets(g: Graph, affected_fraction: float, rng) -> list:
    """Fixed per-source subset of neighbors that each source's events reach."""
    subsets = []
    for s in range(g.num_nodes):
        nbrs = g.neighbors(s)
        k = min(len(nbrs), math.ceil(affected_fraction * len(nbrs) - 1e-9))
        subsets.append(np.sort(rng.choice(nbrs, size=k, replace=False)) if k else nbrs[:0])
    return subsets


def gen_cascade_series(
    g: Graph,
    T_total: int,
    event_rate: float = 0.05,
    affected_fraction: float = 0.5,
    lag: int = 2,
    seed: int = 0,
    noise_std: float = 0.1,
    period: int = 24,
    drop: float = 2.0,
    duration: int = 6,
) -> SeriesFile:
    """Sinusoidal baseline with drop events that cascade to chosen neighbors.

    Events start at Poisson-many random sources per step; each drops its
    source by ``drop`` for ``duration`` steps and, ``lag`` steps later, the
    same drop hits that source's fixed affected neighbor subset.
    """
    if not 0 < affected_fraction <= 1:
        raise ValueError("affected_fraction must lie in (0, 1]")
    if lag < 1:
        raise ValueError("lag must be >= 1")
    rng = np.random.default_rng(seed)
    n = g.num_nodes
    t = np.arange(T_total)
    offset = rng.uniform(2.0, 4.0, size=n)
    amp = rng.uniform(0.5, 1.5, size=n)
    clean = offset[None, :] + amp[None, :] * np.sin(2 * np.pi * t / period)[:, None]
    subsets = cascade_targets(g, affected_fraction, rng)
    events = []
    for t0 in range(T_total):
        for _ in range(rng.poisson(event_rate)):
            src = int(rng.integers(n))
            events.append((t0, src))
            clean[t0 : t0 + duration, src] -= drop
            hit = subsets[src]
            if len(hit):
                clean[t0 + lag : t0 + lag + duration, hit] -= drop
    values = clean + noise_std * rng.normal(size=clean.shape)
    meta = {
        "generator": "cascade",
        "T_total": T_total,
        "event_rate": event_rate,
        "affected_fraction": affected_fraction,
        "lag": lag,
        "seed": seed,
        "noise_std": noise_std,
        "period": period,
        "drop": drop,
        "duration": duration,
        "num_events": len(events),
    }
    out = SeriesFile(values[:, :, None], clean=clean[:, :, None], meta=meta)
    out.meta["events"] = [[int(a), int(b)] for a, b in events]
    out.meta["affected"] = [s.tolist() for s in subsets]
    return out
