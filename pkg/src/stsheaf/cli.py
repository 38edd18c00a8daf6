"""Command-line entry point: ``stsheaf <verb> --config run.json [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import autodiff as ad
from .data import SeriesFile, SeriesFormatError, gen_cascade_series, gen_heat_series, load_series_csv, save_series_csv, write_sidecar
from .graph import (
    Graph,
    GraphError,
    complete_graph,
    cycle_graph,
    edge_norm_weights,
    load_edge_list,
    path_graph,
    save_edge_list,
    watts_strogatz,
)
from .model import VARIANTS, ModelConfig, count_params, diffusion_stack, init_params, load_checkpoint, save_checkpoint
from .sheaf import DenseCapError, Sheaf
from .spectral import ConvergenceError, diffuse_flow, gcn_diffuse_step, oversmoothing_metric, spectrum
from .training import (
    AdamState,
    NonFiniteLossError,
    TrainConfig,
    default_horizons,
    evaluate,
    horizon_metrics,
    make_windows,
    predict,
    train,
    train_epoch,
    write_metrics_json,
)

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("spectrum", "diffuse", "oversmooth", "train", "eval", "ablate", "gen")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config schema


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)


class GraphSection(_Strict):
    path: Optional[str] = None
    num_nodes: int = Field(30, ge=1)
    generator: Literal["watts_strogatz", "path", "cycle", "complete"] = "watts_strogatz"
    k: int = Field(4, ge=2)
    p: float = Field(0.2, ge=0.0, le=1.0)
    eps: float = Field(0.0, ge=0.0)
    seed: Optional[int] = None


class SeriesSection(_Strict):
    path: Optional[str] = None
    generator: Literal["cascade", "heat"] = "cascade"
    T_total: int = Field(2000, ge=1)
    noise_std: float = Field(0.1, ge=0.0)
    event_rate: float = Field(0.05, ge=0.0)
    affected_fraction: float = Field(0.5, gt=0.0, le=1.0)
    lag: int = Field(2, ge=1)
    beta: float = Field(0.5, gt=0.0)
    seed: Optional[int] = None


class ModelSection(_Strict):
    f_in: int = 1
    f_out: int = 1
    embed_dim: int = 16
    stalk_dim: int = 16
    num_heads: int = 4
    num_layers: int = 2
    horizon: int = 3
    window: int = 12
    residual_scale: float = 0.1
    variant: Literal["dynamic", "static_maps", "no_sheaf", "no_temporal"] = "dynamic"


class TrainSection(_Strict):
    learning_rate: float = Field(0.01, gt=0.0)
    batch_size: int = Field(12, ge=1)
    patience: int = Field(10, ge=1)
    max_epochs: int = Field(50, ge=1)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0.0)
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    target_ratio: Optional[float] = Field(None, gt=0.0)


class SheafSection(_Strict):
    path: Optional[str] = None
    init: Literal["random", "identity"] = "random"
    stalk_dim: int = Field(16, ge=1)
    low: Optional[float] = None
    high: Optional[float] = None
    weights: Literal["unit", "degree_norm"] = "unit"


class SpectrumSection(_Strict):
    method: Literal["auto", "dense", "power"] = "auto"
    rank_tol: float = Field(1e-8, gt=0.0)
    tol: float = Field(1e-8, gt=0.0)
    max_iter: int = Field(10_000, ge=1)
    dense_cap: int = Field(4096, ge=1)


class DiffusionSection(_Strict):
    step: Optional[float] = Field(None, gt=0.0)
    step_fraction: float = Field(0.9, gt=0.0)
    steps: int = Field(100, ge=0)
    dump_states: bool = False


class OversmoothSection(_Strict):
    layers: int = Field(10, ge=1)
    stalk_dim: int = Field(16, ge=1)


class EvalSection(_Strict):
    checkpoint: Optional[str] = None
    split: Literal["train", "val", "test"] = "test"
    horizons: Optional[list[int]] = None


class AblateSection(_Strict):
    variants: list[Literal["dynamic", "static_maps", "no_sheaf", "no_temporal"]] = list(VARIANTS)
    seeds: list[int] = [0, 1, 2]
    stalk_dims: list[int] = []
    sweep_mae_dims: Optional[list[int]] = None
    timing_epochs: int = Field(3, ge=1)


class RunConfig(_Strict):
    seed: int = 0
    out: str = "out"
    graph: GraphSection = GraphSection()
    series: SeriesSection = SeriesSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    sheaf: SheafSection = SheafSection()
    spectrum: SpectrumSection = SpectrumSection()
    diffusion: DiffusionSection = DiffusionSection()
    oversmooth: OversmoothSection = OversmoothSection()
    eval: EvalSection = EvalSection()
    ablate: AblateSection = AblateSection()


def load_config(path=None, seed=None, out=None) -> RunConfig:
    """Parse and validate a JSON config; ``seed``/``out`` override the file."""
    try:
        text = Path(path).read_text() if path else "{}"
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        cfg = RunConfig.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if out is not None:
        updates["out"] = str(out)
    return cfg.model_copy(update=updates) if updates else cfg


def model_config(sec: ModelSection, **overrides) -> ModelConfig:
    try:
        return ModelConfig(**{**sec.model_dump(), **overrides})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config(sec: TrainSection, seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=sec.learning_rate,
        batch_size=sec.batch_size,
        patience=sec.patience,
        max_epochs=sec.max_epochs,
        adam_betas=tuple(sec.adam_betas),
        adam_eps=sec.adam_eps,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# builders


def build_graph(sec: GraphSection, seed: int) -> Graph:
    if sec.path:
        return load_edge_list(sec.path, sec.num_nodes, eps=sec.eps)
    gseed = sec.seed if sec.seed is not None else seed
    if sec.generator == "watts_strogatz":
        g = watts_strogatz(sec.num_nodes, sec.k, sec.p, seed=gseed)
    else:
        g = {"path": path_graph, "cycle": cycle_graph, "complete": complete_graph}[sec.generator](sec.num_nodes)
    return g.with_eps(sec.eps) if sec.eps else g


def build_series(sec: SeriesSection, g: Graph, seed: int) -> SeriesFile:
    if sec.path:
        series = load_series_csv(sec.path)
        if series.shape[1] != g.num_nodes:
            raise ConfigError(f"series has {series.shape[1]} columns but graph has {g.num_nodes} nodes")
        return series
    sseed = sec.seed if sec.seed is not None else seed
    if sec.generator == "heat":
        return gen_heat_series(g, sec.T_total, noise_std=sec.noise_std, seed=sseed, beta=sec.beta)
    return gen_cascade_series(
        g,
        sec.T_total,
        event_rate=sec.event_rate,
        affected_fraction=sec.affected_fraction,
        lag=sec.lag,
        seed=sseed,
        noise_std=sec.noise_std,
    )


def build_sheaf(sec: SheafSection, g: Graph, seed: int) -> Sheaf:
    if sec.path:
        return Sheaf.load(g, sec.path)
    if sec.init == "identity":
        return Sheaf.identity(g, sec.stalk_dim)
    if (sec.low is None) != (sec.high is None):
        raise ConfigError("sheaf.low and sheaf.high must be given together")
    return Sheaf.random(g, sec.stalk_dim, np.random.default_rng(seed), sec.low, sec.high)


def sheaf_weights(sec: SheafSection, g: Graph):
    return edge_norm_weights(g) if sec.weights == "degree_norm" else None


def build_datasets(cfg: RunConfig, mcfg: ModelConfig):
    g = build_graph(cfg.graph, cfg.seed)
    series = build_series(cfg.series, g, cfg.seed)
    if series.shape[2] != mcfg.f_in:
        raise ConfigError(f"series has {series.shape[2]} features but model.f_in = {mcfg.f_in}")
    try:
        splits = make_windows(series, mcfg.window, mcfg.horizon, tuple(cfg.train.split))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return g, splits


# ---------------------------------------------------------------------------
# output tracking


class Outputs:
    """Registers files as they are written so a failed run can remove them."""

    def __init__(self, root):
        self.root = Path(root)
        self.written = []
        self._made_root = not self.root.exists()

    def path(self, name) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.root / name
        self.written.append(p)
        return p

    def cleanup(self):
        for p in self.written:
            try:
                p.unlink()
            except FileNotFoundError:
                pass
        if self._made_root:
            try:
                self.root.rmdir()
            except OSError:
                pass


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_rows(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


def worker_count(jobs: int) -> int:
    raw = os.environ.get("STSHEAF_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"STSHEAF_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError("STSHEAF_THREADS must be >= 1")
    return max(1, min(cap, jobs))


def _map(fn, jobs):
    workers = worker_count(len(jobs))
    if workers == 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig, out: Outputs, log) -> None:
    g = build_graph(cfg.graph, cfg.seed)
    series = build_series(cfg.series, g, cfg.seed)
    save_edge_list(g, out.path("graph.csv"))
    save_series_csv(series, out.path("series.csv"))
    side = {k: v for k, v in series.meta.items()}
    side["graph"] = cfg.graph.model_dump()
    side["graph"]["seed"] = cfg.graph.seed if cfg.graph.seed is not None else cfg.seed
    side["shape"] = list(series.shape)
    write_sidecar(out.path("series.json"), side)
    log(f"wrote {series.shape[0]} x {series.shape[1]} series to {out.root}")


def cmd_spectrum(cfg: RunConfig, out: Outputs, log) -> None:
    g = build_graph(cfg.graph, cfg.seed)
    s = build_sheaf(cfg.sheaf, g, cfg.seed)
    sp = cfg.spectrum
    rep = spectrum(
        s,
        sheaf_weights(cfg.sheaf, g),
        method=sp.method,
        rank_tol=sp.rank_tol,
        tol=sp.tol,
        max_iter=sp.max_iter,
        cap=sp.dense_cap,
        seed=cfg.seed,
    )
    _write_json(out.path("spectrum.json"), rep.to_json())
    log(f"lambda_max {rep.lambda_max:.6g}  kernel_dim {rep.kernel_dim}")


def cmd_diffuse(cfg: RunConfig, out: Outputs, log) -> None:
    g = build_graph(cfg.graph, cfg.seed)
    s = build_sheaf(cfg.sheaf, g, cfg.seed)
    w = sheaf_weights(cfg.sheaf, g)
    dc = cfg.diffusion
    step = dc.step
    if step is None:
        sp = cfg.spectrum
        rep = spectrum(s, w, method=sp.method, rank_tol=sp.rank_tol, tol=sp.tol, max_iter=sp.max_iter, cap=sp.dense_cap, seed=cfg.seed)
        if not np.isfinite(rep.stable_step_bound):
            raise ConfigError("Laplacian is zero; set diffusion.step explicitly")
        step = dc.step_fraction * rep.stable_step_bound
    h0 = np.random.default_rng(cfg.seed + 1).normal(size=(g.num_nodes, s.stalk_dim))
    trace = diffuse_flow(s, w, h0, step, dc.steps)
    if not np.all(np.isfinite(trace.energies)):
        raise FloatingPointError("diffusion diverged to non-finite energy")
    trace.write_csv(out.path("diffusion.csv"))
    if dc.dump_states:
        trace.write_states_json(out.path("states.json"))
    log(f"step {step:.6g}: energy {trace.energies[0]:.6g} -> {trace.energies[-1]:.6g}")


def oversmooth_curves(g: Graph, layers: int, stalk_dim: int, seed: int):
    """Pair distances per layer for a random-init sheaf stack and for GCN steps."""
    mcfg = ModelConfig(stalk_dim=stalk_dim, num_layers=layers)
    params = init_params(mcfg, g.num_nodes, seed)
    h0 = np.random.default_rng(seed + 1).normal(size=(g.num_nodes, stalk_dim))
    states = diffusion_stack(params, mcfg, h0[None], g, return_states=True)
    sheaf = [oversmoothing_metric(g, st.data[0]) for st in states]
    gcn, h = [oversmoothing_metric(g, h0)], h0
    for _ in range(layers):
        h = gcn_diffuse_step(g, h)
        gcn.append(oversmoothing_metric(g, h))
    return np.array(sheaf), np.array(gcn)


def cmd_oversmooth(cfg: RunConfig, out: Outputs, log) -> None:
    g = build_graph(cfg.graph, cfg.seed)
    oc = cfg.oversmooth
    sheaf, gcn = oversmooth_curves(g, oc.layers, oc.stalk_dim, cfg.seed)
    if sheaf[0] == 0 or gcn[0] == 0:
        raise FloatingPointError("initial pair distance is zero")
    rows = [
        [i, _fmt(sheaf[i]), _fmt(gcn[i]), _fmt(sheaf[i] / sheaf[0]), _fmt(gcn[i] / gcn[0])]
        for i in range(len(sheaf))
    ]
    _write_rows(out.path("oversmoothing.csv"), ["layer", "sheaf_dist", "gcn_dist", "sheaf_ratio", "gcn_ratio"], rows)
    log(f"layer {oc.layers}: sheaf ratio {sheaf[-1] / sheaf[0]:.4f}  gcn ratio {gcn[-1] / gcn[0]:.4g}")


def fit(cfg: RunConfig, mcfg: ModelConfig, seed: int, g: Graph, splits, log=None, target_ratio=None):
    """Initialize with ``seed``, train, and return best params plus history."""
    train_ds, val_ds, _ = splits
    params = init_params(mcfg, g.num_nodes, seed)
    return train(params, mcfg, g, train_ds, val_ds, train_config(cfg.train, seed), log=log, target_ratio=target_ratio)


def _metrics_doc(params, mcfg, g, ds, horizons):
    preds = predict(params, mcfg, ds, g)
    overall = evaluate(preds, ds.targets, ds.mask).to_json()
    return {"overall": overall, "horizons": horizon_metrics(preds, ds, horizons)}


def cmd_train(cfg: RunConfig, out: Outputs, log) -> None:
    mcfg = model_config(cfg.model)
    g, splits = build_datasets(cfg, mcfg)
    best, hist = fit(cfg, mcfg, cfg.seed, g, splits, log=log, target_ratio=cfg.train.target_ratio)
    save_checkpoint(out.path("checkpoint.json"), best, mcfg, extra={"seed": cfg.seed, "best_epoch": hist.best_epoch})
    hist.write_csv(out.path("history.csv"))
    hist.write_timing_csv(out.path("timing.csv"))
    doc = _metrics_doc(best, mcfg, g, splits[2], default_horizons(mcfg.horizon))
    doc["split"] = "test"
    write_metrics_json(out.path("metrics.json"), doc)
    log(f"best epoch {hist.best_epoch}; test MAE {doc['overall']['mae']:.4f}")


def cmd_eval(cfg: RunConfig, out: Outputs, log) -> None:
    ckpt = cfg.eval.checkpoint or str(Path(cfg.out) / "checkpoint.json")
    if not Path(ckpt).exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    try:
        params, mcfg, _ = load_checkpoint(ckpt)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{ckpt}: malformed checkpoint ({exc})") from None
    g, splits = build_datasets(cfg, mcfg)
    ds = splits[("train", "val", "test").index(cfg.eval.split)]
    if len(ds) == 0:
        raise ConfigError(f"{cfg.eval.split} split is empty")
    horizons = cfg.eval.horizons or default_horizons(mcfg.horizon)
    if any(h < 1 or h > mcfg.horizon for h in horizons):
        raise ConfigError(f"horizons must lie in 1..{mcfg.horizon}")
    doc = _metrics_doc(params, mcfg, g, ds, horizons)
    doc["split"] = cfg.eval.split
    write_metrics_json(out.path("metrics.json"), doc)
    log(f"{cfg.eval.split} MAE {doc['overall']['mae']:.4f}")


def _ablate_job(cfg_json: str, overrides: dict, seed: int):
    cfg = RunConfig.model_validate_json(cfg_json)
    mcfg = model_config(cfg.model, **overrides)
    g, splits = build_datasets(cfg, mcfg)
    best, hist = fit(cfg, mcfg, seed, g, splits)
    doc = _metrics_doc(best, mcfg, g, splits[2], default_horizons(mcfg.horizon))
    return {"params": count_params(best), "best_epoch": hist.best_epoch, **doc}


def epoch_seconds(cfg: RunConfig, mcfg: ModelConfig, seed: int, g: Graph, splits, epochs: int) -> float:
    """Median wall-clock of ``epochs`` training epochs (no early stopping)."""
    params = init_params(mcfg, g.num_nodes, seed)
    tcfg = train_config(cfg.train, seed)
    rng = np.random.default_rng(seed)
    state = AdamState()
    w = edge_norm_weights(g)
    times = []
    prev = ad.CHECK_FINITE
    ad.CHECK_FINITE = False
    try:
        for _ in range(epochs):
            t0 = time.perf_counter()
            train_epoch(params, mcfg, g, w, splits[0], tcfg, state, rng)
            times.append(time.perf_counter() - t0)
    finally:
        ad.CHECK_FINITE = prev
    return statistics.median(times)


def cmd_ablate(cfg: RunConfig, out: Outputs, log) -> None:
    ac = cfg.ablate
    if not ac.variants or not ac.seeds:
        raise ConfigError("ablate.variants and ablate.seeds must be non-empty")
    cfg_json = cfg.model_dump_json()
    horizons = default_horizons(cfg.model.horizon)

    jobs = [(cfg_json, {"variant": v}, s) for v in ac.variants for s in ac.seeds]
    results = _map(_ablate_job, jobs)
    per_seed, table = [], []
    for vi, v in enumerate(ac.variants):
        runs = results[vi * len(ac.seeds) : (vi + 1) * len(ac.seeds)]
        for s, r in zip(ac.seeds, runs):
            for hm in r["horizons"]:
                per_seed.append([v, s, hm["horizon"], _fmt(hm["mae"]), _fmt(hm["rmse"]), _fmt(hm["mape"])])
        for hi, h in enumerate(horizons):
            mean = {k: float(np.mean([r["horizons"][hi][k] for r in runs])) for k in ("mae", "rmse", "mape")}
            table.append([v, h, _fmt(mean["mae"]), _fmt(mean["rmse"]), _fmt(mean["mape"])])
        overall = float(np.mean([r["overall"]["mae"] for r in runs]))
        log(f"{v:12s} params {runs[0]['params']:6d}  mean test MAE {overall:.4f}")
    _write_rows(out.path("ablation.csv"), ["variant", "horizon", "mae", "rmse", "mape"], table)
    _write_rows(out.path("ablation_seeds.csv"), ["variant", "seed", "horizon", "mae", "rmse", "mape"], per_seed)

    if not ac.stalk_dims:
        return
    mae_dims = ac.stalk_dims if ac.sweep_mae_dims is None else ac.sweep_mae_dims
    jobs = [(cfg_json, {"variant": "dynamic", "stalk_dim": d}, s) for d in mae_dims for s in ac.seeds]
    results = _map(_ablate_job, jobs)
    mae = {d: float(np.mean([r["overall"]["mae"] for r in results[i * len(ac.seeds) : (i + 1) * len(ac.seeds)]])) for i, d in enumerate(mae_dims)}
    rows, timing = [], []
    for d in ac.stalk_dims:
        mcfg = model_config(cfg.model, variant="dynamic", stalk_dim=d)
        g, splits = build_datasets(cfg, mcfg)
        n_params = count_params(init_params(mcfg, g.num_nodes, cfg.seed))
        rows.append([d, n_params, _fmt(mae[d]) if d in mae else ""])
        secs = epoch_seconds(cfg, mcfg, cfg.seed, g, splits, ac.timing_epochs)
        timing.append([d, f"{secs:.6f}"])
        log(f"d={d:3d}  params {n_params:6d}  epoch {secs:.2f}s" + (f"  MAE {mae[d]:.4f}" if d in mae else ""))
    _write_rows(out.path("sweep.csv"), ["stalk_dim", "params", "mae"], rows)
    _write_rows(out.path("sweep_timing.csv"), ["stalk_dim", "epoch_seconds"], timing)


HANDLERS = {
    "spectrum": cmd_spectrum,
    "diffuse": cmd_diffuse,
    "oversmooth": cmd_oversmooth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gen": cmd_gen,
}

CONFIG_ERRORS = (ConfigError, ValidationError, GraphError, SeriesFormatError, DenseCapError, FileNotFoundError)
NUMERIC_ERRORS = (ConvergenceError, NonFiniteLossError, FloatingPointError, np.linalg.LinAlgError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stsheaf", description="Sheaf diffusion experiments on graph time series.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run config (all fields optional)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the output directory")
    return p


def main(argv=None) -> int:
    def log(msg):
        print(msg, file=sys.stderr)

    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, args.seed, args.out)
    except ConfigError as exc:
        log(f"error: {exc}")
        return EXIT_CONFIG

    out = Outputs(cfg.out)
    try:
        HANDLERS[args.command](cfg, out, log)
    except CONFIG_ERRORS as exc:
        out.cleanup()
        log(f"error: {exc}")
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        out.cleanup()
        log(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except ValueError as exc:
        out.cleanup()
        log(f"error: {exc}")
        return EXIT_CONFIG
    except BaseException:
        out.cleanup()
        raise
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
