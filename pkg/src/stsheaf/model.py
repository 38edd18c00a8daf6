"""ST-Sheaf forward pass: temporal encoder, stalk projection, restriction maps,
gated sheaf diffusion layers and the linear decoder.

Parameters live in a flat ``dict[str, np.ndarray]``. Every function here
accepts that dict with arrays or with :class:`~stsheaf.autodiff.Tensor`
leaves; under an active tape the latter yields gradients.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph, edge_norm_weights
from .sheaf import Sheaf
from .spectral import gcn_propagation_matrix

VARIANTS = ("dynamic", "static_maps", "no_sheaf", "no_temporal")
CHECKPOINT_MAGIC = "STSHEAF1"


@dataclass(frozen=True)
class ModelConfig:
    f_in: int = 1
    f_out: int = 1
    embed_dim: int = 16
    stalk_dim: int = 16
    num_heads: int = 4
    num_layers: int = 2
    horizon: int = 3
    window: int = 12
    residual_scale: float = 0.1
    variant: str = "dynamic"

    def __post_init__(self):
        for name in ("f_in", "f_out", "embed_dim", "stalk_dim", "num_heads", "num_layers", "horizon", "window"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.residual_scale < 0:
            raise ValueError("residual_scale must be nonnegative")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


class RestrictionMaps(NamedTuple):
    """Per-edge restriction vectors, shape (..., E, d) for src and dst ends."""

    r_src: Tensor
    r_dst: Tensor

    def as_sheaf(self, g: Graph, index=None) -> Sheaf:
        rs, rd = self.r_src.data, self.r_dst.data
        if index is not None:
            rs, rd = rs[index], rd[index]
        return Sheaf(g, rs.shape[-1], rs, rd)


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng, fan_in, shape, relu_follows=False):
    # variance 2/fan_in ahead of a relu, 1/fan_in otherwise
    bound = np.sqrt((6.0 if relu_follows else 3.0) / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, num_nodes: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    D, d = cfg.embed_dim, cfg.stalk_dim
    p = {}

    def lin(name, fan_in, fan_out, relu_follows=False):
        p[f"{name}.w"] = _uniform(rng, fan_in, (fan_in, fan_out), relu_follows)
        p[f"{name}.b"] = np.zeros(fan_out)

    lin("temp", cfg.f_in, D)
    if cfg.variant != "no_temporal":
        for k in ("q", "k", "v", "o"):
            lin(f"attn.{k}", D, D)
        p["ln.gain"] = np.ones(D)
        p["ln.bias"] = np.zeros(D)
        lin("ffn.1", D, 2 * D, relu_follows=True)
        lin("ffn.2", 2 * D, D)
    p["proj.w"] = _uniform(rng, D, (D, d))
    if cfg.variant != "no_sheaf":
        lin("rmap.1", 2 * d, 2 * d, relu_follows=True)
        lin("rmap.2", 2 * d, 2 * d)
        lin("rres.1", 2 * d, 2 * d, relu_follows=True)
        p["rres.2.w"] = rng.normal(0.0, 1e-3, size=(2 * d, 2 * d))
        p["rres.2.b"] = np.zeros(2 * d)
    if cfg.variant == "static_maps":
        p["node_emb"] = rng.normal(size=(num_nodes, d))
    for layer in range(cfg.num_layers):
        lin(f"layer{layer}.msg", d, d, relu_follows=True)
        lin(f"layer{layer}.ffn1", d, 2 * d, relu_follows=True)
        lin(f"layer{layer}.ffn2", 2 * d, d)
        lin(f"layer{layer}.gate", 2 * d, d)
    lin("out", cfg.window * d, cfg.horizon * cfg.f_out)
    return p


def count_params(params: dict) -> int:
    return int(sum(np.asarray(getattr(v, "data", v)).size for v in params.values()))


def as_tensors(params: dict, requires_grad=True) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def _lin(P, name, x):
    return ad.linear(x, P[f"{name}.w"], P[f"{name}.b"])


# ---------------------------------------------------------------------------
# temporal encoder


def _mha(P, z, num_heads):
    """Self-attention over the second-to-last axis of z: (..., T, D)."""
    *lead, T, D = z.shape
    dh = D // num_heads

    def heads(t):
        t = ad.reshape(t, (*lead, T, num_heads, dh))
        n = len(lead)
        return ad.transpose(t, tuple(range(n)) + (n + 1, n, n + 2))

    q = heads(_lin(P, "attn.q", z))
    k = heads(_lin(P, "attn.k", z))
    v = heads(_lin(P, "attn.v", z))
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dh))
    ctx = ad.matmul(ad.softmax(scores), v)
    n = len(lead)
    ctx = ad.transpose(ctx, tuple(range(n)) + (n + 1, n, n + 2))
    ctx = ad.reshape(ctx, (*lead, T, D))
    return _lin(P, "attn.o", ctx)


def temporal_encode(P, cfg: ModelConfig, x) -> Tensor:
    """(B, T, N, F_in) -> (B, T, N, D). Attention runs along time per node."""
    x = ad._const(x)
    if x.ndim != 4 or x.shape[1] != cfg.window or x.shape[3] != cfg.f_in:
        raise ValueError(f"input shape {x.shape} does not match (B, {cfg.window}, N, {cfg.f_in})")
    z = _lin(P, "temp", x)
    if cfg.variant == "no_temporal":
        return z
    zt = ad.transpose(z, (0, 2, 1, 3))  # (B, N, T, D)
    z2 = ad.layer_norm(ad.add(_mha(P, zt, cfg.num_heads), zt), P["ln.gain"], P["ln.bias"])
    z3 = ad.add(_lin(P, "ffn.2", ad.relu(_lin(P, "ffn.1", z2))), z2)
    return ad.transpose(z3, (0, 2, 1, 3))


def stalk_project(P, z) -> Tensor:
    """(B, T, N, D) -> (B*T, N, d): one independent spatial problem per (b, t)."""
    B, T, N, D = z.shape
    return ad.matmul(ad.reshape(z, (B * T, N, D)), P["proj.w"])


# ---------------------------------------------------------------------------
# restriction maps


def _restriction_mlp(P, pair, d, residual_scale):
    base = _lin(P, "rmap.2", ad.relu(_lin(P, "rmap.1", pair)))
    corr = _lin(P, "rres.2", ad.relu(_lin(P, "rres.1", pair)))
    r = ad.add(base, ad.mul(corr, float(residual_scale)))
    n = r.ndim - 1
    lo = (slice(None),) * n
    return RestrictionMaps(r[lo + (slice(0, d),)], r[lo + (slice(d, 2 * d),)])


def restriction_maps_dynamic(P, cfg: ModelConfig, h, g: Graph) -> RestrictionMaps:
    """One MLP pass per edge on [h_u || h_v]; h is (..., N, d)."""
    h = ad._const(h)
    if h.shape[-2:] != (g.num_nodes, cfg.stalk_dim):
        raise ValueError(f"signal shape {h.shape} does not match (N={g.num_nodes}, d={cfg.stalk_dim})")
    pair = ad.concat([ad.gather(h, g.src, axis=-2), ad.gather(h, g.dst, axis=-2)], axis=-1)
    return _restriction_mlp(P, pair, cfg.stalk_dim, cfg.residual_scale)


def restriction_maps_static(P, cfg: ModelConfig, g: Graph) -> RestrictionMaps:
    """Same MLP applied to learned node embeddings; independent of the input."""
    if "node_emb" not in P:
        raise ValueError("static restriction maps need node embeddings (variant 'static_maps')")
    return restriction_maps_dynamic(P, cfg, P["node_emb"], g)


# ---------------------------------------------------------------------------
# diffusion layers


def sheaf_message(h, maps: RestrictionMaps, g: Graph, w) -> Tensor:
    """m_u = sum_{src(e)=u} w_e delta_e - sum_{dst(e)=u} w_e delta_e."""
    hu = ad.gather(h, g.src, axis=-2)
    hv = ad.gather(h, g.dst, axis=-2)
    delta = ad.sub(ad.mul(maps.r_src, hu), ad.mul(maps.r_dst, hv))
    return ad.scatter_add_signed(delta, g.src, g.dst, g.num_nodes, weight=w, axis=-2)


def gated_update(P, layer, h, m) -> Tensor:
    """Candidate h~ = FFN(relu(W m) + h), then the sigmoid-gated blend with h."""
    cand = ad.add(ad.relu(_lin(P, f"layer{layer}.msg", m)), h)
    cand = _lin(P, f"layer{layer}.ffn2", ad.relu(_lin(P, f"layer{layer}.ffn1", cand)))
    gate = ad.sigmoid(_lin(P, f"layer{layer}.gate", ad.concat([h, cand], axis=-1)))
    return ad.add(ad.mul(gate, cand), ad.mul(ad.sub(1.0, gate), h))


def sheaf_layer(P, layer: int, h, maps: RestrictionMaps, g: Graph, w) -> Tensor:
    h = ad._const(h)
    if maps.r_src.shape != h.shape[:-2] + (g.num_edges, h.shape[-1]):
        raise ValueError(f"restriction maps {maps.r_src.shape} do not match signal {h.shape}")
    return gated_update(P, layer, h, sheaf_message(h, maps, g, w))


def gcn_layer(P, layer: int, h, prop: np.ndarray) -> Tensor:
    """no_sheaf variant: GCN propagation feeds the same transform and gate."""
    return gated_update(P, layer, h, ad.matmul(prop, h))


def _broadcast_maps(maps: RestrictionMaps, lead) -> RestrictionMaps:
    if maps.r_src.ndim == 2:
        return RestrictionMaps(ad.expand(maps.r_src, lead), ad.expand(maps.r_dst, lead))
    return maps


def diffusion_stack(P, cfg: ModelConfig, h, g: Graph, w=None, return_states=False):
    """Apply the configured restriction-map builder and all diffusion layers."""
    h = ad._const(h)
    if w is None:
        w = edge_norm_weights(g)
    states = [h]
    if cfg.variant == "no_sheaf":
        prop = gcn_propagation_matrix(g)
        for layer in range(cfg.num_layers):
            h = gcn_layer(P, layer, h, prop)
            states.append(h)
    else:
        if cfg.variant == "static_maps":
            maps = _broadcast_maps(restriction_maps_static(P, cfg, g), h.shape[:-2])
        else:
            maps = restriction_maps_dynamic(P, cfg, h, g)
        for layer in range(cfg.num_layers):
            h = sheaf_layer(P, layer, h, maps, g, w)
            states.append(h)
    return states if return_states else h


def decode(P, cfg: ModelConfig, h, batch: int) -> Tensor:
    """(B*T, N, d) -> (B, H, N, F_out) via one linear map on the flattened window."""
    BT, N, d = h.shape
    T = BT // batch
    h = ad.transpose(ad.reshape(h, (batch, T, N, d)), (0, 2, 1, 3))
    y = _lin(P, "out", ad.reshape(h, (batch, N, T * d)))
    y = ad.reshape(y, (batch, N, cfg.horizon, cfg.f_out))
    return ad.transpose(y, (0, 2, 1, 3))


def forward(P, cfg: ModelConfig, x, g: Graph, w=None) -> Tensor:
    """(B, T, N, F_in) -> (B, H, N, F_out)."""
    if (cfg.variant == "static_maps") != ("node_emb" in P):
        raise ValueError(f"parameters do not match variant {cfg.variant!r}")
    x = ad._const(x)
    if x.ndim != 4 or x.shape[2] != g.num_nodes:
        raise ValueError(f"input shape {x.shape} does not match graph with {g.num_nodes} nodes")
    z = temporal_encode(P, cfg, x)
    h = stalk_project(P, z)
    h = diffusion_stack(P, cfg, h, g, w)
    return decode(P, cfg, h, x.shape[0])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict, cfg: ModelConfig, extra=None) -> None:
    doc = {
        "format": CHECKPOINT_MAGIC,
        "config": asdict(cfg),
        "params": {k: {"shape": list(np.shape(v)), "data": np.asarray(v).ravel().tolist()} for k, v in params.items()},
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an {CHECKPOINT_MAGIC} checkpoint")
    cfg = ModelConfig(**doc["config"])
    params = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in doc["params"].items()}
    return params, cfg, doc.get("extra", {})
