"""Sheaf diffusion for spatio-temporal graph forecasting, on a small numpy autodiff engine."""

from .graph import Graph, edge_norm_weights, load_edge_list, watts_strogatz
from .model import ModelConfig, forward, init_params
from .sheaf import Sheaf, assemble_dense_laplacian, kernel_dimension, sheaf_energy, sheaf_laplacian_apply
from .spectral import diffuse_flow, gcn_diffuse_step, oversmoothing_metric, spectrum

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "ModelConfig",
    "Sheaf",
    "assemble_dense_laplacian",
    "diffuse_flow",
    "edge_norm_weights",
    "forward",
    "gcn_diffuse_step",
    "init_params",
    "kernel_dimension",
    "load_edge_list",
    "oversmoothing_metric",
    "sheaf_energy",
    "sheaf_laplacian_apply",
    "spectrum",
    "watts_strogatz",
]
