"""Occlusion-culled instanced CPU renderer for 3D Gaussian splat assets."""

from .asset import (
    Asset,
    Gaussian,
    asset_hash,
    compute_sampling_distances,
    load_ply,
    prepare,
    prune,
    recenter,
    save_ply,
)
from .raster import Camera, RenderOutput, compute_metrics_pair, render

__all__ = [
    "Asset",
    "Gaussian",
    "Camera",
    "RenderOutput",
    "asset_hash",
    "compute_metrics_pair",
    "compute_sampling_distances",
    "load_ply",
    "prepare",
    "prune",
    "recenter",
    "render",
    "save_ply",
]

__version__ = "0.1.0"
