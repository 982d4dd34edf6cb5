"""Synthetic assets with known occlusion structure, for tests and benchmarks."""

from __future__ import annotations

import math

import numpy as np

from .asset import SH_C0, Asset, logit
from .sampling import fibonacci_directions


def _dc_from_color(colors: np.ndarray) -> np.ndarray:
    return (colors - 0.5) / SH_C0


def make_shell(
    n: int,
    radius: float = 1.0,
    thickness: float | None = None,
    alpha: float = 0.99,
    seed: int = 0,
) -> Asset:
    """Spherical shell of isotropic Gaussians.

    With ``alpha`` near 1 and the default thickness (scaled so neighboring
    kernels overlap), the hemisphere facing away from any exterior camera is
    fully occluded. Means lie exactly on the sphere of the given radius.
    """
    if n < 1:
        raise ValueError("shell needs at least one gaussian")
    if thickness is None:
        # mean point spacing on the sphere, padded for gap-free coverage
        thickness = 1.2 * math.sqrt(4.0 * math.pi / n) * radius
    rng = np.random.default_rng(seed)
    dirs = fibonacci_directions(n)
    means = (radius * dirs).astype(np.float32)
    colors = rng.uniform(0.2, 0.9, size=(n, 3))
    sh = np.zeros((n, 1, 3), dtype=np.float32)
    sh[:, 0, :] = _dc_from_color(colors)
    rot = np.zeros((n, 4), dtype=np.float32)
    rot[:, 0] = 1.0
    return Asset(
        means=means,
        log_scales=np.full((n, 3), math.log(thickness), dtype=np.float32),
        rotations=rot,
        opacity_logits=np.full(n, logit(alpha), dtype=np.float32),
        sh_coeffs=sh,
        sh_degree=0,
    )


def make_slab_pair(
    n_front: int,
    n_back: int,
    gap: float = 0.3,
    alpha_front: float = 0.99,
    alpha_back: float = 0.9,
    extent: float = 1.0,
    back_extent_ratio: float = 0.8,
    seed: int = 0,
) -> Asset:
    """Two parallel sheets of Gaussians facing +z; the front sheet comes first.

    The rear sheet is inset (``back_extent_ratio``) so that, seen head-on from
    +z with an opaque front sheet, its footprint stays inside the saturated
    region and its ground-truth contribution is zero everywhere.
    """
    rng = np.random.default_rng(seed)

    def sheet(n, half, zpos, alpha, base_color):
        side = max(1, math.ceil(math.sqrt(n)))
        spacing = 2.0 * half / side
        ii = np.arange(n)
        gy, gx = ii // side, ii % side
        xs = -half + (gx + 0.5) * spacing
        ys = -half + (gy + 0.5) * spacing
        means = np.stack([xs, ys, np.full(n, zpos)], axis=1).astype(np.float32)
        sigma_xy = spacing
        sigma_z = spacing / 20.0
        ls = np.tile(np.log([sigma_xy, sigma_xy, sigma_z]).astype(np.float32), (n, 1))
        colors = np.clip(base_color + rng.uniform(-0.1, 0.1, size=(n, 3)), 0.05, 0.95)
        sh = np.zeros((n, 1, 3), dtype=np.float32)
        sh[:, 0, :] = _dc_from_color(colors)
        rot = np.zeros((n, 4), dtype=np.float32)
        rot[:, 0] = 1.0
        op = np.full(n, logit(alpha), dtype=np.float32)
        return means, ls, rot, op, sh

    front = sheet(n_front, extent, gap / 2.0, alpha_front, np.array([0.7, 0.3, 0.3]))
    back = sheet(n_back, extent * back_extent_ratio, -gap / 2.0, alpha_back,
                 np.array([0.3, 0.3, 0.7]))
    parts = [np.concatenate([f, b], axis=0) for f, b in zip(front, back)]
    return Asset(
        means=parts[0], log_scales=parts[1], rotations=parts[2],
        opacity_logits=parts[3], sh_coeffs=parts[4], sh_degree=0,
    )


def make_random_cloud(
    n: int,
    extent: float = 1.0,
    scale_range: tuple[float, float] = (0.02, 0.1),
    alpha_range: tuple[float, float] = (0.2, 0.95),
    seed: int = 0,
) -> Asset:
    """Unstructured random asset for fuzz-style rendering tests."""
    rng = np.random.default_rng(seed)
    means = rng.uniform(-extent, extent, size=(n, 3)).astype(np.float32)
    log_scales = np.log(rng.uniform(*scale_range, size=(n, 3))).astype(np.float32)
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    colors = rng.uniform(0.05, 0.95, size=(n, 3))
    sh = np.zeros((n, 1, 3), dtype=np.float32)
    sh[:, 0, :] = _dc_from_color(colors)
    return Asset(
        means=means,
        log_scales=log_scales,
        rotations=quats.astype(np.float32),
        opacity_logits=logit(rng.uniform(*alpha_range, size=n)).astype(np.float32),
        sh_coeffs=sh,
        sh_degree=0,
    )
