"""Deterministic tile-based CPU rasterizer for Gaussian splat assets.

Projection follows the standard EWA-style pipeline (perspective Jacobian at
the mean, 0.3-pixel low-pass dilation, 0.99 alpha clamp, per-tile depth sort,
front-to-back compositing with a 1/255 transmittance early-out). On request it
records per-Gaussian contribution maxima, which downstream code uses as the
visibility ground truth.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from ._kernels import bin_tiles, composite_tiles, project_kernel
from .asset import Asset, sigmoid

MIN_ALPHA = 1.0 / 255.0
STOP_TRANSMITTANCE = 1.0 / 255.0
COV_DILATION = 0.3
DET_EPS = 1e-12

CONTRIB_MAGIC = b"GSCB"
CONTRIB_VERSION = 1

# Real SH basis constants, degrees 0..3
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
          -1.0925484305920792, 0.5462742152960396)
_SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
          0.3731763325901154, -0.4570457994644658, 1.445305721320277,
          -0.5900435899266435)


@dataclass(eq=False)
class Camera:
    """Pinhole camera; ``rotation`` is the world-to-camera orthonormal basis.

    Camera space is x-right, y-down, z-forward; pixel centers sit on integer
    coordinates with the principal point at ((W-1)/2, (H-1)/2).
    """

    position: np.ndarray
    rotation: np.ndarray
    fov_y: float
    width: int
    height: int
    near: float = 0.05
    far: float = 1e6

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"camera rotation is not orthonormal (max error {err:.2e})")
        if not 0.0 < self.fov_y < math.pi:
            raise ValueError(f"fov_y must be in (0, pi), got {self.fov_y}")
        if self.focal <= 0.0:
            raise ValueError("camera focal must be positive")

    @property
    def focal(self) -> float:
        return self.height / (2.0 * math.tan(self.fov_y / 2.0))

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2].copy()

    @property
    def tan_half_fov(self) -> tuple[float, float]:
        ty = math.tan(self.fov_y / 2.0)
        return ty * self.width / self.height, ty

    @classmethod
    def look_at(cls, position, target, fov_y, width, height,
                up=None, near=0.05, far=1e6) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - position
        norm = np.linalg.norm(fwd)
        if norm == 0.0:
            raise ValueError("camera position and target coincide")
        fwd = fwd / norm
        if up is None:
            up = np.array([0.0, 0.0, 1.0])
            if abs(fwd @ up) > 0.999:
                up = np.array([1.0, 0.0, 0.0])
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(position=position, rotation=rot, fov_y=float(fov_y),
                   width=int(width), height=int(height), near=near, far=far)


def diag_to_fov_y(fov_diag: float, width: int, height: int) -> float:
    """Vertical FoV of a camera whose full diagonal FoV is ``fov_diag``."""
    return 2.0 * math.atan(math.tan(fov_diag / 2.0) * height / math.hypot(width, height))


def fov_y_to_diag(fov_y: float, width: int, height: int) -> float:
    return 2.0 * math.atan(math.tan(fov_y / 2.0) * math.hypot(width, height) / height)


def quats_to_rotmats(quats: np.ndarray) -> np.ndarray:
    """(n, 4) wxyz quaternions -> (n, 3, 3) rotation matrices (normalizes first)."""
    q = np.asarray(quats, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


@dataclass
class Projection:
    """Per-splat screen-space data; ``valid`` marks splats that survive projection."""

    mean2d: np.ndarray   # (n, 2)
    cov2d: np.ndarray    # (n, 3) packed (a, b, c), dilation included
    conic: np.ndarray    # (n, 3) inverse of cov2d
    depth: np.ndarray    # (n,)
    radius: np.ndarray   # (n,) 3-sigma pixel radius
    valid: np.ndarray    # (n,) bool
    n_skipped: int       # in front of camera but dropped for conditioning


def project_gaussians(asset: Asset, cam: Camera, dilation: float = COV_DILATION) -> Projection:
    n = len(asset)
    if n == 0:
        z = np.zeros((0,))
        return Projection(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)),
                          z, z, np.zeros((0,), dtype=bool), 0)

    tan_x, tan_y = cam.tan_half_fov
    mean2d = np.empty((n, 2))
    cov2d = np.empty((n, 3))
    conic = np.empty((n, 3))
    depth = np.empty(n)
    radius = np.empty(n)
    valid = np.empty(n, dtype=np.uint8)
    skipped = np.zeros(1, dtype=np.int64)
    project_kernel(
        asset.means.astype(np.float64), asset.log_scales.astype(np.float64),
        asset.rotations.astype(np.float64),
        cam.rotation, cam.position,
        cam.focal, tan_x, tan_y, cam.near,
        cam.width, cam.height, dilation, DET_EPS,
        mean2d, cov2d, conic, depth, radius, valid, skipped,
    )
    return Projection(
        mean2d=mean2d, cov2d=cov2d, conic=conic, depth=depth, radius=radius,
        valid=valid.astype(bool), n_skipped=int(skipped[0]),
    )


def project_gaussian(g, cam: Camera, dilation: float = COV_DILATION):
    """Project a single Gaussian; returns (mean2d, cov2d 2x2, depth) or None if culled."""
    tmp = Asset(
        means=np.asarray([g.mean], dtype=np.float32),
        log_scales=np.asarray([g.log_scale], dtype=np.float32),
        rotations=np.asarray([g.rotation], dtype=np.float32),
        opacity_logits=np.asarray([g.opacity_logit], dtype=np.float32),
        sh_coeffs=np.asarray([g.sh_coeffs], dtype=np.float32),
        sh_degree=int(round(math.sqrt(g.sh_coeffs.shape[0]))) - 1,
    )
    proj = project_gaussians(tmp, cam, dilation=dilation)
    if not proj.valid[0]:
        return None
    a, b, c = proj.cov2d[0]
    return proj.mean2d[0], np.array([[a, b], [b, c]]), float(proj.depth[0])


def project_point(point, cam: Camera):
    """Pixel coordinates and depth of a world-space point (no culling)."""
    t = cam.rotation @ (np.asarray(point, dtype=np.float64) - cam.position)
    f = cam.focal
    return np.array([
        f * t[0] / t[2] + (cam.width - 1) / 2.0,
        f * t[1] / t[2] + (cam.height - 1) / 2.0,
    ]), float(t[2])


def eval_sh_colors(asset: Asset, cam: Camera, sh_degree_eval: int | None = None) -> np.ndarray:
    """Per-splat RGB from spherical harmonics, clamped to [0, 1]."""
    deg = asset.sh_degree if sh_degree_eval is None else min(sh_degree_eval, asset.sh_degree)
    sh = asset.sh_coeffs.astype(np.float64)
    out = _SH_C0 * sh[:, 0, :]
    if deg > 0:
        d = asset.means.astype(np.float64) - cam.position
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
        out = out - _SH_C1 * y * sh[:, 1] + _SH_C1 * z * sh[:, 2] - _SH_C1 * x * sh[:, 3]
        if deg > 1:
            xx, yy, zz = x * x, y * y, z * z
            xy, yz, xz = x * y, y * z, x * z
            out = (out
                   + _SH_C2[0] * xy * sh[:, 4]
                   + _SH_C2[1] * yz * sh[:, 5]
                   + _SH_C2[2] * (2.0 * zz - xx - yy) * sh[:, 6]
                   + _SH_C2[3] * xz * sh[:, 7]
                   + _SH_C2[4] * (xx - yy) * sh[:, 8])
        if deg > 2:
            out = (out
                   + _SH_C3[0] * y * (3.0 * xx - yy) * sh[:, 9]
                   + _SH_C3[1] * xy * z * sh[:, 10]
                   + _SH_C3[2] * y * (4.0 * zz - xx - yy) * sh[:, 11]
                   + _SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * sh[:, 12]
                   + _SH_C3[4] * x * (4.0 * zz - xx - yy) * sh[:, 13]
                   + _SH_C3[5] * z * (xx - yy) * sh[:, 14]
                   + _SH_C3[6] * x * (xx - 3.0 * yy) * sh[:, 15])
    return np.clip(out + 0.5, 0.0, 1.0)


@dataclass
class RenderOutput:
    image: np.ndarray                     # (H, W, 3) float64 in [0, 1]
    final_transmittance: np.ndarray       # (H, W) float64
    contribution_max: np.ndarray | None   # (n,) max of alpha*T over pixels
    contribution_sum: np.ndarray | None   # (H, W) per-pixel sum of contributions
    used_count: int | None
    passed_count: int
    skipped_count: int


def render(
    asset: Asset,
    cam: Camera,
    *,
    sh_degree_eval: int | None = None,
    record_contributions: bool = False,
    radius_clip: float | None = None,
    tile_size: int = 16,
    stop_transmittance: float = STOP_TRANSMITTANCE,
    background=(1.0, 1.0, 1.0),
    dilation: float = COV_DILATION,
) -> RenderOutput:
    """Rasterize an asset. ``radius_clip`` drops splats with det(cov2d) below it.

    Per tile, overlapping splats are sorted by (depth, original index) and
    composited front to back; a pixel stops once its transmittance falls below
    ``stop_transmittance``. ``passed_count`` counts splats surviving frustum and
    radius clipping, ``used_count`` those with a nonzero recorded contribution.
    """
    h, w = cam.height, cam.width
    n = len(asset)
    bg = np.asarray(background, dtype=np.float64)
    image = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    contrib_sum = np.zeros((h, w)) if record_contributions else np.zeros((0, 0))
    contribution_max = np.zeros(n) if record_contributions else None

    def finish(passed, skipped, entry_idx=None, entry_contrib=None):
        image_out = image + trans[:, :, None] * bg
        used = None
        if record_contributions:
            if entry_idx is not None and entry_idx.size:
                np.maximum.at(contribution_max, entry_idx, entry_contrib)
            used = int(np.count_nonzero(contribution_max > 0.0))
        return RenderOutput(
            image=image_out,
            final_transmittance=trans,
            contribution_max=contribution_max,
            contribution_sum=contrib_sum if record_contributions else None,
            used_count=used,
            passed_count=passed,
            skipped_count=skipped,
        )

    if n == 0:
        return finish(0, 0)

    proj = project_gaussians(asset, cam, dilation=dilation)
    valid = proj.valid.copy()
    if radius_clip is not None and radius_clip > 0.0:
        det = proj.cov2d[:, 0] * proj.cov2d[:, 2] - proj.cov2d[:, 1] ** 2
        valid &= ~(det < radius_clip)

    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return finish(0, proj.n_skipped)

    ts = tile_size
    n_tx = (w + ts - 1) // ts
    n_ty = (h + ts - 1) // ts
    n_tiles = n_tx * n_ty
    tx0 = np.zeros(n, dtype=np.int64)
    tx1 = np.zeros(n, dtype=np.int64)
    ty0 = np.zeros(n, dtype=np.int64)
    ty1 = np.zeros(n, dtype=np.int64)
    mx, my = proj.mean2d[idx, 0], proj.mean2d[idx, 1]
    r = proj.radius[idx]
    tx0[idx] = np.clip(np.floor((mx - r) / ts).astype(np.int64), 0, n_tx)
    tx1[idx] = np.clip(np.floor((mx + r) / ts).astype(np.int64) + 1, 0, n_tx)
    ty0[idx] = np.clip(np.floor((my - r) / ts).astype(np.int64), 0, n_ty)
    ty1[idx] = np.clip(np.floor((my + r) / ts).astype(np.int64) + 1, 0, n_ty)
    on_screen = (tx1[idx] > tx0[idx]) & (ty1[idx] > ty0[idx])

    idx = idx[on_screen]
    passed = int(idx.size)
    if passed == 0:
        return finish(0, proj.n_skipped)

    # splats in (depth, index) order; tile segments inherit that order
    order_idx = idx[np.argsort(proj.depth[idx], kind="stable")]
    entry_idx, seg = bin_tiles(order_idx, tx0, tx1, ty0, ty1, n_tx, n_tiles)
    total = int(seg[-1])
    active_tiles = np.flatnonzero(seg[1:] > seg[:-1]).astype(np.int64)
    starts = seg[:-1][active_tiles]
    ends = seg[1:][active_tiles]

    colors = eval_sh_colors(asset, cam, sh_degree_eval)
    opac = sigmoid(asset.opacity_logits)
    log_opac = np.log(np.maximum(opac, 1e-300))
    entry_contrib = np.zeros(total) if record_contributions else np.zeros(0)

    composite_tiles(
        active_tiles, starts, ends,
        entry_idx, proj.mean2d, proj.conic, opac, log_opac, colors, proj.radius,
        h, w, ts, n_tx,
        float(stop_transmittance), MIN_ALPHA, math.log(MIN_ALPHA),
        bool(record_contributions),
        image, trans, contrib_sum, entry_contrib,
    )
    return finish(passed, proj.n_skipped, entry_idx, entry_contrib)


# ---------------------------------------------------------------------------
# Image quality metrics
# ---------------------------------------------------------------------------

PSNR_SENTINEL = 99.0
_SSIM_WIN = 11
_SSIM_SIGMA = 1.5


def _ssim_window() -> np.ndarray:
    half = _SSIM_WIN // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-0.5 * x * x / (_SSIM_SIGMA ** 2))
    return w / w.sum()


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_SENTINEL
    return min(PSNR_SENTINEL, -10.0 * math.log10(mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM, 11x11 Gaussian window sigma 1.5, per channel, averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    win = _ssim_window()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    pad = _SSIM_WIN // 2

    def filt(im):
        return correlate1d(correlate1d(im, win, axis=0, mode="nearest"),
                           win, axis=1, mode="nearest")

    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x, mu_y = filt(x), filt(y)
        var_x = filt(x * x) - mu_x * mu_x
        var_y = filt(y * y) - mu_y * mu_y
        cov = filt(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        smap = num / den
        vals.append(float(np.mean(smap[pad:-pad, pad:-pad])))
    return float(np.mean(vals))


def compute_metrics_pair(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(PSNR in dB with MAX=1, capped at 99; mean SSIM) for two same-size images."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return psnr(a, b), ssim(a, b)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_contributions(path, values: np.ndarray) -> None:
    """Flat little-endian f32 record with a 16-byte {magic, version, count} header."""
    values = np.asarray(values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQ", CONTRIB_MAGIC, CONTRIB_VERSION, values.size))
        fh.write(values.tobytes())


def read_contributions(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16:
            raise ValueError(f"{path}: truncated contribution header")
        magic, version, count = struct.unpack("<4sIQ", head)
        if magic != CONTRIB_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != CONTRIB_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        data = fh.read(4 * count)
    if len(data) < 4 * count:
        raise ValueError(f"{path}: truncated contribution data")
    return np.frombuffer(data, dtype="<f4").astype(np.float64)


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
