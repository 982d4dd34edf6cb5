"""Camera sampling and visibility label extraction.

Builds the training view set for an asset: directions from a Fibonacci sphere
lattice (or an equal-angle long-lat grid for comparison), a uniform distance
grid between the asset's near/far bounds, distance-scaled random look-at
offsets, and a small cone of auxiliary views per main view. A Gaussian is
labeled visible for a view when it has a nonzero recorded contribution in the
main render or any auxiliary render.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .asset import Asset, asset_hash, compute_sampling_distances
from .raster import Camera, diag_to_fov_y, render

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0

VISDATA_MAGIC = b"VISD"
VISDATA_VERSION = 1


@dataclass
class SamplingConfig:
    """Knobs for visibility extraction. ``fov`` is the full diagonal FoV."""

    n_directions: int = 256
    n_distances: int = 8
    fov: float = math.radians(60.0)
    image_size: int = 256
    n_aux_views: int = 6
    aux_cone_half_angle: float = math.radians(3.0)
    offset_enabled: bool = True
    offset_scale_ratio: float | None = None  # None: min/max bbox extent
    sampler_kind: str = "fibonacci"
    seed: int = 0
    p_near: float = 0.9
    p_far: float = 0.05

    def __post_init__(self):
        if self.n_directions < 1:
            raise ValueError("n_directions must be >= 1")
        if self.n_distances < 1:
            raise ValueError("n_distances must be >= 1")
        if not 0.0 < self.aux_cone_half_angle < math.pi / 4.0:
            raise ValueError("aux_cone_half_angle must be in (0, pi/4)")
        if self.sampler_kind not in ("fibonacci", "longlat"):
            raise ValueError(f"unknown sampler_kind {self.sampler_kind!r}")

    @property
    def fov_y(self) -> float:
        return diag_to_fov_y(self.fov, self.image_size, self.image_size)

    @property
    def train_focal(self) -> float:
        return self.image_size / (2.0 * math.tan(self.fov_y / 2.0))


@dataclass
class TrainView:
    camera: Camera
    direction_unit: np.ndarray   # asset center -> camera, unit
    distance: float              # camera distance from the asset center
    target_offset: np.ndarray    # look-at point relative to the center
    aux_cameras: list[Camera] = field(default_factory=list)


def fibonacci_directions(n: int) -> np.ndarray:
    """Fibonacci sphere lattice: z_i = 1 - 2(i+0.5)/n, golden-angle azimuths."""
    if n < 1:
        raise ValueError("need at least one direction")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    phi = 2.0 * math.pi * i * (1.0 - 1.0 / GOLDEN_RATIO)
    rho = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def longlat_directions(n: int) -> np.ndarray:
    """Equal-angle latitude/longitude grid, truncated row-major to n points."""
    if n < 1:
        raise ValueError("need at least one direction")
    n_lat = max(1, int(math.floor(math.sqrt(n))))
    n_lon = int(math.ceil(n / n_lat))
    out = np.empty((n, 3))
    k = 0
    for j in range(n_lat):
        theta = math.pi * (j + 0.5) / n_lat
        st, ct = math.sin(theta), math.cos(theta)
        for i in range(n_lon):
            if k >= n:
                break
            phi = 2.0 * math.pi * i / n_lon
            out[k] = (st * math.cos(phi), st * math.sin(phi), ct)
            k += 1
    return out


def _perp_basis(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([0.0, 0.0, 1.0])
    if abs(direction @ ref) > 0.999:
        ref = np.array([1.0, 0.0, 0.0])
    e1 = np.cross(ref, direction)
    e1 = e1 / np.linalg.norm(e1)
    return e1, np.cross(direction, e1)


def bbox_in_view(cam: Camera, bbox_min, bbox_max) -> bool:
    """True when all eight bbox corners project inside the image, in front of near."""
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    corners = np.array([[lo[0] if i & 1 else hi[0],
                         lo[1] if i & 2 else hi[1],
                         lo[2] if i & 4 else hi[2]] for i in range(8)])
    t = (corners - cam.position) @ cam.rotation.T
    if np.any(t[:, 2] <= cam.near):
        return False
    f = cam.focal
    px = f * t[:, 0] / t[:, 2] + (cam.width - 1) / 2.0
    py = f * t[:, 1] / t[:, 2] + (cam.height - 1) / 2.0
    return bool(np.all((px >= 0) & (px <= cam.width - 1) &
                       (py >= 0) & (py <= cam.height - 1)))


def build_views(asset: Asset, cfg: SamplingConfig) -> list[TrainView]:
    """Construct the deterministic training view set for an asset.

    Distances form a uniform grid in [d_near, d_far]. The look-at offset is a
    random in-image-plane direction whose magnitude ramps linearly from zero
    at d_near to ``bound_radius * offset_scale_ratio`` at d_far, shrunk if the
    asset bbox would otherwise leave the frustum. Auxiliary cameras sit evenly
    on a cone of the configured half-angle around the main direction, at the
    same distance, looking at the same target.
    """
    if asset.d_near is None or asset.d_far is None:
        raise ValueError("asset needs d_near/d_far (run prep or compute_sampling_distances)")
    d_near, d_far = asset.d_near, asset.d_far
    rng = np.random.default_rng(cfg.seed)

    if cfg.sampler_kind == "fibonacci":
        dirs = fibonacci_directions(cfg.n_directions)
    else:
        dirs = longlat_directions(cfg.n_directions)

    ratio = cfg.offset_scale_ratio
    if ratio is None:
        extents = asset.bbox_max - asset.bbox_min
        ratio = float(extents.min() / extents.max()) if extents.max() > 0 else 0.0
    offset_max = asset.bound_radius * ratio

    fov_y = cfg.fov_y
    size = cfg.image_size
    near_clip = min(0.05, 0.05 * d_near)
    bbox_lo, bbox_hi = asset.bbox_min, asset.bbox_max

    views: list[TrainView] = []
    for direction in dirs:
        e1, e2 = _perp_basis(direction)
        for j in range(cfg.n_distances):
            frac = j / (cfg.n_distances - 1) if cfg.n_distances > 1 else 0.0
            dist = d_near + (d_far - d_near) * frac
            psi = rng.uniform(0.0, 2.0 * math.pi)
            mag = offset_max * frac if cfg.offset_enabled else 0.0
            off_dir = math.cos(psi) * e1 + math.sin(psi) * e2
            position = dist * direction

            def cam_for(m):
                return Camera.look_at(position, m * off_dir, fov_y, size, size,
                                      near=near_clip)

            while mag > 1e-9 * max(offset_max, 1.0) and not bbox_in_view(
                    cam_for(mag), bbox_lo, bbox_hi):
                mag *= 0.7
            if mag <= 1e-9 * max(offset_max, 1.0):
                mag = 0.0
            target = mag * off_dir
            camera = cam_for(mag)

            aux = []
            if cfg.n_aux_views > 0:
                th = cfg.aux_cone_half_angle
                for k in range(cfg.n_aux_views):
                    phi = 2.0 * math.pi * k / cfg.n_aux_views
                    aux_dir = (math.cos(th) * direction
                               + math.sin(th) * (math.cos(phi) * e1 + math.sin(phi) * e2))
                    aux.append(Camera.look_at(dist * aux_dir, target, fov_y, size, size,
                                              near=near_clip))

            views.append(TrainView(
                camera=camera,
                direction_unit=direction.copy(),
                distance=float(dist),
                target_offset=target,
                aux_cameras=aux,
            ))
    return views


def visible_labels(asset: Asset, view: TrainView) -> np.ndarray:
    """Per-Gaussian visibility bits: nonzero contribution in main or any aux render."""
    out = render(asset, view.camera, record_contributions=True)
    labels = out.contribution_max > 0.0
    for aux_cam in view.aux_cameras:
        aux = render(asset, aux_cam, record_contributions=True)
        labels |= aux.contribution_max > 0.0
    return labels


@dataclass
class VisibilityDataset:
    """Sampled poses plus packed per-(view, Gaussian) visibility bits."""

    config: SamplingConfig
    asset_hash: int
    d_near: float
    d_far: float
    n_gaussians: int
    positions: np.ndarray       # (V, 3)
    rotations: np.ndarray       # (V, 3, 3) world-to-camera
    distances: np.ndarray       # (V,)
    directions: np.ndarray      # (V, 3)
    forwards: np.ndarray        # (V, 3)
    target_offsets: np.ndarray  # (V, 3)
    labels_packed: np.ndarray   # (V, ceil(n/8)) uint8, little bit order

    @property
    def n_views(self) -> int:
        return self.positions.shape[0]

    def labels(self) -> np.ndarray:
        bits = np.unpackbits(self.labels_packed, axis=1, bitorder="little")
        return bits[:, : self.n_gaussians].astype(bool)

    def camera(self, i: int) -> Camera:
        cfg = self.config
        return Camera(position=self.positions[i], rotation=self.rotations[i],
                      fov_y=cfg.fov_y, width=cfg.image_size, height=cfg.image_size,
                      near=min(0.05, 0.05 * self.d_near))

    def save(self, path) -> None:
        cfg_json = json.dumps(dataclasses.asdict(self.config), sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sIQIIddI", VISDATA_MAGIC, VISDATA_VERSION,
                                 self.asset_hash, self.n_views, self.n_gaussians,
                                 self.d_near, self.d_far, len(cfg_json)))
            fh.write(cfg_json)
            for arr in (self.positions, self.rotations, self.distances,
                        self.directions, self.forwards, self.target_offsets):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.labels_packed).tobytes())

    @classmethod
    def load(cls, path) -> "VisibilityDataset":
        with open(path, "rb") as fh:
            head = fh.read(struct.calcsize("<4sIQIIddI"))
            if len(head) < struct.calcsize("<4sIQIIddI"):
                raise ValueError(f"{path}: truncated dataset header")
            magic, version, ahash, n_views, n_g, d_near, d_far, cfg_len = struct.unpack(
                "<4sIQIIddI", head)
            if magic != VISDATA_MAGIC:
                raise ValueError(f"{path}: bad magic {magic!r}")
            if version != VISDATA_VERSION:
                raise ValueError(f"{path}: unsupported version {version}")
            cfg = SamplingConfig(**json.loads(fh.read(cfg_len).decode()))

            def read_arr(shape):
                count = int(np.prod(shape))
                buf = fh.read(8 * count)
                if len(buf) < 8 * count:
                    raise ValueError(f"{path}: truncated dataset body")
                return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

            positions = read_arr((n_views, 3))
            rotations = read_arr((n_views, 3, 3))
            distances = read_arr((n_views,))
            directions = read_arr((n_views, 3))
            forwards = read_arr((n_views, 3))
            target_offsets = read_arr((n_views, 3))
            n_bytes = (n_g + 7) // 8
            buf = fh.read(n_views * n_bytes)
            if len(buf) < n_views * n_bytes:
                raise ValueError(f"{path}: truncated label block")
            labels = np.frombuffer(buf, dtype=np.uint8).reshape(n_views, n_bytes).copy()
        return cls(config=cfg, asset_hash=ahash, d_near=d_near, d_far=d_far,
                   n_gaussians=n_g, positions=positions, rotations=rotations,
                   distances=distances, directions=directions, forwards=forwards,
                   target_offsets=target_offsets, labels_packed=labels)


def extract_dataset(asset: Asset, cfg: SamplingConfig,
                    progress: bool = False) -> VisibilityDataset:
    """Run the full extraction: build views, render, collect packed labels."""
    if asset.d_near is None or asset.d_far is None:
        d_near, d_far = compute_sampling_distances(asset, cfg.fov, cfg.p_near, cfg.p_far)
        asset = dataclasses.replace(asset, d_near=d_near, d_far=d_far)
    views = build_views(asset, cfg)
    n = len(asset)
    v = len(views)
    positions = np.empty((v, 3))
    rotations = np.empty((v, 3, 3))
    distances = np.empty(v)
    directions = np.empty((v, 3))
    forwards = np.empty((v, 3))
    target_offsets = np.empty((v, 3))
    labels = np.zeros((v, n), dtype=bool)
    for i, view in enumerate(views):
        labels[i] = visible_labels(asset, view)
        positions[i] = view.camera.position
        rotations[i] = view.camera.rotation
        distances[i] = view.distance
        directions[i] = view.direction_unit
        forwards[i] = view.camera.forward
        target_offsets[i] = view.target_offset
        if progress and (i + 1) % 200 == 0:
            print(f"  extracted {i + 1}/{v} views", flush=True)
    return VisibilityDataset(
        config=cfg, asset_hash=asset_hash(asset),
        d_near=float(asset.d_near), d_far=float(asset.d_far), n_gaussians=n,
        positions=positions, rotations=rotations, distances=distances,
        directions=directions, forwards=forwards, target_offsets=target_offsets,
        labels_packed=np.packbits(labels, axis=1, bitorder="little"),
    )
