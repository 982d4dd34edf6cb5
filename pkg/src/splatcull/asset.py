"""Gaussian splat assets: PLY I/O, validation, pruning, recentering, distance bounds.

An :class:`Asset` is a struct-of-arrays collection of 3D Gaussians in the
standard splat parameterization (mean, log-scales, quaternion, opacity logit,
SH color coefficients). Arrays are kept in float32, the on-disk PLY precision,
so that save/load round-trips are bit-exact; downstream math upcasts to
float64 where it matters.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np

# SH degree-0 basis constant; DC color = 0.5 + SH_C0 * f_dc
SH_C0 = 0.28209479177387814

DEFAULT_PRUNE_THRESHOLD = 1.0 / 255.0

_REQUIRED_PROPS = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
    "char": "<i1", "int8": "<i1",
    "uchar": "<u1", "uint8": "<u1",
    "short": "<i2", "int16": "<i2",
    "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
}


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussian:
    """A single splat primitive, mainly for tests and inspection."""

    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    opacity_logit: float
    sh_coeffs: np.ndarray  # ((deg+1)**2, 3)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class Asset:
    """A collection of Gaussians plus the bookkeeping produced by prep.

    ``d_near``/``d_far`` are camera sampling bounds; they are derived values
    (not stored in PLY) and stay ``None`` until computed.
    """

    means: np.ndarray          # (n, 3) float32
    log_scales: np.ndarray     # (n, 3) float32
    rotations: np.ndarray      # (n, 4) float32, unit (w, x, y, z)
    opacity_logits: np.ndarray  # (n,) float32
    sh_coeffs: np.ndarray      # (n, (deg+1)**2, 3) float32
    sh_degree: int
    center_offset: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float64))
    d_near: float | None = None
    d_far: float | None = None

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def bbox_min(self) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("empty asset has no bounding box")
        return self.means.min(axis=0).astype(np.float64)

    @property
    def bbox_max(self) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("empty asset has no bounding box")
        return self.means.max(axis=0).astype(np.float64)

    @property
    def bound_radius(self) -> float:
        """Half the length of the axis-aligned bbox diagonal of the means."""
        return float(np.linalg.norm(self.bbox_max - self.bbox_min) / 2.0)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh_coeffs[i].copy(),
        )

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian]) -> "Asset":
        if not gaussians:
            raise ValueError("cannot build an asset from zero gaussians")
        k = gaussians[0].sh_coeffs.shape[0]
        deg = int(round(math.sqrt(k))) - 1
        if (deg + 1) ** 2 != k:
            raise ValueError(f"sh_coeffs length {k} is not a perfect square")
        return cls(
            means=np.array([g.mean for g in gaussians], dtype=np.float32),
            log_scales=np.array([g.log_scale for g in gaussians], dtype=np.float32),
            rotations=np.array([g.rotation for g in gaussians], dtype=np.float32),
            opacity_logits=np.array([g.opacity_logit for g in gaussians], dtype=np.float32),
            sh_coeffs=np.array([g.sh_coeffs for g in gaussians], dtype=np.float32),
            sh_degree=deg,
        )


def validate_asset(asset: Asset) -> None:
    """Raise ValueError if any asset invariant is broken."""
    n = len(asset)
    shapes = {
        "means": (n, 3),
        "log_scales": (n, 3),
        "rotations": (n, 4),
        "opacity_logits": (n,),
        "sh_coeffs": (n, (asset.sh_degree + 1) ** 2, 3),
    }
    for name, shape in shapes.items():
        arr = getattr(asset, name)
        if arr.shape != shape:
            raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite value in {name}")
    norms = np.linalg.norm(asset.rotations.astype(np.float64), axis=1)
    if n and np.max(np.abs(norms - 1.0)) > 1e-6:
        raise ValueError("rotation quaternions are not unit length")


def asset_hash(asset: Asset) -> int:
    """Stable 64-bit digest of the gaussian data, used to pair models with assets."""
    h = hashlib.sha256()
    h.update(np.int64(asset.sh_degree).tobytes())
    for arr in (asset.means, asset.log_scales, asset.rotations,
                asset.opacity_logits, asset.sh_coeffs):
        h.update(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
    return int.from_bytes(h.digest()[:8], "little")


# ---------------------------------------------------------------------------
# PLY I/O (binary little-endian, standard 3DGS trainer layout)
# ---------------------------------------------------------------------------

def _parse_header(raw: bytes, path) -> tuple[int, list[tuple[str, str]], int]:
    """Return (vertex_count, [(name, dtype)], body_offset)."""
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: malformed PLY header")
    header = raw[:end].decode("ascii", errors="replace")
    body_offset = end + len(b"end_header\n")

    fmt = re.search(r"^format\s+(\S+)", header, re.M)
    if fmt is None or fmt.group(1) != "binary_little_endian":
        raise ValueError(f"{path}: expected binary_little_endian PLY")

    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in header.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            if parts[1] == "vertex":
                if count is not None:
                    raise ValueError(f"{path}: duplicate vertex element")
                count = int(parts[2])
                in_vertex = True
            else:
                if count is None:
                    raise ValueError(f"{path}: vertex must be the first element")
                in_vertex = False
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise ValueError(f"{path}: list properties are not supported")
            if parts[1] not in _PLY_TYPES:
                raise ValueError(f"{path}: unsupported property type {parts[1]}")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if count is None:
        raise ValueError(f"{path}: missing vertex element")
    return count, props, body_offset


def load_ply(path) -> Asset:
    """Load a standard 3DGS PLY (no recentering or pruning applied).

    The SH degree is inferred from the number of ``f_rest_*`` properties;
    f_rest is channel-major (all of channel R's higher-order coefficients,
    then G, then B), matching the reference trainer's export. Quaternions are
    normalized only if they deviate from unit norm by more than 1e-6, which
    keeps already-valid files bit-stable through a load/save cycle.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    count, props, body_offset = _parse_header(raw, path)

    names = [p[0] for p in props]
    for req in _REQUIRED_PROPS:
        if req not in names:
            raise ValueError(f"{path}: missing property {req}")

    rest_names = sorted(
        (n for n in names if n.startswith("f_rest_")),
        key=lambda n: int(n.rsplit("_", 1)[1]),
    )
    n_rest = len(rest_names)
    if n_rest % 3 != 0:
        raise ValueError(f"{path}: f_rest property count {n_rest} is not a multiple of 3")
    n_coeffs = n_rest // 3 + 1
    deg = int(round(math.sqrt(n_coeffs))) - 1
    if (deg + 1) ** 2 != n_coeffs or deg > 3:
        raise ValueError(
            f"{path}: f_rest count {n_rest} does not correspond to a SH degree in 0..3"
        )

    dtype = np.dtype([(f"c{i}", t) for i, (_, t) in enumerate(props)])
    body = raw[body_offset:body_offset + count * dtype.itemsize]
    if len(body) < count * dtype.itemsize:
        raise ValueError(f"{path}: truncated body, expected {count} vertices")
    data = np.frombuffer(body, dtype=dtype)
    col = {name: data[f"c{i}"] for i, name in enumerate(names)}

    def stack(field_names):
        return np.stack([np.asarray(col[n], dtype=np.float32) for n in field_names], axis=1)

    means = stack(["x", "y", "z"])
    log_scales = stack(["scale_0", "scale_1", "scale_2"])
    rotations = stack(["rot_0", "rot_1", "rot_2", "rot_3"])
    opacity = np.asarray(col["opacity"], dtype=np.float32)

    sh = np.zeros((count, n_coeffs, 3), dtype=np.float32)
    for c in range(3):
        sh[:, 0, c] = col[f"f_dc_{c}"]
    m = n_coeffs - 1
    for c in range(3):
        for j in range(m):
            sh[:, 1 + j, c] = col[rest_names[c * m + j]]

    for name, arr in (("position", means), ("scale", log_scales),
                      ("rotation", rotations), ("opacity", opacity), ("sh", sh)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{path}: non-finite value in {name} fields")

    norms = np.linalg.norm(rotations.astype(np.float64), axis=1)
    if count and (np.any(norms == 0.0) or np.max(np.abs(norms - 1.0)) > 1e-6):
        if np.any(norms == 0.0):
            raise ValueError(f"{path}: zero-norm rotation quaternion")
        rotations = (rotations.astype(np.float64) / norms[:, None]).astype(np.float32)

    return Asset(
        means=means, log_scales=log_scales, rotations=rotations,
        opacity_logits=opacity, sh_coeffs=sh, sh_degree=deg,
    )


def save_ply(asset: Asset, path) -> None:
    """Write the asset in the standard 3DGS binary layout (zero normals included)."""
    n = len(asset)
    m = (asset.sh_degree + 1) ** 2 - 1
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * m)]
    names += ["opacity", "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3"]

    header = "ply\nformat binary_little_endian 1.0\n"
    header += f"element vertex {n}\n"
    header += "".join(f"property float {name}\n" for name in names)
    header += "end_header\n"

    out = np.empty((n, len(names)), dtype=np.float32)
    out[:, 0:3] = asset.means
    out[:, 3:6] = 0.0
    out[:, 6:9] = asset.sh_coeffs[:, 0, :]
    for c in range(3):
        out[:, 9 + c * m: 9 + (c + 1) * m] = asset.sh_coeffs[:, 1:, c]
    base = 9 + 3 * m
    out[:, base] = asset.opacity_logits
    out[:, base + 1: base + 4] = asset.log_scales
    out[:, base + 4: base + 8] = asset.rotations

    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(out).tobytes())


# ---------------------------------------------------------------------------
# Prep transforms
# ---------------------------------------------------------------------------

def prune(asset: Asset, threshold: float = DEFAULT_PRUNE_THRESHOLD) -> Asset:
    """Keep only Gaussians with sigmoid(opacity_logit) >= threshold, order preserved."""
    if not 0.0 <= threshold < 1.0:
        raise ValueError(f"prune threshold must be in [0, 1), got {threshold}")
    keep = asset.opacities >= threshold
    return replace(
        asset,
        means=asset.means[keep],
        log_scales=asset.log_scales[keep],
        rotations=asset.rotations[keep],
        opacity_logits=asset.opacity_logits[keep],
        sh_coeffs=asset.sh_coeffs[keep],
        d_near=None, d_far=None,
    )


def recenter(asset: Asset) -> Asset:
    """Translate means so the bbox center of means lands at the origin.

    ``center_offset`` accumulates the total translation that was removed, so
    the original world position of a mean is ``mean + center_offset``.
    """
    if len(asset) == 0:
        raise ValueError("cannot recenter an empty asset")
    center = (asset.bbox_min + asset.bbox_max) / 2.0
    means = (asset.means.astype(np.float64) - center).astype(np.float32)
    return replace(
        asset,
        means=means,
        center_offset=np.asarray(asset.center_offset, dtype=np.float64) + center,
    )


def compute_sampling_distances(
    asset: Asset, fov: float, p_near: float = 0.9, p_far: float = 0.05
) -> tuple[float, float]:
    """Camera distances at which the bbox diagonal covers fractions p of the image.

    ``fov`` is the full (diagonal) field of view in radians; d = r / (tan(fov/2) * p)
    with r the asset's bound radius.
    """
    if not 0.0 < fov < math.pi:
        raise ValueError(f"fov must be in (0, pi), got {fov}")
    if not 0.0 < p_far < p_near <= 1.0:
        raise ValueError(f"need 0 < p_far < p_near <= 1, got p_near={p_near} p_far={p_far}")
    r = asset.bound_radius
    if r <= 0.0:
        raise ValueError("degenerate asset: bound radius is zero")
    t = math.tan(fov / 2.0)
    return r / (t * p_near), r / (t * p_far)


def prepare(
    asset: Asset,
    prune_threshold: float = DEFAULT_PRUNE_THRESHOLD,
    fov: float = math.radians(60.0),
    p_near: float = 0.9,
    p_far: float = 0.05,
) -> Asset:
    """Full prep pipeline: prune, then recenter, then set sampling distances."""
    out = recenter(prune(asset, prune_threshold))
    d_near, d_far = compute_sampling_distances(out, fov, p_near, p_far)
    return replace(out, d_near=d_near, d_far=d_far)
