"""The 13-channel UV Gaussian parameter map and its surfel decoding.

Raw channel layout per texel: [δx(3), c(3), q(4), s(2), o(1)].
Activations: δx = max_offset·tanh, color/opacity = sigmoid, quaternion
normalized (identity fallback below 1e-8 norm), scales =
texel_extent·exp(clamp(s, −6, 3)). A raw-zero texel therefore decodes to a
one-texel-sized, half-opaque grey disk sitting exactly on its anchor.

decode_surfels flattens valid texels in row-major order; the surfel
rotation is frame-quaternion ⊗ activated local quaternion, and the center
is anchor + [t_u t_v n] · δx (tangent-frame offsets).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError
from .imageio import atomic_write_bytes
from .rig import SurfaceFrames
from .transforms import (quat_left_matrix, quat_multiply, quat_normalize,
                         normalize_jacobian)
from .validation import check_array

GMAP_MAGIC = b"GMAP"
GMAP_VERSION = 1

N_CHANNELS = 13
SL_DELTA = slice(0, 3)
SL_COLOR = slice(3, 6)
SL_QUAT = slice(6, 10)
SL_SCALE = slice(10, 12)
CH_OPACITY = 12

SCALE_CLAMP = (-6.0, 3.0)
DEFAULT_MAX_OFFSET = 0.02
_OPACITY_CLIP = 1e-12


@dataclass
class GaussianMap:
    """Raw (pre-activation) parameter map plus validity mask."""

    raw: np.ndarray   # (H, W, 13) float
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        raw = np.asarray(self.raw)
        if raw.ndim != 3 or raw.shape[2] != N_CHANNELS:
            raise ContractError(
                f"GaussianMap raw: expected (H, W, {N_CHANNELS}), "
                f"got {raw.shape}")
        if not np.all(np.isfinite(raw)):
            raise ContractError("GaussianMap raw: non-finite values")
        self.raw = raw
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != raw.shape[:2]:
            raise ContractError("GaussianMap mask: shape mismatch with raw")

    @property
    def height(self) -> int:
        return self.raw.shape[0]

    @property
    def width(self) -> int:
        return self.raw.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


@dataclass
class SurfelSet:
    """Decoded world-space 2D Gaussian surfels, one per valid texel."""

    centers: np.ndarray        # (N, 3)
    rotations: np.ndarray      # (N, 4) unit quaternions
    scales: np.ndarray         # (N, 2) meters, > 0
    colors: np.ndarray         # (N, 3) in [0,1]
    opacities: np.ndarray      # (N,) in (0,1)
    texel_indices: np.ndarray  # (N,) flat row-major texel ids

    def __post_init__(self):
        n = self.centers.shape[0]
        self.centers = check_array(self.centers, "centers", shape=(n, 3))
        self.rotations = check_array(self.rotations, "rotations",
                                     shape=(n, 4))
        self.scales = check_array(self.scales, "scales", shape=(n, 2))
        self.colors = check_array(self.colors, "colors", shape=(n, 3))
        self.opacities = check_array(self.opacities, "opacities", shape=(n,))
        self.texel_indices = np.asarray(self.texel_indices, dtype=np.int64)
        if self.texel_indices.shape != (n,):
            raise ContractError("texel_indices: shape mismatch")
        if n:
            norms = np.linalg.norm(self.rotations, axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-6:
                raise ContractError("rotations: not unit quaternions")
            if self.scales.min() <= 0:
                raise ContractError("scales: must be positive")
            if self.opacities.min() <= 0 or self.opacities.max() >= 1:
                raise ContractError("opacities: must lie in (0, 1)")

    def __len__(self) -> int:
        return self.centers.shape[0]


def activate(raw: np.ndarray, texel_extent: np.ndarray,
             max_offset: float = DEFAULT_MAX_OFFSET):
    """Raw 13-vector(s) -> dict of activated parameter arrays.

    Broadcasts over leading axes; texel_extent supplies the metric scale
    unit per axis.
    """
    raw = check_array(raw, "raw", dtype=np.float64)
    if raw.shape[-1] != N_CHANNELS:
        raise ContractError(f"activate: last axis must be {N_CHANNELS}")
    extent = np.asarray(texel_extent, dtype=np.float64)

    delta = max_offset * np.tanh(raw[..., SL_DELTA])
    color = _sigmoid(raw[..., SL_COLOR])
    quat = quat_normalize(raw[..., SL_QUAT])
    s_clamped = np.clip(raw[..., SL_SCALE], *SCALE_CLAMP)
    scales = extent * np.exp(s_clamped)
    opacity = np.clip(_sigmoid(raw[..., CH_OPACITY]),
                      _OPACITY_CLIP, 1.0 - _OPACITY_CLIP)
    return {"delta": delta, "color": color, "quat": quat,
            "scales": scales, "opacity": opacity}


def activate_backward(raw: np.ndarray, texel_extent: np.ndarray,
                      max_offset: float, g_delta, g_color, g_quat,
                      g_scales, g_opacity) -> np.ndarray:
    """Adjoint of activate; returns gradient wrt the raw channels."""
    raw = np.asarray(raw, dtype=np.float64)
    extent = np.asarray(texel_extent, dtype=np.float64)
    d_raw = np.zeros_like(raw)

    th = np.tanh(raw[..., SL_DELTA])
    d_raw[..., SL_DELTA] = g_delta * max_offset * (1.0 - th * th)

    c = _sigmoid(raw[..., SL_COLOR])
    d_raw[..., SL_COLOR] = g_color * c * (1.0 - c)

    J = normalize_jacobian(raw[..., SL_QUAT])  # symmetric projector/|q|
    d_raw[..., SL_QUAT] = np.einsum("...ij,...i->...j", J, g_quat)

    s_raw = raw[..., SL_SCALE]
    live = (s_raw > SCALE_CLAMP[0]) & (s_raw < SCALE_CLAMP[1])
    scales = extent * np.exp(np.clip(s_raw, *SCALE_CLAMP))
    d_raw[..., SL_SCALE] = np.where(live, g_scales * scales, 0.0)

    o = _sigmoid(raw[..., CH_OPACITY])
    live_o = (o > _OPACITY_CLIP) & (o < 1.0 - _OPACITY_CLIP)
    d_raw[..., CH_OPACITY] = np.where(live_o, g_opacity * o * (1.0 - o), 0.0)
    return d_raw


def decode_surfels(gmap: GaussianMap, frames: SurfaceFrames,
                   max_offset: float = DEFAULT_MAX_OFFSET) -> SurfelSet:
    """Activate raw texels and anchor them to the posed surface frames."""
    _check_mask(gmap, frames)
    flat = frames.valid_flat_indices()
    h, w = gmap.height, gmap.width
    raw = gmap.raw.reshape(h * w, N_CHANNELS)[flat].astype(np.float64)
    ext = frames.texel_extent.reshape(h * w, 2)[flat]
    act = activate(raw, ext, max_offset)

    anchors = frames.anchors.reshape(h * w, 3)[flat]
    t_u = frames.t_u.reshape(h * w, 3)[flat]
    t_v = frames.t_v.reshape(h * w, 3)[flat]
    nrm = frames.normals.reshape(h * w, 3)[flat]
    fq = frames.frame_quats.reshape(h * w, 4)[flat]

    d = act["delta"]
    centers = (anchors + d[:, 0:1] * t_u + d[:, 1:2] * t_v
               + d[:, 2:3] * nrm)
    rotations = quat_multiply(fq, act["quat"])
    return SurfelSet(centers=centers, rotations=rotations,
                     scales=act["scales"], colors=act["color"],
                     opacities=act["opacity"], texel_indices=flat)


def decode_backward(gmap: GaussianMap, frames: SurfaceFrames,
                    max_offset: float, d_center, d_rotation, d_scales,
                    d_color, d_opacity) -> np.ndarray:
    """Adjoint of decode_surfels: per-surfel gradients -> (H, W, 13) map.

    Invalid texels receive zero gradient.
    """
    _check_mask(gmap, frames)
    flat = frames.valid_flat_indices()
    h, w = gmap.height, gmap.width
    raw = gmap.raw.reshape(h * w, N_CHANNELS)[flat].astype(np.float64)
    ext = frames.texel_extent.reshape(h * w, 2)[flat]
    t_u = frames.t_u.reshape(h * w, 3)[flat]
    t_v = frames.t_v.reshape(h * w, 3)[flat]
    nrm = frames.normals.reshape(h * w, 3)[flat]
    fq = frames.frame_quats.reshape(h * w, 4)[flat]

    g_delta = np.stack([(d_center * t_u).sum(axis=1),
                        (d_center * t_v).sum(axis=1),
                        (d_center * nrm).sum(axis=1)], axis=1)
    # rotation = fq ⊗ q_act is linear in q_act: chain through the left
    # multiplication matrix.
    L = quat_left_matrix(fq)
    g_qact = np.einsum("nij,ni->nj", L, d_rotation)

    d_raw_flat = activate_backward(raw, ext, max_offset, g_delta, d_color,
                                   g_qact, d_scales, d_opacity)
    out = np.zeros((h * w, N_CHANNELS))
    out[flat] = d_raw_flat
    return out.reshape(h, w, N_CHANNELS)


def _check_mask(gmap: GaussianMap, frames: SurfaceFrames) -> None:
    if (gmap.height, gmap.width) != (frames.height, frames.width):
        raise ContractError("decode: map and frames disagree on H×W")
    if not np.array_equal(gmap.mask, frames.valid):
        raise ContractError("decode: map mask does not match frame validity")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


# ---------------------------------------------------------------------------
# GMAP persistence (bit-exact round-trip; payload is f32).

def save_gmap(path, gmap: GaussianMap) -> None:
    h, w = gmap.height, gmap.width
    header = struct.pack("<4sIII", GMAP_MAGIC, GMAP_VERSION, h, w)
    payload = gmap.raw.astype("<f4").tobytes(order="C")
    mask = gmap.mask.astype(np.uint8).tobytes(order="C")
    atomic_write_bytes(path, header + payload + mask)


def load_gmap(path) -> GaussianMap:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != GMAP_MAGIC:
        raise ContractError(f"{path}: not a GMAP file")
    version, h, w = struct.unpack("<III", data[4:16])
    if version != GMAP_VERSION:
        raise ContractError(f"{path}: unsupported GMAP version {version}")
    n = h * w
    want = 16 + n * N_CHANNELS * 4 + n
    if len(data) != want:
        raise ContractError(f"{path}: truncated GMAP payload")
    raw = np.frombuffer(data, dtype="<f4", offset=16,
                        count=n * N_CHANNELS).reshape(h, w, N_CHANNELS)
    mask = np.frombuffer(data, dtype=np.uint8,
                         offset=16 + n * N_CHANNELS * 4).reshape(h, w)
    return GaussianMap(raw=raw.copy(), mask=mask.astype(bool))
