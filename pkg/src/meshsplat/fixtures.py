"""Procedural test-fixture head rig.

An ellipsoid "head" (y up, face looking along +z) built as an open
latitude/longitude grid, with a single rectangular UV chart, smooth random
expression blendshapes, and skinning regions for neck, jaw, and two eye
patches. Small enough to rasterize quickly, rich enough to exercise every
rig code path (seams, blended weights, all five joints).
"""

from __future__ import annotations

import numpy as np

from .rig import JOINT_NAMES, JOINT_PARENTS, TemplateRig

# Head half-axes in meters (x: width, y: height, z: depth).
_RADII = np.array([0.085, 0.105, 0.095])

# UV chart box; keeping a margin leaves invalid texels around the chart,
# which the map/mask plumbing must handle.
_U0, _U1 = 0.04, 0.96
_V0, _V1 = 0.06, 0.94


def make_fixture_rig(n_lat: int = 14, n_lon: int = 28,
                     n_expressions: int = 12, seed: int = 0) -> TemplateRig:
    rng = np.random.default_rng(seed)

    lat = np.linspace(0.12 * np.pi, 0.88 * np.pi, n_lat + 1)   # open poles
    lon = np.arange(n_lon) / n_lon * 2 * np.pi
    theta, phi = np.meshgrid(lat, lon, indexing="ij")           # (rows, cols)
    # y is the polar axis; phi = 0 faces +z.
    x = _RADII[0] * np.sin(theta) * np.sin(phi)
    y = _RADII[1] * np.cos(theta)
    z = _RADII[2] * np.sin(theta) * np.cos(phi)
    vertices = np.stack([x, y, z], axis=-1).reshape(-1, 3)

    def vid(i, j):
        return i * n_lon + (j % n_lon)

    def uv(i, j):
        # j may equal n_lon on the seam; per-corner UVs keep it unwrapped.
        u = _U0 + (j / n_lon) * (_U1 - _U0)
        v = _V0 + (i / n_lat) * (_V1 - _V0)
        return (u, v)

    faces, uv_coords = [], []
    for i in range(n_lat):
        for j in range(n_lon):
            a, b, c, d = (vid(i, j), vid(i, j + 1),
                          vid(i + 1, j), vid(i + 1, j + 1))
            faces.append([a, b, c])
            uv_coords.append([uv(i, j), uv(i, j + 1), uv(i + 1, j)])
            faces.append([b, d, c])
            uv_coords.append([uv(i, j + 1), uv(i + 1, j + 1), uv(i + 1, j)])
    faces = np.asarray(faces, dtype=np.int64)
    uv_coords = np.asarray(uv_coords, dtype=np.float64)

    n_verts = vertices.shape[0]
    basis = _smooth_basis(rng, vertices, n_expressions)

    joint_rest = np.array([
        [0.0, 0.0, 0.0],        # glob: head origin
        [0.0, -0.09, -0.01],    # neck
        [0.0, -0.04, 0.04],     # jaw hinge
        [-0.032, 0.02, 0.075],  # eye_l
        [0.032, 0.02, 0.075],   # eye_r
    ])
    weights = _skin_weights(vertices, joint_rest)

    return TemplateRig(vertices=vertices, faces=faces, uv_coords=uv_coords,
                       blendshape_basis=basis, joint_rest=joint_rest,
                       skin_weights=weights, joint_names=JOINT_NAMES,
                       joint_parents=JOINT_PARENTS)


def _smooth_basis(rng, vertices: np.ndarray, n_expressions: int):
    """Low-frequency random displacement fields, ~4 mm at |psi| = 1."""
    n_verts = vertices.shape[0]
    basis = np.zeros((3 * n_verts, n_expressions))
    for k in range(n_expressions):
        disp = np.zeros((n_verts, 3))
        for _ in range(3):
            freq = rng.normal(scale=18.0, size=3)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.normal(scale=0.0022, size=3)
            s = np.sin(vertices @ freq + phase)
            disp += s[:, None] * amp
        basis[:, k] = disp.reshape(-1)
    return basis


def _skin_weights(vertices: np.ndarray, joint_rest: np.ndarray):
    """Smooth region weights: neck ramp at the bottom, jaw on the lower
    front, small eye patches; remainder to glob. Rows normalized to 1."""
    n = vertices.shape[0]
    w = np.zeros((n, 5))
    y = vertices[:, 1]
    z = vertices[:, 2]

    def sig(a):
        return 1.0 / (1.0 + np.exp(-a))

    w_neck = 0.9 * sig((-0.055 - y) / 0.012)
    w_jaw = 0.8 * sig((-0.015 - y) / 0.01) * sig((z - 0.02) / 0.012)
    d_l = np.linalg.norm(vertices - joint_rest[3], axis=1)
    d_r = np.linalg.norm(vertices - joint_rest[4], axis=1)
    w_eye_l = 0.95 * sig((0.024 - d_l) / 0.004)
    w_eye_r = 0.95 * sig((0.024 - d_r) / 0.004)

    w[:, 1] = w_neck
    w[:, 2] = w_jaw * (1 - w_neck)
    w[:, 3] = w_eye_l
    w[:, 4] = w_eye_r
    w[:, 0] = np.clip(1.0 - w[:, 1:].sum(axis=1), 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    return w


def make_uv_texture(height: int, width: int, seed: int) -> np.ndarray:
    """Smooth random RGB field in [0,1] for benchmark albedo maps."""
    rng = np.random.default_rng(seed)
    jj, ii = np.meshgrid(np.arange(width), np.arange(height))
    u = (jj + 0.5) / width
    v = (ii + 0.5) / height
    img = np.full((height, width, 3), 0.5)
    for _ in range(6):
        freq = rng.uniform(-9, 9, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.04, 0.16, size=3)
        wave = np.sin(u * freq[0] + v * freq[1] + phase)
        img += wave[:, :, None] * amp
    return np.clip(img, 0.02, 0.98)
