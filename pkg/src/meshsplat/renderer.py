"""Differentiable 2D Gaussian surfel rasterizer.

Forward model, per pixel ray r(τ) = τ·d in camera space:
  - intersect the surfel plane: τ = (μ·r3)/(d·r3), skip |d·r3| < 1e-12;
  - tangent coordinates u = δ·r1/s_u, v = δ·r2/s_v with δ = τd − μ;
  - weight g = exp(−ρ/2) with ρ = min(u²+v², ‖px−π(μ)‖²/σ_lp²), the
    second term a 0.5 px screen-space low-pass floor on the footprint;
  - α = min(opacity·g, 0.999); cull α < 1/255 or τ outside [near, far];
  - sort by τ ascending (ties: lower surfel index first), composite
    front-to-back: C = Σ α_i T_i c_i + T_final·background,
    T_i = Π_{j<i}(1−α_j), ω_i = α_i T_i.
Expected depth = Σω_i z_i / max(Σω, ε); normal map = normalize(Σω_i n_i)
with surfel normals flipped toward the camera.

The tiled path bins surfels into 16×16 pixel tiles by the projected
bounding box of their α ≥ 1/255 footprint; candidates that fail culling
contribute exact zeros, so tiled and brute-force outputs are bit-identical.
The backward pass is hand-derived and exact for the forward equations with
the sort order held fixed; it additionally accepts upstream gradients on
the per-pixel intersection records so the geometry regularizers can be
composed without a second pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .gaussian_map import SurfelSet
from .parallel import map_ordered, thread_count
from .transforms import (normalize_jacobian, quat_normalize,
                         rotation_from_quat, rotation_quat_jacobian)
from .validation import check_array

logger = logging.getLogger(__name__)

ALPHA_CULL = 1.0 / 255.0
ALPHA_CLAMP = 0.999
DENOM_EPS = 1e-12
LOWPASS_SIGMA = 0.5      # px
MU_Z_EPS = 1e-6
DEPTH_EPS = 1e-8
NORMAL_EPS = 1e-12
TILE_SIZE = 16
_BRUTE_CHUNK = 2048      # pixels per block on the reference path


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid transform.

    Pixel (i, j) has its center at continuous coordinates
    (j + 0.5, i + 0.5); rays are d = ((x−cx)/fx, (y−cy)/fy, 1).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3, 3), x_cam = R x_world + t
    translation: np.ndarray  # (3,)
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        for name in ("fx", "fy"):
            if getattr(self, name) <= 0:
                raise ContractError(f"camera: {name} must be > 0")
        if not (0 < self.near < self.far):
            raise ContractError("camera: need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ContractError("camera: image size must be >= 1")
        self.rotation = check_array(self.rotation, "camera rotation",
                                    shape=(3, 3))
        self.translation = check_array(self.translation,
                                       "camera translation", shape=(3,))
        dev = np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3)))
        if dev > 1e-4 or np.linalg.det(self.rotation) < 0:
            raise ContractError(
                f"camera rotation not orthonormal (dev {dev:g}) or improper")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T \
            + self.translation

    def pixel_dirs(self) -> np.ndarray:
        """(H, W, 3) camera-space ray directions with z = 1."""
        jj, ii = np.meshgrid(np.arange(self.width), np.arange(self.height))
        dx = (jj + 0.5 - self.cx) / self.fx
        dy = (ii + 0.5 - self.cy) / self.fy
        return np.stack([dx, dy, np.ones_like(dx)], axis=-1)

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def look_at(eye, target, up=(0.0, 1.0, 0.0), *, fx, fy, cx, cy,
                width, height, near=0.01, far=100.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        zc = target - eye
        zn = np.linalg.norm(zc)
        if zn < 1e-12:
            raise ContractError("look_at: eye and target coincide")
        zc = zc / zn
        xc = np.cross(-up, zc)
        xn = np.linalg.norm(xc)
        if xn < 1e-9:
            raise ContractError("look_at: view direction parallel to up")
        xc = xc / xn
        yc = np.cross(zc, xc)
        rot = np.stack([xc, yc, zc], axis=0)
        return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                      rotation=rot, translation=-rot @ eye, near=near,
                      far=far)


@dataclass
class RenderGrads:
    """Upstream gradients for rasterize_backward. Image-shaped fields
    follow RenderOutput; rec_* fields share its record layout."""

    rgb: np.ndarray | None = None        # (H, W, 3)
    alpha: np.ndarray | None = None      # (H, W)
    depth: np.ndarray | None = None      # (H, W)
    normal: np.ndarray | None = None     # (H, W, 3)
    rec_omega: np.ndarray | None = None  # (R,)
    rec_z: np.ndarray | None = None      # (R,)
    rec_normal: np.ndarray | None = None  # (R, 3)


@dataclass
class GradientBuffer:
    """Per-surfel partials, same layout as the input SurfelSet."""

    d_center: np.ndarray
    d_rotation: np.ndarray
    d_scales: np.ndarray
    d_color: np.ndarray
    d_opacity: np.ndarray

    @staticmethod
    def zeros(n: int) -> "GradientBuffer":
        return GradientBuffer(np.zeros((n, 3)), np.zeros((n, 4)),
                              np.zeros((n, 2)), np.zeros((n, 3)),
                              np.zeros(n))


@dataclass
class _BlockAux:
    y0: int
    y1: int
    x0: int
    x1: int
    cand: np.ndarray      # (K,) candidate surfel ids
    rec_rows: np.ndarray  # (R_b,) global record rows, block-local order
    geo: dict | None      # sparse forward geometry cache


@dataclass
class _RenderAux:
    prep: dict
    blocks: list
    n_surfels: int


@dataclass
class RenderOutput:
    """Rasterization result plus per-pixel intersection records.

    Records are CSR-indexed by flat pixel id (row-major): the records of
    pixel p are rows rec_start[p]:rec_start[p+1], depth-sorted.
    """

    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    camera: Camera
    background: np.ndarray
    rec_start: np.ndarray   # (H*W + 1,)
    rec_pixel: np.ndarray   # (R,)
    rec_surfel: np.ndarray  # (R,)
    rec_omega: np.ndarray   # (R,)
    rec_z: np.ndarray       # (R,)
    rec_normal: np.ndarray  # (R, 3)
    _aux: _RenderAux | None = field(default=None, repr=False)

    @property
    def n_records(self) -> int:
        return self.rec_omega.shape[0]


def _prepare(surfels: SurfelSet, camera: Camera) -> dict:
    """Camera-space surfel quantities shared by forward and backward."""
    q_raw = surfels.rotations
    norms = np.linalg.norm(q_raw, axis=1)
    if q_raw.shape[0] and norms.min() < 1e-8:
        raise ContractError("rasterize: zero-norm surfel rotation")
    q_unit = q_raw / norms[:, None]
    R_w = rotation_from_quat(q_unit)                   # (N, 3, 3)
    R_c = np.einsum("ab,nbc->nac", camera.rotation, R_w)
    mu_c = surfels.centers @ camera.rotation.T + camera.translation
    op = surfels.opacities
    # Footprint radius for binning: α = op·exp(−ρ/2) ≥ 1/255.
    r_eff = np.sqrt(np.maximum(2.0 * np.log(np.maximum(op, 1e-300) * 255.0),
                               0.0)) + 1e-3
    return {
        "q_raw": q_raw, "q_unit": q_unit,
        "mu": mu_c,
        "r1": R_c[:, :, 0], "r2": R_c[:, :, 1], "r3": R_c[:, :, 2],
        "s": surfels.scales, "color": surfels.colors, "op": op,
        "r_eff": r_eff,
    }


def _blocks_for(camera: Camera, tile_size: int):
    blocks = []
    for y0 in range(0, camera.height, tile_size):
        for x0 in range(0, camera.width, tile_size):
            blocks.append((y0, min(y0 + tile_size, camera.height),
                           x0, min(x0 + tile_size, camera.width)))
    return blocks


def _bin_surfels(prep: dict, camera: Camera, tile_size: int):
    """Per-tile candidate id lists (ascending surfel id within each tile)."""
    n = prep["mu"].shape[0]
    ntx = (camera.width + tile_size - 1) // tile_size
    nty = (camera.height + tile_size - 1) // tile_size
    if n == 0:
        return [np.empty(0, dtype=np.int64)] * (ntx * nty)

    mu, r1, r2 = prep["mu"], prep["r1"], prep["r2"]
    s, reff = prep["s"], prep["r_eff"]
    keep = prep["op"] >= ALPHA_CULL

    e1 = (reff * s[:, 0])[:, None] * r1
    e2 = (reff * s[:, 1])[:, None] * r2
    corners = np.stack([mu + e1 + e2, mu + e1 - e2,
                        mu - e1 + e2, mu - e1 - e2], axis=1)  # (N, 4, 3)
    cz = corners[:, :, 2]
    behind = (cz <= MU_Z_EPS).any(axis=1)

    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.fx * corners[:, :, 0] / cz + camera.cx
        py = camera.fy * corners[:, :, 1] / cz + camera.cy
    x_lo = np.where(behind, -np.inf, px.min(axis=1))
    x_hi = np.where(behind, np.inf, px.max(axis=1))
    y_lo = np.where(behind, -np.inf, py.min(axis=1))
    y_hi = np.where(behind, np.inf, py.max(axis=1))

    # Union with the screen-space low-pass disk around the projection.
    front = mu[:, 2] > MU_Z_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        mx = camera.fx * mu[:, 0] / mu[:, 2] + camera.cx
        my = camera.fy * mu[:, 1] / mu[:, 2] + camera.cy
    disk = reff * LOWPASS_SIGMA
    x_lo = np.where(front, np.minimum(x_lo, mx - disk), x_lo)
    x_hi = np.where(front, np.maximum(x_hi, mx + disk), x_hi)
    y_lo = np.where(front, np.minimum(y_lo, my - disk), y_lo)
    y_hi = np.where(front, np.maximum(y_hi, my + disk), y_hi)

    tx0 = np.clip(np.floor((x_lo - 0.5) / tile_size), 0, ntx - 1)
    tx1 = np.clip(np.floor((x_hi - 0.5) / tile_size), 0, ntx - 1)
    ty0 = np.clip(np.floor((y_lo - 0.5) / tile_size), 0, nty - 1)
    ty1 = np.clip(np.floor((y_hi - 0.5) / tile_size), 0, nty - 1)
    # Surfels whose bbox misses the image entirely.
    miss = (x_hi < 0.5) | (x_lo > camera.width - 0.5) | \
           (y_hi < 0.5) | (y_lo > camera.height - 0.5) | ~keep
    tx0 = tx0.astype(np.int64)
    tx1 = tx1.astype(np.int64)
    ty0 = ty0.astype(np.int64)
    ty1 = ty1.astype(np.int64)

    wids = np.where(miss, 0, tx1 - tx0 + 1)
    hgts = np.where(miss, 0, ty1 - ty0 + 1)
    reps = wids * hgts
    total = int(reps.sum())
    if total == 0:
        return [np.empty(0, dtype=np.int64)] * (ntx * nty)

    sid = np.repeat(np.arange(n), reps)
    starts = np.concatenate([[0], np.cumsum(reps)[:-1]])
    local = np.arange(total) - np.repeat(starts, reps)
    wrep = np.repeat(wids, reps)
    tile_x = np.repeat(tx0, reps) + local % np.maximum(wrep, 1)
    tile_y = np.repeat(ty0, reps) + local // np.maximum(wrep, 1)
    tile_id = tile_y * ntx + tile_x

    order = np.argsort(tile_id, kind="stable")
    tile_sorted = tile_id[order]
    sid_sorted = sid[order]
    bounds = np.searchsorted(tile_sorted, np.arange(ntx * nty + 1))
    return [sid_sorted[bounds[t]:bounds[t + 1]] for t in range(ntx * nty)]


def _seg_sum(cols, vals, k):
    """Per-candidate sums of record values: (R,) or (R, C) -> (K,) / (K, C)."""
    if vals.ndim == 1:
        return np.bincount(cols, weights=vals, minlength=k)
    return np.stack([np.bincount(cols, weights=vals[:, i], minlength=k)
                     for i in range(vals.shape[1])], axis=1)


def _block_geometry(prep: dict, camera: Camera, block, cand: np.ndarray):
    """Forward quantities for one pixel block, compacted to live records.

    The (pixel, candidate) culling test is evaluated densely; everything
    past it — depth sort, transmittance, compositing weights — lives on
    the surviving records only. Per-pixel scans run over a (P, kmax)
    matrix padded with the reduction identity, so the arithmetic order
    per pixel is the same as a dense sorted sweep. The backward pass
    reuses this dict instead of recomputing it.
    """
    y0, y1, x0, x1 = block
    jj, ii = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
    px_x = jj.reshape(-1) + 0.5
    px_y = ii.reshape(-1) + 0.5
    d = np.stack([(px_x - camera.cx) / camera.fx,
                  (px_y - camera.cy) / camera.fy,
                  np.ones(px_x.shape[0])], axis=1)        # (P, 3)
    p = d.shape[0]
    k = cand.shape[0]

    mu = prep["mu"][cand]
    r1 = prep["r1"][cand]
    r2 = prep["r2"][cand]
    r3 = prep["r3"][cand]
    s = prep["s"][cand]
    op = prep["op"][cand]

    denom = d @ r3.T                                      # (P, K)
    num = (mu * r3).sum(axis=1)                           # (K,)
    live = np.abs(denom) >= DENOM_EPS
    denom_safe = np.where(live, denom, 1.0)
    tau = np.where(live, num[None, :] / denom_safe, 0.0)

    # u = δ·r1/s_u with δ = τd − μ, expanded so no (P, K, 3) temporary
    # is materialized: δ·r1 = τ(d·r1) − μ·r1.
    u = (tau * (d @ r1.T) - (mu * r1).sum(axis=1)[None, :]) \
        / s[:, 0][None, :]
    v = (tau * (d @ r2.T) - (mu * r2).sum(axis=1)[None, :]) \
        / s[:, 1][None, :]
    rho3 = u * u + v * v

    front = mu[:, 2] > MU_Z_EPS
    muz = np.where(front, mu[:, 2], 1.0)
    pi = np.stack([camera.fx * mu[:, 0] / muz + camera.cx,
                   camera.fy * mu[:, 1] / muz + camera.cy], axis=1)
    dpx_x = px_x[:, None] - pi[None, :, 0]
    dpx_y = px_y[:, None] - pi[None, :, 1]
    rho2 = np.where(front[None, :],
                    (dpx_x * dpx_x + dpx_y * dpx_y) / (LOWPASS_SIGMA ** 2),
                    np.inf)
    branch2 = rho2 < rho3
    rho = np.where(branch2, rho2, rho3)

    g = np.exp(-0.5 * rho)
    alpha_raw = op[None, :] * g
    alpha = np.minimum(alpha_raw, ALPHA_CLAMP)
    ok = live & (alpha >= ALPHA_CULL) & (tau >= camera.near) & \
        (tau <= camera.far)

    prow, pcol = np.nonzero(ok)
    # Depth order within each pixel; lexsort is stable, and the nonzero
    # stream is candidate-ascending, so equal depths keep the lower
    # surfel index first (brute and tiled agree on tie order).
    o = np.lexsort((tau[prow, pcol], prow))
    rows = prow[o]
    cols = pcol[o]
    z_r = tau[rows, cols]
    a_r = alpha[rows, cols]
    n_rec = rows.shape[0]

    cnt = np.bincount(rows, minlength=p)
    start = np.concatenate([[0], np.cumsum(cnt)]).astype(np.int64)
    slot = np.arange(n_rec, dtype=np.int64) - start[rows]
    kmax = int(cnt.max()) if n_rec else 0

    pad = np.ones((p, kmax))
    pad[rows, slot] = 1.0 - a_r
    cp = np.cumprod(pad, axis=1)
    T_r = np.where(slot == 0, 1.0, cp[rows, np.maximum(slot - 1, 0)])
    T_final = cp[:, -1] if kmax else np.ones(p)
    w_r = a_r * T_r

    flip_r = np.where(denom[rows, cols] > 0, -1.0, 1.0)
    n_r = flip_r[:, None] * r3[cols]
    color_r = prep["color"][cand[cols]]
    delta_r = z_r[:, None] * d[rows] - mu[cols]
    dpx_r = np.stack([dpx_x[rows, cols], dpx_y[rows, cols]], axis=1)

    alpha_img = np.bincount(rows, weights=w_r, minlength=p)
    zsum = np.bincount(rows, weights=w_r * z_r, minlength=p)
    nsum = np.stack([np.bincount(rows, weights=w_r * n_r[:, i], minlength=p)
                     for i in range(3)], axis=1)

    return {
        "p": p, "k": k, "d": d, "mu": mu, "r1": r1, "r2": r2, "r3": r3,
        "s": s, "op": op, "front": front, "muz": muz,
        "rows": rows, "cols": cols, "slot": slot, "cnt": cnt,
        "start": start, "kmax": kmax,
        "a_r": a_r, "z_r": z_r, "T_r": T_r, "w_r": w_r,
        "u_r": u[rows, cols], "v_r": v[rows, cols], "g_r": g[rows, cols],
        "branch2_r": branch2[rows, cols],
        "clamped_r": alpha_raw[rows, cols] > ALPHA_CLAMP,
        "denom_safe_r": denom_safe[rows, cols],
        "flip_r": flip_r, "n_r": n_r, "color_r": color_r,
        "delta_r": delta_r, "dpx_r": dpx_r,
        "T_final": T_final, "alpha_img": alpha_img, "zsum": zsum,
        "nsum": nsum,
    }


def _forward_block(prep, camera, background, block, cand):
    y0, y1, x0, x1 = block
    p = (y1 - y0) * (x1 - x0)
    if cand.shape[0] == 0:
        rgb = np.tile(background, (p, 1))
        return {
            "rgb": rgb, "alpha": np.zeros(p), "depth": np.zeros(p),
            "normal": np.zeros((p, 3)),
            "rec_pixel": np.empty(0, dtype=np.int64),
            "rec_surfel": np.empty(0, dtype=np.int64),
            "rec_omega": np.empty(0), "rec_z": np.empty(0),
            "rec_normal": np.empty((0, 3)),
            "geo": None,
        }
    geo = _block_geometry(prep, camera, block, cand)
    rows, w_r = geo["rows"], geo["w_r"]
    alpha, zsum, nsum = geo["alpha_img"], geo["zsum"], geo["nsum"]

    csum = np.stack(
        [np.bincount(rows, weights=w_r * geo["color_r"][:, i], minlength=p)
         for i in range(3)], axis=1)
    rgb = csum + geo["T_final"][:, None] * background
    depth = zsum / np.maximum(alpha, DEPTH_EPS)
    nu = np.linalg.norm(nsum, axis=1)
    normal = np.where(nu[:, None] > NORMAL_EPS,
                      nsum / np.maximum(nu, NORMAL_EPS)[:, None], 0.0)

    jj, ii = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
    flat_ids = (ii.reshape(-1) * camera.width + jj.reshape(-1))
    return {
        "rgb": rgb, "alpha": alpha, "depth": depth, "normal": normal,
        "rec_pixel": flat_ids[rows],
        "rec_surfel": cand[geo["cols"]],
        "rec_omega": w_r,
        "rec_z": geo["z_r"],
        "rec_normal": geo["n_r"],
        "geo": geo,
    }


def rasterize(surfels: SurfelSet, camera: Camera, background,
              mode: str = "tiled", tile_size: int = TILE_SIZE,
              threads: int | None = None) -> RenderOutput:
    """Render a SurfelSet. mode="tiled" is the fast path; mode="brute"
    evaluates every surfel against every pixel (reference oracle)."""
    background = check_array(background, "background", shape=(3,))
    if mode not in ("tiled", "brute"):
        raise ContractError(f"rasterize: unknown mode {mode!r}")
    prep = _prepare(surfels, camera)
    h, w = camera.height, camera.width

    if mode == "tiled":
        blocks = _blocks_for(camera, tile_size)
        cands = _bin_surfels(prep, camera, tile_size)
    else:
        rows = max(1, _BRUTE_CHUNK // max(w, 1))
        blocks = []
        for y0 in range(0, h, rows):
            blocks.append((y0, min(y0 + rows, h), 0, w))
        cands = [np.arange(len(surfels), dtype=np.int64)] * len(blocks)

    nthreads = thread_count(threads)
    results = map_ordered(
        lambda bc: _forward_block(prep, camera, background, bc[0], bc[1]),
        zip(blocks, cands), nthreads)

    rgb = np.empty((h, w, 3))
    alpha = np.empty((h, w))
    depth = np.empty((h, w))
    normal = np.empty((h, w, 3))
    for (y0, y1, x0, x1), res in zip(blocks, results):
        shape = (y1 - y0, x1 - x0)
        rgb[y0:y1, x0:x1] = res["rgb"].reshape(shape + (3,))
        alpha[y0:y1, x0:x1] = res["alpha"].reshape(shape)
        depth[y0:y1, x0:x1] = res["depth"].reshape(shape)
        normal[y0:y1, x0:x1] = res["normal"].reshape(shape + (3,))

    rec_pixel = np.concatenate([r["rec_pixel"] for r in results])
    rec_surfel = np.concatenate([r["rec_surfel"] for r in results])
    rec_omega = np.concatenate([r["rec_omega"] for r in results])
    rec_z = np.concatenate([r["rec_z"] for r in results])
    rec_normal = np.concatenate([r["rec_normal"] for r in results])

    perm = np.argsort(rec_pixel, kind="stable")
    inv_perm = np.empty_like(perm)
    inv_perm[perm] = np.arange(perm.shape[0])
    rec_pixel = rec_pixel[perm]
    rec_surfel = rec_surfel[perm]
    rec_omega = rec_omega[perm]
    rec_z = rec_z[perm]
    rec_normal = rec_normal[perm]
    counts = np.bincount(rec_pixel, minlength=h * w)
    rec_start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    aux_blocks = []
    offset = 0
    for (y0, y1, x0, x1), res, cand in zip(blocks, results, cands):
        nb = res["rec_pixel"].shape[0]
        aux_blocks.append(_BlockAux(y0, y1, x0, x1, cand,
                                    inv_perm[offset:offset + nb],
                                    res["geo"]))
        offset += nb

    return RenderOutput(
        rgb=rgb, alpha=alpha, depth=depth, normal=normal, camera=camera,
        background=background, rec_start=rec_start, rec_pixel=rec_pixel,
        rec_surfel=rec_surfel, rec_omega=rec_omega, rec_z=rec_z,
        rec_normal=rec_normal,
        _aux=_RenderAux(prep=prep, blocks=aux_blocks,
                        n_surfels=len(surfels)))


def _backward_block(prep, camera, background, baux: _BlockAux, grads,
                    rec_omega_up, rec_z_up, rec_normal_up):
    """Gradient contributions of one block, keyed by candidate id.

    All record-level math runs on the sparse forward cache; per-pixel
    suffix sums use the same identity-padded scan as the forward pass.
    """
    cand = baux.cand
    if cand.shape[0] == 0 or baux.geo is None:
        return None
    geo = baux.geo
    p, k = geo["p"], geo["k"]
    rows, cols, slot = geo["rows"], geo["cols"], geo["slot"]
    n_rec = rows.shape[0]

    sl = (slice(baux.y0, baux.y1), slice(baux.x0, baux.x1))
    gC = (np.zeros((p, 3)) if grads.rgb is None
          else grads.rgb[sl].reshape(p, 3).astype(np.float64))
    gA_up = (np.zeros(p) if grads.alpha is None
             else grads.alpha[sl].reshape(p).astype(np.float64))
    gD = (np.zeros(p) if grads.depth is None
          else grads.depth[sl].reshape(p).astype(np.float64))
    gN = (np.zeros((p, 3)) if grads.normal is None
          else grads.normal[sl].reshape(p, 3).astype(np.float64))

    gw_rec = np.zeros(n_rec)
    gz_rec = np.zeros(n_rec)
    gn_rec = np.zeros((n_rec, 3))
    if baux.rec_rows.shape[0]:
        if rec_omega_up is not None:
            gw_rec = rec_omega_up[baux.rec_rows].astype(np.float64)
        if rec_z_up is not None:
            gz_rec = rec_z_up[baux.rec_rows].astype(np.float64)
        if rec_normal_up is not None:
            gn_rec = rec_normal_up[baux.rec_rows].astype(np.float64)

    w_r, z_r, n_r, T_r = geo["w_r"], geo["z_r"], geo["n_r"], geo["T_r"]
    a_r, t_final = geo["a_r"], geo["T_final"]
    alpha_img, zsum, nsum = geo["alpha_img"], geo["zsum"], geo["nsum"]

    amax = np.maximum(alpha_img, DEPTH_EPS)
    nu = np.linalg.norm(nsum, axis=1)
    numask = nu > NORMAL_EPS
    nusafe = np.maximum(nu, NORMAL_EPS)
    nmap = nsum / nusafe[:, None]

    gZsum = gD / amax
    gA_fromD = np.where(alpha_img > DEPTH_EPS, -gD * zsum / (amax * amax),
                        0.0)
    gNsum = np.where(numask[:, None],
                     (gN - nmap * (nmap * gN).sum(1, keepdims=True))
                     / nusafe[:, None], 0.0)

    gw_tot = (gw_rec + (gC[rows] * geo["color_r"]).sum(-1)
              + gA_up[rows] + gA_fromD[rows] + gZsum[rows] * z_r
              + (gNsum[rows] * n_r).sum(-1))
    gz_tot = gz_rec + gZsum[rows] * w_r
    gn_tot = gn_rec + gNsum[rows] * w_r[:, None]
    gcolor_r = gC[rows] * w_r[:, None]

    # Through compositing: dL/dα_k = T_k gw_k − (S_{k+1} + gT·T_fin)/(1−α_k)
    # with S_i = Σ_{j≥i} gw_j ω_j suffix sums; (1−α) ≥ 0.001 by the clamp.
    gw_w = gw_tot * w_r
    pad = np.zeros((p, geo["kmax"]))
    pad[rows, slot] = gw_w
    suffc = np.cumsum(pad[:, ::-1], axis=1)[:, ::-1]
    g_tfin = (gC * background[None, :]).sum(axis=1)
    tail = suffc[rows, slot] - gw_w + (g_tfin * t_final)[rows]
    galpha = T_r * gw_tot - tail / (1.0 - a_r)

    live_g = ~geo["clamped_r"]
    op_r = geo["op"][cols]
    g_r = geo["g_r"]
    g_g = np.where(live_g, galpha * op_r, 0.0)
    g_op_r = np.where(live_g, galpha * g_r, 0.0)
    grho = -0.5 * g_r * g_g

    b2 = geo["branch2_r"]
    grho3 = np.where(b2, 0.0, grho)
    grho2 = np.where(b2, grho, 0.0)

    u_r, v_r, s = geo["u_r"], geo["v_r"], geo["s"]
    gu = 2.0 * u_r * grho3
    gv = 2.0 * v_r * grho3

    r1, r2, r3 = geo["r1"], geo["r2"], geo["r3"]
    delta_r, d = geo["delta_r"], geo["d"]
    inv_s1 = 1.0 / s[:, 0]
    inv_s2 = 1.0 / s[:, 1]
    gdelta = (gu[:, None] * (r1[cols] * inv_s1[cols, None])
              + gv[:, None] * (r2[cols] * inv_s2[cols, None]))
    gr1 = _seg_sum(cols, gu[:, None] * delta_r, k) * inv_s1[:, None]
    gr2 = _seg_sum(cols, gv[:, None] * delta_r, k) * inv_s2[:, None]
    gs1 = -_seg_sum(cols, gu * u_r, k) * inv_s1
    gs2 = -_seg_sum(cols, gv * v_r, k) * inv_s2

    # Screen-space low-pass branch: ρ2 = ‖px − π(μ)‖²/σ².
    gdpx = grho2[:, None] * (2.0 / LOWPASS_SIGMA ** 2) * geo["dpx_r"]
    gpi = -_seg_sum(cols, gdpx, k)                        # (K, 2)
    mu, muz, front = geo["mu"], geo["muz"], geo["front"]
    gmu_proj = np.zeros((k, 3))
    gmu_proj[:, 0] = np.where(front, gpi[:, 0] * camera.fx / muz, 0.0)
    gmu_proj[:, 1] = np.where(front, gpi[:, 1] * camera.fy / muz, 0.0)
    gmu_proj[:, 2] = np.where(
        front,
        -(gpi[:, 0] * camera.fx * mu[:, 0]
          + gpi[:, 1] * camera.fy * mu[:, 1]) / (muz * muz), 0.0)

    d_rows = d[rows]
    gtau = gz_tot + (gdelta * d_rows).sum(-1)
    denom_safe_r = geo["denom_safe_r"]
    gnum = gtau / denom_safe_r
    gden = -gtau * z_r / denom_safe_r

    gnum_k = _seg_sum(cols, gnum, k)
    gmu = -_seg_sum(cols, gdelta, k) + gnum_k[:, None] * r3 + gmu_proj
    gr3 = (gnum_k[:, None] * mu + _seg_sum(cols, gden[:, None] * d_rows, k)
           + _seg_sum(cols, geo["flip_r"][:, None] * gn_tot, k))
    g_color = _seg_sum(cols, gcolor_r, k)
    g_op = _seg_sum(cols, g_op_r, k)

    # Camera space -> world space; columns -> quaternion.
    rot = camera.rotation
    gmu_w = gmu @ rot
    gR_w = np.stack([gr1 @ rot, gr2 @ rot, gr3 @ rot], axis=-1)  # (K, 3, 3)
    jq = rotation_quat_jacobian(prep["q_unit"][cand])
    gq_unit = np.einsum("kij,kijq->kq", gR_w, jq)
    jn = normalize_jacobian(prep["q_raw"][cand])
    gq_raw = np.einsum("kij,ki->kj", jn, gq_unit)

    return {
        "cand": cand, "d_center": gmu_w, "d_rotation": gq_raw,
        "d_scales": np.stack([gs1, gs2], axis=1), "d_color": g_color,
        "d_opacity": g_op,
    }


def rasterize_backward(output: RenderOutput, grads: RenderGrads,
                       threads: int | None = None) -> GradientBuffer:
    """Exact analytic gradients of the forward compositing equations wrt
    every surfel parameter (sort order treated as fixed)."""
    aux = output._aux
    if aux is None:
        raise ContractError("rasterize_backward: output carries no forward "
                            "aux (was it deserialized?)")
    n_rec = output.n_records
    for name in ("rec_omega", "rec_z", "rec_normal"):
        arr = getattr(grads, name)
        if arr is not None and arr.shape[0] != n_rec:
            raise ContractError(
                f"rasterize_backward: grads.{name} has {arr.shape[0]} rows, "
                f"output has {n_rec} records")
    for name, shape in (("rgb", output.rgb.shape),
                        ("alpha", output.alpha.shape),
                        ("depth", output.depth.shape),
                        ("normal", output.normal.shape)):
        arr = getattr(grads, name)
        if arr is not None and arr.shape != shape:
            raise ContractError(
                f"rasterize_backward: grads.{name} shape {arr.shape} != "
                f"{shape}")

    buf = GradientBuffer.zeros(aux.n_surfels)
    nthreads = thread_count(threads)
    parts = map_ordered(
        lambda b: _backward_block(aux.prep, output.camera,
                                  output.background, b, grads,
                                  grads.rec_omega, grads.rec_z,
                                  grads.rec_normal),
        aux.blocks, nthreads)
    # Accumulate in fixed block order so results are thread-count invariant.
    for part in parts:
        if part is None:
            continue
        cand = part["cand"]
        buf.d_center[cand] += part["d_center"]
        buf.d_rotation[cand] += part["d_rotation"]
        buf.d_scales[cand] += part["d_scales"]
        buf.d_color[cand] += part["d_color"]
        buf.d_opacity[cand] += part["d_opacity"]
    return buf


# ---------------------------------------------------------------------------
# Geometry regularizers on the intersection records.

def depth_distortion(omega: np.ndarray, z: np.ndarray) -> float:
    """Σ_{i<j} ω_i ω_j |z_i − z_j| for one pixel's records (sorted by z)."""
    omega = check_array(omega, "omega", ndim=1)
    z = check_array(z, "z", ndim=1)
    if omega.shape != z.shape:
        raise ContractError("depth_distortion: omega/z length mismatch")
    if np.any(np.diff(z) < 0):
        raise ContractError("depth_distortion: records must be z-sorted")
    total = 0.0
    for i in range(len(z)):
        total += float(np.sum(omega[i] * omega[i + 1:]
                              * np.abs(z[i] - z[i + 1:])))
    return total


def depth_distortion_image(output: RenderOutput):
    """Image-level distortion loss: mean over pixels with alpha > 0.

    Returns (value, d_omega, d_z) with record-layout gradients.
    """
    n = output.n_records
    m = int(np.count_nonzero(output.alpha > 0.0))
    if n == 0 or m == 0:
        return 0.0, np.zeros(n), np.zeros(n)

    w = output.rec_omega
    z = output.rec_z
    pix = output.rec_pixel
    start = output.rec_start

    cw = np.concatenate([[0.0], np.cumsum(w)])
    cwz = np.concatenate([[0.0], np.cumsum(w * z)])
    seg0 = start[pix]
    seg1 = start[pix + 1]
    idx = np.arange(n)
    w_before = cw[idx] - cw[seg0]
    s_before = cwz[idx] - cwz[seg0]
    w_total = cw[seg1] - cw[seg0]
    s_total = cwz[seg1] - cwz[seg0]
    w_after = w_total - w_before - w
    s_after = s_total - s_before - w * z

    # Cumulative sums carry rounding noise; pixels with one record are
    # exactly zero by definition, so mask them out rather than leave dust.
    multi = (seg1 - seg0) > 1
    term = np.where(multi, z * w_before - s_before + s_after - z * w_after,
                    0.0)
    value = 0.5 * float(np.sum(w * term)) / m
    d_omega = term / m
    d_z = np.where(multi, w * (w_before - w_after) / m, 0.0)
    return value, d_omega, d_z


def normal_consistency_image(output: RenderOutput):
    """Σ_i ω_i (1 − n_iᵀN) against depth-map normals, mean over covered
    non-border pixels. N comes from central differences of the
    back-projected depth map, oriented toward the camera.

    Returns (value, d_omega, d_normal, d_depth).
    """
    cam = output.camera
    h, w = cam.height, cam.width
    n_rec = output.n_records
    zero = (0.0, np.zeros(n_rec), np.zeros((n_rec, 3)), np.zeros((h, w)))
    if h < 3 or w < 3 or n_rec == 0:
        return zero

    dirs = cam.pixel_dirs()
    pts = output.depth[:, :, None] * dirs
    dpdx = 0.5 * (pts[1:h - 1, 2:] - pts[1:h - 1, :w - 2])
    dpdy = 0.5 * (pts[2:, 1:w - 1] - pts[:h - 2, 1:w - 1])
    cr = np.cross(dpdx, dpdy)
    nrm = np.linalg.norm(cr, axis=-1)
    safe = np.maximum(nrm, NORMAL_EPS)
    nhat = np.where(nrm[:, :, None] > NORMAL_EPS, cr / safe[:, :, None], 0.0)
    ctr_dirs = dirs[1:h - 1, 1:w - 1]
    fl = np.where((nhat * ctr_dirs).sum(-1) > 0, -1.0, 1.0)
    nn = fl[:, :, None] * nhat                           # oriented N

    covered = output.alpha > 0.0
    valid_ctr = covered[1:h - 1, 1:w - 1]
    m = int(np.count_nonzero(valid_ctr))
    if m == 0:
        return zero

    # Per-pixel Σω_i and Σω_i n_i from the records.
    pix = output.rec_pixel
    wrec = output.rec_omega
    nsum = np.zeros((h * w, 3))
    for c in range(3):
        nsum[:, c] = np.bincount(pix, weights=wrec * output.rec_normal[:, c],
                                 minlength=h * w)
    nsum_img = nsum.reshape(h, w, 3)

    n_full = np.zeros((h, w, 3))
    n_full[1:h - 1, 1:w - 1] = np.where(valid_ctr[:, :, None], nn, 0.0)
    value = float(np.sum(output.alpha[1:h - 1, 1:w - 1][valid_ctr])
                  - np.sum(nsum_img[1:h - 1, 1:w - 1][valid_ctr]
                           * nn[valid_ctr])) / m

    # Record-level gradients.
    n_at_rec = n_full.reshape(h * w, 3)[pix]
    valid_full = np.zeros((h, w), dtype=bool)
    valid_full[1:h - 1, 1:w - 1] = valid_ctr
    rec_on = valid_full.reshape(h * w)[pix]
    d_omega = np.where(rec_on,
                       (1.0 - (output.rec_normal * n_at_rec).sum(-1)) / m,
                       0.0)
    d_normal = np.where(rec_on[:, None], -wrec[:, None] * n_at_rec / m, 0.0)

    # Depth-map gradient through N.
    gN = np.where(valid_ctr[:, :, None], -nsum_img[1:h - 1, 1:w - 1] / m,
                  0.0)
    gcr = np.where((nrm[:, :, None] > NORMAL_EPS) & valid_ctr[:, :, None],
                   fl[:, :, None] *
                   (gN - nhat * (nhat * gN).sum(-1, keepdims=True))
                   / safe[:, :, None], 0.0)
    gdpdx = np.cross(dpdy, gcr)
    gdpdy = np.cross(gcr, dpdx)

    gpts = np.zeros((h, w, 3))
    gpts[1:h - 1, 2:] += 0.5 * gdpdx
    gpts[1:h - 1, :w - 2] -= 0.5 * gdpdx
    gpts[2:, 1:w - 1] += 0.5 * gdpdy
    gpts[:h - 2, 1:w - 1] -= 0.5 * gdpdy
    d_depth = (gpts * dirs).sum(-1)
    return value, d_omega, d_normal, d_depth


def normal_consistency(output: RenderOutput) -> float:
    """Scalar normal-consistency loss (see normal_consistency_image)."""
    return normal_consistency_image(output)[0]
