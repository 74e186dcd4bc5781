"""Deformable template head rig.

A rig is a triangle mesh with per-corner UV coordinates, a linear
blendshape basis for expressions, and a 5-joint skeleton (glob → neck →
{jaw, eye_l, eye_r}) deformed by linear blend skinning. Texels of the UV
chart are anchored to the surface by barycentric rasterization; each valid
texel carries an orthonormal tangent frame that moves with the pose.

UV convention: texel (i, j) of an H×W map has its center at
u = (j + 0.5) / W, v = (i + 0.5) / H.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .transforms import quat_from_rotation, rotvec_to_matrix
from .validation import check_array

logger = logging.getLogger(__name__)

JOINT_NAMES = ("glob", "neck", "jaw", "eye_l", "eye_r")
JOINT_PARENTS = (-1, 0, 1, 1, 1)

# Inclusive point-in-triangle slack: texel centers sitting exactly on an
# edge or vertex count as inside (ties resolved by lowest face index).
_BARY_EPS = 1e-12
_DEGENERATE_EPS = 1e-14


@dataclass(frozen=True)
class DrivingSignal:
    """Θ = [psi_expr, theta_jaw, theta_eyes, theta_neck, theta_glob, t].

    Joint angles are axis-angle rotation vectors in radians; t is the
    global translation in meters.
    """

    psi_expr: np.ndarray
    theta_jaw: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta_eyes: np.ndarray = field(default_factory=lambda: np.zeros(6))
    theta_neck: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta_glob: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "psi_expr",
                           check_array(self.psi_expr, "psi_expr", ndim=1))
        for name, dim in (("theta_jaw", 3), ("theta_eyes", 6),
                          ("theta_neck", 3), ("theta_glob", 3), ("t", 3)):
            arr = check_array(getattr(self, name), name, shape=(dim,))
            object.__setattr__(self, name, arr)

    @property
    def n_expressions(self) -> int:
        return self.psi_expr.shape[0]

    @property
    def dim(self) -> int:
        return self.n_expressions + 18

    @staticmethod
    def zeros(n_expressions: int = 100) -> "DrivingSignal":
        return DrivingSignal(psi_expr=np.zeros(n_expressions))

    def concat(self) -> np.ndarray:
        return np.concatenate([self.psi_expr, self.theta_jaw, self.theta_eyes,
                               self.theta_neck, self.theta_glob, self.t])

    @staticmethod
    def from_concat(vec: np.ndarray, n_expressions: int) -> "DrivingSignal":
        vec = check_array(vec, "driving vector", ndim=1)
        if vec.shape[0] != n_expressions + 18:
            raise ContractError(
                f"driving vector: expected {n_expressions + 18} entries, "
                f"got {vec.shape[0]}")
        e = n_expressions
        return DrivingSignal(vec[:e], vec[e:e + 3], vec[e + 3:e + 9],
                             vec[e + 9:e + 12], vec[e + 12:e + 15],
                             vec[e + 15:e + 18])

    def to_json(self) -> dict:
        return {"psi": self.psi_expr.tolist(),
                "jaw": self.theta_jaw.tolist(),
                "eyes": self.theta_eyes.tolist(),
                "neck": self.theta_neck.tolist(),
                "glob": self.theta_glob.tolist(),
                "t": self.t.tolist()}

    @staticmethod
    def from_json(obj: dict) -> "DrivingSignal":
        keys = {"psi", "jaw", "eyes", "neck", "glob", "t"}
        if set(obj) != keys:
            raise ContractError(f"driving json: expected keys {sorted(keys)},"
                                f" got {sorted(obj)}")
        return DrivingSignal(np.asarray(obj["psi"], dtype=np.float64),
                             obj["jaw"], obj["eyes"], obj["neck"],
                             obj["glob"], obj["t"])


@dataclass
class TemplateRig:
    """Canonical head mesh + UV layout + blendshapes + LBS skeleton."""

    vertices: np.ndarray          # (V, 3) meters
    faces: np.ndarray             # (F, 3) vertex indices
    uv_coords: np.ndarray         # (F, 3, 2) per-corner UV in [0,1]^2
    blendshape_basis: np.ndarray  # (3V, E) displacement basis
    joint_rest: np.ndarray        # (J, 3) rest positions
    skin_weights: np.ndarray      # (V, J) rows sum to 1
    joint_names: tuple = JOINT_NAMES
    joint_parents: tuple = JOINT_PARENTS

    def __post_init__(self):
        self.vertices = check_array(self.vertices, "vertices",
                                    shape=(None, 3))
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ContractError("faces: expected (F, 3) index array")
        v = self.vertices.shape[0]
        if self.faces.size and (self.faces.min() < 0
                                or self.faces.max() >= v):
            raise ContractError("faces: vertex index out of range")
        self.uv_coords = check_array(self.uv_coords, "uv_coords",
                                     shape=(self.faces.shape[0], 3, 2))
        if self.uv_coords.size and (self.uv_coords.min() < -1e-9
                                    or self.uv_coords.max() > 1 + 1e-9):
            raise ContractError("uv_coords: values outside [0,1]^2")
        e_dim = None
        self.blendshape_basis = check_array(self.blendshape_basis,
                                            "blendshape_basis", ndim=2)
        if self.blendshape_basis.shape[0] != 3 * v:
            raise ContractError(
                f"blendshape_basis: expected {3 * v} rows, "
                f"got {self.blendshape_basis.shape[0]}")
        e_dim = self.blendshape_basis.shape[1]
        self.joint_names = tuple(self.joint_names)
        self.joint_parents = tuple(int(p) for p in self.joint_parents)
        j = len(self.joint_names)
        self.joint_rest = check_array(self.joint_rest, "joint_rest",
                                      shape=(j, 3))
        if self.joint_parents[0] != -1 or any(
                not (0 <= p < k) for k, p in enumerate(self.joint_parents)
                if k > 0):
            raise ContractError("joints: parent graph must be a tree rooted "
                                "at the first joint (glob)")
        self.skin_weights = check_array(self.skin_weights, "skin_weights",
                                        shape=(v, j))
        if self.skin_weights.size:
            if self.skin_weights.min() < -1e-12:
                raise ContractError("skin_weights: negative weight")
            rows = self.skin_weights.sum(axis=1)
            if np.max(np.abs(rows - 1.0)) > 1e-6:
                raise ContractError("skin_weights: rows must sum to 1 "
                                    "within 1e-6")
        self._n_expressions = e_dim

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def n_expressions(self) -> int:
        return self._n_expressions

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    def zero_driving(self) -> DrivingSignal:
        return DrivingSignal.zeros(self.n_expressions)


def apply_blendshapes(rig: TemplateRig, psi_expr: np.ndarray) -> np.ndarray:
    """Canonical vertices + reshape(basis · psi); exact linear map."""
    psi = check_array(psi_expr, "psi_expr", ndim=1)
    if psi.shape[0] != rig.n_expressions:
        raise ContractError(
            f"psi_expr: expected {rig.n_expressions} coefficients, "
            f"got {psi.shape[0]}")
    delta = (rig.blendshape_basis @ psi).reshape(rig.n_vertices, 3)
    return rig.vertices + delta


def joint_transforms(rig: TemplateRig, d: DrivingSignal):
    """World affine transform (R, b) per joint, composed along parents.

    Each joint rotates about its rest position; glob additionally applies
    the translation t after its rotation.
    """
    rots = {
        "glob": rotvec_to_matrix(d.theta_glob),
        "neck": rotvec_to_matrix(d.theta_neck),
        "jaw": rotvec_to_matrix(d.theta_jaw),
        "eye_l": rotvec_to_matrix(d.theta_eyes[:3]),
        "eye_r": rotvec_to_matrix(d.theta_eyes[3:]),
    }
    n = rig.n_joints
    R = np.zeros((n, 3, 3))
    b = np.zeros((n, 3))
    for j, name in enumerate(rig.joint_names):
        loc = rots[name]
        p = rig.joint_rest[j]
        parent = rig.joint_parents[j]
        if parent < 0:
            R[j] = loc
            b[j] = p - loc @ p + d.t
        else:
            R[j] = R[parent] @ loc
            b[j] = R[parent] @ (p - loc @ p) + b[parent]
    return R, b


def pose_joints(vertices: np.ndarray, rig: TemplateRig,
                d: DrivingSignal) -> np.ndarray:
    """Linear blend skinning: v' = Σ_j w_vj (R_j v + b_j)."""
    verts = check_array(vertices, "vertices", shape=(rig.n_vertices, 3))
    R, b = joint_transforms(rig, d)
    # (V, J, 3): per-joint transformed positions, blended by skin weights.
    per_joint = np.einsum("jab,vb->vja", R, verts) + b[None, :, :]
    return np.einsum("vj,vja->va", rig.skin_weights, per_joint)


def posed_vertices(rig: TemplateRig, d: DrivingSignal) -> np.ndarray:
    """Blendshapes then skinning — the full driving-signal deformation."""
    if d.n_expressions != rig.n_expressions:
        raise ContractError(
            f"driving signal has {d.n_expressions} expression coefficients, "
            f"rig expects {rig.n_expressions}")
    return pose_joints(apply_blendshapes(rig, d.psi_expr), rig, d)


@dataclass
class AnchorTable:
    """Per-texel UV rasterization result: face, barycentric, validity."""

    height: int
    width: int
    face_index: np.ndarray   # (H, W) int64, -1 where invalid
    barycentric: np.ndarray  # (H, W, 3)
    valid: np.ndarray        # (H, W) bool

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


def texel_centers(height: int, width: int) -> np.ndarray:
    """(H, W, 2) UV coordinates of texel centers."""
    jj, ii = np.meshgrid(np.arange(width), np.arange(height))
    u = (jj + 0.5) / width
    v = (ii + 0.5) / height
    return np.stack([u, v], axis=-1)


def _barycentric_uv(tri_uv: np.ndarray, points: np.ndarray):
    """Barycentric coords of points (N,2) in one UV triangle (3,2)."""
    a, bb, c = tri_uv[0], tri_uv[1], tri_uv[2]
    v0 = bb - a
    v1 = c - a
    denom = v0[0] * v1[1] - v0[1] * v1[0]
    if abs(denom) < _DEGENERATE_EPS:
        return None
    v2 = points - a
    beta = (v2[:, 0] * v1[1] - v2[:, 1] * v1[0]) / denom
    gamma = (v0[0] * v2[:, 1] - v0[1] * v2[:, 0]) / denom
    alpha = 1.0 - beta - gamma
    return np.stack([alpha, beta, gamma], axis=1)


def texel_anchors(rig: TemplateRig, height: int, width: int) -> AnchorTable:
    """Rasterize the UV layout: first face (lowest index) containing each
    texel center wins. Output is identical to the sequential face scan."""
    if height < 1 or width < 1:
        raise ContractError("texel_anchors: resolution must be >= 1")
    centers = texel_centers(height, width)
    face_index = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    strict_hits = np.zeros((height, width), dtype=np.int64)

    for f in range(rig.n_faces):
        tri = rig.uv_coords[f]
        # Texel-index bounding box of the triangle; centers at (j+0.5)/W.
        j0 = max(0, int(np.ceil(tri[:, 0].min() * width - 0.5 - 1e-9)))
        j1 = min(width - 1, int(np.floor(tri[:, 0].max() * width - 0.5
                                         + 1e-9)))
        i0 = max(0, int(np.ceil(tri[:, 1].min() * height - 0.5 - 1e-9)))
        i1 = min(height - 1, int(np.floor(tri[:, 1].max() * height - 0.5
                                          + 1e-9)))
        if j1 < j0 or i1 < i0:
            continue
        block = centers[i0:i1 + 1, j0:j1 + 1].reshape(-1, 2)
        res = _barycentric_uv(tri, block)
        if res is None:
            continue
        inside = res.min(axis=1) >= -_BARY_EPS
        if not inside.any():
            continue
        shape = (i1 - i0 + 1, j1 - j0 + 1)
        inside2 = inside.reshape(shape)
        strict = (res.min(axis=1) > 1e-9).reshape(shape)
        strict_hits[i0:i1 + 1, j0:j1 + 1] += strict
        sub_face = face_index[i0:i1 + 1, j0:j1 + 1]
        take = inside2 & (sub_face < 0)
        if take.any():
            sub_face[take] = f
            sub_bary = bary[i0:i1 + 1, j0:j1 + 1]
            sub_bary[take] = res.reshape(shape + (3,))[take]

    overlapped = int((strict_hits > 1).sum())
    if overlapped:
        logger.warning(
            "texel_anchors: %d texel centers strictly inside more than one "
            "UV face (overlapping charts); lowest face index wins",
            overlapped)
    valid = face_index >= 0
    return AnchorTable(height, width, face_index, bary, valid)


@dataclass
class SurfaceFrames:
    """Per-texel anchor + orthonormal tangent frame on the posed surface.

    texel_extent is the world-space edge length of the texel's UV
    footprint on its face, per tangent axis: (‖∂P/∂u‖/W, ‖∂P/∂v‖/H).
    """

    height: int
    width: int
    anchors: np.ndarray       # (H, W, 3)
    t_u: np.ndarray           # (H, W, 3)
    t_v: np.ndarray           # (H, W, 3)
    normals: np.ndarray       # (H, W, 3)
    frame_quats: np.ndarray   # (H, W, 4) quaternion of [t_u t_v n]
    texel_extent: np.ndarray  # (H, W, 2)
    face_index: np.ndarray    # (H, W)
    barycentric: np.ndarray   # (H, W, 3)
    valid: np.ndarray         # (H, W) bool

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def valid_flat_indices(self) -> np.ndarray:
        """Row-major flat texel ids of valid texels (the decode order)."""
        return np.nonzero(self.valid.reshape(-1))[0]


def surface_frames(posed_verts: np.ndarray, rig: TemplateRig,
                   anchors: AnchorTable) -> SurfaceFrames:
    """Anchor positions and tangent frames from the posed mesh.

    t_u follows increasing u on the face, Gram–Schmidt-projected against
    the face normal; t_v = n × t_u. Degenerate faces (zero 3D area or
    zero UV Jacobian) invalidate their texels.
    """
    verts = check_array(posed_verts, "posed vertices",
                        shape=(rig.n_vertices, 3))
    h, w = anchors.height, anchors.width
    out_anchor = np.zeros((h, w, 3))
    out_tu = np.zeros((h, w, 3))
    out_tv = np.zeros((h, w, 3))
    out_n = np.zeros((h, w, 3))
    out_quat = np.zeros((h, w, 4))
    out_ext = np.zeros((h, w, 2))
    valid = anchors.valid.copy()

    ii, jj = np.nonzero(anchors.valid)
    if ii.size == 0:
        return SurfaceFrames(h, w, out_anchor, out_tu, out_tv, out_n,
                             out_quat, out_ext, anchors.face_index.copy(),
                             anchors.barycentric.copy(), valid)

    f = anchors.face_index[ii, jj]
    tri = rig.faces[f]                       # (N, 3)
    p0, p1, p2 = (verts[tri[:, k]] for k in range(3))
    uv = rig.uv_coords[f]                    # (N, 3, 2)
    bc = anchors.barycentric[ii, jj]         # (N, 3)

    anchor = bc[:, 0:1] * p0 + bc[:, 1:2] * p1 + bc[:, 2:3] * p2
    e1 = p1 - p0
    e2 = p2 - p0
    n_raw = np.cross(e1, e2)
    area2 = np.linalg.norm(n_raw, axis=1)
    du1 = uv[:, 1, 0] - uv[:, 0, 0]
    dv1 = uv[:, 1, 1] - uv[:, 0, 1]
    du2 = uv[:, 2, 0] - uv[:, 0, 0]
    dv2 = uv[:, 2, 1] - uv[:, 0, 1]
    det = du1 * dv2 - du2 * dv1

    ok = (area2 > 1e-12) & (np.abs(det) > _DEGENERATE_EPS)
    safe_area = np.where(ok, area2, 1.0)
    safe_det = np.where(ok, det, 1.0)
    n = n_raw / safe_area[:, None]
    dpdu = (dv2[:, None] * e1 - dv1[:, None] * e2) / safe_det[:, None]
    dpdv = (-du2[:, None] * e1 + du1[:, None] * e2) / safe_det[:, None]

    tu_raw = dpdu - (dpdu * n).sum(axis=1, keepdims=True) * n
    tu_norm = np.linalg.norm(tu_raw, axis=1)
    ok &= tu_norm > 1e-12
    tu = tu_raw / np.where(ok, tu_norm, 1.0)[:, None]
    tv = np.cross(n, tu)

    frames = np.stack([tu, tv, n], axis=-1)   # columns of the frame matrix
    quats = quat_from_rotation(frames)
    ext = np.stack([np.linalg.norm(dpdu, axis=1) / w,
                    np.linalg.norm(dpdv, axis=1) / h], axis=1)

    out_anchor[ii, jj] = np.where(ok[:, None], anchor, 0.0)
    out_tu[ii, jj] = np.where(ok[:, None], tu, 0.0)
    out_tv[ii, jj] = np.where(ok[:, None], tv, 0.0)
    out_n[ii, jj] = np.where(ok[:, None], n, 0.0)
    out_quat[ii, jj] = np.where(ok[:, None], quats, 0.0)
    out_ext[ii, jj] = np.where(ok[:, None], ext, 0.0)
    valid[ii, jj] = ok

    face_index = anchors.face_index.copy()
    face_index[~valid] = -1
    return SurfaceFrames(h, w, out_anchor, out_tu, out_tv, out_n, out_quat,
                         out_ext, face_index, anchors.barycentric.copy(),
                         valid)


def rig_frames(rig: TemplateRig, d: DrivingSignal,
               anchors: AnchorTable) -> SurfaceFrames:
    """Convenience: frames on the fully driven mesh."""
    return surface_frames(posed_vertices(rig, d), rig, anchors)


# ---------------------------------------------------------------------------
# Persistence: OBJ mesh (v/vt/f) + JSON rig sidecar.

def save_rig(rig: TemplateRig, obj_path, sidecar_path=None) -> None:
    obj_path = Path(obj_path)
    if sidecar_path is None:
        sidecar_path = obj_path.with_suffix(".rig.json")
    lines = ["# meshsplat template rig"]
    for v in rig.vertices:
        lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    for f in range(rig.n_faces):
        for c in range(3):
            u, vv = rig.uv_coords[f, c]
            lines.append(f"vt {u:.17g} {vv:.17g}")
    for f in range(rig.n_faces):
        i = rig.faces[f] + 1
        t = 3 * f + 1
        lines.append(f"f {i[0]}/{t} {i[1]}/{t + 1} {i[2]}/{t + 2}")
    obj_path.parent.mkdir(parents=True, exist_ok=True)
    obj_path.write_text("\n".join(lines) + "\n")

    sidecar = {
        "blendshape_basis": rig.blendshape_basis.tolist(),
        "joints": [{"name": n, "rest_position": rig.joint_rest[k].tolist(),
                    "parent": rig.joint_parents[k]}
                   for k, n in enumerate(rig.joint_names)],
        "skin_weights": rig.skin_weights.tolist(),
    }
    Path(sidecar_path).write_text(json.dumps(sidecar))


def load_rig(obj_path, sidecar_path=None) -> TemplateRig:
    obj_path = Path(obj_path)
    if sidecar_path is None:
        sidecar_path = obj_path.with_suffix(".rig.json")
    if not obj_path.exists():
        raise ContractError(f"rig mesh not found: {obj_path}")
    if not Path(sidecar_path).exists():
        raise ContractError(f"rig sidecar not found: {sidecar_path}")

    verts, uvs, faces, face_uvs = [], [], [], []
    for line in obj_path.read_text().splitlines():
        parts = line.split()
        if not parts or parts[0] == "#":
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ContractError("load_rig: non-triangular face in OBJ")
            vi, ti = [], []
            for tok in parts[1:]:
                fields = tok.split("/")
                vi.append(int(fields[0]) - 1)
                if len(fields) < 2 or fields[1] == "":
                    raise ContractError(
                        "load_rig: OBJ face lacks vt texture indices")
                ti.append(int(fields[1]) - 1)
            faces.append(vi)
            face_uvs.append(ti)

    uvs = np.asarray(uvs, dtype=np.float64)
    uv_coords = uvs[np.asarray(face_uvs, dtype=np.int64)]

    side = json.loads(Path(sidecar_path).read_text())
    joints = side["joints"]
    names = tuple(j["name"] for j in joints)
    parents = tuple(int(j["parent"]) for j in joints)
    rest = np.asarray([j["rest_position"] for j in joints], dtype=np.float64)
    return TemplateRig(
        vertices=np.asarray(verts, dtype=np.float64),
        faces=np.asarray(faces, dtype=np.int64),
        uv_coords=uv_coords,
        blendshape_basis=np.asarray(side["blendshape_basis"],
                                    dtype=np.float64),
        joint_rest=rest,
        skin_weights=np.asarray(side["skin_weights"], dtype=np.float64),
        joint_names=names,
        joint_parents=parents,
    )
