"""Template rig: blendshapes, skinning, UV anchoring, surface frames."""

import numpy as np
import pytest

from meshsplat import (DrivingSignal, TemplateRig, load_rig, posed_vertices,
                       rig_frames, save_rig, surface_frames, texel_anchors,
                       make_fixture_rig)
from meshsplat.rig import apply_blendshapes, pose_joints, joint_transforms
from meshsplat.transforms import rotvec_to_matrix


# --- oracles -------------------------------------------------------------

def brute_force_valid_texels(rig, height, width):
    """O(HW*F) point-in-triangle scan over UV space."""
    count = 0
    centers = np.stack(np.meshgrid(
        (np.arange(width) + 0.5) / width,
        (np.arange(height) + 0.5) / height), axis=-1).reshape(-1, 2)
    for c in centers:
        hit = False
        for f in range(rig.faces.shape[0]):
            tri = rig.uv_coords[f]
            v0, v1, v2 = tri[1] - tri[0], tri[2] - tri[0], c - tri[0]
            d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
            d20, d21 = v2 @ v0, v2 @ v1
            den = d00 * d11 - d01 * d01
            if abs(den) < 1e-18:
                continue
            b1 = (d11 * d20 - d01 * d21) / den
            b2 = (d00 * d21 - d01 * d20) / den
            b0 = 1.0 - b1 - b2
            if b0 >= -1e-12 and b1 >= -1e-12 and b2 >= -1e-12:
                hit = True
                break
        count += hit
    return count


# --- driving signal ------------------------------------------------------

def test_driving_zeros_and_round_trip():
    d = DrivingSignal.zeros(7)
    assert d.n_expressions == 7 and d.dim == 25
    obj = d.to_json()
    assert set(obj) == {"psi", "jaw", "eyes", "neck", "glob", "t"}
    d2 = DrivingSignal.from_json(obj)
    np.testing.assert_array_equal(d.concat(), d2.concat())


def test_driving_concat_round_trip():
    rng = np.random.default_rng(0)
    vec = rng.normal(size=5 + 18)
    d = DrivingSignal.from_concat(vec, 5)
    np.testing.assert_array_equal(d.concat(), vec)


# --- blendshapes ----------------------------------------------------------

def test_zero_driving_is_identity(small_rig):
    d = small_rig.zero_driving()
    np.testing.assert_allclose(posed_vertices(small_rig, d),
                               small_rig.vertices, atol=1e-9)


def test_blendshape_linearity(small_rig):
    rng = np.random.default_rng(4)
    x = rng.normal(size=small_rig.n_expressions)
    y = rng.normal(size=small_rig.n_expressions)
    a, b = 0.7, -1.3
    f = lambda p: apply_blendshapes(small_rig, p)
    lhs = f(a * x + b * y)
    rhs = a * f(x) + b * f(y) - (a + b - 1) * f(np.zeros_like(x))
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_pose_identity_transforms(small_rig):
    d = small_rig.zero_driving()
    verts = apply_blendshapes(small_rig, d.psi_expr)
    posed = pose_joints(verts, small_rig, d)
    np.testing.assert_allclose(posed, verts, atol=1e-12)


def _one_hot_rig():
    """Three vertices with one-hot skin weights, all joints at origin."""
    w = np.zeros((3, 5))
    w[0, 0] = 1.0  # glob
    w[1, 2] = 1.0  # jaw
    w[2, 0] = 1.0  # glob
    return TemplateRig(
        vertices=np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]]),
        faces=np.array([[0, 1, 2]]),
        uv_coords=np.array([[[0.1, 0.1], [0.9, 0.1], [0.1, 0.9]]]),
        blendshape_basis=np.zeros((9, 2)),
        joint_rest=np.zeros((5, 3)),
        skin_weights=w)


def test_glob_rotation_of_fully_weighted_vertex():
    # Fully glob-weighted vertex, 90 degrees about z: (1,0,0) -> (0,1,0)
    rig = _one_hot_rig()
    d = DrivingSignal.zeros(2)
    d.theta_glob[:] = (0.0, 0.0, np.pi / 2)
    after = posed_vertices(rig, d)
    np.testing.assert_allclose(after[0], [0.0, 1.0, 0.0], atol=1e-12)


def test_jaw_rotation_leaves_unweighted_vertices():
    rig = _one_hot_rig()
    d = DrivingSignal.zeros(2)
    d.theta_jaw[:] = (0.4, -0.2, 0.1)
    moved = posed_vertices(rig, d)
    np.testing.assert_allclose(moved[[0, 2]], rig.vertices[[0, 2]],
                               atol=1e-12)
    assert not np.allclose(moved[1], rig.vertices[1])


# --- texel anchors ---------------------------------------------------------

def test_anchor_count_matches_brute_force(small_rig):
    table = texel_anchors(small_rig, 9, 9)
    assert table.n_valid == brute_force_valid_texels(small_rig, 9, 9)


def test_anchor_at_uv_vertex_is_corner():
    rig = make_fixture_rig(n_lat=6, n_lon=10, n_expressions=2, seed=0)
    # Build a 1-texel map whose center lands exactly on a UV vertex by
    # crafting a rig copy whose first face has a vertex at (0.5, 0.5).
    uv = rig.uv_coords.copy()
    uv[0, 0] = (0.5, 0.5)
    rig2 = TemplateRig(
        vertices=rig.vertices, faces=rig.faces, uv_coords=uv,
        blendshape_basis=rig.blendshape_basis, joint_rest=rig.joint_rest,
        skin_weights=rig.skin_weights, joint_names=rig.joint_names,
        joint_parents=rig.joint_parents)
    table = texel_anchors(rig2, 1, 1)
    assert table.n_valid == 1
    bary = table.barycentric.reshape(-1, 3)[table.valid.reshape(-1)][0]
    assert sorted(np.round(bary, 9)) == [0.0, 0.0, 1.0]


def test_single_texel_resolution(small_rig):
    table = texel_anchors(small_rig, 1, 1)
    assert table.valid.shape == (1, 1)
    assert table.n_valid in (0, 1)


def test_anchor_tie_break_is_lowest_face(small_rig):
    t1 = texel_anchors(small_rig, 7, 7)
    t2 = texel_anchors(small_rig, 7, 7)
    np.testing.assert_array_equal(t1.face_index, t2.face_index)
    np.testing.assert_array_equal(t1.valid, t2.valid)


# --- surface frames ---------------------------------------------------------

def test_frames_orthonormal(small_rig):
    anchors = texel_anchors(small_rig, 10, 10)
    frames = surface_frames(small_rig.vertices, small_rig, anchors)
    idx = frames.valid_flat_indices()
    F = np.stack([frames.t_u.reshape(-1, 3)[idx],
                  frames.t_v.reshape(-1, 3)[idx],
                  frames.normals.reshape(-1, 3)[idx]], axis=1)
    gram = np.einsum("nij,nkj->nik", F, F)
    resid = np.abs(gram - np.eye(3)).max()
    assert resid < 1e-5


def test_frames_rigid_equivariance(small_rig):
    rng = np.random.default_rng(7)
    R = rotvec_to_matrix(rng.normal(size=3))
    t = rng.normal(size=3) * 0.1
    anchors = texel_anchors(small_rig, 8, 8)
    base = surface_frames(small_rig.vertices, small_rig, anchors)
    moved = surface_frames(small_rig.vertices @ R.T + t, small_rig, anchors)
    idx = base.valid_flat_indices()
    np.testing.assert_allclose(
        moved.anchors.reshape(-1, 3)[idx],
        base.anchors.reshape(-1, 3)[idx] @ R.T + t, atol=1e-6)
    for field in ("t_u", "t_v", "normals"):
        np.testing.assert_allclose(
            getattr(moved, field).reshape(-1, 3)[idx],
            getattr(base, field).reshape(-1, 3)[idx] @ R.T, atol=1e-6)


def test_rig_frames_convenience(small_rig):
    anchors = texel_anchors(small_rig, 8, 8)
    d = small_rig.zero_driving()
    a = rig_frames(small_rig, d, anchors)
    b = surface_frames(posed_vertices(small_rig, d), small_rig, anchors)
    np.testing.assert_array_equal(a.anchors, b.anchors)


# --- persistence ------------------------------------------------------------

def test_rig_save_load_round_trip(small_rig, tmp_path):
    path = tmp_path / "head.obj"
    save_rig(small_rig, path)
    back = load_rig(path)
    np.testing.assert_allclose(back.vertices, small_rig.vertices,
                               atol=1e-12)
    np.testing.assert_array_equal(back.faces, small_rig.faces)
    np.testing.assert_allclose(back.uv_coords, small_rig.uv_coords,
                               atol=1e-12)
    np.testing.assert_allclose(back.blendshape_basis,
                               small_rig.blendshape_basis, atol=0)
    np.testing.assert_allclose(back.skin_weights, small_rig.skin_weights,
                               atol=0)
    assert back.joint_names == small_rig.joint_names
    d = DrivingSignal.zeros(small_rig.n_expressions)
    d.psi_expr[:] = 0.3
    np.testing.assert_allclose(posed_vertices(back, d),
                               posed_vertices(small_rig, d), atol=1e-12)
