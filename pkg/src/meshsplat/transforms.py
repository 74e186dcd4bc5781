"""Rotation utilities: quaternions (w-first, Hamilton), rotation vectors.

All functions broadcast over leading axes. Jacobian helpers back the
hand-derived gradient kernels, so their layouts are part of the internal
contract: rotation_quat_jacobian returns J[..., i, j, k] = dR_ij/dq_k.
"""

from __future__ import annotations

import numpy as np

QUAT_EPS = 1e-8

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray, eps: float = QUAT_EPS) -> np.ndarray:
    """Unit quaternion; norms below eps fall back to the identity."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    safe = np.where(norm < eps, 1.0, norm)
    out = q / safe
    fallback = np.broadcast_to(IDENTITY_QUAT, q.shape)
    return np.where(norm < eps, fallback, out)


def quat_multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pw, px, py, pz = (p[..., i] for i in range(4))
    qw, qx, qy, qz = (q[..., i] for i in range(4))
    return np.stack([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ], axis=-1)


def quat_left_matrix(p: np.ndarray) -> np.ndarray:
    """Matrix M with p ⊗ q = M @ q; used to differentiate through products."""
    p = np.asarray(p, dtype=np.float64)
    pw, px, py, pz = (p[..., i] for i in range(4))
    rows = [
        np.stack([pw, -px, -py, -pz], axis=-1),
        np.stack([px, pw, -pz, py], axis=-1),
        np.stack([py, pz, pw, -px], axis=-1),
        np.stack([pz, -py, px, pw], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def rotation_from_quat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (columns = rotated basis)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = (q[..., i] for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [
        np.stack([1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)], axis=-1),
        np.stack([2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)], axis=-1),
        np.stack([2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def quat_from_rotation(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w ≥ 0) from a proper rotation matrix, batched."""
    R = np.asarray(R, dtype=np.float64)
    m = R.reshape(-1, 3, 3)
    out = np.empty((m.shape[0], 4))
    tr = np.trace(m, axis1=1, axis2=2)

    # Shepperd's branch selection keeps the divisor well away from zero.
    cand = np.stack([tr, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1)
    branch = np.argmax(cand, axis=1)

    for b in range(4):
        idx = np.nonzero(branch == b)[0]
        if idx.size == 0:
            continue
        sub = m[idx]
        if b == 0:
            s = np.sqrt(tr[idx] + 1.0) * 2
            w = 0.25 * s
            x = (sub[:, 2, 1] - sub[:, 1, 2]) / s
            y = (sub[:, 0, 2] - sub[:, 2, 0]) / s
            z = (sub[:, 1, 0] - sub[:, 0, 1]) / s
        elif b == 1:
            s = np.sqrt(1.0 + sub[:, 0, 0] - sub[:, 1, 1] - sub[:, 2, 2]) * 2
            w = (sub[:, 2, 1] - sub[:, 1, 2]) / s
            x = 0.25 * s
            y = (sub[:, 0, 1] + sub[:, 1, 0]) / s
            z = (sub[:, 0, 2] + sub[:, 2, 0]) / s
        elif b == 2:
            s = np.sqrt(1.0 + sub[:, 1, 1] - sub[:, 0, 0] - sub[:, 2, 2]) * 2
            w = (sub[:, 0, 2] - sub[:, 2, 0]) / s
            x = (sub[:, 0, 1] + sub[:, 1, 0]) / s
            y = 0.25 * s
            z = (sub[:, 1, 2] + sub[:, 2, 1]) / s
        else:
            s = np.sqrt(1.0 + sub[:, 2, 2] - sub[:, 0, 0] - sub[:, 1, 1]) * 2
            w = (sub[:, 1, 0] - sub[:, 0, 1]) / s
            x = (sub[:, 0, 2] + sub[:, 2, 0]) / s
            y = (sub[:, 1, 2] + sub[:, 2, 1]) / s
            z = 0.25 * s
        out[idx, 0], out[idx, 1], out[idx, 2], out[idx, 3] = w, x, y, z

    out /= np.linalg.norm(out, axis=1, keepdims=True)
    sign = np.where(out[:, 0] < 0, -1.0, 1.0)
    out *= sign[:, None]
    return out.reshape(R.shape[:-2] + (4,))


def rotation_quat_jacobian(q: np.ndarray) -> np.ndarray:
    """dR_ij/dq_k at a unit quaternion; shape (..., 3, 3, 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = (q[..., i] for i in range(4))
    zero = np.zeros_like(w)
    J = np.empty(q.shape[:-1] + (3, 3, 4))

    def put(i, j, dw, dx, dy, dz):
        J[..., i, j, 0] = 2 * dw
        J[..., i, j, 1] = 2 * dx
        J[..., i, j, 2] = 2 * dy
        J[..., i, j, 3] = 2 * dz

    put(0, 0, zero, zero, -2 * y, -2 * z)
    put(0, 1, -z, y, x, -w)
    put(0, 2, y, z, w, x)
    put(1, 0, z, y, x, w)
    put(1, 1, zero, -2 * x, zero, -2 * z)
    put(1, 2, -x, -w, z, y)
    put(2, 0, -y, z, -w, x)
    put(2, 1, x, w, z, y)
    put(2, 2, zero, -2 * x, -2 * y, zero)
    return J


def normalize_jacobian(q: np.ndarray, eps: float = QUAT_EPS) -> np.ndarray:
    """d(q/|q|)/dq = (I − q̂q̂ᵀ)/|q|; zero matrix on the fallback branch."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    unit = q / np.where(norm < eps, 1.0, norm)
    eye = np.broadcast_to(np.eye(4), q.shape[:-1] + (4, 4))
    proj = eye - unit[..., :, None] * unit[..., None, :]
    J = proj / np.where(norm[..., None] < eps, 1.0, norm[..., None])
    return np.where(norm[..., None] < eps, 0.0, J)


def rotvec_to_matrix(r: np.ndarray) -> np.ndarray:
    """Rodrigues rotation, batched; Taylor fallback near zero angle."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1)
    small = theta < 1e-12
    safe = np.where(small, 1.0, theta)
    k = r / safe[..., None]
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    K = np.stack([
        np.stack([zero, -kz, ky], axis=-1),
        np.stack([kz, zero, -kx], axis=-1),
        np.stack([-ky, kx, zero], axis=-1),
    ], axis=-2)
    eye = np.broadcast_to(np.eye(3), r.shape[:-1] + (3, 3))
    s = np.sin(theta)[..., None, None]
    c = (1.0 - np.cos(theta))[..., None, None]
    R = eye + s * K + c * (K @ K)
    return np.where(small[..., None, None], eye, R)
