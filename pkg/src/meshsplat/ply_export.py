"""Splat-viewer PLY export.

Binary little-endian PLY, one vertex per surfel:
  x, y, z, f_dc_0..2, opacity, scale_0..2, rot_0..3
Colors and opacity are stored as logits (the inverse-sigmoid convention
splat viewers apply before display); scales are log-space with the third
axis pinned to ln(1e-6) to mark a flattened disk; rotations are w-first
quaternions.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .gaussian_map import SurfelSet
from .imageio import atomic_write_bytes
from .transforms import quat_normalize

_FIELDS = ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
           "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
           "rot_3")
_FLAT_LOG_SCALE = float(np.log(1e-6))


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return np.log(p / (1.0 - p))


def export_ply(surfels: SurfelSet, path) -> None:
    n = len(surfels)
    if n == 0:
        raise ContractError("export_ply: empty surfel set")
    data = np.empty((n, len(_FIELDS)), dtype="<f4")
    data[:, 0:3] = surfels.centers
    data[:, 3:6] = _logit(surfels.colors)
    data[:, 6] = _logit(surfels.opacities)
    data[:, 7] = np.log(surfels.scales[:, 0])
    data[:, 8] = np.log(surfels.scales[:, 1])
    data[:, 9] = _FLAT_LOG_SCALE
    data[:, 10:14] = quat_normalize(surfels.rotations)

    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}"]
    header += [f"property float {name}" for name in _FIELDS]
    header.append("end_header")
    blob = ("\n".join(header) + "\n").encode("ascii") + data.tobytes()
    atomic_write_bytes(path, blob)


def read_ply(path) -> dict:
    """Minimal reader for files written by export_ply (and any PLY with
    only float vertex properties). Returns {field: (N,) float64}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise ContractError(f"{path}: not a PLY file")
    header = blob[:end].decode("ascii").splitlines()
    fields = []
    count = None
    fmt = None
    for line in header:
        parts = line.split()
        if parts[:2] == ["format", "binary_little_endian"]:
            fmt = "le"
        elif parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[0] == "property":
            if parts[1] != "float":
                raise ContractError(
                    f"{path}: unsupported property type {parts[1]}")
            fields.append(parts[2])
    if fmt != "le" or count is None:
        raise ContractError(f"{path}: unsupported PLY header")
    body = blob[end + len(b"end_header\n"):]
    need = 4 * count * len(fields)
    if len(body) < need:
        raise ContractError(f"{path}: truncated PLY body")
    arr = np.frombuffer(body, dtype="<f4",
                        count=count * len(fields)).reshape(count,
                                                           len(fields))
    return {name: arr[:, i].astype(np.float64)
            for i, name in enumerate(fields)}
