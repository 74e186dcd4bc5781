"""On-disk capture datasets.

dataset.json schema:
  {"frames": [{"image": path, "mask": path?,
               "camera": {"fx","fy","cx","cy","w","h",
                          "world_to_cam": 16 floats row-major},
               "driving": {"psi": [...], "jaw": [3], "eyes": [6],
                           "neck": [3], "glob": [3], "t": [3]},
               "provenance": str?}],
   "rig": path, "background": [3], "uv_texture": path?}

Paths are relative to the directory containing dataset.json. Loading
validates eagerly (file existence, camera orthonormality to 1e-4, image
header dimensions against the camera); pixels load lazily. load → save →
load is field-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DatasetError
from .imageio import atomic_write_bytes, load_png
from .prior import TrainSample, UVInputMaps
from .renderer import Camera
from .rig import AnchorTable, DrivingSignal, TemplateRig, rig_frames

_FRAME_KEYS = {"image", "mask", "camera", "driving", "provenance"}
_CAMERA_KEYS = {"fx", "fy", "cx", "cy", "w", "h", "world_to_cam"}
_TOP_KEYS = {"frames", "rig", "background", "uv_texture"}


@dataclass
class FrameRecord:
    image: str
    camera: Camera
    driving: DrivingSignal
    mask: str | None = None
    provenance: str | None = None


@dataclass
class AvatarDataset:
    root: str
    frames: list
    rig: str
    background: np.ndarray
    uv_texture: str | None = None

    def __len__(self) -> int:
        return len(self.frames)

    def path(self, rel: str) -> str:
        return os.path.normpath(os.path.join(self.root, rel))

    @property
    def rig_path(self) -> str:
        return self.path(self.rig)

    @property
    def uv_texture_path(self) -> str | None:
        return None if self.uv_texture is None else self.path(self.uv_texture)

    def load_image(self, index: int) -> np.ndarray:
        img = load_png(self.path(self.frames[index].image))
        if img.ndim != 3:
            raise DatasetError(DatasetError.DIMENSION_MISMATCH,
                               f"frame {index}: expected RGB image")
        return img

    def load_mask(self, index: int) -> np.ndarray | None:
        rec = self.frames[index]
        if rec.mask is None:
            return None
        mask = load_png(self.path(rec.mask))
        if mask.ndim == 3:
            mask = mask.mean(axis=-1)
        return mask > 0.5


def _camera_from_json(obj: dict, where: str) -> Camera:
    if not isinstance(obj, dict) or set(obj) != _CAMERA_KEYS:
        raise DatasetError(
            DatasetError.VALIDATION_ERROR,
            f"{where}: camera must have exactly keys {sorted(_CAMERA_KEYS)}")
    m = np.asarray(obj["world_to_cam"], dtype=np.float64)
    if m.shape != (16,):
        raise DatasetError(DatasetError.VALIDATION_ERROR,
                           f"{where}: world_to_cam must be 16 floats")
    m = m.reshape(4, 4)
    if np.max(np.abs(m[3] - np.array([0, 0, 0, 1.0]))) > 1e-9:
        raise DatasetError(DatasetError.VALIDATION_ERROR,
                           f"{where}: world_to_cam last row must be 0 0 0 1")
    try:
        return Camera(fx=float(obj["fx"]), fy=float(obj["fy"]),
                      cx=float(obj["cx"]), cy=float(obj["cy"]),
                      width=int(obj["w"]), height=int(obj["h"]),
                      rotation=m[:3, :3], translation=m[:3, 3])
    except ContractError as exc:
        raise DatasetError(DatasetError.VALIDATION_ERROR,
                           f"{where}: {exc}") from exc


def _camera_to_json(camera: Camera) -> dict:
    return {
        "fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
        "w": camera.width, "h": camera.height,
        "world_to_cam": [float(x) for x in
                         camera.to_matrix().reshape(-1)],
    }


def _check_image_header(path: str, camera: Camera, where: str) -> None:
    from PIL import Image
    try:
        with Image.open(path) as img:
            w, h = img.size
    except Exception as exc:
        raise DatasetError(DatasetError.PARSE_ERROR,
                           f"{where}: cannot read image {path}: {exc}") \
            from exc
    if (w, h) != (camera.width, camera.height):
        raise DatasetError(
            DatasetError.DIMENSION_MISMATCH,
            f"{where}: image is {w}x{h}, camera says "
            f"{camera.width}x{camera.height}")


def load_dataset(root: str) -> AvatarDataset:
    manifest = os.path.join(root, "dataset.json")
    if not os.path.isfile(manifest):
        raise DatasetError(DatasetError.MISSING_FILE,
                           f"no dataset.json under {root}")
    try:
        with open(manifest, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (ValueError, UnicodeDecodeError) as exc:
        raise DatasetError(DatasetError.PARSE_ERROR,
                           f"{manifest}: {exc}") from exc

    if not isinstance(doc, dict):
        raise DatasetError(DatasetError.VALIDATION_ERROR,
                           f"{manifest}: top level must be an object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise DatasetError(DatasetError.VALIDATION_ERROR,
                           f"{manifest}: unknown keys {sorted(unknown)}")
    for key in ("frames", "rig", "background"):
        if key not in doc:
            raise DatasetError(DatasetError.VALIDATION_ERROR,
                               f"{manifest}: missing key {key!r}")
    background = np.asarray(doc["background"], dtype=np.float64)
    if background.shape != (3,):
        raise DatasetError(DatasetError.VALIDATION_ERROR,
                           f"{manifest}: background must be 3 floats")

    frames = []
    n_expr = None
    for i, obj in enumerate(doc["frames"]):
        where = f"{manifest}: frames[{i}]"
        if not isinstance(obj, dict):
            raise DatasetError(DatasetError.VALIDATION_ERROR,
                               f"{where}: must be an object")
        unknown = set(obj) - _FRAME_KEYS
        if unknown:
            raise DatasetError(DatasetError.VALIDATION_ERROR,
                               f"{where}: unknown keys {sorted(unknown)}")
        for key in ("image", "camera", "driving"):
            if key not in obj:
                raise DatasetError(DatasetError.VALIDATION_ERROR,
                                   f"{where}: missing key {key!r}")
        camera = _camera_from_json(obj["camera"], where)
        try:
            driving = DrivingSignal.from_json(obj["driving"])
        except (ContractError, TypeError, KeyError) as exc:
            raise DatasetError(DatasetError.VALIDATION_ERROR,
                               f"{where}: bad driving: {exc}") from exc
        if n_expr is None:
            n_expr = driving.n_expressions
        elif driving.n_expressions != n_expr:
            raise DatasetError(
                DatasetError.VALIDATION_ERROR,
                f"{where}: {driving.n_expressions} expression coefficients, "
                f"other frames have {n_expr}")
        frames.append(FrameRecord(
            image=obj["image"], camera=camera, driving=driving,
            mask=obj.get("mask"), provenance=obj.get("provenance")))

    ds = AvatarDataset(root=root, frames=frames, rig=doc["rig"],
                       background=background,
                       uv_texture=doc.get("uv_texture"))
    if not os.path.isfile(ds.rig_path):
        raise DatasetError(DatasetError.MISSING_FILE,
                           f"rig file missing: {ds.rig_path}")
    if ds.uv_texture is not None and not os.path.isfile(ds.uv_texture_path):
        raise DatasetError(DatasetError.MISSING_FILE,
                           f"uv texture missing: {ds.uv_texture_path}")
    for i, rec in enumerate(ds.frames):
        img_path = ds.path(rec.image)
        if not os.path.isfile(img_path):
            raise DatasetError(DatasetError.MISSING_FILE,
                               f"frame {i}: image missing: {img_path}")
        _check_image_header(img_path, rec.camera, f"frame {i}")
        if rec.mask is not None and not os.path.isfile(ds.path(rec.mask)):
            raise DatasetError(DatasetError.MISSING_FILE,
                               f"frame {i}: mask missing: "
                               f"{ds.path(rec.mask)}")
    return ds


def dataset_to_json(ds: AvatarDataset) -> dict:
    doc = {"frames": [], "rig": ds.rig,
           "background": [float(x) for x in ds.background]}
    if ds.uv_texture is not None:
        doc["uv_texture"] = ds.uv_texture
    for rec in ds.frames:
        obj = {"image": rec.image,
               "camera": _camera_to_json(rec.camera),
               "driving": rec.driving.to_json()}
        if rec.mask is not None:
            obj["mask"] = rec.mask
        if rec.provenance is not None:
            obj["provenance"] = rec.provenance
        doc["frames"].append(obj)
    return doc


def save_dataset(ds: AvatarDataset, root: str | None = None) -> str:
    """Write dataset.json (the manifest only; images stay where they are)."""
    root = ds.root if root is None else root
    os.makedirs(root, exist_ok=True)
    path = os.path.join(root, "dataset.json")
    blob = json.dumps(dataset_to_json(ds), indent=2)
    atomic_write_bytes(path, blob.encode("utf-8"))
    return path


def load_train_samples(ds: AvatarDataset, rig: TemplateRig,
                       anchors: AnchorTable, inputs: UVInputMaps,
                       indices=None) -> list:
    """Materialize frames as training samples: pose the rig per driving,
    load pixels, keep the stored provenance tag."""
    if indices is None:
        indices = range(len(ds))
    samples = []
    for i in indices:
        rec = ds.frames[i]
        frames = rig_frames(rig, rec.driving, anchors)
        samples.append(TrainSample(
            inputs=inputs, driving=rec.driving, frames=frames,
            camera=rec.camera, target=ds.load_image(i),
            mask=ds.load_mask(i),
            tag=rec.provenance or "real"))
    return samples
