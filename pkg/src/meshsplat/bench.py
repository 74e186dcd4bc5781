"""Synthetic ground-truth benchmark.

Samples an "oracle" avatar (randomly perturbed prior weights on the
fixture rig), renders it from a grid of views and driving signals with
the module's own renderer, and writes everything as a standard dataset
pair (train + holdout) plus the oracle artifacts. Because the oracle is
exactly representable by the model family, recovery error is measurable
down to PNG quantization.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .adaptation import AdaptationConfig, sample_novel_conditions
from .dataset import AvatarDataset, FrameRecord, save_dataset
from .fixtures import make_fixture_rig, make_uv_texture
from .gaussian_map import save_gmap
from .imageio import atomic_write_bytes, load_png, save_png
from .prior import (PriorConfig, build_input_maps, compute_geometry_stats,
                    init_weights, predict_gaussian_map, render_prediction,
                    save_weights)
from .renderer import Camera
from .rig import (DrivingSignal, TemplateRig, rig_frames, save_rig,
                  texel_anchors)


@dataclass
class BenchmarkConfig:
    seed: int = 0
    image_size: int = 128
    uv_size: int = 64
    n_views: int = 4
    n_drivings: int = 4
    n_holdout: int = 8
    n_expressions: int = 12
    camera_radius: float = 0.35
    expr_scale: float = 1.0
    yaw_range: tuple = (-0.6, 0.6)
    pitch_range: tuple = (-0.35, 0.35)
    background: tuple = (0.0, 0.0, 0.0)
    embed_dim: int = 128
    group_latent: int = 16
    hidden_layers: int = 3
    hidden_width: int = 64
    max_offset: float = 0.02

    def prior_config(self) -> PriorConfig:
        return PriorConfig(
            n_expressions=self.n_expressions, embed_dim=self.embed_dim,
            group_latent=self.group_latent,
            hidden_layers=self.hidden_layers,
            hidden_width=self.hidden_width, max_offset=self.max_offset)

    def adaptation_shape(self) -> AdaptationConfig:
        """Condition-sampling ranges shared with the adaptation stage so
        generated supervision matches the holdout distribution."""
        return AdaptationConfig(
            yaw_range=tuple(self.yaw_range),
            pitch_range=tuple(self.pitch_range),
            expr_scale=self.expr_scale,
            camera_radius=self.camera_radius, seed=self.seed)


def canonical_conditioning(rig: TemplateRig, uv_size: int,
                           texture: np.ndarray):
    """Anchor table, conditioning maps, and geometry statistics for the
    rig at rest. Stats are a pure function of (rig, uv_size), so every
    pipeline stage can recompute them instead of shipping them around."""
    anchors = texel_anchors(rig, uv_size, uv_size)
    frames0 = rig_frames(rig, rig.zero_driving(), anchors)
    stats = compute_geometry_stats([frames0.anchors], [frames0.valid])
    inputs = build_input_maps(texture, frames0.anchors, frames0.valid,
                              stats)
    return anchors, inputs, stats


def make_oracle_weights(pcfg: PriorConfig, seed: int) -> dict:
    """Random weights shaped so the decoded avatar is a plausible render
    target: mostly opaque, sub-texel footprints, strong color variation."""
    weights = init_weights(pcfg, seed=seed)
    w_out = weights["dec_w_out"]
    w_out[0:3] *= 0.5     # position offsets: keep anchored
    w_out[3:6] *= 2.0     # color: push away from flat gray
    w_out[6:10] *= 0.5    # rotation: gentle tilts
    w_out[10:12] *= 0.5   # log-scales
    w_out[12] *= 0.5      # opacity logits
    weights["dec_b_out"][12] += 2.0   # sigmoid(2) ≈ 0.88 opacity
    weights["dec_b_out"][10:12] -= 0.7  # ≈ half-texel footprints
    return weights


def _train_cameras(cfg: BenchmarkConfig):
    size = cfg.image_size
    fx = fy = 1.2 * size
    cameras = []
    yaws = np.linspace(-0.45, 0.45, cfg.n_views)
    for k, yaw in enumerate(yaws):
        pitch = 0.08 if k % 2 == 0 else -0.08
        eye = np.array([np.sin(yaw) * np.cos(pitch), np.sin(pitch),
                        np.cos(yaw) * np.cos(pitch)]) * cfg.camera_radius
        cameras.append(Camera.look_at(
            eye, (0.0, 0.0, 0.0), fx=fx, fy=fy, cx=size / 2.0,
            cy=size / 2.0, width=size, height=size))
    return cameras


def _train_drivings(cfg: BenchmarkConfig, rng: np.random.Generator):
    drivings = [DrivingSignal.zeros(cfg.n_expressions)]
    for _ in range(cfg.n_drivings - 1):
        psi = rng.normal(size=cfg.n_expressions)
        psi = psi / max(np.linalg.norm(psi), 1e-12) \
            * rng.uniform() ** (1.0 / cfg.n_expressions) \
            * 0.8 * cfg.expr_scale
        drivings.append(DrivingSignal(psi_expr=psi))
    return drivings


def _write_split(root: str, split: str, conditions, rig_rel: str,
                 tex_rel: str, background, renderer, provenance: str):
    split_dir = os.path.join(root, split)
    img_dir = os.path.join(split_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    records = []
    for i, (driving, camera) in enumerate(conditions):
        rgb = renderer(driving, camera)
        rel = os.path.join("images", f"frame_{i:03d}.png")
        save_png(os.path.join(split_dir, rel), rgb)
        records.append(FrameRecord(image=rel, camera=camera,
                                   driving=driving, provenance=provenance))
    ds = AvatarDataset(root=split_dir, frames=records, rig=rig_rel,
                       background=np.asarray(background, dtype=np.float64),
                       uv_texture=tex_rel)
    save_dataset(ds)
    return ds


def make_synthetic_benchmark(root: str, cfg: BenchmarkConfig) -> dict:
    """Returns a manifest dict (also written to bench.json)."""
    os.makedirs(root, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    pcfg = cfg.prior_config()

    rig = make_fixture_rig(n_expressions=cfg.n_expressions, seed=cfg.seed)
    save_rig(rig, os.path.join(root, "rig.obj"))

    tex_path = os.path.join(root, "uv_texture.png")
    save_png(tex_path, make_uv_texture(cfg.uv_size, cfg.uv_size, cfg.seed))
    texture = load_png(tex_path)  # quantized, same as every consumer sees

    anchors, inputs, _ = canonical_conditioning(rig, cfg.uv_size, texture)
    oracle = make_oracle_weights(pcfg, seed=cfg.seed)

    def render_gt(driving, camera):
        frames = rig_frames(rig, driving, anchors)
        out = render_prediction(pcfg, oracle, inputs, driving, frames,
                                camera, background=cfg.background)
        return out.rgb

    cameras = _train_cameras(cfg)
    drivings = _train_drivings(cfg, rng)
    train_conditions = [(d, c) for d in drivings for c in cameras]
    _write_split(root, "train", train_conditions, "../rig.obj",
                 "../uv_texture.png", cfg.background, render_gt, "real")

    holdout_rng = np.random.default_rng(cfg.seed + 7)
    holdout_conditions = sample_novel_conditions(
        cfg.n_holdout, cfg.n_expressions, cameras[0],
        cfg.adaptation_shape(), holdout_rng)
    _write_split(root, "holdout", holdout_conditions, "../rig.obj",
                 "../uv_texture.png", cfg.background, render_gt, "real")

    gmap0 = predict_gaussian_map(pcfg, oracle, inputs,
                                 DrivingSignal.zeros(cfg.n_expressions))
    save_gmap(os.path.join(root, "oracle.gmap"), gmap0)
    save_weights(os.path.join(root, "oracle.mgpw"), pcfg, oracle)

    manifest = {
        "config": asdict(cfg),
        "rig": "rig.obj",
        "uv_texture": "uv_texture.png",
        "train": "train",
        "holdout": "holdout",
        "oracle_gmap": "oracle.gmap",
        "oracle_weights": "oracle.mgpw",
        "n_train_frames": len(train_conditions),
        "n_holdout_frames": len(holdout_conditions),
    }
    atomic_write_bytes(os.path.join(root, "bench.json"),
                       json.dumps(manifest, indent=2).encode("utf-8"))
    return manifest


def load_bench_manifest(root: str) -> dict:
    with open(os.path.join(root, "bench.json"), "r", encoding="utf-8") as fh:
        return json.load(fh)
