"""Test-time adaptation of the prior to a new subject.

Stage 1 fine-tunes every network weight on the handful of real frames at
a reduced learning rate. Stage 2 continues with a mixed pool: the real
frames plus novel-condition renders that were pushed through an image
enhancer; by default the two pools are sampled proportionally to their
sizes. Both stages are one loop (stage 1 is the empty-generated-pool
case), so disabling generated data degenerates to stage 1 exactly,
including the random stream.

The loop optionally averages gradients over a small batch per step and
preconditions the decoder gradients with Kronecker-factored curvature
estimates (see optim.KroneckerPreconditioner); both are off by default
and controlled through AdaptationConfig.
"""

from __future__ import annotations

import base64
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, EnhancerError, TrainingDivergedError
from .gaussian_map import decode_backward, decode_surfels
from .objectives import LossWeights, total_loss
from .optim import Adam, KroneckerPreconditioner
from .prior import (PriorConfig, TrainConfig, TrainSample, predict_backward,
                    predict_gaussian_map, train_step)
from .renderer import Camera, rasterize, rasterize_backward
from .rig import AnchorTable, DrivingSignal, TemplateRig, rig_frames

logger = logging.getLogger(__name__)


@dataclass
class AdaptationConfig:
    n_real: int = 3
    n_gen: int = 24
    stage1_steps: int = 60
    stage2_steps: int = 120
    lr_ratio: float = 0.05          # multiplies the prior's base lr
    yaw_range: tuple = (-0.6, 0.6)
    pitch_range: tuple = (-0.35, 0.35)
    expr_scale: float = 1.0
    camera_radius: float = 0.35
    seed: int = 0
    real_mix_ratio: float | None = None  # None -> n_real/(n_real+n_gen)
    enhancer_concurrency: int = 1
    batch_size: int = 1
    batch_schedule: str = "random"       # random | blocked
    precondition: str = "none"           # none | decoder
    precond_beta: float = 0.95
    precond_damping: float = 0.01

    def __post_init__(self):
        if self.n_real < 1:
            raise ContractError("AdaptationConfig: n_real must be >= 1")
        if self.n_gen < 0:
            raise ContractError("AdaptationConfig: n_gen must be >= 0")
        if self.lr_ratio < 0:
            raise ContractError("AdaptationConfig: lr_ratio must be >= 0")
        if self.real_mix_ratio is not None and \
                not (0.0 <= self.real_mix_ratio <= 1.0):
            raise ContractError(
                "AdaptationConfig: real_mix_ratio must lie in [0, 1]")
        if self.enhancer_concurrency < 1:
            raise ContractError(
                "AdaptationConfig: enhancer_concurrency must be >= 1")
        if self.batch_size < 1:
            raise ContractError("AdaptationConfig: batch_size must be >= 1")
        if self.batch_schedule not in ("random", "blocked"):
            raise ContractError(
                "AdaptationConfig: batch_schedule must be random or "
                f"blocked, got {self.batch_schedule!r}")
        if self.precondition not in ("none", "decoder"):
            raise ContractError(
                "AdaptationConfig: precondition must be none or decoder, "
                f"got {self.precondition!r}")
        if not (0.0 <= self.precond_beta < 1.0):
            raise ContractError(
                "AdaptationConfig: precond_beta must lie in [0, 1)")
        if self.precond_damping <= 0:
            raise ContractError(
                "AdaptationConfig: precond_damping must be > 0")


# ---------------------------------------------------------------------------
# Enhancer handles. Contract: enhance(degraded, reference) -> image, all
# (H, W, 3) float arrays in [0, 1]. `condition` is an optional hint for
# handles that can exploit it; remote services never see it.

class EnhancerHandle:
    def enhance(self, degraded: np.ndarray, reference: np.ndarray,
                condition=None) -> np.ndarray:
        raise NotImplementedError


class IdentityEnhancer(EnhancerHandle):
    def enhance(self, degraded, reference, condition=None):
        return np.asarray(degraded, dtype=np.float64)


class OracleEnhancer(EnhancerHandle):
    """Replaces the render with ground truth for its condition; an upper
    bound for what any enhancer could contribute. Only usable where
    ground truth exists (synthetic benchmarks)."""

    def __init__(self, truth_fn):
        self._truth_fn = truth_fn

    def enhance(self, degraded, reference, condition=None):
        if condition is None:
            raise EnhancerError(
                "OracleEnhancer needs the generating condition")
        truth = np.asarray(self._truth_fn(condition), dtype=np.float64)
        if truth.shape != np.asarray(degraded).shape:
            raise EnhancerError(
                f"oracle truth shape {truth.shape} != degraded "
                f"{np.asarray(degraded).shape}")
        return truth


def _png_b64(img: np.ndarray) -> str:
    from PIL import Image

    from .imageio import to_uint8
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _b64_png(blob: str) -> np.ndarray:
    from PIL import Image
    try:
        raw = base64.b64decode(blob, validate=True)
        img = Image.open(io.BytesIO(raw)).convert("RGB")
    except Exception as exc:
        raise EnhancerError(f"enhancer returned a bad image: {exc}") from exc
    return np.asarray(img, dtype=np.float64) / 255.0


class RemoteEnhancer(EnhancerHandle):
    """HTTP client for the enhancer sidecar: POST {url}/enhance with
    base64 PNGs {"degraded": ..., "reference": ...}, expects
    {"enhanced": ...}."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url.rstrip("/")
        self.timeout = timeout

    def enhance(self, degraded, reference, condition=None):
        import requests
        payload = {"degraded": _png_b64(degraded),
                   "reference": _png_b64(reference)}
        try:
            resp = requests.post(f"{self.url}/enhance", json=payload,
                                 timeout=self.timeout)
        except requests.RequestException as exc:
            raise EnhancerError(f"enhancer request failed: {exc}") from exc
        if resp.status_code != 200:
            raise EnhancerError(
                f"enhancer returned HTTP {resp.status_code}: "
                f"{resp.text[:200]}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise EnhancerError("enhancer returned non-JSON body") from exc
        if "enhanced" not in body:
            raise EnhancerError("enhancer response missing 'enhanced'")
        img = _b64_png(body["enhanced"])
        if img.shape != np.asarray(degraded, dtype=np.float64).shape:
            raise EnhancerError(
                f"enhancer changed image shape to {img.shape}")
        return img


# ---------------------------------------------------------------------------
# Novel condition sampling.

def sample_novel_conditions(n: int, n_expressions: int,
                            template_camera: Camera,
                            adapt_cfg: AdaptationConfig,
                            rng: np.random.Generator):
    """Random (driving, camera) pairs: cameras orbit the origin on a
    sphere looking inward, expressions are drawn uniformly from a ball."""
    conditions = []
    for _ in range(n):
        yaw = rng.uniform(*adapt_cfg.yaw_range)
        pitch = rng.uniform(*adapt_cfg.pitch_range)
        r = adapt_cfg.camera_radius
        eye = np.array([np.sin(yaw) * np.cos(pitch),
                        np.sin(pitch),
                        np.cos(yaw) * np.cos(pitch)]) * r
        camera = Camera.look_at(
            eye, (0.0, 0.0, 0.0), fx=template_camera.fx,
            fy=template_camera.fy, cx=template_camera.cx,
            cy=template_camera.cy, width=template_camera.width,
            height=template_camera.height, near=template_camera.near,
            far=template_camera.far)
        direction = rng.normal(size=n_expressions)
        norm = np.linalg.norm(direction)
        if norm < 1e-12:
            direction = np.zeros(n_expressions)
            direction[0] = 1.0
            norm = 1.0
        radius = rng.uniform() ** (1.0 / n_expressions) \
            * adapt_cfg.expr_scale
        psi = direction / norm * radius
        conditions.append((DrivingSignal(psi_expr=psi), camera))
    return conditions


# ---------------------------------------------------------------------------
# Supervision synthesis.

def generate_supervision(cfg: PriorConfig, weights: dict, inputs,
                         rig: TemplateRig, anchors: AnchorTable,
                         conditions: list, enhancer: EnhancerHandle,
                         reference_image: np.ndarray,
                         *, background=(0.0, 0.0, 0.0),
                         renderer_mode: str = "tiled",
                         threads: int | None = None,
                         concurrency: int = 1) -> list:
    """Render each novel condition with the current weights, push the
    render through the enhancer, and wrap the result as a training sample
    tagged "generated". Failed enhancements are skipped with a warning;
    more than half failing aborts."""
    background = np.asarray(background, dtype=np.float64)
    reference_image = np.asarray(reference_image, dtype=np.float64)
    renders = []
    for driving, camera in conditions:
        frames = rig_frames(rig, driving, anchors)
        gmap = predict_gaussian_map(cfg, weights, inputs, driving)
        surfels = decode_surfels(gmap, frames, max_offset=cfg.max_offset)
        out = rasterize(surfels, camera, background, mode=renderer_mode,
                        threads=threads)
        renders.append((driving, camera, frames, out.rgb))

    def enhance_one(item):
        driving, camera, frames, rgb = item
        try:
            enhanced = enhancer.enhance(rgb, reference_image,
                                        condition=(driving, camera))
            return np.clip(enhanced, 0.0, 1.0)
        except EnhancerError as exc:
            logger.warning("enhancer failed for one condition: %s", exc)
            return None

    if concurrency > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            enhanced_all = list(pool.map(enhance_one, renders))
    else:
        enhanced_all = [enhance_one(item) for item in renders]

    samples = []
    for (driving, camera, frames, _), enhanced in zip(renders,
                                                      enhanced_all):
        if enhanced is None:
            continue
        samples.append(TrainSample(inputs=inputs, driving=driving,
                                   frames=frames, camera=camera,
                                   target=enhanced, tag="generated"))
    n_failed = len(conditions) - len(samples)
    if conditions and n_failed * 2 > len(conditions):
        raise EnhancerError(
            f"enhancer failed on {n_failed}/{len(conditions)} conditions")
    if n_failed:
        logger.warning("dropped %d/%d generated samples", n_failed,
                       len(conditions))
    return samples


# ---------------------------------------------------------------------------
# The adaptation loop.

@dataclass
class Adapter:
    """Stateful fine-tuner. Stage 1 is run(real, []); stage 2 is
    run(real, generated). Optimizer and RNG state persist across run()
    calls, so consecutive runs equal one longer run."""

    cfg: PriorConfig
    weights: dict
    lr: float
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    background: tuple = (0.0, 0.0, 0.0)
    renderer_mode: str = "tiled"
    threads: int | None = None
    batch_size: int = 1
    batch_schedule: str = "random"
    precondition: str = "none"
    precond_beta: float = 0.95
    precond_damping: float = 0.01

    def __post_init__(self):
        self.weights = {k: np.asarray(v, dtype=np.float64).copy()
                        for k, v in self.weights.items()}
        self._optimizer = Adam(lr=self.lr, betas=self.betas)
        self._rng = np.random.default_rng(self.seed)
        self._train_cfg = TrainConfig(
            steps=0, lr=self.lr, betas=self.betas, seed=self.seed,
            background=self.background, renderer_mode=self.renderer_mode,
            threads=self.threads, loss_weights=self.loss_weights)
        self._precond = None
        if self.precondition == "decoder":
            self._precond = KroneckerPreconditioner(
                self.cfg.hidden_layers, beta=self.precond_beta,
                damping=self.precond_damping)
        self._blocked_step = 0

    def run(self, real_samples: list, gen_samples: list, steps: int,
            real_mix_ratio: float | None = None) -> list:
        """Fine-tune for `steps`; returns the per-step loss trace.

        Sampling: every batch slot draws one uniform (pool choice) and
        one integer (sample within pool) whether or not the generated
        pool is empty, keeping the stream identical between an
        empty-pool stage 2 and stage 1. Exception: with
        batch_schedule="blocked", batch_size > 1, and a purely real
        pool, each step instead covers the pool deterministically --
        slot b takes member (step mod L) of the b-th contiguous block
        of length L = n_real / batch_size -- and consumes no random
        draws. Blocked scheduling guarantees every batch spans the
        whole pool (with the benchmark's driving-major frame order,
        one view per driving), which keeps curvature estimates stable.
        """
        if not real_samples:
            raise ContractError("adaptation needs at least one real frame")
        n_r, n_g = len(real_samples), len(gen_samples)
        p_real = real_mix_ratio
        if p_real is None:
            p_real = n_r / (n_r + n_g) if n_g else 1.0
        blocked = (self.batch_schedule == "blocked" and n_g == 0
                   and self.batch_size > 1)
        if blocked and n_r % self.batch_size:
            raise ContractError(
                f"blocked schedule needs the real pool ({n_r}) divisible "
                f"by batch_size ({self.batch_size})")
        trace = []
        for _ in range(steps):
            if blocked:
                block = n_r // self.batch_size
                batch = [real_samples[b * block
                                      + self._blocked_step % block]
                         for b in range(self.batch_size)]
                self._blocked_step += 1
            else:
                batch = []
                for _ in range(self.batch_size):
                    u = self._rng.uniform()
                    if n_g == 0 or u < p_real:
                        pool = real_samples
                    else:
                        pool = gen_samples
                    k = int(self._rng.integers(len(pool)))
                    batch.append(pool[k])
            if len(batch) == 1 and self._precond is None:
                trace.append(train_step(self.cfg, self.weights, batch[0],
                                        self._train_cfg, self._optimizer))
            else:
                trace.append(self._batch_step(batch))
        return trace

    def _batch_step(self, batch: list) -> float:
        """One update from the mean gradient of a batch, optionally
        curvature-preconditioned; returns the mean loss before update."""
        cfg, tcfg = self.cfg, self._train_cfg
        background = np.asarray(tcfg.background, dtype=np.float64)
        total = 0.0
        acc = None
        activations = None
        out_rows = []
        for sample in batch:
            gmap, cache = predict_gaussian_map(
                cfg, self.weights, sample.inputs, sample.driving,
                with_cache=True)
            surfels = decode_surfels(gmap, sample.frames,
                                     max_offset=cfg.max_offset)
            out = rasterize(surfels, sample.camera, background,
                            mode=tcfg.renderer_mode, threads=tcfg.threads)
            report, rgrads = total_loss(out, sample.target,
                                        tcfg.loss_weights, sample.mask)
            if not np.isfinite(report.total):
                raise TrainingDivergedError(
                    f"non-finite loss {report.total!r}")
            buf = rasterize_backward(out, rgrads, threads=tcfg.threads)
            d_raw = decode_backward(gmap, sample.frames, cfg.max_offset,
                                    buf.d_center, buf.d_rotation,
                                    buf.d_scales, buf.d_color,
                                    buf.d_opacity)
            grads = predict_backward(cfg, self.weights, cache, d_raw)
            total += report.total
            if acc is None:
                acc = grads
            else:
                for name in acc:
                    acc[name] = acc[name] + grads[name]
            if self._precond is not None:
                hs = cache["dec"]["hs"]
                if activations is None:
                    activations = [h.copy() for h in hs]
                else:
                    activations = [np.concatenate([a, h], axis=0)
                                   for a, h in zip(activations, hs)]
                out_rows.append(d_raw[gmap.mask])
        n = float(len(batch))
        for name in acc:
            acc[name] = acc[name] / n
        if self._precond is not None:
            self._precond.apply(acc, activations,
                                np.concatenate(out_rows, axis=0))
        self._optimizer.step(self.weights, acc)
        return total / n


def adapt_stage1(cfg: PriorConfig, weights: dict, real_samples: list,
                 adapt_cfg: AdaptationConfig, base_lr: float,
                 loss_weights: LossWeights | None = None,
                 background=(0.0, 0.0, 0.0), renderer_mode="tiled",
                 threads=None):
    """Few-shot fine-tune on the real frames. Returns (weights, trace)."""
    adapter = Adapter(cfg=cfg, weights=weights,
                      lr=adapt_cfg.lr_ratio * base_lr,
                      seed=adapt_cfg.seed,
                      loss_weights=loss_weights or LossWeights(),
                      background=background, renderer_mode=renderer_mode,
                      threads=threads,
                      batch_size=adapt_cfg.batch_size,
                      batch_schedule=adapt_cfg.batch_schedule,
                      precondition=adapt_cfg.precondition,
                      precond_beta=adapt_cfg.precond_beta,
                      precond_damping=adapt_cfg.precond_damping)
    trace = adapter.run(real_samples, [], adapt_cfg.stage1_steps)
    return adapter.weights, trace


def adapt_stage2(cfg: PriorConfig, weights: dict, real_samples: list,
                 gen_samples: list, adapt_cfg: AdaptationConfig,
                 base_lr: float, loss_weights: LossWeights | None = None,
                 background=(0.0, 0.0, 0.0), renderer_mode="tiled",
                 threads=None):
    """Mixed real/generated fine-tune. Returns (weights, trace)."""
    adapter = Adapter(cfg=cfg, weights=weights,
                      lr=adapt_cfg.lr_ratio * base_lr,
                      seed=adapt_cfg.seed,
                      loss_weights=loss_weights or LossWeights(),
                      background=background, renderer_mode=renderer_mode,
                      threads=threads,
                      batch_size=adapt_cfg.batch_size,
                      batch_schedule=adapt_cfg.batch_schedule,
                      precondition=adapt_cfg.precondition,
                      precond_beta=adapt_cfg.precond_beta,
                      precond_damping=adapt_cfg.precond_damping)
    trace = adapter.run(real_samples, gen_samples, adapt_cfg.stage2_steps,
                        adapt_cfg.real_mix_ratio)
    return adapter.weights, trace
