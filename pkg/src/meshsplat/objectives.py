"""Photometric and geometric training objectives.

total = L1 + λ_perc·(1 − SSIM) + λ_d·depth_distortion + λ_n·normal_consistency

All gradients are hand-derived; SSIM uses the standard 11×11 Gaussian
window (σ=1.5) with C1 = 0.01², C2 = 0.03² on [0, 1] images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import ContractError
from .renderer import (RenderGrads, RenderOutput, depth_distortion_image,
                       normal_consistency_image)
from .validation import check_array

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _gauss_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k1 = np.exp(-0.5 * (ax / sigma) ** 2)
    k2 = np.outer(k1, k1)
    return k2 / k2.sum()


_KERNEL = _gauss_kernel()


def _window_mask(mask: np.ndarray | None, h: int, w: int) -> np.ndarray:
    """Window (i, j) is kept iff the pixel under its center is unmasked."""
    hw, ww = h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1
    if mask is None:
        return np.ones((hw, ww), dtype=bool)
    off = SSIM_WINDOW // 2
    return mask[off:off + hw, off:off + ww].astype(bool)


def _as_chw(img: np.ndarray, name: str) -> np.ndarray:
    img = check_array(img, name, dtype=np.float64)
    if img.ndim == 2:
        return img[None, :, :]
    if img.ndim == 3:
        return np.moveaxis(img, -1, 0)
    raise ContractError(f"{name}: expected HxW or HxWxC image")


def ssim_loss(img: np.ndarray, target: np.ndarray,
              mask: np.ndarray | None = None):
    """1 − mean SSIM over valid (fully inside) windows, plus d/d img.

    Images are HxW or HxWxC in [0, 1]-ish range; target is a constant.
    Returns (loss, grad) with grad shaped like img.
    """
    x_c = _as_chw(img, "img")
    y_c = _as_chw(target, "target")
    if x_c.shape != y_c.shape:
        raise ContractError(
            f"ssim_loss: shape mismatch {x_c.shape} vs {y_c.shape}")
    c, h, w = x_c.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        return 0.0, np.zeros_like(img)
    sel = _window_mask(mask, h, w)
    m = int(np.count_nonzero(sel)) * c
    if m == 0:
        return 0.0, np.zeros_like(img)

    grad_c = np.zeros_like(x_c)
    loss_sum = 0.0
    for ch in range(c):
        x, y = x_c[ch], y_c[ch]
        mx = fftconvolve(x, _KERNEL, mode="valid")
        my = fftconvolve(y, _KERNEL, mode="valid")
        xx = fftconvolve(x * x, _KERNEL, mode="valid")
        yy = fftconvolve(y * y, _KERNEL, mode="valid")
        xy = fftconvolve(x * y, _KERNEL, mode="valid")
        a1 = 2.0 * mx * my + SSIM_C1
        a2 = 2.0 * (xy - mx * my) + SSIM_C2
        b1 = mx * mx + my * my + SSIM_C1
        b2 = (xx - mx * mx) + (yy - my * my) + SSIM_C2
        s = (a1 * a2) / (b1 * b2)
        loss_sum += float(np.sum(s[sel]))

        g_s = np.where(sel, -1.0 / m, 0.0)
        p = a1 / (b1 * b2)
        q = a2 / (b1 * b2)
        g_mx = g_s * (2.0 * my * (q - p) - 2.0 * mx * (s / b1 - s / b2))
        g_xx = g_s * (-s / b2)
        g_xy = g_s * (2.0 * p)
        grad_c[ch] = (fftconvolve(g_mx, _KERNEL, mode="full")
                      + fftconvolve(g_xx, _KERNEL, mode="full") * 2.0 * x
                      + fftconvolve(g_xy, _KERNEL, mode="full") * y)

    loss = 1.0 - loss_sum / m
    grad = grad_c[0] if img.ndim == 2 else np.moveaxis(grad_c, 0, -1)
    return loss, grad


def l1_loss(img: np.ndarray, target: np.ndarray,
            mask: np.ndarray | None = None):
    """Mean absolute error over (optionally masked) pixels and channels.
    Returns (loss, grad wrt img); the subgradient at exact ties is 0."""
    img = check_array(img, "img", dtype=np.float64)
    target = check_array(target, "target", dtype=np.float64)
    if img.shape != target.shape:
        raise ContractError(
            f"l1_loss: shape mismatch {img.shape} vs {target.shape}")
    diff = img - target
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != img.shape[:2]:
            raise ContractError("l1_loss: mask must be HxW")
        mm = mask if img.ndim == 2 else mask[:, :, None]
        count = int(np.count_nonzero(mask)) * \
            (1 if img.ndim == 2 else img.shape[2])
        if count == 0:
            return 0.0, np.zeros_like(img)
        loss = float(np.sum(np.abs(diff) * mm)) / count
        grad = np.sign(diff) * mm / count
    else:
        loss = float(np.mean(np.abs(diff)))
        grad = np.sign(diff) / diff.size
    return loss, grad


@dataclass
class LossWeights:
    perceptual: float = 0.2
    depth_distortion: float = 100.0
    normal_consistency: float = 0.05

    def __post_init__(self):
        for name in ("perceptual", "depth_distortion", "normal_consistency"):
            if getattr(self, name) < 0:
                raise ContractError(f"LossWeights.{name} must be >= 0")


@dataclass
class LossReport:
    l1: float
    perceptual: float
    depth_distortion: float
    normal_consistency: float
    total: float


def total_loss(output: RenderOutput, target_rgb: np.ndarray,
               weights: LossWeights | None = None,
               mask: np.ndarray | None = None,
               perceptual_fn=None):
    """Full objective on one rendered view.

    The photometric terms (L1, perceptual) respect the mask; the
    geometric regularizers always act on everything the renderer
    covered. `perceptual_fn(img, target, mask) -> (value, grad)` swaps
    in a different perceptual term; the default is 1 - SSIM.
    Returns (LossReport, RenderGrads) ready for rasterize_backward.
    """
    if weights is None:
        weights = LossWeights()
    if perceptual_fn is None:
        perceptual_fn = ssim_loss
    target_rgb = check_array(target_rgb, "target_rgb",
                             shape=output.rgb.shape)

    v_l1, g_l1 = l1_loss(output.rgb, target_rgb, mask)
    v_ss, g_ss = perceptual_fn(output.rgb, target_rgb, mask)
    v_dd, dd_domega, dd_dz = depth_distortion_image(output)
    v_nc, nc_domega, nc_dnormal, nc_ddepth = \
        normal_consistency_image(output)

    total = (v_l1 + weights.perceptual * v_ss
             + weights.depth_distortion * v_dd
             + weights.normal_consistency * v_nc)
    report = LossReport(l1=v_l1, perceptual=v_ss, depth_distortion=v_dd,
                        normal_consistency=v_nc, total=total)
    grads = RenderGrads(
        rgb=g_l1 + weights.perceptual * g_ss,
        depth=weights.normal_consistency * nc_ddepth,
        rec_omega=(weights.depth_distortion * dd_domega
                   + weights.normal_consistency * nc_domega),
        rec_z=weights.depth_distortion * dd_dz,
        rec_normal=weights.normal_consistency * nc_dnormal,
    )
    return report, grads
