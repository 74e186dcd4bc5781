"""Photometric evaluation metrics and their CSV table.

PSNR uses peak 1.0 and reports a 99 dB sentinel for (near-)zero MSE so
downstream CSV tooling never meets an infinity.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .imageio import atomic_write_bytes
from .objectives import ssim_loss
from .validation import check_array

PSNR_CAP = 99.0


def psnr(img: np.ndarray, target: np.ndarray) -> float:
    img = check_array(img, "img", dtype=np.float64)
    target = check_array(target, "target", shape=img.shape)
    mse = float(np.mean((img - target) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def ssim(img: np.ndarray, target: np.ndarray) -> float:
    loss, _ = ssim_loss(img, target)
    return 1.0 - loss


def l1(img: np.ndarray, target: np.ndarray) -> float:
    img = check_array(img, "img", dtype=np.float64)
    target = check_array(target, "target", shape=img.shape)
    return float(np.mean(np.abs(img - target)))


def eval_metrics(renders, targets, names=None):
    """Per-frame {psnr, ssim, l1} plus a mean summary row.

    Returns (rows, csv_text); rows is a list of dicts, the last one named
    "mean". CSV floats are fixed to 6 decimals so reruns are byte-stable.
    """
    renders = list(renders)
    targets = list(targets)
    if len(renders) != len(targets):
        raise ContractError(
            f"eval_metrics: {len(renders)} renders vs {len(targets)} targets")
    if not renders:
        raise ContractError("eval_metrics: nothing to evaluate")
    if names is None:
        names = [f"frame_{i:03d}" for i in range(len(renders))]

    rows = []
    for name, render, target in zip(names, renders, targets):
        render = np.asarray(render, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        if render.shape != target.shape:
            raise ContractError(
                f"eval_metrics: {name}: shape {render.shape} vs "
                f"{target.shape}")
        rows.append({"frame": name, "psnr": psnr(render, target),
                     "ssim": ssim(render, target),
                     "l1": l1(render, target)})
    rows.append({
        "frame": "mean",
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
        "l1": float(np.mean([r["l1"] for r in rows])),
    })
    lines = ["frame,psnr,ssim,l1"]
    for row in rows:
        lines.append(f"{row['frame']},{row['psnr']:.6f},"
                     f"{row['ssim']:.6f},{row['l1']:.6f}")
    return rows, "\n".join(lines) + "\n"


def write_csv(path, csv_text: str) -> None:
    atomic_write_bytes(path, csv_text.encode("utf-8"))
