"""Input validation helpers shared by the public entry points."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def check_array(x, name: str, shape=None, ndim=None, dtype=np.float64,
                finite=True) -> np.ndarray:
    """Coerce to an ndarray and enforce shape/finiteness contracts.

    ``shape`` entries set to None are unconstrained. Returns a float64 view
    or copy; integer inputs are upcast.
    """
    arr = np.asarray(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ContractError(f"{name}: expected ndim {ndim}, got {arr.ndim}")
    if shape is not None:
        if arr.ndim != len(shape):
            raise ContractError(
                f"{name}: expected shape {shape}, got {arr.shape}")
        for axis, want in enumerate(shape):
            if want is not None and arr.shape[axis] != want:
                raise ContractError(
                    f"{name}: expected shape {shape}, got {arr.shape}")
    if finite and arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
        raise ContractError(f"{name}: contains non-finite values")
    return arr


def check_finite_scalar(x, name: str) -> float:
    val = float(x)
    if not np.isfinite(val):
        raise ContractError(f"{name}: must be finite, got {val}")
    return val


def check_positive(x, name: str) -> float:
    val = check_finite_scalar(x, name)
    if val <= 0:
        raise ContractError(f"{name}: must be > 0, got {val}")
    return val


def check_unit_rows(arr: np.ndarray, name: str, tol: float) -> None:
    norms = np.linalg.norm(arr, axis=-1)
    worst = float(np.max(np.abs(norms - 1.0))) if norms.size else 0.0
    if worst > tol:
        raise ContractError(f"{name}: rows not unit norm (max dev {worst:g})")
