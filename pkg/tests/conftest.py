"""Shared fixtures and finite-difference helpers.

The FD helpers are the independent oracle for every analytic gradient
in the package: central differences with step 1e-5 at float64,
compared at rel. err 1e-3 with a small absolute floor.
"""

import numpy as np
import pytest

from meshsplat import (Camera, SurfelSet, make_fixture_rig, make_uv_texture,
                       canonical_conditioning, PriorConfig, init_weights)

FD_STEP = 1e-5
FD_RTOL = 1e-3
FD_ATOL = 1e-6


def fd_scalar(fn, arr, index, step=FD_STEP):
    """Central difference of scalar fn() wrt arr[index], in place."""
    orig = arr[index]
    arr[index] = orig + step
    hi = fn()
    arr[index] = orig - step
    lo = fn()
    arr[index] = orig
    return (hi - lo) / (2.0 * step)


def fd_directional(fn, arr, direction, step=FD_STEP):
    """Central difference of scalar fn() along a direction, in place."""
    orig = arr.copy()
    arr += step * direction
    hi = fn()
    arr[...] = orig - step * direction
    lo = fn()
    arr[...] = orig
    return (hi - lo) / (2.0 * step)


def assert_grad_close(analytic, numeric, rtol=FD_RTOL, atol=FD_ATOL,
                      label=""):
    analytic = float(analytic)
    numeric = float(numeric)
    err = abs(analytic - numeric)
    bound = rtol * max(abs(analytic), abs(numeric)) + atol
    assert err <= bound, (
        f"{label}: analytic {analytic:.8g} vs fd {numeric:.8g} "
        f"(err {err:.3g} > bound {bound:.3g})")


def _grad_close(analytic, numeric, rtol, atol):
    err = abs(analytic - numeric)
    return err <= rtol * max(abs(analytic), abs(numeric)) + atol


def fd_check(analytic, fn, arr, index, label=""):
    """Assert analytic matches a finite difference of fn() wrt arr[index].

    Rendering losses are only piecewise smooth: a compositing-order flip
    or a cull-threshold crossing inside the probe interval makes that one
    central difference meaningless.  Retry with a smaller step at the same
    strict tolerances; if the breakpoint sits inside even the small
    interval, fall back to one-sided differences, whose tolerance reflects
    their O(h) truncation error instead of the central O(h^2).
    """
    analytic = float(analytic)
    fd = fd_scalar(fn, arr, index)
    if _grad_close(analytic, fd, FD_RTOL, FD_ATOL):
        return
    small = FD_STEP / 8.0
    fd2 = fd_scalar(fn, arr, index, step=small)
    if _grad_close(analytic, fd2, FD_RTOL, FD_ATOL):
        return
    orig = arr[index]
    mid = fn()
    arr[index] = orig + small
    hi = fn()
    arr[index] = orig - small
    lo = fn()
    arr[index] = orig
    fwd = (hi - mid) / small
    bwd = (mid - lo) / small
    if (_grad_close(analytic, fwd, 3e-3, 2e-5)
            or _grad_close(analytic, bwd, 3e-3, 2e-5)):
        return
    raise AssertionError(
        f"{label}: analytic {analytic:.8g} matches no finite difference "
        f"(central {fd:.8g}, small-step {fd2:.8g}, "
        f"forward {fwd:.8g}, backward {bwd:.8g})")


def random_surfels(rng, n, spread=0.06, z_offset=0.0):
    """A SurfelSet scattered around the origin, safely inside clips."""
    centers = rng.uniform(-spread, spread, size=(n, 3))
    centers[:, 2] += z_offset
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    scales = rng.uniform(0.015, 0.06, size=(n, 2))
    colors = rng.uniform(0.1, 0.9, size=(n, 3))
    opacities = rng.uniform(0.35, 0.92, size=n)
    return SurfelSet(centers=centers, rotations=quats, scales=scales,
                     colors=colors, opacities=opacities,
                     texel_indices=np.arange(n))


def make_camera(size=16, distance=0.35, focal_factor=1.1):
    return Camera.look_at((0.0, 0.0, distance), (0.0, 0.0, 0.0),
                          fx=focal_factor * size, fy=focal_factor * size,
                          cx=size / 2.0, cy=size / 2.0,
                          width=size, height=size)


@pytest.fixture(scope="session")
def small_rig():
    return make_fixture_rig(n_lat=10, n_lon=18, n_expressions=5, seed=0)


@pytest.fixture(scope="session")
def small_world(small_rig):
    """(rig, anchors, inputs) at a small UV resolution."""
    texture = make_uv_texture(12, 12, seed=3)
    anchors, inputs, stats = canonical_conditioning(small_rig, 12, texture)
    return small_rig, anchors, inputs


@pytest.fixture(scope="session")
def tiny_prior(small_rig):
    cfg = PriorConfig(n_expressions=small_rig.n_expressions, embed_dim=20,
                      group_latent=6, hidden_layers=2, hidden_width=16)
    weights = init_weights(cfg, seed=1)
    return cfg, weights
