"""Scene builders shared by the tests."""

import numpy as np
import torch

from deformhead.field import CameraPose, orbit_camera


def random_raw(seed: int, n: int, spread: float = 0.5, scale=(-2.2, -1.4)):
    """Raw float64 primitive arrays near the origin."""
    rng = np.random.default_rng(seed)
    mu = rng.uniform(-spread, spread, (n, 3))
    scale_raw = rng.uniform(*scale, (n, 3))
    quat_raw = rng.normal(size=(n, 4))
    opacity_raw = rng.uniform(-1.5, 2.5, n)
    color_raw = rng.normal(size=(n, 3))
    return [torch.tensor(a, dtype=torch.float64) for a in (mu, scale_raw, quat_raw, opacity_raw, color_raw)]


def camera(size: int, seed: int = 0, distance: float = 3.0) -> CameraPose:
    rng = np.random.default_rng(seed + 99)
    yaw, pitch = rng.uniform(-0.3, 0.3, 2)
    return orbit_camera(float(yaw), float(pitch), distance, 1.1 * size, size)


def camera_arrays(cam: CameraPose):
    return dict(R=cam.R, t=cam.t, fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy, W=cam.width, H=cam.height)

