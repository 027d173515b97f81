"""Gaussian primitives: raw storage, activations, covariances, cameras."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

FACE = 0
MOUTH = 1
REGION_NAMES = {FACE: "face", MOUTH: "mouth"}


class DegenerateQuaternionError(ValueError):
    """A raw quaternion is too close to zero to normalize."""


class Activated(NamedTuple):
    mu: torch.Tensor  # (P, 3)
    scale: torch.Tensor  # (P, 3)
    quat: torch.Tensor  # (P, 4) unit, (w, x, y, z)
    opacity: torch.Tensor  # (P,)
    color: torch.Tensor  # (P, 3)


def normalize_quat(quat_raw: torch.Tensor) -> torch.Tensor:
    norm = quat_raw.norm(dim=-1, keepdim=True)
    if bool((norm < 1e-12).any()):
        raise DegenerateQuaternionError("quaternion norm below 1e-12")
    return quat_raw / norm


def activate(
    mu: torch.Tensor,
    scale_raw: torch.Tensor,
    quat_raw: torch.Tensor,
    opacity_raw: torch.Tensor,
    color_raw: torch.Tensor,
) -> Activated:
    """Map unconstrained storage to (mu, scale, unit quat, opacity, color)."""
    return Activated(
        mu=mu,
        scale=torch.exp(scale_raw),
        quat=normalize_quat(quat_raw),
        opacity=torch.sigmoid(opacity_raw),
        color=torch.sigmoid(color_raw),
    )


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices for unit quaternions ``(..., 4)`` in (w, x, y, z) order."""
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(*q.shape[:-1], 3, 3)


def covariance3d(scale: torch.Tensor, quat: torch.Tensor) -> torch.Tensor:
    """Sigma = R(q) diag(s^2) R(q)^T, batched over leading dims."""
    rot = quat_to_rotmat(quat)
    m = rot * scale.unsqueeze(-2)  # R @ diag(s)
    return m @ m.transpose(-1, -2)


class GaussianField(nn.Module):
    """Fixed-size, region-tagged set of Gaussian primitives.

    Raw parameters are stored unconstrained (log scale, logit opacity and
    color, unnormalized quaternion) and activated on demand.
    """

    def __init__(
        self,
        mu: torch.Tensor,
        scale_raw: torch.Tensor,
        quat_raw: torch.Tensor,
        opacity_raw: torch.Tensor,
        color_raw: torch.Tensor,
        region: torch.Tensor,
        bounds: torch.Tensor,
    ):
        super().__init__()
        n = mu.shape[0]
        shapes = {
            "mu": (mu, (n, 3)),
            "scale_raw": (scale_raw, (n, 3)),
            "quat_raw": (quat_raw, (n, 4)),
            "opacity_raw": (opacity_raw, (n,)),
            "color_raw": (color_raw, (n, 3)),
            "region": (region, (n,)),
        }
        for name, (tensor, shape) in shapes.items():
            if tuple(tensor.shape) != shape:
                raise ValueError(f"{name} has shape {tuple(tensor.shape)}, expected {shape}")
        self.mu = nn.Parameter(mu.clone())
        self.scale_raw = nn.Parameter(scale_raw.clone())
        self.quat_raw = nn.Parameter(quat_raw.clone())
        self.opacity_raw = nn.Parameter(opacity_raw.clone())
        self.color_raw = nn.Parameter(color_raw.clone())
        self.register_buffer("region", region.clone().long())
        self.register_buffer("bounds", bounds.clone().to(mu.dtype))

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    @property
    def mouth_mask(self) -> torch.Tensor:
        return self.region == MOUTH

    @property
    def face_mask(self) -> torch.Tensor:
        return self.region == FACE

    def raw(self) -> tuple[torch.Tensor, ...]:
        return (self.mu, self.scale_raw, self.quat_raw, self.opacity_raw, self.color_raw)

    def activate(self) -> Activated:
        return activate(*self.raw())

    def inside_bounds(self) -> bool:
        lo, hi = self.bounds
        return bool(((self.mu >= lo) & (self.mu <= hi)).all())

    def normalized_positions(self, mu: Optional[torch.Tensor] = None) -> torch.Tensor:
        mu = self.mu if mu is None else mu
        lo, hi = self.bounds
        return (mu - lo) / (hi - lo)


def _check_bounds(bounds: Sequence[Sequence[float]]) -> np.ndarray:
    b = np.asarray(bounds, dtype=np.float64)
    if b.shape != (2, 3):
        raise ValueError(f"bounds must be [[xmin,ymin,zmin],[xmax,ymax,zmax]], got shape {b.shape}")
    if np.any(b[1] - b[0] <= 0):
        raise ValueError("zero-volume bounds")
    return b


def init_field(
    n_face: int,
    n_mouth: int,
    bounds: Sequence[Sequence[float]],
    seed: int,
    mouth_bounds: Optional[Sequence[Sequence[float]]] = None,
    dtype: torch.dtype = torch.float32,
    init_bounds: Optional[Sequence[Sequence[float]]] = None,
) -> GaussianField:
    """Random static field: centers uniform in ``bounds`` (face centers in
    ``init_bounds``, mouth centers in ``mouth_bounds`` when given), isotropic
    scales whose 3-sigma footprint matches the mean nearest-neighbour
    distance, opacity 0.1, gray color."""
    if n_face < 1 or n_mouth < 1:
        raise ValueError("n_face and n_mouth must be >= 1")
    b = _check_bounds(bounds)
    mb = b if mouth_bounds is None else _check_bounds(mouth_bounds)
    fb = b if init_bounds is None else _check_bounds(init_bounds)
    for name, inner in (("mouth_bounds", mb), ("init_bounds", fb)):
        if np.any(inner[0] < b[0]) or np.any(inner[1] > b[1]):
            raise ValueError(f"{name} must lie inside bounds")
    rng = np.random.default_rng(seed)
    face = rng.uniform(fb[0], fb[1], size=(n_face, 3))
    mouth = rng.uniform(mb[0], mb[1], size=(n_mouth, 3))
    mu = np.concatenate([face, mouth], axis=0)
    n = mu.shape[0]
    if n > 1:
        dist, _ = cKDTree(mu).query(mu, k=2)
        nn_mean = float(dist[:, 1].mean())
    else:
        nn_mean = float(np.min(b[1] - b[0])) / 2
    scale_raw = np.full((n, 3), math.log(nn_mean / 3.0))
    quat_raw = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    opacity_raw = np.full(n, math.log(0.1 / 0.9))
    color_raw = np.zeros((n, 3))
    region = np.concatenate([np.full(n_face, FACE), np.full(n_mouth, MOUTH)])

    def t(a):
        return torch.as_tensor(a, dtype=dtype)

    return GaussianField(
        t(mu), t(scale_raw), t(quat_raw), t(opacity_raw), t(color_raw),
        torch.as_tensor(region, dtype=torch.long), t(b),
    )


@dataclass
class CameraPose:
    """Pinhole camera; ``R`` and ``t`` map world to camera (x right, y down, z forward)."""

    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        err = np.abs(self.R.T @ self.R - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"camera rotation is not orthonormal (error {err:.3g})")
        if self.width < 8 or self.height < 8:
            raise ValueError("camera width and height must be >= 8")

    def to_json(self) -> dict:
        return {
            "R": [float(v) for v in self.R.reshape(-1)],
            "t": [float(v) for v in self.t],
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    def to_list(self) -> list:
        """Compact ``[R9, t3, fx, fy, cx, cy]`` form used in camera-track files."""
        return [[float(v) for v in self.R.reshape(-1)], [float(v) for v in self.t], self.fx, self.fy, self.cx, self.cy]

    @classmethod
    def from_json(cls, entry, width: Optional[int] = None, height: Optional[int] = None) -> "CameraPose":
        """Accepts ``{"R": [9], "t": [3], "fx", ...}`` or ``[R9, t3, fx, fy, cx, cy]``."""
        if isinstance(entry, dict):
            return cls(
                R=entry["R"], t=entry["t"], fx=float(entry["fx"]), fy=float(entry["fy"]),
                cx=float(entry["cx"]), cy=float(entry["cy"]),
                width=int(entry.get("width", width)), height=int(entry.get("height", height)),
            )
        R, t, fx, fy, cx, cy = entry
        if width is None or height is None:
            raise ValueError("list-form camera entries need an explicit image size")
        return cls(R=R, t=t, fx=float(fx), fy=float(fy), cx=float(cx), cy=float(cy), width=width, height=height)


def rotation_yaw_pitch(yaw: float, pitch: float) -> np.ndarray:
    cy_, sy_ = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    ry = np.array([[cy_, 0, sy_], [0, 1, 0], [-sy_, 0, cy_]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    return ry @ rx


def orbit_camera(
    yaw: float, pitch: float, distance: float, focal: float, size: int,
) -> CameraPose:
    """Camera on the world ``+z`` axis looking at the origin (world y up, the
    head faces +z), with the head rotated by yaw/pitch about the origin."""
    head = rotation_yaw_pitch(yaw, pitch)
    flip = np.diag([1.0, -1.0, -1.0])  # world y-up, +z toward camera -> image y-down, depth forward
    R = flip @ head
    t = np.array([0.0, 0.0, distance])
    c = (size - 1) / 2.0
    return CameraPose(R=R, t=t, fx=focal, fy=focal, cx=c, cy=c, width=size, height=size)
