"""Synthetic talking-head identities.

Each identity has its own static Gaussian head. A hidden reference deformation
drives it: a jaw/mouth opening shared by every identity and proportional to
the drive a(t), plus an identity-specific "speaking style" offset on the
face. Motion maps depend on a(t) only. Audio windows depend on a(t) and on
the identity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import storage
from .field import FACE, MOUTH, CameraPose, GaussianField, orbit_camera
from .raster import RasterSettings, render
from .signals import AUDIO_SHAPE, MOTION_SIZE

HEAD_RADII = np.array([0.62, 0.8, 0.6])
MOUTH_LINE = -0.33  # world y of the lip line
MOUTH_CENTER = np.array([0.0, MOUTH_LINE, 0.45])
JAW_DROP = 0.18  # world units at a = 1
STYLE_AMPLITUDE = 0.05
CAMERA_DISTANCE = 3.0
MAX_HEAD_TURN = math.radians(10.0)

DEFAULT_BOUNDS = [[-1.0, -1.25, -1.0], [1.0, 1.0, 1.0]]
DEFAULT_INIT_BOUNDS = [[-0.7, -0.95, -0.1], [0.7, 0.9, 0.75]]
DEFAULT_MOUTH_BOUNDS = [[-0.25, -0.48, 0.3], [0.25, -0.2, 0.6]]


def identity_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, 0xD3])


def drive_track(rng: np.random.Generator, frames: int) -> np.ndarray:
    """Smooth mouth-opening drive in (0, 1): a few syllable-rate sinusoids
    squashed through a sigmoid, with a slow loudness envelope."""
    t = np.arange(frames, dtype=np.float64)
    s = np.zeros(frames)
    for _ in range(4):
        freq = rng.uniform(0.06, 0.2)
        s += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    s /= np.abs(s).max() + 1e-9
    envelope = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.005, 0.02) * t + rng.uniform(0, 2 * np.pi))
    return 1.0 / (1.0 + np.exp(-4.0 * (s * (0.6 + 0.8 * envelope) - 0.1)))


def _smoothstep(e0, e1, x):
    u = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return u * u * (3 - 2 * u)


def jaw_weight(mu: np.ndarray) -> np.ndarray:
    """1 on the jaw (below the lip line), 0 above it, smooth in between."""
    return 1.0 - _smoothstep(MOUTH_LINE - 0.06, MOUTH_LINE + 0.02, mu[:, 1])


def general_motion(mu: np.ndarray, a: float) -> np.ndarray:
    """Identity-agnostic deformation: the jaw drops by ``a * JAW_DROP``."""
    d = np.zeros_like(mu)
    d[:, 1] = -a * JAW_DROP * jaw_weight(mu)
    return d


@dataclass
class IdentitySpec:
    index: int
    skin: np.ndarray
    radii: np.ndarray
    style_freq: np.ndarray  # (3, 3) spatial frequencies
    style_phase: np.ndarray  # (3,)
    style_dir: np.ndarray  # (3, 3) displacement directions
    audio_bias: np.ndarray  # (29,)
    audio_dir: np.ndarray  # (29,) identity part of the speech direction
    audio_mix: np.ndarray  # (29, 29) noise coloring
    audio_sq: np.ndarray  # (29,) identity-specific nonlinear response
    cam_phase: np.ndarray  # (2,)
    cam_freq: np.ndarray  # (2,)

    @classmethod
    def sample(cls, rng: np.random.Generator, index: int) -> "IdentitySpec":
        hue = rng.uniform(0.0, 1.0)
        skin = np.array([0.85, 0.62, 0.5]) * (0.75 + 0.3 * hue) + rng.uniform(-0.06, 0.06, 3)
        style_dir = rng.normal(size=(3, 3))
        style_dir /= np.linalg.norm(style_dir, axis=1, keepdims=True)
        return cls(
            index=index,
            skin=np.clip(skin, 0.2, 0.95),
            radii=HEAD_RADII * rng.uniform(0.95, 1.05, 3),
            style_freq=rng.normal(scale=2.5, size=(3, 3)),
            style_phase=rng.uniform(0, 2 * np.pi, 3),
            style_dir=style_dir,
            audio_bias=rng.normal(scale=1.0, size=AUDIO_SHAPE[1]),
            audio_dir=rng.normal(scale=0.6 / math.sqrt(AUDIO_SHAPE[1]), size=AUDIO_SHAPE[1]),
            audio_mix=rng.normal(scale=1.0 / math.sqrt(AUDIO_SHAPE[1]), size=(AUDIO_SHAPE[1],) * 2),
            audio_sq=rng.normal(scale=0.5 / math.sqrt(AUDIO_SHAPE[1]), size=AUDIO_SHAPE[1]),
            cam_phase=rng.uniform(0, 2 * np.pi, 2),
            cam_freq=rng.uniform(0.01, 0.03, 2),
        )

    def style_field(self, mu: np.ndarray) -> np.ndarray:
        """Smooth identity-specific displacement field, concentrated near the mouth."""
        waves = np.sin(mu @ self.style_freq.T + self.style_phase)  # (P, 3)
        near = np.exp(-np.sum((mu - MOUTH_CENTER) ** 2, axis=1) / (2 * 0.3**2))
        return (waves @ self.style_dir) * near[:, None]

    def individual_motion(self, mu: np.ndarray, region: np.ndarray, a: float) -> np.ndarray:
        d = STYLE_AMPLITUDE * a * self.style_field(mu)
        d[region == MOUTH] = 0.0
        return d


def _quat_from_z_to(n: np.ndarray) -> np.ndarray:
    """Unit quaternions (w, x, y, z) rotating +z onto the unit vectors ``n``."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(np.broadcast_to(z, n.shape), n)
    w = 1.0 + n @ z
    q = np.concatenate([w[:, None], axis], axis=1)
    bad = w < 1e-8
    q[bad] = [0.0, 1.0, 0.0, 0.0]
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def reference_field(spec: IdentitySpec, rng: np.random.Generator, n_face: int = 100, n_mouth: int = 20,
                    bounds=DEFAULT_BOUNDS, dtype=torch.float64) -> GaussianField:
    """Ground-truth static head: surface splats on the front of an ellipsoid
    (eyes, brows and lips painted by position) plus a dark mouth interior."""
    # Fibonacci points on the front part of the unit sphere
    i = np.arange(n_face) + 0.5
    zc = 1.0 - 1.2 * i / n_face  # z in (-0.2, 1)
    r = np.sqrt(1 - zc**2)
    phi = i * math.pi * (3 - math.sqrt(5)) + rng.uniform(0, 2 * np.pi)
    unit = np.stack([r * np.cos(phi), r * np.sin(phi), zc], axis=1)
    unit += rng.normal(scale=0.02, size=unit.shape)
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    face = unit * spec.radii
    normal = unit / spec.radii
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    spacing = math.sqrt(2.6 / n_face)
    face_scale = np.tile([0.75 * spacing, 0.75 * spacing, 0.25 * spacing], (n_face, 1))
    face_quat = _quat_from_z_to(normal)

    col = np.tile(spec.skin, (n_face, 1))
    x, y, z = face.T
    front = z > 0.2
    for ex in (-0.22, 0.22):
        eye = front & ((x - ex) ** 2 / 0.012 + (y - 0.18) ** 2 / 0.006 < 1)
        col[eye] = [0.12, 0.1, 0.1]
        brow = front & ((x - ex) ** 2 / 0.03 + (y - 0.33) ** 2 / 0.002 < 1)
        col[brow] = spec.skin * 0.45
    lips = front & (np.abs(x) < 0.22) & (np.abs(y - MOUTH_LINE) < 0.09)
    col[lips] = [0.75, 0.25, 0.3]
    nose = front & (np.abs(x) < 0.07) & (y > -0.15) & (y < 0.1)
    col[nose] = spec.skin * 0.85
    col = np.clip(col + rng.normal(scale=0.02, size=col.shape), 0.03, 0.97)

    lo, hi = np.array([-0.18, MOUTH_LINE - 0.07, 0.38]), np.array([0.18, MOUTH_LINE + 0.05, 0.5])
    mouth = rng.uniform(lo, hi, size=(n_mouth, 3))
    mouth_scale = np.tile([0.07, 0.045, 0.04], (n_mouth, 1))
    mouth_quat = np.tile([1.0, 0.0, 0.0, 0.0], (n_mouth, 1))
    mouth_col = np.tile([0.25, 0.05, 0.06], (n_mouth, 1)) + rng.uniform(-0.03, 0.03, (n_mouth, 3))

    mu = np.concatenate([face, mouth])
    scale = np.concatenate([face_scale, mouth_scale])
    quat = np.concatenate([face_quat, mouth_quat])
    opacity = np.concatenate([np.full(n_face, 0.97), np.full(n_mouth, 0.95)])
    color = np.concatenate([col, mouth_col])
    region = np.concatenate([np.full(n_face, FACE), np.full(n_mouth, MOUTH)])

    def t(a):
        return torch.as_tensor(a, dtype=dtype)

    logit = lambda p: np.log(p / (1 - p))  # noqa: E731
    return GaussianField(t(mu), t(np.log(scale)), t(quat), t(logit(opacity)), t(logit(color)),
                         torch.as_tensor(region), t(np.asarray(bounds, dtype=np.float64)))


# --- signals -------------------------------------------------------------

def _face_coords(u: np.ndarray, v: np.ndarray):
    inside = (u / 0.7) ** 2 + (v / 0.9) ** 2 < 1.0
    zz = np.sqrt(np.clip(1.0 - (u / 0.7) ** 2 - (v / 0.9) ** 2, 0.0, None))
    return inside, np.stack([(u + 1) / 2, (v + 1) / 2, zz])


def motion_map(a: float, size: int = MOTION_SIZE, supersample: int = 4) -> np.ndarray:
    """PNCC-style 3 x size x size face-coordinate map with the jaw opened by ``a``.

    Depends on ``a`` only (identity-agnostic). ``a = 0`` gives the canonical map.
    """
    n = size * supersample
    g = (np.arange(n) + 0.5) / n * 2 - 1
    u, v = np.meshgrid(g, -g)  # v up
    v_line = -0.4
    drop = a * 0.25 * np.clip(1 - (u / 0.45) ** 2, 0.0, None)
    below = v < v_line
    src_v = np.where(below, v + drop, v)
    gap = below & (src_v >= v_line)
    inside, coords = _face_coords(u, src_v)
    out = np.where((inside & ~gap)[None], coords, 0.0)
    return out.reshape(3, size, supersample, size, supersample).mean(axis=(2, 4))


def motion_track(drive: np.ndarray, size: int = MOTION_SIZE) -> np.ndarray:
    return np.stack([motion_map(float(a), size) for a in drive]).astype(np.float32)


def audio_track(drive: np.ndarray, spec: IdentitySpec, rng: np.random.Generator) -> np.ndarray:
    """(T, 16, 29) windows: each row samples a(t) at a sub-frame offset and mixes
    it with identity-specific direction, bias, nonlinearity and colored noise."""
    T = drive.shape[0]
    rows, dims = AUDIO_SHAPE
    shared = np.linspace(-1.0, 1.0, dims) / math.sqrt(dims) * 2.0
    offsets = (np.arange(rows) - (rows - 1) / 2) / (rows / 2)  # +-1 frame
    times = np.clip(np.arange(T)[:, None] + offsets[None], 0, T - 1)
    a = np.interp(times, np.arange(T), drive)  # (T, 16)
    direction = shared + spec.audio_dir
    noise = rng.normal(scale=0.1, size=(T, rows, dims)) @ spec.audio_mix
    out = a[..., None] * direction + (a**2)[..., None] * spec.audio_sq + spec.audio_bias + noise
    return out.astype(np.float32)


def camera_track(spec: IdentitySpec, frames: int, size: int, focal: Optional[float] = None) -> list[CameraPose]:
    focal = focal if focal is not None else 1.1 * size
    t = np.arange(frames)
    yaw = MAX_HEAD_TURN * np.sin(2 * np.pi * spec.cam_freq[0] * t + spec.cam_phase[0])
    pitch = 0.5 * MAX_HEAD_TURN * np.sin(2 * np.pi * spec.cam_freq[1] * t + spec.cam_phase[1])
    return [orbit_camera(float(y), float(p), CAMERA_DISTANCE, focal, size) for y, p in zip(yaw, pitch)]


# --- refiner pairs -------------------------------------------------------

def gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur of an (H, W, 3) image with reflected borders."""
    r = max(1, int(math.ceil(3 * sigma)))
    x = torch.arange(-r, r + 1, dtype=img.dtype)
    k = torch.exp(-(x**2) / (2 * sigma**2))
    k = k / k.sum()
    t = img.permute(2, 0, 1).unsqueeze(1)  # (3, 1, H, W)
    t = torch.nn.functional.pad(t, (r, r, r, r), mode="reflect")
    t = torch.nn.functional.conv2d(t, k.view(1, 1, -1, 1))
    t = torch.nn.functional.conv2d(t, k.view(1, 1, 1, -1))
    return t[:, 0].permute(1, 2, 0)


def blur_pairs(n: int, seed: int, size: int = 64, sigma: float = 1.0) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """``n`` (blurred, sharp) float32 pairs of random identities, drives and head poses."""
    rng = np.random.default_rng([seed, 7])
    pairs = []
    for i in range(n):
        spec = IdentitySpec.sample(rng, i)
        field = reference_field(spec, rng)
        a = float(rng.uniform(0, 1))
        cam = orbit_camera(float(rng.uniform(-MAX_HEAD_TURN, MAX_HEAD_TURN)),
                           float(rng.uniform(-MAX_HEAD_TURN, MAX_HEAD_TURN) / 2), CAMERA_DISTANCE, 1.1 * size, size)
        with torch.no_grad():
            sharp = render(deformed_reference(field, spec, a), cam).rgb.float()
        pairs.append((gaussian_blur(sharp, sigma), sharp))
    return pairs


# --- datasets ------------------------------------------------------------

def deformed_reference(field: GaussianField, spec: IdentitySpec, a: float):
    mu = field.mu.detach().numpy()
    region = field.region.numpy()
    d = general_motion(mu, a) + spec.individual_motion(mu, region, a)
    from .field import activate
    return activate(field.mu + torch.as_tensor(d, dtype=field.mu.dtype), field.scale_raw, field.quat_raw,
                    field.opacity_raw, field.color_raw)


def gen_identity(seed: int, index: int, frames: int, size: int = 64, drive: Optional[np.ndarray] = None,
                 n_face: int = 100, n_mouth: int = 20, settings: RasterSettings = RasterSettings()) -> dict:
    """All tracks and ground-truth frames of one identity, in memory."""
    rng = identity_rng(seed, index)
    spec = IdentitySpec.sample(rng, index)
    field = reference_field(spec, rng, n_face, n_mouth)
    if drive is None:
        drive = drive_track(rng, frames)
    drive = np.asarray(drive, dtype=np.float64)
    if drive.shape != (frames,):
        raise ValueError(f"drive must have shape ({frames},)")
    cams = camera_track(spec, frames, size)
    with torch.no_grad():
        imgs = np.stack([render(deformed_reference(field, spec, float(a)), cam, settings).rgb.numpy()
                         for a, cam in zip(drive, cams)]).astype(np.float32)
    return {
        "spec": spec,
        "field": field,
        "drive": drive,
        "motion": motion_track(drive),
        "audio": audio_track(drive, spec, rng),
        "cameras": cams,
        "frames": imgs,
    }


def write_identity(out: Path, ident: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    storage.write_tensor(out / "audio.bin", ident["audio"])
    storage.write_tensor(out / "motion.bin", ident["motion"])
    storage.write_tensor(out / "drive.bin", ident["drive"].astype(np.float32))
    storage.write_tensor(out / "frames.bin", ident["frames"])
    (out / "cameras.json").write_text(json.dumps([c.to_list() for c in ident["cameras"]]))
    f = ident["field"]
    storage.write_checkpoint(out / "reference_field.ckpt", storage.module_arrays("field", f),
                             {"kind": "reference_field", "identity": ident["spec"].index})


def gen_synthetic(n_identities: int, frames: int, seed: int, out_dir, size: int = 64, j: int = 2,
                  drive: Optional[np.ndarray] = None) -> Path:
    """Write a dataset directory: ``dataset.json``, ``canonical.bin`` and one
    ``id_XXX`` directory per identity. Deterministic in ``seed``."""
    if n_identities < 1:
        raise ValueError("need at least one identity")
    if frames < 2 * j + 1:
        raise ValueError(f"need at least 2j+1 = {2 * j + 1} frames")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    canonical = motion_map(0.0).astype(np.float32)
    storage.write_tensor(out / "canonical.bin", canonical)
    names = []
    for k in range(n_identities):
        ident = gen_identity(seed, k, frames, size, drive=drive)
        name = f"id_{k:03d}"
        write_identity(out / name, ident)
        storage.write_tensor(out / name / "canonical.bin", canonical)
        names.append(name)
    meta = {"identities": names, "frames": frames, "seed": seed, "image_size": size,
            "audio_shape": list(AUDIO_SHAPE), "motion_size": MOTION_SIZE}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


@dataclass
class Clip:
    """One identity's tracks loaded from disk."""

    path: Path
    audio: np.ndarray
    motion: np.ndarray
    canonical: np.ndarray
    cameras: list
    frames: Optional[np.ndarray] = None
    drive: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.audio.shape[0]

    def slice(self, start: int, stop: Optional[int]) -> "Clip":
        s = slice(start, stop)
        return Clip(self.path, self.audio[s], self.motion[s], self.canonical, self.cameras[s],
                    None if self.frames is None else self.frames[s],
                    None if self.drive is None else self.drive[s])


class DataError(ValueError):
    pass


def load_cameras(path, size: Optional[int] = None) -> list[CameraPose]:
    entries = json.loads(Path(path).read_text())
    return [CameraPose.from_json(e, size, size) for e in entries]


def _dataset_size(root: Path) -> Optional[int]:
    meta = root / "dataset.json"
    return json.loads(meta.read_text()).get("image_size") if meta.exists() else None


def load_clip(path) -> Clip:
    p = Path(path)
    if not (p / "audio.bin").exists():
        raise DataError(f"{p} is not an identity directory (no audio.bin)")
    try:
        audio = storage.read_tensor(p / "audio.bin")
        motion = storage.read_tensor(p / "motion.bin")
        canon_path = p / "canonical.bin" if (p / "canonical.bin").exists() else p.parent / "canonical.bin"
        canonical = storage.read_tensor(canon_path)
        frames = storage.read_tensor(p / "frames.bin") if (p / "frames.bin").exists() else None
        drive = storage.read_tensor(p / "drive.bin").astype(np.float64) if (p / "drive.bin").exists() else None
        size = frames.shape[1] if frames is not None else _dataset_size(p.parent)
        cams = load_cameras(p / "cameras.json", size) if (p / "cameras.json").exists() else []
    except (OSError, storage.TensorFormatError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load clip {p}: {exc}") from exc
    T = audio.shape[0]
    if motion.shape[0] != T or (frames is not None and frames.shape[0] != T) or (cams and len(cams) != T):
        raise DataError(f"{p}: track lengths disagree")
    return Clip(p, audio, motion, canonical, cams, frames, drive)


def load_dataset(path) -> list[Clip]:
    p = Path(path)
    meta_path = p / "dataset.json"
    if not meta_path.exists():
        raise DataError(f"{p} has no dataset.json")
    meta = json.loads(meta_path.read_text())
    return [load_clip(p / name) for name in meta["identities"]]
