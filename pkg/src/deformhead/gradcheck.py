"""Finite-difference gradient checks for every trainable operation and for the
composed pipeline, on small 64-bit scenes (16 primitives, 32x32 pixels).

Each check draws a random point, computes the autograd gradient of a scalar
probe loss, and compares a sample of its coordinates with central
differences. A central difference whose stencil straddles a kink (a
leaky-ReLU switching sign, a hash-grid cell boundary, an L1 residual
crossing zero) measures neither one-sided derivative, so every stencil is
certified smooth by :class:`BranchRecorder` before it is compared; check
points are also drawn away from the kinks where that is easy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .deform import DeformField, FieldStack, combine_apply, frame_deltas
from .encoders import MLP, GradCheckError, TriPlaneEncoder, sample_coords
from .field import CameraPose, GaussianField, activate, covariance3d, orbit_camera
from .losses import (LossWeights, PerceptualProxy, c2f_loss, dssim_loss, geo_loss, l1_loss, nc_loss_adapt,
                     nc_loss_pretrain, perceptual_loss, pretrain_loss, sc_loss)
from .raster import RasterSettings, project, render
from .refiner import Refiner
from .signals import AudioBranch, MotionBranch, RegionAttention

EPS = 1e-4
N_PRIMS = 16
SIZE = 32
BOUNDS = [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]
DT = torch.float64


# --- scene and point helpers ---------------------------------------------

def scene(seed: int, n: int = N_PRIMS, size: int = SIZE) -> tuple[list[torch.Tensor], CameraPose]:
    """Raw parameters (mu, scale_raw, quat_raw, opacity_raw, color_raw) of a
    random cluster in front of an orbit camera."""
    g = torch.Generator().manual_seed(seed)
    mu = (torch.rand(n, 3, generator=g, dtype=DT) - 0.5) * 1.0
    scale_raw = math.log(0.12) + 0.3 * torch.randn(n, 3, generator=g, dtype=DT)
    quat_raw = torch.randn(n, 4, generator=g, dtype=DT)
    opacity_raw = torch.randn(n, generator=g, dtype=DT)
    color_raw = torch.randn(n, 3, generator=g, dtype=DT)
    rng = np.random.default_rng(seed)
    cam = orbit_camera(float(rng.uniform(-0.2, 0.2)), float(rng.uniform(-0.1, 0.1)), 3.0, 1.1 * size, size)
    return [mu, scale_raw, quat_raw, opacity_raw, color_raw], cam


def off_grid(mu: torch.Tensor, encoder: TriPlaneEncoder, seed: int, margin: float = 0.02) -> torch.Tensor:
    """Resample positions until every level's bilinear cell coordinate is at
    least ``margin`` away from a cell boundary."""
    rng = np.random.default_rng(seed)
    res = torch.tensor(encoder.resolutions, dtype=DT)
    lo, hi = encoder.bounds.to(DT)
    out = mu.clone()
    for i in range(out.shape[0]):
        for _ in range(1000):
            p = (out[i] - lo) / (hi - lo)
            frac = (p.view(1, 3) * res.view(-1, 1)) % 1.0
            if bool(((frac > margin) & (frac < 1 - margin)).all()):
                break
            out[i] = out[i] + torch.as_tensor(rng.uniform(-0.01, 0.01, 3), dtype=DT)
        else:
            raise RuntimeError("could not place a position off the hash grid")
    return out


def offset_target(x: torch.Tensor, seed: int) -> torch.Tensor:
    """A target whose residual with ``x`` is bounded away from zero (L1 is smooth there)."""
    g = torch.Generator().manual_seed(seed + 99)
    mag = 0.05 + 0.15 * torch.rand(x.shape, generator=g, dtype=x.dtype)
    sign = torch.where(torch.rand(x.shape, generator=g, dtype=x.dtype) < 0.5, -1.0, 1.0)
    return (x + sign * mag).detach()


def randomize_(module: nn.Module, seed: int, scale: float = 0.3) -> nn.Module:
    """Move every parameter to a random point (zero-initialized heads would
    otherwise hide most of the gradient)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("tables"):
                p.copy_(0.5 * torch.randn(p.shape, generator=g, dtype=p.dtype))
            else:
                p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype) / math.sqrt(max(1, p[0].numel())))
    return module


class BranchRecorder:
    """Records which branch every piecewise-smooth operation takes during a
    forward pass (ReLU-family signs, ``abs`` signs, clamp saturation,
    floors, sort orders, comparison masks).

    Two evaluations with identical records lie on the same smooth piece, so
    a central difference over them measures the derivative; when the
    records differ, a kink falls inside the stencil.
    """

    def __init__(self):
        self.records: list = []
        self._saved: list = []

    def _wrap(self, owner, name, pattern):
        orig = getattr(owner, name)

        def wrapped(*args, **kwargs):
            out = orig(*args, **kwargs)
            try:
                rec = pattern(out, *args, **kwargs)
                self.records.append(rec.detach().clone() if isinstance(rec, torch.Tensor) else rec)
            except Exception:  # pragma: no cover - a recording failure only costs a certificate
                self.records.append(None)
            return out

        self._saved.append((owner, name, orig))
        setattr(owner, name, wrapped)

    def __enter__(self):
        F = torch.nn.functional
        sign = lambda out, x, *a, **k: x > 0  # noqa: E731

        def clamp_pattern(out, x, *args, **kwargs):
            return out != x

        self._wrap(F, "leaky_relu", sign)
        self._wrap(F, "relu", sign)
        self._wrap(torch.Tensor, "abs", sign)
        self._wrap(torch.Tensor, "clamp", clamp_pattern)
        self._wrap(torch, "clamp", clamp_pattern)
        self._wrap(torch, "floor", lambda out, *a, **k: out)
        self._wrap(torch.Tensor, "floor", lambda out, *a, **k: out)
        self._wrap(torch, "sort", lambda out, *a, **k: out.indices)
        self._wrap(torch, "argsort", lambda out, *a, **k: out)
        for op in ("__lt__", "__le__", "__gt__", "__ge__"):
            self._wrap(torch.Tensor, op, lambda out, *a, **k: out)
        return self

    def __exit__(self, *exc):
        for owner, name, orig in reversed(self._saved):
            setattr(owner, name, orig)
        self._saved.clear()
        return False


def same_branches(a: list, b: list) -> bool:
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if isinstance(x, torch.Tensor) and isinstance(y, torch.Tensor):
            if x.shape != y.shape or not torch.equal(x, y):
                return False
        elif x != y:
            return False
    return True


@dataclass
class CheckStats:
    worst: float = 0.0
    checked: int = 0
    skipped: int = 0  # stencils that straddle a kink

    def merge(self, other: "CheckStats") -> "CheckStats":
        return CheckStats(max(self.worst, other.worst), self.checked + other.checked, self.skipped + other.skipped)


def check_tensors(loss: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], rng: np.random.Generator,
                  n_coords: int = 6, max_tries: int = 8, floor: float = 1e-4) -> CheckStats:
    """Compare d loss / d t with central differences for each leaf tensor in
    ``tensors``, perturbing them in place. Up to ``n_coords`` coordinates per
    tensor are compared; a candidate whose stencil crosses a kink is skipped
    and another one drawn (at most ``max_tries * n_coords`` candidates)."""
    value = loss()
    grads = torch.autograd.grad(value, list(tensors), allow_unused=True)
    stats = CheckStats()
    for t, gr in zip(tensors, grads):
        gr = torch.zeros_like(t) if gr is None else gr.detach()
        candidates = _coords(gr, n_coords * max_tries, rng, floor)
        base = t.detach().clone()
        flat = base.reshape(-1)
        done = 0
        for i in candidates:
            if done >= n_coords:
                break
            vals, recs = [], []
            for delta in (EPS, -EPS):
                x = flat.clone()
                x[i] += delta
                with torch.no_grad(), BranchRecorder() as rec:
                    t.copy_(x.view_as(t))
                    vals.append(loss().item())
                recs.append(rec.records)
            with torch.no_grad():
                t.copy_(base)
            if not same_branches(*recs):
                stats.skipped += 1
                continue
            if not all(math.isfinite(v) for v in vals):
                raise GradCheckError(f"loss is not finite at coordinate {i} +/- eps")
            fd = (vals[0] - vals[1]) / (2 * EPS)
            err = abs(gr.reshape(-1)[i].item() - fd) / max(1e-8, abs(fd))
            stats.worst = max(stats.worst, err)
            stats.checked += 1
            done += 1
    return stats


def _coords(grad: torch.Tensor, n: int, rng: np.random.Generator, floor: float = 1e-4) -> list[int]:
    """Sample coordinates whose gradient is not negligible relative to the
    largest one; a central difference cannot resolve values near zero to a
    relative tolerance."""
    flat = grad.reshape(-1).abs()
    top = float(flat.max()) if flat.numel() else 0.0
    if top == 0.0:
        return sample_coords(grad, n, rng)
    keep = torch.nonzero(flat >= floor * top).reshape(-1).numpy()
    if keep.size <= n:
        return [int(i) for i in keep]
    return [int(i) for i in rng.choice(keep, size=n, replace=False)]


def module_leaves(module: nn.Module) -> list[torch.Tensor]:
    return [p for p in module.parameters() if p.requires_grad]


def _leaf(x: torch.Tensor) -> torch.Tensor:
    return x.detach().clone().requires_grad_(True)


def _probe(shape, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed + 7)
    return torch.randn(shape, generator=g, dtype=DT)


# --- per-operation checks -------------------------------------------------

def check_field(seed: int) -> CheckStats:
    raw, _ = scene(seed)
    leaves = [_leaf(r) for r in raw]
    w = [_probe((N_PRIMS, 3, 3), seed), _probe((N_PRIMS,), seed + 1), _probe((N_PRIMS, 3), seed + 2)]

    def loss():
        g = activate(*leaves)
        return (covariance3d(g.scale, g.quat) * w[0]).sum() + (g.opacity * w[1]).sum() + (g.color * w[2]).sum()

    return check_tensors(loss, leaves, np.random.default_rng(seed))


def check_project(seed: int) -> CheckStats:
    raw, cam = scene(seed)
    g = activate(*raw)
    mu = _leaf(g.mu)
    cov = _leaf(covariance3d(g.scale, g.quat))
    w1, w2 = _probe((N_PRIMS, 2), seed), _probe((N_PRIMS, 2, 2), seed + 1)

    def loss():
        p2d, z, cov2d, _ = project(mu, cov, cam)
        return (p2d * w1).sum() + (cov2d * w2).sum() + z.sum()

    return check_tensors(loss, [mu, cov], np.random.default_rng(seed))


def check_raster(seed: int) -> CheckStats:
    """Rasterizer in exact mode (no alpha clamp, early stop or culling)."""
    raw, cam = scene(seed)
    leaves = [_leaf(r) for r in raw]
    settings = RasterSettings().exact()
    wr, wd = _probe((SIZE, SIZE, 3), seed), _probe((SIZE, SIZE), seed + 1)

    def loss():
        out = render(activate(*leaves), cam, settings)
        return (out.rgb * wr).sum() / SIZE**2 + (out.depth * wd).sum() / SIZE**2

    return check_tensors(loss, leaves, np.random.default_rng(seed))


def check_encoder(seed: int) -> CheckStats:
    gen = torch.Generator().manual_seed(seed)
    enc = randomize_(TriPlaneEncoder(torch.tensor(BOUNDS, dtype=DT), generator=gen).to(DT), seed)
    mu = _leaf(off_grid((torch.rand(N_PRIMS, 3, generator=gen, dtype=DT) - 0.5) * 1.6, enc, seed))
    w = _probe((N_PRIMS, enc.out_dim), seed)

    def loss():
        return (enc(mu) * w).sum()

    return check_tensors(loss, [mu, enc.tables], np.random.default_rng(seed), n_coords=12)


def check_mlp(seed: int) -> CheckStats:
    torch.manual_seed(seed)
    mlp = MLP([48 + 32, 64, 64, 10]).to(DT)
    x = _leaf(_probe((N_PRIMS, 80), seed))
    w = _probe((N_PRIMS, 10), seed + 1)

    def loss():
        return (mlp(x) * w).sum()

    return check_tensors(loss, [x] + module_leaves(mlp), np.random.default_rng(seed))


def _tracks(seed: int, T: int = 5):
    g = torch.Generator().manual_seed(seed + 3)
    canonical = torch.rand(3, 32, 32, generator=g, dtype=DT)
    motion = canonical + 0.2 * torch.randn(T, 3, 32, 32, generator=g, dtype=DT)
    audio = torch.randn(T, 16, 29, generator=g, dtype=DT)
    return canonical, motion, audio


def check_signals(seed: int) -> CheckStats:
    torch.manual_seed(seed)
    canonical, motion, audio = _tracks(seed)
    mb = MotionBranch(canonical, 2).to(DT)
    ab = AudioBranch(2).to(DT)
    att = RegionAttention(48).to(DT)
    motion, audio = _leaf(motion), _leaf(audio)
    enc = _leaf(_probe((N_PRIMS, 48), seed))
    w1, w2, w3 = _probe((5, 32), seed), _probe((32,), seed + 1), _probe((N_PRIMS, 32), seed + 2)

    def loss():
        fm = mb(motion)
        fa = ab.at(audio, 2)
        return (fm * w1).sum() + (fa * w2).sum() + (att(enc, fm[2]) * w3).sum()

    leaves = [motion, audio, enc] + module_leaves(mb) + module_leaves(ab) + module_leaves(att)
    return check_tensors(loss, leaves, np.random.default_rng(seed), n_coords=4)


def check_deform(seed: int) -> CheckStats:
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    stats = CheckStats()
    for attrs in ("mu", "mu_rot_scale", "all"):
        f = randomize_(DeformField(torch.tensor(BOUNDS, dtype=DT), attrs, generator=gen).to(DT), seed)
        raw, _ = scene(seed)
        mu = off_grid(raw[0], f.encoder, seed)
        region = torch.zeros(N_PRIMS, dtype=torch.long)
        region[-4:] = 1
        feat = _leaf(_probe((32,), seed))
        w = _probe((N_PRIMS, 14), seed + 1)

        def loss():
            d = f(mu, region, feat)
            return ((d.d_mu * w[:, :3]).sum() + (d.d_quat * w[:, 3:7]).sum() + (d.d_scale * w[:, 7:10]).sum()
                    + (d.d_opacity * w[:, 10]).sum() + (d.d_color * w[:, 11:]).sum())

        stats = stats.merge(check_tensors(loss, [feat] + module_leaves(f), np.random.default_rng(seed), n_coords=3))
    return stats


def _image(seed: int, size: int = SIZE) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return 0.1 + 0.8 * torch.rand(size, size, 3, generator=g, dtype=DT)


def check_losses(seed: int) -> CheckStats:
    rng = np.random.default_rng(seed)
    a = _leaf(_image(seed))
    b = _image(seed + 1)
    proxy = PerceptualProxy().to(DT)
    l1_target = offset_target(a, seed)
    stats = check_tensors(lambda: l1_loss(a, l1_target), [a], rng)
    stats = stats.merge(check_tensors(lambda: dssim_loss(a, b), [a], rng))
    stats = stats.merge(check_tensors(lambda: perceptual_loss(a, b, proxy), [a], rng))
    target = offset_target(a, seed)
    stats = stats.merge(check_tensors(lambda: c2f_loss(a, target, 0.1, proxy), [a], rng))

    g = _leaf(_probe((48,), seed))
    inds = [_leaf(_probe((48,), seed + 10 + i)) for i in range(4)]
    stats = stats.merge(check_tensors(lambda: sc_loss(g, inds, 1, 0.07), [g] + inds, rng))
    # every negative similarity made positive so the hinge is active and smooth
    pos = [_leaf(_probe((48,), seed + 20).abs() + 0.3 * _probe((48,), seed + 30 + i)) for i in range(3)]
    stats = stats.merge(check_tensors(lambda: nc_loss_pretrain(pos, 0), pos, rng))
    stats = stats.merge(check_tensors(lambda: nc_loss_adapt(pos[0], pos[1]), pos[:2], rng))

    depth = _leaf(2.0 + 0.3 * _probe((SIZE, SIZE), seed))
    trans = torch.rand(SIZE, SIZE, generator=torch.Generator().manual_seed(seed), dtype=DT) * 0.4
    stats = stats.merge(check_tensors(lambda: geo_loss(depth, trans), [depth], rng, n_coords=12))
    return stats


def check_refiner(seed: int) -> CheckStats:
    ref = randomize_(Refiner(seed).to(DT), seed, scale=0.1)
    x = _leaf(_image(seed))
    target = offset_target(x, seed)
    proxy = PerceptualProxy().to(DT)

    def loss():
        return c2f_loss(ref(x), target, 0.1, proxy)

    # inputs away from the output clamp: the residual is small compared to the margin
    return check_tensors(loss, [x] + module_leaves(ref), np.random.default_rng(seed), n_coords=3)


DELTA_SCALE = 0.3


def check_pipeline(seed: int) -> CheckStats:
    """signals -> deformation -> render -> pretraining loss, one frame, exact rasterization."""
    torch.manual_seed(seed)
    canonical, motion, audio = _tracks(seed)
    stack = FieldStack(torch.tensor(BOUNDS, dtype=DT), canonical, 2, seed=seed).to(DT)
    randomize_(stack, seed, scale=0.2)
    # deltas a sizeable fraction of primitive sizes: near-zero offsets make the
    # contrastive cosine sharply curved and central differences inaccurate
    with torch.no_grad():
        for f in [stack.general, *stack.individuals]:
            for dec in (f.face_decoder, f.mouth_decoder):
                dec.layers[-1].weight.mul_(DELTA_SCALE)
                dec.layers[-1].bias.mul_(DELTA_SCALE)
    raw, cam = scene(seed)
    raw[0] = off_grid(raw[0], stack.general.encoder, seed)
    region = torch.zeros(N_PRIMS, dtype=torch.long)
    region[-4:] = 1
    fld = GaussianField(*raw, region, torch.tensor(BOUNDS, dtype=DT)).to(DT)
    refiner = randomize_(Refiner(seed).to(DT), seed, scale=0.05)
    proxy = PerceptualProxy().to(DT)
    settings = RasterSettings().exact()
    with torch.no_grad():
        x0 = _render_frame(stack, fld, motion, audio, cam, settings).rgb
    target = offset_target(x0, seed)
    weights = LossWeights()

    def loss():
        fm, fa = stack.motion.at(motion, 2), stack.audio.at(audio, 2)
        d = frame_deltas(stack, 0, fld, fm, fa)
        out = render(combine_apply(fld, d.general, d.individual), cam, settings)
        face = region == 0
        inds = [d.individual.d_mu[face].reshape(-1), stack.individuals[1](fld.mu, region, fa).d_mu[face].reshape(-1)]
        sc = sc_loss(d.general.d_mu[face].reshape(-1), inds, 0, weights.tau)
        return pretrain_loss(out.rgb, target, weights, fine=refiner(out.rgb), sc=sc, proxy=proxy).total

    # a rotating third of the leaves per seed; consecutive seeds cover all of them.
    # The composed loss has large third derivatives, so coordinates with tiny
    # gradients are dominated by difference truncation and are not compared.
    leaves = module_leaves(fld) + module_leaves(stack) + module_leaves(refiner)
    return check_tensors(loss, leaves[seed % 3::3], np.random.default_rng(seed), n_coords=2, floor=1e-2)


def _render_frame(stack, fld, motion, audio, cam, settings):
    fm, fa = stack.motion.at(motion, 2), stack.audio.at(audio, 2)
    d = frame_deltas(stack, 0, fld, fm, fa)
    return render(combine_apply(fld, d.general, d.individual), cam, settings)


MODULES: dict[str, Callable[[int], CheckStats]] = {
    "field": check_field,
    "project": check_project,
    "raster": check_raster,
    "encoder": check_encoder,
    "mlp": check_mlp,
    "signals": check_signals,
    "deform": check_deform,
    "losses": check_losses,
    "refiner": check_refiner,
    "pipeline": check_pipeline,
}


def run_gradchecks(name: str, seeds: int = 10, first_seed: int = 0) -> CheckStats:
    """Check ``name`` over ``seeds`` consecutive seeds; worst error and coordinate counts."""
    if name not in MODULES:
        raise KeyError(f"unknown gradcheck module {name!r}; choose from {sorted(MODULES)}")
    stats = CheckStats()
    for s in range(first_seed, first_seed + seeds):
        stats = stats.merge(MODULES[name](s))
    return stats
