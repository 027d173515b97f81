"""Two-stage training (multi-identity pretraining, single-identity adaptation),
evaluation and rendering."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import storage
from .config import ConfigError, TrainConfig, config_from_dict
from .deform import DeformField, FieldStack, combine_apply, frame_deltas
from .field import GaussianField, MOUTH, init_field
from .losses import (DegenerateSimilarityError, PerceptualProxy, adapt_loss, c2f_loss, nc_loss_adapt,
                     nc_loss_pretrain, psnr, sc_loss, ssim, LossTerms, pretrain_loss)
from .optim import GuardedAdam
from .raster import render
from .refiner import Refiner
from .synthetic import Clip

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class DataMismatchError(ValueError):
    """Dataset and configuration disagree (image size, track lengths, ...)."""


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class HeadModel:
    """Everything needed to deform, render and refine one or more identities.

    ``fields[k]`` pairs with ``stack.individuals[k]`` after pretraining (when
    kept); after adaptation ``fields[0]`` pairs with ``individual``.
    """

    config: TrainConfig
    stack: FieldStack
    refiner: Optional[Refiner]
    fields: list = field(default_factory=list)
    individual: Optional[DeformField] = None

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.config.dtype]

    def individual_for(self, k: Optional[int]) -> tuple[Optional[int], Optional[DeformField]]:
        if self.individual is not None:
            return None, self.individual
        return k, None


@dataclass
class TrainResult:
    model: HeadModel
    history: list  # one dict of floats per step
    seconds: float = 0.0
    skipped_steps: int = 0  # optimizer steps dropped for non-finite gradients


@dataclass
class Tracks:
    """One clip as tensors in the training dtype."""

    audio: torch.Tensor
    motion: torch.Tensor
    cameras: list
    targets: Optional[torch.Tensor]

    @classmethod
    def from_clip(cls, clip: Clip, dtype: torch.dtype, size: Optional[int] = None) -> "Tracks":
        targets = None if clip.frames is None else torch.as_tensor(clip.frames, dtype=dtype)
        if size is not None:
            if targets is not None and tuple(targets.shape[1:3]) != (size, size):
                raise DataMismatchError(f"{clip.path}: frames are {tuple(targets.shape[1:3])}, config expects {size}x{size}")
            for cam in clip.cameras:
                if (cam.width, cam.height) != (size, size):
                    raise DataMismatchError(f"{clip.path}: camera size {cam.width}x{cam.height} != {size}")
        return cls(torch.as_tensor(clip.audio, dtype=dtype), torch.as_tensor(clip.motion, dtype=dtype),
                   list(clip.cameras), targets)

    def __len__(self) -> int:
        return self.audio.shape[0]


def _setup(cfg: TrainConfig) -> torch.dtype:
    torch.set_num_threads(cfg.threads)
    return DTYPES[cfg.dtype]


def _static_groups(fields: Sequence[GaussianField], cfg: TrainConfig, scale: float = 1.0) -> list[dict]:
    o = cfg.optim
    groups = []
    for f in fields:
        groups += [
            {"params": [f.mu], "lr": o.lr_mu * scale},
            {"params": [f.scale_raw], "lr": o.lr_scale * scale},
            {"params": [f.quat_raw], "lr": o.lr_quat * scale},
            {"params": [f.opacity_raw], "lr": o.lr_opacity * scale},
            {"params": [f.color_raw], "lr": o.lr_color * scale},
        ]
    return groups


def _net_groups(modules: Sequence[torch.nn.Module], cfg: TrainConfig) -> list[dict]:
    """Hash tables at the hash step size, everything else at the MLP step size."""
    tables, other = [], []
    for m in modules:
        for name, p in m.named_parameters():
            (tables if name.endswith("encoder.tables") else other).append(p)
    return [{"params": tables, "lr": cfg.optim.lr_hash}, {"params": other, "lr": cfg.optim.lr_mlp}]


def _optimizer(groups: list[dict], cfg: TrainConfig) -> GuardedAdam:
    return GuardedAdam(groups, betas=cfg.optim.betas, eps=cfg.optim.eps)


def _face_mu(delta, region: torch.Tensor) -> torch.Tensor:
    return delta.d_mu[region != MOUTH].reshape(-1)


def _safe(fn: Callable[[], torch.Tensor]) -> Optional[torch.Tensor]:
    """Contrastive terms are undefined while a delta is exactly zero (fresh heads)."""
    try:
        return fn()
    except DegenerateSimilarityError:
        return None


def _check_finite(terms: LossTerms, phase: str, step: int):
    if not math.isfinite(float(terms.total.detach())):
        raise NumericError(f"non-finite loss at {phase} step {step}: {terms.as_floats()}")


def _log_step(phase: str, step: int, values: dict, every: int):
    if every and (step % every == 0):
        body = " ".join(f"{k}={v:.6g}" for k, v in values.items() if k not in ("phase", "step"))
        log.info("phase=%s step=%d %s", phase, step, body)


def _features(stack: FieldStack, tracks: Tracks, t: int):
    return stack.motion.at(tracks.motion, t), stack.audio.at(tracks.audio, t)


def new_stack(cfg: TrainConfig, canonical, n_identities: int) -> FieldStack:
    dtype = DTYPES[cfg.dtype]
    a = cfg.ablation
    stack = FieldStack(torch.as_tensor(cfg.bounds, dtype=dtype), torch.as_tensor(canonical, dtype=dtype),
                       n_identities, cfg.j, a.individual_attrs, a.routing, a.field_use, cfg.encoder.kwargs(),
                       cfg.hidden, cfg.seed)
    return stack.to(dtype)


def new_field(cfg: TrainConfig, seed: int) -> GaussianField:
    return init_field(cfg.n_face, cfg.n_mouth, cfg.bounds, seed, cfg.mouth_bounds, DTYPES[cfg.dtype], cfg.init_bounds)


def _warm(fields, tracks, cfg: TrainConfig, phase_cfg, rng, history, phase="warm", loss_fn=None):
    """Static fields only: L1 + D-SSIM on the coarse render."""
    settings = cfg.raster.settings()
    opt = _optimizer(_static_groups(fields, cfg), cfg)
    for step in range(phase_cfg.warm_steps):
        k = int(rng.integers(len(fields)))
        t = int(rng.integers(len(tracks[k])))
        out = render(fields[k].activate(), tracks[k].cameras[t], settings)
        if loss_fn is None:
            terms = adapt_loss(out.rgb, tracks[k].targets[t], _warm_weights(cfg))
        else:
            terms = loss_fn(out, tracks[k].targets[t])
        _check_finite(terms, phase, step)
        opt.zero_grad()
        terms.total.backward()
        opt.step()
        values = {"phase": phase, "step": step, "identity": k, **terms.as_floats()}
        history.append(values)
        _log_step(phase, step, values, phase_cfg.log_every)
    return opt.skipped


def _warm_weights(cfg: TrainConfig):
    from dataclasses import replace
    return replace(cfg.loss, nc=0.0, geo=0.0)


def pretrain(clips: Sequence[Clip], cfg: TrainConfig) -> TrainResult:
    """Fit per-identity static fields, then jointly the General Field, the
    Individual Fields and the refiner on all identities."""
    start = time.perf_counter()
    dtype = _setup(cfg)
    if len(clips) < 1:
        raise DataMismatchError("pretraining needs at least one identity")
    for c in clips:
        if c.frames is None:
            raise DataMismatchError(f"{c.path}: pretraining clip has no ground-truth frames")
        if len(c) < 2 * cfg.j + 1:
            raise DataMismatchError(f"{c.path}: clip shorter than 2j+1 frames")
    tracks = [Tracks.from_clip(c, dtype, cfg.image_size) for c in clips]
    n = len(clips)
    a = cfg.ablation
    use_sc = a.sc_loss and n > 1 and a.field_use == "both"
    use_nc = a.nc_loss and n > 1 and a.field_use != "general"

    fields = [new_field(cfg, cfg.seed * 1000 + k) for k in range(n)]
    stack = new_stack(cfg, clips[0].canonical, n)
    refiner = Refiner(cfg.seed).to(dtype) if a.c2f else None
    proxy = PerceptualProxy(cfg.perceptual_seed).to(dtype)
    rng = np.random.default_rng(cfg.seed)
    history: list = []
    skipped = _warm(fields, tracks, cfg, cfg.pretrain, rng, history)
    if use_nc:
        log.info("nc term: adopted pretraining variant, not an exact reference form")

    groups = [] if cfg.freeze_static else _static_groups(fields, cfg, cfg.optim.static_joint_scale)
    groups += _net_groups([stack], cfg)
    if refiner is not None:
        groups.append({"params": list(refiner.parameters()), "lr": cfg.optim.lr_refiner})
    opt = _optimizer(groups, cfg)
    settings = cfg.raster.settings()
    weights = cfg.loss if a.c2f else _without_c2f(cfg.loss)
    for step in range(cfg.pretrain.steps):
        k = int(rng.integers(n))
        tr = tracks[k]
        t = int(rng.integers(len(tr)))
        fm, fa = _features(stack, tr, t)
        d = frame_deltas(stack, k, fields[k], fm, fa)
        out = render(combine_apply(fields[k], d.general, d.individual), tr.cameras[t], settings)
        fine = refiner(out.rgb.detach()) if refiner is not None else None
        region = fields[k].region
        sc = nc = None
        if use_sc or use_nc:
            fi = stack.individual_feature(fm, fa)
            inds = [d.individual if i == k else stack.individuals[i](fields[k].mu, region, fi) for i in range(n)]
            faces = [_face_mu(x, region) for x in inds]
            if use_sc:
                sc = _safe(lambda: sc_loss(_face_mu(d.general, region), faces, k, cfg.loss.tau))
            if use_nc:
                nc = _safe(lambda: nc_loss_pretrain(faces, k))
        terms = pretrain_loss(out.rgb, tr.targets[t], weights, fine=fine, sc=sc, nc=nc, proxy=proxy)
        _check_finite(terms, "joint", step)
        opt.zero_grad()
        terms.total.backward()
        opt.step()
        values = {"phase": "joint", "step": step, "identity": k, **terms.as_floats()}
        history.append(values)
        _log_step("joint", step, values, cfg.pretrain.log_every)

    model = HeadModel(cfg, stack, refiner, fields)
    if not cfg.keep_individuals:
        model = HeadModel(cfg, _drop_individuals(stack), refiner, [])
    return TrainResult(model, history, time.perf_counter() - start, skipped + opt.skipped)


def _without_c2f(w):
    from dataclasses import replace
    return replace(w, c2f=0.0)


def _drop_individuals(stack: FieldStack) -> FieldStack:
    stack.individuals = torch.nn.ModuleList()
    return stack


def adapt(clip: Clip, pretrained: HeadModel, cfg: Optional[TrainConfig] = None,
          zero_general: bool = False) -> TrainResult:
    """Fit a new static field and a fresh Individual Field to one clip, jointly
    fine-tuning the pretrained General Field, signal branches and refiner.

    ``zero_general`` re-initializes the General Field (from-scratch baseline).
    """
    start = time.perf_counter()
    cfg = cfg or pretrained.config
    check_compatible(pretrained.config, cfg)
    dtype = _setup(cfg)
    if len(clip) == 0:
        raise DataMismatchError(f"{clip.path}: empty clip")
    if len(clip) < 2 * cfg.j + 1:
        raise DataMismatchError(f"{clip.path}: clip shorter than 2j+1 frames")
    if clip.frames is None:
        raise DataMismatchError(f"{clip.path}: adaptation clip has no ground-truth frames")
    if cfg.adapt_frames is not None:
        clip = clip.slice(0, cfg.adapt_frames)
    tracks = Tracks.from_clip(clip, dtype, cfg.image_size)

    stack = pretrained.stack
    if zero_general:
        fresh = new_stack(cfg, stack.motion.canonical, 0)
        stack.general = fresh.general
    stack.individuals = torch.nn.ModuleList()
    stack.routing, stack.field_use = cfg.ablation.routing, cfg.ablation.field_use
    individual = stack.new_individual(cfg.seed + 1)
    refiner = pretrained.refiner
    if refiner is None and cfg.ablation.c2f:
        refiner = Refiner(cfg.seed).to(dtype)
    if not cfg.ablation.c2f:
        refiner = None
    proxy = PerceptualProxy(cfg.perceptual_seed).to(dtype)
    fld = new_field(cfg, cfg.seed * 1000 + 999)
    rng = np.random.default_rng(cfg.seed + 17)
    settings = cfg.raster.settings()
    history: list = []

    def warm_loss(out, target):
        return adapt_loss(out.rgb, target, _warm_weights(cfg), depth=out.depth, transmittance=out.transmittance)

    skipped = _warm([fld], [tracks], cfg, cfg.adapt, rng, history, phase="adapt-warm", loss_fn=warm_loss)

    groups = [] if cfg.freeze_static else _static_groups([fld], cfg, cfg.optim.static_joint_scale)
    nets = [individual, stack.motion, stack.audio] + ([] if cfg.freeze_general else [stack.general])
    groups += _net_groups(nets, cfg)
    if refiner is not None:
        groups.append({"params": list(refiner.parameters()), "lr": cfg.optim.lr_refiner})
    opt = _optimizer(groups, cfg)
    use_nc = cfg.ablation.nc_loss and cfg.ablation.field_use == "both"
    if use_nc:
        log.info("nc term: adopted adaptation variant, not an exact reference form")
    for step in range(cfg.adapt.steps):
        t = int(rng.integers(len(tracks)))
        fm, fa = _features(stack, tracks, t)
        d = frame_deltas(stack, None, fld, fm, fa, individual)
        out = render(combine_apply(fld, d.general, d.individual), tracks.cameras[t], settings)
        nc = None
        if use_nc:
            nc = _safe(lambda: nc_loss_adapt(_face_mu(d.individual, fld.region), _face_mu(d.general, fld.region)))
        terms = adapt_loss(out.rgb, tracks.targets[t], cfg.loss, nc=nc, depth=out.depth,
                           transmittance=out.transmittance)
        objective = terms.total
        if refiner is not None and cfg.loss.c2f:
            c2f = c2f_loss(refiner(out.rgb.detach()), tracks.targets[t], cfg.loss.perceptual, proxy)
            terms.terms["c2f"] = c2f
            objective = objective + cfg.loss.c2f * c2f
        _check_finite(terms, "adapt", step)
        opt.zero_grad()
        objective.backward()
        opt.step()
        values = {"phase": "adapt", "step": step, **terms.as_floats()}
        history.append(values)
        _log_step("adapt", step, values, cfg.adapt.log_every)

    model = HeadModel(cfg, stack, refiner, [fld], individual)
    return TrainResult(model, history, time.perf_counter() - start, skipped + opt.skipped)


def check_compatible(saved: TrainConfig, cfg: TrainConfig):
    for name in ("encoder", "hidden", "j", "bounds", "dtype"):
        if getattr(saved, name) != getattr(cfg, name):
            raise ConfigError(f"config {name} {getattr(cfg, name)!r} is incompatible with the checkpoint's "
                              f"{getattr(saved, name)!r}")


# --- inference -----------------------------------------------------------

@dataclass
class FrameOutput:
    coarse: torch.Tensor
    fine: torch.Tensor
    depth: torch.Tensor
    transmittance: torch.Tensor
    mu: torch.Tensor  # deformed centers


def _signal_features(stack: FieldStack, tracks: Tracks):
    return stack.motion(tracks.motion), stack.audio(tracks.audio)


@torch.no_grad()
def run_frames(model: HeadModel, tracks: Tracks, identity: Optional[int] = None,
               field_override: Optional[GaussianField] = None, general_only: bool = False,
               static: bool = False) -> list[FrameOutput]:
    """Deform, render and refine every frame of ``tracks``.

    ``general_only`` zeroes the Individual Field; ``static`` skips deformation.
    """
    if tracks.cameras and len(tracks.cameras) != len(tracks):
        raise DataMismatchError(f"{len(tracks.cameras)} cameras for {len(tracks)} signal frames")
    stack = model.stack
    if field_override is not None:
        fld = field_override
    elif model.fields:
        fld = model.fields[0] if model.individual is not None else model.fields[identity or 0]
    else:
        raise DataMismatchError("checkpoint has no static field to render")
    k, ind = model.individual_for(identity)
    if general_only or (ind is None and (k is None or k >= stack.n_identities)):
        k, ind = None, None
    fms, fas = _signal_features(stack, tracks)
    settings = model.config.raster.settings()
    outs = []
    for t in range(len(tracks)):
        if static:
            g = fld.activate()
        else:
            d = frame_deltas(stack, k, fld, fms[t], fas[t], ind)
            g = combine_apply(fld, d.general, d.individual)
        out = render(g, tracks.cameras[t], settings)
        fine = model.refiner(out.rgb) if model.refiner is not None else out.rgb
        outs.append(FrameOutput(out.rgb, fine, out.depth, out.transmittance, g.mu))
    return outs


def mouth_opening(mu: torch.Tensor, region: torch.Tensor) -> float:
    """Mean absolute vertical deviation of the mouth-region centers."""
    y = mu[region == MOUTH, 1].double()
    return float((y - y.mean()).abs().mean())


def pearson(x, y) -> float:
    """Pearson correlation; 0 when either series is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x, y = x - x.mean(), y - y.mean()
    den = math.sqrt(float(x @ x) * float(y @ y))
    if den < 1e-12 * max(1.0, len(x)):
        return 0.0
    return float(x @ y) / den


def evaluate(model: HeadModel, clip: Clip, identity: Optional[int] = None, start: int = 0,
             stop: Optional[int] = None, field_override: Optional[GaussianField] = None,
             general_only: bool = False) -> dict:
    """Metrics report for frames [start, stop) of ``clip``.

    Image metrics need ground-truth frames; the mouth-opening correlation
    needs the synthetic drive track.
    """
    features_clip = clip
    tracks = Tracks.from_clip(features_clip, model.dtype)
    outs = run_frames(model, tracks, identity, field_override, general_only)
    stop = len(tracks) if stop is None else stop
    sel = range(start, stop)
    report: dict = {"frames": len(sel), "start": start, "stop": stop}
    fld = field_override or (model.fields[0] if model.individual is not None or not identity else model.fields[identity])
    openings = [mouth_opening(outs[t].mu, fld.region) for t in sel]
    report["mouth_opening_mean"] = float(np.mean(openings)) if openings else 0.0
    if clip.drive is not None:
        report["mouth_r"] = pearson(openings, clip.drive[start:stop])
    if tracks.targets is not None and len(sel):
        static = run_frames(model, tracks, identity, field_override, static=True)
        cfg = model.config
        fine_p, coarse_p, static_p, ssims, terms = [], [], [], [], {}
        for t in sel:
            target = tracks.targets[t]
            fine_p.append(psnr(outs[t].fine, target))
            coarse_p.append(psnr(outs[t].coarse, target))
            static_p.append(psnr(static[t].coarse, target))
            ssims.append(float(ssim(outs[t].fine.double(), target.double())))
            lt = adapt_loss(outs[t].coarse, target, cfg.loss, depth=outs[t].depth,
                            transmittance=outs[t].transmittance).as_floats()
            for name, v in lt.items():
                terms.setdefault(name, []).append(v)
        report.update({
            "psnr": _mean_psnr(fine_p),
            "ssim": float(np.mean(ssims)),
            "coarse_psnr": _mean_psnr(coarse_p),
            "static_psnr": _mean_psnr(static_p),
            "terms": {k: float(np.mean(v)) for k, v in terms.items()},
        })
    return report


def _mean_psnr(values: list) -> float:
    return math.inf if all(math.isinf(v) for v in values) else float(np.mean([v for v in values if math.isfinite(v)]))


def render_video(model: HeadModel, tracks: Tracks, out_dir, identity: Optional[int] = None,
                 coarse: bool = False) -> int:
    """Write ``frame_XXXX.png`` (refined) per frame, plus ``coarse_XXXX.png``
    when asked, and the depth maps as one tensor file. Returns the frame count."""
    if len(tracks.cameras) != len(tracks):
        raise DataMismatchError(f"{len(tracks.cameras)} cameras for {len(tracks)} signal frames")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outs = run_frames(model, tracks, identity)
    for t, o in enumerate(outs):
        _save_png(out / f"frame_{t:04d}.png", o.fine)
        if coarse:
            _save_png(out / f"coarse_{t:04d}.png", o.coarse)
    if outs:
        storage.write_tensor(out / "depth.bin", torch.stack([o.depth for o in outs]).float())
    return len(outs)


def _save_png(path: Path, img: torch.Tensor):
    arr = (img.detach().clamp(0, 1).cpu().numpy() * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


# --- checkpoints ---------------------------------------------------------

def save_model(path, model: HeadModel, kind: str) -> None:
    s = model.stack
    arrays = {}
    arrays.update(storage.module_arrays("general", s.general))
    arrays.update(storage.module_arrays("motion", s.motion))
    arrays.update(storage.module_arrays("audio", s.audio))
    if model.refiner is not None:
        arrays.update(storage.module_arrays("refiner", model.refiner))
    for k, ind in enumerate(s.individuals):
        arrays.update(storage.module_arrays(f"individual.{k}", ind))
    if model.individual is not None:
        arrays.update(storage.module_arrays("adapted", model.individual))
    for k, f in enumerate(model.fields):
        arrays.update(storage.module_arrays(f"field.{k}", f))
    meta = {"kind": kind, "config": model.config.to_dict(), "n_individuals": s.n_identities,
            "n_fields": len(model.fields)}
    storage.write_checkpoint(path, arrays, meta)


def load_model(path, cfg: Optional[TrainConfig] = None) -> HeadModel:
    ckpt = storage.read_checkpoint(path)
    saved = config_from_dict(ckpt.meta["config"])
    if cfg is not None:
        check_compatible(saved, cfg)
    dtype = DTYPES[saved.dtype]
    canonical = ckpt.tensors("motion")["canonical"]
    stack = new_stack(saved, canonical, int(ckpt.meta.get("n_individuals", 0)))
    storage.load_module(stack.general, ckpt, "general")
    storage.load_module(stack.motion, ckpt, "motion")
    storage.load_module(stack.audio, ckpt, "audio")
    for k, ind in enumerate(stack.individuals):
        storage.load_module(ind, ckpt, f"individual.{k}")
    refiner = None
    if ckpt.has("refiner"):
        refiner = storage.load_module(Refiner(saved.seed).to(dtype), ckpt, "refiner")
    individual = None
    if ckpt.has("adapted"):
        individual = storage.load_module(stack.new_individual(0), ckpt, "adapted")
    fields = []
    for k in range(int(ckpt.meta.get("n_fields", 0))):
        fields.append(storage.load_module(new_field(saved, 0), ckpt, f"field.{k}"))
    return HeadModel(saved, stack, refiner, fields, individual)


def load_reference_field(path, dtype=torch.float64) -> GaussianField:
    """Hidden ground-truth static field stored next to a synthetic identity."""
    ckpt = storage.read_checkpoint(path)
    t = ckpt.tensors("field")
    return GaussianField(t["mu"], t["scale_raw"], t["quat_raw"], t["opacity_raw"], t["color_raw"],
                         t["region"], t["bounds"]).to(dtype)
