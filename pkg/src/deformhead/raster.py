"""Differentiable CPU splatting: EWA projection, depth-sorted front-to-back
compositing, RGB / expected-depth / transmittance outputs.

Gradients flow through autograd; every operation below is written in
differentiable tensor ops so ``render`` needs no custom backward.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence

import torch

from .field import Activated, CameraPose, covariance3d

log = logging.getLogger(__name__)

diagnostics: Counter = Counter()


@dataclass(frozen=True)
class RasterSettings:
    background: Sequence[float] = (1.0, 1.0, 1.0)
    alpha_clamp: Optional[float] = 0.99
    early_stop: Optional[float] = 1e-4
    cull_sigma: Optional[float] = 3.0
    dilation: float = 0.3
    z_near: float = 0.01
    z_far: float = 100.0
    tile_size: Optional[int] = None

    def exact(self) -> "RasterSettings":
        """Oracle-comparison mode: no clamp, no early stop, no footprint culling."""
        return replace(self, alpha_clamp=None, early_stop=None, cull_sigma=None, tile_size=None)


class Projected(NamedTuple):
    p2d: torch.Tensor  # (P, 2) pixels
    z: torch.Tensor  # (P,)
    cov2d: torch.Tensor  # (P, 2, 2)
    color: torch.Tensor  # (P, 3)
    alpha_base: torch.Tensor  # (P,)
    index: torch.Tensor  # (P,) source index


class RenderOutput(NamedTuple):
    rgb: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    transmittance: torch.Tensor  # (H, W)


def _cam_tensors(cam: CameraPose, like: torch.Tensor):
    R = torch.as_tensor(cam.R, dtype=like.dtype)
    t = torch.as_tensor(cam.t, dtype=like.dtype)
    return R, t


def project(mu: torch.Tensor, cov3d: torch.Tensor, cam: CameraPose, dilation: float = 0.3,
            z_near: float = 0.01) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pinhole projection with the local-affine (EWA) covariance
    ``J W Sigma W^T J^T + dilation * I``.

    Returns ``(p2d, z, cov2d, keep)`` where ``keep`` marks primitives in front
    of the near plane; culled rows still hold values but must be ignored.
    """
    R, t = _cam_tensors(cam, mu)
    pc = mu @ R.T + t
    x, y, z = pc.unbind(-1)
    keep = z > z_near
    zs = torch.where(keep, z, torch.ones_like(z))
    u = cam.fx * x / zs + cam.cx
    v = cam.fy * y / zs + cam.cy
    zero = torch.zeros_like(zs)
    J = torch.stack([
        torch.stack([cam.fx / zs, zero, -cam.fx * x / zs**2], -1),
        torch.stack([zero, cam.fy / zs, -cam.fy * y / zs**2], -1),
    ], dim=-2)  # (P, 2, 3)
    M = J @ R
    cov2d = M @ cov3d @ M.transpose(-1, -2)
    cov2d = cov2d + dilation * torch.eye(2, dtype=mu.dtype)
    return torch.stack([u, v], -1), z, cov2d, keep


def project_field(g: Activated, cam: CameraPose, settings: RasterSettings) -> Projected:
    cov3d = covariance3d(g.scale, g.quat)
    p2d, z, cov2d, keep = project(g.mu, cov3d, cam, settings.dilation, settings.z_near)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    pd = (a > 0) & (a * c - b * b > 0)
    bad = int((keep & ~pd).sum())
    if bad:
        diagnostics["non_pd_cov2d"] += bad
        log.warning("skipping %d primitives with non-PD 2D covariance", bad)
    keep = keep & pd
    idx = torch.nonzero(keep).reshape(-1)
    # global (z, index) order: stable sort of index-ordered rows by depth
    order = torch.sort(z[idx].detach(), stable=True).indices
    idx = idx[order]
    return Projected(p2d[idx], z[idx], cov2d[idx], g.color[idx], g.opacity[idx], idx)


def _conic(cov2d: torch.Tensor):
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return c / det, -b / det, a / det


def _composite(proj: Projected, pix: torch.Tensor, settings: RasterSettings):
    """Composite sorted primitives over pixel centres ``pix`` (M, 2), densely.

    Returns (rgb (M,3), depth (M,), T_final (M,), weights (M,P)).
    """
    dtype = pix.dtype
    bg = torch.as_tensor(settings.background, dtype=dtype)
    M, P = pix.shape[0], proj.z.shape[0]
    if P == 0:
        ones = torch.ones(M, dtype=dtype)
        return bg.expand(M, 3).clone(), ones * settings.z_far, ones, torch.zeros(M, 0, dtype=dtype)
    ia, ib, ic = _conic(proj.cov2d)
    d = pix.unsqueeze(1) - proj.p2d.unsqueeze(0)  # (M, P, 2)
    dx, dy = d[..., 0], d[..., 1]
    maha = ia * dx * dx + 2 * ib * dx * dy + ic * dy * dy
    alpha = proj.alpha_base * torch.exp(-0.5 * maha)
    if settings.cull_sigma is not None:
        alpha = torch.where(maha.detach() <= settings.cull_sigma**2, alpha, torch.zeros_like(alpha))
    return _blend(alpha, proj.color.expand(M, P, 3), proj.z.expand(M, P), settings, dtype)


def _blend(alpha: torch.Tensor, color: torch.Tensor, z: torch.Tensor, settings: RasterSettings, dtype):
    """Front-to-back blending of per-pixel sorted rows (M, K)."""
    M = alpha.shape[0]
    bg = torch.as_tensor(settings.background, dtype=dtype)
    if settings.alpha_clamp is not None:
        alpha = alpha.clamp(max=settings.alpha_clamp)
    one_minus = 1 - alpha
    t_after = torch.cumprod(one_minus, dim=1)
    t_before = torch.cat([torch.ones(M, 1, dtype=dtype), t_after[:, :-1]], dim=1)
    if settings.early_stop is not None:
        # t_after is non-increasing, so the active set is a prefix
        active = t_after.detach() >= settings.early_stop
        weights = torch.where(active, alpha * t_before, torch.zeros_like(alpha))
        t_final = torch.where(active, one_minus, torch.ones_like(one_minus)).prod(dim=1)
    else:
        weights = alpha * t_before
        t_final = t_after[:, -1]
    # convex combination; the clamp only removes round-off past [0, 1]
    rgb = ((weights.unsqueeze(-1) * color).sum(1) + t_final.unsqueeze(-1) * bg).clamp(0.0, 1.0)
    depth = (weights * z).sum(1) + t_final * settings.z_far
    return rgb, depth, t_final, weights


def _composite_sparse(proj: Projected, W: int, H: int, settings: RasterSettings):
    """Culled compositing over (pixel, primitive) pairs inside each primitive's
    ``cull_sigma`` ellipse; matches the dense path since culled pairs have alpha 0."""
    dtype = proj.z.dtype
    bg = torch.as_tensor(settings.background, dtype=dtype)
    rgb = bg.expand(H * W, 3).clone()
    depth = torch.full((H * W,), settings.z_far, dtype=dtype)
    tf = torch.ones(H * W, dtype=dtype)
    P = proj.z.shape[0]
    if P == 0:
        return rgb, depth, tf
    k = settings.cull_sigma
    cov = proj.cov2d.detach()
    px, py = proj.p2d[:, 0].detach(), proj.p2d[:, 1].detach()
    rx, ry = k * cov[:, 0, 0].sqrt(), k * cov[:, 1, 1].sqrt()
    x0 = torch.ceil(px - rx).clamp(min=0).long()
    x1 = torch.floor(px + rx).clamp(max=W - 1).long()
    y0 = torch.ceil(py - ry).clamp(min=0).long()
    y1 = torch.floor(py + ry).clamp(max=H - 1).long()
    nx = (x1 - x0 + 1).clamp(min=0)
    ny = (y1 - y0 + 1).clamp(min=0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return rgb, depth, tf
    prim = torch.repeat_interleave(torch.arange(P), counts)
    starts = torch.cumsum(counts, 0) - counts
    local = torch.arange(total) - starts[prim]
    qx = x0[prim] + local % nx[prim]
    qy = y0[prim] + local // nx[prim]
    ia, ib, ic = _conic(proj.cov2d)
    dx = qx.to(dtype) - proj.p2d[prim, 0]
    dy = qy.to(dtype) - proj.p2d[prim, 1]
    maha = ia[prim] * dx * dx + 2 * ib[prim] * dx * dy + ic[prim] * dy * dy
    keep = torch.nonzero(maha.detach() <= k * k).reshape(-1)
    if keep.numel() == 0:
        return rgb, depth, tf
    prim, maha = prim[keep], maha[keep]
    pixel = (qy * W + qx)[keep]
    order = torch.argsort(pixel * P + prim)
    prim, maha, pixel = prim[order], maha[order], pixel[order]
    alpha = proj.alpha_base[prim] * torch.exp(-0.5 * maha)
    upix, per_pix = torch.unique_consecutive(pixel, return_counts=True)
    row = torch.repeat_interleave(torch.arange(upix.numel()), per_pix)
    seg_start = torch.cumsum(per_pix, 0) - per_pix
    col = torch.arange(prim.numel()) - seg_start[row]
    U, K = upix.numel(), int(per_pix.max())
    a_pad = torch.zeros(U, K, dtype=dtype).index_put((row, col), alpha)
    c_pad = torch.zeros(U, K, 3, dtype=dtype).index_put((row, col), proj.color[prim])
    z_pad = torch.zeros(U, K, dtype=dtype).index_put((row, col), proj.z[prim])
    c_u, d_u, t_u, _ = _blend(a_pad, c_pad, z_pad, settings, dtype)
    rgb = rgb.index_put((upix,), c_u)
    depth = depth.index_put((upix,), d_u)
    tf = tf.index_put((upix,), t_u)
    return rgb, depth, tf


def pixel_grid(width: int, height: int, dtype=torch.float64) -> torch.Tensor:
    """Pixel centres at integer coordinates (x = column, y = row), row-major."""
    ys, xs = torch.meshgrid(torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype), indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)


def composite_pixel(proj: Projected, pixel: Sequence[float], settings: RasterSettings = RasterSettings()):
    """(rgb, depth, T_final) of a single pixel; ``proj`` must already be (z, index) sorted."""
    pix = torch.as_tensor([pixel], dtype=proj.z.dtype if proj.z.numel() else torch.float64)
    rgb, depth, t_final, _ = _composite(proj, pix, settings)
    return rgb[0], depth[0], t_final[0]


def _subset(proj: Projected, sel: torch.Tensor) -> Projected:
    return Projected(*(x[sel] for x in proj))


def render(g: Activated, cam: CameraPose, settings: RasterSettings = RasterSettings()) -> RenderOutput:
    """Render activated (possibly deformed) primitives through ``cam``."""
    if g.mu.shape[0] == 0:
        raise ValueError("cannot render an empty field")
    proj = project_field(g, cam, settings)
    H, W = cam.height, cam.width
    dtype = g.mu.dtype
    if settings.tile_size is None:
        if settings.cull_sigma is not None:
            rgb, depth, tf = _composite_sparse(proj, W, H, settings)
        else:
            rgb, depth, tf, _ = _composite(proj, pixel_grid(W, H, dtype), settings)
        return RenderOutput(rgb.reshape(H, W, 3), depth.reshape(H, W), tf.reshape(H, W))
    return _render_tiled(proj, W, H, dtype, settings)


def _render_tiled(proj: Projected, W: int, H: int, dtype, settings: RasterSettings) -> RenderOutput:
    ts = settings.tile_size
    if settings.cull_sigma is not None:
        k = settings.cull_sigma
        rx = k * proj.cov2d[:, 0, 0].detach().sqrt()
        ry = k * proj.cov2d[:, 1, 1].detach().sqrt()
        px, py = proj.p2d[:, 0].detach(), proj.p2d[:, 1].detach()
    rows = []
    for y0 in range(0, H, ts):
        cols = []
        for x0 in range(0, W, ts):
            y1, x1 = min(y0 + ts, H), min(x0 + ts, W)
            if settings.cull_sigma is not None:
                sel = (px + rx >= x0) & (px - rx <= x1 - 1) & (py + ry >= y0) & (py - ry <= y1 - 1)
                sub = _subset(proj, torch.nonzero(sel).reshape(-1))
            else:
                sub = proj
            pix = pixel_grid(x1 - x0, y1 - y0, dtype) + torch.tensor([x0, y0], dtype=dtype)
            c, d, t, _ = _composite(sub, pix, settings)
            cols.append((c.reshape(y1 - y0, x1 - x0, 3), d.reshape(y1 - y0, x1 - x0), t.reshape(y1 - y0, x1 - x0)))
        rows.append(cols)
    rgb = torch.cat([torch.cat([c[0] for c in cols], dim=1) for cols in rows], dim=0)
    depth = torch.cat([torch.cat([c[1] for c in cols], dim=1) for cols in rows], dim=0)
    tf = torch.cat([torch.cat([c[2] for c in cols], dim=1) for cols in rows], dim=0)
    return RenderOutput(rgb, depth, tf)


def render_weights(g: Activated, cam: CameraPose, settings: RasterSettings = RasterSettings()):
    """Per-pixel composited weights (H*W, P_visible) and final transmittance, for diagnostics."""
    proj = project_field(g, cam, settings)
    _, _, tf, w = _composite(proj, pixel_grid(cam.width, cam.height, g.mu.dtype), settings)
    return w, tf, proj.index


def render_backward(
    raw: Sequence[torch.Tensor],
    cam: CameraPose,
    grad_rgb: torch.Tensor,
    grad_depth: Optional[torch.Tensor] = None,
    settings: RasterSettings = RasterSettings(),
) -> tuple[torch.Tensor, ...]:
    """Gradients w.r.t. raw (mu, scale_raw, quat_raw, opacity_raw, color_raw)
    for upstream gradients on the rendered RGB (and optionally depth)."""
    from .field import activate

    leaves = [r.detach().clone().requires_grad_(True) for r in raw]
    out = render(activate(*leaves), cam, settings)
    total = (out.rgb * grad_rgb).sum()
    if grad_depth is not None:
        total = total + (out.depth * grad_depth).sum()
    grads = torch.autograd.grad(total, leaves, allow_unused=True)
    return tuple(torch.zeros_like(leaf) if g is None else g for leaf, g in zip(leaves, grads))
