"""Training losses and reference-free image metrics.

Images are ``(H, W, 3)`` tensors in [0, 1] unless stated otherwise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
from torch import nn
from torch.nn import functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_IDENTICAL = math.inf


class DegenerateSimilarityError(ValueError):
    """Cosine similarity requested for a (near) zero vector."""


@dataclass
class LossWeights:
    dssim: float = 0.2
    sc: float = 0.01
    c2f: float = 1.0
    perceptual: float = 0.1
    nc: float = 0.01
    geo: float = 0.001
    tau: float = 0.07

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature tau must be > 0")
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def _same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return (a - b).abs().mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Local SSIM over valid windows, shape (3, H-10, W-10)."""
    _same_shape(a, b)
    H, W = a.shape[:2]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ValueError(f"image {H}x{W} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window(dtype=a.dtype)
    kv = g.view(1, 1, -1, 1)
    kh = g.view(1, 1, 1, -1)

    def blur(x):
        return F.conv2d(F.conv2d(x, kv), kh)

    x = a.permute(2, 0, 1).unsqueeze(1)
    y = b.permute(2, 0, 1).unsqueeze(1)
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return (num / den)[:, 0]


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ssim_map(a, b).mean()


def dssim_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (1 - ssim(a, b)) / 2


def psnr(a, b) -> float:
    """PSNR in dB for data range 1.0; ``inf`` for identical images."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    _same_shape(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return PSNR_IDENTICAL
    return 10 * math.log10(1.0 / mse)


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = a.norm(), b.norm()
    if na < 1e-12 or nb < 1e-12:
        raise DegenerateSimilarityError("cosine similarity of a vector with norm < 1e-12")
    return (a @ b) / (na * nb)


def sc_loss(d_general: torch.Tensor, d_individuals: Sequence[torch.Tensor], k: int, tau: float) -> torch.Tensor:
    """Similarity contrastive loss for identity ``k`` (zero-based).

    ``-log softmax_i(sim(g, I_i) / tau)[k]`` over the N Individual-Field
    position deltas, each flattened to one vector.
    """
    if len(d_individuals) < 1:
        raise ValueError("need at least one Individual Field delta")
    if not 0 <= k < len(d_individuals):
        raise IndexError(f"identity {k} out of range for {len(d_individuals)} individuals")
    g = d_general.reshape(-1)
    sims = torch.stack([cosine(g, d.reshape(-1)) for d in d_individuals])
    return -torch.log_softmax(sims / tau, dim=0)[k]


def nc_loss_pretrain(d_individuals: Sequence[torch.Tensor], k: int) -> torch.Tensor:
    """Mean over i != k of max(0, sim(I_k, I_i))."""
    if len(d_individuals) < 2:
        raise ValueError("negative contrast needs at least two identities")
    ref = d_individuals[k].reshape(-1)
    terms = [F.relu(cosine(ref, d.reshape(-1))) for i, d in enumerate(d_individuals) if i != k]
    return torch.stack(terms).mean()


def nc_loss_adapt(d_individual: torch.Tensor, d_general: torch.Tensor) -> torch.Tensor:
    """max(0, sim(I, G)) for a single adapted identity."""
    return F.relu(cosine(d_individual.reshape(-1), d_general.reshape(-1)))


class PerceptualProxy(nn.Module):
    """Frozen, seeded random 3-layer conv feature extractor; features are
    tapped after layers 2 and 3."""

    def __init__(self, seed: int = 1234, channels: Sequence[int] = (3, 16, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
            bound = 1.0 / math.sqrt(cin * 9)
            w = (torch.rand(cout, cin, 3, 3, generator=gen) * 2 - 1) * bound * math.sqrt(6)
            self.register_buffer(f"w{i}", w)
        self.seed = seed
        self.n_layers = len(channels) - 1

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        x = img.permute(2, 0, 1).unsqueeze(0)
        taps = []
        for i in range(self.n_layers):
            w = getattr(self, f"w{i}").to(x.dtype)
            x = F.conv2d(x, w, padding=1, stride=1 if i == 0 else 2)
            if i >= 1:
                taps.append(x)
            x = F.relu(x)
        return taps

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        _same_shape(a, b)
        fa, fb = self.features(a), self.features(b)
        return sum((x - y).abs().mean() for x, y in zip(fa, fb))


def perceptual_loss(a: torch.Tensor, b: torch.Tensor, proxy: Optional[PerceptualProxy] = None) -> torch.Tensor:
    proxy = proxy or PerceptualProxy()
    return proxy(a, b)


def c2f_loss(fine: torch.Tensor, target: torch.Tensor, lambda_p: float,
             proxy: Optional[PerceptualProxy] = None) -> torch.Tensor:
    loss = l1_loss(fine, target)
    if lambda_p:
        loss = loss + lambda_p * perceptual_loss(fine, target, proxy)
    return loss


def _normals(depth: torch.Tensor) -> torch.Tensor:
    gx = depth[:-1, 1:] - depth[:-1, :-1]
    gy = depth[1:, :-1] - depth[:-1, :-1]
    n = torch.stack([-gx, -gy, torch.ones_like(gx)], dim=-1)
    return n / n.norm(dim=-1, keepdim=True)


def geo_loss(depth: torch.Tensor, transmittance: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Depth total variation plus normal consistency over foreground pixels.

    Foreground is ``transmittance < threshold``. TV is the mean absolute
    forward difference over horizontally / vertically adjacent foreground
    pairs. Normals come from forward depth differences at pixels whose right
    and lower neighbours are foreground; the second term is the mean squared
    distance between horizontally / vertically adjacent valid normals.
    """
    fg = (transmittance.detach() < threshold)
    zero = depth.sum() * 0
    h_pair = fg[:, 1:] & fg[:, :-1]
    v_pair = fg[1:, :] & fg[:-1, :]
    dh = (depth[:, 1:] - depth[:, :-1]).abs()
    dv = (depth[1:, :] - depth[:-1, :]).abs()
    n_pairs = int(h_pair.sum() + v_pair.sum())
    tv = (dh[h_pair].sum() + dv[v_pair].sum()) / n_pairs if n_pairs else zero

    valid = fg[:-1, :-1] & fg[:-1, 1:] & fg[1:, :-1]
    n = _normals(depth)
    nh = valid[:, 1:] & valid[:, :-1]
    nv = valid[1:, :] & valid[:-1, :]
    eh = ((n[:, 1:] - n[:, :-1]) ** 2).sum(-1)
    ev = ((n[1:, :] - n[:-1, :]) ** 2).sum(-1)
    n_norm = int(nh.sum() + nv.sum())
    normal = (eh[nh].sum() + ev[nv].sum()) / n_norm if n_norm else zero
    return tv + normal


@dataclass
class LossTerms:
    total: torch.Tensor
    terms: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        out = {name: float(torch.as_tensor(v).detach()) for name, v in self.terms.items()}
        out["total"] = float(torch.as_tensor(self.total).detach())
        return out


def pretrain_loss(
    coarse: torch.Tensor,
    target: torch.Tensor,
    weights: LossWeights,
    fine: Optional[torch.Tensor] = None,
    sc: Optional[torch.Tensor] = None,
    nc: Optional[torch.Tensor] = None,
    proxy: Optional[PerceptualProxy] = None,
) -> LossTerms:
    """L1 + w_dssim D-SSIM (coarse image) + w_sc SC + w_c2f C2F (fine image).

    ``nc`` adds the optional negative-contrast term (w_nc) used by the
    contrastive ablations; absent terms contribute nothing.
    """
    terms = {"l1": l1_loss(coarse, target)}
    total = terms["l1"]
    if weights.dssim:
        terms["dssim"] = dssim_loss(coarse, target)
        total = total + weights.dssim * terms["dssim"]
    if sc is not None and weights.sc:
        terms["sc"] = sc
        total = total + weights.sc * sc
    if nc is not None and weights.nc:
        terms["nc"] = nc
        total = total + weights.nc * nc
    if fine is not None and weights.c2f:
        terms["c2f"] = c2f_loss(fine, target, weights.perceptual, proxy)
        total = total + weights.c2f * terms["c2f"]
    return LossTerms(total, terms)


def adapt_loss(
    coarse: torch.Tensor,
    target: torch.Tensor,
    weights: LossWeights,
    nc: Optional[torch.Tensor] = None,
    depth: Optional[torch.Tensor] = None,
    transmittance: Optional[torch.Tensor] = None,
) -> LossTerms:
    """L1 + w_dssim D-SSIM + w_nc NC + w_geo Geo."""
    terms = {"l1": l1_loss(coarse, target)}
    total = terms["l1"]
    if weights.dssim:
        terms["dssim"] = dssim_loss(coarse, target)
        total = total + weights.dssim * terms["dssim"]
    if nc is not None and weights.nc:
        terms["nc"] = nc
        total = total + weights.nc * nc
    if depth is not None and weights.geo:
        terms["geo"] = geo_loss(depth, transmittance)
        total = total + weights.geo * terms["geo"]
    return LossTerms(total, terms)
