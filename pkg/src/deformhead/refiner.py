"""Coarse-to-fine refiner: a small residual U-Net that keeps the input resolution."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .losses import PerceptualProxy, c2f_loss

log = logging.getLogger(__name__)


class IndivisibleSizeError(ValueError):
    pass


def _block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.LeakyReLU(0.01))


class Refiner(nn.Module):
    """Encoder 3->16->32->64 (stride 2 each), decoder with transposed convs and
    skip connections back to 3 channels, added to the input and clamped to [0, 1].

    The last convolution starts at zero, so a fresh refiner is the identity.
    """

    def __init__(self, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.enc1 = _block(3, 16, 2)  # H/2
        self.enc2 = _block(16, 32, 2)  # H/4
        self.enc3 = _block(32, 64, 2)  # H/8
        self.up3 = nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1)  # H/4
        self.dec3 = _block(64, 32, 1)
        self.up2 = nn.ConvTranspose2d(32, 16, 4, stride=2, padding=1)  # H/2
        self.dec2 = _block(32, 16, 1)
        self.up1 = nn.ConvTranspose2d(16, 16, 4, stride=2, padding=1)  # H
        self.dec1 = _block(16 + 3, 16, 1)
        self.out = nn.Conv2d(16, 3, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        log.debug("refiner parameters: %d", self.n_params)

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d3 = self.dec3(torch.cat([F.leaky_relu(self.up3(e3), 0.01), e2], dim=1))
        d2 = self.dec2(torch.cat([F.leaky_relu(self.up2(d3), 0.01), e1], dim=1))
        d1 = self.dec1(torch.cat([F.leaky_relu(self.up1(d2), 0.01), x], dim=1))
        return self.out(d1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        """(H, W, 3) or (B, H, W, 3) -> same shape."""
        single = img.dim() == 3
        x = img.unsqueeze(0) if single else img
        H, W = x.shape[1:3]
        if H % 8 or W % 8:
            raise IndivisibleSizeError(f"refiner input {H}x{W} must be divisible by 8")
        x = x.permute(0, 3, 1, 2)
        y = (x + self.residual(x)).clamp(0.0, 1.0).permute(0, 2, 3, 1)
        return y[0] if single else y


def refine(refiner: Optional[Refiner], coarse: torch.Tensor) -> torch.Tensor:
    return coarse if refiner is None else refiner(coarse)


@dataclass
class RefinerTrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch: int = 4
    lambda_p: float = 0.1
    seed: int = 0
    log_every: int = 100
    cosine_decay: bool = False  # anneal the step size to zero over ``steps``


def train_refiner(
    pairs: Sequence[tuple[torch.Tensor, torch.Tensor]],
    config: RefinerTrainConfig = RefinerTrainConfig(),
    refiner: Optional[Refiner] = None,
    proxy: Optional[PerceptualProxy] = None,
) -> tuple[Refiner, list[float]]:
    """Fit (or fine-tune, when ``refiner`` is given) on (coarse, target) pairs
    by minimizing the C2F loss with Adam. Returns the model and per-step losses."""
    if len(pairs) == 0:
        raise ValueError("refiner training needs at least one (coarse, target) pair")
    refiner = refiner if refiner is not None else Refiner(config.seed).to(pairs[0][0].dtype)
    proxy = proxy or PerceptualProxy()
    opt = torch.optim.Adam(refiner.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, config.steps) if config.cosine_decay else None
    coarse = torch.stack([p[0] for p in pairs])
    target = torch.stack([p[1] for p in pairs])
    gen = torch.Generator().manual_seed(config.seed)
    history = []
    for step in range(config.steps):
        idx = torch.randperm(len(pairs), generator=gen)[: config.batch]
        fine = refiner(coarse[idx])
        loss = sum(c2f_loss(f, t, config.lambda_p, proxy) for f, t in zip(fine, target[idx])) / len(idx)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        history.append(loss.item())
        if config.log_every and step % config.log_every == 0:
            log.info("refiner step=%d c2f=%.6f", step, history[-1])
    return refiner, history
