"""Tri-plane multi-resolution hash encoding, small MLPs, and the finite-difference
gradient checker every trainable piece is verified with."""

from __future__ import annotations

import logging
import math
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

HASH_PRIME = 2654435761
# (first, second) coordinate indices of the XY, YZ and XZ planes
PLANES = ((0, 1), (1, 2), (0, 2))


def hash_index(ix, iy, table_size: int):
    """Spatial hash ``((ix * 1) XOR (iy * 2654435761)) mod table_size``.

    Works on python ints and on integer tensors alike.
    """
    return (ix ^ (iy * HASH_PRIME)) % table_size


def level_resolutions(n_levels: int, n_min: int, n_max: int) -> list[int]:
    if n_levels == 1:
        return [n_min]
    growth = math.exp((math.log(n_max) - math.log(n_min)) / (n_levels - 1))
    return [int(math.floor(n_min * growth**level + 1e-9)) for level in range(n_levels)]


class TriPlaneEncoder(nn.Module):
    """Three 2-D multi-resolution hash grids over the XY, YZ and XZ projections
    of a normalized position; output size is ``3 * n_levels * n_features``.
    """

    def __init__(
        self,
        bounds: torch.Tensor,
        n_levels: int = 8,
        n_features: int = 2,
        log2_table_size: int = 12,
        n_min: int = 8,
        n_max: int = 128,
        init_range: float = 1e-4,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.n_levels = n_levels
        self.n_features = n_features
        self.table_size = 2**log2_table_size
        self.resolutions = level_resolutions(n_levels, n_min, n_max)
        self.register_buffer("res", torch.tensor(self.resolutions, dtype=torch.long))
        self.register_buffer("bounds", torch.as_tensor(bounds, dtype=torch.get_default_dtype()).clone())
        tables = torch.empty(3, n_levels, self.table_size, n_features)
        tables.uniform_(-init_range, init_range, generator=generator)
        self.tables = nn.Parameter(tables)
        self.clamp_count = 0  # positions clamped into [0, 1]

    @property
    def out_dim(self) -> int:
        return 3 * self.n_levels * self.n_features

    def normalize(self, mu: torch.Tensor) -> torch.Tensor:
        lo, hi = self.bounds.to(mu.dtype)
        return (mu - lo) / (hi - lo)

    def _clamp(self, p: torch.Tensor) -> torch.Tensor:
        outside = (p < 0) | (p > 1)
        if bool(outside.any()):
            n = int(outside.any(dim=-1).sum())
            self.clamp_count += n
            log.debug("clamped %d positions into the unit box", n)
            p = p.clamp(0.0, 1.0)
        return p

    def encode_plane(self, plane: int, p: torch.Tensor) -> torch.Tensor:
        """Bilinear hash-grid lookup of 2-D points ``p`` (..., 2) in [0, 1]^2.

        Returns (..., n_levels * n_features), levels concatenated coarse to fine.
        """
        p = self._clamp(p)
        lead = p.shape[:-1]
        p = p.reshape(-1, 1, 2)
        res = self.res.to(p.device)
        x = p * res.view(1, -1, 1).to(p.dtype)  # (M, L, 2)
        cell = torch.minimum(x.detach().floor().long(), (res - 1).view(1, -1, 1))
        frac = x - cell.to(p.dtype)
        fx, fy = frac[..., 0], frac[..., 1]
        ix, iy = cell[..., 0], cell[..., 1]
        corners = (
            (ix, iy, (1 - fx) * (1 - fy)),
            (ix + 1, iy, fx * (1 - fy)),
            (ix, iy + 1, (1 - fx) * fy),
            (ix + 1, iy + 1, fx * fy),
        )
        table = self.tables[plane]  # (L, T, F)
        level = torch.arange(self.n_levels, device=p.device).view(1, -1)
        out = 0
        for cx, cy, w in corners:
            idx = hash_index(cx, cy, self.table_size)
            out = out + w.unsqueeze(-1) * table[level, idx]
        return out.reshape(*lead, self.n_levels * self.n_features)

    def forward(self, mu: torch.Tensor) -> torch.Tensor:
        p = self.normalize(mu)
        return torch.cat([self.encode_plane(k, p[..., list(axes)]) for k, axes in enumerate(PLANES)], dim=-1)


class MLP(nn.Module):
    """Affine layers with leaky-ReLU (slope 0.01) between them; last layer linear."""

    def __init__(self, sizes: Sequence[int], zero_last: bool = False):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(self.sizes[:-1], self.sizes[1:]))
        if zero_last:
            nn.init.zeros_(self.layers[-1].weight)
            nn.init.zeros_(self.layers[-1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"MLP expects input width {self.sizes[0]}, got {x.shape[-1]}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = nn.functional.leaky_relu(x, 0.01)
        return x


def mlp_forward(params: Sequence[tuple[torch.Tensor, torch.Tensor]], x: torch.Tensor) -> torch.Tensor:
    """Functional form of :class:`MLP` over explicit ``(weight, bias)`` pairs
    (weights stored ``(out, in)``)."""
    for i, (w, b) in enumerate(params):
        if w.shape[1] != x.shape[-1] or w.shape[0] != b.shape[0]:
            raise ValueError(f"layer {i}: weight {tuple(w.shape)} / bias {tuple(b.shape)} do not chain with input width {x.shape[-1]}")
        x = x @ w.T + b
        if i < len(params) - 1:
            x = nn.functional.leaky_relu(x, 0.01)
    return x


class GradCheckError(FloatingPointError):
    """The loss evaluated to a non-finite value during a gradient check."""


def grad_check(
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    eps: float = 1e-4,
    coords: Optional[Sequence[int]] = None,
    analytic: Optional[torch.Tensor] = None,
) -> float:
    """Max relative error between the autograd gradient of a scalar loss and
    central differences, ``|g - fd| / max(1e-8, |fd|)``.

    ``coords`` restricts the finite differences to a subset of flat indices;
    ``analytic`` skips the backward pass when the caller already has it.
    """
    x = point.detach().clone().reshape(-1)
    if analytic is None:
        xg = x.clone().requires_grad_(True)
        value = loss_fn(xg)
        if not torch.isfinite(value):
            raise GradCheckError("loss is not finite at the check point")
        (analytic,) = torch.autograd.grad(value, xg, allow_unused=True)
        if analytic is None:
            analytic = torch.zeros_like(x)
    analytic = analytic.reshape(-1)
    idx = range(x.numel()) if coords is None else coords
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            orig = x[i].item()
            x[i] = orig + eps
            fp = loss_fn(x).item()
            x[i] = orig - eps
            fm = loss_fn(x).item()
            x[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError(f"loss is not finite at coordinate {i} +/- eps")
            fd = (fp - fm) / (2 * eps)
            err = abs(analytic[i].item() - fd) / max(1e-8, abs(fd))
            worst = max(worst, err)
    return worst


def sample_coords(grad: torch.Tensor, n: int, rng: np.random.Generator) -> list[int]:
    """Up to ``n`` flat indices, preferring entries with nonzero gradient."""
    flat = grad.reshape(-1)
    nz = torch.nonzero(flat != 0).reshape(-1).numpy()
    pool = nz if nz.size else np.arange(flat.numel())
    if pool.size <= n:
        return [int(i) for i in pool]
    return [int(i) for i in rng.choice(pool, size=n, replace=False)]
