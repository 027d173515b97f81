"""Adam with a finiteness guard: steps with non-finite gradients are skipped."""

from __future__ import annotations

import logging
from typing import Iterable

import torch

log = logging.getLogger(__name__)


class GuardedAdam:
    def __init__(self, groups: Iterable[dict], betas=(0.9, 0.999), eps: float = 1e-15):
        groups = [g for g in groups if g["params"]]
        self.opt = torch.optim.Adam(groups, betas=tuple(betas), eps=eps)
        self.skipped = 0

    @property
    def params(self):
        return [p for g in self.opt.param_groups for p in g["params"]]

    def zero_grad(self) -> None:
        self.opt.zero_grad(set_to_none=True)

    def step(self) -> bool:
        """Apply the update unless some gradient is NaN/inf. Returns whether it was applied."""
        for p in self.params:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                self.skipped += 1
                log.warning("non-finite gradient; optimizer step skipped (%d so far)", self.skipped)
                return False
        self.opt.step()
        return True
