"""Control-signal branches: motion-map difference encoder, temporal smoothing,
audio compression, and position-conditioned region attention."""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .encoders import MLP, TriPlaneEncoder

FEATURE_DIM = 32
AUDIO_SHAPE = (16, 29)
MOTION_SIZE = 32


def motion_difference(motion: torch.Tensor, canonical: torch.Tensor) -> torch.Tensor:
    """Elementwise ``motion - canonical``; ``motion`` may carry a leading batch/time axis."""
    if motion.shape[-3:] != canonical.shape[-3:]:
        raise ValueError(f"motion map shape {tuple(motion.shape)} does not match canonical {tuple(canonical.shape)}")
    return motion - canonical


def edge_windows(seq: torch.Tensor, j: int) -> torch.Tensor:
    """(T, D) -> (T, 2j+1, D) windows centred on each frame, edges repeated."""
    T = seq.shape[0]
    idx = torch.arange(T).view(-1, 1) + torch.arange(-j, j + 1).view(1, -1)
    return seq[idx.clamp(0, T - 1)]


class DiffEncoder(nn.Module):
    """Three stride-2 3x3 convolutions (3->8->16->32), global average pool, linear to 32."""

    def __init__(self, size: int = MOTION_SIZE, out_dim: int = FEATURE_DIM):
        super().__init__()
        self.size = size
        self.convs = nn.ModuleList([
            nn.Conv2d(3, 8, 3, stride=2, padding=1),
            nn.Conv2d(8, 16, 3, stride=2, padding=1),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
        ])
        self.head = nn.Linear(32, out_dim)

    def forward(self, delta: torch.Tensor) -> torch.Tensor:
        squeeze = delta.dim() == 3
        if squeeze:
            delta = delta.unsqueeze(0)
        if tuple(delta.shape[-3:]) != (3, self.size, self.size):
            raise ValueError(f"difference map must be 3x{self.size}x{self.size}, got {tuple(delta.shape[-3:])}")
        x = delta
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.01)
        out = self.head(x.mean(dim=(-2, -1)))
        return out[0] if squeeze else out


class TemporalSmoother(nn.Module):
    """Single linear temporal convolution whose kernel spans the 2j+1 window."""

    def __init__(self, j: int = 2, dim: int = FEATURE_DIM):
        super().__init__()
        self.j = j
        self.conv = nn.Conv1d(dim, dim, kernel_size=2 * j + 1)

    def smooth_window(self, window: torch.Tensor) -> torch.Tensor:
        """One ``(2j+1, D)`` window -> one ``(D,)`` output for its centre frame."""
        if window.shape[0] != 2 * self.j + 1:
            raise ValueError(f"window length {window.shape[0]} != 2j+1 = {2 * self.j + 1}")
        return self.conv(window.T.unsqueeze(0))[0, :, 0]

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        """(T, D) -> (T, D) with repetition padding at both ends."""
        padded = torch.cat([seq[:1].expand(self.j, -1), seq, seq[-1:].expand(self.j, -1)], dim=0)
        return self.conv(padded.T.unsqueeze(0))[0].T


class MotionBranch(nn.Module):
    """Motion maps -> difference encoder -> temporal smoothing -> (T, 32)."""

    def __init__(self, canonical: torch.Tensor, j: int = 2):
        super().__init__()
        self.register_buffer("canonical", canonical.clone())
        self.diff = DiffEncoder(size=canonical.shape[-1])
        self.tcn = TemporalSmoother(j)

    def frame_features(self, maps: torch.Tensor) -> torch.Tensor:
        return self.diff(motion_difference(maps, self.canonical))

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        return self.tcn(self.frame_features(maps))

    def at(self, maps: torch.Tensor, t: int) -> torch.Tensor:
        """Smoothed feature of frame ``t`` computed from its window only."""
        T = maps.shape[0]
        idx = [min(max(i, 0), T - 1) for i in range(t - self.tcn.j, t + self.tcn.j + 1)]
        return self.tcn.smooth_window(self.frame_features(maps[idx]))


class AudioBranch(nn.Module):
    """(T, 16, 29) audio windows -> per-frame linear 464->32 -> temporal smoothing."""

    def __init__(self, j: int = 2):
        super().__init__()
        self.compress = nn.Linear(AUDIO_SHAPE[0] * AUDIO_SHAPE[1], FEATURE_DIM)
        self.tcn = TemporalSmoother(j)

    def frame_features(self, audio: torch.Tensor) -> torch.Tensor:
        if tuple(audio.shape[-2:]) != AUDIO_SHAPE:
            raise ValueError(f"audio windows must be 16x29, got {tuple(audio.shape[-2:])}")
        return self.compress(audio.reshape(*audio.shape[:-2], -1))

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        if audio.shape[0] < 1:
            raise ValueError("audio sequence is empty")
        return self.tcn(self.frame_features(audio))

    def at(self, audio: torch.Tensor, t: int) -> torch.Tensor:
        T = audio.shape[0]
        idx = [min(max(i, 0), T - 1) for i in range(t - self.tcn.j, t + self.tcn.j + 1)]
        return self.tcn.smooth_window(self.frame_features(audio[idx]))


def encode_audio(branch: AudioBranch, audio: torch.Tensor) -> torch.Tensor:
    return branch(audio)


class RegionAttention(nn.Module):
    """sigmoid(MLP(encoding)) gate multiplied into a control feature."""

    def __init__(self, in_dim: int, hidden: int = 64, dim: int = FEATURE_DIM):
        super().__init__()
        self.mlp = MLP([in_dim, hidden, dim])

    def attention(self, encoding: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mlp(encoding))

    def forward(self, encoding: torch.Tensor, feature: torch.Tensor) -> torch.Tensor:
        return self.attention(encoding) * feature


def region_enhance(
    mu: torch.Tensor, feature: torch.Tensor, encoder: TriPlaneEncoder, attention: RegionAttention
) -> torch.Tensor:
    """Region-aware feature for each position: ``sigmoid(MLP(H(mu))) * feature``."""
    return attention(encoder(mu), feature)
