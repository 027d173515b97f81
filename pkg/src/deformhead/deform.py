"""General and Individual deformation fields and how their deltas deform a static field.

Identity indices are zero-based in this API.
"""

from __future__ import annotations

from dataclasses import dataclass, fields as dc_fields
from typing import Optional

import torch
from torch import nn

from .encoders import MLP, TriPlaneEncoder
from .field import Activated, GaussianField, MOUTH, activate
from .signals import FEATURE_DIM, AudioBranch, MotionBranch, RegionAttention

# deformed-attribute sets for the face region
ATTRS_MU = "mu"
ATTRS_MU_ROT_SCALE = "mu_rot_scale"
ATTRS_ALL = "all"
FACE_OUT = {ATTRS_MU: 3, ATTRS_MU_ROT_SCALE: 10, ATTRS_ALL: 14}

ROUTINGS = ("dual", "audio", "motion")
FIELD_USE = ("both", "general", "individual")


class InvalidIdentityError(IndexError):
    pass


@dataclass
class DeformationDelta:
    """Per-primitive deltas in raw parameter space."""

    d_mu: torch.Tensor  # (P, 3)
    d_quat: torch.Tensor  # (P, 4)
    d_scale: torch.Tensor  # (P, 3)
    d_opacity: torch.Tensor  # (P,)
    d_color: torch.Tensor  # (P, 3)

    @classmethod
    def zeros(cls, n: int, dtype=torch.float32) -> "DeformationDelta":
        z = lambda *s: torch.zeros(*s, dtype=dtype)  # noqa: E731
        return cls(z(n, 3), z(n, 4), z(n, 3), z(n), z(n, 3))

    def __add__(self, other: "DeformationDelta") -> "DeformationDelta":
        return DeformationDelta(*(getattr(self, f.name) + getattr(other, f.name) for f in dc_fields(self)))

    def __neg__(self) -> "DeformationDelta":
        return DeformationDelta(*(-getattr(self, f.name) for f in dc_fields(self)))

    def __len__(self) -> int:
        return self.d_mu.shape[0]

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(getattr(self, f.name)).all()) for f in dc_fields(self))


class DeformField(nn.Module):
    """One deformation field: tri-plane encoder, region attention over the
    control feature, and separate face / mouth decoders (mouth emits d_mu only).
    Output layers start at zero so a fresh field predicts no deformation."""

    def __init__(self, bounds: torch.Tensor, attrs: str = ATTRS_MU_ROT_SCALE, encoder_kwargs: Optional[dict] = None,
                 hidden: int = 64, generator: Optional[torch.Generator] = None):
        super().__init__()
        if attrs not in FACE_OUT:
            raise ValueError(f"unknown deformed-attribute set {attrs!r}")
        self.attrs = attrs
        self.encoder = TriPlaneEncoder(bounds, generator=generator, **(encoder_kwargs or {}))
        enc = self.encoder.out_dim
        self.attention = RegionAttention(enc, hidden)
        self.face_decoder = MLP([enc + FEATURE_DIM, hidden, hidden, FACE_OUT[attrs]], zero_last=True)
        self.mouth_decoder = MLP([enc + FEATURE_DIM, hidden, hidden, 3], zero_last=True)

    def forward(self, mu: torch.Tensor, region: torch.Tensor, feature: torch.Tensor) -> DeformationDelta:
        h = self.encoder(mu)
        enhanced = self.attention(h, feature.expand(mu.shape[0], -1))
        x = torch.cat([h, enhanced], dim=-1)
        face = self.face_decoder(x)
        mouth = self.mouth_decoder(x)
        is_mouth = (region == MOUTH).unsqueeze(-1)
        n = mu.shape[0]
        zeros = mu.new_zeros
        d_mu = torch.where(is_mouth, mouth, face[:, :3])
        d_quat, d_scale, d_opacity, d_color = zeros(n, 4), zeros(n, 3), zeros(n), zeros(n, 3)
        if self.attrs != ATTRS_MU:
            d_quat = torch.where(is_mouth, 0.0, face[:, 3:7])
            d_scale = torch.where(is_mouth, 0.0, face[:, 7:10])
        if self.attrs == ATTRS_ALL:
            d_opacity = torch.where(is_mouth[:, 0], 0.0, face[:, 10])
            d_color = torch.where(is_mouth, 0.0, face[:, 11:14])
        return DeformationDelta(d_mu, d_quat, d_scale, d_opacity, d_color)


class FieldStack(nn.Module):
    """Shared General Field (driven by the motion branch) plus one Individual
    Field per identity (driven by the shared audio branch)."""

    def __init__(
        self,
        bounds: torch.Tensor,
        canonical: torch.Tensor,
        n_identities: int,
        j: int = 2,
        individual_attrs: str = ATTRS_MU_ROT_SCALE,
        routing: str = "dual",
        field_use: str = "both",
        encoder_kwargs: Optional[dict] = None,
        hidden: int = 64,
        seed: int = 0,
    ):
        super().__init__()
        if routing not in ROUTINGS:
            raise ValueError(f"routing must be one of {ROUTINGS}")
        if field_use not in FIELD_USE:
            raise ValueError(f"field_use must be one of {FIELD_USE}")
        gen = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        self.routing = routing
        self.field_use = field_use
        self.encoder_kwargs = dict(encoder_kwargs or {})
        self.hidden = hidden
        self.individual_attrs = individual_attrs
        self.register_buffer("bounds", torch.as_tensor(bounds, dtype=torch.get_default_dtype()).clone())
        self.motion = MotionBranch(canonical, j)
        self.audio = AudioBranch(j)
        self.general = DeformField(bounds, ATTRS_MU_ROT_SCALE, self.encoder_kwargs, hidden, gen)
        self.individuals = nn.ModuleList(
            DeformField(bounds, individual_attrs, self.encoder_kwargs, hidden, gen) for _ in range(n_identities)
        )

    @property
    def n_identities(self) -> int:
        return len(self.individuals)

    def new_individual(self, seed: int = 0) -> DeformField:
        gen = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        f = DeformField(self.bounds, self.individual_attrs, self.encoder_kwargs, self.hidden, gen)
        return f.to(self.bounds.dtype)

    def individual(self, k: int) -> DeformField:
        if not 0 <= k < len(self.individuals):
            raise InvalidIdentityError(f"identity {k} not in [0, {len(self.individuals)})")
        return self.individuals[k]

    def general_feature(self, f_motion: torch.Tensor, f_audio: torch.Tensor) -> torch.Tensor:
        return f_audio if self.routing == "audio" else f_motion

    def individual_feature(self, f_motion: torch.Tensor, f_audio: torch.Tensor) -> torch.Tensor:
        return f_motion if self.routing == "motion" else f_audio


def general_deform(stack: FieldStack, mu: torch.Tensor, region: torch.Tensor, f_motion: torch.Tensor) -> DeformationDelta:
    return stack.general(mu, region, f_motion)


def individual_deform(stack: FieldStack, k: int, mu: torch.Tensor, region: torch.Tensor, f_audio: torch.Tensor) -> DeformationDelta:
    return stack.individual(k)(mu, region, f_audio)


def combine_apply(field: GaussianField, delta_g: DeformationDelta, delta_i: DeformationDelta) -> Activated:
    """Deform a static field by ``delta_g + delta_i`` in raw space, then activate.

    Mouth primitives only take the position delta.
    """
    n = field.count
    if len(delta_g) != n or len(delta_i) != n:
        raise ValueError(f"deltas have {len(delta_g)}/{len(delta_i)} rows for {n} primitives")
    d = delta_g + delta_i
    face = (field.region != MOUTH)
    f1 = face.unsqueeze(-1).to(field.mu.dtype)
    return activate(
        field.mu + d.d_mu,
        field.scale_raw + d.d_scale * f1,
        field.quat_raw + d.d_quat * f1,
        field.opacity_raw + d.d_opacity * face.to(field.mu.dtype),
        field.color_raw + d.d_color * f1,
    )


@dataclass
class FrameDeltas:
    general: DeformationDelta
    individual: DeformationDelta


def frame_deltas(stack: FieldStack, k: Optional[int], field: GaussianField, f_motion: torch.Tensor,
                 f_audio: torch.Tensor, individual: Optional[DeformField] = None) -> FrameDeltas:
    """Both fields' deltas for one frame, honoring routing and field-use switches.

    ``individual`` overrides the stack's k-th Individual Field (adaptation).
    """
    n, dtype = field.count, field.mu.dtype
    mu, region = field.mu, field.region
    if stack.field_use in ("both", "general"):
        dg = general_deform(stack, mu, region, stack.general_feature(f_motion, f_audio))
    else:
        dg = DeformationDelta.zeros(n, dtype)
    if stack.field_use in ("both", "individual") and (k is not None or individual is not None):
        ind = individual if individual is not None else stack.individual(k)
        di = ind(mu, region, stack.individual_feature(f_motion, f_audio))
    else:
        di = DeformationDelta.zeros(n, dtype)
    return FrameDeltas(dg, di)


def deform_frame(stack: FieldStack, k: Optional[int], field: GaussianField, f_motion: torch.Tensor,
                 f_audio: torch.Tensor, individual: Optional[DeformField] = None) -> Activated:
    d = frame_deltas(stack, k, field, f_motion, f_audio, individual)
    return combine_apply(field, d.general, d.individual)
