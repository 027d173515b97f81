"""Few-shot deformable 3D Gaussian head fields on the CPU.

Static Gaussian fields are deformed by a shared, motion-driven General Field
plus per-identity, audio-driven Individual Fields, splatted by a
differentiable rasterizer and sharpened by a small residual refiner.
"""

from .deform import FieldStack, combine_apply, deform_frame, frame_deltas
from .field import CameraPose, GaussianField, init_field, orbit_camera
from .raster import RasterSettings, render

__version__ = "0.1.0"

__all__ = [
    "CameraPose", "FieldStack", "GaussianField", "RasterSettings", "combine_apply", "deform_frame",
    "frame_deltas", "init_field", "orbit_camera", "render",
]
