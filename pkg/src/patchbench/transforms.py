"""Appearance variation applied to the patch each iteration.

Each (image, box) pair gets one sampled transform: contrast multiply, then
brightness shift, then additive pixel noise, then rotation; scale jitter is
returned as a factor for the placement stage to fold into the paste size.
Output pixels are clamped to [0, 1].

Rotation resamples bilinearly around the patch center with zero padding;
the returned footprint marks which output cells are fully covered by the
source patch, so padding corners can be excluded from the paste mask.
Sines/cosines are snapped near 0 and +-1 so axis-aligned angles produce
exact cell permutations. The identity transform is an exact fixed point
(angle 0 skips resampling entirely).

Parameter sampling and application are separate so the same draw can be
replayed; all randomness comes from an explicit numpy Generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .types import InvariantError, Patch


@dataclass(frozen=True)
class TransformConfig:
    """Sampling ranges for the per-iteration appearance draw.

    Every range set to zero (and contrast pinned to (1, 1)) makes every
    sample the identity.
    """

    noise_amplitude: float = 0.05
    rotation_max_deg: float = 20.0
    scale_jitter: float = 0.1
    brightness_shift: float = 0.1
    contrast_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        if self.noise_amplitude < 0:
            raise InvariantError(f"noise_amplitude {self.noise_amplitude} must be >= 0")
        if not 0 <= self.rotation_max_deg <= 180:
            raise InvariantError(f"rotation_max_deg {self.rotation_max_deg} outside [0, 180]")
        if not 0 <= self.scale_jitter < 1:
            raise InvariantError(f"scale_jitter {self.scale_jitter} outside [0, 1)")
        if self.brightness_shift < 0:
            raise InvariantError(f"brightness_shift {self.brightness_shift} must be >= 0")
        lo, hi = self.contrast_range
        if not 0 < lo <= hi:
            raise InvariantError(f"contrast_range {self.contrast_range} must satisfy 0 < lo <= hi")

    @classmethod
    def identity(cls) -> "TransformConfig":
        return cls(noise_amplitude=0.0, rotation_max_deg=0.0, scale_jitter=0.0,
                   brightness_shift=0.0, contrast_range=(1.0, 1.0))


@dataclass
class TransformParams:
    """One concrete draw. ``noise`` is a full per-pixel field or None."""

    contrast: float = 1.0
    brightness: float = 0.0
    noise: np.ndarray | None = None
    angle_deg: float = 0.0
    scale: float = 1.0

    @classmethod
    def identity(cls) -> "TransformParams":
        return cls()

    @property
    def is_identity(self) -> bool:
        return (self.contrast == 1.0 and self.brightness == 0.0
                and self.noise is None and self.angle_deg == 0.0 and self.scale == 1.0)


def sample_transform(cfg: TransformConfig, rng: np.random.Generator,
                     patch_shape: tuple[int, int]) -> TransformParams:
    """Draw one set of transform parameters. Zero-width ranges draw nothing."""
    h, w = patch_shape
    lo, hi = cfg.contrast_range
    contrast = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    brightness = (float(rng.uniform(-cfg.brightness_shift, cfg.brightness_shift))
                  if cfg.brightness_shift > 0 else 0.0)
    noise = (rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude, size=(h, w, 3))
             if cfg.noise_amplitude > 0 else None)
    angle = (float(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg))
             if cfg.rotation_max_deg > 0 else 0.0)
    scale = (float(rng.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter))
             if cfg.scale_jitter > 0 else 1.0)
    return TransformParams(contrast=contrast, brightness=brightness, noise=noise,
                           angle_deg=angle, scale=scale)


@dataclass
class TransformedPatch:
    """Transformed pixels plus the validity footprint and scale factor."""

    pixels: object  # (H, W, 3) ndarray or tensor, matching the input kind
    footprint: np.ndarray  # (H, W) float32 in {0, 1}
    scale: float


def _snap(v: float) -> float:
    if abs(v) < 1e-12:
        return 0.0
    if abs(abs(v) - 1.0) < 1e-12:
        return math.copysign(1.0, v)
    return v


def _rotation_gather(h: int, w: int, angle_deg: float):
    """Precompute bilinear gather indices/weights for an inverse rotation.

    Positive angles turn the patch content clockwise on screen (y down).
    Returns flat corner indices (4, H*W), corner weights (4, H*W) with
    out-of-source corners zero-weighted, and the coverage map (H*W,).
    """
    theta = math.radians(angle_deg)
    c, s = _snap(math.cos(theta)), _snap(math.sin(theta))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    xr, yr = jj - cx, ii - cy
    # source coordinate = R(-theta) applied to the output offset
    sx = c * xr + s * yr + cx
    sy = -s * xr + c * yr + cy
    x0, y0 = np.floor(sx), np.floor(sy)
    wx, wy = sx - x0, sy - y0
    idx = []
    wgt = []
    for dy, dx, frac in ((0, 0, (1 - wx) * (1 - wy)), (0, 1, wx * (1 - wy)),
                         (1, 0, (1 - wx) * wy), (1, 1, wx * wy)):
        xc, yc = x0 + dx, y0 + dy
        valid = (xc >= 0) & (xc < w) & (yc >= 0) & (yc < h)
        flat = (np.clip(yc, 0, h - 1) * w + np.clip(xc, 0, w - 1)).astype(np.int64)
        idx.append(flat.ravel())
        wgt.append((frac * valid).ravel())
    weights = np.stack(wgt)
    coverage = weights.sum(axis=0)
    return np.stack(idx), weights, coverage


def rotate_patch(pixels, angle_deg: float):
    """Rotate (H, W, C) pixels about the center, zero-padded, bilinear.

    Returns (rotated, footprint); the footprint is 1 where the output cell
    is fully inside the source. Differentiable w.r.t. pixel values on the
    torch path.
    """
    was_numpy = isinstance(pixels, np.ndarray)
    t = torch.from_numpy(np.ascontiguousarray(pixels)) if was_numpy else pixels
    h, w, ch = t.shape
    if angle_deg == 0.0:
        fp = np.ones((h, w), dtype=np.float32)
        return pixels, fp
    idx, wgt, cov = _rotation_gather(h, w, angle_deg)
    flat = t.reshape(h * w, ch)
    out = torch.zeros_like(flat)
    for k in range(4):
        weight = torch.from_numpy(wgt[k]).to(t.dtype).unsqueeze(1)
        out = out + flat[torch.from_numpy(idx[k])] * weight
    out = out.reshape(h, w, ch)
    footprint = (cov >= 1.0 - 1e-6).astype(np.float32).reshape(h, w)
    return (out.numpy() if was_numpy else out), footprint


def apply_transform(p, params: TransformParams) -> TransformedPatch:
    """Contrast, brightness, noise, rotation, then clamp to [0, 1].

    Accepts Patch / ndarray / tensor; pixel output kind matches. The torch
    path keeps gradients flowing to the input pixels (transform parameters
    are constants).
    """
    if isinstance(p, Patch):
        p = p.pixels
    was_numpy = isinstance(p, np.ndarray)
    t = torch.from_numpy(np.ascontiguousarray(p)) if was_numpy else p
    out = t
    if params.contrast != 1.0:
        out = out * params.contrast
    if params.brightness != 0.0:
        out = out + params.brightness
    if params.noise is not None:
        if params.noise.shape != tuple(t.shape):
            raise InvariantError(
                f"noise field shape {params.noise.shape} does not match patch "
                f"shape {tuple(t.shape)}")
        out = out + torch.from_numpy(params.noise).to(out.dtype)
    out, footprint = rotate_patch(out, params.angle_deg)
    out = torch.clamp(out, 0.0, 1.0)
    pixels = out.numpy() if was_numpy else out
    return TransformedPatch(pixels=pixels, footprint=footprint, scale=params.scale)
