"""Scale-adaptive patch placement and differentiable compositing.

Placement computes where the patch goes and how big it is, from a target
box and a PlacementSpec. Compositing pastes a resampled patch copy into the
scene through a binary mask: ``x* = (1 - M) * x + M * p``.

One rasterization rule is used everywhere: a box of continuous side ``size``
centered at ``c`` covers integer cells ``round(c - size/2)`` inclusive
through ``round(c - size/2) + round(size) - 1``, with round = half-up.

Functions accept numpy arrays or torch tensors for pixel data. Output pixel
type follows the scene input; the torch path is differentiable with respect
to the patch pixels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .types import BoundingBox, InvariantError, Patch, PlacementSpec, ON_TARGET


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _as_pixels(p) -> tuple[torch.Tensor, bool]:
    """Normalize Patch / ndarray / tensor to an (H, W, C) tensor.

    Returns the tensor and whether the input was numpy-side (so callers can
    convert back).
    """
    if isinstance(p, Patch):
        p = p.pixels
    if isinstance(p, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(p)), True
    if isinstance(p, torch.Tensor):
        return p, False
    raise TypeError(f"expected Patch, ndarray, or tensor, got {type(p)!r}")


def center_on_target(b: BoundingBox) -> tuple[float, float]:
    """Patch center for on-target placement: the box center."""
    return ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0)


def patch_size_on_target(b: BoundingBox, r_s: float) -> tuple[float, float]:
    """Square patch side length preserving patch/target area ratio r_s."""
    if not r_s > 0:
        raise InvariantError(f"area ratio r_s={r_s} must be > 0")
    side = math.sqrt(r_s * b.width * b.height)
    return (side, side)


def center_outside_target(b: BoundingBox, r_d: float) -> tuple[float, float]:
    """Patch center above the target at the scale-adaptive distance.

    The offset d = (y2 - y1) / r_d is subtracted from the box center's y,
    so the patch sits above the target. Off-image centers are allowed;
    compositing clips.
    """
    if not r_d > 0:
        raise InvariantError(f"distance ratio r_d={r_d} must be > 0")
    d = (b.y2 - b.y1) / r_d
    cx, cy = center_on_target(b)
    return (cx, cy - d)


def plan_placement(b: BoundingBox, spec: PlacementSpec) -> tuple[tuple[float, float], float]:
    """Continuous (center, side) for one target box under a placement spec."""
    if spec.mode == ON_TARGET:
        center = center_on_target(b)
    else:
        center = center_outside_target(b, spec.r_d)
    side, _ = patch_size_on_target(b, spec.r_s)
    return center, side


@dataclass
class Mask:
    """Binary paste mask over the full image plus its raster box.

    ``origin`` is the unclipped top-left (row, col) of the raster box and
    ``size_px`` its side length; ``region`` is the image-clipped half-open
    box (r0, c0, r1, c1), or None when the raster box misses the image
    entirely.
    """

    values: np.ndarray
    origin: tuple[int, int]
    size_px: int
    region: tuple[int, int, int, int] | None

    @property
    def empty(self) -> bool:
        return self.region is None

    def area(self) -> int:
        return int(self.values.sum())


@dataclass
class PlacementResult:
    """One planned placement: continuous center/size plus its raster mask."""

    center: tuple[float, float]
    size: tuple[float, float]
    mask: Mask


def build_mask(image_shape: tuple[int, ...], center: tuple[float, float], size: float) -> Mask:
    """Rasterize the size-by-size box at ``center`` into a binary mask.

    The raster box is clipped to image bounds; a box fully outside yields an
    all-zero mask and a warning, not an error.
    """
    if not size > 0:
        raise InvariantError(f"mask size {size} must be > 0")
    h, w = int(image_shape[0]), int(image_shape[1])
    n = _round_half_up(size)
    cx, cy = center
    r0 = _round_half_up(cy - size / 2.0)
    c0 = _round_half_up(cx - size / 2.0)
    values = np.zeros((h, w), dtype=np.float32)
    rr0, rr1 = max(r0, 0), min(r0 + n, h)
    cc0, cc1 = max(c0, 0), min(c0 + n, w)
    if n <= 0 or rr0 >= rr1 or cc0 >= cc1:
        warnings.warn(
            f"mask region (origin=({r0}, {c0}), size={n}) lies outside the "
            f"{h}x{w} image; nothing will be pasted",
            stacklevel=2,
        )
        return Mask(values=values, origin=(r0, c0), size_px=n, region=None)
    values[rr0:rr1, cc0:cc1] = 1.0
    return Mask(values=values, origin=(r0, c0), size_px=n, region=(rr0, cc0, rr1, cc1))


def resample_patch(pixels, n: int, mode: str = "bilinear"):
    """Resize (H, W, C) patch pixels to (n, n, C).

    Bilinear is differentiable; nearest gives exact arithmetic for tests.
    At n == H == W both modes are the identity.
    """
    t, was_numpy = _as_pixels(pixels)
    if n < 1:
        raise InvariantError(f"resample size {n} must be >= 1")
    if t.shape[0] == n and t.shape[1] == n:
        return pixels if not isinstance(pixels, Patch) else t.numpy()
    chw = t.permute(2, 0, 1).unsqueeze(0)
    if mode == "bilinear":
        out = F.interpolate(chw, size=(n, n), mode="bilinear", align_corners=False)
    elif mode == "nearest":
        out = F.interpolate(chw, size=(n, n), mode="nearest-exact")
    else:
        raise InvariantError(f"unknown resampling mode {mode!r}")
    out = out.squeeze(0).permute(1, 2, 0)
    return out.numpy() if was_numpy else out


def apply_footprint(mask: Mask, footprint: np.ndarray) -> Mask:
    """AND a patch-space validity footprint into a raster mask.

    The footprint (e.g. the non-padding area of a rotated patch) is
    nearest-resampled to the mask's raster box, so padding cells never
    reach the scene.
    """
    if mask.empty:
        return mask
    n = mask.size_px
    fp = torch.from_numpy(np.ascontiguousarray(footprint, dtype=np.float32))
    fp = fp.unsqueeze(0).unsqueeze(0)
    fp_n = F.interpolate(fp, size=(n, n), mode="nearest-exact").squeeze(0).squeeze(0).numpy()
    r0, c0, r1, c1 = mask.region
    pr0, pc0 = r0 - mask.origin[0], c0 - mask.origin[1]
    values = mask.values.copy()
    values[r0:r1, c0:c1] *= fp_n[pr0 : pr0 + (r1 - r0), pc0 : pc0 + (c1 - c0)]
    return Mask(values=values, origin=mask.origin, size_px=n, region=mask.region)


def composite(x, p_t, mask: Mask, center=None, size: float | None = None, *,
              resample: str = "bilinear"):
    """Paste the patch into the scene through the mask.

    The patch is resampled to the mask's raster size first, then
    ``x* = (1 - M) * x + M * p``. Pixels where the mask is 0 are
    bit-identical to the input; gradients w.r.t. masked patch pixels pass
    through unscaled.
    """
    x_t, x_numpy = _as_pixels(x)
    p_src, p_numpy = _as_pixels(p_t)
    if mask.empty:
        return x
    n = mask.size_px
    if size is not None and _round_half_up(size) != n:
        raise InvariantError(
            f"requested size {size} rasterizes to {_round_half_up(size)} but mask "
            f"raster size is {n}"
        )
    p_rs, _ = _as_pixels(resample_patch(p_src, n, mode=resample))
    if p_rs.shape[0] != n or p_rs.shape[1] != n or p_rs.shape[2] != x_t.shape[2]:
        raise InvariantError(
            f"resampled patch shape {tuple(p_rs.shape)} does not match paste "
            f"size {n}x{n}x{x_t.shape[2]}"
        )
    r0, c0, r1, c1 = mask.region
    pr0, pc0 = r0 - mask.origin[0], c0 - mask.origin[1]
    p_crop = p_rs[pr0 : pr0 + (r1 - r0), pc0 : pc0 + (c1 - c0)]

    dtype = torch.promote_types(x_t.dtype, p_crop.dtype)
    out = x_t.to(dtype).clone()
    m = torch.from_numpy(mask.values[r0:r1, c0:c1] > 0.5).unsqueeze(-1)
    out[r0:r1, c0:c1] = torch.where(m, p_crop.to(dtype), out[r0:r1, c0:c1])
    if x_numpy and p_numpy:
        return out.numpy()
    return out


def place_all(x, p, spec: PlacementSpec, boxes: list[BoundingBox], *,
              footprint: np.ndarray | None = None, scale: float = 1.0,
              resample: str = "bilinear"):
    """Composite one resampled patch copy per target box, sequentially.

    Later composites overwrite earlier ones on overlap. ``footprint`` and
    ``scale`` fold in a transformed patch's validity mask and size jitter.
    An empty box list returns the scene unchanged, with a warning.
    """
    if not boxes:
        warnings.warn("place_all called with zero boxes; scene returned unchanged",
                      stacklevel=2)
        return x
    out = x
    for box in boxes:
        center, side = plan_placement(box, spec)
        side = side * scale
        mask = build_mask(_as_pixels(out)[0].shape, center, side)
        if footprint is not None:
            mask = apply_footprint(mask, footprint)
        out = composite(out, p, mask, center, side, resample=resample)
    return out
