"""Synthetic aerial scenes: textured ground, aircraft glyphs, distractors.

Scenes are small (default 96x96) so a full attack-and-benchmark cycle runs
on a laptop CPU. Aircraft are drawn as cross-shaped glyphs whose rendered
mask touches all four edges of its cell, distractors as rings; annotations
are computed from the rendered nonzero bounds, so ground truth is exact by
construction rather than by bookkeeping.

Aircraft centers are confined to the lower part of the frame, which leaves
sky-side headroom for above-target patch placement experiments.

Generation is fully deterministic: every random draw comes from a Generator
seeded by (dataset seed, texture seed, image index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .types import BoundingBox, InvariantError, SceneImage


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Knobs for the scene generator.

    ``center_band_y`` bounds glyph centers as fractions of image height;
    the default keeps targets low in the frame so an above-target patch
    still lands inside the image.
    """

    image_size: int = 96
    targets_per_image: tuple[int, int] = (1, 3)
    distractors_per_image: tuple[int, int] = (0, 2)
    glyph_scale_range: tuple[int, int] = (14, 26)
    center_band_x: tuple[float, float] = (0.10, 0.90)
    center_band_y: tuple[float, float] = (0.45, 0.88)
    background_texture_seed: int = 0
    target_class: str = "aircraft"
    distractor_class: str = "distractor"

    def __post_init__(self):
        if self.image_size < 32:
            raise InvariantError(f"image_size {self.image_size} too small (need >= 32)")
        lo, hi = self.targets_per_image
        if not 0 <= lo <= hi:
            raise InvariantError(f"bad targets_per_image range {self.targets_per_image}")
        dlo, dhi = self.distractors_per_image
        if not 0 <= dlo <= dhi:
            raise InvariantError(f"bad distractors_per_image range {self.distractors_per_image}")
        glo, ghi = self.glyph_scale_range
        if not 6 <= glo <= ghi <= self.image_size // 2:
            raise InvariantError(
                f"glyph_scale_range {self.glyph_scale_range} must fit in "
                f"[6, {self.image_size // 2}]")


def _aircraft_mask(g: int) -> np.ndarray:
    """Aircraft glyph: bright diamond body at the center, thin cross arms.

    The body carries most of the class evidence and fits under a centered
    patch of ~0.45x the cell side; the 1px fuselage/wing lines reach all
    four edges so the rendered bounds equal the cell exactly.
    """
    m = np.zeros((g, g), dtype=bool)
    mid = g // 2
    c = (g - 1) / 2.0
    yy, xx = np.mgrid[0:g, 0:g]
    m |= (np.abs(yy - c) + np.abs(xx - c)) <= g * 0.18  # body
    m[:, mid] = True  # fuselage, touches top and bottom
    m[mid, :] = True  # wings, touch left and right
    return m


def _ring_mask(g: int) -> np.ndarray:
    """Thin annulus touching the cell at the four cardinal points."""
    c = (g - 1) / 2.0
    yy, xx = np.mgrid[0:g, 0:g]
    r = np.sqrt((yy - c) ** 2 + (xx - c) ** 2)
    thickness = max(1.4, g * 0.09)
    return (r <= c + 0.05) & (r >= c - thickness)


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.0, 1.0, size=(size, size))
    smooth = gaussian_filter(base, sigma=size / 12.0)
    lo, hi = smooth.min(), smooth.max()
    smooth = (smooth - lo) / max(hi - lo, 1e-9)
    img = np.empty((size, size, 3), dtype=np.float64)
    # muted earth tones with a little channel separation
    img[:, :, 0] = 0.16 + 0.22 * smooth
    img[:, :, 1] = 0.18 + 0.24 * smooth
    img[:, :, 2] = 0.14 + 0.20 * smooth
    img += rng.uniform(-0.02, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _boxes_clash(b: tuple[int, int, int, int], others: list[tuple[int, int, int, int]],
                 pad: int = 2) -> bool:
    r0, c0, r1, c1 = b
    for (or0, oc0, or1, oc1) in others:
        if r0 < or1 + pad and or0 < r1 + pad and c0 < oc1 + pad and oc0 < c1 + pad:
            return True
    return False


def _render_glyph(img: np.ndarray, mask: np.ndarray, origin: tuple[int, int],
                  color: np.ndarray, rng: np.random.Generator) -> BoundingBox:
    """Paint the glyph and return its exact rendered bounding box."""
    r0, c0 = origin
    g = mask.shape[0]
    patch = img[r0:r0 + g, c0:c0 + g]
    texture = np.clip(color + rng.uniform(-0.04, 0.04, size=(g, g, 3)), 0.0, 1.0)
    patch[mask] = texture[mask]
    rows, cols = np.nonzero(mask)
    return BoundingBox(
        x1=float(c0 + cols.min()), y1=float(r0 + rows.min()),
        x2=float(c0 + cols.max() + 1), y2=float(r0 + rows.max() + 1))


def generate_synthetic_dataset(spec: SyntheticSceneSpec, n_images: int,
                               seed: int) -> list[SceneImage]:
    """Deterministic list of annotated scenes for the given seed."""
    if n_images <= 0:
        raise InvariantError(f"n_images {n_images} must be > 0")
    s = spec.image_size
    scenes = []
    for i in range(n_images):
        rng = np.random.default_rng([seed, spec.background_texture_seed, i])
        img = _background(s, rng)
        occupied: list[tuple[int, int, int, int]] = []
        annotations: list[tuple[str, BoundingBox]] = []

        n_targets = int(rng.integers(spec.targets_per_image[0],
                                     spec.targets_per_image[1] + 1))
        n_distract = int(rng.integers(spec.distractors_per_image[0],
                                      spec.distractors_per_image[1] + 1))
        jobs = [(spec.target_class, _aircraft_mask) for _ in range(n_targets)]
        jobs += [(spec.distractor_class, _ring_mask) for _ in range(n_distract)]
        for class_name, mask_fn in jobs:
            placed = False
            for attempt in range(80):
                # crowded frames: fall back to the smallest glyph so the
                # requested target count still fits
                hi = spec.glyph_scale_range[1] if attempt < 25 else spec.glyph_scale_range[0]
                g = int(rng.integers(spec.glyph_scale_range[0], hi + 1))
                cx = rng.uniform(spec.center_band_x[0] * s, spec.center_band_x[1] * s)
                cy = rng.uniform(spec.center_band_y[0] * s, spec.center_band_y[1] * s)
                r0 = int(np.clip(round(cy - g / 2), 1, s - g - 1))
                c0 = int(np.clip(round(cx - g / 2), 1, s - g - 1))
                cell = (r0, c0, r0 + g, c0 + g)
                if _boxes_clash(cell, occupied):
                    continue
                if class_name == spec.target_class:
                    color = np.array([rng.uniform(0.72, 0.90)] * 3)
                    color += rng.uniform(-0.05, 0.05, size=3)
                    color[2] += rng.uniform(0.0, 0.06)  # cold metallic cast
                else:
                    color = np.array([rng.uniform(0.48, 0.66), rng.uniform(0.26, 0.44),
                                      rng.uniform(0.18, 0.36)])
                box = _render_glyph(img, mask_fn(g), (r0, c0), np.clip(color, 0, 1), rng)
                occupied.append(cell)
                annotations.append((class_name, box))
                placed = True
                break
            if not placed and class_name == spec.target_class:
                # crowded frame; a missing distractor is fine, a missing
                # target would starve training, so fail loudly
                raise InvariantError(
                    f"could not place target {len(annotations) + 1} in image {i}; "
                    f"lower targets_per_image or raise image_size")
        scene = SceneImage(pixels=img.astype(np.float32), annotations=annotations,
                           image_id=f"synthetic-{i:05d}")
        scene.validate()
        scenes.append(scene)
    return scenes
