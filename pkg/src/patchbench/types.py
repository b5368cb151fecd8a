"""Shared domain types and numeric conventions.

Pixel values are floats in [0, 1] everywhere in the pipeline; conversion to
8-bit happens only at file I/O. Bounding boxes use the corner convention
(x1, y1, x2, y2) with x running along columns and y along rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

DEFAULT_PATCH_RESOLUTION = 50
DEFAULT_TARGET_CLASS = "aircraft"


class PatchBenchError(Exception):
    """Base class for all toolkit errors."""


class InvariantError(PatchBenchError):
    """A domain-type invariant was violated."""


class ConfigError(PatchBenchError):
    """Bad, unknown, or out-of-range run configuration."""


class DataError(PatchBenchError):
    """Unreadable or malformed dataset / artifact files."""


class NumericError(PatchBenchError):
    """Numeric failure (NaN/Inf) during optimization."""


@dataclass
class Patch:
    """Optimizable pixel grid: (H, W, 3) float array in [0, 1].

    The patch is the artifact under training. It is square by default and
    must be at least 2x2 so the smoothness loss has neighboring pixels.
    """

    pixels: np.ndarray
    id: str = "patch"

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, corners (x1, y1) < (x2, y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InvariantError(f"box coordinate {name}={v!r} is not finite")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvariantError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2}): "
                "requires x1 < x2 and y1 < y2"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


# During patch training the surviving objectness values carry gradients, so
# this field may hold a 0-dim torch tensor instead of a plain float.
FloatLike = Union[float, "object"]


def float_value(v) -> float:
    """Plain float of a FloatLike, detaching any autograd graph first."""
    detach = getattr(v, "detach", None)
    return float(detach()) if detach is not None else float(v)


@dataclass
class Detection:
    """One detector output: box plus objectness and per-class scores."""

    box: BoundingBox
    objectness: FloatLike
    class_scores: dict[str, float]

    def __post_init__(self):
        v = float_value(self.objectness)
        if not (0.0 <= v <= 1.0):
            raise InvariantError(f"objectness {v} outside [0, 1]")
        for name, s in self.class_scores.items():
            if not (0.0 <= float(s) <= 1.0):
                raise InvariantError(f"class score {name}={s} outside [0, 1]")

    @property
    def top_class(self) -> str:
        return max(self.class_scores, key=self.class_scores.get)


@dataclass
class SceneImage:
    """Input image, (H, W, 3) float in [0, 1], with ground-truth boxes."""

    pixels: np.ndarray
    annotations: list[tuple[str, BoundingBox]] = field(default_factory=list)
    image_id: str = ""

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def boxes_of_class(self, class_name: str) -> list[BoundingBox]:
        return [b for c, b in self.annotations if c == class_name]

    def validate(self) -> "SceneImage":
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise InvariantError(f"scene pixels must be (H, W, 3), got {self.pixels.shape}")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise InvariantError(f"scene pixel values outside [0, 1]: min={lo}, max={hi}")
        for cls, box in self.annotations:
            if box.x1 < 0 or box.y1 < 0 or box.x2 > self.width or box.y2 > self.height:
                raise InvariantError(
                    f"annotation {cls} {box} exceeds image bounds {self.width}x{self.height}"
                )
        return self


ON_TARGET = "on_target"
OUTSIDE_TARGET = "outside_target"


@dataclass(frozen=True)
class PlacementSpec:
    """Where the patch goes: centered on targets, or above them.

    r_s is the patch/target area ratio used on-target; r_d is the ratio of
    target height to the vertical offset used outside-target.
    """

    mode: str = ON_TARGET
    r_s: float = 0.2
    r_d: float = 1.0

    def __post_init__(self):
        if self.mode not in (ON_TARGET, OUTSIDE_TARGET):
            raise InvariantError(f"unknown placement mode {self.mode!r}")
        if not (0.0 < self.r_s <= 1.0):
            raise InvariantError(f"r_s={self.r_s} outside (0, 1]")
        if not self.r_d > 0.0:
            raise InvariantError(f"r_d={self.r_d} must be > 0")


@dataclass(frozen=True)
class Hyperparameters:
    """Loss weights, step size, schedule, and detection thresholds."""

    alpha: float = 2.5       # smoothness-loss weight
    beta: float = 0.01       # printability-loss weight
    eta: float = 0.03        # learning rate
    n_epochs: int = 600
    n_iterations: int | None = None  # per-epoch; None = dataset size / batch size
    iou_threshold: float = 0.45
    conf_threshold: float = 0.4

    def __post_init__(self):
        for name in ("alpha", "beta", "eta"):
            if not getattr(self, name) > 0:
                raise InvariantError(f"{name}={getattr(self, name)} must be > 0")
        for name in ("iou_threshold", "conf_threshold"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise InvariantError(f"{name}={v} outside (0, 1)")
        if self.n_epochs < 1:
            raise InvariantError(f"n_epochs={self.n_epochs} must be >= 1")


def validate_patch(p: Patch) -> Patch:
    """Check all Patch invariants; return the patch unchanged if they hold."""
    px = p.pixels
    if px.ndim != 3 or px.shape[2] != 3:
        raise InvariantError(f"patch pixels must be (H, W, 3), got shape {px.shape}")
    if px.shape[0] < 2 or px.shape[1] < 2:
        raise InvariantError(
            f"patch must be at least 2x2 (smoothness loss needs neighbors), got "
            f"{px.shape[0]}x{px.shape[1]}"
        )
    bad = ~np.isfinite(px)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise InvariantError(f"non-finite patch value at index {idx}")
    out = (px < 0.0) | (px > 1.0)
    if out.any():
        idx = tuple(int(i) for i in np.argwhere(out)[0])
        raise InvariantError(f"patch value {px[idx]} at index {idx} outside [0, 1]")
    return p


def clamp_patch(p: Patch) -> Patch:
    """Map every pixel to [0, 1]. Idempotent; rejects non-finite values."""
    if not np.isfinite(p.pixels).all():
        idx = tuple(int(i) for i in np.argwhere(~np.isfinite(p.pixels))[0])
        raise NumericError(f"cannot clamp non-finite patch value at index {idx}")
    return Patch(pixels=np.clip(p.pixels, 0.0, 1.0), id=p.id)
