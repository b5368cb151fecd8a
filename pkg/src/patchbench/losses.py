"""Attack objective: detection confidence, smoothness, and printability.

The total objective is ``l_obj + alpha * l_tv + beta * l_nps``. The
confidence term averages raw objectness over every detection that survives
confidence filtering and NMS, across all classes; class scores are
deliberately not part of it. Smoothness is a pairwise total-variation term
stabilized by a small epsilon inside the square root (pass eps=0 for exact
hand arithmetic). Printability is the mean distance from each pixel to its
nearest color in a fixed printable set.

All three losses run on numpy arrays or torch tensors; torch inputs keep
gradients. Returns are floats for numpy inputs, 0-dim tensors for torch.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .types import DataError, Detection, Hyperparameters, InvariantError, float_value

EPS_TV = 1e-8


def _as_tensor(pixels) -> tuple[torch.Tensor, bool]:
    if isinstance(pixels, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(pixels)), True
    if isinstance(pixels, torch.Tensor):
        return pixels, False
    raise TypeError(f"expected ndarray or tensor, got {type(pixels)!r}")


def objectness_loss(detections: Sequence[Detection]):
    """Mean objectness over surviving detections; 0.0 when there are none.

    Tensor objectness values keep their graph, so the mean is differentiable
    w.r.t. whatever produced the scores.
    """
    if not detections:
        return 0.0
    total = None
    for d in detections:
        v = d.objectness
        fv = float_value(v)
        if not 0.0 <= fv <= 1.0:
            raise InvariantError(f"objectness {fv} outside [0, 1]")
        total = v if total is None else total + v
    return total / len(detections)


def tv_loss(pixels, eps: float = EPS_TV):
    """Pairwise total variation, summed over channels, normalized by H*W.

    Each interior cell contributes sqrt(dv^2 + dh^2 + eps) where dv/dh are
    the downward and rightward neighbor differences. A constant patch scores
    exactly (H-1)(W-1)*C*sqrt(eps)/(H*W).
    """
    t, was_numpy = _as_tensor(pixels)
    if t.ndim != 3:
        raise InvariantError(f"expected (H, W, C) pixels, got shape {tuple(t.shape)}")
    h, w = t.shape[0], t.shape[1]
    if h < 2 or w < 2:
        raise InvariantError(f"patch {h}x{w} too small for total variation (need >= 2x2)")
    if eps < 0:
        raise InvariantError(f"eps {eps} must be >= 0")
    dv = t[1:, :-1, :] - t[:-1, :-1, :]
    dh = t[:-1, 1:, :] - t[:-1, :-1, :]
    total = torch.sqrt(dv * dv + dh * dh + eps).sum() / (h * w)
    return float(total) if was_numpy else total


@dataclass(frozen=True)
class PrintableColorSet:
    """Reference RGB colors reproducible by the target printer, in [0, 1]."""

    colors: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.colors, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 3 or c.shape[0] == 0:
            raise InvariantError(f"expected nonempty (K, 3) color array, got {c.shape}")
        if not np.isfinite(c).all() or c.min() < 0 or c.max() > 1:
            raise InvariantError("printable colors must be finite and in [0, 1]")
        object.__setattr__(self, "colors", c)

    def __len__(self) -> int:
        return self.colors.shape[0]

    @classmethod
    def from_file(cls, path) -> "PrintableColorSet":
        """Parse one 'r g b' triple per line; blank and '#' lines skipped."""
        rows = []
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
                try:
                    rows.append([float(v) for v in parts])
                except ValueError as e:
                    raise DataError(f"{path}:{lineno}: {e}") from e
        if not rows:
            raise DataError(f"{path}: no colors found")
        return cls(colors=np.array(rows, dtype=np.float64))

    @classmethod
    def default(cls) -> "PrintableColorSet":
        ref = importlib.resources.files("patchbench") / "data" / "printable_colors.txt"
        with importlib.resources.as_file(ref) as path:
            return cls.from_file(path)


def nps_loss(pixels, colors: PrintableColorSet):
    """Mean over pixels of the Euclidean distance to the nearest color.

    Exactly 0 when every pixel sits on a reference color. The gradient at a
    zero-distance pixel is taken as 0 (the distance is not smooth there).
    """
    t, was_numpy = _as_tensor(pixels)
    if t.ndim != 3 or t.shape[2] != 3:
        raise InvariantError(f"expected (H, W, 3) pixels, got shape {tuple(t.shape)}")
    h, w = t.shape[0], t.shape[1]
    c = torch.from_numpy(colors.colors).to(t.dtype)
    flat = t.reshape(-1, 3)
    sq = ((flat.unsqueeze(1) - c.unsqueeze(0)) ** 2).sum(dim=2)
    safe = torch.sqrt(torch.clamp(sq, min=1e-30))
    dist = torch.where(sq > 0, safe, torch.zeros_like(safe))
    total = dist.min(dim=1).values.sum() / (h * w)
    return float(total) if was_numpy else total


def total_loss(l_obj, l_tv, l_nps, h: Hyperparameters):
    """Weighted sum ``l_obj + alpha * l_tv + beta * l_nps``."""
    return l_obj + h.alpha * l_tv + h.beta * l_nps


@dataclass(frozen=True)
class LossBreakdown:
    """One training step's loss components, detached to floats."""

    l_obj: float
    l_tv: float
    l_nps: float
    total: float
    n_detections: int

    def __post_init__(self):
        for name in ("l_obj", "l_tv", "l_nps", "total"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise InvariantError(f"{name}={v} is not finite")
            if v < 0:
                raise InvariantError(f"{name}={v} is negative")
        if self.n_detections < 0:
            raise InvariantError(f"n_detections={self.n_detections} is negative")

    @classmethod
    def from_components(cls, l_obj, l_tv, l_nps, h: Hyperparameters,
                        n_detections: int) -> "LossBreakdown":
        lo, lt, ln = float_value(l_obj), float_value(l_tv), float_value(l_nps)
        return cls(l_obj=lo, l_tv=lt, l_nps=ln,
                   total=lo + h.alpha * lt + h.beta * ln,
                   n_detections=n_detections)
