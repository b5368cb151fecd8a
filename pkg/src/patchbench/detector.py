"""Detector adapters, the filtered detection pipeline, and a small
trainable convolutional detector for desk-scale experiments.

Adapters expose a uniform contract: forward an (H, W, 3) image in [0, 1],
get raw candidate boxes with objectness and class scores back. ``detect``
turns raw candidates into final detections via confidence filtering and
greedy NMS. On torch inputs the surviving objectness values keep their
autograd graph (the survivor indices are treated as constants), which is
what lets the patch attack backpropagate through the detector.

Detector weights are meant to be frozen during attacks; the sha256
parameter checksum makes that checkable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .metrics import evaluate_detections, nms
from .types import (
    BoundingBox,
    ConfigError,
    DataError,
    Detection,
    InvariantError,
    PatchBenchError,
    SceneImage,
)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class RawDetections:
    """Pre-NMS candidates: (N, 4) boxes, (N,) objectness, (N, C) class scores."""

    boxes: torch.Tensor
    objectness: torch.Tensor
    class_scores: torch.Tensor
    class_names: tuple[str, ...]

    def __post_init__(self):
        n = self.boxes.shape[0]
        if self.boxes.ndim != 2 or self.boxes.shape[1] != 4:
            raise InvariantError(f"boxes must be (N, 4), got {tuple(self.boxes.shape)}")
        if self.objectness.shape != (n,):
            raise InvariantError(f"objectness must be ({n},), got {tuple(self.objectness.shape)}")
        if self.class_scores.shape != (n, len(self.class_names)):
            raise InvariantError(
                f"class_scores must be ({n}, {len(self.class_names)}), "
                f"got {tuple(self.class_scores.shape)}")


class DetectorAdapter:
    """Contract every detector behind the toolkit satisfies.

    Concrete adapters provide ``id``, ``input_size`` (H, W), ``class_names``,
    ``forward(image) -> RawDetections`` differentiable w.r.t. the image, and
    ``parameter_checksum()``.
    """

    id: str = "base"
    class_names: tuple[str, ...] = ()

    @property
    def input_size(self) -> tuple[int, int]:
        raise NotImplementedError

    def forward(self, image) -> RawDetections:
        raise NotImplementedError

    def parameter_checksum(self) -> str:
        raise NotImplementedError


def detect(adapter, image, conf_threshold: float = 0.4,
           iou_threshold: float = 0.45) -> list[Detection]:
    """Confidence-filter and NMS an adapter's raw output.

    Returns detections sorted by descending objectness. Candidates at
    exactly the confidence threshold survive the filter. The image must
    already match the adapter's input size; resizing is ingestion's job.
    """
    h, w = adapter.input_size
    shape = tuple(image.shape)
    if shape != (h, w, 3):
        raise InvariantError(
            f"image shape {shape} does not match detector '{adapter.id}' "
            f"input size {(h, w, 3)}")
    try:
        raw = adapter.forward(image)
    except PatchBenchError:
        raise
    except Exception as e:
        raise PatchBenchError(f"detector '{adapter.id}' failed on forward: {e}") from e
    obj = raw.objectness.detach().cpu().numpy().astype(np.float64)
    keep = np.flatnonzero(obj >= conf_threshold)
    if keep.size == 0:
        return []
    boxes = raw.boxes.detach().cpu().numpy().astype(np.float64)
    survivors = [int(keep[k]) for k in nms(boxes[keep], obj[keep], iou_threshold)]
    track_grad = raw.objectness.requires_grad
    out = []
    for i in survivors:
        x1, y1, x2, y2 = boxes[i]
        scores = raw.class_scores[i].detach().cpu().numpy()
        out.append(Detection(
            box=BoundingBox(float(x1), float(y1), float(x2), float(y2)),
            objectness=raw.objectness[i] if track_grad else float(obj[i]),
            class_scores={name: float(s) for name, s in zip(raw.class_names, scores)},
        ))
    return out


# --- toy detector -----------------------------------------------------------


def _conv_block(c_in: int, c_out: int, pool: bool) -> list[nn.Module]:
    layers: list[nn.Module] = [nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(inplace=True)]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return layers


class ToyDetector(nn.Module, DetectorAdapter):
    """Single-scale anchor-based detector, around 85k parameters.

    Stride-8 feature grid; each cell predicts one box: sigmoid center
    offsets within the cell, exp size factors on a single square anchor,
    sigmoid objectness, softmax class scores. The receptive field spans
    roughly 54 pixels, so cells see context well past their own box.
    """

    STRIDE = 8

    def __init__(self, input_size: int = 96, class_names: tuple[str, ...] = ("aircraft", "distractor"),
                 anchor: float = 20.0, width_mult: float = 1.0, detector_id: str = "toy"):
        super().__init__()
        if input_size % self.STRIDE != 0:
            raise InvariantError(f"input size {input_size} must be a multiple of {self.STRIDE}")
        self.id = detector_id
        self.class_names = tuple(class_names)
        self.anchor = float(anchor)
        self.width_mult = float(width_mult)
        self._input_size = int(input_size)
        w = lambda c: max(8, int(round(c * width_mult)))
        layers = []
        layers += _conv_block(3, w(16), pool=True)
        layers += _conv_block(w(16), w(32), pool=True)
        layers += _conv_block(w(32), w(48), pool=True)
        layers += _conv_block(w(48), w(64), pool=False)
        # dilated context conv: stretches the receptive field past 70px so
        # cells see the region above their object where off-target patches go
        layers += [nn.Conv2d(w(64), w(64), 3, padding=2, dilation=2), nn.ReLU(inplace=True)]
        self.backbone = nn.Sequential(*layers)
        self.head = nn.Conv2d(w(64), 5 + len(self.class_names), 1)

    @property
    def input_size(self) -> tuple[int, int]:
        return (self._input_size, self._input_size)

    @property
    def grid_size(self) -> int:
        return self._input_size // self.STRIDE

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def head_maps(self, batch: torch.Tensor) -> torch.Tensor:
        """Raw (B, 5 + C, G, G) maps for a (B, 3, S, S) batch."""
        return self.head(self.backbone(batch))

    def forward(self, image) -> RawDetections:
        if isinstance(image, np.ndarray):
            image = torch.from_numpy(np.ascontiguousarray(image))
        if image.shape != (self._input_size, self._input_size, 3):
            raise InvariantError(
                f"image shape {tuple(image.shape)} does not match input size "
                f"{(self._input_size, self._input_size, 3)}")
        x = image.to(torch.float32).permute(2, 0, 1).unsqueeze(0)
        maps = self.head_maps(x)[0]
        g = self.grid_size
        gy, gx = torch.meshgrid(torch.arange(g, dtype=torch.float32),
                                torch.arange(g, dtype=torch.float32), indexing="ij")
        cx = (gx + torch.sigmoid(maps[0])) * self.STRIDE
        cy = (gy + torch.sigmoid(maps[1])) * self.STRIDE
        bw = self.anchor * torch.exp(torch.clamp(maps[2], -4.0, 4.0))
        bh = self.anchor * torch.exp(torch.clamp(maps[3], -4.0, 4.0))
        boxes = torch.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2],
                            dim=-1).reshape(-1, 4)
        objectness = torch.sigmoid(maps[4]).reshape(-1)
        class_scores = torch.softmax(maps[5:], dim=0).reshape(len(self.class_names), -1).T
        return RawDetections(boxes=boxes, objectness=objectness,
                             class_scores=class_scores, class_names=self.class_names)

    def parameter_checksum(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().astype(np.float32).tobytes())
        return h.hexdigest()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def save(self, path) -> None:
        torch.save({
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "arch": {
                "input_size": self._input_size,
                "class_names": list(self.class_names),
                "anchor": self.anchor,
                "width_mult": self.width_mult,
                "detector_id": self.id,
            },
            "state_dict": self.state_dict(),
            "checksum": self.parameter_checksum(),
        }, path)

    @classmethod
    def load(cls, path) -> "ToyDetector":
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as e:
            raise DataError(f"cannot load detector checkpoint {path}: {e}") from e
        version = payload.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise DataError(
                f"detector checkpoint {path} has format version {version}, "
                f"expected {CHECKPOINT_FORMAT_VERSION}")
        arch = payload["arch"]
        det = cls(input_size=arch["input_size"], class_names=tuple(arch["class_names"]),
                  anchor=arch["anchor"], width_mult=arch["width_mult"],
                  detector_id=arch["detector_id"])
        det.load_state_dict(payload["state_dict"])
        if payload.get("checksum") and det.parameter_checksum() != payload["checksum"]:
            raise DataError(f"detector checkpoint {path} failed its checksum")
        det.freeze()
        return det


# --- registry ---------------------------------------------------------------

_LOADERS: dict[str, object] = {}


def register_detector(kind: str, loader) -> None:
    _LOADERS[kind] = loader


def load_detector(kind: str, path) -> DetectorAdapter:
    """Instantiate a registered detector kind from its checkpoint."""
    if kind not in _LOADERS:
        raise ConfigError(
            f"unknown detector kind '{kind}'; registered kinds: {sorted(_LOADERS)}")
    return _LOADERS[kind](path)


register_detector("toy", ToyDetector.load)


# --- training ---------------------------------------------------------------


def _build_targets(det: ToyDetector, scenes: list[SceneImage]) -> list[dict]:
    """Per-scene supervision grids: the cell under each box center is positive."""
    g, stride = det.grid_size, det.STRIDE
    name_to_idx = {n: i for i, n in enumerate(det.class_names)}
    out = []
    for scene in scenes:
        obj = torch.zeros(g, g)
        box_t = torch.zeros(4, g, g)
        cls = torch.zeros(g, g, dtype=torch.long)
        for name, b in scene.annotations:
            if name not in name_to_idx:
                raise DataError(f"annotation class '{name}' unknown to detector "
                                f"classes {det.class_names}")
            cx, cy = b.center
            gx = min(g - 1, max(0, int(cx / stride)))
            gy = min(g - 1, max(0, int(cy / stride)))
            obj[gy, gx] = 1.0
            box_t[0, gy, gx] = cx / stride - gx
            box_t[1, gy, gx] = cy / stride - gy
            box_t[2, gy, gx] = float(np.log(max(b.width, 1e-6) / det.anchor))
            box_t[3, gy, gx] = float(np.log(max(b.height, 1e-6) / det.anchor))
            cls[gy, gx] = name_to_idx[name]
        out.append({"obj": obj, "box": box_t, "cls": cls})
    return out


def _occlude(pixels: np.ndarray, boxes: list[BoundingBox],
             rng: np.random.Generator) -> tuple[np.ndarray, list[int]]:
    """Paste random uniform-noise squares, biased toward target boxes.

    Teaches the detector that plain noise occlusion is not evidence of
    absence, which is exactly what a noise-patch baseline later probes.
    Returns the augmented pixels and the indices of boxes whose center got
    covered, so their supervision can be softened.
    """
    out = pixels.copy()
    h, w = out.shape[:2]
    covered: list[int] = []
    n_squares = int(rng.integers(1, 3))
    for _ in range(n_squares):
        if boxes and rng.uniform() < 0.7:
            k = int(rng.integers(0, len(boxes)))
            b = boxes[k]
            side = max(2, int(round(np.sqrt(rng.uniform(0.12, 0.3) * b.width * b.height))))
            cx = b.center[0] + rng.uniform(-0.15, 0.15) * b.width
            cy = b.center[1] + rng.uniform(-1.15, 0.15) * b.height
        else:
            side = int(rng.integers(4, 14))
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r0 = int(np.clip(round(cy - side / 2), 0, h - 1))
        c0 = int(np.clip(round(cx - side / 2), 0, w - 1))
        r1, c1 = min(r0 + side, h), min(c0 + side, w)
        out[r0:r1, c0:c1] = rng.uniform(0.0, 1.0, size=(r1 - r0, c1 - c0, 3))
        scx, scy = (c0 + c1) / 2.0, (r0 + r1) / 2.0
        for j, b in enumerate(boxes):
            # covering the body or hovering just above it both count: the
            # detector should grow a context pathway an off-target patch
            # can later reach
            bx, by = b.center
            if (b.x1 - 0.25 * b.width <= scx <= b.x2 + 0.25 * b.width
                    and by - 1.4 * b.height <= scy <= b.y2 + 0.2 * b.height):
                covered.append(j)
    return out, covered


def _detection_loss(maps: torch.Tensor, targets: list[dict]) -> torch.Tensor:
    obj_t = torch.stack([t["obj"] for t in targets])
    box_t = torch.stack([t["box"] for t in targets])
    cls_t = torch.stack([t["cls"] for t in targets])
    obj_logit = maps[:, 4]
    pos = obj_t > 0.5
    obj_bce = nn.functional.binary_cross_entropy_with_logits(
        obj_logit, obj_t, reduction="none")
    # background cells get a light weight so the (rare) object cells are not
    # drowned out; object cells stay at weight 1 so confidence tracks the
    # soft occlusion targets instead of saturating
    obj_loss = (obj_bce * torch.where(pos, 1.0, 0.5)).mean()
    loss = obj_loss
    if pos.any():
        xy_pred = torch.sigmoid(maps[:, 0:2])
        wh_pred = maps[:, 2:4]
        pos4 = pos.unsqueeze(1)
        xy_loss = ((xy_pred - box_t[:, 0:2]) ** 2)[pos4.expand_as(xy_pred)].mean()
        wh_loss = ((wh_pred - box_t[:, 2:4]) ** 2)[pos4.expand_as(wh_pred)].mean()
        cls_loss = nn.functional.cross_entropy(
            maps[:, 5:].permute(0, 2, 3, 1)[pos], cls_t[pos])
        loss = loss + 5.0 * (xy_loss + wh_loss) + cls_loss
    return loss


def clean_ap(adapter, scenes, target_class: str, conf_threshold: float = 0.4,
             iou_threshold: float = 0.45) -> float | None:
    """Dataset AP of the target class on unmodified scenes."""
    per_image = []
    for scene in scenes:
        dets = [d for d in detect(adapter, scene.pixels, conf_threshold, iou_threshold)
                if d.top_class == target_class]
        truths = scene.boxes_of_class(target_class)
        per_image.append((dets, truths))
    return evaluate_detections(per_image, iou_threshold).ap


def train_toy_detector(scenes: list[SceneImage], *, seed: int = 0, epochs: int = 40,
                       batch_size: int = 32, lr: float = 1e-3, width_mult: float = 1.0,
                       anchor: float | None = None, occlusion_rate: float = 0.5,
                       occluded_confidence: float = 0.9,
                       val_scenes: list[SceneImage] | None = None,
                       min_clean_ap: float = 0.85, target_class: str = "aircraft",
                       detector_id: str = "toy", progress: bool = False) -> ToyDetector:
    """Train a ToyDetector on synthetic scenes and freeze it.

    Occlusion augmentation pastes random noise squares on and around
    targets so that later noise-patch baselines barely move the AP; an
    occluded object's objectness target is softened to
    ``occluded_confidence``, so occluded detections come out confident
    enough to count but not saturated. Raises when the frozen detector's
    clean AP on the validation scenes misses ``min_clean_ap``; more epochs
    or data is the usual fix.
    """
    if not scenes:
        raise DataError("cannot train a detector on an empty dataset")
    size = scenes[0].pixels.shape[0]
    class_names = sorted({name for s in scenes for name, _ in s.annotations})
    if not class_names:
        raise DataError("training scenes contain no annotations")
    if target_class not in class_names:
        raise DataError(f"target class '{target_class}' absent from data classes {class_names}")
    all_boxes = [b for s in scenes for _, b in s.annotations]
    if anchor is None:
        anchor = float(np.median([np.sqrt(b.width * b.height) for b in all_boxes]))
    torch.manual_seed(seed)
    det = ToyDetector(input_size=size, class_names=tuple(class_names), anchor=anchor,
                      width_mult=width_mult, detector_id=detector_id)
    targets = _build_targets(det, scenes)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(det.parameters(), lr=lr)
    det.train()
    n = len(scenes)
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            imgs = []
            batch_targets = []
            for i in idx:
                px = scenes[i].pixels
                tgt = targets[i]
                if rng.uniform() < occlusion_rate:
                    boxes = [b for _, b in scenes[i].annotations]
                    px, covered = _occlude(px, boxes, rng)
                    if covered:
                        obj = tgt["obj"].clone()
                        g = det.grid_size
                        for j in covered:
                            cx, cy = boxes[j].center
                            gx = min(g - 1, max(0, int(cx / det.STRIDE)))
                            gy = min(g - 1, max(0, int(cy / det.STRIDE)))
                            obj[gy, gx] = occluded_confidence
                        tgt = {"obj": obj, "box": tgt["box"], "cls": tgt["cls"]}
                imgs.append(torch.from_numpy(px.astype(np.float32)).permute(2, 0, 1))
                batch_targets.append(tgt)
            batch = torch.stack(imgs)
            maps = det.head_maps(batch)
            loss = _detection_loss(maps, batch_targets)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(idx)
        if progress:
            print(f"epoch {epoch + 1}/{epochs} loss {epoch_loss / n:.4f}")
    det.freeze()
    check = val_scenes if val_scenes is not None else scenes
    ap = clean_ap(det, check, target_class)
    if ap is None or ap < min_clean_ap:
        raise PatchBenchError(
            f"trained detector reached clean AP {ap if ap is None else round(ap, 4)} "
            f"< required {min_clean_ap}; train longer or add data")
    return det
