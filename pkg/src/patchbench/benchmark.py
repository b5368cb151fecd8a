"""Attack efficacy evaluation: patched AP, transfer matrices, sweeps, reports.

Every AP number in this module flows through evaluate_patched_ap, one code
path shared by clean evaluation (no patch), the seeded-noise baseline, the
white-box/black-box transfer cells, and the dynamics sweep, so results are
comparable cell to cell. Placement always uses ground-truth boxes: the
benchmark measures detection suppression, not placement failure.

Report tables carry AP as percentages; drops are plain differences of the
stored percentage cells (baseline minus patched) and are recomputed on
validation.
"""

import dataclasses
import itertools
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig
from .detector import detect
from .metrics import APResult, PRCurve, PRPoint, evaluate_detections
from .placement import place_all
from .train import train_patch
from .transforms import TransformParams, apply_transform
from .types import (
    DataError,
    InvariantError,
    Patch,
    PlacementSpec,
    SceneImage,
)

REPORT_VERSION = 1
NOISE_ROW = "noise"


# ------------------------------------------------------------ evaluation

@dataclass(frozen=True)
class EvalCondition:
    """Fixed (not sampled) appearance applied to the patch at eval time."""

    angle_deg: float = 0.0
    scale: float = 1.0
    brightness: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self.angle_deg == 0.0 and self.scale == 1.0 and self.brightness == 0.0


def seeded_noise_patch(resolution: int, seed: int = 99) -> np.ndarray:
    """Uniform random pixels; the occlusion-only baseline patch."""
    rng = np.random.default_rng(seed)
    return rng.random((resolution, resolution, 3), dtype=np.float32)


def _as_pixels(patch) -> np.ndarray:
    return patch.pixels if isinstance(patch, Patch) else np.asarray(patch)


def evaluate_patched_ap(adapter, scenes: list[SceneImage], patch,
                        placement: PlacementSpec, *,
                        target_class: str = "aircraft",
                        conf_threshold: float = 0.4,
                        iou_threshold: float = 0.45,
                        condition: EvalCondition = EvalCondition()) -> APResult:
    """Target-class AP over scenes with the patch composited on every target.

    ``patch`` may be a Patch, raw pixels, or None for clean evaluation.
    ``condition`` applies one deterministic transform to the patch before
    placement; the default is the identity, so the standard patched AP and a
    dynamics sweep's identity cell are the same computation.
    """
    pixels = None if patch is None else _as_pixels(patch)
    params = TransformParams(contrast=1.0, brightness=condition.brightness,
                             noise=None, angle_deg=condition.angle_deg,
                             scale=condition.scale)
    per_image = []
    with torch.no_grad():
        for sc in scenes:
            truths = sc.boxes_of_class(target_class)
            x = sc.pixels
            if pixels is not None and truths:
                tp = apply_transform(pixels, params)
                x = place_all(x, tp.pixels, placement, truths,
                              footprint=tp.footprint, scale=tp.scale)
            dets = [d for d in detect(adapter, x, conf_threshold, iou_threshold)
                    if d.top_class == target_class]
            per_image.append((dets, truths))
    return evaluate_detections(per_image, iou_threshold)


def _pct(ap: float | None) -> float | None:
    return None if ap is None else ap * 100.0


# -------------------------------------------------------- transfer matrix

@dataclass(frozen=True)
class MatrixCell:
    """One (row, target) AP entry; unavailable cells keep the run alive."""

    ap_pct: float | None
    status: str = "ok"  # ok | undefined | unavailable
    white_box: bool = False

    def __post_init__(self):
        if self.status not in ("ok", "undefined", "unavailable"):
            raise InvariantError(f"unknown cell status {self.status!r}")
        if self.status == "ok" and self.ap_pct is None:
            raise InvariantError("ok cell needs an AP value")


@dataclass
class TransferMatrix:
    """Rows: noise baseline then patch proxies; columns: target detectors."""

    targets: tuple[str, ...]
    proxies: tuple[str, ...]
    cells: dict[str, dict[str, MatrixCell]]
    placement_mode: str

    def __post_init__(self):
        for row in self.rows:
            row_cells = self.cells.get(row)
            if row_cells is None or set(row_cells) != set(self.targets):
                raise InvariantError(f"matrix row {row!r} incomplete")

    @property
    def rows(self) -> tuple[str, ...]:
        return (NOISE_ROW, *self.proxies)

    def cell(self, row: str, target: str) -> MatrixCell:
        return self.cells[row][target]

    def drop_pct(self, proxy: str, target: str) -> float | None:
        """Noise-baseline AP minus patched AP in the same column."""
        noise, patched = self.cells[NOISE_ROW][target], self.cells[proxy][target]
        if noise.status != "ok" or patched.status != "ok":
            return None
        return noise.ap_pct - patched.ap_pct

    def to_dict(self) -> dict:
        return {
            "targets": list(self.targets),
            "proxies": list(self.proxies),
            "placement_mode": self.placement_mode,
            "cells": {row: {t: dataclasses.asdict(c) for t, c in cols.items()}
                      for row, cols in self.cells.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransferMatrix":
        return cls(
            targets=tuple(d["targets"]),
            proxies=tuple(d["proxies"]),
            placement_mode=d["placement_mode"],
            cells={row: {t: MatrixCell(**c) for t, c in cols.items()}
                   for row, cols in d["cells"].items()},
        )


def run_transfer_benchmark(patches: dict[str, object], adapters: dict[str, object],
                           scenes: list[SceneImage], placement: PlacementSpec, *,
                           target_class: str = "aircraft",
                           conf_threshold: float = 0.4,
                           iou_threshold: float = 0.45,
                           noise_seed: int = 99) -> TransferMatrix:
    """Evaluate every (patch proxy, target detector) pair plus a noise row.

    ``adapters`` maps detector id to an adapter, or to None for a detector
    that could not be loaded; its column is marked unavailable and the run
    continues. The noise row reuses the first patch's resolution so the
    occlusion geometry matches the trained patches exactly.
    """
    if not adapters:
        raise InvariantError("no detectors to benchmark")
    resolution = 50
    for p in patches.values():
        resolution = int(_as_pixels(p).shape[0])
        break
    noise = seeded_noise_patch(resolution, noise_seed)
    rows: dict[str, object] = {NOISE_ROW: noise}
    rows.update(patches)

    cells: dict[str, dict[str, MatrixCell]] = {}
    for row_id, patch in rows.items():
        cols = {}
        for target_id, adapter in adapters.items():
            white = row_id == target_id
            if adapter is None:
                cols[target_id] = MatrixCell(ap_pct=None, status="unavailable",
                                             white_box=white)
                continue
            result = evaluate_patched_ap(
                adapter, scenes, patch, placement, target_class=target_class,
                conf_threshold=conf_threshold, iou_threshold=iou_threshold)
            cols[target_id] = MatrixCell(
                ap_pct=_pct(result.ap),
                status="ok" if result.defined else "undefined",
                white_box=white)
        cells[row_id] = cols
    return TransferMatrix(targets=tuple(adapters), proxies=tuple(patches),
                          cells=cells, placement_mode=placement.mode)


# ---------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepCell:
    condition: EvalCondition
    ap_pct: float | None


@dataclass
class SweepResult:
    """Per-condition patched AP over a transform grid."""

    cells: tuple[SweepCell, ...]

    def identity_cell(self) -> SweepCell:
        for c in self.cells:
            if c.condition.is_identity:
                return c
        raise InvariantError("sweep grid does not contain the identity condition")

    def to_dict(self) -> dict:
        return {"cells": [
            {"angle_deg": c.condition.angle_deg, "scale": c.condition.scale,
             "brightness": c.condition.brightness, "ap_pct": c.ap_pct}
            for c in self.cells]}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepResult":
        return cls(cells=tuple(
            SweepCell(condition=EvalCondition(angle_deg=c["angle_deg"],
                                              scale=c["scale"],
                                              brightness=c["brightness"]),
                      ap_pct=c["ap_pct"])
            for c in d["cells"]))


def run_dynamics_sweep(adapter, scenes: list[SceneImage], patch,
                       placement: PlacementSpec, *,
                       angle_grid=(0.0,), scale_grid=(1.0,), brightness_grid=(0.0,),
                       target_class: str = "aircraft",
                       conf_threshold: float = 0.4,
                       iou_threshold: float = 0.45) -> SweepResult:
    """Patched AP for every (angle, scale, brightness) grid combination."""
    cells = []
    for angle, scale, brightness in itertools.product(
            angle_grid, scale_grid, brightness_grid):
        cond = EvalCondition(angle_deg=angle, scale=scale, brightness=brightness)
        result = evaluate_patched_ap(
            adapter, scenes, patch, placement, target_class=target_class,
            conf_threshold=conf_threshold, iou_threshold=iou_threshold,
            condition=cond)
        cells.append(SweepCell(condition=cond, ap_pct=_pct(result.ap)))
    return SweepResult(cells=tuple(cells))


def run_resolution_ablation(resolutions, cfg: RunConfig,
                            train_scenes: list[SceneImage],
                            test_scenes: list[SceneImage], adapter, *,
                            max_steps: int | None = None) -> list[tuple[int, float | None]]:
    """Train one patch per resolution under the same config/seed; report AP."""
    if not resolutions:
        raise InvariantError("need at least one resolution")
    rows = []
    for r in resolutions:
        cfg_r = dataclasses.replace(cfg, patch_resolution=int(r))
        patch, _ = train_patch(cfg_r, train_scenes, adapter, max_steps=max_steps)
        result = evaluate_patched_ap(
            adapter, test_scenes, patch, cfg.placement,
            target_class=cfg.dataset.target_class,
            conf_threshold=cfg.hyperparameters.conf_threshold,
            iou_threshold=cfg.hyperparameters.iou_threshold)
        rows.append((int(r), _pct(result.ap)))
    return rows


# ---------------------------------------------------------------- report

def _curve_to_dict(curve: PRCurve) -> list[dict]:
    return [{"recall": p.recall, "precision": p.precision, "confidence": p.confidence}
            for p in curve.points]


def _curve_from_dict(points: list[dict]) -> PRCurve:
    return PRCurve(points=tuple(
        PRPoint(recall=p["recall"], precision=p["precision"],
                confidence=p["confidence"]) for p in points))


@dataclass
class DetectorReport:
    """One detector's clean/noise/patched numbers, keyed by placement mode."""

    detector_id: str
    clean_ap_pct: float | None = None
    noise_ap_pct: dict[str, float | None] = field(default_factory=dict)
    patched_ap_pct: dict[str, float | None] = field(default_factory=dict)
    ap_drop_pct: dict[str, float | None] = field(default_factory=dict)
    relative_ap_pct: dict[str, float | None] = field(default_factory=dict)
    pr_curves: dict[str, list[dict]] = field(default_factory=dict)


def detector_report_from_cells(detector_id: str, clean_pct: float | None,
                               noise_pct: dict[str, float | None],
                               patched_pct: dict[str, float | None],
                               pr_curves: dict[str, PRCurve] | None = None) -> DetectorReport:
    """Assemble a report row from percentage cells; drops are derived here.

    The drop in each mode is the noise-baseline AP minus the patched AP of
    identical geometry, as stored; the relative column rescales patched AP
    against clean AP taken as 100%.
    """
    drops = {}
    relative = {}
    for mode, patched in patched_pct.items():
        noise = noise_pct.get(mode)
        drops[mode] = None if noise is None or patched is None else noise - patched
        relative[mode] = (None if clean_pct in (None, 0.0) or patched is None
                          else patched / clean_pct * 100.0)
    return DetectorReport(
        detector_id=detector_id, clean_ap_pct=clean_pct,
        noise_ap_pct=dict(noise_pct), patched_ap_pct=dict(patched_pct),
        ap_drop_pct=drops, relative_ap_pct=relative,
        pr_curves={k: _curve_to_dict(v) for k, v in (pr_curves or {}).items()})


def build_detector_report(detector_id: str, clean: APResult,
                          mode_results: dict[str, tuple[APResult, APResult]]) -> DetectorReport:
    """Report row from raw eval results: mode -> (noise, patched)."""
    curves = {"clean": clean.curve}
    noise_pct = {}
    patched_pct = {}
    for mode, (noise, patched) in mode_results.items():
        noise_pct[mode] = _pct(noise.ap)
        patched_pct[mode] = _pct(patched.ap)
        curves[f"noise:{mode}"] = noise.curve
        curves[f"patched:{mode}"] = patched.curve
    return detector_report_from_cells(
        detector_id, _pct(clean.ap), noise_pct, patched_pct, curves)


@dataclass
class BenchmarkReport:
    """Full benchmark output: per-detector rows plus the transfer matrix."""

    version: int = REPORT_VERSION
    config_hash: str = ""
    target_class: str = "aircraft"
    created_unix: float = 0.0
    runtime_seconds: float = 0.0
    n_images: int = 0
    detectors: list[DetectorReport] = field(default_factory=list)
    transfer: TransferMatrix | None = None

    def validate(self) -> "BenchmarkReport":
        """Recompute every derived drop from stored raw cells."""
        for det in self.detectors:
            for mode, drop in det.ap_drop_pct.items():
                noise = det.noise_ap_pct.get(mode)
                patched = det.patched_ap_pct.get(mode)
                expect = (None if noise is None or patched is None
                          else noise - patched)
                both = drop is not None and expect is not None
                if (drop is None) != (expect is None) or (
                        both and abs(drop - expect) > 1e-9):
                    raise InvariantError(
                        f"{det.detector_id}/{mode}: stored drop {drop} != "
                        f"recomputed {expect}")
        return self

    def to_dict(self) -> dict:
        d = {
            "version": self.version,
            "config_hash": self.config_hash,
            "target_class": self.target_class,
            "created_unix": self.created_unix,
            "runtime_seconds": self.runtime_seconds,
            "n_images": self.n_images,
            "detectors": [dataclasses.asdict(det) for det in self.detectors],
            "transfer": self.transfer.to_dict() if self.transfer else None,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkReport":
        if not isinstance(d, dict) or "version" not in d:
            raise DataError("not a benchmark report")
        if d["version"] != REPORT_VERSION:
            raise DataError(
                f"report version {d['version']!r}, expected {REPORT_VERSION}")
        return cls(
            version=d["version"],
            config_hash=d["config_hash"],
            target_class=d["target_class"],
            created_unix=d["created_unix"],
            runtime_seconds=d["runtime_seconds"],
            n_images=d["n_images"],
            detectors=[DetectorReport(**det) for det in d["detectors"]],
            transfer=(TransferMatrix.from_dict(d["transfer"])
                      if d.get("transfer") else None),
        )


def run_benchmark(adapters: dict[str, object], patches: dict[str, object],
                  scenes: list[SceneImage], placements: list[PlacementSpec], *,
                  target_class: str = "aircraft", conf_threshold: float = 0.4,
                  iou_threshold: float = 0.45, noise_seed: int = 99,
                  config_hash: str = "") -> BenchmarkReport:
    """Clean/noise/patched evaluation per detector plus a transfer matrix.

    ``patches`` maps proxy detector id to its trained patch; each placement
    spec contributes one mode column set per detector (the patch used for a
    detector's own row is its white-box patch when available, else the first
    patch). The transfer matrix uses the first placement spec.
    """
    if not adapters:
        raise InvariantError("no detectors to benchmark")
    if not placements:
        raise InvariantError("no placement specs given")
    t0 = time.time()
    rows = []
    for det_id, adapter in adapters.items():
        if adapter is None:
            continue
        clean = evaluate_patched_ap(
            adapter, scenes, None, placements[0], target_class=target_class,
            conf_threshold=conf_threshold, iou_threshold=iou_threshold)
        own_patch = patches.get(det_id)
        if own_patch is None and patches:
            own_patch = next(iter(patches.values()))
        mode_results = {}
        for spec in placements:
            resolution = (int(_as_pixels(own_patch).shape[0])
                          if own_patch is not None else 50)
            noise = evaluate_patched_ap(
                adapter, scenes, seeded_noise_patch(resolution, noise_seed),
                spec, target_class=target_class, conf_threshold=conf_threshold,
                iou_threshold=iou_threshold)
            if own_patch is not None:
                patched = evaluate_patched_ap(
                    adapter, scenes, own_patch, spec, target_class=target_class,
                    conf_threshold=conf_threshold, iou_threshold=iou_threshold)
            else:
                patched = APResult(ap=None, curve=PRCurve(), n_truths=0,
                                   n_detections=0)
            mode_results[spec.mode] = (noise, patched)
        rows.append(build_detector_report(det_id, clean, mode_results))

    transfer = run_transfer_benchmark(
        patches, adapters, scenes, placements[0], target_class=target_class,
        conf_threshold=conf_threshold, iou_threshold=iou_threshold,
        noise_seed=noise_seed) if patches else None

    return BenchmarkReport(
        config_hash=config_hash, target_class=target_class,
        created_unix=time.time(), runtime_seconds=time.time() - t0,
        n_images=len(scenes), detectors=rows, transfer=transfer).validate()
