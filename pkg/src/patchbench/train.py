"""Patch optimization: nested epoch/iteration loop against a frozen detector.

Each iteration draws one appearance transform per image, composites the
transformed patch onto every target box, runs the detector, and takes one
Adam step on the combined objective (detection confidence + smoothness +
printability), clamping the patch back to [0, 1]. Images whose detections
are fully suppressed contribute nothing; a batch with no surviving
detections anywhere is skipped outright (there is no confidence left to
push down).

Determinism: one numpy Generator drives the epoch shuffle and every
transform draw, in a fixed order. Its state is checkpointed at each epoch
boundary together with the patch and optimizer moments, so a resumed run
continues bit-exactly.
"""

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, config_hash
from .detector import detect
from .losses import LossBreakdown, PrintableColorSet, nps_loss, objectness_loss, tv_loss
from .placement import place_all
from .transforms import apply_transform, sample_transform
from .types import (
    ConfigError,
    DataError,
    InvariantError,
    NumericError,
    Patch,
    PatchBenchError,
    SceneImage,
    validate_patch,
)

CHECKPOINT_VERSION = 1
LOSS_CSV_FIELDS = ("step", "l_obj", "l_tv", "l_nps", "total", "n_detections")


def init_patch(resolution: int, seed: int) -> Patch:
    """Uniform random patch in [0, 1], deterministic per seed."""
    if resolution < 2:
        raise InvariantError(f"patch resolution {resolution} must be >= 2")
    rng = np.random.default_rng(seed)
    pixels = rng.random((resolution, resolution, 3), dtype=np.float32)
    return Patch(pixels=pixels, id=f"patch-r{resolution}-s{seed}")


@dataclass
class TrainState:
    """Everything needed to continue (or audit) a training run."""

    patch: Patch
    epoch: int  # completed epochs
    step: int  # completed optimizer steps
    optimizer_state: dict
    rng_state: dict
    loss_history: list[LossBreakdown] = field(default_factory=list)
    config_hash: str = ""
    detector_checksum: str = ""
    best_epoch_loss: float = float("inf")
    stall_epochs: int = 0
    finished: bool = False


def save_checkpoint(state: TrainState, path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "version": CHECKPOINT_VERSION,
        "patch_pixels": np.asarray(state.patch.pixels, dtype=np.float32),
        "patch_id": state.patch.id,
        "epoch": state.epoch,
        "step": state.step,
        "optimizer_state": state.optimizer_state,
        "rng_state": state.rng_state,
        "loss_history": [dataclasses.asdict(b) for b in state.loss_history],
        "config_hash": state.config_hash,
        "detector_checksum": state.detector_checksum,
        "best_epoch_loss": state.best_epoch_loss,
        "stall_epochs": state.stall_epochs,
        "finished": state.finished,
    }, p)


def resume(path) -> TrainState:
    """Load a training checkpoint; the result feeds train_patch(state=...)."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"checkpoint missing: {p}")
    try:
        blob = torch.load(p, map_location="cpu", weights_only=False)
    except Exception as e:
        raise DataError(f"cannot read checkpoint {p}: {e}") from None
    if not isinstance(blob, dict) or "version" not in blob:
        raise DataError(f"{p} is not a training checkpoint")
    if blob["version"] != CHECKPOINT_VERSION:
        raise DataError(
            f"{p}: checkpoint version {blob['version']}, expected {CHECKPOINT_VERSION}")
    return TrainState(
        patch=Patch(pixels=blob["patch_pixels"], id=blob["patch_id"]),
        epoch=blob["epoch"],
        step=blob["step"],
        optimizer_state=blob["optimizer_state"],
        rng_state=blob["rng_state"],
        loss_history=[LossBreakdown(**d) for d in blob["loss_history"]],
        config_hash=blob["config_hash"],
        detector_checksum=blob["detector_checksum"],
        best_epoch_loss=blob["best_epoch_loss"],
        stall_epochs=blob["stall_epochs"],
        finished=blob["finished"],
    )


def _open_loss_csv(out_dir: Path, history: list[LossBreakdown]):
    """Append handle on loss.csv, backfilling rows the file doesn't have."""
    path = out_dir / "loss.csv"
    if not path.is_file():
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(LOSS_CSV_FIELDS)
            for i, b in enumerate(history, start=1):
                w.writerow([i, b.l_obj, b.l_tv, b.l_nps, b.total, b.n_detections])
    return open(path, "a", newline="", encoding="utf-8")


def _nan_dump(out_dir: Path | None, patch: torch.Tensor, epoch: int, step: int,
              batch_ids: list[str], l_tv, l_nps) -> str:
    if out_dir is None:
        return "no output dir; diagnostic dump skipped"
    path = out_dir / "nan_dump.pt"
    torch.save({
        "patch": patch.detach().clone(),
        "epoch": epoch,
        "step": step,
        "batch_image_ids": batch_ids,
        "l_tv": float(l_tv.detach()) if isinstance(l_tv, torch.Tensor) else float(l_tv),
        "l_nps": float(l_nps.detach()) if isinstance(l_nps, torch.Tensor) else float(l_nps),
    }, path)
    return f"diagnostic dump written to {path}"


def train_patch(cfg: RunConfig, scenes: list[SceneImage], adapter, *,
                state: TrainState | None = None, out_dir=None,
                max_steps: int | None = None,
                early_stop_patience: int = 50, early_stop_tol: float = 1e-4,
                checkpoint_every: int = 1,
                progress: bool = False) -> tuple[Patch, TrainState]:
    """Optimize a patch against ``adapter`` on ``scenes``.

    Pass ``state`` (from resume()) to continue a checkpointed run from its
    epoch boundary. With ``out_dir`` set, writes loss.csv and per-epoch
    checkpoints under it. Stops early when the epoch-mean loss has not
    improved by ``early_stop_tol`` for ``early_stop_patience`` epochs.
    """
    h = cfg.hyperparameters
    target_class = cfg.dataset.target_class
    usable = [sc for sc in scenes if sc.boxes_of_class(target_class)]
    if not usable:
        raise DataError(
            f"zero training images with class {target_class!r} boxes")

    cfg_hash = config_hash(cfg)
    checksum0 = adapter.parameter_checksum()
    if state is not None:
        if state.config_hash and state.config_hash != cfg_hash:
            raise ConfigError(
                f"checkpoint config hash {state.config_hash} does not match "
                f"this run's {cfg_hash}")
        if state.detector_checksum and state.detector_checksum != checksum0:
            raise PatchBenchError(
                "detector weights differ from the checkpointed run "
                f"({state.detector_checksum[:12]} vs {checksum0[:12]})")

    rng = np.random.default_rng(cfg.seed)
    if state is not None:
        rng.bit_generator.state = state.rng_state
        start_patch = np.asarray(state.patch.pixels, dtype=np.float32)
        patch_id = state.patch.id
    else:
        p0 = init_patch(cfg.patch_resolution, cfg.seed)
        start_patch, patch_id = p0.pixels, p0.id

    p = torch.from_numpy(start_patch.copy()).requires_grad_(True)
    opt = torch.optim.Adam([p], lr=h.eta)
    if state is not None and state.optimizer_state:
        opt.load_state_dict(state.optimizer_state)

    colors = PrintableColorSet.default()
    history = list(state.loss_history) if state is not None else []
    step = state.step if state is not None else 0
    start_epoch = state.epoch if state is not None else 0
    best = state.best_epoch_loss if state is not None else float("inf")
    stall = state.stall_epochs if state is not None else 0
    epoch = start_epoch
    finished = state.finished if state is not None else False

    out_path = Path(out_dir) if out_dir is not None else None
    csv_handle = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        csv_handle = _open_loss_csv(out_path, history)
    csv_writer = csv.writer(csv_handle) if csv_handle is not None else None

    def snapshot() -> TrainState:
        return TrainState(
            patch=Patch(pixels=p.detach().numpy().copy(), id=patch_id),
            epoch=epoch, step=step,
            optimizer_state=opt.state_dict(),
            rng_state=rng.bit_generator.state,
            loss_history=list(history),
            config_hash=cfg_hash, detector_checksum=checksum0,
            best_epoch_loss=best, stall_epochs=stall, finished=finished,
        )

    stop = False
    try:
        while epoch < h.n_epochs and not finished and not stop:
            order = rng.permutation(len(usable))
            n_batches = (len(order) + cfg.batch_size - 1) // cfg.batch_size
            if h.n_iterations is not None:
                n_batches = min(n_batches, h.n_iterations)
            epoch_totals = []
            for bi in range(n_batches):
                batch = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
                terms = []
                n_dets = 0
                batch_ids = []
                for i in batch:
                    sc = usable[i]
                    batch_ids.append(sc.image_id)
                    boxes = sc.boxes_of_class(target_class)
                    params = sample_transform(cfg.transforms, rng,
                                              (p.shape[0], p.shape[1]))
                    tp = apply_transform(p, params)
                    x = place_all(sc.pixels, tp.pixels, cfg.placement, boxes,
                                  footprint=tp.footprint, scale=tp.scale)
                    dets = detect(adapter, x, h.conf_threshold, h.iou_threshold)
                    l = objectness_loss(dets)
                    if isinstance(l, torch.Tensor):
                        terms.append(l)
                        n_dets += len(dets)
                if not terms:
                    continue
                l_obj = torch.stack(terms).mean()
                l_tv = tv_loss(p)
                l_nps = nps_loss(p, colors)
                loss = l_obj + h.alpha * l_tv + h.beta * l_nps
                if not torch.isfinite(loss):
                    note = _nan_dump(out_path, p, epoch, step, batch_ids, l_tv, l_nps)
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {step}; {note}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                with torch.no_grad():
                    p.clamp_(0.0, 1.0)
                step += 1
                b = LossBreakdown.from_components(l_obj, l_tv, l_nps, h, n_dets)
                history.append(b)
                epoch_totals.append(b.total)
                if csv_writer is not None:
                    csv_writer.writerow([step, b.l_obj, b.l_tv, b.l_nps,
                                         b.total, b.n_detections])
                if max_steps is not None and step - (state.step if state else 0) >= max_steps:
                    stop = True
                    break
            if stop:
                break
            epoch += 1
            if adapter.parameter_checksum() != checksum0:
                raise PatchBenchError(
                    f"detector weights drifted during training (epoch {epoch})")
            if epoch_totals:
                mean = sum(epoch_totals) / len(epoch_totals)
                if best - mean > early_stop_tol:
                    best, stall = mean, 0
                else:
                    stall += 1
            else:
                # a whole epoch with no surviving detection on any image:
                # the attack has nothing left to push down
                finished = True
            if stall >= early_stop_patience or epoch >= h.n_epochs:
                finished = True
            if progress:
                msg = (f"epoch {epoch}/{h.n_epochs} loss="
                       f"{history[-1].total:.4f}" if history else f"epoch {epoch}")
                print(msg, flush=True)
            if out_path is not None and (epoch % checkpoint_every == 0 or finished):
                snap = snapshot()
                save_checkpoint(snap, out_path / "checkpoints" / f"epoch_{epoch:04d}.pt")
                save_checkpoint(snap, out_path / "checkpoints" / "latest.pt")
            if csv_handle is not None:
                csv_handle.flush()
    finally:
        if csv_handle is not None:
            csv_handle.close()

    final_state = snapshot()
    final_patch = validate_patch(final_state.patch)
    return final_patch, final_state
