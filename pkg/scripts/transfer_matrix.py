#!/usr/bin/env python3
"""Cross-detector transfer: train K detector variants, attack each, evaluate all.

Detector variants differ in seed and width multiplier, standing in for the
distinct architectures a full-scale benchmark would use. One patch is
optimized against each variant (the proxy); every patch is then evaluated
against every variant, giving the white-box diagonal and black-box
off-diagonal cells plus the shared random-noise baseline row.
"""

import argparse
import time

from patchbench.benchmark import run_transfer_benchmark
from patchbench.config import DatasetConfig, RunConfig
from patchbench.detector import clean_ap, train_toy_detector
from patchbench.synthetic import SyntheticSceneSpec, generate_synthetic_dataset
from patchbench.train import train_patch
from patchbench.types import Hyperparameters, PlacementSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-detectors", type=int, default=3)
    ap.add_argument("--n-train", type=int, default=600)
    ap.add_argument("--n-test", type=int, default=150)
    ap.add_argument("--detector-epochs", type=int, default=18)
    ap.add_argument("--patch-epochs", type=int, default=4)
    ap.add_argument("--resolution", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    t0 = time.time()
    spec = SyntheticSceneSpec()
    train = generate_synthetic_dataset(spec, args.n_train, seed=args.seed)
    test = generate_synthetic_dataset(spec, args.n_test, seed=args.seed + 1)

    widths = [1.0, 0.75, 1.25, 0.5, 1.5]
    adapters = {}
    for k in range(args.n_detectors):
        det_id = f"toy-w{widths[k % len(widths)]:g}-s{k}"
        det = train_toy_detector(
            train, seed=args.seed + k, epochs=args.detector_epochs,
            width_mult=widths[k % len(widths)], val_scenes=test,
            min_clean_ap=0.0, detector_id=det_id)
        adapters[det_id] = det
        print(f"{det_id}: clean AP {clean_ap(det, test, 'aircraft'):.3f}")

    patches = {}
    for det_id, det in adapters.items():
        cfg = RunConfig(
            seed=args.seed, batch_size=8, patch_resolution=args.resolution,
            hyperparameters=Hyperparameters(n_epochs=args.patch_epochs),
            dataset=DatasetConfig(n_train=args.n_train, n_test=args.n_test))
        patch, _ = train_patch(cfg, train, det)
        patches[det_id] = patch
        print(f"patch vs {det_id} trained")

    matrix = run_transfer_benchmark(patches, adapters, test, PlacementSpec())
    width = max(len(t) for t in matrix.targets) + 2
    print(f"\n{'patch source':<{width}}"
          + "".join(f"{t:>{width}}" for t in matrix.targets))
    for row in matrix.rows:
        cells = ""
        for t in matrix.targets:
            c = matrix.cell(row, t)
            mark = "*" if c.white_box else ""
            cells += f"{c.ap_pct:>{width - 1}.1f}{mark or ' '}"
        print(f"{row:<{width}}{cells}")
    print(f"\n(* white-box; AP %, lower = stronger attack; "
          f"{time.time() - t0:.0f}s)")


if __name__ == "__main__":
    main()
