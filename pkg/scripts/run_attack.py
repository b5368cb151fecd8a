#!/usr/bin/env python3
"""Full attack experiment on synthetic scenes, end to end.

Generates train/test data, trains the toy detector, optimizes one patch
per placement mode, and prints the noise-baseline vs patched AP table.
The defaults reproduce the headline desk-scale numbers; --fast shrinks
everything for a ~2 minute smoke run.
"""

import argparse
import time
from pathlib import Path

from patchbench.benchmark import evaluate_patched_ap, seeded_noise_patch
from patchbench.config import DatasetConfig, RunConfig, config_hash
from patchbench.detector import clean_ap, train_toy_detector
from patchbench.synthetic import SyntheticSceneSpec, generate_synthetic_dataset
from patchbench.train import train_patch
from patchbench.types import ON_TARGET, OUTSIDE_TARGET, Hyperparameters, PlacementSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-train", type=int, default=2000)
    ap.add_argument("--n-test", type=int, default=500)
    ap.add_argument("--detector-epochs", type=int, default=14)
    ap.add_argument("--patch-epochs", type=int, default=15)
    ap.add_argument("--resolution", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs")
    ap.add_argument("--fast", action="store_true",
                    help="shrink to 300/100 scenes for a quick smoke run")
    args = ap.parse_args()
    if args.fast:
        args.n_train, args.n_test = 300, 100
        args.detector_epochs, args.patch_epochs = 40, 4

    t0 = time.time()
    spec = SyntheticSceneSpec()
    train = generate_synthetic_dataset(spec, args.n_train, seed=args.seed)
    test = generate_synthetic_dataset(spec, args.n_test, seed=args.seed + 1)
    print(f"generated {len(train)}/{len(test)} scenes")

    det = train_toy_detector(train, seed=args.seed, epochs=args.detector_epochs,
                             val_scenes=test, min_clean_ap=0.0, progress=True)
    clean = clean_ap(det, test, "aircraft")
    print(f"detector clean AP {clean:.4f}")

    print(f"{'mode':<16} {'noise AP':>9} {'patched AP':>11} {'drop':>7}")
    for mode in (ON_TARGET, OUTSIDE_TARGET):
        cfg = RunConfig(
            seed=args.seed, batch_size=8, patch_resolution=args.resolution,
            hyperparameters=Hyperparameters(n_epochs=args.patch_epochs),
            placement=PlacementSpec(mode=mode),
            dataset=DatasetConfig(n_train=args.n_train, n_test=args.n_test))
        out_dir = Path(args.out) / config_hash(cfg)
        patch, state = train_patch(cfg, train, det, out_dir=out_dir,
                                   progress=True)
        noise = evaluate_patched_ap(det, test, seeded_noise_patch(args.resolution),
                                    cfg.placement)
        patched = evaluate_patched_ap(det, test, patch, cfg.placement)
        drop = (noise.ap - patched.ap) * 100.0
        print(f"{mode:<16} {noise.ap * 100:>8.2f}% {patched.ap * 100:>10.2f}% "
              f"{drop:>6.1f}  ({state.epoch} epochs, artifacts in {out_dir})")
    print(f"total {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
