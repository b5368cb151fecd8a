"""Command-line pipeline: generate data, train, attack, benchmark, report.

Every run's artifacts live under ``<output root>/<config hash>/``:

    config.ini           resolved config (reparses to the same hash)
    patch.png            trained patch pixels
    patch.json           patch metadata (config hash, mode, detector checksum)
    checkpoints/         resumable optimizer state, one file per epoch
    loss.csv             per-step loss breakdown
    reports/             evaluation JSON, CSV tables, plot files

The output root is ``--out`` if given, else $PATCHBENCH_RUNS, else ./runs.
Exit codes: 0 success, 2 bad invocation, 3 config error, 4 data error,
5 numeric failure; other failures exit 1.
"""

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .benchmark import (
    BenchmarkReport,
    SweepResult,
    run_benchmark,
    run_dynamics_sweep,
    run_resolution_ablation,
)
from .config import RunConfig, config_hash, parse_config, write_config
from .data_io import (
    DatasetRef,
    load_dataset,
    load_patch,
    load_report,
    save_dataset,
    save_patch,
    save_report,
)
from .detector import clean_ap, load_detector, train_toy_detector
from .synthetic import SyntheticSceneSpec, generate_synthetic_dataset
from .train import resume, train_patch
from .types import (
    ON_TARGET,
    OUTSIDE_TARGET,
    ConfigError,
    DataError,
    NumericError,
    PatchBenchError,
    PlacementSpec,
)

OUTPUT_ROOT_ENV = "PATCHBENCH_RUNS"
TEST_SEED_OFFSET = 1  # synthetic test split uses dataset seed + this

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5


# ------------------------------------------------------------- plumbing

def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    if getattr(args, "placement", None):
        mode = ON_TARGET if args.placement == "on" else OUTSIDE_TARGET
        cfg = dataclasses.replace(
            cfg, placement=dataclasses.replace(cfg.placement, mode=mode))
    if getattr(args, "detector", None) and "=" not in args.detector:
        cfg = dataclasses.replace(
            cfg, detector=dataclasses.replace(cfg.detector,
                                              checkpoint=args.detector))
    return cfg


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    return _apply_overrides(cfg, args)


def _output_root(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir or os.environ.get(OUTPUT_ROOT_ENV) or "runs")


def _run_dir(cfg: RunConfig) -> Path:
    d = _output_root(cfg) / config_hash(cfg)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _scenes(cfg: RunConfig, split: str, input_size=None):
    ds = cfg.dataset
    if ds.format == "synthetic":
        spec = SyntheticSceneSpec(target_class=ds.target_class)
        n = ds.n_train if split == "train" else ds.n_test
        seed = ds.seed if split == "train" else ds.seed + TEST_SEED_OFFSET
        return generate_synthetic_dataset(spec, n, seed=seed)
    ref = DatasetRef(root=ds.root, format=ds.format, split=split)
    return load_dataset(ref, input_size=input_size)


def _adapter(cfg: RunConfig):
    if not cfg.detector.checkpoint:
        raise ConfigError(
            "detector.checkpoint is not set; train one first "
            "(patchbench train-detector) and point the config at it")
    return load_detector(cfg.detector.id, cfg.detector.checkpoint)


def _both_placements(cfg: RunConfig) -> list[PlacementSpec]:
    base = cfg.placement
    return [dataclasses.replace(base, mode=ON_TARGET),
            dataclasses.replace(base, mode=OUTSIDE_TARGET)]


def _parse_named(pairs, what: str) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        name, sep, path = pair.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"--{what} takes NAME=PATH, got {pair!r}")
        out[name] = path
    return out


# ----------------------------------------------------------------- plots

def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    return plt


def _plot_pr_curves(report: BenchmarkReport, path: Path) -> None:
    plt = _pyplot()
    fig, axes = plt.subplots(1, max(len(report.detectors), 1),
                             figsize=(5 * max(len(report.detectors), 1), 4),
                             squeeze=False)
    for ax, det in zip(axes[0], report.detectors):
        for name, points in sorted(det.pr_curves.items()):
            ax.plot([p["recall"] for p in points],
                    [p["precision"] for p in points], label=name)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.05)
        ax.set_title(det.detector_id)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _plot_transfer_heatmap(matrix, path: Path) -> None:
    plt = _pyplot()
    rows, targets = matrix.rows, matrix.targets
    grid = np.full((len(rows), len(targets)), np.nan)
    for i, r in enumerate(rows):
        for j, t in enumerate(targets):
            cell = matrix.cell(r, t)
            if cell.status == "ok":
                grid[i, j] = cell.ap_pct
    fig, ax = plt.subplots(figsize=(2 + 1.2 * len(targets), 1.5 + 0.8 * len(rows)))
    im = ax.imshow(grid, vmin=0, vmax=100, cmap="viridis")
    ax.set_xticks(range(len(targets)), targets, rotation=30, ha="right")
    ax.set_yticks(range(len(rows)), rows)
    for i, r in enumerate(rows):
        for j, t in enumerate(targets):
            cell = matrix.cell(r, t)
            text = ("n/a" if cell.status == "unavailable"
                    else "-" if cell.status == "undefined"
                    else f"{cell.ap_pct:.1f}")
            if cell.white_box:
                text += "*"
            ax.text(j, i, text, ha="center", va="center", fontsize=8,
                    color="white")
    fig.colorbar(im, ax=ax, label="AP (%)")
    ax.set_title("patched AP; rows: patch source (* white-box)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ----------------------------------------------------------- csv tables

def _cell_text(cell) -> str:
    if cell.status != "ok":
        return cell.status
    return f"{cell.ap_pct:.2f}" + ("*" if cell.white_box else "")


def _write_matrix_csv(matrix, path: Path, cfg_hash: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# config {cfg_hash}\n")
        f.write(f"# placement {matrix.placement_mode}; AP in percent; "
                "* marks white-box cells\n")
        w = csv.writer(f)
        w.writerow(["patch_source", *matrix.targets])
        for row in matrix.rows:
            w.writerow([row] + [_cell_text(matrix.cell(row, t))
                                for t in matrix.targets])


def _write_cell_pr_data(report: BenchmarkReport, out_dir: Path) -> list[Path]:
    paths = []
    for det in report.detectors:
        for name, points in sorted(det.pr_curves.items()):
            safe = name.replace(":", "_")
            p = out_dir / f"pr_{det.detector_id}_{safe}.csv"
            with open(p, "w", newline="", encoding="utf-8") as f:
                w = csv.writer(f)
                w.writerow(["recall", "precision", "confidence"])
                for pt in points:
                    w.writerow([repr(pt["recall"]), repr(pt["precision"]),
                                repr(pt["confidence"])])
            paths.append(p)
    return paths


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.2f}"


def _render_tables(report: BenchmarkReport) -> tuple[str, list[str]]:
    """Human-readable tables from raw cells; derived values recomputed.

    Returns the rendered text and a list of mismatch notes for stored
    derived fields that disagree with the recomputation.
    """
    mismatches = []
    lines = [f"benchmark report (config {report.config_hash or 'unknown'})",
             f"target class: {report.target_class}; "
             f"images: {report.n_images}", ""]
    if report.detectors:
        lines.append("detector AP (percent); drop = noise - patched, "
                     "recomputed from raw cells")
        header = (f"{'detector':<14} {'mode':<16} {'clean':>7} {'noise':>7} "
                  f"{'patched':>8} {'drop':>7} {'rel':>7}")
        lines += [header, "-" * len(header)]
        for det in report.detectors:
            for mode in sorted(det.patched_ap_pct):
                noise = det.noise_ap_pct.get(mode)
                patched = det.patched_ap_pct[mode]
                drop = (None if noise is None or patched is None
                        else noise - patched)
                stored = det.ap_drop_pct.get(mode)
                if stored is not None and drop is not None and \
                        abs(stored - drop) > 1e-9:
                    mismatches.append(
                        f"{det.detector_id}/{mode}: stored drop {stored} "
                        f"disagrees with recomputed {drop}")
                rel = (None if not det.clean_ap_pct or patched is None
                       else patched / det.clean_ap_pct * 100.0)
                lines.append(
                    f"{det.detector_id:<14} {mode:<16} "
                    f"{_fmt(det.clean_ap_pct):>7} {_fmt(noise):>7} "
                    f"{_fmt(patched):>8} {_fmt(drop):>7} {_fmt(rel):>7}")
        lines.append("")
    if report.transfer is not None:
        m = report.transfer
        lines.append(f"transfer matrix ({m.placement_mode}); "
                     "rows: patch source; * white-box")
        widths = [max(12, *(len(t) + 1 for t in m.targets))]
        head = f"{'patch_source':<14}" + "".join(
            f" {t:>{widths[0]}}" for t in m.targets)
        lines += [head, "-" * len(head)]
        for row in m.rows:
            cells = "".join(f" {_cell_text(m.cell(row, t)):>{widths[0]}}"
                            for t in m.targets)
            lines.append(f"{row:<14}{cells}")
        lines.append("")
    if mismatches:
        lines.append("derived-field mismatches (tables above use the "
                     "recomputed values):")
        lines += [f"  {msg}" for msg in mismatches]
        lines.append("")
    return "\n".join(lines) + "\n", mismatches


# ------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    ds = cfg.dataset
    out_root = Path(args.out or ds.root or "data")
    fmt = args.format
    spec = SyntheticSceneSpec(target_class=ds.target_class)
    for split, n, seed in (("train", ds.n_train, ds.seed),
                           ("test", ds.n_test, ds.seed + TEST_SEED_OFFSET)):
        scenes = generate_synthetic_dataset(spec, n, seed=seed)
        save_dataset(scenes, out_root, fmt, split)
        print(f"wrote {len(scenes)} {split} scenes to {out_root} ({fmt})")
    return EXIT_OK


def cmd_train_detector(args) -> int:
    cfg = _load_config(args)
    train = _scenes(cfg, "train")
    test = _scenes(cfg, "test")
    det = train_toy_detector(
        train, seed=cfg.seed, epochs=args.epochs, val_scenes=test,
        target_class=cfg.dataset.target_class, min_clean_ap=args.min_clean_ap,
        progress=True)
    out = Path(args.weights)
    out.parent.mkdir(parents=True, exist_ok=True)
    det.save(out)
    ap = clean_ap(det, test, cfg.dataset.target_class,
                  cfg.hyperparameters.conf_threshold,
                  cfg.hyperparameters.iou_threshold)
    print(f"saved detector to {out} (clean AP "
          f"{'-' if ap is None else f'{ap:.4f}'}, "
          f"checksum {det.parameter_checksum()[:12]})")
    return EXIT_OK


def cmd_train_patch(args) -> int:
    cfg = _load_config(args)
    adapter = _adapter(cfg)
    run_dir = _run_dir(cfg)
    write_config(cfg, run_dir / "config.ini")
    scenes = _scenes(cfg, "train", input_size=adapter.input_size)
    state = None
    latest = run_dir / "checkpoints" / "latest.pt"
    if args.resume and latest.is_file():
        state = resume(latest)
        print(f"resuming from epoch {state.epoch}")
    patch, final = train_patch(cfg, scenes, adapter, state=state,
                               out_dir=run_dir, progress=True)
    png, _ = save_patch(
        patch, run_dir, placement_mode=cfg.placement.mode,
        hyperparameters=dataclasses.asdict(cfg.hyperparameters),
        proxy_detector=getattr(adapter, "id", cfg.detector.id),
        config_hash=config_hash(cfg),
        extra={"detector_checksum": adapter.parameter_checksum(),
               "epochs_run": final.epoch,
               "steps_run": final.step})
    print(f"patch written to {png} (epochs {final.epoch}, steps {final.step})")
    return EXIT_OK


def _load_patch_arg(args, cfg: RunConfig):
    path = args.patch or (_run_dir(cfg) / "patch.png")
    patch, meta = load_patch(path)
    return patch, meta


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    adapter = _adapter(cfg)
    patch, _ = _load_patch_arg(args, cfg)
    scenes = _scenes(cfg, "test", input_size=adapter.input_size)
    det_id = getattr(adapter, "id", cfg.detector.id)
    report = run_benchmark(
        {det_id: adapter}, {det_id: patch}, scenes, _both_placements(cfg),
        target_class=cfg.dataset.target_class,
        conf_threshold=cfg.hyperparameters.conf_threshold,
        iou_threshold=cfg.hyperparameters.iou_threshold,
        config_hash=config_hash(cfg))
    out_dir = _run_dir(cfg) / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    save_report(report, out_dir / "report.json")
    _write_cell_pr_data(report, out_dir)
    _plot_pr_curves(report, out_dir / "pr_curves.png")
    row = report.detectors[0]
    for mode in sorted(row.patched_ap_pct):
        print(f"{mode}: noise {_fmt(row.noise_ap_pct.get(mode))} -> "
              f"patched {_fmt(row.patched_ap_pct[mode])} "
              f"(drop {_fmt(row.ap_drop_pct.get(mode))})")
    print(f"report written to {out_dir / 'report.json'}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _load_config(args)
    named_dets = _parse_named(args.detectors, "detector")
    named_patches = _parse_named(args.patches, "patch")

    adapters = {}
    if named_dets:
        for name, path in named_dets.items():
            try:
                adapters[name] = load_detector(cfg.detector.id, path)
            except (DataError, ConfigError) as e:
                print(f"warning: detector {name} unavailable: {e}",
                      file=sys.stderr)
                adapters[name] = None
    else:
        adapter = _adapter(cfg)
        adapters[getattr(adapter, "id", cfg.detector.id)] = adapter

    patches = {}
    if named_patches:
        for name, path in named_patches.items():
            patches[name], _ = load_patch(path)
    else:
        default_name = next(iter(adapters))
        patches[default_name], _ = _load_patch_arg(args, cfg)

    scenes = _scenes(cfg, "test")
    report = run_benchmark(
        adapters, patches, scenes, [cfg.placement],
        target_class=cfg.dataset.target_class,
        conf_threshold=cfg.hyperparameters.conf_threshold,
        iou_threshold=cfg.hyperparameters.iou_threshold,
        config_hash=config_hash(cfg))
    out_dir = _run_dir(cfg) / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    save_report(report, out_dir / "report.json")
    _write_cell_pr_data(report, out_dir)
    _plot_pr_curves(report, out_dir / "pr_curves.png")
    if report.transfer is not None:
        _write_matrix_csv(report.transfer, out_dir / "matrix.csv",
                          report.config_hash)
        _plot_transfer_heatmap(report.transfer, out_dir / "heatmap.png")
    text, _ = _render_tables(report)
    print(text, end="")
    print(f"artifacts under {out_dir}")
    return EXIT_OK


def _parse_grid(raw: str, what: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in raw.split(","))
    except ValueError:
        raise ConfigError(f"--{what}: expected comma-separated numbers, "
                          f"got {raw!r}") from None


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    adapter = _adapter(cfg)
    scenes = _scenes(cfg, "test", input_size=adapter.input_size)
    out_dir = _run_dir(cfg) / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.resolutions:
        resolutions = [int(v) for v in args.resolutions.split(",")]
        train_scenes = _scenes(cfg, "train", input_size=adapter.input_size)
        rows = run_resolution_ablation(
            resolutions, cfg, train_scenes, scenes, adapter)
        path = out_dir / "resolution_ablation.csv"
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["resolution", "patched_ap_pct"])
            for r, ap in rows:
                w.writerow([r, "" if ap is None else repr(ap)])
        for r, ap in rows:
            print(f"resolution {r}: patched AP {_fmt(ap)}")
        print(f"ablation written to {path}")
        return EXIT_OK

    patch, _ = _load_patch_arg(args, cfg)
    sweep = run_dynamics_sweep(
        adapter, scenes, patch, cfg.placement,
        angle_grid=_parse_grid(args.angles, "angles"),
        scale_grid=_parse_grid(args.scales, "scales"),
        brightness_grid=_parse_grid(args.brightness, "brightness"),
        target_class=cfg.dataset.target_class,
        conf_threshold=cfg.hyperparameters.conf_threshold,
        iou_threshold=cfg.hyperparameters.iou_threshold)
    (out_dir / "sweep.json").write_text(
        json.dumps(sweep.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    path = out_dir / "sweep.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["angle_deg", "scale", "brightness", "ap_pct"])
        for c in sweep.cells:
            w.writerow([repr(c.condition.angle_deg), repr(c.condition.scale),
                        repr(c.condition.brightness),
                        "" if c.ap_pct is None else repr(c.ap_pct)])
    for c in sweep.cells:
        print(f"angle {c.condition.angle_deg:g} scale {c.condition.scale:g} "
              f"brightness {c.condition.brightness:g}: AP {_fmt(c.ap_pct)}")
    print(f"sweep written to {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    raw = run_dir / "reports" / "report.json"
    if not raw.is_file():
        raw = run_dir / "report.json"
    report = load_report(raw)
    text, mismatches = _render_tables(report)
    out = raw.parent / "tables.txt"
    out.write_text(text, encoding="utf-8")
    print(text, end="")
    for msg in mismatches:
        print(f"warning: {msg}", file=sys.stderr)
    print(f"tables written to {out}")
    return EXIT_OK


# --------------------------------------------------------------- parser

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchbench",
        description="Train adversarial patches against aerial object "
                    "detectors and benchmark how well they transfer.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required,
                       help="INI run config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override run seed")
        p.add_argument("--out", help="output root (else $PATCHBENCH_RUNS or ./runs)")
        p.add_argument("--placement", choices=("on", "outside"),
                       help="override placement mode")
        p.add_argument("--detector", help="override detector checkpoint path")

    p = sub.add_parser("gen-data", help="write a synthetic dataset to disk")
    common(p)
    p.add_argument("--format", default="internal_json",
                   choices=("internal_json", "voc_xml", "yolo_txt"))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-detector", help="train the built-in toy detector")
    common(p)
    p.add_argument("--weights", default="detector.pt",
                   help="where to save the trained weights")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--min-clean-ap", type=float, default=0.0,
                   help="fail the run if validation clean AP ends below this")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("train-patch", help="optimize a patch against a detector")
    common(p, config_required=True)
    p.add_argument("--resume", action="store_true",
                   help="continue from the run dir's latest checkpoint")
    p.set_defaults(func=cmd_train_patch)

    p = sub.add_parser("evaluate", help="clean/noise/patched AP for one detector")
    common(p, config_required=True)
    p.add_argument("--patch", help="patch.png path (default: this run's)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="cross-detector transfer matrix")
    common(p, config_required=True)
    p.add_argument("--patch", help="patch.png path (default: this run's)")
    p.add_argument("--patches", action="append", metavar="NAME=PATH",
                   help="proxy patch (repeatable)")
    p.add_argument("--detectors", action="append", metavar="NAME=PATH",
                   help="target detector checkpoint (repeatable)")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("sweep", help="patched AP over transform or resolution grids")
    common(p, config_required=True)
    p.add_argument("--patch", help="patch.png path (default: this run's)")
    p.add_argument("--angles", default="0", help="comma-separated degrees")
    p.add_argument("--scales", default="1", help="comma-separated scale factors")
    p.add_argument("--brightness", default="0", help="comma-separated shifts")
    p.add_argument("--resolutions",
                   help="comma-separated patch sizes; trains one patch per "
                        "size instead of sweeping transforms")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render tables from a run's raw JSON")
    p.add_argument("--run", required=True, help="run directory (or its reports/)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except PatchBenchError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
