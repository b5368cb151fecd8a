"""CLI: exit codes, artifact layout, and a tiny end-to-end pipeline."""

import json
import shutil

import pytest

from patchbench.cli import main
from patchbench.config import config_hash, parse_config

pytestmark = pytest.mark.usefixtures("_quiet_mpl")


@pytest.fixture
def _quiet_mpl(monkeypatch):
    monkeypatch.setenv("MPLBACKEND", "Agg")


@pytest.fixture(scope="module")
def pipeline(tiny_bundle, tmp_path_factory):
    """One shared end-to-end run: detector -> patch -> evaluate."""
    root = tmp_path_factory.mktemp("cli-pipeline")
    weights = root / "detector.pt"
    tiny_bundle["detector"].save(weights)

    config = root / "run.ini"
    config.write_text(
        "[run]\n"
        "seed = 7\n"
        f"output_dir = {root / 'runs'}\n"
        "batch_size = 4\n"
        "patch_resolution = 20\n"
        "[hyperparameters]\n"
        "n_epochs = 2\n"
        "n_iterations = 2\n"
        "[transforms]\n"
        "noise_amplitude = 0\n"
        "rotation_max_deg = 0\n"
        "scale_jitter = 0\n"
        "brightness_shift = 0\n"
        "contrast_min = 1\n"
        "contrast_max = 1\n"
        "[dataset]\n"
        "n_train = 24\n"
        "n_test = 10\n"
        "seed = 101\n"
        f"[detector]\n"
        f"checkpoint = {weights}\n",
        encoding="utf-8")
    cfg = parse_config(config)
    run_dir = root / "runs" / config_hash(cfg)

    assert main(["train-patch", "--config", str(config)]) == 0
    return {"root": root, "config": config, "run_dir": run_dir,
            "weights": weights}


def test_train_patch_writes_all_artifacts(pipeline):
    run_dir = pipeline["run_dir"]
    assert (run_dir / "patch.png").is_file()
    assert (run_dir / "patch.json").is_file()
    assert (run_dir / "loss.csv").is_file()
    assert (run_dir / "checkpoints" / "latest.pt").is_file()
    assert (run_dir / "config.ini").is_file()
    # the run dir is self-describing: the stored config reparses to its hash
    cfg = parse_config(run_dir / "config.ini")
    assert config_hash(cfg) == run_dir.name
    meta = json.loads((run_dir / "patch.json").read_text(encoding="utf-8"))
    assert meta["config_hash"] == run_dir.name
    assert meta["placement_mode"] == "on_target"


def test_evaluate_writes_report_and_plots(pipeline):
    assert main(["evaluate", "--config", str(pipeline["config"])]) == 0
    reports = pipeline["run_dir"] / "reports"
    report = json.loads((reports / "report.json").read_text(encoding="utf-8"))
    assert report["config_hash"] == pipeline["run_dir"].name
    assert (reports / "pr_curves.png").stat().st_size > 0
    assert list(reports.glob("pr_toy_*.csv"))


def test_benchmark_matrix_and_heatmap(pipeline):
    assert main(["benchmark", "--config", str(pipeline["config"])]) == 0
    reports = pipeline["run_dir"] / "reports"
    matrix_csv = (reports / "matrix.csv").read_text(encoding="utf-8")
    lines = [l for l in matrix_csv.splitlines() if not l.startswith("#")]
    assert lines[0].startswith("patch_source,")
    assert len(lines) == 3  # header + noise row + one patch row
    assert lines[1].startswith("noise,")
    assert "*" in lines[2]  # single detector: the patch row is white-box
    assert (reports / "heatmap.png").stat().st_size > 0


def test_benchmark_partial_availability_exits_zero(pipeline, tmp_path, capsys):
    code = main([
        "benchmark", "--config", str(pipeline["config"]),
        "--detectors", f"toy={pipeline['weights']}",
        "--detectors", f"ghost={tmp_path / 'missing.pt'}",
        "--patches", f"toy={pipeline['run_dir'] / 'patch.png'}"])
    assert code == 0
    err = capsys.readouterr().err
    assert "ghost" in err and "unavailable" in err
    report = json.loads((pipeline["run_dir"] / "reports" / "report.json")
                        .read_text(encoding="utf-8"))
    cells = report["transfer"]["cells"]
    assert cells["toy"]["ghost"]["status"] == "unavailable"
    assert cells["toy"]["toy"]["status"] == "ok"


def test_sweep_writes_grid(pipeline):
    assert main(["sweep", "--config", str(pipeline["config"]),
                 "--angles", "0,10", "--scales", "1"]) == 0
    reports = pipeline["run_dir"] / "reports"
    rows = (reports / "sweep.csv").read_text(encoding="utf-8").splitlines()
    assert rows[0] == "angle_deg,scale,brightness,ap_pct"
    assert len(rows) == 3
    sweep = json.loads((reports / "sweep.json").read_text(encoding="utf-8"))
    assert len(sweep["cells"]) == 2


def test_report_renders_tables_idempotently(pipeline):
    assert main(["report", "--run", str(pipeline["run_dir"])]) == 0
    tables = pipeline["run_dir"] / "reports" / "tables.txt"
    first = tables.read_bytes()
    assert main(["report", "--run", str(pipeline["run_dir"])]) == 0
    assert tables.read_bytes() == first
    text = first.decode("utf-8")
    assert "transfer matrix" in text
    assert "*" in text


def test_report_flags_tampered_derived_field(pipeline, tmp_path, capsys):
    src = pipeline["run_dir"] / "reports" / "report.json"
    report = json.loads(src.read_text(encoding="utf-8"))
    mode = next(iter(report["detectors"][0]["ap_drop_pct"]))
    if report["detectors"][0]["ap_drop_pct"][mode] is None:
        report["detectors"][0]["ap_drop_pct"][mode] = 1.0
    report["detectors"][0]["ap_drop_pct"][mode] += 5.0
    run = tmp_path / "tampered"
    (run / "reports").mkdir(parents=True)
    (run / "reports" / "report.json").write_text(
        json.dumps(report), encoding="utf-8")
    assert main(["report", "--run", str(run)]) == 0
    err = capsys.readouterr().err
    assert "disagrees with recomputed" in err


def test_gen_data_round_trip(tmp_path):
    cfg = tmp_path / "gen.ini"
    cfg.write_text("[dataset]\nn_train = 6\nn_test = 3\n", encoding="utf-8")
    out = tmp_path / "data"
    code = main(["gen-data", "--config", str(cfg), "--out", str(out),
                 "--format", "internal_json"])
    assert code == 0
    assert (out / "manifest_train.json").is_file()
    assert (out / "manifest_test.json").is_file()


def test_exit_codes(tmp_path, capsys):
    # bad invocation: unknown subcommand / missing required flag
    assert main(["no-such-command"]) == 2
    assert main(["train-patch"]) == 2
    # config error: nonexistent config file
    assert main(["train-patch", "--config", str(tmp_path / "nope.ini")]) == 3
    # config error: detector checkpoint unset
    empty = tmp_path / "empty.ini"
    empty.write_text("", encoding="utf-8")
    assert main(["evaluate", "--config", str(empty)]) == 3
    # data error: missing report dir
    assert main(["report", "--run", str(tmp_path / "void")]) == 4
    capsys.readouterr()


def test_output_root_env_fallback(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("PATCHBENCH_RUNS", str(tmp_path / "env-runs"))
    cfg_text = pipeline["config"].read_text(encoding="utf-8")
    stripped = "\n".join(l for l in cfg_text.splitlines()
                         if not l.startswith("output_dir"))
    cfg_path = tmp_path / "env.ini"
    cfg_path.write_text(stripped, encoding="utf-8")
    cfg = parse_config(cfg_path)
    run_dir = tmp_path / "env-runs" / config_hash(cfg)
    if run_dir.exists():
        shutil.rmtree(run_dir)
    assert main(["train-patch", "--config", str(cfg_path)]) == 0
    assert (run_dir / "patch.png").is_file()
