"""Config parsing: defaults, strict keys, error paths, hash stability."""

import dataclasses

import pytest

from patchbench.config import (
    DatasetConfig,
    DetectorConfig,
    RunConfig,
    config_hash,
    parse_config,
    write_config,
)
from patchbench.transforms import TransformConfig
from patchbench.types import OUTSIDE_TARGET, ConfigError, Hyperparameters, PlacementSpec


def _write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_empty_file_gives_all_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, ""))
    h = cfg.hyperparameters
    assert (h.alpha, h.beta, h.eta) == (2.5, 0.01, 0.03)
    assert (h.iou_threshold, h.conf_threshold, h.n_epochs) == (0.45, 0.4, 600)
    assert cfg.patch_resolution == 50
    assert cfg == RunConfig()


def test_partial_file_fills_remaining_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, "[hyperparameters]\nalpha = 1.0\n"))
    assert cfg.hyperparameters.alpha == 1.0
    assert cfg.hyperparameters.beta == 0.01
    assert cfg.placement == PlacementSpec()


def test_unknown_key_rejected_with_path(tmp_path):
    p = _write(tmp_path, "[hyperparameters]\nalhpa = 2.5\n")
    with pytest.raises(ConfigError, match=r"\[hyperparameters\] alhpa"):
        parse_config(p)


def test_unknown_section_rejected(tmp_path):
    p = _write(tmp_path, "[hyperparams]\nalpha = 2.5\n")
    with pytest.raises(ConfigError, match=r"\[hyperparams\]"):
        parse_config(p)


def test_type_mismatch_names_key_path(tmp_path):
    p = _write(tmp_path, "[hyperparameters]\nalpha = banana\n")
    with pytest.raises(ConfigError, match=r"\[hyperparameters\] alpha"):
        parse_config(p)


def test_out_of_range_value_rejected(tmp_path):
    p = _write(tmp_path, "[hyperparameters]\nalpha = -1\n")
    with pytest.raises(ConfigError, match=r"\[hyperparameters\]"):
        parse_config(p)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.ini")


def test_placement_mode_parsed(tmp_path):
    cfg = parse_config(_write(tmp_path, "[placement]\nmode = outside_target\nr_d = 2.0\n"))
    assert cfg.placement.mode == OUTSIDE_TARGET
    assert cfg.placement.r_d == 2.0


def test_contrast_pair_maps_to_range(tmp_path):
    cfg = parse_config(_write(tmp_path, "[transforms]\ncontrast_min = 0.5\ncontrast_max = 1.5\n"))
    assert cfg.transforms.contrast_range == (0.5, 1.5)
    # one side alone keeps the other at its default
    cfg2 = parse_config(_write(tmp_path, "[transforms]\ncontrast_min = 0.5\n", "b.ini"))
    assert cfg2.transforms.contrast_range == (0.5, 1.2)


def test_n_iterations_none_and_int(tmp_path):
    cfg = parse_config(_write(tmp_path, "[hyperparameters]\nn_iterations = none\n"))
    assert cfg.hyperparameters.n_iterations is None
    cfg2 = parse_config(_write(tmp_path, "[hyperparameters]\nn_iterations = 7\n", "b.ini"))
    assert cfg2.hyperparameters.n_iterations == 7


def test_dataset_format_needs_root(tmp_path):
    p = _write(tmp_path, "[dataset]\nformat = voc_xml\n")
    with pytest.raises(ConfigError, match=r"\[dataset\]"):
        parse_config(p)


def test_hash_stable_under_reordering(tmp_path):
    a = _write(tmp_path, (
        "[hyperparameters]\nalpha = 3.0\nbeta = 0.02\n"
        "[run]\nseed = 5\n"), "a.ini")
    b = _write(tmp_path, (
        "# same values, different layout\n"
        "[run]\nseed = 5\n"
        "[hyperparameters]\nbeta = 0.02\nalpha = 3.0\n"), "b.ini")
    ca, cb = parse_config(a), parse_config(b)
    assert ca == cb
    assert config_hash(ca) == config_hash(cb)


def test_hash_changes_when_any_value_changes():
    base = RunConfig()
    variants = [
        dataclasses.replace(base, seed=1),
        dataclasses.replace(base, batch_size=16),
        dataclasses.replace(base, patch_resolution=150),
        dataclasses.replace(base, hyperparameters=Hyperparameters(alpha=2.6)),
        dataclasses.replace(base, placement=PlacementSpec(mode=OUTSIDE_TARGET)),
        dataclasses.replace(base, transforms=TransformConfig(noise_amplitude=0.06)),
        dataclasses.replace(base, dataset=DatasetConfig(n_train=1999)),
        dataclasses.replace(base, detector=DetectorConfig(id="toy2")),
    ]
    h0 = config_hash(base)
    hashes = [config_hash(v) for v in variants]
    assert h0 not in hashes
    assert len(set(hashes)) == len(hashes)


def test_hash_is_deterministic_string():
    h = config_hash(RunConfig())
    assert h == config_hash(RunConfig())
    assert len(h) == 16
    int(h, 16)  # hex


def test_write_parse_round_trip(tmp_path):
    cfg = RunConfig(
        seed=9,
        batch_size=4,
        patch_resolution=64,
        hyperparameters=Hyperparameters(alpha=1.5, n_iterations=12),
        placement=PlacementSpec(mode=OUTSIDE_TARGET, r_s=0.3, r_d=1.5),
        transforms=TransformConfig(noise_amplitude=0.02, contrast_range=(0.9, 1.1)),
        dataset=DatasetConfig(root="", format="synthetic", n_train=100, n_test=20),
        detector=DetectorConfig(id="toy", checkpoint="w.pt"),
    )
    path = tmp_path / "out.ini"
    write_config(cfg, path)
    back = parse_config(path)
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)
