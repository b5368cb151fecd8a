"""Run configuration: INI files, defaults, validation, stable hashing.

A run is fully described by one RunConfig. The file format is plain INI with
six sections (run / hyperparameters / placement / transforms / dataset /
detector); every key is optional and falls back to the documented default,
unknown keys are rejected so typos fail loudly, and the canonical hash only
depends on resolved values, never on file layout.
"""

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .transforms import TransformConfig
from .types import (
    ConfigError,
    Hyperparameters,
    InvariantError,
    PlacementSpec,
)

DATASET_FORMATS = ("synthetic", "internal_json", "voc_xml", "yolo_txt")


@dataclass(frozen=True)
class DatasetConfig:
    """Scene source. ``synthetic`` generates; the rest load from ``root``."""

    root: str = ""
    format: str = "synthetic"
    target_class: str = "aircraft"
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.format not in DATASET_FORMATS:
            raise InvariantError(
                f"dataset format {self.format!r} not one of {DATASET_FORMATS}")
        if self.format != "synthetic" and not self.root:
            raise InvariantError(f"dataset format {self.format!r} needs a root path")
        if self.n_train < 1 or self.n_test < 1:
            raise InvariantError(
                f"n_train={self.n_train}, n_test={self.n_test} must be >= 1")


@dataclass(frozen=True)
class DetectorConfig:
    """Which detector adapter to use and (optionally) its saved weights."""

    id: str = "toy"
    checkpoint: str = ""

    def __post_init__(self):
        if not self.id:
            raise InvariantError("detector id must be nonempty")


@dataclass(frozen=True)
class RunConfig:
    """Everything a training or benchmark run needs, in one value object."""

    seed: int = 0
    output_dir: str = ""  # empty: resolved by the CLI (env var or ./runs)
    batch_size: int = 8
    patch_resolution: int = 50
    hyperparameters: Hyperparameters = field(default_factory=Hyperparameters)
    placement: PlacementSpec = field(default_factory=PlacementSpec)
    transforms: TransformConfig = field(default_factory=TransformConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvariantError(f"batch_size={self.batch_size} must be >= 1")
        if self.patch_resolution < 2:
            raise InvariantError(
                f"patch_resolution={self.patch_resolution} must be >= 2")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        # tuples don't survive a JSON round trip; normalize up front
        d["transforms"]["contrast_range"] = list(self.transforms.contrast_range)
        return d


def config_hash(cfg: RunConfig) -> str:
    """16-hex-char digest of the resolved config values.

    Computed over canonical JSON (sorted keys), so two files with the same
    values hash identically regardless of key order or formatting, and any
    single value change produces a different hash.
    """
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _parse_value(raw: str, kind, where: str):
    if kind is str:
        return raw
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    if kind == "int_or_none":
        if raw.strip().lower() in ("", "none"):
            return None
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer or 'none', got {raw!r}") from None
    raise AssertionError(f"unhandled schema kind {kind!r}")


_SCHEMA = {
    "run": {
        "seed": int,
        "output_dir": str,
        "batch_size": int,
        "patch_resolution": int,
    },
    "hyperparameters": {
        "alpha": float,
        "beta": float,
        "eta": float,
        "n_epochs": int,
        "n_iterations": "int_or_none",
        "iou_threshold": float,
        "conf_threshold": float,
    },
    "placement": {
        "mode": str,
        "r_s": float,
        "r_d": float,
    },
    "transforms": {
        "noise_amplitude": float,
        "rotation_max_deg": float,
        "scale_jitter": float,
        "brightness_shift": float,
        "contrast_min": float,
        "contrast_max": float,
    },
    "dataset": {
        "root": str,
        "format": str,
        "target_class": str,
        "n_train": int,
        "n_test": int,
        "seed": int,
    },
    "detector": {
        "id": str,
        "checkpoint": str,
    },
}


def _section_values(parser: configparser.ConfigParser, section: str) -> dict:
    """Typed key/value pairs for one section, rejecting unknown keys."""
    schema = _SCHEMA[section]
    out = {}
    if not parser.has_section(section):
        return out
    for key, raw in parser.items(section):
        if key not in schema:
            raise ConfigError(
                f"[{section}] {key}: unknown key (known: {', '.join(sorted(schema))})")
        out[key] = _parse_value(raw, schema[key], f"[{section}] {key}")
    return out


def _build(section: str, cls, values: dict):
    try:
        return cls(**values)
    except InvariantError as e:
        raise ConfigError(f"[{section}] {e}") from None


def parse_config(path) -> RunConfig:
    """Read an INI run config; missing keys get defaults, unknown keys fail.

    An empty (or section-less) file resolves to the all-defaults RunConfig.
    """
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(p, encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"{p}: {e}") from None
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"[{section}]: unknown section (known: {', '.join(_SCHEMA)})")

    run = _section_values(parser, "run")
    hyp = _section_values(parser, "hyperparameters")
    plc = _section_values(parser, "placement")
    tfm = _section_values(parser, "transforms")
    ds = _section_values(parser, "dataset")
    det = _section_values(parser, "detector")

    lo = tfm.pop("contrast_min", None)
    hi = tfm.pop("contrast_max", None)
    if lo is not None or hi is not None:
        default = TransformConfig().contrast_range
        tfm["contrast_range"] = (
            lo if lo is not None else default[0],
            hi if hi is not None else default[1],
        )

    return _build("run", RunConfig, dict(
        run,
        hyperparameters=_build("hyperparameters", Hyperparameters, hyp),
        placement=_build("placement", PlacementSpec, plc),
        transforms=_build("transforms", TransformConfig, tfm),
        dataset=_build("dataset", DatasetConfig, ds),
        detector=_build("detector", DetectorConfig, det),
    ))


def write_config(cfg: RunConfig, path) -> None:
    """Serialize a RunConfig back to INI (inverse of parse_config)."""
    parser = configparser.ConfigParser(interpolation=None)
    d = cfg.to_dict()
    parser["run"] = {k: str(d[k]) for k in _SCHEMA["run"]}
    hyp = d["hyperparameters"]
    parser["hyperparameters"] = {
        k: ("none" if hyp[k] is None else str(hyp[k])) for k in _SCHEMA["hyperparameters"]}
    parser["placement"] = {k: str(d["placement"][k]) for k in _SCHEMA["placement"]}
    tfm = d["transforms"]
    parser["transforms"] = {
        "noise_amplitude": str(tfm["noise_amplitude"]),
        "rotation_max_deg": str(tfm["rotation_max_deg"]),
        "scale_jitter": str(tfm["scale_jitter"]),
        "brightness_shift": str(tfm["brightness_shift"]),
        "contrast_min": str(tfm["contrast_range"][0]),
        "contrast_max": str(tfm["contrast_range"][1]),
    }
    parser["dataset"] = {k: str(d["dataset"][k]) for k in _SCHEMA["dataset"]}
    parser["detector"] = {k: str(d["detector"][k]) for k in _SCHEMA["detector"]}
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)
