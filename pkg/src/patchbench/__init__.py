"""patchbench: adversarial patch training and transfer benchmarking
for aerial object detection, with a synthetic desk-scale testbed."""

from .benchmark import (
    BenchmarkReport,
    EvalCondition,
    SweepResult,
    TransferMatrix,
    evaluate_patched_ap,
    run_benchmark,
    run_dynamics_sweep,
    run_resolution_ablation,
    run_transfer_benchmark,
    seeded_noise_patch,
)
from .config import (
    DatasetConfig,
    DetectorConfig,
    RunConfig,
    config_hash,
    parse_config,
    write_config,
)
from .data_io import (
    DatasetRef,
    load_dataset,
    load_patch,
    load_report,
    save_dataset,
    save_patch,
    save_report,
)
from .detector import (
    ToyDetector,
    clean_ap,
    detect,
    load_detector,
    register_detector,
    train_toy_detector,
)
from .losses import PrintableColorSet, nps_loss, objectness_loss, tv_loss
from .metrics import average_precision, evaluate_detections, iou, nms
from .placement import place_all
from .synthetic import SyntheticSceneSpec, generate_synthetic_dataset
from .train import init_patch, resume, train_patch
from .transforms import TransformConfig, apply_transform, sample_transform
from .types import (
    ON_TARGET,
    OUTSIDE_TARGET,
    BoundingBox,
    ConfigError,
    DataError,
    Detection,
    Hyperparameters,
    InvariantError,
    NumericError,
    Patch,
    PatchBenchError,
    PlacementSpec,
    SceneImage,
)

__version__ = "0.1.0"
