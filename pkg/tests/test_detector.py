"""Adapter contract, detection pipeline, and toy detector tests."""

import numpy as np
import pytest
import torch

from patchbench.detector import (
    RawDetections,
    ToyDetector,
    clean_ap,
    detect,
    load_detector,
    register_detector,
    train_toy_detector,
)
from patchbench.losses import objectness_loss
from patchbench.placement import build_mask, composite
from patchbench.synthetic import SyntheticSceneSpec, generate_synthetic_dataset
from patchbench.types import (
    ConfigError,
    DataError,
    InvariantError,
    PatchBenchError,
    PlacementSpec,
)


class StubAdapter:
    """Hand-scripted raw detections for exercising detect() in isolation."""

    id = "stub"
    class_names = ("aircraft", "distractor")

    def __init__(self, boxes, objectness, size=32, fail=False):
        self._boxes = torch.as_tensor(boxes, dtype=torch.float32).reshape(-1, 4)
        self._obj = torch.as_tensor(objectness, dtype=torch.float32)
        self._size = size
        self._fail = fail

    @property
    def input_size(self):
        return (self._size, self._size)

    def forward(self, image):
        if self._fail:
            raise RuntimeError("backend exploded")
        n = self._boxes.shape[0]
        scores = torch.tensor([[0.9, 0.1]] * n)
        return RawDetections(boxes=self._boxes, objectness=self._obj,
                             class_scores=scores, class_names=self.class_names)

    def parameter_checksum(self):
        return "stub"


IMG32 = np.zeros((32, 32, 3), dtype=np.float32)


def test_detect_filters_below_confidence():
    stub = StubAdapter([[0, 0, 4, 4], [8, 8, 12, 12], [16, 16, 20, 20]],
                       [0.39, 0.4, 0.95])
    dets = detect(stub, IMG32, conf_threshold=0.4)
    # exactly-at-threshold candidate survives, the one below does not
    assert [round(float(d.objectness), 2) for d in dets] == [0.95, 0.4]


def test_detect_applies_nms():
    stub = StubAdapter([[0, 0, 10, 10], [0, 0, 10, 10], [20, 20, 28, 28]],
                       [0.9, 0.8, 0.7])
    dets = detect(stub, IMG32)
    assert len(dets) == 2
    assert float(dets[0].objectness) == pytest.approx(0.9, abs=1e-6)


def test_detect_sorted_descending():
    stub = StubAdapter([[0, 0, 4, 4], [8, 8, 12, 12], [16, 16, 20, 20]],
                       [0.5, 0.9, 0.7])
    dets = detect(stub, IMG32)
    scores = [float(d.objectness) for d in dets]
    assert scores == sorted(scores, reverse=True)


def test_detect_rejects_wrong_image_size():
    stub = StubAdapter([[0, 0, 4, 4]], [0.9])
    with pytest.raises(InvariantError, match="input size"):
        detect(stub, np.zeros((16, 16, 3), dtype=np.float32))


def test_detect_wraps_adapter_failure_with_id():
    stub = StubAdapter([[0, 0, 4, 4]], [0.9], fail=True)
    with pytest.raises(PatchBenchError, match="stub"):
        detect(stub, IMG32)


def test_detect_keeps_gradient_graph():
    class GradStub(StubAdapter):
        def forward(self, image):
            v = image.sum() * 0 + image[0, 0, 0]  # ties objectness to the image
            obj = torch.stack([torch.sigmoid(v + 1.0)])
            scores = torch.tensor([[0.9, 0.1]])
            return RawDetections(boxes=torch.tensor([[0.0, 0.0, 4.0, 4.0]]),
                                 objectness=obj, class_scores=scores,
                                 class_names=self.class_names)

    stub = GradStub([[0, 0, 4, 4]], [0.9])
    img = torch.full((32, 32, 3), 0.5, requires_grad=True)
    dets = detect(stub, img)
    assert len(dets) == 1
    loss = objectness_loss(dets)
    assert isinstance(loss, torch.Tensor)
    loss.backward()
    assert img.grad is not None
    assert img.grad.abs().sum() > 0


def test_raw_detections_shape_validation():
    with pytest.raises(InvariantError):
        RawDetections(boxes=torch.zeros(3, 5), objectness=torch.zeros(3),
                      class_scores=torch.zeros(3, 2), class_names=("a", "b"))
    with pytest.raises(InvariantError):
        RawDetections(boxes=torch.zeros(3, 4), objectness=torch.zeros(2),
                      class_scores=torch.zeros(3, 2), class_names=("a", "b"))
    with pytest.raises(InvariantError):
        RawDetections(boxes=torch.zeros(3, 4), objectness=torch.zeros(3),
                      class_scores=torch.zeros(3, 3), class_names=("a", "b"))


# --- toy detector ------------------------------------------------------------


def test_toy_detector_is_small():
    assert ToyDetector().n_parameters() < 120_000


def test_toy_detector_decode_sanity():
    det = ToyDetector(input_size=96)
    raw = det.forward(np.random.default_rng(0).uniform(size=(96, 96, 3)).astype(np.float32))
    g = det.grid_size
    assert raw.boxes.shape == (g * g, 4)
    assert torch.isfinite(raw.boxes).all()
    assert (raw.boxes[:, 2] > raw.boxes[:, 0]).all()
    assert (raw.boxes[:, 3] > raw.boxes[:, 1]).all()
    assert raw.objectness.min() >= 0 and raw.objectness.max() <= 1
    assert torch.allclose(raw.class_scores.sum(dim=1), torch.ones(g * g))


def test_toy_detector_rejects_bad_input_size():
    with pytest.raises(InvariantError):
        ToyDetector(input_size=100)  # not a stride multiple
    det = ToyDetector(input_size=96)
    with pytest.raises(InvariantError):
        det.forward(np.zeros((64, 64, 3), dtype=np.float32))


def test_checksum_tracks_weights():
    torch.manual_seed(0)
    det = ToyDetector()
    c1 = det.parameter_checksum()
    assert c1 == det.parameter_checksum()
    det.forward(np.zeros((96, 96, 3), dtype=np.float32))
    assert det.parameter_checksum() == c1  # inference does not touch weights
    with torch.no_grad():
        det.head.bias += 1e-3
    assert det.parameter_checksum() != c1


def test_checksum_differs_between_inits():
    torch.manual_seed(0)
    a = ToyDetector()
    torch.manual_seed(1)
    b = ToyDetector()
    assert a.parameter_checksum() != b.parameter_checksum()


def test_freeze_stops_weight_grads_but_not_input_grads():
    det = ToyDetector()
    det.freeze()
    assert all(not p.requires_grad for p in det.parameters())
    img = torch.rand(96, 96, 3, requires_grad=True)
    raw = det.forward(img)
    raw.objectness.sum().backward()
    assert img.grad is not None
    assert img.grad.abs().sum() > 0


def test_save_load_round_trip(tmp_path):
    torch.manual_seed(3)
    det = ToyDetector(anchor=17.0, detector_id="toy-a")
    path = tmp_path / "det.pt"
    det.save(path)
    back = ToyDetector.load(path)
    assert back.parameter_checksum() == det.parameter_checksum()
    assert back.id == "toy-a"
    assert back.anchor == 17.0
    img = np.random.default_rng(1).uniform(size=(96, 96, 3)).astype(np.float32)
    a, b = det.forward(img), back.forward(img)
    assert torch.equal(a.objectness, b.objectness)
    assert torch.equal(a.boxes, b.boxes)


def test_load_rejects_bad_version(tmp_path):
    torch.manual_seed(0)
    det = ToyDetector()
    path = tmp_path / "det.pt"
    det.save(path)
    payload = torch.load(path, weights_only=False)
    payload["format_version"] = 999
    torch.save(payload, path)
    with pytest.raises(DataError, match="format version"):
        ToyDetector.load(path)


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "junk.pt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        ToyDetector.load(path)


def test_registry(tmp_path):
    torch.manual_seed(0)
    det = ToyDetector()
    path = tmp_path / "det.pt"
    det.save(path)
    back = load_detector("toy", path)
    assert back.parameter_checksum() == det.parameter_checksum()
    with pytest.raises(ConfigError, match="unknown detector kind"):
        load_detector("yolo9000", path)
    register_detector("custom", lambda p: "loaded")
    assert load_detector("custom", None) == "loaded"


# --- training ----------------------------------------------------------------


def test_train_rejects_empty_and_missing_class():
    with pytest.raises(DataError):
        train_toy_detector([])
    spec = SyntheticSceneSpec(targets_per_image=(0, 0), distractors_per_image=(1, 2))
    scenes = generate_synthetic_dataset(spec, 5, seed=0)
    with pytest.raises(DataError, match="aircraft"):
        train_toy_detector(scenes, epochs=1)


def test_train_fails_loudly_below_ap_bar():
    spec = SyntheticSceneSpec()
    scenes = generate_synthetic_dataset(spec, 20, seed=3)
    with pytest.raises(PatchBenchError, match="clean AP"):
        train_toy_detector(scenes, epochs=1, min_clean_ap=0.999)


def test_trained_detector_detects(tiny_bundle):
    det = tiny_bundle["detector"]
    ap = clean_ap(det, tiny_bundle["test"], "aircraft")
    assert ap is not None and ap > 0.5
    # weights came out frozen
    assert all(not p.requires_grad for p in det.parameters())


def test_attack_gradient_reaches_patch_through_detector(tiny_bundle):
    det = tiny_bundle["detector"]
    scene = tiny_bundle["test"][0]
    boxes = scene.boxes_of_class("aircraft")
    assert boxes
    patch = torch.rand(50, 50, 3, requires_grad=True)
    from patchbench.placement import place_all
    x = place_all(scene.pixels, patch, PlacementSpec(r_s=0.2), boxes)
    dets = detect(det, x)
    loss = objectness_loss(dets)
    if isinstance(loss, torch.Tensor):
        loss.backward()
        assert patch.grad is not None
        assert torch.isfinite(patch.grad).all()
        assert patch.grad.abs().sum() > 0
    else:
        # nothing detected on this scene; the no-detection contract is loss 0
        assert loss == 0.0
