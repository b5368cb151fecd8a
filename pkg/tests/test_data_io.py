"""Dataset formats, coordinate conversions, letterboxing, patch artifacts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchbench.data_io import (
    DatasetRef,
    Letterbox,
    corners_to_yolo,
    letterbox_scene,
    load_dataset,
    load_patch,
    save_dataset,
    save_patch,
    yolo_to_corners,
)
from patchbench.types import BoundingBox, DataError, Patch, SceneImage

QUANT = 0.5 / 255.0 + 1e-6  # max error from one 8-bit quantization


def _scene(i, n_boxes=2, size=32):
    rng = np.random.default_rng(i)
    px = rng.random((size, size, 3), dtype=np.float32)
    boxes = []
    for j in range(n_boxes):
        x1, y1 = 2.0 + 3 * j, 4.0 + 2 * j
        boxes.append(("aircraft" if j % 2 == 0 else "distractor",
                      BoundingBox(x1, y1, x1 + 7.0, y1 + 5.0)))
    return SceneImage(pixels=px, annotations=boxes, image_id=f"scene-{i:03d}")


@pytest.mark.parametrize("fmt", ["internal_json", "voc_xml", "yolo_txt"])
def test_round_trip_boxes_and_order(tmp_path, fmt):
    scenes = [_scene(i) for i in range(3)]
    save_dataset(scenes, tmp_path, format=fmt, split="train")
    back = load_dataset(DatasetRef(root=str(tmp_path), format=fmt))
    assert [s.image_id for s in back] == [s.image_id for s in scenes]
    for orig, got in zip(scenes, back):
        assert got.pixels.shape == orig.pixels.shape
        assert np.abs(got.pixels - orig.pixels).max() <= QUANT
        assert [c for c, _ in got.annotations] == [c for c, _ in orig.annotations]
        for (_, a), (_, b) in zip(orig.annotations, got.annotations):
            if fmt == "yolo_txt":
                for u, v in zip((a.x1, a.y1, a.x2, a.y2), (b.x1, b.y1, b.x2, b.y2)):
                    assert abs(u - v) < 1e-9
            else:
                assert (a.x1, a.y1, a.x2, a.y2) == (b.x1, b.y1, b.x2, b.y2)


def test_load_orders_lexicographically(tmp_path):
    scenes = [_scene(i) for i in (3, 1, 2)]
    save_dataset(scenes, tmp_path, format="internal_json")
    back = load_dataset(DatasetRef(root=str(tmp_path), format="internal_json"))
    assert [s.image_id for s in back] == ["scene-001", "scene-002", "scene-003"]


def test_class_filter(tmp_path):
    save_dataset([_scene(0, n_boxes=2)], tmp_path, format="internal_json")
    ref = DatasetRef(root=str(tmp_path), format="internal_json",
                     classes=("aircraft",))
    back = load_dataset(ref)
    assert all(c == "aircraft" for c, _ in back[0].annotations)
    assert len(back[0].annotations) == 1


def test_manifest_version_mismatch(tmp_path):
    save_dataset([_scene(0)], tmp_path, format="internal_json")
    manifest = tmp_path / "manifest_train.json"
    manifest.write_text(manifest.read_text().replace('"version": 1', '"version": 99'))
    with pytest.raises(DataError, match="version"):
        load_dataset(DatasetRef(root=str(tmp_path), format="internal_json"))


def test_missing_image_file_named(tmp_path):
    save_dataset([_scene(0)], tmp_path, format="internal_json")
    (tmp_path / "images" / "train" / "scene-000.png").unlink()
    with pytest.raises(DataError, match="scene-000.png"):
        load_dataset(DatasetRef(root=str(tmp_path), format="internal_json"))


def test_corrupt_image_error_names_path(tmp_path):
    save_dataset([_scene(0)], tmp_path, format="internal_json")
    bad = tmp_path / "images" / "train" / "scene-000.png"
    bad.write_bytes(b"not a png at all")
    with pytest.raises(DataError, match="scene-000.png"):
        load_dataset(DatasetRef(root=str(tmp_path), format="internal_json"))


def test_yolo_bad_line_names_file_and_line(tmp_path):
    save_dataset([_scene(0)], tmp_path, format="yolo_txt")
    lbl = tmp_path / "labels" / "train" / "scene-000.txt"
    lines = lbl.read_text().splitlines()
    lines[1] = "0 0.5 0.5 nope 0.2"
    lbl.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=r"scene-000\.txt:2"):
        load_dataset(DatasetRef(root=str(tmp_path), format="yolo_txt"))


def test_yolo_class_index_out_of_range(tmp_path):
    save_dataset([_scene(0)], tmp_path, format="yolo_txt")
    lbl = tmp_path / "labels" / "train" / "scene-000.txt"
    lbl.write_text("7 0.5 0.5 0.2 0.2\n")
    with pytest.raises(DataError, match="class index 7"):
        load_dataset(DatasetRef(root=str(tmp_path), format="yolo_txt"))


def test_voc_parse_error_names_file_and_line(tmp_path):
    save_dataset([_scene(0)], tmp_path, format="voc_xml")
    xml = tmp_path / "annotations" / "train" / "scene-000.xml"
    xml.write_text("<annotation><object></annotation")
    with pytest.raises(DataError, match=r"scene-000\.xml: line"):
        load_dataset(DatasetRef(root=str(tmp_path), format="voc_xml"))


def test_count_mismatch_detected(tmp_path):
    save_dataset([_scene(0), _scene(1)], tmp_path, format="voc_xml")
    (tmp_path / "annotations" / "train" / "scene-001.xml").unlink()
    with pytest.raises(DataError, match="2 images vs 1 annotation"):
        load_dataset(DatasetRef(root=str(tmp_path), format="voc_xml"))


def test_two_saves_byte_identical(tmp_path):
    scenes = [_scene(i) for i in range(2)]
    save_dataset(scenes, tmp_path / "a", format="internal_json")
    save_dataset(scenes, tmp_path / "b", format="internal_json")
    a = (tmp_path / "a" / "manifest_train.json").read_bytes()
    b = (tmp_path / "b" / "manifest_train.json").read_bytes()
    assert a == b


@settings(max_examples=200, deadline=None)
@given(
    x1=st.floats(0.0, 500.0), y1=st.floats(0.0, 500.0),
    w=st.floats(0.5, 300.0), h=st.floats(0.5, 300.0),
    width=st.integers(16, 4000), height=st.integers(16, 4000),
)
def test_yolo_conversion_round_trip(x1, y1, w, h, width, height):
    box = BoundingBox(x1, y1, x1 + w, y1 + h)
    cx, cy, bw, bh = corners_to_yolo(box, width, height)
    back = yolo_to_corners(cx, cy, bw, bh, width, height)
    again = corners_to_yolo(back, width, height)
    for u, v in zip((cx, cy, bw, bh), again):
        assert abs(u - v) < 1e-9


def test_letterbox_geometry():
    lb = Letterbox.fit(width=200, height=100, size=96)
    assert lb.scale == 96 / 200
    assert lb.pad_x == 0.0
    assert lb.pad_y == (96 - 100 * lb.scale) / 2.0
    box = BoundingBox(10.0, 20.0, 60.0, 70.0)
    there = lb.apply_box(box)
    back = lb.invert_box(there)
    for u, v in zip((box.x1, box.y1, box.x2, box.y2),
                    (back.x1, back.y1, back.x2, back.y2)):
        assert abs(u - v) < 1e-9


def test_letterbox_scene_shape_and_boxes():
    rng = np.random.default_rng(0)
    scene = SceneImage(pixels=rng.random((100, 200, 3), dtype=np.float32),
                       annotations=[("aircraft", BoundingBox(10.0, 20.0, 60.0, 70.0))],
                       image_id="wide")
    out, lb = letterbox_scene(scene, 96)
    assert out.pixels.shape == (96, 96, 3)
    assert out.image_id == "wide"
    (_, b), = out.annotations
    assert b.x2 <= 96 and b.y2 <= 96
    expected = lb.apply_box(scene.annotations[0][1])
    assert (b.x1, b.y1, b.x2, b.y2) == (
        expected.x1, expected.y1, expected.x2, expected.y2)


def test_load_dataset_letterboxes_when_size_given(tmp_path):
    rng = np.random.default_rng(1)
    scene = SceneImage(pixels=rng.random((64, 128, 3), dtype=np.float32),
                       annotations=[("aircraft", BoundingBox(8.0, 8.0, 24.0, 24.0))],
                       image_id="wide")
    save_dataset([scene], tmp_path, format="internal_json")
    back = load_dataset(DatasetRef(root=str(tmp_path), format="internal_json"),
                        input_size=96)
    assert back[0].pixels.shape == (96, 96, 3)


def test_patch_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    patch = Patch(pixels=rng.random((50, 50, 3)), id="p0")
    png, sidecar = save_patch(
        patch, tmp_path, placement_mode="on_target",
        hyperparameters={"alpha": 2.5}, proxy_detector="toy", config_hash="abc")
    assert png.is_file() and sidecar.is_file()
    back, meta = load_patch(tmp_path)
    assert back.id == "p0"
    assert back.pixels.shape == (50, 50, 3)
    assert np.abs(back.pixels - patch.pixels).max() <= QUANT
    assert meta["placement_mode"] == "on_target"
    assert meta["proxy_detector"] == "toy"
    assert meta["resolution"] == [50, 50]

    # metadata writes are deterministic
    save_patch(patch, tmp_path / "again", placement_mode="on_target",
               hyperparameters={"alpha": 2.5}, proxy_detector="toy",
               config_hash="abc")
    assert (tmp_path / "again" / "patch.json").read_bytes() == sidecar.read_bytes()
