"""Dataset ingestion and artifact persistence.

Three dataset layouts share one on-disk convention under a root directory:

    root/
      manifest_<split>.json         internal_json: versioned manifest
      images/<split>/<id>.png       all formats
      annotations/<split>/<id>.xml  voc_xml: one XML per image
      labels/<split>/<id>.txt       yolo_txt: "class cx cy w h" normalized
      classes.txt                   yolo_txt: class-index -> name table

The internal JSON manifest is the canonical format; the XML and YOLO
adapters convert into the same in-memory scenes. Boxes are written with
full float repr so corner coordinates survive a round trip exactly;
pixels are 8-bit PNG (quantization happens only here).
"""

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .types import BoundingBox, DataError, InvariantError, Patch, SceneImage

MANIFEST_VERSION = 1
PATCH_META_VERSION = 1


@dataclass(frozen=True)
class DatasetRef:
    """Pointer to one split of an on-disk dataset."""

    root: str
    format: str  # internal_json | voc_xml | yolo_txt
    classes: tuple[str, ...] = ()  # empty keeps every class
    split: str = "train"

    def __post_init__(self):
        if self.format not in ("internal_json", "voc_xml", "yolo_txt"):
            raise InvariantError(f"unknown dataset format {self.format!r}")
        if self.split not in ("train", "test"):
            raise InvariantError(f"split {self.split!r} must be train or test")


# ---------------------------------------------------------------- images

def load_image(path) -> np.ndarray:
    """Decode an image file to (H, W, 3) float32 in [0, 1]."""
    p = Path(path)
    try:
        with Image.open(p) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except FileNotFoundError:
        raise DataError(f"image file missing: {p}") from None
    except Exception as e:
        raise DataError(f"cannot read image {p}: {e}") from None
    return arr / 255.0


def save_image(pixels: np.ndarray, path) -> None:
    """Write (H, W, 3) float [0, 1] pixels as an 8-bit PNG."""
    arr = np.asarray(pixels, dtype=np.float64)
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q, mode="RGB").save(path)


# ------------------------------------------------------------- letterbox

@dataclass(frozen=True)
class Letterbox:
    """Resize-with-padding record mapping original to network coordinates."""

    scale: float
    pad_x: float
    pad_y: float
    original_width: int
    original_height: int
    size: int

    @classmethod
    def fit(cls, width: int, height: int, size: int) -> "Letterbox":
        s = size / max(width, height)
        return cls(scale=s, pad_x=(size - width * s) / 2.0,
                   pad_y=(size - height * s) / 2.0,
                   original_width=width, original_height=height, size=size)

    def apply_box(self, b: BoundingBox) -> BoundingBox:
        return BoundingBox(b.x1 * self.scale + self.pad_x,
                           b.y1 * self.scale + self.pad_y,
                           b.x2 * self.scale + self.pad_x,
                           b.y2 * self.scale + self.pad_y)

    def invert_box(self, b: BoundingBox) -> BoundingBox:
        return BoundingBox((b.x1 - self.pad_x) / self.scale,
                           (b.y1 - self.pad_y) / self.scale,
                           (b.x2 - self.pad_x) / self.scale,
                           (b.y2 - self.pad_y) / self.scale)


def letterbox_scene(scene: SceneImage, size: int,
                    fill: float = 0.5) -> tuple[SceneImage, Letterbox]:
    """Aspect-preserving resize onto a size x size canvas, boxes transformed."""
    lb = Letterbox.fit(scene.width, scene.height, size)
    new_w = max(1, int(round(scene.width * lb.scale)))
    new_h = max(1, int(round(scene.height * lb.scale)))
    q = np.clip(np.rint(np.asarray(scene.pixels, dtype=np.float64) * 255.0),
                0, 255).astype(np.uint8)
    resized = Image.fromarray(q, mode="RGB").resize((new_w, new_h), Image.BILINEAR)
    canvas = np.full((size, size, 3), fill, dtype=np.float32)
    x0, y0 = int(round(lb.pad_x)), int(round(lb.pad_y))
    canvas[y0:y0 + new_h, x0:x0 + new_w] = np.asarray(resized, dtype=np.float32) / 255.0
    boxes = [(c, lb.apply_box(b)) for c, b in scene.annotations]
    return SceneImage(pixels=canvas, annotations=boxes, image_id=scene.image_id), lb


# --------------------------------------------------- coordinate adapters

def yolo_to_corners(cx: float, cy: float, w: float, h: float,
                    width: int, height: int) -> BoundingBox:
    """Normalized center format to absolute corner format."""
    return BoundingBox((cx - w / 2.0) * width, (cy - h / 2.0) * height,
                       (cx + w / 2.0) * width, (cy + h / 2.0) * height)


def corners_to_yolo(b: BoundingBox, width: int, height: int) -> tuple[float, float, float, float]:
    """Absolute corner format to normalized center format."""
    return ((b.x1 + b.x2) / 2.0 / width, (b.y1 + b.y2) / 2.0 / height,
            (b.x2 - b.x1) / width, (b.y2 - b.y1) / height)


# ----------------------------------------------------------------- save

def _image_dir(root: Path, split: str) -> Path:
    return root / "images" / split


def save_dataset(scenes: list[SceneImage], root, format: str = "internal_json",
                 split: str = "train") -> Path:
    """Write scenes under ``root`` in the given format; returns the root."""
    ref = DatasetRef(root=str(root), format=format, split=split)  # validates
    rootp = Path(root)
    img_dir = _image_dir(rootp, split)
    img_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sc in enumerate(scenes):
        image_id = sc.image_id or f"image-{i:05d}"
        save_image(sc.pixels, img_dir / f"{image_id}.png")
        entries.append((image_id, sc))
    entries.sort(key=lambda t: t[0])

    if ref.format == "internal_json":
        manifest = {
            "version": MANIFEST_VERSION,
            "split": split,
            "images": [
                {
                    "file": f"images/{split}/{image_id}.png",
                    "id": image_id,
                    "annotations": [
                        {"class": c, "x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2}
                        for c, b in sc.annotations
                    ],
                }
                for image_id, sc in entries
            ],
        }
        out = rootp / f"manifest_{split}.json"
        out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")
    elif ref.format == "voc_xml":
        ann_dir = rootp / "annotations" / split
        ann_dir.mkdir(parents=True, exist_ok=True)
        for image_id, sc in entries:
            top = ET.Element("annotation")
            ET.SubElement(top, "filename").text = f"{image_id}.png"
            size = ET.SubElement(top, "size")
            ET.SubElement(size, "width").text = str(sc.width)
            ET.SubElement(size, "height").text = str(sc.height)
            ET.SubElement(size, "depth").text = "3"
            for c, b in sc.annotations:
                obj = ET.SubElement(top, "object")
                ET.SubElement(obj, "name").text = c
                bb = ET.SubElement(obj, "bndbox")
                ET.SubElement(bb, "xmin").text = repr(b.x1)
                ET.SubElement(bb, "ymin").text = repr(b.y1)
                ET.SubElement(bb, "xmax").text = repr(b.x2)
                ET.SubElement(bb, "ymax").text = repr(b.y2)
            tree = ET.ElementTree(top)
            ET.indent(tree)
            tree.write(ann_dir / f"{image_id}.xml", encoding="utf-8")
    else:  # yolo_txt
        lbl_dir = rootp / "labels" / split
        lbl_dir.mkdir(parents=True, exist_ok=True)
        names = sorted({c for _, sc in entries for c, _ in sc.annotations})
        (rootp / "classes.txt").write_text(
            "".join(f"{n}\n" for n in names), encoding="utf-8")
        index = {n: i for i, n in enumerate(names)}
        for image_id, sc in entries:
            lines = []
            for c, b in sc.annotations:
                cx, cy, w, h = corners_to_yolo(b, sc.width, sc.height)
                lines.append(f"{index[c]} {cx!r} {cy!r} {w!r} {h!r}\n")
            (lbl_dir / f"{image_id}.txt").write_text("".join(lines), encoding="utf-8")
    return rootp


# ----------------------------------------------------------------- load

def _keep(cls: str, ref: DatasetRef) -> bool:
    return not ref.classes or cls in ref.classes


def _require_box(make, where: str) -> BoundingBox:
    try:
        return make()
    except (InvariantError, ValueError) as e:
        raise DataError(f"{where}: {e}") from None


def _load_internal(ref: DatasetRef, rootp: Path) -> list[SceneImage]:
    manifest_path = rootp / f"manifest_{ref.split}.json"
    if not manifest_path.is_file():
        raise DataError(f"manifest missing: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{manifest_path}: line {e.lineno}: {e.msg}") from None
    version = manifest.get("version")
    if version != MANIFEST_VERSION:
        raise DataError(
            f"{manifest_path}: manifest version {version!r}, expected {MANIFEST_VERSION}")
    scenes = []
    for entry in sorted(manifest.get("images", []), key=lambda e: e.get("file", "")):
        where = f"{manifest_path} (image {entry.get('id', '?')})"
        try:
            file, image_id, anns = entry["file"], entry["id"], entry["annotations"]
        except (KeyError, TypeError) as e:
            raise DataError(f"{where}: missing field {e}") from None
        pixels = load_image(rootp / file)
        boxes = []
        for a in anns:
            if not _keep(a.get("class", ""), ref):
                continue
            box = _require_box(
                lambda a=a: BoundingBox(a["x1"], a["y1"], a["x2"], a["y2"]), where)
            boxes.append((a["class"], box))
        scenes.append(SceneImage(pixels=pixels, annotations=boxes, image_id=image_id))
    return scenes


def _load_voc(ref: DatasetRef, rootp: Path) -> list[SceneImage]:
    ann_dir = rootp / "annotations" / ref.split
    img_dir = _image_dir(rootp, ref.split)
    if not ann_dir.is_dir():
        raise DataError(f"annotation directory missing: {ann_dir}")
    xmls = sorted(ann_dir.glob("*.xml"))
    images = sorted(img_dir.glob("*.png")) if img_dir.is_dir() else []
    if len(xmls) != len(images):
        raise DataError(
            f"{rootp}: {len(images)} images vs {len(xmls)} annotation files")
    scenes = []
    for xml_path in xmls:
        try:
            top = ET.parse(xml_path).getroot()
        except ET.ParseError as e:
            raise DataError(f"{xml_path}: line {e.position[0]}: {e.msg}") from None
        image_id = xml_path.stem
        pixels = load_image(img_dir / f"{image_id}.png")
        boxes = []
        for obj in top.findall("object"):
            name = obj.findtext("name")
            bb = obj.find("bndbox")
            if name is None or bb is None:
                raise DataError(f"{xml_path}: object without name/bndbox")
            if not _keep(name, ref):
                continue
            vals = {}
            for tag in ("xmin", "ymin", "xmax", "ymax"):
                text = bb.findtext(tag)
                if text is None:
                    raise DataError(f"{xml_path}: bndbox missing {tag}")
                try:
                    vals[tag] = float(text)
                except ValueError:
                    raise DataError(f"{xml_path}: bad {tag} value {text!r}") from None
            box = _require_box(
                lambda v=vals: BoundingBox(v["xmin"], v["ymin"], v["xmax"], v["ymax"]),
                str(xml_path))
            boxes.append((name, box))
        scenes.append(SceneImage(pixels=pixels, annotations=boxes, image_id=image_id))
    return scenes


def _load_yolo(ref: DatasetRef, rootp: Path) -> list[SceneImage]:
    lbl_dir = rootp / "labels" / ref.split
    img_dir = _image_dir(rootp, ref.split)
    classes_path = rootp / "classes.txt"
    if not classes_path.is_file():
        raise DataError(f"class table missing: {classes_path}")
    names = [ln.strip() for ln in classes_path.read_text(encoding="utf-8").splitlines()
             if ln.strip()]
    if not lbl_dir.is_dir():
        raise DataError(f"label directory missing: {lbl_dir}")
    labels = sorted(lbl_dir.glob("*.txt"))
    images = sorted(img_dir.glob("*.png")) if img_dir.is_dir() else []
    if len(labels) != len(images):
        raise DataError(
            f"{rootp}: {len(images)} images vs {len(labels)} label files")
    scenes = []
    for lbl_path in labels:
        image_id = lbl_path.stem
        pixels = load_image(img_dir / f"{image_id}.png")
        h, w = pixels.shape[:2]
        boxes = []
        for lineno, line in enumerate(
                lbl_path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 5:
                raise DataError(
                    f"{lbl_path}:{lineno}: expected 5 fields, got {len(parts)}")
            try:
                idx = int(parts[0])
                cx, cy, bw, bh = (float(v) for v in parts[1:])
            except ValueError:
                raise DataError(f"{lbl_path}:{lineno}: unparseable values {line!r}") from None
            if not 0 <= idx < len(names):
                raise DataError(
                    f"{lbl_path}:{lineno}: class index {idx} outside table "
                    f"of {len(names)} names")
            if not _keep(names[idx], ref):
                continue
            box = _require_box(
                lambda: yolo_to_corners(cx, cy, bw, bh, w, h), f"{lbl_path}:{lineno}")
            boxes.append((names[idx], box))
        scenes.append(SceneImage(pixels=pixels, annotations=boxes, image_id=image_id))
    return scenes


def load_dataset(ref: DatasetRef, input_size: int | None = None) -> list[SceneImage]:
    """Load one dataset split, ordered lexicographically by filename.

    With ``input_size`` set, images whose shape differs are letterbox-resized
    (annotations transformed along; the mapping is recomputable via
    ``Letterbox.fit`` from the original size).
    """
    rootp = Path(ref.root)
    if not rootp.is_dir():
        raise DataError(f"dataset root missing: {rootp}")
    loader = {"internal_json": _load_internal,
              "voc_xml": _load_voc,
              "yolo_txt": _load_yolo}[ref.format]
    scenes = loader(ref, rootp)
    if input_size is not None:
        scenes = [sc if sc.pixels.shape[:2] == (input_size, input_size)
                  else letterbox_scene(sc, input_size)[0]
                  for sc in scenes]
    return scenes


# ---------------------------------------------------------- patch files

def save_patch(patch: Patch, out_dir, *, placement_mode: str = "",
               hyperparameters: dict | None = None, proxy_detector: str = "",
               config_hash: str = "", extra: dict | None = None) -> tuple[Path, Path]:
    """Write patch.png plus a patch.json sidecar; returns both paths.

    The sidecar JSON has stable key order, so two saves of the same patch
    metadata are byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    png_path = out / "patch.png"
    json_path = out / "patch.json"
    save_image(patch.pixels, png_path)
    meta = {
        "version": PATCH_META_VERSION,
        "id": patch.id,
        "resolution": [int(patch.pixels.shape[0]), int(patch.pixels.shape[1])],
        "placement_mode": placement_mode,
        "hyperparameters": hyperparameters or {},
        "proxy_detector": proxy_detector,
        "config_hash": config_hash,
    }
    if extra:
        meta.update(extra)
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    return png_path, json_path


def load_patch(path) -> tuple[Patch, dict]:
    """Read a patch.png (and sidecar when present) back into a Patch."""
    png_path = Path(path)
    if png_path.is_dir():
        png_path = png_path / "patch.png"
    pixels = load_image(png_path)
    meta = {}
    sidecar = png_path.with_suffix(".json")
    if sidecar.is_file():
        try:
            meta = json.loads(sidecar.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataError(f"{sidecar}: line {e.lineno}: {e.msg}") from None
    return Patch(pixels=pixels, id=str(meta.get("id", png_path.stem))), meta


# --------------------------------------------------------------- reports

def save_report(report, path) -> Path:
    """Write a benchmark report as canonical JSON (stable bytes)."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    p.write_text(text, encoding="utf-8")
    return p


def load_report(path):
    """Read a benchmark report; version mismatches are data errors."""
    from .benchmark import BenchmarkReport

    p = Path(path)
    if not p.is_file():
        raise DataError(f"report file missing: {p}")
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{p}: line {e.lineno}: {e.msg}") from None
    try:
        return BenchmarkReport.from_dict(d)
    except (KeyError, TypeError) as e:
        raise DataError(f"{p}: malformed report ({e})") from None
