"""Dataset manifests and loaders for the on-disk annotation formats.

Layouts under a dataset root:
    keypoint-annotation-file  annotations.json + images/   (images/annotations/categories container)
    box-annotation-file       annotations.json + images/
    mask-directory            images/*.png + masks/*.png (same stem) + optional classes.txt ("id name" lines)
    identity-directory        <identity>/<image>.png
    attribute-table           attributes.csv (header: image,<attribute>...) + images/
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from PIL import Image

from ..config import TASK_TYPES, ConfigError
from .generator import topdown_crop
from .samples import FULL_SIZES, MultiTaskSample, normalize_keypoints, resize_policy, xyxy_to_boxes

FORMAT_TASK = {
    "keypoint-annotation-file": "pose",
    "mask-directory": "seg",
    "identity-directory": "reid",
    "attribute-table": "par",
    "box-annotation-file": "peddet",
}
FORMATS = ("synthetic",) + tuple(FORMAT_TASK)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class DataError(ValueError):
    """A dataset file could not be parsed; names the file and, when known, the record index."""

    def __init__(self, path, message: str, index: Optional[int] = None):
        self.path = str(path)
        self.index = index
        where = self.path if index is None else f"{self.path} record {index}"
        super().__init__(f"{where}: {message}")


@dataclass
class DatasetManifest:
    dataset_id: str
    task_type: str
    root: str
    format: str
    split: str = "train"
    batch_size: int = 1
    options: dict = field(default_factory=dict)
    task_id: Optional[str] = None   # model task fed by this dataset; defaults to dataset_id

    def __post_init__(self):
        if self.task_id is None:
            self.task_id = self.dataset_id
        if self.task_type not in TASK_TYPES:
            raise ConfigError(f"dataset {self.dataset_id!r}: unknown task type {self.task_type!r}")
        if self.format not in FORMATS:
            raise ConfigError(f"dataset {self.dataset_id!r}: unknown format {self.format!r}")
        if self.format != "synthetic" and FORMAT_TASK[self.format] != self.task_type:
            raise ConfigError(f"dataset {self.dataset_id!r}: format {self.format!r} does not carry "
                              f"{self.task_type!r} labels")
        if int(self.batch_size) < 1:
            raise ConfigError(f"dataset {self.dataset_id!r}: batch size must be >= 1")

    def path(self, data_root: Optional[str] = None) -> Path:
        p = Path(self.root)
        return p if p.is_absolute() or data_root is None else Path(data_root) / p


def parse_manifest(doc: dict) -> list:
    """Manifest document {"datasets": [ {dataset_id, task_type, root, format, ...}, ... ]}."""
    if not isinstance(doc, dict) or not isinstance(doc.get("datasets"), list):
        raise ConfigError("manifest must be a mapping with a 'datasets' list")
    unknown = set(doc) - {"datasets"}
    if unknown:
        raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
    out = []
    fields = set(DatasetManifest.__dataclass_fields__)
    for i, d in enumerate(doc["datasets"]):
        if not isinstance(d, dict):
            raise ConfigError(f"manifest entry {i} is not a mapping")
        bad = set(d) - fields
        if bad:
            raise ConfigError(f"manifest entry {i}: unknown keys {sorted(bad)}")
        try:
            out.append(DatasetManifest(**d))
        except TypeError as e:
            raise ConfigError(f"manifest entry {i}: {e}") from None
    ids = [m.dataset_id for m in out]
    if len(set(ids)) != len(ids):
        raise ConfigError("dataset ids must be unique")
    return out


def read_manifest(path) -> list:
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read manifest {path}: {e}") from None
    return parse_manifest(doc)


@dataclass
class LoadResult:
    samples: list
    skipped: int = 0
    slots: int = 0           # query slots the data asks for: joints, classes, attributes or identities
    class_names: tuple = ()


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), np.float32) / 255
    except (OSError, ValueError) as e:
        raise DataError(path, f"unreadable image ({e})") from None


def _read_json(path) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise DataError(path, f"cannot open ({e})") from None
    except json.JSONDecodeError as e:
        raise DataError(path, f"invalid JSON ({e})") from None
    for key in ("images", "annotations"):
        if not isinstance(doc.get(key), list):
            raise DataError(path, f"missing '{key}' array")
    return doc


def _image_table(doc, path) -> dict:
    table = {}
    for i, im in enumerate(doc["images"]):
        try:
            table[im["id"]] = (str(im["file_name"]), int(im["height"]), int(im["width"]))
        except (KeyError, TypeError, ValueError):
            raise DataError(path, "image entry needs id, file_name, height, width", i) from None
    return table


def _bbox(ann, path, i) -> list:
    b = ann.get("bbox")
    try:
        b = [float(v) for v in b]
    except (TypeError, ValueError):
        raise DataError(path, f"bbox must be 4 numbers, got {b!r}", i) from None
    if len(b) != 4 or b[2] <= 0 or b[3] <= 0 or not np.all(np.isfinite(b)):
        raise DataError(path, f"bbox must be [x, y, w, h] with positive size, got {b!r}", i)
    return b


def load_keypoint_file(m: DatasetManifest, sizes: Optional[dict] = None, data_root: Optional[str] = None) -> LoadResult:
    """One top-down sample per person annotation; annotations without labeled joints are skipped."""
    sizes = FULL_SIZES if sizes is None else sizes
    root = m.path(data_root)
    path = root / m.options.get("annotation", "annotations.json")
    doc = _read_json(path)
    cats = doc.get("categories") or []
    names = tuple(cats[0].get("keypoints", ())) if cats else ()
    images = _image_table(doc, path)
    K = len(names)
    cache, out, skipped = {}, [], 0
    hw = tuple(sizes["pose"])
    for i, ann in enumerate(doc["annotations"]):
        if not isinstance(ann, dict):
            raise DataError(path, "annotation is not an object", i)
        kps = ann.get("keypoints")
        if kps is None or ann.get("num_keypoints", 1) == 0:
            skipped += 1
            continue
        try:
            kps = np.asarray(kps, np.float64)
        except (TypeError, ValueError):
            raise DataError(path, "keypoints must be numbers", i) from None
        if kps.ndim != 1 or len(kps) % 3 or (K and len(kps) != 3 * K):
            raise DataError(path, f"keypoints length {kps.size} is not 3 x {K or 'K'}", i)
        kps = kps.reshape(-1, 3)
        if not (kps[:, 2] > 0).any():
            skipped += 1
            continue
        box = _bbox(ann, path, i)
        if ann.get("image_id") not in images:
            raise DataError(path, f"unknown image_id {ann.get('image_id')!r}", i)
        fname, H, W = images[ann["image_id"]]
        if fname not in cache:
            cache[fname] = read_image(root / "images" / fname)
        img = cache[fname]
        if img.shape[:2] != (H, W):
            raise DataError(path, f"image {fname} is {img.shape[:2]}, annotation says {(H, W)}", i)
        vis = kps[:, 2] > 0
        crop = topdown_crop(img, box, hw, np.concatenate([kps[:, :2], vis[:, None]], 1))
        gt = {"keypoints": normalize_keypoints(crop["keypoints"], hw)}
        out.append(MultiTaskSample(crop["image"], "pose", gt, m.dataset_id, f"{fname}#{ann.get('id', i)}",
                                   {"valid_hw": hw}))
    return LoadResult(out, skipped, K or (len(out[0].gt["keypoints"]) if out else 0), names)


def load_box_file(m: DatasetManifest, sizes: Optional[dict] = None, data_root: Optional[str] = None) -> LoadResult:
    """One sample per image with its person boxes; images without boxes are skipped."""
    sizes = FULL_SIZES if sizes is None else sizes
    root = m.path(data_root)
    path = root / m.options.get("annotation", "annotations.json")
    doc = _read_json(path)
    images = _image_table(doc, path)
    boxes = {k: [] for k in images}
    for i, ann in enumerate(doc["annotations"]):
        if not isinstance(ann, dict):
            raise DataError(path, "annotation is not an object", i)
        if ann.get("image_id") not in images:
            raise DataError(path, f"unknown image_id {ann.get('image_id')!r}", i)
        if ann.get("iscrowd", 0):
            continue
        boxes[ann["image_id"]].append(_bbox(ann, path, i))
    out, skipped = [], 0
    for img_id, (fname, H, W) in images.items():
        if not boxes[img_id]:
            skipped += 1
            continue
        img = read_image(root / "images" / fname)
        if img.shape[:2] != (H, W):
            raise DataError(root / "images" / fname, f"size {img.shape[:2]} differs from annotation {(H, W)}")
        b = np.asarray(boxes[img_id])
        xyxy = np.stack([b[:, 0], b[:, 1], b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]], 1)
        s = MultiTaskSample(img, "peddet", {"boxes": xyxy_to_boxes(xyxy, (H, W))}, m.dataset_id, fname)
        out.append(resize_policy(s, sizes))
    return LoadResult(out, skipped, max((len(s.gt["boxes"]) for s in out), default=0), ("person",))


def _read_classes(path: Path) -> tuple:
    """classes.txt lines "raw_id name"; returns (raw ids in file order, names)."""
    ids, names = [], []
    for i, line in enumerate(path.read_text().splitlines()):
        if not line.strip():
            continue
        parts = line.split(maxsplit=1)
        try:
            ids.append(int(parts[0]))
        except ValueError:
            raise DataError(path, f"class id {parts[0]!r} is not an integer", i) from None
        names.append(parts[1].strip() if len(parts) > 1 else str(parts[0]))
    if len(set(ids)) != len(ids):
        raise DataError(path, "duplicate class ids")
    return ids, tuple(names)


def _image_files(d: Path) -> list:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if d.is_dir() else []


def load_mask_dir(m: DatasetManifest, sizes: Optional[dict] = None, data_root: Optional[str] = None) -> LoadResult:
    """Images paired with same-stem label PNGs; raw label ids are remapped to 0..P-1 in classes.txt order."""
    sizes = FULL_SIZES if sizes is None else sizes
    root = m.path(data_root)
    files = _image_files(root / "images")
    if not files:
        raise DataError(root / "images", "no images found")
    cls_path = root / "classes.txt"
    raw_ids, names = _read_classes(cls_path) if cls_path.exists() else (None, ())
    out, skipped = [], 0
    for i, f in enumerate(files):
        mask_path = root / "masks" / (f.stem + ".png")
        if not mask_path.exists():
            skipped += 1
            continue
        img = read_image(f)
        try:
            with Image.open(mask_path) as im:
                raw = np.asarray(im).astype(np.int64)
        except OSError as e:
            raise DataError(mask_path, f"unreadable mask ({e})", i) from None
        if raw.ndim != 2 or raw.shape != img.shape[:2]:
            raise DataError(mask_path, f"mask shape {raw.shape} does not match image {img.shape[:2]}", i)
        if raw_ids is not None:
            lut = {r: k for k, r in enumerate(raw_ids)}
            unknown = set(np.unique(raw).tolist()) - set(lut)
            if unknown:
                raise DataError(mask_path, f"label ids {sorted(unknown)} not listed in classes.txt", i)
            cmap = np.vectorize(lut.__getitem__, otypes=[np.int64])(raw)
        else:
            cmap = raw
        s = MultiTaskSample(img, "seg", {"class_map": cmap}, m.dataset_id, f.name)
        out.append(resize_policy(s, sizes))
    n = len(raw_ids) if raw_ids is not None else max((int(s.gt["class_map"].max()) + 1 for s in out), default=0)
    return LoadResult(out, skipped, n, names)


def load_identity_dir(m: DatasetManifest, sizes: Optional[dict] = None, data_root: Optional[str] = None) -> LoadResult:
    """<identity>/<image> layout; identity folder names map to contiguous ids in sorted order.

    Images placed directly under the root carry no identity and are skipped.
    """
    sizes = FULL_SIZES if sizes is None else sizes
    root = m.path(data_root)
    if not root.is_dir():
        raise DataError(root, "identity directory not found")
    idents = sorted(p.name for p in root.iterdir() if p.is_dir())
    skipped = len(_image_files(root))
    out = []
    for k, name in enumerate(idents):
        for f in _image_files(root / name):
            s = MultiTaskSample(read_image(f), "reid", {"identity": k}, m.dataset_id, f"{name}/{f.name}")
            out.append(resize_policy(s, sizes))
    return LoadResult(out, skipped, len(idents), tuple(idents))


def load_attribute_table(m: DatasetManifest, sizes: Optional[dict] = None,
                         data_root: Optional[str] = None) -> LoadResult:
    """Header-first table of 0/1 attribute labels; rows with an empty cell are skipped."""
    sizes = FULL_SIZES if sizes is None else sizes
    root = m.path(data_root)
    path = root / m.options.get("table", "attributes.csv")
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise DataError(path, f"cannot open ({e})") from None
    if not rows or len(rows[0]) < 2 or rows[0][0] != "image":
        raise DataError(path, "header must start with 'image' followed by attribute names")
    names = tuple(rows[0][1:])
    out, skipped = [], 0
    for i, row in enumerate(rows[1:]):
        if len(row) != len(rows[0]):
            raise DataError(path, f"expected {len(rows[0])} columns, found {len(row)}", i)
        cells = [c.strip() for c in row[1:]]
        if any(c == "" for c in cells):
            skipped += 1
            continue
        if any(c not in ("0", "1") for c in cells):
            raise DataError(path, "attribute labels must be 0 or 1", i)
        img = read_image(root / "images" / row[0])
        s = MultiTaskSample(img, "par", {"attributes": np.array([int(c) for c in cells], np.int64)},
                            m.dataset_id, row[0])
        out.append(resize_policy(s, sizes))
    return LoadResult(out, skipped, len(names), names)


LOADERS = {
    "keypoint-annotation-file": load_keypoint_file,
    "mask-directory": load_mask_dir,
    "identity-directory": load_identity_dir,
    "attribute-table": load_attribute_table,
    "box-annotation-file": load_box_file,
}


def load_dataset(m: DatasetManifest, sizes: Optional[dict] = None, data_root: Optional[str] = None) -> LoadResult:
    if m.format == "synthetic":
        raise ValueError("synthetic datasets are generated, not loaded")
    return LOADERS[m.format](m, sizes, data_root)
