"""Normalized samples, input-size policy, and in-memory synthetic datasets."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image

from ..config import TASK_TYPES
from .generator import ATTRIBUTES, JOINTS, PARTS, SceneSpec, crop_figure, generate_scene

# (height, width) for top-down tasks; longest-side cap for detection
FULL_SIZES = {"pose": (256, 192), "par": (256, 192), "reid": (256, 128), "seg": (480, 480), "peddet": 1333}
TOY_SIZES = {"pose": (64, 48), "par": (64, 48), "reid": (64, 32), "seg": (64, 48), "peddet": 96}
SIZE_POLICIES = {"full": FULL_SIZES, "toy": TOY_SIZES}


@dataclass
class MultiTaskSample:
    """One image with the ground truth of a single task.

    gt keys by task type:
        reid   identity (int)
        par    attributes ([A] int)
        seg    class_map ([H, W] int, contiguous ids, 0 = background)
        pose   keypoints ([K, 3] normalized x, y in [0, 1] plus visibility)
        peddet boxes ([M, 4] normalized cx, cy, h, w)
    Normalized points use the pixel-center convention x_norm = (x_px + 0.5) / W.
    """

    image: np.ndarray  # [H, W, 3] float32 in [0, 1]
    task_type: str
    gt: dict
    dataset_id: str
    source: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def valid_hw(self) -> tuple:
        return tuple(self.meta.get("valid_hw", self.image.shape[:2]))


@dataclass(frozen=True)
class ResizeTransform:
    """Maps pixel coordinates of the source image into the (unpadded) resized image and back."""

    src_hw: tuple
    dst_hw: tuple

    @property
    def scale(self) -> tuple:
        return self.dst_hw[0] / self.src_hw[0], self.dst_hw[1] / self.src_hw[1]

    def boxes_forward(self, xyxy: np.ndarray) -> np.ndarray:
        sy, sx = self.scale
        return np.asarray(xyxy, np.float64) * np.array([sx, sy, sx, sy])

    def boxes_inverse(self, xyxy: np.ndarray) -> np.ndarray:
        sy, sx = self.scale
        return np.asarray(xyxy, np.float64) / np.array([sx, sy, sx, sy])


def normalize_keypoints(kps_px: np.ndarray, hw: tuple) -> np.ndarray:
    out = np.array(kps_px, dtype=np.float64)
    out[:, 0] = (out[:, 0] + 0.5) / hw[1]
    out[:, 1] = (out[:, 1] + 0.5) / hw[0]
    return out


def keypoints_to_pixels(kps: np.ndarray, hw: tuple) -> np.ndarray:
    out = np.array(kps, dtype=np.float64)
    out[:, 0] = out[:, 0] * hw[1] - 0.5
    out[:, 1] = out[:, 1] * hw[0] - 0.5
    return out


def boxes_to_xyxy(boxes: np.ndarray, hw: tuple) -> np.ndarray:
    b = np.asarray(boxes, np.float64).reshape(-1, 4)
    cx, cy, h, w = b.T
    H, W = hw
    return np.stack([(cx - w / 2) * W, (cy - h / 2) * H, (cx + w / 2) * W, (cy + h / 2) * H], axis=1)


def xyxy_to_boxes(xyxy: np.ndarray, hw: tuple) -> np.ndarray:
    x0, y0, x1, y1 = np.asarray(xyxy, np.float64).reshape(-1, 4).T
    H, W = hw
    return np.stack([(x0 + x1) / 2 / W, (y0 + y1) / 2 / H, (y1 - y0) / H, (x1 - x0) / W], axis=1)


def _resize_image(image: np.ndarray, hw: tuple) -> np.ndarray:
    im = Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8))
    return np.asarray(im.resize((hw[1], hw[0]), Image.BILINEAR), np.float32) / 255


def _resize_labels(labels: np.ndarray, hw: tuple) -> np.ndarray:
    im = Image.fromarray(labels.astype(np.int32))
    return np.asarray(im.resize((hw[1], hw[0]), Image.NEAREST)).astype(np.int64)


def resize_policy(sample: MultiTaskSample, sizes: Optional[dict] = None, pad_to: int = 16) -> MultiTaskSample:
    """Bring a sample to its task's input size.

    Top-down tasks are resized to a fixed (H, W). Detection images are scaled so the longest side is at
    most the cap (never enlarged), then zero-padded to a multiple of pad_to. Normalized annotations are
    unchanged by either operation; label maps are resized nearest-neighbor.
    """
    sizes = FULL_SIZES if sizes is None else sizes
    H, W = sample.image.shape[:2]
    gt = dict(sample.gt)
    meta = dict(sample.meta)
    if sample.task_type == "peddet":
        cap = sizes["peddet"]
        scale = min(1.0, cap / max(H, W))
        hw = (max(1, int(round(H * scale))), max(1, int(round(W * scale))))
        img = _resize_image(sample.image, hw) if hw != (H, W) else sample.image
        ph, pw = -(-hw[0] // pad_to) * pad_to, -(-hw[1] // pad_to) * pad_to
        canvas = np.zeros((ph, pw, 3), np.float32)
        canvas[:hw[0], :hw[1]] = img
        meta["valid_hw"] = hw
        meta["transform"] = ResizeTransform((H, W), hw)
        return MultiTaskSample(canvas, sample.task_type, gt, sample.dataset_id, sample.source, meta)
    hw = tuple(sizes[sample.task_type])
    img = _resize_image(sample.image, hw) if hw != (H, W) else sample.image
    if "class_map" in gt and hw != (H, W):
        gt["class_map"] = _resize_labels(gt["class_map"], hw)
    meta["valid_hw"] = hw
    meta["transform"] = ResizeTransform((H, W), hw)
    return MultiTaskSample(img, sample.task_type, gt, sample.dataset_id, sample.source, meta)


def task_classes(task_type: str) -> tuple:
    """Query slot names of the synthetic tasks."""
    return {"seg": PARTS, "pose": JOINTS, "par": ATTRIBUTES}.get(task_type, ())


def synthetic_dataset(task_type: str, n: int, seed: int = 0, sizes: Optional[dict] = None,
                      dataset_id: Optional[str] = None, identities: int = 4) -> list:
    """n samples of one task type drawn from the scene generator.

    Top-down tasks crop single-figure scenes; reid uses ``identities`` identities with n // identities
    samples each; detection keeps whole multi-figure scenes.
    """
    sizes = TOY_SIZES if sizes is None else sizes
    did = dataset_id or f"synthetic-{task_type}"
    out = []
    for index, scene in synthetic_scenes(task_type, n, seed, sizes, identities):
        if task_type == "peddet":
            boxes = np.stack([f.box for f in scene.figures])
            s = MultiTaskSample(scene.image, "peddet", {"boxes": boxes}, did, f"scene:{index}")
            out.append(resize_policy(s, sizes))
            continue
        hw = tuple(sizes[task_type])
        fig = scene.figures[0]
        crop = crop_figure(scene, fig, hw)
        if task_type == "reid":
            gt = {"identity": int(fig.identity)}
        elif task_type == "par":
            gt = {"attributes": crop["attributes"]}
        elif task_type == "seg":
            gt = {"class_map": crop["class_map"]}
        else:
            gt = {"keypoints": normalize_keypoints(crop["keypoints"], hw)}
        out.append(MultiTaskSample(crop["image"], task_type, gt, did, f"scene:{index}", {"valid_hw": hw}))
    return out


def synthetic_scenes(task_type: str, n: int, seed: int = 0, sizes: Optional[dict] = None, identities: int = 4):
    """Yield (scene index, SceneBundle) pairs backing synthetic_dataset."""
    if task_type not in TASK_TYPES:
        raise ValueError(f"unknown task type {task_type!r}")
    sizes = TOY_SIZES if sizes is None else sizes
    offset = 1000 * (TASK_TYPES.index(task_type) + 1)
    if task_type == "peddet":
        cap = sizes["peddet"]
        spec = SceneSpec(canvas=(cap, cap), figures=(1, 3), seed=seed)
    else:
        spec = SceneSpec(canvas=(96, 96), figures=(1, 1), identity_pool=64, seed=seed)
    for i in range(n):
        ident = [i % identities] if task_type == "reid" else None
        yield offset + i, generate_scene(spec, offset + i, ident)
