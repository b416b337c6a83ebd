"""Turn lists of samples into model inputs and loss targets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from ..encoder import ImageBatch
from ..objectives import DetTarget, ParTarget, PoseTarget, ReidTarget, SegTarget

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25
HEATMAP_SIGMA = 2.0  # in map cells


@dataclass
class Batch:
    images: ImageBatch
    target: object
    samples: list


def map_shape(hw: tuple, patch_size: int) -> tuple:
    """Local-map resolution for an input of size hw: four times the token grid."""
    gh, gw = -(-hw[0] // patch_size), -(-hw[1] // patch_size)
    return 4 * gh, 4 * gw


def downsample_labels(class_map: np.ndarray, out_hw: tuple) -> np.ndarray:
    """Nearest sampling of a label map at the centers of an out_hw grid."""
    H, W = class_map.shape
    ys = np.minimum(((np.arange(out_hw[0]) + 0.5) * H / out_hw[0]).astype(int), H - 1)
    xs = np.minimum(((np.arange(out_hw[1]) + 0.5) * W / out_hw[1]).astype(int), W - 1)
    return class_map[np.ix_(ys, xs)]


def gaussian_heatmaps(keypoints: np.ndarray, out_hw: tuple, sigma: float = HEATMAP_SIGMA) -> np.ndarray:
    """Unit-peak Gaussians centered at normalized keypoints; zero maps for invisible joints."""
    K = len(keypoints)
    ys, xs = np.mgrid[0:out_hw[0], 0:out_hw[1]].astype(np.float64)
    maps = np.zeros((K, *out_hw), np.float32)
    for k, (x, y, v) in enumerate(keypoints):
        if v <= 0:
            continue
        u, w = x * out_hw[1] - 0.5, y * out_hw[0] - 0.5
        maps[k] = np.exp(-((xs - u) ** 2 + (ys - w) ** 2) / (2 * sigma ** 2))
    return maps


def positive_ratio(samples: list, eps: float = 0.01) -> np.ndarray:
    """Per-attribute positive ratio over a dataset, clipped into [eps, 1 - eps]."""
    labels = np.stack([s.gt["attributes"] for s in samples]).astype(np.float64)
    return np.clip(labels.mean(0), eps, 1 - eps)


def to_image_batch(samples: list, patch_size: int) -> ImageBatch:
    images = []
    for s in samples:
        h, w = s.valid_hw
        images.append((s.image[:h, :w] - PIXEL_MEAN) / PIXEL_STD)
    return ImageBatch.from_images(images, patch_size)


def collate(samples: list, patch_size: int, num_classes: Optional[int] = None,
            pos_ratio: Optional[np.ndarray] = None) -> Batch:
    """Stack samples of one task type; seg needs num_classes, par needs the dataset's pos_ratio."""
    if not samples:
        raise ValueError("empty batch")
    tt = samples[0].task_type
    if any(s.task_type != tt for s in samples):
        raise ValueError("mixed task types in one batch")
    images = to_image_batch(samples, patch_size)
    if tt == "reid":
        target = ReidTarget(torch.tensor([s.gt["identity"] for s in samples], dtype=torch.long))
    elif tt == "par":
        labels = torch.tensor(np.stack([s.gt["attributes"] for s in samples]), dtype=torch.float32)
        ratio = positive_ratio(samples) if pos_ratio is None else pos_ratio
        target = ParTarget(labels, torch.as_tensor(ratio, dtype=torch.float32))
    elif tt == "seg":
        hw = map_shape(images.pixels.shape[1:3], patch_size)
        maps = np.stack([downsample_labels(_padded_labels(s, images.pixels.shape[1:3]), hw) for s in samples])
        n = num_classes if num_classes is not None else int(maps.max()) + 1
        target = SegTarget.from_class_map(torch.as_tensor(maps), n)
    elif tt == "pose":
        hw = map_shape(images.pixels.shape[1:3], patch_size)
        heat, vis = [], []
        for s in samples:
            kps = _rescale_to_canvas(s.gt["keypoints"], s.valid_hw, images.pixels.shape[1:3])
            heat.append(gaussian_heatmaps(kps, hw))
            vis.append(kps[:, 2] > 0)
        target = PoseTarget(torch.as_tensor(np.stack(heat)), torch.as_tensor(np.stack(vis)))
    elif tt == "peddet":
        target = DetTarget([torch.as_tensor(np.asarray(s.gt["boxes"], np.float32).reshape(-1, 4)) for s in samples])
    else:
        raise ValueError(f"unknown task type {tt!r}")
    return Batch(images, target, list(samples))


def _padded_labels(s, canvas_hw):
    h, w = s.valid_hw
    out = np.zeros(tuple(canvas_hw), np.int64)
    out[:h, :w] = s.gt["class_map"][:h, :w]
    return out


def _rescale_to_canvas(kps, valid_hw, canvas_hw):
    """Normalized keypoints relative to the valid region -> normalized relative to the padded canvas."""
    out = np.array(kps, np.float64)
    out[:, 0] *= valid_hw[1] / canvas_hw[1]
    out[:, 1] *= valid_hw[0] / canvas_hw[0]
    return out
