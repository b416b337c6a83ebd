"""Write synthetic datasets to disk in the loader formats."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .generator import ATTRIBUTES, JOINTS, PARTS, crop_figure, figure_box_xywh
from .samples import TOY_SIZES, synthetic_scenes

TASK_FORMAT = {"pose": "keypoint-annotation-file", "seg": "mask-directory", "reid": "identity-directory",
               "par": "attribute-table", "peddet": "box-annotation-file"}


def save_png(path: Path, array: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    if array.dtype != np.uint8:
        array = np.round(np.clip(array, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(array).save(path, format="PNG")


def _container(scenes, with_keypoints: bool) -> dict:
    images, anns = [], []
    for index, scene in scenes:
        H, W = scene.class_map.shape
        images.append({"id": index, "file_name": f"{index:06d}.png", "height": H, "width": W})
        for fig in scene.figures:
            ann = {"id": len(anns) + 1, "image_id": index, "category_id": 1, "iscrowd": 0,
                   "bbox": [float(v) for v in figure_box_xywh(scene, fig)]}
            if with_keypoints:
                vis = fig.keypoints[:, 2] > 0
                ann["keypoints"] = [v for (x, y), s in zip(fig.keypoints[:, :2].tolist(), vis)
                                    for v in (x, y, 2 if s else 0)]
                ann["num_keypoints"] = int(vis.sum())
            anns.append(ann)
    cat = {"id": 1, "name": "person"}
    if with_keypoints:
        cat["keypoints"] = list(JOINTS)
    return {"images": images, "annotations": anns, "categories": [cat]}


def write_synthetic(task_type: str, out_dir, n: int, seed: int = 0, sizes: Optional[dict] = None,
                    identities: int = 4) -> list:
    """Render n samples of one task into out_dir; returns the written file paths."""
    sizes = TOY_SIZES if sizes is None else sizes
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = list(synthetic_scenes(task_type, n, seed, sizes, identities))
    written = []
    if task_type in ("pose", "peddet"):
        for index, scene in scenes:
            p = out / "images" / f"{index:06d}.png"
            save_png(p, scene.image)
            written.append(p)
        p = out / "annotations.json"
        p.write_text(json.dumps(_container(scenes, task_type == "pose"), indent=1))
        written.append(p)
        return written
    hw = tuple(sizes[task_type])
    rows = []
    for index, scene in scenes:
        fig = scene.figures[0]
        crop = crop_figure(scene, fig, hw)
        name = f"{index:06d}.png"
        if task_type == "reid":
            p = out / f"{fig.identity:04d}" / name
        else:
            p = out / "images" / name
        save_png(p, crop["image"])
        written.append(p)
        if task_type == "seg":
            q = out / "masks" / name
            save_png(q, crop["class_map"].astype(np.uint8))
            written.append(q)
        if task_type == "par":
            rows.append([name] + [str(int(v)) for v in crop["attributes"]])
    if task_type == "seg":
        p = out / "classes.txt"
        p.write_text("".join(f"{i} {name}\n" for i, name in enumerate(PARTS)))
        written.append(p)
    if task_type == "par":
        p = out / "attributes.csv"
        with open(p, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["image", *ATTRIBUTES])
            w.writerows(rows)
        written.append(p)
    return written
