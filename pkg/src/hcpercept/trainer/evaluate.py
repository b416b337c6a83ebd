"""Run a model over a dataset and score it with the task's metric."""
from __future__ import annotations

import numpy as np
import torch

from .. import metrics as M
from .data import collate, downsample_labels, map_shape
from .model import HCPModel


@torch.no_grad()
def predict_dataset(model: HCPModel, task_id: str, samples: list, batch_size: int = 16) -> list:
    """Final-layer unit outputs, one (samples, UnitOutputs, ImageBatch) triple per chunk."""
    was = model.training
    model.eval()
    out = []
    patch = model.cfg.encoder.patch_size
    for i in range(0, len(samples), batch_size):
        part = samples[i:i + batch_size]
        batch = collate(part, patch)
        out.append((part, model.predict(task_id, batch.images), batch.images))
    model.train(was)
    return out


def evaluate_task(model: HCPModel, task_id: str, samples: list, batch_size: int = 16) -> dict:
    tt = model.tasks[task_id].task_type
    preds = predict_dataset(model, task_id, samples, batch_size)
    patch = model.cfg.encoder.patch_size
    if tt == "seg":
        n = model.tasks[task_id].num_queries
        scores, gts = [], []
        for part, u, images in preds:
            hw = map_shape(images.pixels.shape[1:3], patch)
            probs = torch.sigmoid(u.m).numpy()
            for k, s in enumerate(part):
                h, w = s.valid_hw
                vh, vw = h * hw[0] // images.pixels.shape[1], w * hw[1] // images.pixels.shape[2]
                scores.append(probs[k][:, :vh, :vw])
                gts.append(downsample_labels(s.gt["class_map"], (vh, vw)))
        if len({g.shape for g in gts}) == 1:
            return M.parsing_metrics(np.stack(scores), np.stack(gts), n)
        flat_s = np.concatenate([s.reshape(n, 1, -1) for s in scores], -1)[None]
        flat_g = np.concatenate([g.reshape(1, -1) for g in gts], -1)
        return M.parsing_metrics(flat_s, flat_g, n)
    if tt == "par":
        probs = np.concatenate([u.p.squeeze(-1).numpy() for _, u, _ in preds])
        labels = np.stack([s.gt["attributes"] for s in samples])
        return M.attribute_metrics(probs, labels)
    if tt == "pose":
        kp, gt, norm = [], [], []
        for part, u, images in preds:
            canvas = tuple(images.pixels.shape[1:3])
            k, _ = M.pose_decode(torch.sigmoid(u.m).numpy(), u.p.squeeze(-1).numpy(), canvas)
            kp.append(k)
            for s in part:
                h, w = s.valid_hw
                g = np.array(s.gt["keypoints"], np.float64)
                g[:, 0] = g[:, 0] * w - 0.5
                g[:, 1] = g[:, 1] * h - 0.5
                gt.append(g)
                norm.append(max(h, w))
        return M.pose_metrics(np.concatenate(kp), np.stack(gt), np.array(norm))
    if tt == "peddet":
        boxes, scores, gts = [], [], []
        for part, u, _ in preds:
            for k, s in enumerate(part):
                boxes.append(u.bbox[k].numpy())
                scores.append(u.p[k].squeeze(-1).numpy())
                gts.append(np.asarray(s.gt["boxes"]).reshape(-1, 4))
        return M.det_metrics(boxes, scores, gts)
    if tt == "reid":
        feats = np.concatenate([u.f.reshape(u.f.shape[0], -1).numpy() for _, u, _ in preds])
        ids = [s.gt["identity"] for s in samples]
        return M.reid_metrics(feats, feats, ids, ids, same_set=True)
    raise ValueError(f"unknown task type {tt!r}")


def headline(task_type: str) -> tuple:
    """Metric names reported per task type."""
    return {"seg": ("mIoU", "pACC"), "par": ("mA",), "pose": ("PCK@0.1", "EPE"), "peddet": ("AP@0.5",),
            "reid": ("mAP", "top1")}[task_type]
