"""Evaluation metrics for the five task types and the pose decoding rule."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

MA_DEFINITION = "mean over attributes of (TPR + TNR) / 2 at threshold 0.5; undefined rates are skipped"
PCK_DEFINITION = "fraction of visible joints within 0.1 x longer side of the input crop"
AP_DEFINITION = "all-point interpolated AP at IoU 0.5 after score filtering and NMS at IoU 0.7"


@dataclass
class EvalReport:
    metrics: dict = field(default_factory=dict)      # flat "task/metric" -> scalar
    per_class: dict = field(default_factory=dict)    # task -> {class -> scalar}
    counts: dict = field(default_factory=dict)       # task -> number of evaluated samples
    config: dict = field(default_factory=dict)
    definitions: dict = field(default_factory=lambda: {"mA": MA_DEFINITION, "PCK@0.1": PCK_DEFINITION,
                                                        "AP@0.5": AP_DEFINITION})

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        validate_report(d)
        return cls(**d)


RANGES = {"mIoU": (0, 1), "pACC": (0, 1), "mA": (0, 1), "PCK@0.1": (0, 1), "EPE": (0, float("inf")),
          "AP@0.5": (0, 1), "mAP": (0, 1), "top1": (0, 1)}


def validate_report(d: dict):
    """Raise ValueError unless d has the report schema and every metric is in its documented range."""
    for key in ("metrics", "per_class", "counts", "config", "definitions"):
        if not isinstance(d.get(key), dict):
            raise ValueError(f"report field {key!r} missing or not a mapping")
    for name, v in d["metrics"].items():
        metric = name.rsplit("/", 1)[-1]
        if metric not in RANGES:
            raise ValueError(f"unknown metric {name!r}")
        lo, hi = RANGES[metric]
        if not isinstance(v, (int, float)) or not lo <= v <= hi:
            raise ValueError(f"metric {name!r}={v!r} outside [{lo}, {hi}]")
    for name, n in d["counts"].items():
        if not isinstance(n, int) or n < 0:
            raise ValueError(f"count {name!r} must be a non-negative int")


# ---------------------------------------------------------------- parsing

def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    idx = gt.reshape(-1).astype(np.int64) * num_classes + pred.reshape(-1).astype(np.int64)
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def parsing_metrics(scores: np.ndarray, gt: np.ndarray, num_classes: int) -> dict:
    """scores [B, N, H, W] per-class probabilities (background is class 0); gt [B, H, W] class ids.

    Classes absent from both prediction and ground truth are left out of the mean.
    """
    pred = np.asarray(scores).argmax(1)
    cm = confusion_matrix(pred, np.asarray(gt), num_classes)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - tp
    present = union > 0
    iou = np.where(present, tp / np.maximum(union, 1), np.nan)
    return {"mIoU": float(np.nanmean(iou)) if present.any() else 1.0,
            "pACC": float(tp.sum() / max(cm.sum(), 1)),
            "per_class_iou": [None if np.isnan(v) else float(v) for v in iou]}


# ---------------------------------------------------------------- attributes

def attribute_metrics(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> dict:
    pred = np.asarray(probs) >= threshold
    y = np.asarray(labels).astype(bool)
    per = []
    for a in range(y.shape[1]):
        rates = []
        if y[:, a].any():
            rates.append((pred[:, a] & y[:, a]).sum() / y[:, a].sum())
        if (~y[:, a]).any():
            rates.append((~pred[:, a] & ~y[:, a]).sum() / (~y[:, a]).sum())
        per.append(float(np.mean(rates)))
    return {"mA": float(np.mean(per)), "per_attribute": per}


# ---------------------------------------------------------------- pose

def pose_decode(map_probs: np.ndarray, p: np.ndarray, image_hw: tuple, threshold: float = 0.05) -> tuple:
    """Argmax decoding of [B, K, Hm, Wm] probability maps into image pixels.

    Returns (keypoints [B, K, 3] as x, y, visible; scores [B, K]) with score = peak x global probability.
    """
    m = np.asarray(map_probs)
    B, K, Hm, Wm = m.shape
    flat = m.reshape(B, K, -1)
    idx = flat.argmax(-1)
    peak = np.take_along_axis(flat, idx[..., None], -1)[..., 0]
    i, j = np.divmod(idx, Wm)
    H, W = image_hw
    x = (j + 0.5) / Wm * W - 0.5
    y = (i + 0.5) / Hm * H - 0.5
    scores = peak * np.asarray(p).reshape(B, K)
    vis = scores >= threshold
    return np.stack([x, y, vis.astype(np.float64)], -1), scores


def pose_metrics(pred: np.ndarray, gt: np.ndarray, norm: np.ndarray, alpha: float = 0.1) -> dict:
    """pred [B, K, >=2] pixels (optional 3rd column: predicted visible); gt [B, K, 3]; norm [B] lengths.

    A visible ground-truth joint counts as correct when it is predicted visible and within alpha * norm.
    EPE averages the pixel distance over visible ground-truth joints.
    """
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    vis = gt[..., 2] > 0
    if not vis.any():
        raise ValueError("no visible ground-truth joints")
    d = np.linalg.norm(pred[..., :2] - gt[..., :2], axis=-1)
    shown = pred[..., 2] > 0 if pred.shape[-1] > 2 else np.ones_like(vis)
    ok = (d <= alpha * np.asarray(norm, np.float64)[:, None]) & shown
    return {"PCK@0.1": float(ok[vis].mean()), "EPE": float(d[vis].mean())}


# ---------------------------------------------------------------- detection

def box_iou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, np.float64).reshape(-1, 4), np.asarray(b, np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.clip(rb - lt, 0, None).prod(-1)
    area_a = np.clip(a[:, 2:] - a[:, :2], 0, None).prod(-1)
    area_b = np.clip(b[:, 2:] - b[:, :2], 0, None).prod(-1)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def cxcyhw_to_xyxy(b: np.ndarray) -> np.ndarray:
    cx, cy, h, w = np.asarray(b, np.float64).reshape(-1, 4).T
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], 1)


def nms(boxes_xyxy: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.7) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    iou = box_iou_xyxy(boxes_xyxy, boxes_xyxy)
    suppressed = np.zeros(len(order), bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= iou[i] > iou_threshold
    return np.array(keep, dtype=np.int64)


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP of a score-sorted true-positive sequence."""
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[1.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def det_metrics(pred_boxes: list, pred_scores: list, gt_boxes: list, iou_threshold: float = 0.5,
                nms_threshold: float = 0.7, score_threshold: float = 0.05) -> dict:
    """Boxes are normalized (cx, cy, h, w) per image."""
    dets = []
    for i, (b, s) in enumerate(zip(pred_boxes, pred_scores)):
        b, s = cxcyhw_to_xyxy(b), np.asarray(s, np.float64).reshape(-1)
        sel = s >= score_threshold
        b, s = b[sel], s[sel]
        for k in nms(b, s, nms_threshold):
            dets.append((s[k], i, b[k]))
    dets.sort(key=lambda t: -t[0])
    gts = [cxcyhw_to_xyxy(g) for g in gt_boxes]
    used = [np.zeros(len(g), bool) for g in gts]
    tp = []
    for _, i, b in dets:
        if len(gts[i]) == 0:
            tp.append(0)
            continue
        iou = box_iou_xyxy(b, gts[i])[0]
        iou[used[i]] = -1
        j = int(iou.argmax())
        if iou[j] >= iou_threshold:
            used[i][j] = True
            tp.append(1)
        else:
            tp.append(0)
    num_gt = sum(len(g) for g in gts)
    return {"AP@0.5": average_precision(np.array(tp), num_gt), "detections": len(dets), "num_gt": num_gt}


# ---------------------------------------------------------------- reid

def reid_metrics(query: np.ndarray, gallery: np.ndarray, query_ids, gallery_ids, same_set: bool = False) -> dict:
    """Cosine ranking of L2-normalized flattened features.

    With same_set the gallery is the query set and each query's own entry is excluded. Queries with no
    same-identity gallery entry are skipped. A duplicated gallery entry counts as a separate item, so
    duplicating a true match raises its query's AP and never lowers top-1.
    """
    q = np.asarray(query, np.float64).reshape(len(query), -1)
    g = np.asarray(gallery, np.float64).reshape(len(gallery), -1)
    q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    g = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    qid, gid = np.asarray(query_ids), np.asarray(gallery_ids)
    dist = 1 - q @ g.T
    aps, top1 = [], []
    for i in range(len(q)):
        keep = np.ones(len(g), bool)
        if same_set:
            keep[i] = False
        match = (gid == qid[i])[keep]
        if not match.any():
            continue
        # ties broken by gallery index
        order = np.argsort(dist[i][keep], kind="stable")
        hits = match[order]
        top1.append(float(hits[0]))
        ranks = np.nonzero(hits)[0]
        aps.append(float(np.mean((np.arange(len(ranks)) + 1) / (ranks + 1))))
    if not aps:
        raise ValueError("no query has a same-identity gallery entry")
    return {"mAP": float(np.mean(aps)), "top1": float(np.mean(top1)), "queries": len(aps)}
