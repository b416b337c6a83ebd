"""Task losses, the bipartite box matcher, and the weighted multi-dataset objective.

Conventions: every loss returns a non-negative scalar to minimize. Probabilities entering a log are
clamped to [EPS, 1 - EPS]. Boxes are normalized (cx, cy, h, w).
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .interpreter import UnitOutputs

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass
class LossWeights:
    lam_par_seg: float = 1e-3
    lam_par_pose: float = 1e-3
    lam_cls: float = 2.0
    lam_iou: float = 2.0
    lam_l1: float = 5.0
    triplet_margin: float = 0.3
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


# ---------------------------------------------------------------- targets

@dataclass
class ReidTarget:
    labels: torch.Tensor  # [B] int identity ids


@dataclass
class ParTarget:
    labels: torch.Tensor     # [B, N] in {0, 1}
    pos_ratio: torch.Tensor  # [N] in (0, 1)


@dataclass
class SegTarget:
    masks: torch.Tensor     # [B, N, H', W'] binary
    presence: torch.Tensor  # [B, N]

    @classmethod
    def from_class_map(cls, class_map: torch.Tensor, num_classes: int) -> "SegTarget":
        masks = F.one_hot(class_map.long(), num_classes).permute(0, 3, 1, 2).float()
        return cls(masks, (masks.flatten(2).sum(-1) > 0).float())


@dataclass
class PoseTarget:
    heatmaps: torch.Tensor  # [B, K, H', W'] unit-peak Gaussians, zero where invisible
    visible: torch.Tensor   # [B, K]


@dataclass
class DetTarget:
    boxes: list  # per image [M, 4]
    # loss normalizer; set to the full batch's box count when a batch is split into micro-batches
    num_gt: Optional[int] = None


# ---------------------------------------------------------------- elementary losses

def par_weights(y: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    """Per-attribute weights that up-weight the rarer outcome of each attribute."""
    return y * torch.exp(1 - gamma) + (1 - y) * torch.exp(gamma)


def par_loss(p: torch.Tensor, y: torch.Tensor, gamma: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Weighted binary cross-entropy, summed over attributes and averaged over the batch.

    Returns the negated weighted log-likelihood. ``gamma=None`` gives unit weights.
    """
    if p.shape[-1] == 1 and p.ndim == y.ndim + 1:
        p = p.squeeze(-1)
    p = p.clamp(EPS, 1 - EPS)
    w = torch.ones_like(y) if gamma is None else par_weights(y, gamma)
    ll = w * (y * torch.log(p) + (1 - y) * torch.log(1 - p))
    ll = ll.sum(-1)
    return -(ll.mean() if ll.ndim else ll)


def dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    p = torch.sigmoid(logits).flatten(-2)
    t = target.flatten(-2)
    num = 2 * (p * t).sum(-1) + smooth
    den = p.sum(-1) + t.sum(-1) + smooth
    return (1 - num / den).mean()


def mask_bce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, target)


def focal_loss(p: torch.Tensor, y: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Elementwise sigmoid focal loss on probabilities."""
    p = p.clamp(EPS, 1 - EPS)
    return -(alpha * y * (1 - p) ** gamma * torch.log(p) + (1 - alpha) * (1 - y) * p ** gamma * torch.log(1 - p))


def box_to_corners(b: torch.Tensor) -> torch.Tensor:
    cx, cy, h, w = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def corners_to_box(c: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = c.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, y1 - y0, x1 - x0], dim=-1)


def giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Generalized IoU of broadcast-compatible (cx, cy, h, w) boxes."""
    ca, cb = box_to_corners(a), box_to_corners(b)
    area_a = (ca[..., 2] - ca[..., 0]).clamp(min=0) * (ca[..., 3] - ca[..., 1]).clamp(min=0)
    area_b = (cb[..., 2] - cb[..., 0]).clamp(min=0) * (cb[..., 3] - cb[..., 1]).clamp(min=0)
    lt = torch.maximum(ca[..., :2], cb[..., :2])
    rb = torch.minimum(ca[..., 2:], cb[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    iou = torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(union))
    elt = torch.minimum(ca[..., :2], cb[..., :2])
    erb = torch.maximum(ca[..., 2:], cb[..., 2:])
    ewh = (erb - elt).clamp(min=0)
    enclose = ewh[..., 0] * ewh[..., 1]
    penalty = torch.where(enclose > 0, (enclose - union) / enclose.clamp(min=1e-12), torch.zeros_like(enclose))
    return iou - penalty


def pairwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return giou(a[:, None, :], b[None, :, :])


# ---------------------------------------------------------------- reid

def batch_hard_triplet(feats: torch.Tensor, labels: torch.Tensor, margin: float) -> tuple:
    """Batch-hard triplet loss; returns (loss, number of anchors that had both a positive and a negative)."""
    n = feats.shape[0]
    d2 = (feats.unsqueeze(1) - feats.unsqueeze(0)).pow(2).sum(-1)
    dist = d2.clamp(min=1e-12).sqrt()
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(n, dtype=torch.bool, device=feats.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    ok = pos_mask.any(1) & neg_mask.any(1)
    if not bool(ok.any()):
        return feats.sum() * 0.0, 0
    big = dist.detach().max() + 1.0
    hardest_pos = torch.where(pos_mask, dist, torch.full_like(dist, -1.0)).max(1).values
    hardest_neg = torch.where(neg_mask, dist, torch.full_like(dist, float(big))).min(1).values
    loss = F.relu(hardest_pos - hardest_neg + margin)[ok].mean()
    return loss, int(ok.sum())


@dataclass
class ReidLossInfo:
    id_loss: float
    triplet_loss: float
    valid_triplets: int
    warning: Optional[str] = None


def reid_loss(feats: torch.Tensor, labels: torch.Tensor, classifier: torch.nn.Module,
              margin: float = 0.3) -> tuple:
    """ID cross-entropy through ``classifier`` plus batch-hard triplet on the concatenated slots.

    feats is [B, N, C]; the slots are concatenated into one N*C vector per image.
    """
    flat = feats.reshape(feats.shape[0], -1)
    ce = F.cross_entropy(classifier(flat), labels)
    tri, n_ok = batch_hard_triplet(flat, labels, margin)
    warning = None
    if n_ok == 0:
        warning = "batch has no valid triplets; triplet term set to 0"
        log.warning(warning)
    return ce + tri, ReidLossInfo(float(ce.detach()), float(tri.detach()), n_ok, warning)


# ---------------------------------------------------------------- seg / pose

def seg_loss(u: UnitOutputs, gt: SegTarget, lam_par: float) -> torch.Tensor:
    return lam_par * par_loss(u.p, gt.presence) + mask_bce_loss(u.m, gt.masks) + dice_loss(u.m, gt.masks)


def heatmap_mse(logits: torch.Tensor, heatmaps: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
    """MSE of sigmoid maps against targets, averaged over visible joints and their pixels."""
    vis = visible.float()
    n = vis.sum()
    if n == 0:
        return logits.sum() * 0.0
    err = (torch.sigmoid(logits) - heatmaps).pow(2).flatten(2).mean(-1)
    return (err * vis).sum() / n


def pose_loss(u: UnitOutputs, gt: PoseTarget, lam_par: float) -> torch.Tensor:
    return lam_par * par_loss(u.p, gt.visible.float()) + heatmap_mse(u.m, gt.heatmaps, gt.visible)


# ---------------------------------------------------------------- detection

@dataclass
class Assignment:
    pairs: list  # (gt index, prediction index)
    cost: float

    @property
    def pred_indices(self):
        return [p for _, p in self.pairs]

    @property
    def gt_indices(self):
        return [g for g, _ in self.pairs]


def match_cost(p: torch.Tensor, boxes: torch.Tensor, gt: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Cost matrix [N_pred, M_gt] of focal-style classification + (1 - GIoU) + L1."""
    p = p.reshape(-1).clamp(EPS, 1 - EPS)
    a, g = w.focal_alpha, w.focal_gamma
    pos = a * (1 - p) ** g * -torch.log(p)
    neg = (1 - a) * p ** g * -torch.log(1 - p)
    cls = (pos - neg)[:, None]
    l1 = torch.cdist(boxes, gt, p=1) if len(gt) else boxes.new_zeros(len(boxes), 0)
    iou = 1 - pairwise_giou(boxes, gt)
    return w.lam_cls * cls + w.lam_iou * iou + w.lam_l1 * l1


def _check_sizes(n_pred, n_gt):
    if n_gt > n_pred:
        raise ValueError(f"{n_gt} ground-truth boxes exceed {n_pred} detection queries; raise the query count")


def hungarian_match(p, boxes, gt, w: LossWeights) -> Assignment:
    with torch.no_grad():
        C = match_cost(p, boxes, gt, w).double().cpu().numpy()
    return assignment_from_cost(C)


def assignment_from_cost(C: np.ndarray) -> Assignment:
    n_pred, n_gt = C.shape
    _check_sizes(n_pred, n_gt)
    if n_gt == 0:
        return Assignment([], 0.0)
    rows, cols = linear_sum_assignment(C)
    pairs = sorted((int(c), int(r)) for r, c in zip(rows, cols))
    return Assignment(pairs, float(sum(C[r, g] for g, r in pairs)))


def brute_force_from_cost(C: np.ndarray) -> Assignment:
    """Exhaustive minimum over all injections of GT into predictions (test oracle)."""
    n_pred, n_gt = C.shape
    if n_pred > 7:
        raise ValueError("brute force matching is limited to 7 predictions")
    _check_sizes(n_pred, n_gt)
    best, best_cost = (), 0.0
    first = True
    for perm in itertools.permutations(range(n_pred), n_gt):
        c = sum(C[perm[g], g] for g in range(n_gt))
        if first or c < best_cost:
            best, best_cost, first = perm, c, False
    return Assignment([(g, int(r)) for g, r in enumerate(best)], float(best_cost))


def brute_force_match(p, boxes, gt, w: LossWeights) -> Assignment:
    with torch.no_grad():
        C = match_cost(p, boxes, gt, w).double().cpu().numpy()
    return brute_force_from_cost(C)


def det_loss(u: UnitOutputs, gt: DetTarget, assignments: list, w: LossWeights) -> tuple:
    """Focal over all queries (matched -> 1, rest -> 0) plus GIoU and L1 on matched pairs.

    All terms are normalized by the batch's total number of GT boxes (at least 1), or gt.num_gt if set.
    """
    num_gt = max(1, gt.num_gt if gt.num_gt is not None else sum(len(b) for b in gt.boxes))
    p = u.p.squeeze(-1)
    target = torch.zeros_like(p)
    l1 = p.new_zeros(())
    iou = p.new_zeros(())
    for i, a in enumerate(assignments):
        if not a.pairs:
            continue
        gi = torch.as_tensor(a.gt_indices)
        pi = torch.as_tensor(a.pred_indices)
        target[i, pi] = 1.0
        pb, gb = u.bbox[i, pi], gt.boxes[i][gi].to(u.bbox)
        l1 = l1 + (pb - gb).abs().sum()
        iou = iou + (1 - giou(pb, gb)).sum()
    cls = focal_loss(p, target, w.focal_alpha, w.focal_gamma).sum()
    terms = {"cls": cls / num_gt, "iou": iou / num_gt, "l1": l1 / num_gt}
    total = w.lam_cls * terms["cls"] + w.lam_iou * terms["iou"] + w.lam_l1 * terms["l1"]
    return total, terms


def match_batch(u: UnitOutputs, gt: DetTarget, w: LossWeights) -> list:
    return [hungarian_match(u.p[i], u.bbox[i], gt.boxes[i].to(u.bbox), w) for i in range(u.p.shape[0])]


# ---------------------------------------------------------------- auxiliary + aggregate

def supervised_layers(task_type: str, depth: int) -> list:
    """Indices into the L+1 decoder states that receive a loss."""
    if task_type in ("seg", "pose"):
        return list(range(depth + 1))
    if task_type == "peddet":
        return list(range(1, depth + 1))
    if task_type in ("reid", "par"):
        return [depth]
    raise ValueError(f"unknown task type {task_type!r}")


@dataclass
class TaskLoss:
    total: torch.Tensor
    terms: dict = field(default_factory=dict)


def single_state_loss(task_type: str, u: UnitOutputs, gt, w: LossWeights, classifier=None) -> tuple:
    if task_type == "seg":
        return seg_loss(u, gt, w.lam_par_seg), {}
    if task_type == "pose":
        return pose_loss(u, gt, w.lam_par_pose), {}
    if task_type == "par":
        return par_loss(u.p, gt.labels, gt.pos_ratio), {}
    if task_type == "reid":
        loss, info = reid_loss(u.f, gt.labels, classifier, w.triplet_margin)
        return loss, {"id": info.id_loss, "triplet": info.triplet_loss}
    if task_type == "peddet":
        loss, terms = det_loss(u, gt, match_batch(u, gt, w), w)
        return loss, {k: float(v.detach()) for k, v in terms.items()}
    raise ValueError(f"unknown task type {task_type!r}")


def auxiliary_apply(task_type: str, layer_outputs: list, gt, w: LossWeights, classifier=None) -> TaskLoss:
    """Sum the task loss over the supervised states; layer_outputs[k] pairs with supervised_layers()[k].

    Detection states are matched independently.
    """
    total = None
    terms = {}
    for k, u in enumerate(layer_outputs):
        loss, t = single_state_loss(task_type, u, gt, w, classifier)
        total = loss if total is None else total + loss
        if k == len(layer_outputs) - 1:
            terms = t
    terms["layers"] = len(layer_outputs)
    return TaskLoss(total, terms)


def aggregate(dataset_losses: dict, weights: dict) -> torch.Tensor:
    missing = set(dataset_losses) - set(weights)
    if missing:
        raise KeyError(f"no loss weight for datasets {sorted(missing)}")
    total = 0.0
    for name, loss in dataset_losses.items():
        total = total + weights[name] * loss
    return total
