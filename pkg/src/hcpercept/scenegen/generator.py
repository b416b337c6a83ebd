"""Procedural stick-figure scenes with consistent keypoint, part-mask, box, attribute and identity labels."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image

JOINTS = ("head", "neck", "l_elbow", "l_hand", "r_elbow", "r_hand", "l_foot", "r_foot")
PARTS = ("background", "head", "torso", "arms", "legs", "accessory")
ATTRIBUTES = ("hat", "bag", "upper_dark", "lower_dark", "thick_limbs", "tall")
# joint -> part class that contains it
JOINT_PART = {"head": 1, "neck": 2, "l_elbow": 3, "l_hand": 3, "r_elbow": 3, "r_hand": 3, "l_foot": 4, "r_foot": 4}

DARK = np.array([[0.10, 0.10, 0.35], [0.20, 0.08, 0.08], [0.08, 0.22, 0.10], [0.15, 0.15, 0.15]])
LIGHT = np.array([[0.95, 0.85, 0.30], [0.55, 0.85, 0.95], [0.95, 0.60, 0.75], [0.80, 0.95, 0.60]])
SKIN = np.array([[0.96, 0.80, 0.65], [0.78, 0.57, 0.42], [0.55, 0.38, 0.26]])
HAT = np.array([0.90, 0.10, 0.10])
BAG = np.array([0.55, 0.35, 0.10])


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple = (96, 96)
    figures: tuple = (1, 3)
    identity_pool: int = 16
    seed: int = 0
    min_height: float = 0.45   # figure height as a fraction of canvas height
    max_height: float = 0.85

    def __post_init__(self):
        if self.figures[0] < 1 or self.figures[0] > self.figures[1]:
            raise SceneError(f"bad figure count range {self.figures}")
        if self.identity_pool < 1:
            raise SceneError("identity pool must be non-empty")


@dataclass(frozen=True)
class Style:
    upper: tuple
    lower: tuple
    skin: tuple
    hat: bool
    bag: bool
    upper_dark: bool
    lower_dark: bool
    thick: bool
    tall: bool

    @property
    def attributes(self) -> np.ndarray:
        return np.array([self.hat, self.bag, self.upper_dark, self.lower_dark, self.thick, self.tall], dtype=np.int64)


def identity_style(seed: int, identity: int) -> Style:
    rng = np.random.default_rng([seed, 7919, identity])
    ud, ld = bool(rng.integers(2)), bool(rng.integers(2))
    upper = (DARK if ud else LIGHT)[rng.integers(4)]
    lower = (DARK if ld else LIGHT)[rng.integers(4)]
    return Style(tuple(upper), tuple(lower), tuple(SKIN[rng.integers(3)]), bool(rng.integers(2)),
                 bool(rng.integers(2)), ud, ld, bool(rng.integers(2)), bool(rng.integers(2)))


@dataclass
class Figure:
    identity: int
    box: np.ndarray          # (cx, cy, h, w) normalized to the canvas
    keypoints: np.ndarray    # [K, 3] pixel (x, y, visible)
    attributes: np.ndarray   # [A]
    mask_id: int             # instance id in SceneBundle.instances


@dataclass
class SceneBundle:
    image: np.ndarray        # [H, W, 3] float32 in [0, 1]
    class_map: np.ndarray    # [H, W] int part ids
    instances: np.ndarray    # [H, W] 0 = background, i+1 = figure i
    figures: list = field(default_factory=list)


def _capsule(yy, xx, p0, p1, r):
    """Pixels within distance r of segment p0-p1 (points as (x, y))."""
    d = np.asarray(p1, float) - np.asarray(p0, float)
    L2 = max(float(d @ d), 1e-9)
    t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / L2, 0, 1)
    px, py = p0[0] + t * d[0], p0[1] + t * d[1]
    return (xx - px) ** 2 + (yy - py) ** 2 <= r * r


def _background(rng, H, W):
    base = rng.uniform(0.35, 0.65, size=3)
    grad = rng.uniform(-0.15, 0.15, size=3)
    ys = np.linspace(0, 1, H)[:, None, None]
    img = base + grad * ys + rng.normal(0, 0.02, size=(H, W, 3))
    return np.broadcast_to(img, (H, W, 3)).copy()


def _draw_figure(img, cmap, inst, inst_id, style: Style, top_left, height, rng):
    H, W = cmap.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    x0, y0 = top_left
    s = height
    cx = x0 + 0.25 * s
    head_r = 0.09 * s
    head = (cx, y0 + head_r)
    neck = (cx, y0 + 2 * head_r + 0.02 * s)
    pelvis = (cx, y0 + 0.55 * s)
    limb = (0.06 if style.thick else 0.045) * s
    la, ra = rng.uniform(0.6, 1.4), rng.uniform(0.6, 1.4)  # arm angle away from hanging straight down
    arm = 0.18 * s
    # arms hang from shoulders, leaving the neck joint on torso pixels
    l_sh = (neck[0] - 0.07 * s, neck[1] + 0.04 * s)
    r_sh = (neck[0] + 0.07 * s, neck[1] + 0.04 * s)
    l_elbow = (l_sh[0] - arm * np.sin(la), l_sh[1] + arm * np.cos(la))
    r_elbow = (r_sh[0] + arm * np.sin(ra), r_sh[1] + arm * np.cos(ra))
    lb, rb = la + rng.uniform(-0.4, 0.3), ra + rng.uniform(-0.4, 0.3)
    l_hand = (l_elbow[0] - arm * np.sin(lb), l_elbow[1] + arm * np.cos(lb))
    r_hand = (r_elbow[0] + arm * np.sin(rb), r_elbow[1] + arm * np.cos(rb))
    ll, rl = rng.uniform(0.05, 0.35), rng.uniform(0.05, 0.35)
    leg = 0.43 * s
    l_foot = (pelvis[0] - leg * np.sin(ll), pelvis[1] + leg * np.cos(ll))
    r_foot = (pelvis[0] + leg * np.sin(rl), pelvis[1] + leg * np.cos(rl))

    layers = []
    layers.append((4, style.lower, _capsule(yy, xx, pelvis, l_foot, limb) | _capsule(yy, xx, pelvis, r_foot, limb)))
    layers.append((2, style.upper, _capsule(yy, xx, neck, pelvis, 0.11 * s)))
    if style.bag:
        bag = (np.abs(xx - (cx + 0.1 * s)) <= 0.06 * s) & (np.abs(yy - (y0 + 0.45 * s)) <= 0.06 * s)
        layers.append((5, BAG, bag))
    arms = (_capsule(yy, xx, l_sh, l_elbow, limb) | _capsule(yy, xx, l_elbow, l_hand, limb)
            | _capsule(yy, xx, r_sh, r_elbow, limb) | _capsule(yy, xx, r_elbow, r_hand, limb))
    layers.append((3, style.skin, arms))
    layers.append((1, style.skin, (xx - head[0]) ** 2 + (yy - head[1]) ** 2 <= head_r ** 2))
    if style.hat:
        hat = (np.abs(xx - head[0]) <= 1.1 * head_r) & (yy >= head[1] - 1.6 * head_r) & (yy <= head[1] - 0.45 * head_r)
        layers.append((5, HAT, hat))
    for cls, color, m in layers:
        img[m] = color
        cmap[m] = cls
        inst[m] = inst_id
    pts = np.array([head, neck, l_elbow, l_hand, r_elbow, r_hand, l_foot, r_foot])
    vis = (pts[:, 0] >= 0) & (pts[:, 0] <= W - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= H - 1)
    return np.concatenate([pts, vis[:, None].astype(float)], axis=1)


def generate_scene(spec: SceneSpec, index: int, identities: Optional[list] = None) -> SceneBundle:
    """Render scene ``index``; the same (spec, index, identities) always gives identical output."""
    H, W = spec.canvas
    rng = np.random.default_rng([spec.seed, index])
    hmin = spec.min_height * H
    if hmin < 16 or 0.5 * hmin > W:
        raise SceneError(f"canvas {spec.canvas} too small for a figure")
    img = _background(rng, H, W)
    cmap = np.zeros((H, W), np.int64)
    inst = np.zeros((H, W), np.int64)
    n = int(rng.integers(spec.figures[0], spec.figures[1] + 1)) if identities is None else len(identities)
    ids = list(identities) if identities is not None else [int(rng.integers(spec.identity_pool)) for _ in range(n)]
    # disjoint horizontal slots keep figures separable
    slot = W / n
    figures = []
    for k, ident in enumerate(ids):
        style = identity_style(spec.seed, ident)
        frac = spec.max_height if style.tall else spec.min_height + 0.5 * (spec.max_height - spec.min_height)
        frac = min(frac * rng.uniform(0.9, 1.0), spec.max_height)
        s = min(frac * H, 1.4 * slot)
        left = k * slot + rng.uniform(0, max(slot - 0.5 * s, 0))
        top = rng.uniform(0, H - s)
        kps = _draw_figure(img, cmap, inst, k + 1, style, (left, top), s, rng)
        figures.append((ident, style, kps))
    out = []
    for k, (ident, style, kps) in enumerate(figures):
        # joints painted over by a later figure are occluded
        for j, (x, y, v) in enumerate(kps):
            if v and inst[int(round(y)), int(round(x))] not in (0, k + 1):
                kps[j, 2] = 0.0
        ys, xs = np.nonzero(inst == k + 1)
        if len(ys) == 0:
            continue
        x0, x1, y0, y1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
        box = np.array([(x0 + x1) / 2 / W, (y0 + y1) / 2 / H, (y1 - y0) / H, (x1 - x0) / W])
        out.append(Figure(ident, box, kps, style.attributes, k + 1))
    # 8-bit quantized so written PNGs reload bit-exactly
    img = np.round(np.clip(img, 0, 1) * 255) / 255
    return SceneBundle(img.astype(np.float32), cmap, inst, out)


def topdown_crop(image: np.ndarray, box_xywh, out_hw: tuple, keypoints: Optional[np.ndarray] = None,
                 class_map: Optional[np.ndarray] = None, margin: float = 0.15) -> dict:
    """Crop around a pixel box (x, y, w, h), expanded to the out_hw aspect ratio, and resize to out_hw."""
    oh, ow = out_hw
    bx, by, bw, bh = (float(v) for v in box_xywh)
    cx, cy = bx + bw / 2, by + bh / 2
    h = max(bh, bw * oh / ow) * (1 + 2 * margin)
    w = h * ow / oh
    x0, y0 = cx - w / 2, cy - h / 2
    # PIL affine: output pixel center (u + .5, v + .5) samples input point (x0 + (u + .5) w/ow, y0 + (v + .5) h/oh)
    data = (w / ow, 0, x0, 0, h / oh, y0)
    im = Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8))
    out = {"image": np.asarray(im.transform((ow, oh), Image.AFFINE, data, resample=Image.BILINEAR),
                               np.float32) / 255}
    if class_map is not None:
        cm = Image.fromarray(class_map.astype(np.uint8))
        out["class_map"] = np.asarray(cm.transform((ow, oh), Image.AFFINE, data, resample=Image.NEAREST)).astype(np.int64)
    if keypoints is not None:
        kps = np.array(keypoints, dtype=np.float64)
        kps[:, 0] = (kps[:, 0] + 0.5 - x0) * ow / w - 0.5
        kps[:, 1] = (kps[:, 1] + 0.5 - y0) * oh / h - 0.5
        inside = (kps[:, 0] >= 0) & (kps[:, 0] <= ow - 1) & (kps[:, 1] >= 0) & (kps[:, 1] <= oh - 1)
        kps[:, 2] = (kps[:, 2] > 0) & inside
        out["keypoints"] = kps
    return out


def figure_box_xywh(scene: SceneBundle, fig: Figure) -> np.ndarray:
    H, W = scene.class_map.shape
    cx, cy, h, w = fig.box
    return np.array([(cx - w / 2) * W, (cy - h / 2) * H, w * W, h * H])


def crop_figure(scene: SceneBundle, fig: Figure, out_hw: tuple, margin: float = 0.15) -> dict:
    """Top-down sample for one figure of a scene."""
    out = topdown_crop(scene.image, figure_box_xywh(scene, fig), out_hw, fig.keypoints, scene.class_map, margin)
    out["attributes"] = fig.attributes.copy()
    out["identity"] = fig.identity
    return out
