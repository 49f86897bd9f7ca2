"""Center-based detection head.

Predicts per-class center heatmaps plus dense regression channels
(xy offset within the cell, z, log dimensions, yaw as sin/cos), builds
Gaussian-splat training targets, computes the focal + masked-L1 loss, and
decodes peaks back into oriented boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import Box3D, Detection
from .errors import ContractViolation
from .pillars import GridSpec

Array = np.ndarray

REG_CHANNELS = 8  # offset(2) + z(1) + log-dims(3) + sin/cos yaw(2)
HEATMAP_INIT_BIAS = -2.19  # sigmoid ~= 0.1: keeps the focal loss tame at init


@dataclass
class HeadParams:
    stem_w: T.Param
    stem_b: T.Param
    hm_w: T.Param
    hm_b: T.Param
    reg_w: T.Param
    reg_b: T.Param

    def params(self) -> list[T.Param]:
        return [self.stem_w, self.stem_b, self.hm_w, self.hm_b, self.reg_w, self.reg_b]


def init_head_params(rng: np.random.Generator, channels: int, n_classes: int, dtype=np.float32, name: str = "head") -> HeadParams:
    def conv(out_ch, in_ch, k, suffix, bias_fill=0.0, gain=1.0):
        scale = np.sqrt(gain / (in_ch * k * k))
        w = T.Param(rng.normal(0.0, scale, size=(out_ch, in_ch, k, k)).astype(dtype), name=f"{name}.{suffix}.weight")
        b = T.Param(np.full(out_ch, bias_fill, dtype=dtype), name=f"{name}.{suffix}.bias")
        return w, b

    stem_w, stem_b = conv(channels, channels, 3, "stem", gain=2.0)  # feeds silu
    hm_w, hm_b = conv(n_classes, channels, 1, "heatmap", bias_fill=HEATMAP_INIT_BIAS)
    reg_w, reg_b = conv(REG_CHANNELS, channels, 1, "regression")
    return HeadParams(stem_w=stem_w, stem_b=stem_b, hm_w=hm_w, hm_b=hm_b, reg_w=reg_w, reg_b=reg_b)


@dataclass
class RawMaps:
    """Head outputs before any activation: heatmap logits + regression channels."""

    heatmap: T.Tensor  # (n_classes, X, Y)
    regression: T.Tensor  # (8, X, Y)


def head_forward(f5, params: HeadParams) -> RawMaps:
    """Shared 3x3 stem with SiLU, then per-task 1x1 heads."""
    stem = T.silu(T.conv2d(f5, params.stem_w, params.stem_b, padding=1))
    return RawMaps(
        heatmap=T.conv2d(stem, params.hm_w, params.hm_b),
        regression=T.conv2d(stem, params.reg_w, params.reg_b),
    )


# ---------------------------------------------------------------------------
# training targets
# ---------------------------------------------------------------------------


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Radius (in cells) such that a shifted box still overlaps by min_overlap."""
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(max(b1 * b1 - 4 * c1, 0.0))) / 2

    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(max(b2 * b2 - 16 * c2, 0.0))) / 2

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(max(b3 * b3 - 4 * a3 * c3, 0.0))) / 2
    return min(r1, r2, r3)


def _draw_gaussian(heatmap: Array, cx: int, cy: int, radius: int) -> None:
    """Splat a peak-1 Gaussian at (cx, cy), merging with elementwise max."""
    diameter = 2 * radius + 1
    sigma = diameter / 6.0
    ys, xs = np.ogrid[-radius : radius + 1, -radius : radius + 1]
    gauss = np.exp(-(xs * xs + ys * ys) / (2.0 * sigma * sigma))
    h, w = heatmap.shape
    top, bottom = min(cx, radius), min(h - cx, radius + 1)
    left, right = min(cy, radius), min(w - cy, radius + 1)
    patch = heatmap[cx - top : cx + bottom, cy - left : cy + right]
    gpatch = gauss[radius - top : radius + bottom, radius - left : radius + right]
    np.maximum(patch, gpatch, out=patch)


@dataclass
class HeadTargets:
    heatmap: Array  # (n_classes, X, Y) in [0, 1]
    regression: Array  # (8, X, Y)
    mask: Array  # (X, Y) bool, true at GT center cells
    n_positives: int
    skipped_out_of_range: int = 0


def build_targets(boxes: list[Box3D], grid: GridSpec, n_classes: int, min_overlap: float = 0.7) -> HeadTargets:
    """Gaussian heatmap + sparse regression targets at GT center cells."""
    x_cells, y_cells = grid.x_cells, grid.y_cells
    heatmap = np.zeros((n_classes, x_cells, y_cells), dtype=np.float32)
    regression = np.zeros((REG_CHANNELS, x_cells, y_cells), dtype=np.float32)
    mask = np.zeros((x_cells, y_cells), dtype=bool)
    skipped = 0
    n_pos = 0
    for box in boxes:
        fx = (box.x - grid.x_range[0]) / grid.pillar_size
        fy = (box.y - grid.y_range[0]) / grid.pillar_size
        ix, iy = int(math.floor(fx)), int(math.floor(fy))
        if not (0 <= ix < x_cells and 0 <= iy < y_cells):
            skipped += 1
            continue
        if not (0 <= box.cls < n_classes):
            raise ContractViolation(f"box class {box.cls} outside [0, {n_classes})")
        radius = max(0, int(gaussian_radius(box.l / grid.pillar_size, box.w / grid.pillar_size, min_overlap)))
        _draw_gaussian(heatmap[box.cls], ix, iy, radius)
        heatmap[box.cls, ix, iy] = 1.0
        regression[:, ix, iy] = (
            fx - ix,
            fy - iy,
            box.z,
            math.log(box.l),
            math.log(box.w),
            math.log(box.h),
            math.sin(box.yaw),
            math.cos(box.yaw),
        )
        mask[ix, iy] = True
        n_pos += 1
    return HeadTargets(heatmap=heatmap, regression=regression, mask=mask, n_positives=n_pos, skipped_out_of_range=skipped)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _square(t):
    return T.mul(t, t)


def detection_loss(raw: RawMaps, targets: HeadTargets, reg_weight: float = 1.0):
    """Penalty-reduced focal loss on the heatmap + masked L1 on the regression.

    Returns (total loss Tensor, breakdown dict of floats). Both terms are
    normalized by the positive count.
    """
    dtype = T.value(raw.heatmap).dtype
    hm_t = targets.heatmap.astype(dtype, copy=False)
    pos_mask = (hm_t >= 1.0).astype(dtype)
    neg_weight = ((1.0 - hm_t) ** 4).astype(dtype) * (1.0 - pos_mask)
    norm = 1.0 / max(targets.n_positives, 1)

    p = T.clamp(T.sigmoid(raw.heatmap), 1e-6, 1.0 - 1e-6)
    one_minus_p = T.sub(1.0, p)
    pos_term = T.mul(T.mul(_square(one_minus_p), T.tlog(p)), pos_mask)
    neg_term = T.mul(T.mul(_square(p), T.tlog(one_minus_p)), neg_weight)
    focal = T.mul(T.neg(T.add(T.reduce_sum(pos_term), T.reduce_sum(neg_term))), norm)

    reg_mask = np.broadcast_to(targets.mask, T.value(raw.regression).shape).astype(dtype)
    reg_t = targets.regression.astype(dtype, copy=False)
    l1 = T.mul(T.reduce_sum(T.mul(T.tabs(T.sub(raw.regression, reg_t)), reg_mask)), norm)

    total = T.add(focal, T.mul(l1, reg_weight))
    breakdown = {"focal": focal.item(), "l1": l1.item(), "total": total.item()}
    return total, breakdown


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def _local_max_mask(score: Array) -> Array:
    """3x3 local-maximum survival with ties broken by lowest flat index."""
    x_cells, y_cells = score.shape
    padded = np.full((x_cells + 2, y_cells + 2), -np.inf, dtype=score.dtype)
    padded[1:-1, 1:-1] = score
    dead = np.zeros_like(score, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            neighbor = padded[1 + di : 1 + di + x_cells, 1 + dj : 1 + dj + y_cells]
            earlier = di < 0 or (di == 0 and dj < 0)
            dead |= (neighbor >= score) if earlier else (neighbor > score)
    return ~dead


def decode(
    raw: RawMaps,
    grid: GridSpec,
    top_k: int = 100,
    score_threshold: float = 0.1,
) -> list[Detection]:
    """Peaks of the sigmoid heatmap -> oriented boxes, sorted by descending score."""
    hm = T.value(raw.heatmap)
    reg = T.value(raw.regression)
    n_classes = hm.shape[0]
    prob = 1.0 / (1.0 + np.exp(-hm.astype(np.float64)))
    prob = np.clip(prob, 1e-9, 1.0 - 1e-9)  # keep scores strictly inside (0, 1)

    candidates = []  # (score, cls, ix, iy)
    for cls in range(n_classes):
        peaks = _local_max_mask(prob[cls])
        for ix, iy in zip(*np.nonzero(peaks)):
            s = prob[cls, ix, iy]
            if s > score_threshold:
                candidates.append((float(s), cls, int(ix), int(iy)))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
    candidates = candidates[:top_k]

    detections = []
    for score, cls, ix, iy in candidates:
        off_x, off_y, z, log_l, log_w, log_h, sin_t, cos_t = reg[:, ix, iy].astype(np.float64)
        box = Box3D(
            x=grid.x_range[0] + (ix + off_x) * grid.pillar_size,
            y=grid.y_range[0] + (iy + off_y) * grid.pillar_size,
            z=z,
            l=float(np.exp(log_l)),
            w=float(np.exp(log_w)),
            h=float(np.exp(log_h)),
            yaw=math.atan2(sin_t, cos_t),
            cls=cls,
        )
        detections.append(Detection(box=box, score=score))
    return detections
