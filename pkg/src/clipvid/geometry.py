"""Bounding-box algebra: IoU/GIoU, logit-space box refinement, RoI sampling.

Boxes live in normalized (cx, cy, w, h) form. Plain-float paths serve
matching and evaluation; tensor paths serve the training loss, where
gradients must reach the box-offset predictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError

WH_MIN = 1e-4
LOGIT_EPS = 1e-4


@dataclass(frozen=True)
class Box:
    """Normalized center-size box; w, h stay in [WH_MIN, 1] after updates."""

    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @staticmethod
    def from_corners(x1: float, y1: float, x2: float, y2: float) -> "Box":
        return Box((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def clamped(self) -> "Box":
        return Box(min(max(self.cx, 0.0), 1.0), min(max(self.cy, 0.0), 1.0),
                   min(max(self.w, WH_MIN), 1.0), min(max(self.h, WH_MIN), 1.0))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class BoxDelta:
    """Additive offsets in inverse-sigmoid (logit) space."""

    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self):
        if not all(map(math.isfinite, (self.dx, self.dy, self.dw, self.dh))):
            raise InputError("box delta must be finite")


def full_frame_box() -> Box:
    return Box(0.5, 0.5, 1.0, 1.0)


def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def giou(a: Box, b: Box) -> float:
    """IoU minus the enclosure penalty; in [-1, 1], 1 iff boxes coincide."""
    if a.w <= 0 or a.h <= 0 or b.w <= 0 or b.h <= 0:
        raise InputError(f"giou: degenerate box (a={a}, b={b})")
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
    ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
    inter = iw * ih
    union = a.area() + b.area() - inter
    ew = max(ax2, bx2) - min(ax1, bx1)
    eh = max(ay2, by2) - min(ay1, by1)
    enclosure = ew * eh
    return inter / union - (enclosure - union) / enclosure


def inverse_sigmoid(x: float, eps: float = LOGIT_EPS) -> float:
    x = min(max(x, eps), 1.0 - eps)
    return math.log(x / (1.0 - x))


def apply_delta(b: Box, d: BoxDelta) -> Box:
    def upd(coord: float, delta: float) -> float:
        return 1.0 / (1.0 + math.exp(-(inverse_sigmoid(coord) + delta)))

    return Box(upd(b.cx, d.dx), upd(b.cy, d.dy),
               upd(b.w, d.dw), upd(b.h, d.dh)).clamped()


def roi_grid_points(b: Box, s: int, h: int, w: int) -> np.ndarray:
    """Fractional-index sample points: centers of an s*s grid inside b.

    The box is clamped to the frame; points land in pixel-center
    coordinates (pixel j covers [j, j+1), center at j + 0.5).
    """
    bc = Box(min(max(b.cx, 0.0), 1.0), min(max(b.cy, 0.0), 1.0),
             min(b.w, 1.0), min(b.h, 1.0))
    x1, y1, x2, y2 = bc.corners()
    x1, x2 = max(x1, 0.0), min(x2, 1.0)
    y1, y2 = max(y1, 0.0), min(y2, 1.0)
    cols = (np.arange(s) + 0.5) / s
    xs = (x1 + cols * (x2 - x1)) * w - 0.5
    ys = (y1 + cols * (y2 - y1)) * h - 0.5
    gx, gy = np.meshgrid(xs, ys)             # row-major: y outer, x inner
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def roi_sample(f: Tensor, b: Box, s: int) -> Tensor:
    """Bilinear sample an s*s grid of cell centers inside b -> [s*s, d]."""
    h, w, _ = f.shape
    return ad.bilinear_sample(f, roi_grid_points(b, s, h, w))


def roi_grid_points_batch(boxes: np.ndarray, s: int, h: int, w: int) -> np.ndarray:
    """Vectorized grid points of [n, 4] center-size boxes -> [n*s*s, 2]."""
    b = np.asarray(boxes, dtype=np.float64)
    cx = np.clip(b[:, 0], 0.0, 1.0)
    cy = np.clip(b[:, 1], 0.0, 1.0)
    bw = np.minimum(b[:, 2], 1.0)
    bh = np.minimum(b[:, 3], 1.0)
    x1 = np.maximum(cx - bw / 2.0, 0.0)
    x2 = np.minimum(cx + bw / 2.0, 1.0)
    y1 = np.maximum(cy - bh / 2.0, 0.0)
    y2 = np.minimum(cy + bh / 2.0, 1.0)
    cols = (np.arange(s) + 0.5) / s
    xs = (x1[:, None] + cols[None, :] * (x2 - x1)[:, None]) * w - 0.5   # [n, s]
    ys = (y1[:, None] + cols[None, :] * (y2 - y1)[:, None]) * h - 0.5
    gx = np.repeat(xs[:, None, :], s, axis=1)        # [n, s, s] x inner
    gy = np.repeat(ys[:, :, None], s, axis=2)        # y outer, row-major
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def roi_sample_frame(f: Tensor, boxes: list[Box], s: int) -> Tensor:
    """All boxes of one frame in a single sampling call -> [n, s*s, d]."""
    h, w, d = f.shape
    arr = np.array([[b.cx, b.cy, b.w, b.h] for b in boxes])
    pts = roi_grid_points_batch(arr, s, h, w)
    out = ad.bilinear_sample(f, pts)
    return ad.reshape(out, (len(boxes), s * s, d))


# ---------------------------------------------------------------------------
# Tensor-space box math for the training loss


def boxes_refine(ref: np.ndarray, delta: Tensor) -> Tensor:
    """sigmoid(logit(ref) + delta) rowwise over [n, 4] boxes.

    ref holds the detached reference boxes; gradients reach only delta.
    """
    clipped = np.clip(ref, LOGIT_EPS, 1.0 - LOGIT_EPS)
    logits = np.log(clipped / (1.0 - clipped))
    return ad.sigmoid(delta + ad.tensor(logits))


def giou_pairs(pred: Tensor, gt: np.ndarray) -> Tensor:
    """GIoU between row-aligned [n, 4] center-size boxes -> [n]."""
    n = pred.shape[0]
    half = ad.tensor(np.array([0.5]))
    pt = ad.transpose(pred, (1, 0))
    cx, cy, w, h = (ad.gather_rows(pt, [i]) for i in range(4))
    px1 = cx - w * half
    px2 = cx + w * half
    py1 = cy - h * half
    py2 = cy + h * half
    g = np.asarray(gt, dtype=np.float64)
    gx1 = ad.tensor((g[:, 0] - g[:, 2] / 2)[None, :])
    gx2 = ad.tensor((g[:, 0] + g[:, 2] / 2)[None, :])
    gy1 = ad.tensor((g[:, 1] - g[:, 3] / 2)[None, :])
    gy2 = ad.tensor((g[:, 1] + g[:, 3] / 2)[None, :])
    zero = ad.tensor(np.zeros((1, n)))
    iw = ad.maximum(ad.minimum(px2, gx2) - ad.maximum(px1, gx1), zero)
    ih = ad.maximum(ad.minimum(py2, gy2) - ad.maximum(py1, gy1), zero)
    inter = iw * ih
    union = w * h + ad.tensor((g[:, 2] * g[:, 3])[None, :]) - inter
    ew = ad.maximum(px2, gx2) - ad.minimum(px1, gx1)
    eh = ad.maximum(py2, gy2) - ad.minimum(py1, gy1)
    enclosure = ew * eh
    out = inter / union - (enclosure - union) / enclosure
    return ad.reshape(out, (n,))


def l1_pairs(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Sum of absolute coordinate differences per row -> [n]."""
    diff = ad.absolute(pred - ad.tensor(np.asarray(gt, dtype=np.float64)))
    return ad.reduce_sum(diff, axis=1)
