"""Box arithmetic, smooth-L1, and foreground masks for feature imitation.

Boxes are ``(x0, y0, x1, y1)`` in continuous pixel coordinates. The array
helpers take ``(n, 4)`` float arrays; the scalar helpers take anything that
``np.asarray`` turns into a 4-vector, including :class:`Box`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

DELTA_CLAMP = 4.0

MASK_MODES = ("gaussian", "rectangle", "all")


class _BoxFields(NamedTuple):
    x0: float
    y0: float
    x1: float
    y1: float


class Box(_BoxFields):
    """Axis-aligned rectangle with positive width and height."""

    def __new__(cls, x0, y0, x1, y1):
        x0, y0, x1, y1 = float(x0), float(y0), float(x1), float(y1)
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate box ({x0}, {y0}, {x1}, {y1})")
        return super().__new__(cls, x0, y0, x1, y1)

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> tuple:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def scaled(self, factor: float) -> "Box":
        return Box(self.x0 * factor, self.y0 * factor, self.x1 * factor, self.y1 * factor)


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


def area(boxes: np.ndarray) -> np.ndarray:
    b = as_boxes(boxes)
    return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    a, b = as_boxes(a), as_boxes(b)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.maximum(ix1 - ix0, 0.0) * np.maximum(iy1 - iy0, 0.0)
    union = area(a)[:, None] + area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def iou(a, b) -> float:
    return float(iou_matrix(a, b)[0, 0])


def paired_iou(a, b) -> np.ndarray:
    """Row-wise IoU of two equally long box arrays."""
    a, b = as_boxes(a), as_boxes(b)
    ix0 = np.maximum(a[:, 0], b[:, 0])
    iy0 = np.maximum(a[:, 1], b[:, 1])
    ix1 = np.minimum(a[:, 2], b[:, 2])
    iy1 = np.minimum(a[:, 3], b[:, 3])
    inter = np.maximum(ix1 - ix0, 0.0) * np.maximum(iy1 - iy0, 0.0)
    union = area(a) + area(b) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def encode_deltas(proposals, targets) -> np.ndarray:
    """Regression targets ``(tx, ty, tw, th)`` taking ``proposals`` onto ``targets``.

    Scalar boxes in, 4-vector out; ``(n, 4)`` in, ``(n, 4)`` out.
    """
    single = np.ndim(proposals) == 1
    p, t = as_boxes(proposals), as_boxes(targets)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    tw, th = t[:, 2] - t[:, 0], t[:, 3] - t[:, 1]
    out = np.stack(
        [
            ((t[:, 0] + t[:, 2]) - (p[:, 0] + p[:, 2])) * 0.5 / pw,
            ((t[:, 1] + t[:, 3]) - (p[:, 1] + p[:, 3])) * 0.5 / ph,
            np.log(tw / pw),
            np.log(th / ph),
        ],
        axis=1,
    )
    return out[0] if single else out


def decode_deltas(deltas, proposals) -> np.ndarray:
    """Inverse of :func:`encode_deltas`; size deltas are clamped at ``DELTA_CLAMP``."""
    single = np.ndim(proposals) == 1
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    p = as_boxes(proposals)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    cx = 0.5 * (p[:, 0] + p[:, 2]) + d[:, 0] * pw
    cy = 0.5 * (p[:, 1] + p[:, 3]) + d[:, 1] * ph
    w = pw * np.exp(np.minimum(d[:, 2], DELTA_CLAMP))
    h = ph * np.exp(np.minimum(d[:, 3], DELTA_CLAMP))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    return out[0] if single else out


def clip_boxes(boxes, width: float, height: float, min_size: float = 1.0) -> np.ndarray:
    """Clip to the image and keep every side at least ``min_size`` long."""
    b = as_boxes(boxes).copy()
    b[:, 0] = np.clip(b[:, 0], 0, width - min_size)
    b[:, 1] = np.clip(b[:, 1], 0, height - min_size)
    b[:, 2] = np.clip(b[:, 2], b[:, 0] + min_size, width)
    b[:, 3] = np.clip(b[:, 3], b[:, 1] + min_size, height)
    return b


def score_order(scores) -> np.ndarray:
    """Indices by descending score, lower index first among ties."""
    s = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(s.size), -s))


def nms(boxes, scores, iou_threshold: float, max_keep: Optional[int] = None) -> list:
    """Greedy non-maximum suppression; returns kept indices in descending-score order.

    ``max_keep`` stops early once that many boxes survive, which does not change
    the leading part of the result.
    """
    b = as_boxes(boxes)
    if b.shape[0] == 0:
        return []
    order = score_order(scores)
    areas = area(b)
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = order[1:]
        ix0 = np.maximum(b[i, 0], b[rest, 0])
        iy0 = np.maximum(b[i, 1], b[rest, 1])
        ix1 = np.minimum(b[i, 2], b[rest, 2])
        iy1 = np.minimum(b[i, 3], b[rest, 3])
        inter = np.maximum(ix1 - ix0, 0.0) * np.maximum(iy1 - iy0, 0.0)
        union = areas[i] + areas[rest] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            ov = np.where(union > 0, inter / union, 0.0)
        order = rest[ov <= iou_threshold]
    return keep


def smooth_l1(x) -> float:
    """Smooth-L1 with transition at 1, summed over all components of ``x``."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    return float(np.where(a < 1.0, 0.5 * a * a, a - 0.5).sum())


# ---------------------------------------------------------------------- masks
@dataclass(frozen=True)
class MaskConfig:
    mode: str = "gaussian"
    sigma_x_sq: float = 2.0
    sigma_y_sq: float = 2.0

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise ValueError(f"mask mode must be one of {MASK_MODES}, got {self.mode!r}")
        if not (self.sigma_x_sq > 0 and self.sigma_y_sq > 0):
            raise ValueError("mask decay factors must be positive")


def gaussian_weight(x, y, box, sigma_x_sq: float = 2.0, sigma_y_sq: float = 2.0):
    """Unmasked Gaussian kernel value of ``box`` at point(s) ``(x, y)``."""
    x0, y0, x1, y1 = (float(v) for v in box)
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    hw, hh = 0.5 * (x1 - x0), 0.5 * (y1 - y0)
    return np.exp(
        -((np.asarray(x) - cx) ** 2) / (sigma_x_sq * hw * hw)
        - (np.asarray(y) - cy) ** 2 / (sigma_y_sq * hh * hh)
    )


def build_mask(gt_boxes: Sequence, width: int, height: int, config: MaskConfig = MaskConfig()) -> np.ndarray:
    """Foreground weight per feature cell, returned as an ``(height, width)`` array.

    ``gt_boxes`` must already be in feature-map units. Cell ``(i, j)`` is
    sampled at ``(j + 0.5, i + 0.5)``; a cell belongs to a box when its center
    lies in the half-open ``[x0, x1) x [y0, y1)``. Overlaps take the maximum.
    """
    if width < 1 or height < 1:
        raise ValueError(f"mask grid must be at least 1x1, got {width}x{height}")
    if config.mode == "all":
        return np.ones((height, width))
    mask = np.zeros((height, width))
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    for box in as_boxes(gt_boxes):
        x0, y0, x1, y1 = box
        cols = (xs >= x0) & (xs < x1)
        rows = (ys >= y0) & (ys < y1)
        if not cols.any() or not rows.any():
            continue
        if config.mode == "rectangle":
            values = np.ones((rows.sum(), cols.sum()))
        else:
            values = gaussian_weight(
                xs[cols][None, :], ys[rows][:, None], box, config.sigma_x_sq, config.sigma_y_sq
            )
        region = np.ix_(rows, cols)
        mask[region] = np.maximum(mask[region], values)
    return mask


def box_from_center(cx: float, cy: float, w: float, h: float) -> Box:
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def is_finite_box(box) -> bool:
    b = np.asarray(box, dtype=np.float64)
    return bool(np.all(np.isfinite(b)) and b[2] > b[0] and b[3] > b[1])
