"""Anchors, box-delta coding and non-maximum suppression."""

from __future__ import annotations

import math

import numpy as np
import torch

# delta = ((gx - ax) / aw, (gy - ay) / ah, log(gw / aw), log(gh / ah)) * weights
RPN_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
RCNN_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
MAX_LOG_RATIO = math.log(1000.0 / 16)


def make_anchors(feat_h: int, feat_w: int, stride: int, scale: float, ratios) -> torch.Tensor:
    """Anchors ordered (row, col, ratio), shape (feat_h * feat_w * len(ratios), 4).

    ``ratio`` is height / width; every anchor has area ``scale ** 2``.
    """
    ratios = torch.as_tensor(ratios, dtype=torch.float64)
    ws = scale / torch.sqrt(ratios)
    hs = scale * torch.sqrt(ratios)
    ys = (torch.arange(feat_h, dtype=torch.float64) + 0.5) * stride
    xs = (torch.arange(feat_w, dtype=torch.float64) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)
    boxes = torch.stack([cx - ws / 2, cy - hs / 2, cx + ws / 2, cy + hs / 2], dim=-1)
    return boxes.reshape(-1, 4)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU between (N, 4) and (M, 4) corner boxes."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def encode(boxes: torch.Tensor, refs: torch.Tensor, weights=RPN_WEIGHTS) -> torch.Tensor:
    rw = refs[:, 2] - refs[:, 0]
    rh = refs[:, 3] - refs[:, 1]
    rx = refs[:, 0] + 0.5 * rw
    ry = refs[:, 1] + 0.5 * rh
    gw = boxes[:, 2] - boxes[:, 0]
    gh = boxes[:, 3] - boxes[:, 1]
    gx = boxes[:, 0] + 0.5 * gw
    gy = boxes[:, 1] + 0.5 * gh
    wx, wy, ww, wh = weights
    return torch.stack([
        wx * (gx - rx) / rw,
        wy * (gy - ry) / rh,
        ww * torch.log(gw / rw),
        wh * torch.log(gh / rh),
    ], dim=1)


def decode(deltas: torch.Tensor, refs: torch.Tensor, weights=RPN_WEIGHTS) -> torch.Tensor:
    refs = refs.to(deltas.dtype)
    rw = refs[:, 2] - refs[:, 0]
    rh = refs[:, 3] - refs[:, 1]
    rx = refs[:, 0] + 0.5 * rw
    ry = refs[:, 1] + 0.5 * rh
    wx, wy, ww, wh = weights
    dx = deltas[:, 0] / wx
    dy = deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=MAX_LOG_RATIO)
    dh = (deltas[:, 3] / wh).clamp(max=MAX_LOG_RATIO)
    cx = rx + dx * rw
    cy = ry + dy * rh
    w = rw * torch.exp(dw)
    h = rh * torch.exp(dh)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


def clip_boxes(boxes: torch.Tensor, height: int, width: int) -> torch.Tensor:
    x = boxes[:, 0::2].clamp(0, width)
    y = boxes[:, 1::2].clamp(0, height)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by score descending, ties broken by lower index."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(len(scores)), -scores))


def nms(boxes: np.ndarray, scores: np.ndarray, threshold: float, limit: int | None = None) -> np.ndarray:
    """Greedy NMS; a box is dropped when its IoU with a kept box exceeds ``threshold``."""
    boxes = np.asarray(boxes, dtype=np.float64)
    order = score_order(scores)
    if len(order) == 0:
        return order
    ious = box_iou(torch.from_numpy(boxes), torch.from_numpy(boxes)).numpy()
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        if limit is not None and len(keep) >= limit:
            break
        suppressed |= ious[i] > threshold
    return np.asarray(keep, dtype=np.int64)
