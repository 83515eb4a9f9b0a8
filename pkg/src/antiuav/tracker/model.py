"""A small query-guided two-stage tracker.

Pipeline per frame: backbone -> class-level modulation of the search feature
by the query ROI (query used as a depthwise correlation kernel) -> RPN ->
proposals -> ROI features -> instance-level (Hadamard) modulation -> RCNN.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align

from ..geometry import BoundingBox, PredictionState
from . import boxes as B

STRATEGIES = ("normal", "dfsc", "dfsc_all", "dfsc_cls", "dfsc_reg")


class ShapeError(ValueError):
    pass


@dataclass
class TrackerConfig:
    in_channels: int = 1
    channels: int = 32
    roi_size: int = 7
    stride: int = 8
    anchor_scale: float = 16.0
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    n_pnum: int = 64
    nms_threshold: float = 0.7
    min_box_size: float = 1.0
    theta_exist: float = 0.5
    rcnn_hidden: int = 256
    cls_bias_init: float = -2.0
    strategy: str = "dfsc"

    def __post_init__(self):
        self.anchor_ratios = tuple(float(r) for r in self.anchor_ratios)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.n_pnum < 1:
            raise ValueError("n_pnum must be >= 1")

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_ratios)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchor_ratios"] = list(self.anchor_ratios)
        return d


class Proposals(NamedTuple):
    boxes: torch.Tensor  # (M, 4) image coordinates
    scores: torch.Tensor  # (M,) objectness logits
    anchor_index: torch.Tensor  # (M,)


@dataclass(frozen=True)
class Proposal:
    box: BoundingBox
    objectness: float


def _conv(cin, cout, k, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, padding_mode="replicate")


class Backbone(nn.Module):
    """Four strided 3x3 convolutions, total stride 8."""

    stride = 8

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        self.convs = nn.ModuleList([
            _conv(in_channels, channels // 2, 3, 2),
            _conv(channels // 2, channels, 3, 2),
            _conv(channels, channels, 3, 2),
            _conv(channels, channels, 3, 1),
        ])

    def forward(self, x):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.relu(x)
        return x


class ClassModulator(nn.Module):
    """Query-as-kernel correlation: ``f_out(f_z(z) * f_x(x))``."""

    def __init__(self, channels: int):
        super().__init__()
        # no bias on f_z so a zero query yields a zero kernel
        self.f_z = nn.Conv2d(channels, channels, 1, bias=False)
        self.f_x = nn.Conv2d(channels, channels, 1)
        self.f_out = nn.Conv2d(channels, channels, 1)

    def forward(self, z, x):
        return csm_modulate(z, x, self)


class InstanceModulator(nn.Module):
    """Hadamard modulation: ``f'_out(f'_z(z) . f'_x(x_k))``."""

    def __init__(self, channels: int):
        super().__init__()
        self.f_z = nn.Conv2d(channels, channels, 1)
        self.f_x = nn.Conv2d(channels, channels, 1)
        self.f_out = nn.Conv2d(channels, channels, 1)

    def forward(self, z, x):
        return ism_modulate(z, x, self)


class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = _conv(channels, channels, 3)
        self.cls = nn.Conv2d(channels, num_anchors, 1)
        self.reg = nn.Conv2d(channels, 4 * num_anchors, 1)


class RCNNHead(nn.Module):
    def __init__(self, channels: int, roi_size: int, hidden: int):
        super().__init__()
        self.fc = nn.Linear(channels * roi_size * roi_size, hidden)
        self.cls = nn.Linear(hidden, 1)
        self.reg = nn.Linear(hidden, 4)


class QueryGuidedTracker(nn.Module):
    def __init__(self, cfg: Optional[TrackerConfig] = None, seed: int = 42):
        super().__init__()
        self.cfg = cfg or TrackerConfig()
        c = self.cfg.channels
        self.backbone = Backbone(self.cfg.in_channels, c)
        self.csm = ClassModulator(c)
        self.rpn = RPNHead(c, self.cfg.num_anchors)
        self.ism = InstanceModulator(c)
        self.rcnn = RCNNHead(c, self.cfg.roi_size, self.cfg.rcnn_hidden)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        """Fan-in scaled normal init; classification biases start at background."""
        g = torch.Generator().manual_seed(int(seed))
        outputs = {self.rpn.cls, self.rpn.reg, self.rcnn.cls, self.rcnn.reg}
        with torch.no_grad():
            for _, m in sorted(self.named_modules(), key=lambda kv: kv[0]):
                if not isinstance(m, (nn.Conv2d, nn.Linear)):
                    continue
                fan_in = m.weight[0].numel()
                gain = 0.1 if m in outputs else math.sqrt(2.0)
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (gain / math.sqrt(fan_in)))
                if m.bias is not None:
                    m.bias.zero_()
            self.rpn.cls.bias.fill_(self.cfg.cls_bias_init)
            self.rcnn.cls.bias.fill_(self.cfg.cls_bias_init)

    def anchors(self, feat_h: int, feat_w: int) -> torch.Tensor:
        return B.make_anchors(feat_h, feat_w, self.cfg.stride, self.cfg.anchor_scale, self.cfg.anchor_ratios)

    @property
    def dtype(self):
        return self.rpn.cls.weight.dtype


# --- functional stages ----------------------------------------------------


def prepare_images(images, dtype=torch.float32) -> torch.Tensor:
    """(N, H, W, C) or (H, W, C) uint8/float frames -> (N, C, H, W) normalized tensor."""
    arr = np.asarray(images)
    x = torch.as_tensor(arr)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected (N, H, W, C) frames, got shape {tuple(x.shape)}")
    x = x.to(dtype)
    if not torch.isfinite(x).all():
        raise ValueError("non-finite pixels in input image")
    if arr.dtype == np.uint8:
        x = x / 255.0
    x = x.permute(0, 3, 1, 2)
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    std = x.std(dim=(1, 2, 3), keepdim=True, unbiased=False)
    return (x - mean) / (std + 0.05)


def extract_features(model: QueryGuidedTracker, images) -> torch.Tensor:
    """Backbone forward; returns (N, C, H/8, W/8)."""
    x = prepare_images(images, model.dtype)
    if x.shape[2] < 32 or x.shape[3] < 32:
        raise ShapeError(f"frames must be at least 32x32, got {tuple(x.shape[2:])}")
    if x.shape[1] != model.cfg.in_channels:
        raise ShapeError(f"model expects {model.cfg.in_channels} channels, got {x.shape[1]}")
    return model.backbone(x)


def roi_features(feats: torch.Tensor, rois: torch.Tensor, roi_size: int, stride: int) -> torch.Tensor:
    """Bilinear ROI alignment. ``rois`` is (K, 5) rows of (batch_index, x1, y1, x2, y2)."""
    return roi_align(feats, rois.to(feats.dtype), output_size=roi_size, spatial_scale=1.0 / stride,
                     sampling_ratio=2, aligned=True)


def encode_query(feats: torch.Tensor, box: BoundingBox, roi_size: int = 7, stride: int = 8,
                 batch_index: int = 0) -> torch.Tensor:
    """(C, k, k) ROI feature of ``box`` in one feature map of a batch."""
    if box.width <= 0 or box.height <= 0:
        raise ValueError(f"query box has no area: {box}")
    if feats.ndim == 3:
        feats = feats[None]
    rois = torch.tensor([[batch_index, *box.as_list()]], dtype=feats.dtype)
    return roi_features(feats, rois, roi_size, stride)[0]


def depthwise_correlation(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Correlate each (P, C, h, w) map with its own (P, C, k, k) kernel, 'same' padding."""
    p, c, h, w = x.shape
    k = kernel.shape[-1]
    out = F.conv2d(x.reshape(1, p * c, h, w), kernel.reshape(p * c, 1, k, k),
                   padding=k // 2, groups=p * c)
    return out.reshape(p, c, h, w)


def csm_modulate(z: torch.Tensor, x: torch.Tensor, params: ClassModulator) -> torch.Tensor:
    """Class-level modulation of search features ``x`` by query ROI features ``z``.

    ``z`` is (C, k, k) or (P, C, k, k); ``x`` is (C, h, w) or (P, C, h, w).
    The output keeps the spatial size of ``x``.
    """
    squeeze = z.ndim == 3
    if squeeze:
        z, x = z[None], x[None]
    if z.ndim != 4 or x.ndim != 4 or z.shape[0] != x.shape[0]:
        raise ShapeError(f"query {tuple(z.shape)} and search {tuple(x.shape)} do not pair up")
    cin = params.f_x.in_channels
    if z.shape[1] != cin or x.shape[1] != cin:
        raise ShapeError(f"channels: query {z.shape[1]}, search {x.shape[1]}, modulator expects {cin}")
    if z.shape[-1] != z.shape[-2] or z.shape[-1] % 2 == 0:
        raise ShapeError(f"query ROI must be square with odd size, got {tuple(z.shape[-2:])}")
    k = z.shape[-1]
    kernel = params.f_z(z)
    corr = depthwise_correlation(params.f_x(x), kernel) / (k * k)
    out = params.f_out(corr)
    return out[0] if squeeze else out


def rpn_forward(t: torch.Tensor, head: RPNHead) -> tuple[torch.Tensor, torch.Tensor]:
    """Objectness logits (P, h*w*A) and deltas (P, h*w*A, 4), anchors ordered (row, col, ratio)."""
    if t.ndim == 3:
        t = t[None]
    if t.shape[1] != head.conv.in_channels:
        raise ShapeError(f"RPN expects {head.conv.in_channels} channels, got {t.shape[1]}")
    h = F.relu(head.conv(t))
    scores = head.cls(h)
    deltas = head.reg(h)
    p, a, fh, fw = scores.shape
    scores = scores.permute(0, 2, 3, 1).reshape(p, fh * fw * a)
    deltas = deltas.reshape(p, a, 4, fh, fw).permute(0, 3, 4, 1, 2).reshape(p, fh * fw * a, 4)
    return scores, deltas


def select_proposals(scores: torch.Tensor, deltas: torch.Tensor, anchors: torch.Tensor, n_pnum: int,
                     image_size: tuple[int, int], nms_threshold: float = 0.7,
                     min_size: float = 1.0) -> Proposals:
    """Decode, clip, NMS and keep the top ``n_pnum`` proposals.

    Ordering is by score descending with ties going to the lower anchor index.
    """
    if n_pnum < 1:
        raise ValueError(f"n_pnum must be >= 1, got {n_pnum}")
    if not (len(scores) == len(deltas) == len(anchors)):
        raise ShapeError(f"{len(scores)} scores, {len(deltas)} deltas, {len(anchors)} anchors")
    with torch.no_grad():
        H, W = image_size
        boxes = B.clip_boxes(B.decode(deltas.detach(), anchors), H, W)
        wh = boxes[:, 2:] - boxes[:, :2]
        valid = np.flatnonzero(((wh[:, 0] >= min_size) & (wh[:, 1] >= min_size)).numpy())
        s = scores.detach().numpy()[valid]
        keep = valid[B.nms(boxes.numpy()[valid], s, nms_threshold, limit=n_pnum)]
        idx = torch.from_numpy(keep)
        return Proposals(boxes[idx], scores.detach()[idx], idx)


def as_proposals(props: Proposals) -> list[Proposal]:
    return [Proposal(BoundingBox(*b.tolist()), float(s)) for b, s in zip(props.boxes, props.scores)]


def ism_modulate(z: torch.Tensor, xk: torch.Tensor, params: InstanceModulator) -> torch.Tensor:
    """Instance-level modulation of proposal ROI features ``xk`` (K, C, k, k) by ``z`` (C, k, k).

    ``z`` may also be (K, C, k, k) to pair each proposal with its own query.
    """
    squeeze = xk.ndim == 3
    if squeeze:
        xk = xk[None]
    if z.ndim == 3:
        z = z[None]
    if z.shape[1:] != xk.shape[1:] or z.shape[0] not in (1, xk.shape[0]):
        raise ShapeError(f"query {tuple(z.shape)} does not match proposals {tuple(xk.shape)}")
    if z.shape[1] != params.f_x.in_channels:
        raise ShapeError(f"modulator expects {params.f_x.in_channels} channels, got {z.shape[1]}")
    out = params.f_out(params.f_z(z) * params.f_x(xk))
    return out[0] if squeeze else out


def rcnn_forward(t: torch.Tensor, head: RCNNHead) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-proposal target logit (K,) and refinement delta (K, 4)."""
    if t.ndim == 3:
        t = t[None]
    flat = t.reshape(t.shape[0], -1)
    if flat.shape[1] != head.fc.in_features:
        raise ShapeError(f"RCNN expects {head.fc.in_features} features, got {flat.shape[1]}")
    h = F.relu(head.fc(flat))
    return head.cls(h)[:, 0], head.reg(h)


# --- inference ------------------------------------------------------------


@dataclass
class FrameOutput:
    box: Optional[BoundingBox]
    confidence: float


def detect(model: QueryGuidedTracker, query: torch.Tensor, frame) -> FrameOutput:
    """Best refined box and its confidence (sigmoid of the RCNN logit) in one frame."""
    cfg = model.cfg
    with torch.no_grad():
        feats = extract_features(model, frame)
        H, W = np.asarray(frame).shape[-3:-1]
        t = csm_modulate(query[None], feats, model.csm)
        scores, deltas = rpn_forward(t, model.rpn)
        anchors = model.anchors(feats.shape[2], feats.shape[3])
        props = select_proposals(scores[0], deltas[0], anchors, cfg.n_pnum, (H, W),
                                 cfg.nms_threshold, cfg.min_box_size)
        if len(props.boxes) == 0:
            return FrameOutput(None, 0.0)
        rois = torch.cat([torch.zeros(len(props.boxes), 1, dtype=props.boxes.dtype), props.boxes], dim=1)
        xk = roi_features(feats, rois, cfg.roi_size, cfg.stride)
        tk = ism_modulate(query, xk, model.ism)
        logits, refine = rcnn_forward(tk, model.rcnn)
        best = int(B.score_order(logits.numpy())[0])
        box = B.clip_boxes(B.decode(refine[best:best + 1], props.boxes[best:best + 1], B.RCNN_WEIGHTS), H, W)[0]
        conf = float(torch.sigmoid(logits[best]))
        x1, y1, x2, y2 = box.tolist()
        return FrameOutput(BoundingBox(x1, y1, max(x2, x1), max(y2, y1)), conf)


def track_step(model: QueryGuidedTracker, query: torch.Tensor, frame, theta_exist: Optional[float] = None
               ) -> PredictionState:
    theta = model.cfg.theta_exist if theta_exist is None else theta_exist
    out = detect(model, query, frame)
    present = out.box is not None and out.confidence >= theta
    return PredictionState(present, out.box if present else None, out.confidence)


def init_query(model: QueryGuidedTracker, frame, box: BoundingBox) -> torch.Tensor:
    with torch.no_grad():
        feats = extract_features(model, frame)
        return encode_query(feats, box, model.cfg.roi_size, model.cfg.stride)
