"""Dual-flow semantic consistency (DFSC) training.

Each batch holds ``n`` entries from distinct sequences, each a (query frame,
query box, search frame, search ground truth) tuple. The class-level stage
scores every (query i, search j) pair: same pairs (i == j) form ``L_same``,
cross pairs (i != j) form ``L_cross`` and ``L_CSM = L_same + alpha * L_cross``.
Cross pairs are supervised with the search sequence's own boxes, since every
sequence's target is a UAV. The instance-level stage refines proposals from
the same pairs, modulated by the same sequence's query.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .annotations import SequenceAnnotation
from .geometry import BoundingBox
from .tracker import boxes as B
from .tracker.model import (
    STRATEGIES,
    QueryGuidedTracker,
    TrackerConfig,
    csm_modulate,
    encode_query,
    extract_features,
    ism_modulate,
    rcnn_forward,
    roi_features,
    rpn_forward,
    select_proposals,
)

log = logging.getLogger(__name__)

DFSC_FAMILY = ("dfsc", "dfsc_all", "dfsc_cls", "dfsc_reg")
TASK_MASKS = ("both", "cls", "reg")

RPN_POS_IOU = 0.7
RPN_NEG_IOU = 0.3
RCNN_POS_IOU = 0.5
SMOOTH_L1_BETA = 1.0


class ConfigError(ValueError):
    pass


class TrainingError(FloatingPointError):
    pass


def normalize_strategy(name: str) -> str:
    s = name.replace("-", "_").lower()
    if s not in STRATEGIES:
        raise ConfigError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGIES)}")
    return s


@dataclass
class StrategyConfig:
    strategy: str = "dfsc"
    alpha: float = 0.25
    beta: float = 1.0
    n_pnum: int = 64
    batch_size: int = 2
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    steps: int = 600
    # lr drops by 10x at these fractions of ``steps``
    milestones: tuple[float, ...] = (0.6, 0.85)
    steps_per_epoch: int = 100
    rpn_batch: int = 32
    rpn_pos_fraction: float = 0.5
    normalize_cross: bool = False
    include_gt_proposal: bool = True
    grad_clip: Optional[float] = 10.0
    seed: int = 42

    def __post_init__(self):
        self.strategy = normalize_strategy(self.strategy)
        self.milestones = tuple(self.milestones)
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.n_pnum < 1:
            raise ConfigError("n_pnum must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")

    @property
    def is_dfsc(self) -> bool:
        return self.strategy in DFSC_FAMILY

    def milestone_steps(self) -> list[int]:
        return [int(round(m * self.steps)) for m in self.milestones]


def epoch_lr_schedule(base_lr: float, milestones: Sequence[int], epochs: int, gamma: float = 0.1) -> list[float]:
    """Learning rate per (0-based) epoch with ``gamma`` decays at the milestone epochs."""
    return [base_lr * gamma ** sum(e >= m for m in milestones) for e in range(epochs)]


# infrared: 18 epochs, drops at 12 and 15; visible: 12 epochs, drops at 8 and 11
PAPER_SCHEDULES = {
    "infrared": dict(base_lr=0.02, milestones=(12, 15), epochs=18),
    "visible": dict(base_lr=0.02, milestones=(8, 11), epochs=12),
}


# --- batches and pairs ----------------------------------------------------


@dataclass
class TrainingSequence:
    annotation: SequenceAnnotation
    frames: np.ndarray  # (T, H, W, C) uint8

    @property
    def sequence_id(self) -> str:
        return self.annotation.sequence_id


@dataclass
class BatchEntry:
    sequence_id: str
    query_image: np.ndarray
    query_box: BoundingBox
    search_image: np.ndarray
    search_box: Optional[BoundingBox]


@dataclass
class TrainingBatch:
    entries: list[BatchEntry]

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("empty batch")
        ids = [e.sequence_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"batch entries must come from distinct sequences: {ids}")

    def __len__(self):
        return len(self.entries)


class ModulationPair(NamedTuple):
    query_index: int
    search_index: int

    @property
    def kind(self) -> str:
        return "same" if self.query_index == self.search_index else "cross"


def build_modulation_pairs(n: int, strategy: str) -> list[ModulationPair]:
    """Same pairs for every strategy plus all cross pairs for the DFSC family, i-major order."""
    strategy = normalize_strategy(strategy)
    if strategy in DFSC_FAMILY:
        return [ModulationPair(i, j) for i in range(n) for j in range(n)]
    return [ModulationPair(i, i) for i in range(n)]


def sample_batch(sequences: Sequence[TrainingSequence], rng: np.random.Generator, n: int) -> TrainingBatch:
    picks = rng.choice(len(sequences), size=min(n, len(sequences)), replace=False)
    entries = []
    for k in picks:
        seq = sequences[int(k)]
        frames = seq.annotation.frames
        visible = [t for t, f in enumerate(frames) if f.exist]
        q = int(visible[rng.integers(len(visible))])
        s = int(rng.integers(len(frames)))
        entries.append(BatchEntry(seq.sequence_id, seq.frames[q], frames[q].box, seq.frames[s], frames[s].box))
    return TrainingBatch(entries)


def pair_rng(seed: int, step: int, i: int, j: int, stage: int = 0) -> np.random.Generator:
    # one stream per (step, pair) so adding cross pairs never shifts the same-pair samples
    return np.random.default_rng([seed, step, i, j, stage])


# --- RPN loss -------------------------------------------------------------


class AnchorAssignment(NamedTuple):
    labels: torch.Tensor  # (N,) 1 positive, 0 negative, -1 not sampled
    targets: torch.Tensor  # (N, 4) regression targets, valid where label == 1
    degenerate: bool  # visible target but no positive anchor


def assign_anchors(anchors: torch.Tensor, gt: Optional[BoundingBox], rng: np.random.Generator,
                   batch: int = 32, pos_fraction: float = 0.5) -> AnchorAssignment:
    """Positives: IoU >= 0.7 or best anchor for the box. Negatives: IoU < 0.3.

    Up to ``batch`` anchors are sampled, positives capped at ``pos_fraction``.
    """
    n = len(anchors)
    labels = torch.full((n,), -1, dtype=torch.int64)
    targets = torch.zeros((n, 4), dtype=anchors.dtype)
    if gt is None:
        neg = np.arange(n)
        pos = np.zeros(0, dtype=np.int64)
    else:
        g = torch.tensor([gt.as_list()], dtype=anchors.dtype)
        ious = B.box_iou(anchors, g)[:, 0]
        best = ious.max()
        is_pos = ious >= RPN_POS_IOU
        if best > 0:
            is_pos |= ious == best
        pos = np.flatnonzero(is_pos.numpy())
        neg = np.flatnonzero(((ious < RPN_NEG_IOU) & ~is_pos).numpy())
        if len(pos):
            targets[pos] = B.encode(g.expand(len(pos), 4), anchors[pos], B.RPN_WEIGHTS)
    max_pos = int(batch * pos_fraction)
    if len(pos) > max_pos:
        pos = np.sort(rng.choice(pos, max_pos, replace=False))
    n_neg = min(len(neg), batch - len(pos))
    if len(neg) > n_neg:
        neg = np.sort(rng.choice(neg, n_neg, replace=False))
    labels[torch.from_numpy(neg).long()] = 0
    labels[torch.from_numpy(pos).long()] = 1
    return AnchorAssignment(labels, targets, gt is not None and len(pos) == 0)


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, beta: float = SMOOTH_L1_BETA) -> torch.Tensor:
    """Elementwise smooth-L1 (Huber with transition ``beta``)."""
    d = (pred - target).abs()
    return torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)


def rpn_loss(scores: torch.Tensor, deltas: torch.Tensor, anchors: Optional[torch.Tensor] = None,
             gt: Optional[BoundingBox] = None, beta: float = 1.0, task_mask: str = "both",
             rng: Optional[np.random.Generator] = None, assignment: Optional[AnchorAssignment] = None,
             stats: Optional[dict] = None) -> torch.Tensor:
    """``mean_sampled BCE(s, s*) + beta * sum_pos smoothL1(p, p*) / N_pos``.

    ``task_mask`` drops the regression term (``"cls"``) or the classification
    term (``"reg"``) entirely, so the dropped head receives no gradient.
    """
    if task_mask not in TASK_MASKS:
        raise ValueError(f"task_mask must be one of {TASK_MASKS}")
    if assignment is None:
        if anchors is None:
            raise ValueError("need anchors or a precomputed assignment")
        assignment = assign_anchors(anchors, gt, rng if rng is not None else np.random.default_rng(0))
    labels, targets, degenerate = assignment
    if degenerate and stats is not None:
        stats["degenerate_frames"] = stats.get("degenerate_frames", 0) + 1
    sampled = labels >= 0
    pos = labels == 1
    loss = scores.new_zeros(())
    if task_mask in ("both", "cls") and sampled.any():
        loss = loss + F.binary_cross_entropy_with_logits(
            scores[sampled], labels[sampled].to(scores.dtype), reduction="mean")
    if task_mask in ("both", "reg") and pos.any():
        reg = smooth_l1(deltas[pos], targets[pos].to(deltas.dtype)).sum() / pos.sum()
        loss = loss + beta * reg
    return loss


# --- CSM / ISM losses -----------------------------------------------------


@dataclass
class Forward:
    """Shared per-batch tensors: backbone features and query ROI features."""

    search_feats: torch.Tensor  # (n, C, h, w)
    queries: torch.Tensor  # (n, C, k, k)
    anchors: torch.Tensor
    image_size: tuple[int, int]
    gts: list[Optional[BoundingBox]]


def forward_batch(model: QueryGuidedTracker, batch: TrainingBatch) -> Forward:
    cfg = model.cfg
    n = len(batch)
    images = np.stack([e.query_image for e in batch.entries] + [e.search_image for e in batch.entries])
    feats = extract_features(model, images)
    queries = torch.stack([encode_query(feats, e.query_box, cfg.roi_size, cfg.stride, batch_index=i)
                           for i, e in enumerate(batch.entries)])
    H, W = images.shape[1:3]
    return Forward(feats[n:], queries, model.anchors(feats.shape[2], feats.shape[3]), (H, W),
                   [e.search_box for e in batch.entries])


def cross_task_mask(strategy: str) -> str:
    return {"dfsc_cls": "cls", "dfsc_reg": "reg"}.get(strategy, "both")


@dataclass
class CSMResult:
    l_same: torch.Tensor
    l_cross: torch.Tensor
    l_csm: torch.Tensor
    per_pair: dict[ModulationPair, torch.Tensor]
    same_outputs: dict[int, tuple[torch.Tensor, torch.Tensor]]


def _pair_outputs(model, fw: Forward, pairs: list[ModulationPair]):
    if not pairs:
        return None, None
    z = fw.queries[[p.query_index for p in pairs]]
    x = fw.search_feats[[p.search_index for p in pairs]]
    return rpn_forward(csm_modulate(z, x, model.csm), model.rpn)


def _assign(fw: Forward, p: ModulationPair, cfg: StrategyConfig, rng) -> AnchorAssignment:
    return assign_anchors(fw.anchors, fw.gts[p.search_index], rng, cfg.rpn_batch, cfg.rpn_pos_fraction)


def csm_loss(model: QueryGuidedTracker, fw: Forward, cfg: StrategyConfig, step: int = 0,
             stats: Optional[dict] = None) -> CSMResult:
    """``L_same + alpha * L_cross`` over the strategy's modulation pairs (plain sums)."""
    pairs = build_modulation_pairs(len(fw.gts), cfg.strategy)
    same = [p for p in pairs if p.kind == "same"]
    cross = [p for p in pairs if p.kind == "cross"]
    per_pair = {}
    same_outputs = {}

    s_scores, s_deltas = _pair_outputs(model, fw, same)
    for k, p in enumerate(same):
        rng = pair_rng(cfg.seed, step, p.query_index, p.search_index)
        per_pair[p] = rpn_loss(s_scores[k], s_deltas[k], beta=cfg.beta, task_mask="both",
                               assignment=_assign(fw, p, cfg, rng), stats=stats)
        same_outputs[p.search_index] = (s_scores[k], s_deltas[k])
    l_same = torch.stack([per_pair[p] for p in same]).sum()

    mask = cross_task_mask(cfg.strategy)
    c_scores, c_deltas = _pair_outputs(model, fw, cross)
    for k, p in enumerate(cross):
        rng = pair_rng(cfg.seed, step, p.query_index, p.search_index)
        # positives come from the search sequence's own target
        per_pair[p] = rpn_loss(c_scores[k], c_deltas[k], beta=cfg.beta, task_mask=mask,
                               assignment=_assign(fw, p, cfg, rng), stats=stats)
    if cross:
        l_cross = torch.stack([per_pair[p] for p in cross]).sum()
        if cfg.normalize_cross:
            l_cross = l_cross / len(cross)
    else:
        l_cross = l_same.new_zeros(())

    l_csm = l_same + cfg.alpha * l_cross if cross else l_same
    return CSMResult(l_same, l_cross, l_csm, per_pair, same_outputs)


class ProposalTargets(NamedTuple):
    rois: torch.Tensor  # (M, 5)
    boxes: torch.Tensor  # (M, 4)
    labels: torch.Tensor  # (M,) float 0/1
    targets: torch.Tensor  # (M, 4) refinement targets


def proposal_targets(scores, deltas, fw: Forward, j: int, cfg: StrategyConfig, model: QueryGuidedTracker
                     ) -> ProposalTargets:
    mcfg = model.cfg
    props = select_proposals(scores, deltas, fw.anchors, cfg.n_pnum, fw.image_size, mcfg.nms_threshold,
                             mcfg.min_box_size)
    boxes = props.boxes
    gt = fw.gts[j]
    if gt is not None and cfg.include_gt_proposal:
        g = torch.tensor([gt.as_list()], dtype=boxes.dtype)
        boxes = torch.cat([g, boxes[:cfg.n_pnum - 1]])
    labels = torch.zeros(len(boxes), dtype=fw.search_feats.dtype)
    targets = torch.zeros((len(boxes), 4), dtype=fw.search_feats.dtype)
    if gt is not None and len(boxes):
        g = torch.tensor([gt.as_list()], dtype=boxes.dtype)
        ious = B.box_iou(boxes, g)[:, 0]
        pos = ious >= RCNN_POS_IOU
        labels[pos] = 1.0
        if pos.any():
            targets[pos] = B.encode(g.expand(int(pos.sum()), 4), boxes[pos], B.RCNN_WEIGHTS).to(targets.dtype)
    rois = torch.cat([torch.full((len(boxes), 1), float(j), dtype=boxes.dtype), boxes], dim=1)
    return ProposalTargets(rois, boxes, labels, targets)


def rcnn_loss(logits: torch.Tensor, refine: torch.Tensor, labels: torch.Tensor, targets: torch.Tensor,
              beta: float = 1.0) -> torch.Tensor:
    """Per-proposal ``BCE + beta * smoothL1`` (regression only on positives), shape (M,)."""
    cls = F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    reg = smooth_l1(refine, targets).sum(dim=1) * labels
    return cls + beta * reg


def ism_loss(model: QueryGuidedTracker, fw: Forward, csm: CSMResult, cfg: StrategyConfig,
             step: int = 0) -> torch.Tensor:
    """Sum over batch entries of the mean RCNN loss over that entry's proposals.

    ``dfsc_all`` additionally modulates each entry's proposals with the other
    entries' queries, labelled against the search frame and weighted by alpha.
    """
    mcfg = model.cfg
    n = len(fw.gts)
    total = fw.search_feats.new_zeros(())
    for j in range(n):
        scores, deltas = csm.same_outputs[j]
        pt = proposal_targets(scores, deltas, fw, j, cfg, model)
        if len(pt.boxes) == 0:
            continue
        xk = roi_features(fw.search_feats, pt.rois, mcfg.roi_size, mcfg.stride)
        queries = [j] + ([i for i in range(n) if i != j] if cfg.strategy == "dfsc_all" else [])
        for i in queries:
            logits, refine = rcnn_forward(ism_modulate(fw.queries[i], xk, model.ism), model.rcnn)
            term = rcnn_loss(logits, refine, pt.labels, pt.targets, cfg.beta).sum() / len(pt.boxes)
            total = total + (term if i == j else cfg.alpha * term)
    return total


# --- optimisation ---------------------------------------------------------


@dataclass
class LossBreakdown:
    l_same: float
    l_cross: float
    l_csm: float
    l_ism: float
    total: float
    alpha: float
    beta: float

    def record(self, step: int, lr: float) -> dict:
        return {"step": step, "L_same": self.l_same, "L_cross": self.l_cross, "L_CSM": self.l_csm,
                "L_ISM": self.l_ism, "total": self.total, "lr": lr}


def compute_losses(model: QueryGuidedTracker, batch: TrainingBatch, cfg: StrategyConfig, step: int = 0,
                   stats: Optional[dict] = None):
    fw = forward_batch(model, batch)
    csm = csm_loss(model, fw, cfg, step, stats)
    l_ism = ism_loss(model, fw, csm, cfg, step)
    return csm, l_ism, csm.l_csm + l_ism


def make_optimizer(model: QueryGuidedTracker, cfg: StrategyConfig):
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=cfg.milestone_steps(), gamma=0.1)
    return opt, sched


def train_step(model: QueryGuidedTracker, batch: TrainingBatch, optimizer, cfg: StrategyConfig,
               step: int = 0, stats: Optional[dict] = None) -> LossBreakdown:
    """One SGD step on ``L_CSM + L_ISM``; returns the pre-update loss values."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    csm, l_ism, total = compute_losses(model, batch, cfg, step, stats)
    for name, v in (("L_same", csm.l_same), ("L_cross", csm.l_cross), ("L_ISM", l_ism)):
        if not torch.isfinite(v):
            raise TrainingError(f"step {step}: non-finite {name} = {v.item()}")
    total.backward()
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return LossBreakdown(csm.l_same.item(), csm.l_cross.item(), csm.l_csm.item(), l_ism.item(),
                         total.item(), cfg.alpha, cfg.beta)


@dataclass
class TrainingLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    degenerate_frames: int = 0

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "step", **r}, sort_keys=True) for r in self.steps]
        lines += [json.dumps({"kind": "epoch", **r}, sort_keys=True) for r in self.epochs]
        return "".join(line + "\n" for line in lines)


def fit(train: Sequence[TrainingSequence], cfg: StrategyConfig, tracker_cfg: Optional[TrackerConfig] = None,
        val: Optional[Sequence[TrainingSequence]] = None, calibrate: bool = True,
        progress: Optional[Callable[[dict], None]] = None) -> tuple[QueryGuidedTracker, TrainingLog]:
    """Train from scratch; optionally track the validation mSA per epoch and calibrate the
    existence threshold on it."""
    if not train:
        raise ConfigError("no training sequences")
    if cfg.is_dfsc and len(train) < 2:
        raise ConfigError(f"strategy {cfg.strategy} needs at least 2 training sequences, got {len(train)}")
    for s in train:
        if not any(f.exist for f in s.annotation.frames):
            raise ConfigError(f"training sequence {s.sequence_id} has no visible frame")
    channels = {s.frames.shape[3] for s in train}
    if len(channels) != 1:
        raise ConfigError(f"mixed channel counts in training data: {sorted(channels)}")

    tcfg = tracker_cfg or TrackerConfig()
    tcfg = TrackerConfig(**{**tcfg.to_dict(), "in_channels": channels.pop(), "n_pnum": cfg.n_pnum,
                            "strategy": cfg.strategy})
    torch.manual_seed(cfg.seed)
    model = QueryGuidedTracker(tcfg, seed=cfg.seed)
    opt, sched = make_optimizer(model, cfg)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    stats: dict = {}
    tlog = TrainingLog()
    for step in range(cfg.steps):
        batch = sample_batch(train, rng, cfg.batch_size)
        lr = opt.param_groups[0]["lr"]
        lb = train_step(model, batch, opt, cfg, step, stats)
        sched.step()
        rec = lb.record(step, lr)
        tlog.steps.append(rec)
        if progress is not None:
            progress(rec)
        last = step == cfg.steps - 1
        if val and ((step + 1) % cfg.steps_per_epoch == 0 or last):
            from .evaluation import validation_msa

            msa = validation_msa(model, val)
            tlog.epochs.append({"epoch": len(tlog.epochs), "step": step, "val_mSA": msa})
            log.info("step %d val mSA %.4f", step, msa)
    model.eval()
    if val and calibrate:
        from .evaluation import calibrate_threshold

        theta, msa = calibrate_threshold(model, val)
        model.cfg.theta_exist = theta
        tlog.epochs.append({"epoch": "calibrated", "theta_exist": theta, "val_mSA": msa})
    tlog.degenerate_frames = stats.get("degenerate_frames", 0)
    return model, tlog


def load_sequences(root, split: str, modality: str = "infrared") -> list[TrainingSequence]:
    """Annotations and frames of every pair in ``<root>/<split>`` for one modality."""
    from .annotations import load_split, sequence_dir
    from .imageio import read_frames

    ds = load_split(root, split)
    return [TrainingSequence(p.get(modality), read_frames(sequence_dir(root, split, p.pair_id, modality)))
            for p in ds.pairs]
