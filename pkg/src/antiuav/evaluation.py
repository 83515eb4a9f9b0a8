"""Run trackers over a split and score them with state accuracy, precision and success.

Protocols I and II are scored identically; they differ only in what training
data the tracker was allowed, which is recorded as a provenance string.
Protocol III scores the infrared and visible results of every pair
independently and reports both plus their mean.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .annotations import (
    DatasetSplit,
    SequenceAnnotation,
    resolve_attributes,
    sequence_dir,
)
from .geometry import (
    BoundingBox,
    EvalCurve,
    PredictionState,
    average_curves,
    mean_state_accuracy,
    precision_at,
    precision_curve,
    state_accuracy,
    success_curve,
)
from .imageio import read_frames

log = logging.getLogger(__name__)

ATTRIBUTE_COLUMNS = ("OV", "OC", "FM", "SV", "LI", "TC_easy", "TC_med", "TC_hard", "TC_all", "LR", "All")
PROTOCOLS = (1, 2, 3)
THETA_GRID = np.round(np.arange(0, 21) * 0.05, 10)


class MissingResultsError(ValueError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__(f"no results for {len(self.missing)} sequences: {', '.join(self.missing)}")


@dataclass
class TrackResult:
    sequence_id: str
    frames: list[PredictionState]
    tracker_name: str = "tracker"
    modality: str = "infrared"


# --- results files ----------------------------------------------------------


def write_results(result: TrackResult) -> bytes:
    doc = {
        "exist": [1 if p.present else 0 for p in result.frames],
        "rect": [p.box.as_list() if p.present else [] for p in result.frames],
        "score": [float(p.score) for p in result.frames],
    }
    return json.dumps(doc, separators=(",", ":")).encode()


def read_results(document, sequence_id: str, tracker_name: str = "tracker", modality: str = "infrared"
                 ) -> TrackResult:
    if isinstance(document, (bytes, bytearray, str)):
        document = json.loads(document)
    exist = document["exist"]
    rects = document.get("rect", document.get("res"))
    if rects is None:
        raise ValueError(f"{sequence_id}: results need a 'rect' array")
    scores = document.get("score", [1.0] * len(exist))
    if not len(exist) == len(rects) == len(scores):
        raise ValueError(f"{sequence_id}: exist/rect/score lengths differ")
    frames = []
    for t, (e, r, s) in enumerate(zip(exist, rects, scores)):
        if e and len(r) != 4:
            raise ValueError(f"{sequence_id}: frame {t} is present without a 4-number rect")
        frames.append(PredictionState(bool(e), BoundingBox(*r) if e else None, float(s)))
    return TrackResult(sequence_id, frames, tracker_name, modality)


def results_filename(sequence_id: str) -> str:
    return sequence_id.replace("/", "__") + ".json"


def save_results(results: Iterable[TrackResult], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for r in results:
        (out_dir / results_filename(r.sequence_id)).write_bytes(write_results(r))


def load_results(out_dir, annotations: Sequence[SequenceAnnotation], tracker_name: str = "tracker"
                 ) -> dict[str, TrackResult]:
    """Results for every annotated sequence that has a file; missing ones are simply absent."""
    out_dir = Path(out_dir)
    found = {}
    for ann in annotations:
        p = out_dir / results_filename(ann.sequence_id)
        if p.is_file():
            found[ann.sequence_id] = read_results(p.read_bytes(), ann.sequence_id, tracker_name, ann.modality)
    return found


# --- stub trackers --------------------------------------------------------


def oracle_result(ann: SequenceAnnotation, name: str = "oracle") -> TrackResult:
    frames = [PredictionState(f.exist, f.box, 1.0) for f in ann.frames]
    return TrackResult(ann.sequence_id, frames, name, ann.modality)


def absent_result(ann: SequenceAnnotation, name: str = "absent") -> TrackResult:
    return TrackResult(ann.sequence_id, [PredictionState(False, None, 0.0)] * len(ann), name, ann.modality)


def random_box_result(ann: SequenceAnnotation, frame_size: tuple[int, int], rng: np.random.Generator,
                      name: str = "random") -> TrackResult:
    """Always present, a uniformly random box sized like the first visible target."""
    H, W = frame_size
    ref = next((f.box for f in ann.frames if f.exist), BoundingBox(0, 0, W / 4, H / 4))
    w, h = max(ref.width, 1.0), max(ref.height, 1.0)
    frames = []
    for _ in ann.frames:
        x = rng.uniform(0, max(W - w, 0))
        y = rng.uniform(0, max(H - h, 0))
        frames.append(PredictionState(True, BoundingBox(x, y, x + w, y + h), 0.5))
    return TrackResult(ann.sequence_id, frames, name, ann.modality)


def noisy_result(ann: SequenceAnnotation, rng: np.random.Generator, sigma: float = 3.0,
                 flip_prob: float = 0.1, name: str = "noisy") -> TrackResult:
    """Ground truth jittered by ``sigma`` px with presence flipped at ``flip_prob``."""
    frames = []
    last = None
    for f in ann.frames:
        flip = rng.random() < flip_prob
        if f.exist:
            last = f.box
        present = f.exist != flip
        if present and last is not None:
            dx, dy = rng.normal(0, sigma, 2)
            frames.append(PredictionState(True, last.shift(dx, dy), 0.5))
        else:
            frames.append(PredictionState(False, None, 0.5))
    return TrackResult(ann.sequence_id, frames, name, ann.modality)


# --- running the toy tracker ------------------------------------------------


@dataclass
class RawTrack:
    """Per-frame best box and confidence before the existence threshold is applied."""

    init_index: Optional[int]
    boxes: list[Optional[BoundingBox]]
    confidences: list[float]

    def predictions(self, theta: float) -> list[PredictionState]:
        out = []
        for t, (b, c) in enumerate(zip(self.boxes, self.confidences)):
            if self.init_index is None or t < self.init_index:
                out.append(PredictionState(False, None, 0.0))
            elif t == self.init_index:
                out.append(PredictionState(True, b, 1.0))
            else:
                present = b is not None and c >= theta
                out.append(PredictionState(present, b if present else None, c))
        return out


def track_sequence(model, frames: np.ndarray, ann: SequenceAnnotation) -> RawTrack:
    """One-pass evaluation: the first visible frame's ground truth initializes the query."""
    from .tracker.model import detect, init_query

    init = next((t for t, f in enumerate(ann.frames) if f.exist), None)
    boxes: list[Optional[BoundingBox]] = [None] * len(ann)
    conf = [0.0] * len(ann)
    if init is None:
        return RawTrack(None, boxes, conf)
    query = init_query(model, frames[init], ann.frames[init].box)
    boxes[init], conf[init] = ann.frames[init].box, 1.0
    for t in range(init + 1, len(ann)):
        out = detect(model, query, frames[t])
        boxes[t], conf[t] = out.box, out.confidence
    return RawTrack(init, boxes, conf)


def validation_msa(model, val, theta: Optional[float] = None) -> float:
    theta = model.cfg.theta_exist if theta is None else theta
    sas = [state_accuracy(track_sequence(model, s.frames, s.annotation).predictions(theta), s.annotation.frames)
           for s in val]
    return mean_state_accuracy(sas)


def calibrate_threshold(model, val) -> tuple[float, float]:
    """Existence threshold maximizing validation mSA on a 0.05 grid (lowest wins ties)."""
    raws = [(track_sequence(model, s.frames, s.annotation), s.annotation) for s in val]
    best = (None, -1.0)
    for theta in THETA_GRID:
        msa = mean_state_accuracy([state_accuracy(r.predictions(theta), a.frames) for r, a in raws])
        if msa > best[1]:
            best = (float(theta), msa)
    return best


def run_tracker(model, root, split: DatasetSplit, modality: str = "infrared", theta: Optional[float] = None,
                tracker_name: str = "toy") -> tuple[list[TrackResult], list[str]]:
    """Track every sequence of ``split``; unreadable sequences are skipped and reported."""
    theta = model.cfg.theta_exist if theta is None else theta
    results, skipped = [], []
    for pair in split.pairs:
        ann = pair.get(modality)
        try:
            frames = read_frames(sequence_dir(root, split.name, pair.pair_id, modality))
            if len(frames) != len(ann):
                raise ValueError(f"{len(frames)} frames on disk, {len(ann)} annotated")
        except (OSError, ValueError) as e:
            log.warning("skipping %s: %s", ann.sequence_id, e)
            skipped.append(f"{ann.sequence_id}: {e}")
            continue
        raw = track_sequence(model, frames, ann)
        results.append(TrackResult(ann.sequence_id, raw.predictions(theta), tracker_name, modality))
    return results, skipped


# --- scoring --------------------------------------------------------------


@dataclass(frozen=True)
class SequenceTags:
    attributes: frozenset[str]
    tc_tier: Optional[str] = None

    def columns(self) -> frozenset[str]:
        cols = {a for a in self.attributes if a != "TC"}
        if "TC" in self.attributes and self.tc_tier is not None:
            cols |= {f"TC_{self.tc_tier}", "TC_all"}
        cols.add("All")
        return frozenset(cols)


def tags_for(ann: SequenceAnnotation) -> SequenceTags:
    return SequenceTags(resolve_attributes(ann), ann.tc_tier)


def split_tags(split: DatasetSplit) -> dict[str, SequenceTags]:
    """Tags per sequence id; a pair's infrared tags apply to both of its modalities."""
    out = {}
    for pair in split.pairs:
        tags = tags_for(pair.infrared)
        out[pair.infrared.sequence_id] = tags
        out[pair.visible.sequence_id] = tags
    return out


@dataclass
class EvalReport:
    protocol: int
    tracker_name: str
    modality: str
    per_sequence: dict[str, float]
    msa: float
    precision_20: float
    success_auc: float
    attribute_msa: dict[str, Optional[float]]
    precision: EvalCurve
    success: EvalCurve
    provenance: str = ""
    by_modality: dict[str, "EvalReport"] = field(default_factory=dict)


def attribute_slice(per_sequence: Mapping[str, float], tags: Mapping[str, SequenceTags], attribute: str
                    ) -> Optional[float]:
    """Mean SA over sequences carrying ``attribute``; ``None`` when no sequence does."""
    if attribute not in ATTRIBUTE_COLUMNS:
        raise ValueError(f"unknown attribute column {attribute!r}")
    values = [sa for sid, sa in sorted(per_sequence.items()) if attribute in tags[sid].columns()]
    if not values:
        return None
    return mean_state_accuracy(values)


def _evaluate_one(results: Mapping[str, TrackResult], annotations: Sequence[SequenceAnnotation],
                  tags: Mapping[str, SequenceTags], protocol: int, provenance: str, modality: str) -> EvalReport:
    anns = sorted(annotations, key=lambda a: a.sequence_id)
    per_seq, prec, succ = {}, [], []
    names = set()
    for ann in anns:
        res = results[ann.sequence_id]
        if len(res.frames) != len(ann):
            raise ValueError(f"{ann.sequence_id}: {len(res.frames)} result frames vs {len(ann)} annotated")
        names.add(res.tracker_name)
        per_seq[ann.sequence_id] = state_accuracy(res.frames, ann.frames)
        prec.append(precision_curve(res.frames, ann.frames))
        succ.append(success_curve(res.frames, ann.frames))
    p, s = average_curves(prec), average_curves(succ)
    attr = {col: attribute_slice(per_seq, tags, col) for col in ATTRIBUTE_COLUMNS}
    return EvalReport(protocol, ",".join(sorted(names)), modality, per_seq,
                      mean_state_accuracy(list(per_seq.values())), precision_at(p, 20.0), s.auc, attr, p, s,
                      provenance)


def evaluate(results, annotations: Sequence[SequenceAnnotation], protocol: int = 2,
             tags: Optional[Mapping[str, SequenceTags]] = None, provenance: str = "") -> EvalReport:
    """Score ``results`` (list or id->result mapping) against ``annotations``."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    if not annotations:
        raise ValueError("nothing to evaluate")
    if not isinstance(results, Mapping):
        results = {r.sequence_id: r for r in results}
    missing = sorted(a.sequence_id for a in annotations if a.sequence_id not in results)
    if missing:
        raise MissingResultsError(missing)
    if tags is None:
        tags = {a.sequence_id: tags_for(a) for a in annotations}

    modalities = sorted({a.modality for a in annotations})
    if protocol != 3:
        if len(modalities) != 1:
            raise ValueError(f"protocol {protocol} evaluates one modality, got {modalities}")
        return _evaluate_one(results, annotations, tags, protocol, provenance, modalities[0])

    if modalities != ["infrared", "visible"]:
        raise ValueError("protocol 3 needs both infrared and visible annotations")
    subs = {m: _evaluate_one(results, [a for a in annotations if a.modality == m], tags, 3, provenance, m)
            for m in modalities}
    ir, vis = subs["infrared"], subs["visible"]

    def mean2(a, b):
        return None if a is None or b is None else (a + b) / 2

    per_seq = {**ir.per_sequence, **vis.per_sequence}
    p = average_curves([ir.precision, vis.precision])
    s = average_curves([ir.success, vis.success])
    attr = {c: mean2(ir.attribute_msa[c], vis.attribute_msa[c]) for c in ATTRIBUTE_COLUMNS}
    return EvalReport(3, ir.tracker_name, "both", per_seq, (ir.msa + vis.msa) / 2,
                      (ir.precision_20 + vis.precision_20) / 2, (ir.success_auc + vis.success_auc) / 2,
                      attr, p, s, provenance, subs)


# --- rendering ------------------------------------------------------------

EMPTY_CELL = "—"


def _pct(v: Optional[float]) -> str:
    return EMPTY_CELL if v is None else f"{100.0 * v:.2f}"


def ranked(reports: Sequence[EvalReport]) -> list[EvalReport]:
    """Ascending by the All column, ties by tracker name."""
    return sorted(reports, key=lambda r: (r.attribute_msa["All"], r.tracker_name))


def render_report(reports: Sequence[EvalReport] | EvalReport, fmt: str = "markdown") -> str:
    """Attribute table (mSA %, 2 decimals), one row per tracker, ranked by All."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    header = ["Tracker", *ATTRIBUTE_COLUMNS, "Prec@20", "SuccAUC"]
    rows = [[r.tracker_name, *(_pct(r.attribute_msa[c]) for c in ATTRIBUTE_COLUMNS), _pct(r.precision_20),
             _pct(r.success_auc)] for r in ranked(reports)]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    if fmt in ("md", "markdown"):
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(row) + " |" for row in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report_csv(text: str) -> dict[str, dict[str, Optional[float]]]:
    """Inverse of the CSV rendering: tracker -> column -> percentage (None for empty cells)."""
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        name = row.pop("Tracker")
        out[name] = {k: (None if v == EMPTY_CELL else float(v)) for k, v in row.items()}
    return out


def render_curve(curve: EvalCurve) -> str:
    """``threshold,value`` per line, one line per threshold."""
    return "".join(f"{t:.2f},{v:.6f}\n" for t, v in zip(curve.thresholds, curve.values))


def report_summary(report: EvalReport) -> dict:
    doc = {
        "protocol": report.protocol,
        "tracker": report.tracker_name,
        "modality": report.modality,
        "provenance": report.provenance,
        "mSA": report.msa,
        "precision@20": report.precision_20,
        "success_auc": report.success_auc,
        "attributes": report.attribute_msa,
        "per_sequence": dict(sorted(report.per_sequence.items())),
    }
    if report.by_modality:
        doc["by_modality"] = {m: report_summary(r) for m, r in sorted(report.by_modality.items())}
    return doc
