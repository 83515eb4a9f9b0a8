"""Anti-UAV annotation format, attribute rules and dataset statistics.

An annotation file holds one JSON object per sequence::

    {"exist": [1, 0, ...], "gt_rect": [[x1, y1, x2, y2], [], ...]}

Released files spell the box key ``gt_rect``; some documents use
``get_rect``. Both are read, ``gt_rect`` is written.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .geometry import BoundingBox, FrameState, scale

log = logging.getLogger(__name__)

MODALITIES = ("infrared", "visible")
MANUAL_ATTRIBUTES = ("OV", "OC", "FM", "SV", "LI", "TC", "LR")
DERIVABLE_ATTRIBUTES = ("OV", "FM", "SV", "LR")
TC_TIERS = ("easy", "med", "hard")
SPLITS = ("train", "val", "test")

FM_MOTION_PX = 60.0
SV_RANGE = (0.66, 1.5)
LR_AREA_PX = 400.0

RECT_KEYS = ("gt_rect", "get_rect")


class AnnotationError(ValueError):
    def __init__(self, message: str, frame: Optional[int] = None):
        self.frame = frame
        if frame is not None:
            message = f"frame {frame}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class SequenceAnnotation:
    sequence_id: str
    modality: str
    frames: tuple[FrameState, ...]
    manual_attributes: frozenset[str] = frozenset()
    tc_tier: Optional[str] = None
    pair_id: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "manual_attributes", frozenset(self.manual_attributes))
        if not self.frames:
            raise AnnotationError("sequence has no frames")
        if self.modality not in MODALITIES:
            raise AnnotationError(f"unknown modality {self.modality!r}")
        unknown = self.manual_attributes - set(MANUAL_ATTRIBUTES)
        if unknown:
            raise AnnotationError(f"unknown attribute tags {sorted(unknown)}")
        if self.tc_tier is not None:
            if self.tc_tier not in TC_TIERS:
                raise AnnotationError(f"unknown TC tier {self.tc_tier!r}")
            if "TC" not in self.manual_attributes:
                raise AnnotationError("tc_tier given without the TC attribute")

    def __len__(self):
        return len(self.frames)

    @property
    def visible_boxes(self) -> list[BoundingBox]:
        return [f.box for f in self.frames if f.exist]


@dataclass(frozen=True)
class SequencePair:
    pair_id: str
    infrared: SequenceAnnotation
    visible: SequenceAnnotation

    def __post_init__(self):
        if self.infrared.modality != "infrared" or self.visible.modality != "visible":
            raise AnnotationError(f"pair {self.pair_id}: modalities mislabeled")

    def get(self, modality: str) -> SequenceAnnotation:
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        return getattr(self, modality)


@dataclass(frozen=True)
class DatasetSplit:
    name: str
    pairs: tuple[SequencePair, ...]

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if self.name not in SPLITS:
            raise ValueError(f"unknown split {self.name!r}")
        ids = [p.pair_id for p in self.pairs]
        dup = sorted(k for k, c in Counter(ids).items() if c > 1)
        if dup:
            raise ValueError(f"duplicate pair ids in split {self.name}: {dup}")

    def sequences(self, modality: str) -> list[SequenceAnnotation]:
        return [p.get(modality) for p in self.pairs]


@dataclass(frozen=True)
class AttributeReportRow:
    attribute: str
    sequence_count: int


def check_disjoint(splits: Iterable[DatasetSplit]):
    seen: dict[str, str] = {}
    for split in splits:
        for p in split.pairs:
            if p.pair_id in seen:
                raise ValueError(f"pair {p.pair_id} in both {seen[p.pair_id]} and {split.name}")
            seen[p.pair_id] = split.name


# --- annotation files -----------------------------------------------------


def _number(v, frame: int) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise AnnotationError(f"malformed coordinate {v!r}", frame)
    v = float(v)
    if not math.isfinite(v):
        raise AnnotationError(f"non-finite coordinate {v!r}", frame)
    return v


def parse_annotation(
    document,
    sequence_id: str = "",
    modality: str = "infrared",
    manual_attributes: Iterable[str] = (),
    tc_tier: Optional[str] = None,
    pair_id: Optional[str] = None,
) -> SequenceAnnotation:
    """Parse an annotation document (bytes, str or already-decoded dict)."""
    if isinstance(document, (bytes, bytearray)):
        document = document.decode("utf-8")
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as e:
            raise AnnotationError(f"not valid JSON: {e}") from None
    if not isinstance(document, dict):
        raise AnnotationError("annotation must be a JSON object")
    if "exist" not in document:
        raise AnnotationError("missing key 'exist'")
    key = next((k for k in RECT_KEYS if k in document), None)
    if key is None:
        raise AnnotationError("missing key 'gt_rect'")
    exist, rects = document["exist"], document[key]
    if not isinstance(exist, list) or not isinstance(rects, list):
        raise AnnotationError("'exist' and rect entries must be arrays")
    if len(exist) != len(rects):
        raise AnnotationError(
            f"length mismatch: {len(exist)} exist flags vs {len(rects)} rects",
            min(len(exist), len(rects)),
        )

    frames = []
    for t, (flag, rect) in enumerate(zip(exist, rects)):
        if flag not in (0, 1) or isinstance(flag, float):
            raise AnnotationError(f"exist flag must be 0 or 1, got {flag!r}", t)
        if not isinstance(rect, list):
            raise AnnotationError(f"rect must be an array, got {rect!r}", t)
        if flag == 0:
            # an invisible frame may still carry a stale box in the wild; the flag wins
            frames.append(FrameState(False, None))
            continue
        if len(rect) == 0:
            raise AnnotationError("exist=1 but the rect is empty", t)
        if len(rect) != 4:
            raise AnnotationError(f"rect needs 4 numbers, got {len(rect)}", t)
        x1, y1, x2, y2 = (_number(v, t) for v in rect)
        try:
            box = BoundingBox(x1, y1, x2, y2)
        except ValueError as e:
            raise AnnotationError(str(e), t) from None
        frames.append(FrameState(True, box))

    return SequenceAnnotation(
        sequence_id=sequence_id,
        modality=modality,
        frames=tuple(frames),
        manual_attributes=frozenset(manual_attributes),
        tc_tier=tc_tier,
        pair_id=pair_id,
    )


def _emit(v: float):
    return int(v) if float(v).is_integer() and abs(v) < 2**53 else float(v)


def write_annotation(ann: SequenceAnnotation) -> bytes:
    doc = {
        "exist": [1 if f.exist else 0 for f in ann.frames],
        "gt_rect": [[_emit(v) for v in f.box.as_list()] if f.exist else [] for f in ann.frames],
    }
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def parse_metadata(document) -> dict:
    if isinstance(document, (bytes, bytearray)):
        document = document.decode("utf-8")
    if isinstance(document, str):
        document = json.loads(document)
    attrs = document.get("attributes", [])
    if not isinstance(attrs, list):
        raise AnnotationError("'attributes' must be an array")
    return {
        "attributes": list(attrs),
        "tc_tier": document.get("tc_tier"),
        "modality": document.get("modality", "infrared"),
        "pair_id": document.get("pair_id"),
    }


def write_metadata(ann: SequenceAnnotation, extra: Optional[dict] = None) -> bytes:
    doc = {
        "attributes": sorted(ann.manual_attributes),
        "tc_tier": ann.tc_tier,
        "modality": ann.modality,
        "pair_id": ann.pair_id,
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True, indent=1).encode("utf-8")


# --- attributes -----------------------------------------------------------


@dataclass(frozen=True)
class DerivedAttributes:
    tags: frozenset[str]
    no_visible_frames: bool = False

    def __contains__(self, tag):
        return tag in self.tags


def compute_derivable_attributes(ann: SequenceAnnotation) -> DerivedAttributes:
    """Attributes that follow from the boxes alone: OV, FM, SV and LR.

    * OV: some frame has ``exist == 0``.
    * FM: adjacent visible frames whose centers are more than 60 px apart.
    * SV: area ratio against the first visible box strictly outside [0.66, 1.5].
    * LR: some visible box covers fewer than 400 px.
    """
    tags = set()
    if any(not f.exist for f in ann.frames):
        tags.add("OV")
    boxes = ann.visible_boxes
    if not boxes:
        log.warning("sequence %s has no visible frames", ann.sequence_id)
        return DerivedAttributes(frozenset(tags), no_visible_frames=True)

    frames = ann.frames
    for prev, cur in zip(frames, frames[1:]):
        if prev.exist and cur.exist:
            (ax, ay), (bx, by) = prev.box.center, cur.box.center
            if math.hypot(ax - bx, ay - by) > FM_MOTION_PX:
                tags.add("FM")
                break

    ref_area = boxes[0].area
    lo, hi = SV_RANGE
    for b in boxes:
        if ref_area > 0:
            ratio = b.area / ref_area
            if ratio < lo or ratio > hi:
                tags.add("SV")
                break
        elif b.area > 0:
            tags.add("SV")
            break

    if any(b.area < LR_AREA_PX for b in boxes):
        tags.add("LR")
    return DerivedAttributes(frozenset(tags))


def resolve_attributes(ann: SequenceAnnotation) -> frozenset[str]:
    """Manual tags plus derivable ones."""
    return frozenset(ann.manual_attributes) | compute_derivable_attributes(ann).tags


# --- statistics -----------------------------------------------------------


@dataclass
class DatasetStatistics:
    position_histogram: dict[tuple[int, int], int]
    scale_histogram: dict[int, int]
    attribute_counts: dict[str, int]
    mean_scale: Optional[float]
    num_sequences: int
    num_visible_boxes: int
    position_bin: float = 16.0
    scale_bin: float = 4.0

    def as_dict(self) -> dict:
        return {
            "num_sequences": self.num_sequences,
            "num_visible_boxes": self.num_visible_boxes,
            "mean_scale": self.mean_scale,
            "position_bin_px": self.position_bin,
            "scale_bin_px": self.scale_bin,
            "position_histogram": [
                {"x_bin": k[0], "y_bin": k[1], "count": v}
                for k, v in sorted(self.position_histogram.items())
            ],
            "scale_histogram": [
                {"bin": k, "count": v} for k, v in sorted(self.scale_histogram.items())
            ],
            "attribute_counts": dict(self.attribute_counts),
        }


def dataset_statistics(
    split: DatasetSplit,
    modality: str = "infrared",
    position_bin: float = 16.0,
    scale_bin: float = 4.0,
) -> DatasetStatistics:
    """Position/scale histograms (sparse, fixed bin width) and attribute counts."""
    if not split.pairs:
        raise ValueError("statistics of an empty split")
    pos: Counter = Counter()
    scl: Counter = Counter()
    scales = []
    counts = {a: 0 for a in MANUAL_ATTRIBUTES}
    for pair in split.pairs:
        ann = pair.get(modality)
        for b in ann.visible_boxes:
            cx, cy = b.center
            pos[(int(math.floor(cx / position_bin)), int(math.floor(cy / position_bin)))] += 1
            s = scale(b)
            scales.append(s)
            scl[int(math.floor(s / scale_bin))] += 1
        for tag in resolve_attributes(ann):
            counts[tag] += 1
    return DatasetStatistics(
        position_histogram=dict(pos),
        scale_histogram=dict(scl),
        attribute_counts=counts,
        mean_scale=float(np.mean(scales)) if scales else None,
        num_sequences=len(split.pairs),
        num_visible_boxes=len(scales),
        position_bin=position_bin,
        scale_bin=scale_bin,
    )


def attribute_report(split: DatasetSplit, modality: str = "infrared") -> list[AttributeReportRow]:
    counts = dataset_statistics(split, modality).attribute_counts
    return [AttributeReportRow(a, counts[a]) for a in MANUAL_ATTRIBUTES]


# --- pairing --------------------------------------------------------------


def _default_key(ann: SequenceAnnotation) -> str:
    return ann.pair_id if ann.pair_id is not None else ann.sequence_id


def pair_modalities(
    ir: Sequence[SequenceAnnotation],
    rgb: Sequence[SequenceAnnotation],
    key: Callable[[SequenceAnnotation], str] = _default_key,
) -> tuple[list[SequencePair], list[str]]:
    """Match infrared and visible sequences by ``key``.

    Returns pairs sorted by pair id and a sorted list of unmatched entries
    formatted ``"<modality>:<key>"``.
    """
    def index(seqs, modality):
        out = {}
        dup = set()
        for s in seqs:
            if s.modality != modality:
                raise AnnotationError(f"{s.sequence_id}: expected {modality}, got {s.modality}")
            k = key(s)
            if k in out:
                dup.add(k)
            out[k] = s
        if dup:
            raise ValueError(f"duplicate {modality} pairing keys: {sorted(dup)}")
        return out

    ir_by, rgb_by = index(ir, "infrared"), index(rgb, "visible")
    pairs = [SequencePair(k, ir_by[k], rgb_by[k]) for k in sorted(ir_by.keys() & rgb_by.keys())]
    unmatched = [f"infrared:{k}" for k in sorted(ir_by.keys() - rgb_by.keys())]
    unmatched += [f"visible:{k}" for k in sorted(rgb_by.keys() - ir_by.keys())]
    return pairs, unmatched


# --- on-disk dataset ------------------------------------------------------


def read_manifest(root, split: str) -> list[str]:
    path = Path(root) / f"{split}.txt"
    if not path.is_file():
        raise FileNotFoundError(f"missing split manifest {path}")
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]


def load_sequence(seq_dir, pair_id: Optional[str] = None, modality: Optional[str] = None) -> SequenceAnnotation:
    seq_dir = Path(seq_dir)
    meta = {"attributes": [], "tc_tier": None, "modality": modality or "infrared", "pair_id": pair_id}
    meta_path = seq_dir / "meta.json"
    if meta_path.is_file():
        meta = parse_metadata(meta_path.read_bytes())
    modality = modality or meta["modality"]
    pid = meta["pair_id"] or pair_id
    return parse_annotation(
        (seq_dir / "annotation.json").read_bytes(),
        sequence_id=f"{pid}/{modality}" if pid else seq_dir.name,
        modality=modality,
        manual_attributes=meta["attributes"],
        tc_tier=meta["tc_tier"],
        pair_id=pid,
    )


def load_split(root, split: str) -> DatasetSplit:
    """Read ``<root>/<split>.txt`` and the annotations of every listed pair."""
    root = Path(root)
    pairs = []
    for pid in read_manifest(root, split):
        base = root / split / pid
        ir = load_sequence(base / "infrared", pid, "infrared")
        rgb = load_sequence(base / "visible", pid, "visible")
        pairs.append(SequencePair(pid, ir, rgb))
    return DatasetSplit(split, tuple(pairs))


def sequence_dir(root, split: str, pair_id: str, modality: str) -> Path:
    return Path(root) / split / pair_id / modality
