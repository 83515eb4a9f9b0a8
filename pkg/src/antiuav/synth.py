"""Seeded synthetic UAV sequences with exact ground truth.

A target is a filled rectangle with a Gaussian-blurred edge composited over a
smooth background; distractors are similar blobs whose appearance approaches
the target's as ``distractor_similarity`` goes to 1. Randomness comes from
numpy's PCG64 so a (config, seed) pair fixes every output byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .annotations import (
    DatasetSplit,
    SequenceAnnotation,
    SequencePair,
    write_annotation,
    write_metadata,
)
from .geometry import BoundingBox, FrameState, iou
from .imageio import FRAME_PATTERN, encode_frame, frame_extension

EDGE_SIGMA = 0.5
BORDER = 1.0
MAX_DISTRACTOR_IOU = 0.1

IR_TARGET_RANGE = (0.75, 1.0)
IR_BACKGROUND_RANGE = (0.1, 0.3)
SKY_RGB = np.array([0.55, 0.68, 0.85])
UAV_RGB = np.array([0.12, 0.12, 0.15])


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MotionModel:
    step: float = 2.0
    turn_prob: float = 0.1


@dataclass(frozen=True)
class SynthConfig:
    frame_size: tuple[int, int] = (64, 64)
    num_frames: int = 60
    target_size_range: tuple[float, float] = (12.0, 20.0)
    motion: MotionModel = field(default_factory=MotionModel)
    distractor_count: int = 0
    distractor_similarity: float = 0.5
    absence_spans: tuple[tuple[int, int], ...] = ()
    # (dx, dy, dt) of the visible stream relative to the infrared one
    modality_offset: tuple[float, float, int] = (0.0, 0.0, 0)
    noise_level: float = 0.05
    # relative growth of the target scale from the first to the last frame
    scale_drift: float = 0.0
    aspect_range: tuple[float, float] = (1.0, 1.6)
    contrast: float = 1.0
    background_gradient: float = 0.1
    seed: int = 0

    def __post_init__(self):
        H, W = self.frame_size
        if H < 32 or W < 32:
            raise ConfigError(f"frame_size {self.frame_size} below 32 px")
        if self.num_frames < 1:
            raise ConfigError("num_frames must be >= 1")
        lo, hi = self.target_size_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad target_size_range {self.target_size_range}")
        if self.distractor_count < 0:
            raise ConfigError("distractor_count must be >= 0")
        if not 0 <= self.distractor_similarity <= 1:
            raise ConfigError("distractor_similarity must lie in [0, 1]")
        if not 0 <= self.noise_level <= 1:
            raise ConfigError("noise_level must lie in [0, 1]")
        if not 0 < self.contrast <= 1:
            raise ConfigError("contrast must lie in (0, 1]")
        if self.motion.step < 0 or not 0 <= self.motion.turn_prob <= 1:
            raise ConfigError(f"bad motion model {self.motion}")
        for s, e in self.absence_spans:
            if not 0 <= s < e <= self.num_frames:
                raise ConfigError(f"absence span ({s}, {e}) outside [0, {self.num_frames})")
        a_lo, a_hi = self.aspect_range
        if not 0 < a_lo <= a_hi:
            raise ConfigError(f"bad aspect_range {self.aspect_range}")
        w, h = self.max_extent()
        dx, dy, _ = self.modality_offset
        if w + abs(dx) + 2 * BORDER > W or h + abs(dy) + 2 * BORDER > H:
            raise ConfigError(f"target of up to {w:.1f}x{h:.1f} px does not fit a {W}x{H} frame")

    def max_extent(self) -> tuple[float, float]:
        s = self.target_size_range[1] * max(1.0, 1.0 + self.scale_drift)
        a = self.aspect_range[1]
        return s * math.sqrt(a), s / math.sqrt(self.aspect_range[0])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["motion"] = MotionModel(**d.get("motion", {}))
        for k in ("frame_size", "target_size_range", "modality_offset", "aspect_range"):
            if k in d:
                d[k] = tuple(d[k])
        d["absence_spans"] = tuple(tuple(s) for s in d.get("absence_spans", ()))
        return cls(**d)


@dataclass
class SynthSequence:
    frames: np.ndarray  # (T, H, W, C) uint8
    annotation: SequenceAnnotation
    distractors: list[list[BoundingBox]] = field(default_factory=list)


@dataclass
class SynthPair:
    pair: SequencePair
    infrared: SynthSequence
    visible: SynthSequence


# --- simulation -----------------------------------------------------------


@dataclass
class _Track:
    centers: np.ndarray  # (L, 2)
    sizes: np.ndarray  # (L, 2) as (w, h)
    visible: np.ndarray  # (L,) bool
    distractors: list  # per distractor: (centers (L,2), sizes (L,2), appearance)
    appearance: dict


def _bounds(w, h, W, H, dx, dy):
    return (
        w / 2 + BORDER + max(0.0, -dx),
        W - w / 2 - BORDER - max(0.0, dx),
        h / 2 + BORDER + max(0.0, -dy),
        H - h / 2 - BORDER - max(0.0, dy),
    )


def _inside(c, b):
    return b[0] <= c[0] <= b[1] and b[2] <= c[1] <= b[3]


def _walk(rng, start, length, step, turn_prob, bounds):
    centers = np.empty((length, 2))
    c = np.array(start, dtype=np.float64)
    theta = rng.uniform(0, 2 * math.pi)
    centers[0] = c
    for t in range(1, length):
        if rng.random() < turn_prob:
            theta = rng.uniform(0, 2 * math.pi)
        v = step * np.array([math.cos(theta), math.sin(theta)])
        moved = None
        for sx, sy in ((1, 1), (-1, 1), (1, -1), (-1, -1)):
            cand = c + v * (sx, sy)
            if _inside(cand, bounds):
                moved = cand
                theta = math.atan2(v[1] * sy, v[0] * sx)
                break
        if moved is None:
            for _ in range(16):
                theta = rng.uniform(0, 2 * math.pi)
                cand = c + step * np.array([math.cos(theta), math.sin(theta)])
                if _inside(cand, bounds):
                    moved = cand
                    break
        if moved is None:
            moved = np.array([np.clip(c[0] + v[0], bounds[0], bounds[1]),
                              np.clip(c[1] + v[1], bounds[2], bounds[3])])
        c = moved
        centers[t] = c
    return centers


def _simulate(cfg: SynthConfig, rng: np.random.Generator, length: int, visible_mask: np.ndarray) -> _Track:
    H, W = cfg.frame_size
    dx, dy, _ = cfg.modality_offset
    s0 = rng.uniform(*cfg.target_size_range)
    aspect = rng.uniform(*cfg.aspect_range)
    ramp = np.linspace(0.0, 1.0, length) if length > 1 else np.zeros(1)
    scales = s0 * (1.0 + cfg.scale_drift * ramp)
    sizes = np.stack([scales * math.sqrt(aspect), scales / math.sqrt(aspect)], axis=1)
    wmax, hmax = sizes.max(axis=0)
    bounds = _bounds(wmax, hmax, W, H, dx, dy)
    start = (rng.uniform(bounds[0], bounds[1]), rng.uniform(bounds[2], bounds[3]))
    centers = _walk(rng, start, length, cfg.motion.step, cfg.motion.turn_prob, bounds)

    appearance = {
        "ir_background": rng.uniform(*IR_BACKGROUND_RANGE),
        "ir_target": rng.uniform(*IR_TARGET_RANGE),
        "rgb_tint": rng.uniform(-0.05, 0.05, size=3),
    }

    sim = cfg.distractor_similarity
    distractors = []
    for _ in range(cfg.distractor_count):
        own_s = rng.uniform(*cfg.target_size_range)
        d_scale = own_s + sim * (s0 - own_s)
        d_aspect = (1.0 / aspect) + sim * (aspect - 1.0 / aspect)
        d_size = np.array([d_scale * math.sqrt(d_aspect), d_scale / math.sqrt(d_aspect)])
        db = _bounds(d_size[0], d_size[1], W, H, dx, dy)
        if db[0] > db[1] or db[2] > db[3]:
            raise ConfigError("distractor does not fit the frame")
        d_centers = np.empty((length, 2))
        c = None
        for t in range(length):
            tgt = BoundingBox.from_center(*centers[t], *sizes[t])
            cands = []
            if c is not None:
                for _ in range(32):
                    th = rng.uniform(0, 2 * math.pi)
                    cands.append(c + cfg.motion.step * np.array([math.cos(th), math.sin(th)]))
            placed = None
            for cand in cands:
                if _inside(cand, db) and iou(BoundingBox.from_center(*cand, *d_size), tgt) < MAX_DISTRACTOR_IOU:
                    placed = cand
                    break
            if placed is None:
                for _ in range(1000):
                    cand = np.array([rng.uniform(db[0], db[1]), rng.uniform(db[2], db[3])])
                    if iou(BoundingBox.from_center(*cand, *d_size), tgt) < MAX_DISTRACTOR_IOU:
                        placed = cand
                        break
            if placed is None:
                raise ConfigError("cannot place a distractor away from the target")
            c = placed
            d_centers[t] = c
        distractors.append((d_centers, np.tile(d_size, (length, 1)), 0.35 + 0.65 * sim))
    return _Track(centers, sizes, visible_mask, distractors, appearance)


# --- rendering ------------------------------------------------------------


def render_target_mask(box: BoundingBox, height: int, width: int, sigma: float = EDGE_SIGMA) -> np.ndarray:
    """Coverage in [0, 1] of a Gaussian-edged rectangle sampled at pixel centers."""
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    px = ndtr((xs - box.x1) / sigma) - ndtr((xs - box.x2) / sigma)
    py = ndtr((ys - box.y1) / sigma) - ndtr((ys - box.y2) / sigma)
    return py[:, None] * px[None, :]


def _render(cfg: SynthConfig, track: _Track, index: np.ndarray, modality: str,
            shift: tuple[float, float], rng: np.random.Generator):
    H, W = cfg.frame_size
    dx, dy = shift
    app = track.appearance
    ramp = (np.arange(H) / max(H - 1, 1) - 0.5)[:, None]
    if modality == "infrared":
        bg = np.broadcast_to(app["ir_background"] + cfg.background_gradient * ramp, (H, W))[..., None]
        bg_level = np.array([app["ir_background"]])
        target = bg_level + cfg.contrast * (np.array([app["ir_target"]]) - bg_level)
    else:
        sky = SKY_RGB + app["rgb_tint"]
        bg = sky[None, None, :] - cfg.background_gradient * ramp[..., None]
        bg = np.broadcast_to(bg, (H, W, 3))
        bg_level = sky
        target = bg_level + cfg.contrast * (UAV_RGB - bg_level)

    frames = np.empty((len(index), H, W, bg.shape[2]), dtype=np.uint8)
    states, dboxes = [], []
    for t, m in enumerate(index):
        img = np.array(bg, dtype=np.float64)
        tgt = BoundingBox.from_center(track.centers[m, 0] + dx, track.centers[m, 1] + dy, *track.sizes[m])
        boxes_t = []
        for d_centers, d_sizes, d_mix in track.distractors:
            db = BoundingBox.from_center(d_centers[m, 0] + dx, d_centers[m, 1] + dy, *d_sizes[m])
            boxes_t.append(db)
            mask = render_target_mask(db, H, W)[..., None]
            colour = bg_level + d_mix * (target - bg_level)
            img = img * (1 - mask) + colour * mask
        if track.visible[m]:
            mask = render_target_mask(tgt, H, W)[..., None]
            img = img * (1 - mask) + target * mask
            states.append(FrameState(True, tgt))
        else:
            states.append(FrameState(False, None))
        if cfg.noise_level > 0:
            img = img + (0.15 * cfg.noise_level) * rng.standard_normal(img.shape)
        frames[t] = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        dboxes.append(boxes_t)
    return frames, states, dboxes


def _streams(seed: int):
    sim, ir, rgb = np.random.SeedSequence(seed).spawn(3)
    return (np.random.Generator(np.random.PCG64(sim)),
            np.random.Generator(np.random.PCG64(ir)),
            np.random.Generator(np.random.PCG64(rgb)))


def _visibility(cfg: SynthConfig, length: int, offset: int) -> np.ndarray:
    vis = np.ones(length, dtype=bool)
    for s, e in cfg.absence_spans:
        vis[s + offset:e + offset] = False
    return vis


def generate_sequence(cfg: SynthConfig, modality: str = "infrared", sequence_id: str = "synth",
                      manual_attributes=(), tc_tier: Optional[str] = None,
                      pair_id: Optional[str] = None) -> SynthSequence:
    """Render one single-modality sequence (the modality offset is ignored)."""
    cfg0 = replace(cfg, modality_offset=(0.0, 0.0, 0))
    sim_rng, ir_rng, rgb_rng = _streams(cfg.seed)
    T = cfg.num_frames
    track = _simulate(cfg0, sim_rng, T, _visibility(cfg, T, 0))
    rng = ir_rng if modality == "infrared" else rgb_rng
    frames, states, dboxes = _render(cfg0, track, np.arange(T), modality, (0.0, 0.0), rng)
    ann = SequenceAnnotation(sequence_id, modality, tuple(states), frozenset(manual_attributes),
                             tc_tier, pair_id)
    return SynthSequence(frames, ann, dboxes)


def generate_pair(cfg: SynthConfig, pair_id: str = "synth", manual_attributes=(),
                  tc_tier: Optional[str] = None) -> SynthPair:
    """Render an unaligned infrared/visible pair sharing one trajectory.

    With ``modality_offset = (dx, dy, dt)`` the visible box at frame ``t`` is
    the infrared box at frame ``t - dt`` shifted by ``(dx, dy)``.
    """
    dx, dy, dt = cfg.modality_offset
    dt = int(dt)
    T = cfg.num_frames
    ir_start, vis_start = (dt, 0) if dt >= 0 else (0, -dt)
    length = T + abs(dt)
    sim_rng, ir_rng, rgb_rng = _streams(cfg.seed)
    track = _simulate(cfg, sim_rng, length, _visibility(cfg, length, ir_start))
    ir_frames, ir_states, ir_d = _render(cfg, track, np.arange(T) + ir_start, "infrared", (0.0, 0.0), ir_rng)
    vis_frames, vis_states, vis_d = _render(cfg, track, np.arange(T) + vis_start, "visible",
                                            (float(dx), float(dy)), rgb_rng)
    attrs = frozenset(manual_attributes)
    ir = SequenceAnnotation(f"{pair_id}/infrared", "infrared", tuple(ir_states), attrs, tc_tier, pair_id)
    vis = SequenceAnnotation(f"{pair_id}/visible", "visible", tuple(vis_states), attrs, tc_tier, pair_id)
    return SynthPair(SequencePair(pair_id, ir, vis),
                     SynthSequence(ir_frames, ir, ir_d),
                     SynthSequence(vis_frames, vis, vis_d))


# --- profiles -------------------------------------------------------------

PROFILES = ("easy", "fm", "tc", "ov", "mixed")


def _tc_tier(contrast: float) -> Optional[str]:
    if contrast < 0.4:
        return "hard"
    if contrast < 0.55:
        return "med"
    if contrast < 0.7:
        return "easy"
    return None


def _absence(rng, T, count):
    spans = []
    if T < 20:
        return ()
    for _ in range(count):
        length = int(rng.integers(5, min(16, T // 3) + 1))
        start = int(rng.integers(5, T - length))
        spans.append((start, start + length))
    return tuple(sorted(spans))


def profile_config(profile: str, rng: np.random.Generator, frame_size=(64, 64),
                   num_frames: int = 60) -> tuple[SynthConfig, frozenset, Optional[str]]:
    """Draw one pair's config from a named preset.

    Returns the config plus the manual attribute tags and TC tier the
    generator planted (thermal crossover is only ever set here, never derived).
    """
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {PROFILES}")
    H, W = frame_size
    T = num_frames
    seed = int(rng.integers(0, 2**31 - 1))
    offset = (float(rng.integers(-3, 4)), float(rng.integers(-3, 4)), int(rng.integers(0, 3)))
    kw = dict(frame_size=(H, W), num_frames=T, seed=seed, modality_offset=offset,
              noise_level=float(rng.uniform(0.03, 0.1)))
    tags = set()
    if profile == "easy":
        kw.update(motion=MotionModel(float(rng.uniform(0.5, 2.0)), 0.1))
    elif profile == "fm":
        H, W = max(H, 192), max(W, 192)
        kw.update(frame_size=(H, W), motion=MotionModel(float(rng.uniform(62.0, 70.0)), 0.3))
    elif profile == "ov":
        kw.update(motion=MotionModel(float(rng.uniform(0.5, 2.0)), 0.1),
                  absence_spans=_absence(rng, T, int(rng.integers(1, 3))))
    elif profile == "tc":
        kw.update(motion=MotionModel(float(rng.uniform(0.5, 2.0)), 0.1),
                  contrast=float(rng.uniform(0.3, 0.68)),
                  distractor_count=int(rng.integers(1, 3)),
                  distractor_similarity=float(rng.uniform(0.6, 0.9)))
    else:
        kw.update(motion=MotionModel(float(rng.uniform(0.5, 2.5)), 0.1),
                  target_size_range=(12.0, 22.0),
                  contrast=float(rng.uniform(0.6, 1.0)))
        if rng.random() < 0.4:
            kw["absence_spans"] = _absence(rng, T, 1)
        if rng.random() < 0.5:
            kw.update(distractor_count=1, distractor_similarity=float(rng.uniform(0.2, 0.5)))
        if rng.random() < 0.3:
            kw["scale_drift"] = float(rng.uniform(0.3, 0.5))
    cfg = SynthConfig(**kw)
    tier = _tc_tier(cfg.contrast)
    if tier is not None:
        tags.add("TC")
    return cfg, frozenset(tags), tier


# --- benchmark trees ------------------------------------------------------


def _pair_files(rel: Path, sp: SynthPair, cfg: SynthConfig) -> dict[Path, bytes]:
    files = {}
    for seq in (sp.infrared, sp.visible):
        ann = seq.annotation
        d = rel / ann.modality
        ext = frame_extension(seq.frames.shape[3])
        for t, fr in enumerate(seq.frames):
            files[d / FRAME_PATTERN.format(t, ext)] = encode_frame(fr)
        files[d / "annotation.json"] = write_annotation(ann)
        files[d / "meta.json"] = write_metadata(ann, {"synth_config": cfg.to_dict()})
    return files


def make_benchmark(root, num_train: int, num_val: int, num_test: int, seed: int = 42,
                   profile: str = "mixed", frame_size=(64, 64), num_frames: int = 60) -> dict[str, DatasetSplit]:
    """Write a train/val/test benchmark tree under ``root``.

    Layout: ``<root>/<split>/<pair_id>/<modality>/frame_%06d.{pgm,ppm}`` with
    ``annotation.json`` and ``meta.json`` next to the frames, plus a manifest
    ``<root>/<split>.txt``. Existing files with identical bytes are accepted,
    so rerunning with the same arguments is a no-op; any differing file is a
    collision and nothing is written.
    """
    counts = {"train": num_train, "val": num_val, "test": num_test}
    for name, n in counts.items():
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise ConfigError(f"{name} count must be >= 1, got {n}")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {PROFILES}")
    root = Path(root)
    split_seeds = np.random.SeedSequence(seed).spawn(3)
    files: dict[Path, bytes] = {}
    splits = {}
    for (name, n), ss in zip(counts.items(), split_seeds):
        rng = np.random.Generator(np.random.PCG64(ss))
        pairs = []
        for i in range(n):
            pid = f"{name}_{i:03d}"
            cfg, tags, tier = profile_config(profile, rng, frame_size, num_frames)
            sp = generate_pair(cfg, pid, tags, tier)
            files.update(_pair_files(Path(name) / pid, sp, cfg))
            pairs.append(sp.pair)
        files[Path(f"{name}.txt")] = "".join(p.pair_id + "\n" for p in pairs).encode()
        splits[name] = DatasetSplit(name, tuple(pairs))
    files[Path("benchmark.json")] = json.dumps(
        {"seed": seed, "profile": profile, "frame_size": list(frame_size), "num_frames": num_frames,
         "counts": counts}, sort_keys=True, indent=1).encode()

    clashes = sorted(str(p) for p, data in files.items()
                     if (root / p).exists() and ((root / p).is_dir() or (root / p).read_bytes() != data))
    if clashes:
        raise FileExistsError(f"{len(clashes)} paths under {root} already exist with other content, "
                              f"e.g. {clashes[0]}")
    for p, data in sorted(files.items()):
        dest = root / p
        if dest.exists():
            continue
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_bytes(data)
    return splits
