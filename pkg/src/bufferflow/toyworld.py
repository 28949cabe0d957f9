"""Deterministic moving-sprite videos and the probes that read them back.

The world is a 16x16 single-channel canvas with one sprite (a 4x4 square or
a 3x3 cross) moving one pixel per frame in one of four axis directions,
reflecting off the canvas edges. Class ids encode shape and direction:
id = shape_index * 4 + direction_index + 1, with 0 reserved for the null
(unconditioned) class.

Clips are deterministic functions of (class_id, seed): extending a clip
keeps its prefix bit-identical. Alongside generation this module provides
the inverse probes (centroid tracking, direction inference) used to score
whether generated video obeys its condition, plus an analytic velocity
oracle that behaves like a perfectly conditioned model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import flowcore

DIRECTIONS = ("up", "right", "down", "left")
SHAPES = ("square", "cross")
NULL_CLASS = 0
NUM_CLASSES = len(SHAPES) * len(DIRECTIONS) + 1  # including null

_DIR_VECTORS = {
    "up": (-1, 0),
    "right": (0, 1),
    "down": (1, 0),
    "left": (0, -1),
}


@dataclass(frozen=True)
class WorldConfig:
    height: int = 16
    width: int = 16
    speed: int = 1
    intensity: float = 1.0

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("canvas must be at least 8x8")
        if self.speed < 1:
            raise ValueError("speed must be at least 1")


def class_shape(class_id: int) -> str:
    _check_real_class(class_id)
    return SHAPES[(class_id - 1) // len(DIRECTIONS)]


def class_direction(class_id: int) -> str:
    _check_real_class(class_id)
    return DIRECTIONS[(class_id - 1) % len(DIRECTIONS)]


def class_name(class_id: int) -> str:
    if class_id == NULL_CLASS:
        return "null"
    return f"{class_shape(class_id)}/{class_direction(class_id)}"


def class_for(shape: str, direction: str) -> int:
    return SHAPES.index(shape) * len(DIRECTIONS) + DIRECTIONS.index(direction) + 1


def _check_real_class(class_id: int) -> None:
    if not 1 <= class_id < NUM_CLASSES:
        raise ValueError(f"class id must be in [1, {NUM_CLASSES - 1}], got {class_id}")


def _sprite_mask(shape: str) -> np.ndarray:
    if shape == "square":
        return np.ones((4, 4), dtype=np.float64)
    if shape == "cross":
        m = np.zeros((3, 3), dtype=np.float64)
        m[1, :] = 1.0
        m[:, 1] = 1.0
        return m
    raise ValueError(f"unknown shape {shape!r}")


def _reflect(p: int, p_max: int) -> int:
    """Position after reflecting an unbounded coordinate into [0, p_max]."""
    if p_max == 0:
        return 0
    period = 2 * p_max
    phase = p % period
    return phase if phase <= p_max else period - phase


# Anchors are constrained to [0, height-4] x [0, width-4] for every shape so
# that switching between shapes mid-stream never pushes a sprite off-canvas.
_ANCHOR_MARGIN = 4


def _anchor_range(cfg: WorldConfig) -> Tuple[int, int]:
    return cfg.height - _ANCHOR_MARGIN, cfg.width - _ANCHOR_MARGIN


def sprite_anchor(
    class_id: int, start: Tuple[int, int], t: int, cfg: WorldConfig = WorldConfig()
) -> Tuple[int, int]:
    """Top-left sprite anchor at integer time t (t may be negative)."""
    dy, dx = _DIR_VECTORS[class_direction(class_id)]
    max_y, max_x = _anchor_range(cfg)
    y = _reflect(start[0] + dy * cfg.speed * t, max_y)
    x = _reflect(start[1] + dx * cfg.speed * t, max_x)
    return y, x


def render_frame(
    class_id: int, anchor: Tuple[int, int], cfg: WorldConfig = WorldConfig()
) -> np.ndarray:
    """Single frame [1, H, W] with the sprite stamped at the anchor."""
    frame = np.zeros((1, cfg.height, cfg.width), dtype=np.float64)
    mask = _sprite_mask(class_shape(class_id)) * cfg.intensity
    y, x = anchor
    h, w = mask.shape
    if not (0 <= y <= cfg.height - h and 0 <= x <= cfg.width - w):
        raise ValueError(f"anchor {anchor} puts sprite off-canvas")
    frame[0, y : y + h, x : x + w] = mask
    return frame


# Start anchors leave this much travel room along the motion axis before
# the first wall contact, so short clips (up to 2 * LEAD_ROOM frames) keep a
# strict majority of their steps in the class direction and the direction
# probe recovers every class from clean clips without fail.
LEAD_ROOM = 8


def _start_anchor(class_id: int, seed: int, cfg: WorldConfig) -> Tuple[int, int]:
    rng = np.random.default_rng([class_id, seed])
    max_y, max_x = _anchor_range(cfg)
    dy, dx = _DIR_VECTORS[class_direction(class_id)]

    def draw(limit: int, d: int) -> int:
        room = min(LEAD_ROOM, limit)
        if d > 0:
            return int(rng.integers(0, limit - room + 1))
        if d < 0:
            return int(rng.integers(room, limit + 1))
        return int(rng.integers(0, limit + 1))

    return draw(max_y, dy), draw(max_x, dx)


def sprite_centroid_offset(shape: str) -> Tuple[float, float]:
    mask = _sprite_mask(shape)
    ys, xs = np.nonzero(mask)
    return float(ys.mean()), float(xs.mean())


def generate_clip(
    class_id: int,
    seed: int,
    n_frames: int,
    cfg: WorldConfig = WorldConfig(),
) -> Tuple[np.ndarray, np.ndarray]:
    """Clip [F, 1, H, W] plus the true sprite centroids [F, 2] as (y, x).

    Deterministic in (class_id, seed): the start anchor is the only random
    draw, so longer clips extend shorter ones frame for frame.
    """
    _check_real_class(class_id)
    if n_frames < 1:
        raise ValueError("need at least one frame")
    start = _start_anchor(class_id, seed, cfg)
    oy, ox = sprite_centroid_offset(class_shape(class_id))
    frames = np.empty((n_frames, 1, cfg.height, cfg.width), dtype=np.float64)
    centroids = np.empty((n_frames, 2), dtype=np.float64)
    for t in range(n_frames):
        anchor = sprite_anchor(class_id, start, t, cfg)
        frames[t] = render_frame(class_id, anchor, cfg)
        centroids[t] = (anchor[0] + oy, anchor[1] + ox)
    return frames, centroids


class ClipSampler:
    """Draws (clip, class_id) pairs for training; class is uniform over the
    eight real classes and the start anchor varies with the drawn seed."""

    def __init__(self, n_frames: int, cfg: WorldConfig = WorldConfig()):
        self.n_frames = n_frames
        self.cfg = cfg

    def sample(self, rng: np.random.Generator) -> Tuple[np.ndarray, int]:
        class_id = int(rng.integers(1, NUM_CLASSES))
        seed = int(rng.integers(0, 2**31))
        clip, _ = generate_clip(class_id, seed, self.n_frames, self.cfg)
        return clip, class_id


def centroid_track(
    frames: np.ndarray,
    floor: float = 0.2,
    rel: float = 0.5,
    min_mass: float = 1e-6,
) -> np.ndarray:
    """Intensity-weighted centroid per frame, [F, 2] as (y, x).

    Pixels below a per-frame threshold max(floor, rel * frame_max) are
    discarded before weighting, which keeps diffuse background noise from
    dragging the centroid toward the canvas center. A frame with no mass
    above threshold has no centroid and raises.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[:, None]
    if frames.ndim != 4:
        raise ValueError(f"expected [F, C, H, W] or [F, H, W], got shape {frames.shape}")
    w = np.clip(frames.sum(axis=1), 0.0, None)  # [F, H, W]
    thr = np.maximum(floor, rel * w.max(axis=(1, 2), keepdims=True))
    w = np.where(w >= thr, w, 0.0)
    mass = w.sum(axis=(1, 2))
    if np.any(mass < min_mass):
        bad = int(np.argmax(mass < min_mass))
        raise ValueError(f"frame {bad} has no mass above threshold; no centroid defined")
    ys = np.arange(w.shape[1], dtype=np.float64)
    xs = np.arange(w.shape[2], dtype=np.float64)
    cy = (w.sum(axis=2) * ys).sum(axis=1) / mass
    cx = (w.sum(axis=1) * xs).sum(axis=1) / mass
    return np.stack([cy, cx], axis=1)


def infer_direction(
    centroids: np.ndarray,
    min_step: float = 0.25,
    min_magnitude: float = 0.5,
) -> str:
    """Dominant motion direction of a centroid track, or "ambiguous".

    Each consecutive step votes for the direction of its larger axis
    component if that component is at least min_step pixels. The winner
    needs a strict majority of votes and a mean dominant-step magnitude of
    at least min_magnitude, otherwise the track is ambiguous. Reflection at
    a wall flips votes, so tracks that spend most of their time bouncing
    in place come out ambiguous rather than wrong.
    """
    centroids = np.asarray(centroids, dtype=np.float64)
    if centroids.ndim != 2 or centroids.shape[1] != 2 or centroids.shape[0] < 3:
        raise ValueError("need at least 3 centroids of shape [F, 2]")
    steps = np.diff(centroids, axis=0)
    votes = {d: 0 for d in DIRECTIONS}
    magnitudes: List[float] = []
    for dy, dx in steps:
        ay, ax = abs(dy), abs(dx)
        if max(ay, ax) < min_step or ay == ax:
            continue
        if ay > ax:
            votes["down" if dy > 0 else "up"] += 1
            magnitudes.append(ay)
        else:
            votes["right" if dx > 0 else "left"] += 1
            magnitudes.append(ax)
    total = sum(votes.values())
    if total == 0:
        return "ambiguous"
    winner = max(DIRECTIONS, key=lambda d: votes[d])
    if votes[winner] * 2 <= total:
        return "ambiguous"
    if float(np.mean(magnitudes)) < min_magnitude:
        return "ambiguous"
    return winner


class SpriteWorldOracle:
    """Analytic velocity callable that acts like a perfectly steered model.

    It maintains a ground-truth sprite trajectory and, for any queried
    buffer state, returns the exact velocity toward the true frames at the
    queried global frame indices. Condition switches re-anchor the
    trajectory at the first non-reference frame of the switching call, so
    the sprite keeps its position and changes direction or shape, exactly
    the behavior expected of a well-trained streaming model turned ideal.

    Deterministic given the sequence of (cond, frame_indices) calls, which
    the streaming engine makes deterministic given a prompt schedule.
    """

    def __init__(self, initial_class: int, seed: int, cfg: WorldConfig = WorldConfig()):
        _check_real_class(initial_class)
        self.cfg = cfg
        start = _start_anchor(initial_class, seed, cfg)
        # Segments of (start_time, anchor_at_start, class_id).
        self._segments: List[Tuple[int, Tuple[int, int], int]] = [(0, start, initial_class)]

    def _position(self, t: int) -> Tuple[int, int]:
        t0, p0, class_id = self._segments[0]
        for seg in self._segments:
            if seg[0] <= t:
                t0, p0, class_id = seg
        return sprite_anchor(class_id, p0, t - t0, self.cfg)

    def _class_at(self, t: int) -> int:
        cls = self._segments[0][2]
        for t0, _, class_id in self._segments:
            if t0 <= t:
                cls = class_id
        return cls

    def target_frame(self, t: int) -> np.ndarray:
        return render_frame(self._class_at(t), self._position(t), self.cfg)

    def switch(self, class_id: int, at_frame: int) -> None:
        _check_real_class(class_id)
        last_t, _, last_class = self._segments[-1]
        if class_id == last_class:
            return
        if at_frame < last_t:
            raise ValueError("condition switches must move forward in time")
        self._segments.append((at_frame, self._position(at_frame), class_id))

    def __call__(self, x, tau, cond, frame_indices=None):
        if frame_indices is None:
            frame_indices = np.arange(x.shape[0])
        if cond != NULL_CLASS and cond != self._segments[-1][2]:
            # Anchor the switch at the first frame still being denoised.
            k = int(np.argmax(np.asarray(tau) < 1.0)) if np.any(np.asarray(tau) < 1.0) else 0
            self.switch(cond, int(frame_indices[k]))
        if cond == NULL_CLASS:
            x1 = np.zeros_like(np.asarray(x, dtype=np.float64))
        else:
            x1 = np.stack([self.target_frame(int(t)) for t in frame_indices])
        return flowcore.analytic_velocity(x1, x, tau)
