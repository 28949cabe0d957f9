"""Stream quality metrics and the ablation harness.

All metrics operate on frame stacks [F, C, H, W]. Temporal smoothness
comes from plain finite differences; seam quality compares frame change
at chunk boundaries against change inside chunks; steering quality asks
whether the motion probe recovers the scheduled class in each window.

The probe treats a bounce as class-consistent motion: a window whose
inferred direction is exactly opposite the scheduled one still counts
when the track touches a wall on that axis in (or just before) the
window. Wrong-axis motion and wall-free wrong-sign motion stay misses.
"""

import json
import math
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .toyworld import (
    DIRECTIONS,
    NULL_CLASS,
    WorldConfig,
    centroid_track,
    class_direction,
    infer_direction,
)

Schedule = Union[int, Sequence[Tuple[int, int]]]

DEFAULT_WEIGHTS = {
    "condition_accuracy": 0.4,
    "seam": 0.2,
    "flicker": 0.2,
    "dynamic_degree": 0.2,
}


def _stack(frames) -> np.ndarray:
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"expected frames [F, C, H, W], got shape {arr.shape}")
    return arr


def flicker(frames) -> float:
    """Mean absolute second temporal difference."""
    arr = _stack(frames)
    if arr.shape[0] < 3:
        raise ValueError("flicker needs at least 3 frames")
    return float(np.abs(arr[2:] - 2 * arr[1:-1] + arr[:-2]).mean())


def dynamic_degree(frames) -> float:
    """Mean absolute first temporal difference."""
    arr = _stack(frames)
    if arr.shape[0] < 2:
        raise ValueError("dynamic_degree needs at least 2 frames")
    return float(np.abs(arr[1:] - arr[:-1]).mean())


def boundary_discontinuity(frames, chunk_size: int, start_index: int = 0) -> float:
    """Mean frame change across chunk boundaries over mean change within.

    A constant stream scores 1.0 (0/0 counts as seamless); change at the
    boundaries with none inside scores inf; when either side has no gaps
    at all (chunk size 1, or a single chunk) the ratio is defined as 1.0.
    """
    arr = _stack(frames)
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    if arr.shape[0] < 2:
        raise ValueError("boundary_discontinuity needs at least 2 frames")
    gaps = np.abs(arr[1:] - arr[:-1]).mean(axis=(1, 2, 3))
    pos = np.arange(arr.shape[0] - 1) + start_index
    at_boundary = (pos + 1) % chunk_size == 0
    b, w = gaps[at_boundary], gaps[~at_boundary]
    if b.size == 0 or w.size == 0:
        return 1.0
    mb, mw = float(b.mean()), float(w.mean())
    if mw == 0.0:
        return 1.0 if mb == 0.0 else math.inf
    return mb / mw


def _normalize_schedule(schedule: Schedule) -> List[Tuple[int, int]]:
    if isinstance(schedule, (int, np.integer)):
        return [(0, int(schedule))]
    entries = [(int(a), int(b)) for a, b in schedule]
    if not entries or entries[0][0] != 0:
        raise ValueError("schedule must start at frame 0")
    starts = [a for a, _ in entries]
    if starts != sorted(set(starts)):
        raise ValueError("schedule starts must be strictly increasing")
    return entries


def _regime_table(entries, n_frames: int) -> np.ndarray:
    """Per-frame scheduled class and the start frame of its regime."""
    cls = np.zeros(n_frames, dtype=int)
    reg = np.zeros(n_frames, dtype=int)
    for start, cond in entries:
        if start < n_frames:
            cls[start:] = cond
            reg[start:] = start
    return np.stack([cls, reg], axis=1)


_OPPOSITE = {d: DIRECTIONS[(i + 2) % 4] for i, d in enumerate(DIRECTIONS)}
_AXIS = {"up": 0, "down": 0, "left": 1, "right": 1}


def _window_centroids(frames: np.ndarray) -> Optional[np.ndarray]:
    try:
        return centroid_track(frames)
    except ValueError:
        return None


def _wall_contact(centroids: np.ndarray, axis: int, extent: int, margin: float) -> bool:
    coords = centroids[:, axis]
    return bool((coords <= margin).any() or (coords >= extent - 1 - margin).any())


def condition_accuracy(
    frames,
    schedule: Schedule,
    chunk_size: int,
    window: int = 8,
    stride: int = 1,
    edge_margin: float = 3.0,
    start_index: int = 0,
    cfg: WorldConfig = WorldConfig(),
) -> float:
    """Fraction of probe windows matching the scheduled class direction.

    Windows slide with the given stride and are only evaluated when every
    frame shares one scheduled regime and the window clears the one-chunk
    transition zone after a switch. Null-class regimes are skipped. Probe
    failures (no mass, ambiguous motion) count as misses.
    """
    arr = _stack(frames)
    F = arr.shape[0]
    if window < 2 or F < window:
        raise ValueError(f"need at least one {window}-frame window, got {F} frames")
    entries = _normalize_schedule(schedule)
    table = _regime_table(entries, start_index + F)

    hits = 0
    evaluated = 0
    for w0 in range(0, F - window + 1, stride):
        g = start_index + w0
        regime = table[g : g + window]
        if not (regime[:, 0] == regime[0, 0]).all():
            continue
        cond, reg_start = int(regime[0, 0]), int(regime[0, 1])
        if cond == NULL_CLASS:
            continue
        if reg_start > 0 and g < reg_start + chunk_size:
            continue
        evaluated += 1
        cents = _window_centroids(arr[w0 : w0 + window])
        if cents is None:
            continue
        got = infer_direction(cents)
        want = class_direction(cond)
        if got == want:
            hits += 1
            continue
        if got == _OPPOSITE[want]:
            axis = _AXIS[want]
            extent = cfg.height if axis == 0 else cfg.width
            look0 = max(w0 - window, max(0, reg_start - start_index))
            look = _window_centroids(arr[look0 : w0 + window])
            track = look if look is not None else cents
            if _wall_contact(track, axis, extent, edge_margin):
                hits += 1
    if evaluated == 0:
        raise ValueError("no evaluable windows for the given schedule")
    return hits / evaluated


def closeness(value: float, reference: float) -> float:
    """Scale-free agreement in [0, 1]: ratio of smaller to larger."""
    if value < 0 or reference < 0:
        raise ValueError("closeness expects non-negative values")
    if value == reference:
        return 1.0
    if value == 0.0 or reference == 0.0 or math.isinf(value):
        return 0.0
    return min(value, reference) / max(value, reference)


def seam_score(bd: float) -> float:
    """1 for seamless-or-better, decaying as boundaries stick out."""
    if math.isinf(bd):
        return 0.0
    return 1.0 / max(bd, 1.0)


def composite_score(
    metrics: Dict[str, float],
    reference: Dict[str, float],
    weights: Dict[str, float] = DEFAULT_WEIGHTS,
) -> float:
    """Weighted proxy for overall stream quality against a reference."""
    total = sum(weights.values())
    score = (
        weights["condition_accuracy"] * metrics["condition_accuracy"]
        + weights["seam"] * seam_score(metrics["boundary_discontinuity"])
        + weights["flicker"] * closeness(metrics["flicker"], reference["flicker"])
        + weights["dynamic_degree"]
        * closeness(metrics["dynamic_degree"], reference["dynamic_degree"])
    )
    return score / total


def reference_stats(frames) -> Dict[str, float]:
    """Flicker and dynamic-degree of a ground-truth stream."""
    return {"flicker": flicker(frames), "dynamic_degree": dynamic_degree(frames)}


def evaluate_stream(
    frames,
    schedule: Schedule,
    chunk_size: int,
    reference: Optional[Dict[str, float]] = None,
    window: int = 8,
    start_index: int = 0,
    cfg: WorldConfig = WorldConfig(),
) -> Dict[str, float]:
    """All metrics for one stream; composite included when a reference is given."""
    out = {
        "flicker": flicker(frames),
        "dynamic_degree": dynamic_degree(frames),
        "boundary_discontinuity": boundary_discontinuity(frames, chunk_size, start_index),
        "condition_accuracy": condition_accuracy(
            frames, schedule, chunk_size, window=window, start_index=start_index, cfg=cfg
        ),
    }
    if reference is not None:
        out["composite"] = composite_score(out, reference)
    return out


def ablation_run(
    variants: Sequence[Tuple[str, np.ndarray, int]],
    schedule: Schedule,
    reference: Dict[str, float],
    out_path=None,
    window: int = 8,
) -> List[dict]:
    """Evaluate labelled streams side by side.

    variants are (label, frames, chunk_size) triples; rows come back in
    input order and are appended to out_path as JSON lines when given.
    """
    rows = []
    for label, frames, chunk_size in variants:
        row = {"label": label, "chunk_size": chunk_size}
        row.update(
            evaluate_stream(frames, schedule, chunk_size, reference=reference, window=window)
        )
        rows.append(row)
    if out_path is not None:
        with open(out_path, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    return rows


def format_table(rows: Sequence[dict]) -> str:
    """Fixed-width text table of ablation rows."""
    if not rows:
        return "(no rows)"
    cols = list(rows[0].keys())
    rendered = [
        [
            f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c])
            for c in cols
        ]
        for row in rows
    ]
    widths = [max(len(c), *(len(r[i]) for r in rendered)) for i, c in enumerate(cols)]
    lines = [
        "  ".join(c.ljust(w) for c, w in zip(cols, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for r in rendered:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    return "\n".join(lines)
