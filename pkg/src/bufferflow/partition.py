"""Buffer partitioning: schemes, noise-level grids, and training-time samplers.

A scheme splits a frame buffer into K reference frames followed by N chunks
of c frames each, denoised over s micro steps per chunk lifetime. The buffer
is ordered exit-first: index 0 is the cleanest frame, noise levels never
increase with index, and freshly pushed frames enter at the far end at
tau=0. References hold tau=1 exactly.

Derived sizes: buffer length B = K + N*c, steps per frame T = s*N.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np


@dataclass(frozen=True)
class PartitionScheme:
    """Integer description of a buffer partition: (K, N, c, s)."""

    K: int
    N: int
    c: int
    s: int

    def __post_init__(self):
        for name in ("K", "N", "c", "s"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)):
                raise ValueError(f"{name} must be an integer, got {type(v).__name__}")
        if self.K < 0:
            raise ValueError(f"K must be non-negative, got {self.K}")
        for name in ("N", "c", "s"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")

    @property
    def buffer_size(self) -> int:
        return self.K + self.N * self.c

    @property
    def steps_per_frame(self) -> int:
        return self.s * self.N

    def __str__(self) -> str:
        return f"K={self.K},N={self.N},c={self.c},s={self.s}"


def derive_dims(scheme: PartitionScheme) -> Tuple[int, int]:
    """(buffer length B, per-frame step count T) for a scheme."""
    return scheme.buffer_size, scheme.steps_per_frame


class PowerGamma:
    """Monotone noise-level warp gamma(t) = t**k on [0, 1]."""

    def __init__(self, k: float):
        if not k > 0:
            raise ValueError(f"gamma exponent must be positive, got {k}")
        self.k = float(k)

    def __call__(self, t: float) -> float:
        return float(t) ** self.k

    @property
    def name(self) -> str:
        return "linear" if self.k == 1.0 else "power"

    def __repr__(self) -> str:
        return f"PowerGamma(k={self.k})"

    def __eq__(self, other) -> bool:
        return isinstance(other, PowerGamma) and other.k == self.k


GammaFn = Callable[[float], float]


def check_gamma(gamma: GammaFn, grid_points: int = 257) -> None:
    """Reject warps that are not monotone endpoints-anchored maps of [0, 1].

    Checks gamma(0)=0, gamma(1)=1 (to 1e-9) and non-decreasing values on a
    dense grid. Raises ValueError on violation.
    """
    grid = np.linspace(0.0, 1.0, grid_points)
    vals = np.array([float(gamma(t)) for t in grid])
    if abs(vals[0]) > 1e-9 or abs(vals[-1] - 1.0) > 1e-9:
        raise ValueError(f"gamma must map 0->0 and 1->1, got ({vals[0]}, {vals[-1]})")
    if np.any(np.diff(vals) < -1e-12):
        raise ValueError("gamma must be non-decreasing on [0, 1]")


@dataclass(frozen=True)
class TauGrid:
    """Segment boundaries of the noise-level axis, 0 = b[0] < ... < b[N] = 1.

    Segment i (1-based) covers the half-open interval (b[i-1], b[i]].
    """

    boundaries: np.ndarray

    @property
    def n_segments(self) -> int:
        return len(self.boundaries) - 1

    def segment_bounds(self, i: int) -> Tuple[float, float]:
        if not 1 <= i <= self.n_segments:
            raise ValueError(f"segment index must be in [1, {self.n_segments}], got {i}")
        return float(self.boundaries[i - 1]), float(self.boundaries[i])

    def segment_of(self, tau: float) -> int:
        """Segment containing tau; tau=0 belongs to no segment and returns 0."""
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {tau}")
        return int(np.searchsorted(self.boundaries, tau, side="left"))


def chunk_segments(scheme: PartitionScheme, gamma: Optional[GammaFn] = None) -> TauGrid:
    """Uniform segment boundaries i/N, optionally warped through gamma."""
    bounds = np.arange(scheme.N + 1, dtype=np.float64) / scheme.N
    if gamma is not None:
        check_gamma(gamma)
        bounds = np.array([float(gamma(b)) for b in bounds])
    return TauGrid(bounds)


def sample_training_taus(
    scheme: PartitionScheme,
    rng: np.random.Generator,
    gamma: Optional[GammaFn] = None,
) -> np.ndarray:
    """Per-frame training noise levels in canonical buffer order.

    One level is drawn per chunk: chunk j (j=1 at the exit end) draws
    uniformly from the half-open segment ((N-j)/N, (N-j+1)/N], so levels are
    non-increasing along the buffer and all frames of a chunk share one
    level. References get exactly 1. With gamma, the draw is t ~ U(segment)
    in unwarped time and the level is gamma(t), still constant per segment.
    """
    K, N, c = scheme.K, scheme.N, scheme.c
    out = np.empty(scheme.buffer_size, dtype=np.float64)
    out[:K] = 1.0
    for j in range(1, N + 1):
        lo = (N - j) / N
        hi = (N - j + 1) / N
        # hi - U[0, hi-lo) lies in (lo, hi]: the segment is half-open below.
        draw = hi - rng.uniform(0.0, hi - lo)
        if gamma is not None:
            draw = float(gamma(draw))
        out[K + (j - 1) * c : K + j * c] = draw
    if gamma is not None:
        check_gamma(gamma)
    return out


def stepwise_schedule(
    gamma: GammaFn, n_segments: int, rng: np.random.Generator
) -> np.ndarray:
    """Per-segment noise levels: t_i ~ U(segment i), level_i = gamma(t_i).

    Returned in segment order (ascending tau), length n_segments. Levels are
    non-decreasing because gamma is monotone; check_gamma rejects warps that
    are not.
    """
    check_gamma(gamma)
    if n_segments < 1:
        raise ValueError(f"need at least one segment, got {n_segments}")
    levels = np.empty(n_segments, dtype=np.float64)
    for i in range(1, n_segments + 1):
        hi = i / n_segments
        t = hi - rng.uniform(0.0, 1.0 / n_segments)
        levels[i - 1] = float(gamma(t))
    return levels


def staged_taus(
    scheme: PartitionScheme, m: int, gamma: Optional[GammaFn] = None
) -> np.ndarray:
    """Closed-form buffer noise levels at micro counter m, exit-first order.

    Chunk j sits m/s of the way through segment N-j+1. Without a warp the
    level is the exact rational (s*(N-j) + m) / (s*N); with one, levels
    interpolate linearly between warped segment boundaries. References
    are pinned at 1.
    """
    K, N, c, s = scheme.K, scheme.N, scheme.c, scheme.s
    if not 0 <= m <= s:
        raise ValueError(f"micro counter must lie in [0, {s}], got {m}")
    out = np.ones(scheme.buffer_size, dtype=np.float64)
    for j in range(1, N + 1):
        if gamma is None:
            level = (s * (N - j) + m) / (s * N)
        else:
            lo = float(gamma((N - j) / N))
            hi = float(gamma((N - j + 1) / N))
            level = lo + (hi - lo) * (m / s)
        out[K + (j - 1) * c : K + j * c] = level
    return out


def staged_dtaus(
    scheme: PartitionScheme, m: int, gamma: Optional[GammaFn] = None
) -> np.ndarray:
    """Per-frame level increment for micro step m -> m+1 (references get 0)."""
    if not 0 <= m < scheme.s:
        raise ValueError(f"micro counter must lie in [0, {scheme.s}), got {m}")
    return staged_taus(scheme, m + 1, gamma) - staged_taus(scheme, m, gamma)


def uniform_scheme(buffer_size: int, total_steps: int) -> PartitionScheme:
    """Whole buffer as one chunk: full bidirectional context, no streaming."""
    return PartitionScheme(K=0, N=1, c=buffer_size, s=total_steps)


def diagonal_scheme(buffer_size: int, total_steps: int) -> PartitionScheme:
    """One frame per chunk: a strictly diagonal noise staircase."""
    if total_steps % buffer_size != 0:
        raise ValueError(
            f"diagonal scheme needs buffer size {buffer_size} to divide step count {total_steps}"
        )
    return PartitionScheme(K=0, N=buffer_size, c=1, s=total_steps // buffer_size)


def blockwise_scheme(buffer_size: int, total_steps: int, chunk_size: int) -> PartitionScheme:
    """Chunks of c frames sharing a level: the streaming middle ground."""
    if buffer_size % chunk_size != 0:
        raise ValueError(
            f"chunk size {chunk_size} must divide buffer size {buffer_size}"
        )
    n = buffer_size // chunk_size
    if total_steps % n != 0:
        raise ValueError(
            f"chunk count {n} must divide step count {total_steps}"
        )
    return PartitionScheme(K=0, N=n, c=chunk_size, s=total_steps // n)


PRESETS = {
    "uniform": uniform_scheme,
    "diagonal": diagonal_scheme,
    "blockwise": blockwise_scheme,
}


def preset_scheme(
    name: str, buffer_size: int, total_steps: int, chunk_size: Optional[int] = None
) -> PartitionScheme:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}, choose from {sorted(PRESETS)}")
    if name == "blockwise":
        if chunk_size is None:
            raise ValueError("blockwise preset needs a chunk size")
        return blockwise_scheme(buffer_size, total_steps, chunk_size)
    return PRESETS[name](buffer_size, total_steps)


def parse_scheme(text: str) -> PartitionScheme:
    """Parse the CLI form 'K,N,c,s', e.g. '0,8,2,16'."""
    parts = text.split(",")
    if len(parts) != 4:
        raise ValueError(f"scheme must be 'K,N,c,s', got {text!r}")
    try:
        k, n, c, s = (int(p.strip()) for p in parts)
    except ValueError as e:
        raise ValueError(f"scheme fields must be integers: {text!r}") from e
    return PartitionScheme(K=k, N=n, c=c, s=s)


def parse_gamma(text: str) -> Optional[PowerGamma]:
    """Parse the CLI form 'linear' or 'power:K'. 'linear' means no warp."""
    text = text.strip()
    if text == "linear":
        return None
    if ":" in text:
        name, _, arg = text.partition(":")
        if name.strip() == "power":
            try:
                return PowerGamma(float(arg))
            except ValueError as e:
                raise ValueError(f"bad gamma exponent in {text!r}") from e
    raise ValueError(f"gamma must be 'linear' or 'power:K', got {text!r}")


def scheme_to_dict(
    scheme: PartitionScheme, gamma: Optional[PowerGamma] = None
) -> dict:
    d = {"K": scheme.K, "N": scheme.N, "c": scheme.c, "s": scheme.s}
    if gamma is None:
        d["gamma"] = {"name": "linear", "exponent": 1.0}
    else:
        d["gamma"] = {"name": "power", "exponent": gamma.k}
    return d


def scheme_from_dict(d: dict) -> Tuple[PartitionScheme, Optional[PowerGamma]]:
    scheme = PartitionScheme(K=int(d["K"]), N=int(d["N"]), c=int(d["c"]), s=int(d["s"]))
    gamma = None
    g = d.get("gamma")
    if g is not None:
        k = float(g.get("exponent", 1.0))
        if g.get("name", "linear") == "power" and k != 1.0:
            gamma = PowerGamma(k)
        elif k != 1.0:
            gamma = PowerGamma(k)
    return scheme, gamma


def save_scheme(path, scheme: PartitionScheme, gamma: Optional[PowerGamma] = None) -> None:
    with open(path, "w") as f:
        json.dump(scheme_to_dict(scheme, gamma), f, indent=2)
        f.write("\n")


def load_scheme(path) -> Tuple[PartitionScheme, Optional[PowerGamma]]:
    with open(path) as f:
        return scheme_from_dict(json.load(f))
