"""Rolling-buffer stream generation.

The engine owns a frame buffer partitioned by a PartitionScheme. Life cycle:
cold-start staging (from cached uniform generation states, or a noised input
video), then repeated rounds of s denoising micro steps followed by an
advance that pops the finished exit chunk, refreshes reference frames, and
pushes fresh noise at the entry end.

Buffer orientation is fixed: index 0 is the exit end and the cleanest frame;
noise levels never increase with buffer index. Reference frames, when
present, occupy indices 0..K-1 at level 1 exactly and are context only.

The buffer's tau vector is stored and advanced by accumulation; the staged
closed-form grid is recomputed independently when invariants are checked, so
the grid check is a genuine two-route comparison.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import flowcore, protocol
from .partition import PartitionScheme, staged_dtaus, staged_taus

GRID_TOL = 1e-9

VelocityFn = Callable[..., np.ndarray]


@dataclass
class StreamBuffer:
    frames: np.ndarray  # [B, C, H, W]
    tau: np.ndarray  # [B]
    scheme: PartitionScheme
    m: int  # micro counter within the current round, 0 <= m <= s
    cond: int
    frames_emitted: int = 0
    gamma: Optional[Callable[[float], float]] = None

    def copy(self) -> "StreamBuffer":
        return StreamBuffer(
            frames=self.frames.copy(),
            tau=self.tau.copy(),
            scheme=self.scheme,
            m=self.m,
            cond=self.cond,
            frames_emitted=self.frames_emitted,
            gamma=self.gamma,
        )

    def frame_indices(self) -> np.ndarray:
        """Global stream index per buffer position; references sit at the
        indices just before the next frame to pop."""
        return np.arange(self.scheme.buffer_size) - self.scheme.K + self.frames_emitted


class BufferInvariantError(ValueError):
    """The buffer's noise levels left the staged grid."""


def check_buffer(buf: StreamBuffer, tol: float = GRID_TOL) -> None:
    """Two-route grid check: accumulated tau vs the closed-form staged grid,
    plus orientation (non-increasing) and exact reference pinning."""
    scheme = buf.scheme
    if buf.frames.shape[0] != scheme.buffer_size:
        raise BufferInvariantError(
            f"buffer holds {buf.frames.shape[0]} frames, scheme wants {scheme.buffer_size}"
        )
    if not 0 <= buf.m <= scheme.s:
        raise BufferInvariantError(f"micro counter {buf.m} outside [0, {scheme.s}]")
    expected = staged_taus(scheme, buf.m, buf.gamma)
    err = np.abs(buf.tau - expected).max()
    if err > tol:
        raise BufferInvariantError(f"tau off the staged grid by {err:.3e}")
    if np.any(np.diff(buf.tau) > tol):
        raise BufferInvariantError("tau must be non-increasing from exit to entry end")
    if scheme.K and not np.all(buf.tau[: scheme.K] == 1.0):
        raise BufferInvariantError("reference frames must sit at tau=1 exactly")


def denoise_micro_step(
    buf: StreamBuffer,
    velocity_fn: VelocityFn,
    cfg_w: float = 1.0,
    null_cond: int = 0,
) -> StreamBuffer:
    """One model evaluation advancing every active frame by its staged
    increment. With cfg_w != 1 a second, null-condition forward is combined
    by classifier-free guidance. Reference frames never move."""
    check_buffer(buf)
    if buf.m >= buf.scheme.s:
        raise ValueError("round already complete; advance before stepping again")
    idx = buf.frame_indices()
    u = velocity_fn(buf.frames, buf.tau, buf.cond, idx)
    if cfg_w != 1.0:
        u_null = velocity_fn(buf.frames, buf.tau, null_cond, idx)
        u = flowcore.cfg_combine(u, u_null, cfg_w)
    dtau = staged_dtaus(buf.scheme, buf.m, buf.gamma)
    out = buf.copy()
    out.frames = flowcore.buffered_euler_step(buf.frames, u, dtau)
    out.tau = buf.tau + dtau
    out.tau[: buf.scheme.K] = 1.0
    out.m = buf.m + 1
    return out


@dataclass(frozen=True)
class ChunkOut:
    frames: np.ndarray  # [c, C, H, W]
    start_index: int
    cond: int

    @property
    def index_range(self) -> Tuple[int, int]:
        return self.start_index, self.start_index + self.frames.shape[0]


def advance(buf: StreamBuffer, rng: np.random.Generator) -> Tuple[ChunkOut, StreamBuffer]:
    """Pop the finished exit chunk, refresh references from the most recent
    clean frames, push a fresh noise chunk at the entry end, reset m."""
    scheme = buf.scheme
    K, c = scheme.K, scheme.c
    if buf.m != scheme.s:
        raise ValueError(f"advance requires a finished round (m={buf.m}, s={scheme.s})")
    check_buffer(buf)
    popped_tau = buf.tau[K : K + c]
    if np.abs(popped_tau - 1.0).max() > GRID_TOL:
        raise BufferInvariantError("exit chunk has not reached tau=1")
    popped = buf.frames[K : K + c].copy()
    chunk = ChunkOut(frames=popped, start_index=buf.frames_emitted, cond=buf.cond)

    noise = rng.standard_normal((c,) + buf.frames.shape[1:])
    if K:
        refs = np.concatenate([buf.frames[:K], popped])[-K:]
        frames = np.concatenate([refs, buf.frames[K + c :], noise])
        tau = np.concatenate([np.ones(K), buf.tau[K + c :], np.zeros(c)])
    else:
        frames = np.concatenate([buf.frames[c:], noise])
        tau = np.concatenate([buf.tau[c:], np.zeros(c)])

    out = StreamBuffer(
        frames=frames,
        tau=tau,
        scheme=scheme,
        m=0,
        cond=buf.cond,
        frames_emitted=buf.frames_emitted + c,
        gamma=buf.gamma,
    )
    check_buffer(out)
    return chunk, out


def init_from_t2v_cache(
    velocity_fn: VelocityFn,
    scheme: PartitionScheme,
    frame_shape: Tuple[int, ...],
    cond: int,
    rng: np.random.Generator,
    cfg_w: float = 1.0,
    null_cond: int = 0,
    gamma: Optional[Callable[[float], float]] = None,
) -> StreamBuffer:
    """Cold-start staging from a cached whole-buffer generation.

    Runs one uniform (all frames share a level) T-step generation over the
    buffer, caching the state after every step, then assembles the staged
    buffer by taking each chunk's frames from the cached state whose level
    matches that chunk's starting level. References take the final, clean
    state. Degenerate case: a single-chunk scheme without references starts
    from pure noise and skips the generation entirely.
    """
    B, T = scheme.buffer_size, scheme.steps_per_frame
    x = rng.standard_normal((B,) + tuple(frame_shape))
    tau0 = staged_taus(scheme, 0, gamma)
    if scheme.N == 1 and scheme.K == 0:
        return StreamBuffer(frames=x, tau=tau0, scheme=scheme, m=0, cond=cond, gamma=gamma)

    idx = np.arange(B) - scheme.K
    levels = [k / T if gamma is None else float(gamma(k / T)) for k in range(T + 1)]
    states = [x.copy()]
    for k in range(T):
        level = np.full(B, levels[k])
        u = velocity_fn(x, level, cond, idx)
        if cfg_w != 1.0:
            u_null = velocity_fn(x, level, null_cond, idx)
            u = flowcore.cfg_combine(u, u_null, cfg_w)
        x = flowcore.buffered_euler_step(x, u, np.full(B, levels[k + 1] - levels[k]))
        states.append(x.copy())

    frames = np.empty_like(x)
    K, N, c, s = scheme.K, scheme.N, scheme.c, scheme.s
    if K:
        frames[:K] = states[T][:K]
    for j in range(1, N + 1):
        sl = slice(K + (j - 1) * c, K + j * c)
        frames[sl] = states[s * (N - j)][sl]
    buf = StreamBuffer(frames=frames, tau=tau0, scheme=scheme, m=0, cond=cond, gamma=gamma)
    check_buffer(buf)
    return buf


def init_from_video(
    video: np.ndarray,
    scheme: PartitionScheme,
    strength: float,
    rng: np.random.Generator,
    cond: int = 0,
    sigma_min: float = 1e-3,
    gamma: Optional[Callable[[float], float]] = None,
) -> StreamBuffer:
    """Stage the buffer from an input video instead of cached generation.

    The nominal level grid is the same staged grid as a cold start, so the
    stepping schedule is unchanged. Content is noised to an effective level
    1 - strength * (1 - staged_tau): strength=1 reproduces the staged grid
    exactly (entry chunks are pure noise), and as strength approaches 0 the
    buffer approaches the input frames untouched.
    """
    if not 0.0 < strength <= 1.0:
        raise ValueError(f"strength must lie in (0, 1], got {strength}")
    B = scheme.buffer_size
    video = np.asarray(video, dtype=np.float64)
    if video.shape[0] < B:
        raise ValueError(f"need at least {B} input frames, got {video.shape[0]}")
    clip = video[:B]
    tau0 = staged_taus(scheme, 0, gamma)
    tau_eff = 1.0 - strength * (1.0 - tau0)
    noise = rng.standard_normal(clip.shape)
    frames = flowcore.buffered_interpolate(clip, noise, tau_eff, sigma_min=sigma_min)
    buf = StreamBuffer(frames=frames, tau=tau0, scheme=scheme, m=0, cond=cond, gamma=gamma)
    check_buffer(buf)
    return buf


Schedule = Sequence[Tuple[int, int]]


def _normalize_schedule(schedule) -> List[Tuple[int, int]]:
    if isinstance(schedule, int):
        schedule = [(0, schedule)]
    entries = [(int(a), int(b)) for a, b in schedule]
    if not entries or entries[0][0] != 0:
        raise ValueError("prompt schedule must start with an entry for frame 0")
    starts = [a for a, _ in entries]
    if any(b <= a for a, b in zip(starts, starts[1:])):
        raise ValueError("schedule start indices must be strictly increasing")
    return entries


class StreamSession:
    """Owns one stream: buffer, rng, counters, and the prompt schedule.

    step() performs one micro step and returns a ChunkOut when a round
    completes. Condition switches from the schedule take effect at the
    first micro step at or after their start index; switches injected via
    set_condition take effect at the next micro step.
    """

    def __init__(
        self,
        velocity_fn: VelocityFn,
        scheme: PartitionScheme,
        frame_shape: Tuple[int, ...] = (1, 16, 16),
        schedule: Schedule | int = 0,
        cfg_w: float = 1.0,
        seed: int = 0,
        gamma: Optional[Callable[[float], float]] = None,
        null_cond: int = 0,
        buffer: Optional[StreamBuffer] = None,
    ):
        self.scheme = scheme
        self.cfg_w = float(cfg_w)
        self.null_cond = null_cond
        self.rng = np.random.default_rng(seed)
        self.forward_count = 0
        self.micro_steps_done = 0
        self.noise_pushed = 0
        self._raw_fn = velocity_fn
        self._pending = deque(_normalize_schedule(schedule))
        cond0 = self._pending.popleft()[1]

        if buffer is not None:
            if buffer.scheme != scheme:
                raise ValueError("provided buffer was staged for a different scheme")
            self.buf = buffer
            self.buf.cond = cond0
        else:
            self.buf = init_from_t2v_cache(
                self._counted, scheme, frame_shape, cond0, self.rng,
                cfg_w=self.cfg_w, null_cond=null_cond, gamma=gamma,
            )

    def _counted(self, x, tau, cond, frame_indices=None):
        self.forward_count += 1
        return self._raw_fn(x, tau, cond, frame_indices)

    def _apply_schedule(self) -> None:
        while self._pending and self._pending[0][0] <= self.buf.frames_emitted:
            self.buf.cond = self._pending.popleft()[1]

    def set_condition(self, cond: int) -> Tuple[int, int]:
        """Switch the active condition now; the next micro step uses it.
        Returns (micro_step, frames_emitted) at application time."""
        self.buf.cond = int(cond)
        return self.micro_steps_done, self.buf.frames_emitted

    def micro_step(self) -> None:
        self._apply_schedule()
        self.buf = denoise_micro_step(self.buf, self._counted, self.cfg_w, self.null_cond)
        self.micro_steps_done += 1

    def step(self) -> Optional[ChunkOut]:
        self.micro_step()
        if self.buf.m == self.scheme.s:
            chunk, self.buf = advance(self.buf, self.rng)
            self.noise_pushed += self.scheme.c
            return chunk
        return None

    def status(self) -> dict:
        return {
            "tau": [float(t) for t in self.buf.tau],
            "micro_counter": self.buf.m,
            "micro_step": self.micro_steps_done,
            "frames_emitted": self.buf.frames_emitted,
            "active_class": self.buf.cond,
            "forward_count": self.forward_count,
        }


def stream_frames(session: StreamSession, n_frames: int) -> Iterator[np.ndarray]:
    """Yield exactly n_frames single frames [C, H, W] in stream order."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    emitted = 0
    while emitted < n_frames:
        chunk = session.step()
        if chunk is None:
            continue
        for frame in chunk.frames:
            yield frame
            emitted += 1
            if emitted == n_frames:
                return


def run_stream(
    velocity_fn: VelocityFn,
    scheme: PartitionScheme,
    schedule: Schedule | int,
    n_frames: int,
    cfg_w: float = 1.0,
    seed: int = 0,
    frame_shape: Tuple[int, ...] = (1, 16, 16),
    gamma: Optional[Callable[[float], float]] = None,
) -> Iterator[np.ndarray]:
    """Cold-start a session and yield exactly n_frames frames."""
    session = StreamSession(
        velocity_fn, scheme, frame_shape=frame_shape, schedule=schedule,
        cfg_w=cfg_w, seed=seed, gamma=gamma,
    )
    return stream_frames(session, n_frames)


def chunk_extension_mode(
    velocity_fn: VelocityFn,
    buffer_size: int,
    total_steps: int,
    cond: int,
    ref_count: int,
    n_extensions: int,
    cfg_w: float = 1.0,
    seed: int = 0,
    frame_shape: Tuple[int, ...] = (1, 16, 16),
) -> np.ndarray:
    """Autoregressive extension: one chunk per round, conditioned on
    reference frames. Returns (1 + n_extensions) * (B - K) frames."""
    if not 1 <= ref_count < buffer_size:
        raise ValueError(f"reference count must lie in [1, {buffer_size - 1}]")
    if n_extensions < 0:
        raise ValueError("extension count must be non-negative")
    scheme = PartitionScheme(K=ref_count, N=1, c=buffer_size - ref_count, s=total_steps)
    session = StreamSession(
        velocity_fn, scheme, frame_shape=frame_shape, schedule=cond, cfg_w=cfg_w, seed=seed
    )
    rounds = 1 + n_extensions
    return np.stack(list(stream_frames(session, rounds * scheme.c)))


def write_stream_dump(
    frames: Iterable[np.ndarray],
    path,
    manifest: dict,
    stream_id: int = 0,
    start_index: int = 0,
) -> dict:
    """Write frames as concatenated binary frame messages plus a JSON
    sidecar manifest (<path>.json) recording how to regenerate the stream.
    Returns the enriched manifest."""
    path = Path(path)
    encoder = protocol.FrameEncoder(stream_id)
    height = width = None
    with open(path, "wb") as f:
        index = start_index
        for frame in frames:
            f.write(encoder.encode(frame, index))
            arr = np.asarray(frame)
            height, width = arr.shape[-2], arr.shape[-1]
            index += 1
    manifest = dict(manifest)
    manifest.update(
        {
            "frames": encoder.encoded,
            "clamped_pixels": encoder.clamped,
            "stream_id": stream_id,
            "start_index": start_index,
            "width": width,
            "height": height,
        }
    )
    with open(path.with_name(path.name + ".json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def read_stream_dump(path) -> Tuple[np.ndarray, np.ndarray, dict]:
    """Read a dump back: (frames [F, 1, H, W] floats, frame indices,
    manifest dict)."""
    path = Path(path)
    data = path.read_bytes()
    frames = []
    indices = []
    for msg in protocol.read_frame_stream(data):
        frames.append(msg.to_array())
        indices.append(msg.frame_index)
    manifest_path = path.with_name(path.name + ".json")
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    return np.stack(frames), np.array(indices, dtype=np.int64), manifest
