"""Step-count distillation for the streaming denoiser.

A teacher that spends s micro steps per chunk (and optionally a second
guidance forward per step) is compressed into a student that spends one.
The student learns the teacher's round endpoint: from a buffer state at
a round boundary, one student Euler step of size 1/N must land where the
teacher's s small steps land. Guidance is folded in by rolling the
teacher under its deployment weight, so the student streams at cfg 1.

Training states come from two sources: round boundaries of live staged
streams, and snapshots of a plain uniform trajectory. The second kind is
what the student's own warm-up pass sees, so it cannot be skipped.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .model import TimeVaryingDiT, VelocityAdapter, clone_model, parameter_hash
from .partition import PartitionScheme
from .streamer import StreamBuffer, StreamSession, denoise_micro_step
from .trainer import masked_mse

VelocityFn = Callable[..., np.ndarray]


@dataclass
class DistillConfig:
    iterations: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    cfg_w: float = 2.0
    uniform_fraction: float = 0.25
    rounds_per_cond: int = 8
    seed: int = 0
    log_every: int = 25

    def __post_init__(self):
        if not 0.0 <= self.uniform_fraction <= 1.0:
            raise ValueError("uniform_fraction must be in [0, 1]")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")


@dataclass
class BufferState:
    """One training state plus the teacher's endpoint for its round."""

    frames: np.ndarray          # [B, C, H, W] at a round boundary
    tau: np.ndarray             # [B]
    cond: int
    kind: str                   # "staged" or "uniform"
    scheme: PartitionScheme     # scheme the state lives on
    m: int                      # micro counter within that scheme
    frames_emitted: int = 0
    endpoint: Optional[np.ndarray] = None


def student_scheme(scheme: PartitionScheme) -> PartitionScheme:
    """Fold the micro steps: same partition, one step per round."""
    return PartitionScheme(K=scheme.K, N=scheme.N, c=scheme.c, s=1)


def nfe_per_chunk(scheme: PartitionScheme, cfg_w: float) -> int:
    """Model forwards spent per emitted chunk in steady state."""
    return scheme.s * (2 if cfg_w != 1.0 else 1)


def nfe_ratio(
    teacher: PartitionScheme, teacher_cfg_w: float, student_cfg_w: float = 1.0
) -> Fraction:
    return Fraction(
        nfe_per_chunk(student_scheme(teacher), student_cfg_w),
        nfe_per_chunk(teacher, teacher_cfg_w),
    )


def teacher_endpoint(
    state: BufferState,
    velocity_fn: VelocityFn,
    s: int,
    cfg_w: float = 1.0,
    null_cond: int = 0,
) -> np.ndarray:
    """Roll the teacher s micro steps from a round boundary."""
    buf = StreamBuffer(
        frames=state.frames.copy(),
        tau=state.tau.copy(),
        scheme=state.scheme,
        m=state.m,
        cond=state.cond,
        frames_emitted=state.frames_emitted,
    )
    for _ in range(s):
        buf = denoise_micro_step(buf, velocity_fn, cfg_w=cfg_w, null_cond=null_cond)
    return buf.frames


def harvest_states(
    velocity_fn: VelocityFn,
    scheme: PartitionScheme,
    conds: Sequence[int],
    cfg: DistillConfig,
    frame_shape: Tuple[int, ...] = (1, 16, 16),
) -> List[BufferState]:
    """Collect round-boundary states and their teacher endpoints.

    Staged states are the live buffers of a streaming run right after
    each advance; uniform states are the k/N levels of a single flat
    trajectory per condition, matching what warm-up later replays.
    """
    rng = np.random.default_rng(cfg.seed)
    states: List[BufferState] = []
    for cond in conds:
        session = StreamSession(
            velocity_fn, scheme, frame_shape, schedule=int(cond),
            cfg_w=cfg.cfg_w, seed=int(rng.integers(2**31)),
        )
        for _ in range(cfg.rounds_per_cond):
            states.append(
                BufferState(
                    frames=session.buf.frames.copy(),
                    tau=session.buf.tau.copy(),
                    cond=cond,
                    kind="staged",
                    scheme=scheme,
                    m=0,
                    frames_emitted=session.buf.frames_emitted,
                )
            )
            for _ in range(scheme.s):
                session.step()

    B, T = scheme.buffer_size, scheme.steps_per_frame
    flat = PartitionScheme(K=0, N=1, c=B, s=T)
    for cond in conds:
        session = StreamSession(
            velocity_fn, flat, frame_shape, schedule=int(cond),
            cfg_w=cfg.cfg_w, seed=int(rng.integers(2**31)),
        )
        for _ in range(scheme.N):
            states.append(
                BufferState(
                    frames=session.buf.frames.copy(),
                    tau=session.buf.tau.copy(),
                    cond=cond,
                    kind="uniform",
                    scheme=flat,
                    m=session.buf.m,
                )
            )
            for _ in range(scheme.s):
                session.micro_step()

    for st in states:
        st.endpoint = teacher_endpoint(st, velocity_fn, scheme.s, cfg.cfg_w)
    return states


@dataclass
class DistillResult:
    iterations: int
    initial_loss: float
    final_loss: float
    n_staged: int
    n_uniform: int
    history: List[dict] = field(default_factory=list)


def _state_batch(states, idx, n_rounds, device):
    picks = [states[i] for i in idx]
    x = torch.from_numpy(np.stack([s.frames for s in picks])).float().to(device)
    tau = torch.from_numpy(np.stack([s.tau for s in picks])).float().to(device)
    end = torch.from_numpy(np.stack([s.endpoint for s in picks])).float().to(device)
    cond = torch.tensor([s.cond for s in picks], dtype=torch.long, device=device)
    moving = tau < 1.0
    dtau = moving.float() / n_rounds
    return x, tau, end, cond, moving, dtau


def _distill_loss(student, x, tau, end, cond, moving, dtau):
    u = student(x, tau, cond)
    x_end = x + u * dtau.reshape(*dtau.shape, 1, 1, 1)
    return masked_mse(x_end, end, moving)


def distill(
    student: torch.nn.Module,
    states: Sequence[BufferState],
    scheme: PartitionScheme,
    cfg: DistillConfig,
    device: str = "cpu",
) -> DistillResult:
    """Fit the student's one-step endpoint to precomputed teacher endpoints."""
    states = list(states)
    if not states:
        raise ValueError("no training states")
    if any(s.endpoint is None for s in states):
        raise ValueError("states must carry teacher endpoints")
    staged = [i for i, s in enumerate(states) if s.kind == "staged"]
    uniform = [i for i, s in enumerate(states) if s.kind != "staged"]
    rng = np.random.default_rng(cfg.seed)
    params = list(student.parameters())
    if cfg.iterations > 0 and not params:
        raise ValueError("student has no trainable parameters")
    opt = torch.optim.Adam(params, lr=cfg.lr) if params else None
    student.to(device)

    def draw_indices():
        idx = []
        for _ in range(cfg.batch_size):
            pool = uniform if (uniform and (not staged or rng.uniform() < cfg.uniform_fraction)) else staged
            idx.append(pool[rng.integers(len(pool))])
        return idx

    with torch.no_grad():
        x, tau, end, cond, moving, dtau = _state_batch(
            states, list(range(len(states))), scheme.N, device
        )
        initial = float(_distill_loss(student, x, tau, end, cond, moving, dtau))

    history: List[dict] = []
    loss_val = initial
    student.train()
    for it in range(cfg.iterations):
        idx = draw_indices()
        x, tau, end, cond, moving, dtau = _state_batch(states, idx, scheme.N, device)
        loss = _distill_loss(student, x, tau, end, cond, moving, dtau)
        loss_val = float(loss.detach())
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            history.append({"iteration": it, "loss": loss_val})
    student.eval()
    return DistillResult(
        iterations=cfg.iterations,
        initial_loss=initial,
        final_loss=loss_val,
        n_staged=len(staged),
        n_uniform=len(uniform),
        history=history,
    )


def distill_model(
    teacher: TimeVaryingDiT,
    scheme: PartitionScheme,
    conds: Sequence[int],
    cfg: DistillConfig,
    frame_shape: Tuple[int, ...] = (1, 16, 16),
    device: str = "cpu",
) -> Tuple[TimeVaryingDiT, DistillResult]:
    """Teacher-model front end: harvest, clone, fit, leave teacher untouched."""
    before = parameter_hash(teacher)
    teacher_fn = VelocityAdapter(teacher)
    states = harvest_states(teacher_fn, scheme, conds, cfg, frame_shape)
    student = clone_model(teacher)
    result = distill(student, states, scheme, cfg, device)
    if parameter_hash(teacher) != before:
        raise RuntimeError("teacher parameters changed during distillation")
    return student, result


def student_stream(
    student_fn: VelocityFn,
    scheme: PartitionScheme,
    schedule,
    n_frames: int,
    seed: int = 0,
    frame_shape: Tuple[int, ...] = (1, 16, 16),
):
    """Stream with the folded scheme at guidance 1 (already baked in)."""
    from .streamer import run_stream

    return run_stream(
        student_fn, student_scheme(scheme), schedule, n_frames,
        cfg_w=1.0, seed=seed, frame_shape=frame_shape,
    )
