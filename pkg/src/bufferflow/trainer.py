"""Training loop for buffered flow matching.

Each example noises a clean clip onto a partitioned buffer: per-frame
noise levels come from the scheme's segment sampler, a single shared
noise draw serves both the interpolation and the velocity target, and
reference frames (tau = 1) are masked out of the loss. Schemes can be
mixed so one model serves several chunk sizes at inference time.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import flowcore
from .model import TimeVaryingDiT, save_checkpoint
from .partition import PartitionScheme, sample_training_taus
from .toyworld import NULL_CLASS, ClipSampler

# dataset callable: rng -> (clip [B, C, H, W] float, class id)
Dataset = Callable[[np.random.Generator], Tuple[np.ndarray, int]]


class TrainingDiverged(RuntimeError):
    """Loss went non-finite or blew past the divergence guard."""


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.0
    cond_dropout: float = 0.1
    sigma_min: float = 1e-3
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0  # 0 = final checkpoint only
    divergence_factor: float = 50.0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError(f"cond_dropout must be in [0, 1), got {self.cond_dropout}")


@dataclass
class TrainingExample:
    x_t: np.ndarray    # [B, C, H, W] noised buffer
    tau: np.ndarray    # [B] per-frame noise levels
    target: np.ndarray  # [B, C, H, W] velocity target
    mask: np.ndarray   # [B] bool, True = frame contributes to the loss
    cond: int


def make_training_example(
    clip: np.ndarray,
    cond: int,
    scheme: PartitionScheme,
    rng: np.random.Generator,
    gamma: Optional[Callable[[float], float]] = None,
    sigma_min: float = 1e-3,
) -> TrainingExample:
    """Noise one clean clip onto a training buffer.

    The same x0 draw feeds the interpolation and the target, so the
    pair stays on the straight path regardless of the tau layout.
    """
    clip = np.asarray(clip, dtype=np.float64)
    if clip.shape[0] != scheme.buffer_size:
        raise ValueError(
            f"clip has {clip.shape[0]} frames, scheme buffer needs {scheme.buffer_size}"
        )
    tau = sample_training_taus(scheme, rng, gamma)
    x0 = rng.standard_normal(clip.shape)
    x_t = flowcore.buffered_interpolate(clip, x0, tau, sigma_min)
    target = flowcore.target_velocity(clip, x0, sigma_min)
    mask = tau < 1.0
    if scheme.K > 0:
        # reference frames carry the clean clip itself
        x_t[: scheme.K] = clip[: scheme.K]
    return TrainingExample(x_t, tau, target, mask, cond)


def mixed_scheme_sampler(
    schemes: Sequence[PartitionScheme],
    weights: Optional[Sequence[float]] = None,
) -> Callable[[np.random.Generator], PartitionScheme]:
    """Uniform (or weighted) draw over a scheme mixture.

    All schemes must share one buffer size so a single dataset serves
    every draw.
    """
    schemes = list(schemes)
    if not schemes:
        raise ValueError("need at least one scheme")
    sizes = {s.buffer_size for s in schemes}
    if len(sizes) != 1:
        raise ValueError(f"mixed schemes must share buffer_size, got {sorted(sizes)}")
    p = None
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(schemes),) or (w < 0).any() or w.sum() <= 0:
            raise ValueError("weights must be non-negative, one per scheme")
        p = w / w.sum()

    def sample(rng: np.random.Generator) -> PartitionScheme:
        return schemes[rng.choice(len(schemes), p=p)]

    return sample


def collate_batch(examples: Sequence[TrainingExample], device: str = "cpu"):
    """Stack examples into model-ready tensors."""
    x = torch.from_numpy(np.stack([e.x_t for e in examples])).float().to(device)
    tau = torch.from_numpy(np.stack([e.tau for e in examples])).float().to(device)
    target = torch.from_numpy(np.stack([e.target for e in examples])).float().to(device)
    mask = torch.from_numpy(np.stack([e.mask for e in examples])).to(device)
    cond = torch.tensor([e.cond for e in examples], dtype=torch.long, device=device)
    return x, tau, target, mask, cond


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """MSE over the frames mask selects, matching flowcore.fm_loss per clip."""
    if mask.dtype != torch.bool:
        mask = mask.bool()
    if not bool(mask.any()):
        raise ValueError("loss mask excludes every frame")
    d = (pred - target) ** 2
    per_frame = d.flatten(2).mean(dim=2)  # [b, F]
    return per_frame[mask].mean()


def sprite_dataset(n_frames: int) -> Dataset:
    """Clips from the bouncing-sprite world, one class label per clip."""
    sampler = ClipSampler(n_frames=n_frames)

    def draw(rng: np.random.Generator) -> Tuple[np.ndarray, int]:
        return sampler.sample(rng)

    return draw


@dataclass
class TrainResult:
    steps: int
    initial_loss: float
    final_loss: float
    history: List[dict] = field(default_factory=list)
    checkpoint_path: Optional[str] = None


def _scheme_tag(s: PartitionScheme) -> str:
    return f"{s.K},{s.N},{s.c},{s.s}"


def _draw_batch(dataset, scheme_sampler, cfg, rng, gamma):
    scheme = scheme_sampler(rng)
    examples = []
    for _ in range(cfg.batch_size):
        clip, cond = dataset(rng)
        if cfg.cond_dropout > 0 and rng.uniform() < cfg.cond_dropout:
            cond = NULL_CLASS
        examples.append(
            make_training_example(clip, cond, scheme, rng, gamma, cfg.sigma_min)
        )
    return scheme, examples


def evaluate_loss(
    model: TimeVaryingDiT,
    dataset: Dataset,
    schemes: Sequence[PartitionScheme],
    cfg: TrainConfig,
    n_batches: int = 4,
    gamma: Optional[Callable[[float], float]] = None,
    device: str = "cpu",
) -> float:
    """Average flow-matching loss without touching the parameters."""
    sampler = mixed_scheme_sampler(schemes)
    rng = np.random.default_rng(cfg.seed)
    model.eval()
    losses = []
    with torch.no_grad():
        for _ in range(n_batches):
            _, examples = _draw_batch(dataset, sampler, cfg, rng, gamma)
            x, tau, target, mask, cond = collate_batch(examples, device)
            pred = model(x, tau, cond)
            losses.append(float(masked_mse(pred, target, mask)))
    return float(np.mean(losses))


def train(
    model: TimeVaryingDiT,
    dataset: Dataset,
    schemes: Sequence[PartitionScheme],
    cfg: TrainConfig,
    gamma: Optional[Callable[[float], float]] = None,
    metrics_path=None,
    checkpoint_path=None,
    device: str = "cpu",
) -> TrainResult:
    """Adam loop over the scheme mixture.

    Writes one JSON line per logged step when metrics_path is given and
    aborts hard if the loss diverges instead of grinding on.
    """
    sampler = mixed_scheme_sampler(schemes)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(
        model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    model.to(device)

    initial = evaluate_loss(model, dataset, schemes, cfg, gamma=gamma, device=device)
    guard = cfg.divergence_factor * max(initial, 1e-8)
    history: List[dict] = []
    sink = open(metrics_path, "w") if metrics_path else None
    loss_val = initial
    try:
        model.train()
        for step in range(cfg.steps):
            scheme, examples = _draw_batch(dataset, sampler, cfg, rng, gamma)
            x, tau, target, mask, cond = collate_batch(examples, device)
            pred = model(x, tau, cond)
            loss = masked_mse(pred, target, mask)
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val) or loss_val > guard:
                raise TrainingDiverged(
                    f"loss {loss_val} at step {step} (initial {initial:.4g})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                row = {
                    "step": step,
                    "loss": loss_val,
                    "scheme": _scheme_tag(scheme),
                    "lr": cfg.lr,
                }
                history.append(row)
                if sink:
                    sink.write(json.dumps(row) + "\n")
                    sink.flush()
            if (
                checkpoint_path
                and cfg.checkpoint_every
                and step > 0
                and step % cfg.checkpoint_every == 0
            ):
                save_checkpoint(model, checkpoint_path, {"step": step, "loss": loss_val})
    finally:
        if sink:
            sink.close()

    saved = None
    if checkpoint_path:
        save_checkpoint(
            model, checkpoint_path, {"step": cfg.steps, "loss": loss_val}
        )
        saved = str(Path(checkpoint_path))
    model.eval()
    return TrainResult(
        steps=cfg.steps,
        initial_loss=initial,
        final_loss=loss_val,
        history=history,
        checkpoint_path=saved,
    )
