"""Time-varying denoising transformer over 3D video tokens.

Frames are patchified into a [F, H_tok, W_tok] token grid. Each transformer
block applies window-partitioned self-attention (alternating between regular
and cyclically shifted partitions across layers) and a pointwise MLP, both
modulated per frame by adaLN vectors derived from that frame's noise level
and the clip's condition id. Gates and the output head start at zero, so an
untrained model is exactly the zero velocity field.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from fractions import Fraction


@dataclass
class ModelConfig:
    frames: int = 16
    channels: int = 1
    height: int = 16
    width: int = 16
    patch: Tuple[int, int] = (4, 4)
    dim: int = 96
    layers: int = 4
    heads: int = 4
    # Full attention over the default 16x(4x4) token grid; the canvas is
    # small enough that windowing only pays off on larger worlds.
    window: Tuple[int, int, int] = (16, 4, 4)
    vocab: int = 9  # condition ids, id 0 = null
    sigma_min: float = 1e-3
    freq_dim: int = 64
    mlp_ratio: float = 4.0
    # Per-frame positional rows; turn off for frame-permutation equivariance.
    frame_pos: bool = True

    def __post_init__(self):
        ph, pw = self.patch
        if self.height % ph or self.width % pw:
            raise ValueError(f"patch {self.patch} must divide frame size {self.height}x{self.width}")
        ft, ht, wt = self.token_grid
        fw, hw, ww = self.window
        if fw < 1 or fw > ft:
            raise ValueError(f"temporal window {fw} must lie in [1, {ft}]")
        if ht % hw or wt % ww:
            raise ValueError(f"spatial window {(hw, ww)} must divide token grid {(ht, wt)}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.freq_dim % 2:
            raise ValueError("freq_dim must be even")
        if self.vocab < 1:
            raise ValueError("need at least the null condition id")

    @property
    def token_grid(self) -> Tuple[int, int, int]:
        return self.frames, self.height // self.patch[0], self.width // self.patch[1]


def sinusoidal_features(tau: torch.Tensor, dim: int, max_scale: float = 1000.0) -> torch.Tensor:
    """Interleaved [sin, cos, sin, cos, ...] features of a scalar in [0, 1].

    tau=0 maps to the alternating [0, 1, 0, 1, ...] pattern. Frequencies
    fall geometrically from max_scale to max_scale/10^4.
    """
    if dim % 2:
        raise ValueError("feature dim must be even")
    half = dim // 2
    exponents = torch.arange(half, dtype=tau.dtype, device=tau.device) / max(half - 1, 1)
    freqs = max_scale * torch.pow(torch.tensor(1e-4, dtype=tau.dtype, device=tau.device), exponents)
    angles = tau.unsqueeze(-1) * freqs
    out = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return out.flatten(-2)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale) + shift


def effective_window_shift(grid: Tuple[int, int, int], window: Tuple[int, int, int]) -> Tuple[int, int, int]:
    """Cyclic rotation applied before partitioning in shifted layers: half
    the window size on each axis."""
    return tuple(w // 2 for w in window)


class WindowAttention(nn.Module):
    """Multi-head self-attention partitioned into 3D windows.

    Windows tile the (frame, height, width) token grid; the temporal window
    may leave a ragged last group when it does not divide the frame count.
    Shifted mode cyclically rotates the grid by half a window per axis
    before partitioning and rotates back after, so tokens at axis ends share
    windows with tokens at the beginnings.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def _attend(self, tokens: torch.Tensor) -> torch.Tensor:
        # tokens: [n_windows, L, d]
        n, L, d = tokens.shape
        qkv = self.qkv(tokens).reshape(n, L, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, L, d)
        return out

    def forward(self, x: torch.Tensor, window: Tuple[int, int, int], shifted: bool) -> torch.Tensor:
        # x: [batch, F, H, W, d]
        b, F, H, W, d = x.shape
        fw, hw, ww = window
        if shifted:
            sf, sh, sw = effective_window_shift((F, H, W), window)
            x = torch.roll(x, shifts=(-sf, -sh, -sw), dims=(1, 2, 3))
        out = torch.empty_like(x)
        hn, wn = H // hw, W // ww
        for f0 in range(0, F, fw):
            seg = x[:, f0 : f0 + fw]
            fg = seg.shape[1]
            seg = seg.reshape(b, fg, hn, hw, wn, ww, d).permute(0, 2, 4, 1, 3, 5, 6)
            tokens = seg.reshape(b * hn * wn, fg * hw * ww, d)
            att = self._attend(tokens)
            att = att.reshape(b, hn, wn, fg, hw, ww, d).permute(0, 3, 1, 4, 2, 5, 6)
            out[:, f0 : f0 + fw] = att.reshape(b, fg, H, W, d)
        if shifted:
            out = torch.roll(out, shifts=(sf, sh, sw), dims=(1, 2, 3))
        return self.proj(out)


def window_comask(
    grid: Tuple[int, int, int], window: Tuple[int, int, int], shifted: bool
) -> np.ndarray:
    """Boolean co-attention mask [n, n] over flattened grid tokens.

    mask[i, j] is True when tokens i and j land in the same window under the
    given partition, which makes windowed attention equal full attention
    under this mask. Serves as the independent oracle for WindowAttention.
    """
    F, H, W = grid
    fw, hw, ww = window
    sf, sh, sw = effective_window_shift(grid, window) if shifted else (0, 0, 0)
    ids = np.empty((F, H, W), dtype=np.int64)
    for f in range(F):
        for h in range(H):
            for w in range(W):
                rf = (f - sf) % F
                rh = (h - sh) % H
                rw = (w - sw) % W
                ids[f, h, w] = (rf // fw) * 10_000 + (rh // hw) * 100 + (rw // ww)
    flat = ids.reshape(-1)
    return flat[:, None] == flat[None, :]


@dataclass(frozen=True)
class AttentionFlops:
    """Multiply-add counts for attention scores + value mixing, per layer."""

    windowed: int
    full: int

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.windowed, self.full)


def count_attention_flops(config: ModelConfig) -> AttentionFlops:
    """Analytic per-layer attention multiply-adds, windowed vs full.

    For evenly divided grids the ratio reduces to window volume over grid
    volume; ragged temporal groups are counted exactly.
    """
    ft, ht, wt = config.token_grid
    fw, hw, ww = config.window
    d = config.dim
    n = ft * ht * wt
    full = 2 * n * n * d
    windows_per_frame_group = (ht // hw) * (wt // ww)
    windowed = 0
    f = 0
    while f < ft:
        fg = min(fw, ft - f)
        L = fg * hw * ww
        windowed += windows_per_frame_group * 2 * L * L * d
        f += fg
    return AttentionFlops(windowed=windowed, full=full)


class Block(nn.Module):
    """Transformer block with per-frame adaLN modulation and zero-init gates."""

    def __init__(self, cfg: ModelConfig, shifted: bool):
        super().__init__()
        self.cfg = cfg
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(cfg.dim, elementwise_affine=False, eps=1e-6)
        self.attn = WindowAttention(cfg.dim, cfg.heads)
        self.norm2 = nn.LayerNorm(cfg.dim, elementwise_affine=False, eps=1e-6)
        hidden = int(cfg.dim * cfg.mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.dim, hidden),
            nn.GELU(approximate="tanh"),
            nn.Linear(hidden, cfg.dim),
        )
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(cfg.dim, 6 * cfg.dim))
        # Gates start closed so every block begins as the identity, but the
        # shift/scale rows keep their default init: noise level and condition
        # must shape the features from the first optimizer step instead of
        # waiting for the whole modulation path to wake from zero.
        nn.init.zeros_(self.adaln[1].bias)
        with torch.no_grad():
            d = cfg.dim
            self.adaln[1].weight[2 * d : 3 * d].zero_()
            self.adaln[1].weight[5 * d : 6 * d].zero_()

    def forward(self, x: torch.Tensor, mod: torch.Tensor) -> torch.Tensor:
        # x: [b, F, H, W, d]; mod: [b, F, d] per-frame modulation input
        m = self.adaln(mod)  # [b, F, 6d]
        shift1, scale1, gate1, shift2, scale2, gate2 = (
            part.unsqueeze(2).unsqueeze(2) for part in m.chunk(6, dim=-1)
        )
        h = modulate(self.norm1(x), shift1, scale1)
        x = x + gate1 * self.attn(h, self.cfg.window, self.shifted)
        h = modulate(self.norm2(x), shift2, scale2)
        x = x + gate2 * self.mlp(h)
        return x


class FinalLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm = nn.LayerNorm(cfg.dim, elementwise_affine=False, eps=1e-6)
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(cfg.dim, 2 * cfg.dim))
        ph, pw = cfg.patch
        self.head = nn.Linear(cfg.dim, ph * pw * cfg.channels)
        # The head is zero so an untrained model outputs exactly zero; the
        # modulation keeps its default init so the head's first gradient
        # already sees noise-level- and condition-shaped features.
        nn.init.zeros_(self.adaln[1].bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor, mod: torch.Tensor) -> torch.Tensor:
        shift, scale = (p.unsqueeze(2).unsqueeze(2) for p in self.adaln(mod).chunk(2, dim=-1))
        return self.head(modulate(self.norm(x), shift, scale))


class TimeVaryingDiT(nn.Module):
    """Velocity model u(x, tau, cond) over clips with per-frame noise levels."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ph, pw = cfg.patch
        ft, ht, wt = cfg.token_grid
        self.patch_embed = nn.Conv2d(cfg.channels, cfg.dim, kernel_size=(ph, pw), stride=(ph, pw))
        pos_frames = ft if cfg.frame_pos else 1
        self.pos_embed = nn.Parameter(torch.zeros(1, pos_frames, ht, wt, cfg.dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.cond_embed = nn.Embedding(cfg.vocab, cfg.dim)
        nn.init.normal_(self.cond_embed.weight, std=0.02)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.freq_dim, cfg.dim),
            nn.SiLU(),
            nn.Linear(cfg.dim, cfg.dim),
        )
        self.blocks = nn.ModuleList(
            Block(cfg, shifted=(i % 2 == 1)) for i in range(cfg.layers)
        )
        self.final = FinalLayer(cfg)

    def frame_time_embedding(self, tau: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """Per-frame modulation vectors [b, F, d] from noise levels and the
        condition id; equal (tau, cond) pairs get identical vectors."""
        if float(tau.min()) < 0.0 or float(tau.max()) > 1.0:
            raise ValueError("tau must lie in [0, 1]")
        feats = sinusoidal_features(tau, self.cfg.freq_dim)
        return self.time_mlp(feats) + self.cond_embed(cond).unsqueeze(1)

    def _check_cond(self, cond: torch.Tensor) -> None:
        if int(cond.min()) < 0 or int(cond.max()) >= self.cfg.vocab:
            raise ValueError(f"condition ids must lie in [0, {self.cfg.vocab})")

    def forward(self, x: torch.Tensor, tau, cond) -> torch.Tensor:
        cfg = self.cfg
        squeeze = x.ndim == 4
        if squeeze:
            x = x.unsqueeze(0)
        b = x.shape[0]
        if x.shape[1:] != (cfg.frames, cfg.channels, cfg.height, cfg.width):
            raise ValueError(
                f"expected clip shape [{cfg.frames}, {cfg.channels}, {cfg.height}, {cfg.width}], "
                f"got {tuple(x.shape[1:])}"
            )
        tau = torch.as_tensor(tau, dtype=x.dtype, device=x.device)
        if tau.ndim == 1:
            tau = tau.unsqueeze(0).expand(b, -1)
        if tau.shape != (b, cfg.frames):
            raise ValueError(f"tau must have shape [{b}, {cfg.frames}], got {tuple(tau.shape)}")
        if isinstance(cond, int):
            cond = torch.full((b,), cond, dtype=torch.long, device=x.device)
        else:
            cond = torch.as_tensor(cond, dtype=torch.long, device=x.device).reshape(b)
        self._check_cond(cond)

        ft, ht, wt = cfg.token_grid
        tokens = self.patch_embed(x.reshape(b * ft, cfg.channels, cfg.height, cfg.width))
        tokens = tokens.reshape(b, ft, cfg.dim, ht, wt).permute(0, 1, 3, 4, 2)
        tokens = tokens + self.pos_embed
        mod = self.frame_time_embedding(tau, cond)
        for block in self.blocks:
            tokens = block(tokens, mod)
        out = self.final(tokens, mod)  # [b, F, ht, wt, ph*pw*C]
        ph, pw = cfg.patch
        out = out.reshape(b, ft, ht, wt, ph, pw, cfg.channels)
        out = out.permute(0, 1, 6, 2, 4, 3, 5).reshape(b, ft, cfg.channels, cfg.height, cfg.width)
        return out.squeeze(0) if squeeze else out


def build_model(cfg: ModelConfig, seed: int = 0) -> TimeVaryingDiT:
    torch.manual_seed(seed)
    return TimeVaryingDiT(cfg)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_hash(model: nn.Module) -> str:
    """sha256 over sorted (name, shape, bytes) of the state dict; changes
    iff any parameter value changes."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        arr = tensor.detach().cpu().contiguous().numpy()
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


CHECKPOINT_VERSION = 1


def save_checkpoint(model: TimeVaryingDiT, path, meta: Optional[dict] = None) -> None:
    """Self-describing checkpoint: config record, parameters, metadata."""
    record = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "meta": dict(meta or {}),
    }
    torch.save(record, path)


def load_checkpoint(path) -> Tuple[TimeVaryingDiT, dict]:
    record = torch.load(path, map_location="cpu", weights_only=False)
    if record.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {record.get('version')!r}")
    raw = dict(record["config"])
    raw["patch"] = tuple(raw["patch"])
    raw["window"] = tuple(raw["window"])
    cfg = ModelConfig(**raw)
    model = TimeVaryingDiT(cfg)
    model.load_state_dict(record["state_dict"])
    return model, record["meta"]


def clone_model(model: TimeVaryingDiT) -> TimeVaryingDiT:
    copy = TimeVaryingDiT(model.cfg)
    copy.load_state_dict({k: v.clone() for k, v in model.state_dict().items()})
    return copy


class VelocityAdapter:
    """Bridges a torch velocity model to the numpy streaming engine.

    Callable as (x, tau, cond, frame_indices) on numpy arrays; evaluates the
    model without gradients and returns float64 velocity.
    """

    def __init__(self, module: TimeVaryingDiT):
        self.module = module

    def __call__(self, x, tau, cond=0, frame_indices=None):
        self.module.eval()
        with torch.no_grad():
            xt = torch.as_tensor(np.asarray(x), dtype=torch.float32)
            tt = torch.as_tensor(np.asarray(tau), dtype=torch.float32)
            out = self.module(xt, tt, int(cond))
        return out.numpy().astype(np.float64)
