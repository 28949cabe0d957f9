"""Flow-matching math kernel.

Pure functions for the optimal-transport interpolation path, its target
velocity, Euler integration, and the buffered (per-frame noise level)
generalizations of all three. Everything here works on either numpy arrays
or torch tensors; the caller's array library is preserved in the output.

Frame-first convention: a clip is an array of shape [F, C, H, W] and
per-frame quantities (tau, dtau, loss masks) have length F along axis 0.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


def _is_numpy(x) -> bool:
    return isinstance(x, np.ndarray)


def _frame_coeffs(values, like, name: str):
    """Cast a per-frame coefficient vector to `like`'s library and dtype,
    shaped [F, 1, ..., 1] for broadcasting over a frame-first array."""
    n = like.shape[0]
    if _is_numpy(like):
        arr = np.asarray(values, dtype=like.dtype)
    else:
        import torch

        arr = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if arr.ndim != 1 or arr.shape[0] != n:
        raise ValueError(f"{name} must be a vector of length {n}, got shape {tuple(arr.shape)}")
    return arr.reshape((n,) + (1,) * (like.ndim - 1))


def _check_same_shape(a, b, name_a: str, name_b: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{name_a} shape {tuple(a.shape)} != {name_b} shape {tuple(b.shape)}")


def _check_unit_range(values, name: str) -> None:
    lo = float(values.min())
    hi = float(values.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got range [{lo}, {hi}]")


def ot_interpolate(x1, x0, t: float, sigma_min: float = 1e-3):
    """Point on the straight interpolation path from noise x0 to data x1.

    At t=0 this is exactly x0; at t=1 it is x1 + sigma_min * x0, i.e. the
    path terminates within a sigma_min-ball of the data.
    """
    _check_same_shape(x1, x0, "x1", "x0")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if not 0.0 <= sigma_min < 1.0:
        raise ValueError(f"sigma_min must lie in [0, 1), got {sigma_min}")
    return t * x1 + (1.0 - (1.0 - sigma_min) * t) * x0


def target_velocity(x1, x0, sigma_min: float = 1e-3):
    """Velocity of the interpolation path; constant in t for straight paths."""
    _check_same_shape(x1, x0, "x1", "x0")
    if not 0.0 <= sigma_min < 1.0:
        raise ValueError(f"sigma_min must lie in [0, 1), got {sigma_min}")
    return x1 - (1.0 - sigma_min) * x0


def euler_step(x, u, dt: float):
    """One explicit Euler step x + u * dt."""
    _check_same_shape(x, u, "x", "u")
    if dt < 0.0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    return x + u * dt


def buffered_interpolate(x1, x0, tau, sigma_min: float = 1e-3):
    """Interpolation with one shared noise draw and a per-frame level tau.

    tau has one entry per frame; frame j sits at tau[j] * x1[j] +
    (1 - (1 - sigma_min) * tau[j]) * x0[j]. With a constant tau vector this
    reduces bit-for-bit to ot_interpolate at that scalar.
    """
    _check_same_shape(x1, x0, "x1", "x0")
    if not 0.0 <= sigma_min < 1.0:
        raise ValueError(f"sigma_min must lie in [0, 1), got {sigma_min}")
    tb = _frame_coeffs(tau, x1, "tau")
    _check_unit_range(tb, "tau")
    return tb * x1 + (1.0 - (1.0 - sigma_min) * tb) * x0


def buffered_euler_step(x, u, dtau):
    """Euler step with a per-frame step size; frames with dtau=0 are untouched."""
    _check_same_shape(x, u, "x", "u")
    db = _frame_coeffs(dtau, x, "dtau")
    if float(db.min()) < 0.0:
        raise ValueError("dtau entries must be non-negative")
    return x + u * db


def fm_loss(pred, target, mask: Optional[Sequence[bool]] = None):
    """Mean squared error between predicted and target velocity.

    mask, if given, selects frames to include (True = include). An all-False
    mask is an error rather than a silent zero.
    """
    _check_same_shape(pred, target, "pred", "target")
    d = pred - target
    if mask is not None:
        idx = [i for i, keep in enumerate(mask) if keep]
        if len(mask) != d.shape[0]:
            raise ValueError(f"mask length {len(mask)} != frame count {d.shape[0]}")
        if not idx:
            raise ValueError("loss mask excludes every frame")
        d = d[idx]
    return (d * d).mean()


def cfg_combine(u_cond, u_uncond, w: float):
    """Classifier-free guidance: u_uncond + w * (u_cond - u_uncond).

    w=1 returns the conditional velocity unchanged; w=0 the unconditional.
    """
    _check_same_shape(u_cond, u_uncond, "u_cond", "u_uncond")
    if w < 0.0:
        raise ValueError(f"guidance weight must be non-negative, got {w}")
    if w == 1.0:
        return u_cond
    if w == 0.0:
        return u_uncond
    return u_uncond + w * (u_cond - u_uncond)


def analytic_velocity(x1, x, tau, eps: float = 1e-9):
    """Exact velocity field whose flow carries any state to x1 at tau=1.

    Per frame: (x1 - x) / (1 - tau). Frames at tau >= 1 - eps are already
    clean and get zero velocity. One Euler step of size (1 - tau) along this
    field lands exactly on x1, so the final step of any schedule that ends
    at tau=1 is exact regardless of earlier steps.
    """
    _check_same_shape(x1, x, "x1", "x")
    tb = _frame_coeffs(tau, x, "tau")
    _check_unit_range(tb, "tau")
    denom = 1.0 - tb
    active = denom > eps
    safe = denom * active + 1.0 * (~active)
    return ((x1 - x) / safe) * active


def make_target_oracle(x1) -> Callable:
    """Velocity callable that drives every state toward the fixed clip x1.

    Signature matches what the streaming engine calls: (x, tau, cond,
    frame_indices) -> velocity. Condition and frame indices are ignored.
    """

    def oracle(x, tau, cond=0, frame_indices=None):
        return analytic_velocity(x1, x, tau)

    return oracle


def make_conditional_oracle(targets: dict) -> Callable:
    """Velocity callable that drives toward targets[cond].

    targets maps condition ids to clips of the buffer's shape. Useful for
    checking that condition switches actually steer the stream.
    """

    def oracle(x, tau, cond, frame_indices=None):
        if cond not in targets:
            raise KeyError(f"no target clip for condition {cond}")
        return analytic_velocity(targets[cond], x, tau)

    return oracle
