"""Math-kernel checks: frozen hand values, exact identities, and properties."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bufferflow import flowcore


def test_interpolate_hand_value():
    # 0.5 * 2 + (1 - 0.999 * 0.5) * 1 = 1.5005, worked out by hand
    x1 = np.array([2.0])
    x0 = np.array([1.0])
    out = flowcore.ot_interpolate(x1, x0, 0.5, sigma_min=1e-3)
    assert out[0] == pytest.approx(1.5005, abs=1e-12)


def test_interpolate_endpoints():
    rng = np.random.default_rng(0)
    x1 = rng.standard_normal((4, 1, 8, 8))
    x0 = rng.standard_normal((4, 1, 8, 8))
    assert np.array_equal(flowcore.ot_interpolate(x1, x0, 0.0), x0)
    end = flowcore.ot_interpolate(x1, x0, 1.0, sigma_min=1e-3)
    assert np.allclose(end, x1 + 1e-3 * x0)


def test_target_velocity_is_path_derivative():
    # The interpolation path is linear in t, so a finite difference across
    # any two times recovers the velocity exactly (up to float error).
    rng = np.random.default_rng(1)
    x1 = rng.standard_normal((2, 1, 4, 4))
    x0 = rng.standard_normal((2, 1, 4, 4))
    v = flowcore.target_velocity(x1, x0, sigma_min=1e-3)
    a = flowcore.ot_interpolate(x1, x0, 0.25, sigma_min=1e-3)
    b = flowcore.ot_interpolate(x1, x0, 0.75, sigma_min=1e-3)
    assert np.allclose((b - a) / 0.5, v, atol=1e-12)


def test_target_velocity_hand_value():
    v = flowcore.target_velocity(np.array([2.0]), np.array([1.0]), sigma_min=1e-3)
    assert v[0] == pytest.approx(1.001, abs=1e-12)


def test_euler_composition_telescopes():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 1, 4, 4))
    u = rng.standard_normal((3, 1, 4, 4))
    steps = 64
    y = x.copy()
    for _ in range(steps):
        y = flowcore.euler_step(y, u, 1.0 / steps)
    assert np.allclose(y, x + u, atol=1e-6)


def test_euler_rejects_negative_dt():
    x = np.zeros((1, 1, 2, 2))
    with pytest.raises(ValueError):
        flowcore.euler_step(x, x, -0.1)


def test_buffered_reduces_to_scalar_bitwise():
    # A constant tau vector must reproduce the scalar path bit for bit.
    rng = np.random.default_rng(3)
    x1 = rng.standard_normal((5, 1, 6, 6))
    x0 = rng.standard_normal((5, 1, 6, 6))
    for t in (0.0, 0.3, 0.7, 1.0):
        a = flowcore.ot_interpolate(x1, x0, t, sigma_min=1e-3)
        b = flowcore.buffered_interpolate(x1, x0, np.full(5, t), sigma_min=1e-3)
        assert np.array_equal(a, b)


def test_buffered_interpolate_per_frame():
    x1 = np.ones((3, 1, 2, 2))
    x0 = np.zeros((3, 1, 2, 2))
    out = flowcore.buffered_interpolate(x1, x0, [0.0, 0.5, 1.0], sigma_min=0.0)
    assert np.allclose(out[0], 0.0)
    assert np.allclose(out[1], 0.5)
    assert np.allclose(out[2], 1.0)


def test_buffered_euler_leaves_zero_dtau_frames_alone():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 1, 3, 3))
    u = rng.standard_normal((4, 1, 3, 3))
    out = flowcore.buffered_euler_step(x, u, [0.0, 0.1, 0.0, 0.2])
    assert np.array_equal(out[0], x[0])
    assert np.array_equal(out[2], x[2])
    assert np.allclose(out[1], x[1] + 0.1 * u[1])
    assert np.allclose(out[3], x[3] + 0.2 * u[3])


def test_buffered_shape_and_range_validation():
    x = np.zeros((3, 1, 2, 2))
    with pytest.raises(ValueError):
        flowcore.buffered_interpolate(x, x, [0.1, 0.2], sigma_min=0.0)
    with pytest.raises(ValueError):
        flowcore.buffered_interpolate(x, x, [0.1, 0.2, 1.5], sigma_min=0.0)
    with pytest.raises(ValueError):
        flowcore.buffered_euler_step(x, x, [0.1, -0.1, 0.0])


def test_fm_loss_hand_value():
    pred = np.array([[1.0], [2.0]])
    target = np.zeros((2, 1))
    assert flowcore.fm_loss(pred, target) == pytest.approx(2.5)


def test_fm_loss_mask_selects_frames():
    pred = np.array([[3.0], [1.0], [2.0]])
    target = np.zeros((3, 1))
    assert flowcore.fm_loss(pred, target, mask=[False, True, True]) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        flowcore.fm_loss(pred, target, mask=[False, False, False])


def test_fm_loss_gradient_flows_in_torch():
    pred = torch.randn(2, 1, 4, 4, requires_grad=True, dtype=torch.float64)
    target = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    loss = flowcore.fm_loss(pred, target, mask=[True, False])
    loss.backward()
    assert pred.grad is not None
    assert torch.all(pred.grad[1] == 0)
    expected = 2 * (pred[0] - target[0]) / pred[0].numel()
    assert torch.allclose(pred.grad[0], expected)


def test_cfg_combine_identities():
    rng = np.random.default_rng(5)
    uc = rng.standard_normal((2, 1, 3, 3))
    uu = rng.standard_normal((2, 1, 3, 3))
    assert np.array_equal(flowcore.cfg_combine(uc, uu, 1.0), uc)
    assert np.array_equal(flowcore.cfg_combine(uc, uu, 0.0), uu)
    out = flowcore.cfg_combine(np.array([2.0]), np.array([1.0]), 2.0)
    assert out[0] == pytest.approx(3.0)
    with pytest.raises(ValueError):
        flowcore.cfg_combine(uc, uu, -0.5)


def test_analytic_velocity_single_step_is_exact():
    rng = np.random.default_rng(6)
    x1 = rng.standard_normal((3, 1, 4, 4))
    x = rng.standard_normal((3, 1, 4, 4))
    tau = np.array([0.0, 0.25, 0.875])
    u = flowcore.analytic_velocity(x1, x, tau)
    landed = flowcore.buffered_euler_step(x, u, 1.0 - tau)
    assert np.allclose(landed, x1, atol=1e-12)


def test_analytic_velocity_zero_on_clean_frames():
    rng = np.random.default_rng(7)
    x1 = rng.standard_normal((2, 1, 4, 4))
    x = rng.standard_normal((2, 1, 4, 4))
    u = flowcore.analytic_velocity(x1, x, [1.0, 0.5])
    assert np.array_equal(u[0], np.zeros_like(u[0]))
    assert np.any(u[1] != 0)


def test_analytic_last_step_exact_after_any_schedule():
    # Whatever coarse schedule precedes it, the final Euler step of the
    # analytic field lands on x1 exactly because the field points straight
    # at x1 scaled by the remaining time.
    rng = np.random.default_rng(8)
    x1 = rng.standard_normal((2, 1, 4, 4))
    x = rng.standard_normal((2, 1, 4, 4))
    schedule = [0.0, 0.1, 0.45, 0.6, 1.0]
    for lo, hi in zip(schedule[:-1], schedule[1:]):
        tau = np.full(2, lo)
        u = flowcore.analytic_velocity(x1, x, tau)
        x = flowcore.buffered_euler_step(x, u, np.full(2, hi - lo))
    assert np.allclose(x, x1, atol=1e-9)


def test_oracles_share_signature():
    rng = np.random.default_rng(9)
    x1 = rng.standard_normal((2, 1, 4, 4))
    x = rng.standard_normal((2, 1, 4, 4))
    oracle = flowcore.make_target_oracle(x1)
    out = oracle(x, np.array([0.5, 0.5]), 0, np.array([0, 1]))
    assert out.shape == x.shape

    cond_oracle = flowcore.make_conditional_oracle({1: x1, 2: -x1})
    a = cond_oracle(x, np.array([0.0, 0.0]), 1)
    b = cond_oracle(x, np.array([0.0, 0.0]), 2)
    assert not np.allclose(a, b)
    with pytest.raises(KeyError):
        cond_oracle(x, np.array([0.0, 0.0]), 7)


def test_kernel_accepts_torch_tensors():
    g = torch.Generator().manual_seed(0)
    x1 = torch.randn(3, 1, 4, 4, generator=g, dtype=torch.float64)
    x0 = torch.randn(3, 1, 4, 4, generator=g, dtype=torch.float64)
    mid = flowcore.buffered_interpolate(x1, x0, [0.2, 0.5, 0.9], sigma_min=1e-3)
    assert isinstance(mid, torch.Tensor)
    ref = flowcore.buffered_interpolate(x1.numpy(), x0.numpy(), [0.2, 0.5, 0.9], sigma_min=1e-3)
    assert np.allclose(mid.numpy(), ref)
    u = flowcore.analytic_velocity(x1, mid, [0.2, 0.5, 0.9])
    landed = flowcore.buffered_euler_step(mid, u, [0.8, 0.5, 0.1])
    assert torch.allclose(landed, x1, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(
    t=st.floats(min_value=0.0, max_value=1.0),
    sigma=st.floats(min_value=0.0, max_value=0.5),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
def test_interpolate_velocity_consistency(t, sigma, seed):
    # Walking the path from t to 1 with the target velocity reaches the
    # path's endpoint: X_t + (1 - t) * V = X_1-point. Holds for any t, sigma.
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal((2, 1, 3, 3))
    x0 = rng.standard_normal((2, 1, 3, 3))
    xt = flowcore.ot_interpolate(x1, x0, t, sigma_min=sigma)
    v = flowcore.target_velocity(x1, x0, sigma_min=sigma)
    end = flowcore.euler_step(xt, v, 1.0 - t)
    expected = flowcore.ot_interpolate(x1, x0, 1.0, sigma_min=sigma)
    assert np.allclose(end, expected, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**31 - 1))
def test_buffered_reduction_property(seed):
    rng = np.random.default_rng(seed)
    t = float(rng.uniform(0, 1))
    x1 = rng.standard_normal((4, 1, 2, 2))
    x0 = rng.standard_normal((4, 1, 2, 2))
    a = flowcore.ot_interpolate(x1, x0, t, sigma_min=1e-3)
    b = flowcore.buffered_interpolate(x1, x0, np.full(4, t), sigma_min=1e-3)
    assert np.array_equal(a, b)
