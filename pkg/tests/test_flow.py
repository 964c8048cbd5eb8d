import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from wit.flow import (ClampConfig, FlowState, TimeSamplerConfig, interpolate, noise_scale,
                      sample_time, sem_v_loss, true_velocity, v_loss, velocity_from_xpred)

D64 = torch.float64
T = lambda *v: torch.tensor(v, dtype=D64)  # noqa: E731


def test_interpolate_endpoints_and_midpoint(gen):
    x, eps = torch.randn(3, 4, dtype=D64, generator=gen), torch.randn(3, 4, dtype=D64, generator=gen)
    assert torch.equal(interpolate(x, eps, 0.0), eps)
    assert torch.equal(interpolate(x, eps, 1.0), x)
    assert interpolate(T(2.0), T(0.0), 0.5).tolist() == [1.0]


def test_interpolate_errors():
    with pytest.raises(ValueError):
        interpolate(T(1.0), T(1.0, 2.0), 0.5)
    with pytest.raises(ValueError):
        interpolate(T(1.0), T(1.0), 1.5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_interpolate_affine_in_t(a, b):
    g = torch.Generator().manual_seed(0)
    x, eps = torch.randn(6, dtype=D64, generator=g), torch.randn(6, dtype=D64, generator=g)
    mid = interpolate(x, eps, (a + b) / 2)
    avg = (interpolate(x, eps, a) + interpolate(x, eps, b)) / 2
    assert torch.allclose(mid, avg, atol=1e-12)


def test_per_sample_time_broadcast(gen):
    x, eps = torch.randn(3, 2, 2, dtype=D64, generator=gen), torch.zeros(3, 2, 2, dtype=D64)
    t = T(0.0, 0.5, 1.0)
    z = interpolate(x, eps, t)
    for i in range(3):
        assert torch.equal(z[i], float(t[i]) * x[i])


def test_true_velocity():
    assert true_velocity(T(1.0, 2.0), T(1.0, 2.0)).tolist() == [0.0, 0.0]
    assert true_velocity(T(3.0), T(1.0)).tolist() == [2.0]
    x, e = T(1.0, -2.0), T(0.5, 4.0)
    assert torch.allclose(true_velocity(3 * x, 3 * e), 3 * true_velocity(x, e))


def test_velocity_from_xpred_examples():
    z = T(0.3, -0.7)
    assert velocity_from_xpred(z, z, 0.4).abs().max() == 0
    assert velocity_from_xpred(T(1.0), T(0.0), 0.5).tolist() == [2.0]
    assert velocity_from_xpred(T(0.05), T(0.0), 0.99, ClampConfig(0.05)).tolist() == pytest.approx([1.0])
    assert torch.isfinite(velocity_from_xpred(T(1.0), T(0.0), 1.0)).all()


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 0.95))
def test_perfect_prediction_recovers_true_velocity(t):
    g = torch.Generator().manual_seed(1)
    x, eps = torch.randn(10, dtype=D64, generator=g), torch.randn(10, dtype=D64, generator=g)
    z = interpolate(x, eps, t)
    assert torch.allclose(velocity_from_xpred(x, z, t), x - eps, atol=1e-12)
    assert float(v_loss(x, x, eps, t)) < 1e-20


def test_v_loss_hand_example():
    # x_hat = z_t = 0.5 with eps = 0, x = 1, t = 0.5: v_hat = 0, v = 1
    x, eps = T(1.0), T(0.0)
    assert float(v_loss(interpolate(x, eps, 0.5), x, eps, 0.5)) == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.integers(0, 1000))
def test_losses_nonnegative(t, seed):
    g = torch.Generator().manual_seed(seed)
    a, b, c = (torch.randn(5, dtype=D64, generator=g) for _ in range(3))
    assert float(v_loss(a, b, c, t)) >= 0
    assert float(sem_v_loss(a, b, c, t)) >= 0


def test_sem_v_loss_examples():
    eps = T(0.3)
    assert float(sem_v_loss(T(2.0), T(2.0), eps, 0.3)) == 0
    assert float(sem_v_loss(T(1.0), T(0.0), eps, 0.5)) == pytest.approx(4.0)
    assert float(sem_v_loss(T(0.05), T(0.0), eps, 0.99)) == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.integers(0, 1000))
def test_sem_v_loss_identity(t, seed):
    g = torch.Generator().manual_seed(seed)
    s_hat, s0, eps = (torch.randn(3, 4, dtype=D64, generator=g) for _ in range(3))
    denom = max(1 - t, 0.05)
    expected = (s_hat - s0).pow(2).mean() / denom ** 2
    assert abs(float(sem_v_loss(s_hat, s0, eps, t)) - float(expected)) <= 1e-12 * max(1.0, float(expected))


def test_sample_time_degenerate_sigma():
    t = sample_time(TimeSamplerConfig(-0.8, 0.0), torch.Generator().manual_seed(0))
    assert t == pytest.approx(1 / (1 + math.exp(0.8)), abs=1e-12)
    assert t == pytest.approx(0.31003, abs=1e-5)


def test_sample_time_distribution():
    t = sample_time(TimeSamplerConfig(), torch.Generator().manual_seed(0), 100_000)
    assert ((t > 0) & (t < 1)).all()
    logit = torch.log(t / (1 - t))
    assert abs(float(logit.mean()) + 0.8) < 0.02
    assert abs(float(logit.std()) - 0.8) < 0.02


def test_config_validation():
    with pytest.raises(ValueError):
        TimeSamplerConfig(sigma=-1)
    with pytest.raises(ValueError):
        ClampConfig(0.0)
    with pytest.raises(ValueError):
        FlowState(torch.zeros(1), 1.5, 0)


@pytest.mark.parametrize("size,expected", [(256, 1.0), (32, 0.125), (64, 0.25)])
def test_noise_scale(size, expected):
    assert noise_scale(size) == expected
