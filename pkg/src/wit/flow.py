"""Linear-interpolant flow matching with x-prediction."""
from dataclasses import dataclass

import torch

NULL_CLASS = -1


@dataclass(frozen=True)
class TimeSamplerConfig:
    mu: float = -0.8
    sigma: float = 0.8

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


@dataclass(frozen=True)
class ClampConfig:
    tau_eps: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.tau_eps < 1.0:
            raise ValueError("tau_eps must lie in (0, 1)")


@dataclass
class FlowState:
    z_t: torch.Tensor
    t: float
    y: int

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t={self.t} outside [0, 1]")


def _check_same(a, b, what="inputs"):
    if a.shape != b.shape:
        raise ValueError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def _broadcast_time(t, like: torch.Tensor):
    """Scalar t stays scalar; a per-sample vector [B] is reshaped to [B, 1, ...]."""
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        if t.shape[0] != like.shape[0]:
            raise ValueError(f"{t.shape[0]} timesteps for a batch of {like.shape[0]}")
        return t.to(like.dtype).reshape((-1,) + (1,) * (like.dim() - 1))
    return float(t)


def _check_time_range(t):
    lo, hi = (float(t.min()), float(t.max())) if isinstance(t, torch.Tensor) else (t, t)
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"t outside [0, 1]: [{lo}, {hi}]")


def interpolate(x: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    _check_same(x, eps)
    _check_time_range(t)
    tb = _broadcast_time(t, x)
    return tb * x + (1 - tb) * eps


def true_velocity(x: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    _check_same(x, eps)
    return x - eps


def denominator(t, clamp: ClampConfig = ClampConfig()):
    if isinstance(t, torch.Tensor):
        return torch.clamp(1 - t, min=clamp.tau_eps)
    return max(1.0 - float(t), clamp.tau_eps)


def velocity_from_xpred(x_hat, z_t, t, clamp: ClampConfig = ClampConfig()) -> torch.Tensor:
    """Velocity implied by a clean-image prediction; the 1 - t divisor is floored at tau_eps."""
    _check_same(x_hat, z_t)
    return (x_hat - z_t) / _broadcast_time(denominator(t, clamp), z_t)


def v_loss(x_hat, x, eps, t, clamp: ClampConfig = ClampConfig()) -> torch.Tensor:
    _check_same(x_hat, x)
    z_t = interpolate(x, eps, t)
    v_hat = velocity_from_xpred(x_hat, z_t, t, clamp)
    return (v_hat - true_velocity(x, eps)).pow(2).mean()


def sem_v_loss(s_hat, s0, eps_sem, t, clamp: ClampConfig = ClampConfig()) -> torch.Tensor:
    """Semantic velocity matching.

    Both velocities share ``z_sem_t`` so the loss reduces to
    ``|s_hat - s0|^2 / max(1 - t, tau_eps)^2``; it is evaluated in the
    two-velocity form anyway.
    """
    _check_same(s_hat, s0)
    _check_same(s0, eps_sem)
    z_sem = interpolate(s0, eps_sem, t)
    v_hat = velocity_from_xpred(s_hat, z_sem, t, clamp)
    v_tgt = velocity_from_xpred(s0, z_sem, t, clamp)
    return (v_hat - v_tgt).pow(2).mean()


def sample_time(cfg: TimeSamplerConfig, rng: torch.Generator, n: int | None = None,
                dtype=torch.float64):
    """Logit-normal timesteps: ``sigmoid(mu + sigma * g)``, g standard normal.

    Returns a float when ``n`` is None, else a tensor of ``n`` draws.
    """
    g = torch.randn(1 if n is None else n, generator=rng, dtype=torch.float64)
    t = torch.sigmoid(cfg.mu + cfg.sigma * g)
    return float(t[0]) if n is None else t.to(dtype)


def noise_scale(image_size: int) -> float:
    return 1.0 * image_size / 256
