"""ODE sampling with per-step waypoint recalibration and interval-gated CFG."""
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import PixelGenerator, as_label_vector
from .flow import NULL_CLASS, ClampConfig, noise_scale, velocity_from_xpred
from .waypoints import WaypointGenerator

SOLVERS = ("euler", "heun")


class NumericalError(FloatingPointError):
    def __init__(self, step: int, what: str = "state"):
        super().__init__(f"non-finite {what} at integration step {step}")
        self.step = step


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    solver: str = "heun"
    cfg_scale: float = 1.0
    cfg_interval: tuple = (0.1, 1.0)
    seed: int = 0
    # None means image_size / 256
    noise_scale: float | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        lo, hi = self.cfg_interval
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"bad cfg interval [{lo}, {hi}]")

    def schedule(self) -> list[float]:
        return [k / self.steps for k in range(self.steps + 1)]


@dataclass
class FlowModels:
    """Pixel generator plus its (optional) frozen waypoint generator.

    Without a waypoint generator the pixel model sees all-zero waypoints,
    i.e. the plain globally conditioned baseline.
    """
    pixel: PixelGenerator
    waypoints: WaypointGenerator | None = None
    clamp: ClampConfig = ClampConfig()

    @property
    def image_size(self) -> int:
        return self.pixel.cfg.image_size

    @property
    def dtype(self):
        return next(self.pixel.parameters()).dtype

    @torch.no_grad()
    def predict(self, z, t, y):
        s_hat = self.waypoints(z, t, y) if self.waypoints is not None else None
        return self.pixel(z, t, y, s_hat), s_hat

    def velocity(self, z, t, y):
        x_hat, s_hat = self.predict(z, t, y)
        return velocity_from_xpred(x_hat, z, t, self.clamp), s_hat


def cfg_combine(v_uncond: torch.Tensor, v_cond: torch.Tensor, w: float) -> torch.Tensor:
    if v_uncond.shape != v_cond.shape:
        raise ValueError("conditional and unconditional velocities differ in shape")
    if w == 1:
        return v_cond
    if w == 0:
        return v_uncond
    return v_uncond + w * (v_cond - v_uncond)


def guided_velocity(models: FlowModels, z, t: float, y, w: float = 1.0,
                    interval=(0.1, 1.0), out: dict | None = None) -> torch.Tensor:
    """Velocity at ``(z, t)``; CFG only when ``w != 1`` and ``t`` in ``[lo, hi)``.

    The unconditional branch drops the label to NULL_CLASS in both the
    waypoint generator and the pixel generator.
    """
    y = as_label_vector(y, z.shape[0])
    v_cond, s_hat = models.velocity(z, t, y)
    if out is not None:
        out.update(v_cond=v_cond, s_hat=s_hat, v_uncond=None)
    lo, hi = interval
    if w == 1 or not lo <= t < hi:
        return v_cond
    v_uncond, _ = models.velocity(z, t, torch.full_like(y, NULL_CLASS))
    if out is not None:
        out["v_uncond"] = v_uncond
    return cfg_combine(v_uncond, v_cond, w)


def euler_step(z, t_k: float, t_k1: float, v_hat):
    return z + (t_k1 - t_k) * v_hat


def heun_step(z, t_k: float, t_k1: float, velocity_fn, v_k=None):
    """Explicit trapezoidal predictor-corrector step.

    ``v_k`` may be passed when the velocity at ``(z, t_k)`` is already known.
    """
    dt = t_k1 - t_k
    if v_k is None:
        v_k = velocity_fn(z, t_k)
    z_pred = z + dt * v_k
    return z + 0.5 * dt * (v_k + velocity_fn(z_pred, t_k1))


def initial_noise(num: int, image_size: int, seed: int, scale: float, dtype=torch.float32):
    """Sample ``i`` always uses seed ``seed + i``, independent of ``num``."""
    out = torch.empty(num, image_size, image_size, 3, dtype=torch.float64)
    for i in range(num):
        g = torch.Generator().manual_seed(int(seed) + i)
        out[i] = torch.randn(image_size, image_size, 3, generator=g, dtype=torch.float64)
    return (scale * out).to(dtype)


@dataclass
class TrajectoryRecord:
    t: list = field(default_factory=list)
    z: list = field(default_factory=list)
    s_hat: list = field(default_factory=list)
    v_cond: list = field(default_factory=list)
    v_uncond: list = field(default_factory=list)

    def __len__(self):
        return len(self.t)

    def append(self, t, z, info: dict):
        self.t.append(t)
        self.z.append(z)
        self.s_hat.append(info.get("s_hat"))
        self.v_cond.append(info.get("v_cond"))
        self.v_uncond.append(info.get("v_uncond"))

    def write_jsonl(self, path, downsample: int = 0):
        """One JSON object per step with norms; ``downsample > 0`` adds an
        average-pooled copy of z (factor ``downsample``)."""
        def norm(x):
            return None if x is None else float(x.double().norm())

        with open(path, "w", encoding="utf-8") as fh:
            for k, t in enumerate(self.t):
                rec = {"step": k, "t": t, "z_norm": norm(self.z[k]),
                       "s_hat_norm": norm(self.s_hat[k]), "v_cond_norm": norm(self.v_cond[k]),
                       "v_uncond_norm": norm(self.v_uncond[k])}
                if downsample > 0:
                    z = self.z[k].double().permute(0, 3, 1, 2)
                    pooled = torch.nn.functional.avg_pool2d(z, downsample)
                    rec["z_pooled"] = np.round(pooled.permute(0, 2, 3, 1).numpy(), 6).tolist()
                fh.write(json.dumps(rec) + "\n")


def sample(models: FlowModels, y, cfg: SamplerConfig = SamplerConfig(), num: int | None = None,
           trace: bool = True):
    """Integrate from noise at t=0 to an image at t=1.

    ``y`` is one label (repeated ``num`` times) or a sequence of labels.
    Returns ``(images [B, H, W, 3], TrajectoryRecord)``.
    """
    if num is None:
        num = 1 if np.isscalar(y) else len(y)
    labels = as_label_vector(y, num)
    if labels.shape[0] != num:
        raise ValueError(f"{labels.shape[0]} labels for {num} samples")
    scale = noise_scale(models.image_size) if cfg.noise_scale is None else cfg.noise_scale
    z = initial_noise(num, models.image_size, cfg.seed, scale, models.dtype)
    record = TrajectoryRecord()
    ts = cfg.schedule()

    def field_fn(zz, tt):
        return guided_velocity(models, zz, tt, labels, cfg.cfg_scale, cfg.cfg_interval)

    for k in range(cfg.steps):
        info = {}
        v = guided_velocity(models, z, ts[k], labels, cfg.cfg_scale, cfg.cfg_interval, out=info)
        if trace:
            record.append(ts[k], z, info)
        if cfg.solver == "euler":
            z = euler_step(z, ts[k], ts[k + 1], v)
        else:
            z = heun_step(z, ts[k], ts[k + 1], field_fn, v_k=v)
        if not bool(torch.isfinite(z).all()):
            raise NumericalError(k)
    return z, record
