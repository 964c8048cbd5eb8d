"""Two-stage training: waypoint generator first, then the pixel generator
conditioned on its frozen EMA weights."""
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .backbone import BackboneConfig, PixelGenerator
from .checkpoint import Checkpoint
from .flow import (NULL_CLASS, ClampConfig, TimeSamplerConfig, interpolate, noise_scale,
                   sample_time, sem_v_loss, v_loss)
from .nn import DimensionError, backward, param_store
from .sampler import FlowModels
from .waypoints import ToyFeatureExtractor, WaypointGenerator, WaypointGeneratorConfig, WaypointProjection

log = logging.getLogger(__name__)

STAGES = ("waypoints", "pixel")
DTYPES = {"float32": torch.float32, "float64": torch.float64}

# stream ids for per-step random draws
_TIME, _EPS_IMG, _EPS_SEM, _DROP, _SHUFFLE = range(5)


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "waypoints"
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 5e-5
    warmup_epochs: float = 5.0
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    label_drop_prob: float = 0.1
    seed: int = 0
    time_mu: float = -0.8
    time_sigma: float = 0.8
    tau_eps: float = 0.05
    noise_scale: float = -1.0      # negative: image_size / 256
    max_steps: int = 0             # 0: no cap beyond epochs
    log_every: int = 50
    dtype: str = "float32"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        for name in ("label_drop_prob", "ema_decay"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must be two numbers in [0, 1)")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {tuple(DTYPES)}")

    def steps_per_epoch(self, num_samples: int) -> int:
        return math.ceil(num_samples / self.batch_size)

    def total_steps(self, num_samples: int) -> int:
        total = self.epochs * self.steps_per_epoch(num_samples)
        return min(total, self.max_steps) if self.max_steps > 0 else total

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def lr_schedule(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup reaching ``base_lr`` on the last warmup step, then constant.

    Step 0 already gets ``base_lr / warmup_steps`` so no update is wasted.
    """
    warm = int(round(cfg.warmup_epochs * steps_per_epoch))
    if warm <= 0:
        return cfg.base_lr
    return cfg.base_lr * min(1.0, (step + 1) / warm)


def init_optimizer_state(params: dict) -> dict:
    return {"step": 0,
            "m": {n: torch.zeros_like(p) for n, p in params.items()},
            "v": {n: torch.zeros_like(p) for n, p in params.items()}}


@torch.no_grad()
def optimizer_step(params: dict, grads: dict, state: dict, lr: float, betas=(0.9, 0.95),
                   weight_decay: float = 0.0, eps: float = 1e-8) -> dict:
    """One AdamW update in place; decay is decoupled (``p *= 1 - lr * wd``)."""
    b1, b2 = betas
    state["step"] += 1
    k = state["step"]
    c1, c2 = 1 - b1 ** k, 1 - b2 ** k
    for name, p in params.items():
        g = grads[name]
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient {tuple(g.shape)} vs parameter {tuple(p.shape)}")
        m, v = state["m"][name], state["v"][name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        if weight_decay:
            p.mul_(1 - lr * weight_decay)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return params


class EmaShadow:
    def __init__(self, params: dict, decay: float):
        self.decay = decay
        self.shadow = {n: p.detach().clone() for n, p in params.items()}

    @torch.no_grad()
    def update(self, params: dict) -> "EmaShadow":
        d = self.decay
        for n, p in params.items():
            if p.shape != self.shadow[n].shape:
                raise DimensionError(f"{n}: EMA shape mismatch")
            self.shadow[n] = d * self.shadow[n] + (1 - d) * p.detach()
        return self

    def copy_to(self, module: torch.nn.Module) -> torch.nn.Module:
        with torch.no_grad():
            for n, p in param_store(module).items():
                p.copy_(self.shadow[n])
        return module


def ema_update(shadow: EmaShadow, params: dict) -> EmaShadow:
    return shadow.update(params)


@dataclass
class TrainState:
    net: torch.nn.Module
    ema: EmaShadow
    opt: dict
    step: int = 0
    history: list = field(default_factory=list)


def new_state(net: torch.nn.Module, cfg: TrainConfig) -> TrainState:
    params = param_store(net)
    return TrainState(net, EmaShadow(params, cfg.ema_decay), init_optimizer_state(params))


def _rng(seed: int, stream: int, step: int) -> torch.Generator:
    s = np.random.SeedSequence([int(seed), stream, int(step)]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(s))


def batch_indices(step: int, num_samples: int, cfg: TrainConfig) -> np.ndarray:
    """Rows used at ``step``: a seeded permutation per epoch, walked in order."""
    spe = cfg.steps_per_epoch(num_samples)
    epoch, pos = divmod(step, spe)
    perm = np.random.default_rng([cfg.seed, _SHUFFLE, epoch]).permutation(num_samples)
    return perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]


def draw_batch_noise(step: int, n: int, cfg: TrainConfig, image_shape, sem_shape=None, dtype=torch.float32):
    """Per-step random draws; each quantity has its own stream."""
    t = sample_time(TimeSamplerConfig(cfg.time_mu, cfg.time_sigma), _rng(cfg.seed, _TIME, step), n, dtype)
    eps_img = torch.randn((n,) + tuple(image_shape), generator=_rng(cfg.seed, _EPS_IMG, step),
                          dtype=torch.float64).to(dtype)
    eps_sem = None
    if sem_shape is not None:
        eps_sem = torch.randn((n,) + tuple(sem_shape), generator=_rng(cfg.seed, _EPS_SEM, step),
                              dtype=torch.float64).to(dtype)
    drop = torch.rand(n, generator=_rng(cfg.seed, _DROP, step), dtype=torch.float64) < cfg.label_drop_prob
    return t, eps_img, eps_sem, drop


def _noise_scale(cfg: TrainConfig, image_size: int) -> float:
    return noise_scale(image_size) if cfg.noise_scale < 0 else cfg.noise_scale


def _grad_norm(params: dict) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(total)


def _run(state: TrainState, loss_fn, num_samples: int, cfg: TrainConfig, steps: int | None, callback):
    spe = cfg.steps_per_epoch(num_samples)
    end = cfg.total_steps(num_samples) if steps is None else state.step + steps
    params = param_store(state.net)
    state.net.train()
    while state.step < end:
        step = state.step
        for p in params.values():
            p.grad = None
        loss = loss_fn(step)
        if not torch.isfinite(loss):
            from .sampler import NumericalError
            raise NumericalError(step, "loss")
        backward(loss)
        lr = lr_schedule(step, spe, cfg)
        gnorm = _grad_norm(params)
        optimizer_step(params, {n: p.grad for n, p in params.items()}, state.opt, lr,
                       cfg.betas, cfg.weight_decay)
        state.ema.update(params)
        state.step += 1
        row = {"step": state.step, "epoch": step // spe, "loss": loss.detach().item(), "lr": lr, "grad_norm": gnorm}
        state.history.append(row)
        if cfg.log_every and (state.step % cfg.log_every == 0 or state.step == end):
            log.info("step %d epoch %d loss %.6f lr %.3g grad-norm %.4g",
                     row["step"], row["epoch"], row["loss"], lr, gnorm)
        if callback is not None:
            callback(state)
    return state


def waypoint_targets(images: np.ndarray, extractor: ToyFeatureExtractor,
                     proj: WaypointProjection, chunk: int = 256) -> np.ndarray:
    out = [proj.project(extractor(images[i:i + chunk])) for i in range(0, len(images), chunk)]
    return np.concatenate(out).astype(np.float32)


def train_waypoints(dataset, proj: WaypointProjection, extractor: ToyFeatureExtractor,
                    model_cfg: WaypointGeneratorConfig, cfg: TrainConfig,
                    state: TrainState | None = None, steps: int | None = None,
                    callback=None) -> TrainState:
    """Stage one: fit W_psi to semantic velocity matching.

    Continues from ``state`` when given; ``steps`` limits this call to that
    many updates (otherwise runs to the configured end).
    """
    if extractor.patch_size != model_cfg.patch_size:
        raise DimensionError(
            f"extractor patch {extractor.patch_size} != generator patch {model_cfg.patch_size}")
    if proj.dim != model_cfg.waypoint_dim:
        raise DimensionError(f"projection has {proj.dim} components, model expects {model_cfg.waypoint_dim}")
    dtype = DTYPES[cfg.dtype]
    if state is None:
        torch.manual_seed(cfg.seed)
        state = new_state(WaypointGenerator(model_cfg).to(dtype), cfg)
    x_all = torch.as_tensor(dataset.images).to(dtype)
    y_all = torch.as_tensor(dataset.labels)
    s_all = torch.as_tensor(waypoint_targets(dataset.images, extractor, proj)).to(dtype)
    sigma = _noise_scale(cfg, model_cfg.image_size)
    clamp = ClampConfig(cfg.tau_eps)

    def loss_fn(step):
        idx = torch.as_tensor(batch_indices(step, len(dataset), cfg))
        x, y, s0 = x_all[idx], y_all[idx], s_all[idx]
        t, eps_img, eps_sem, drop = draw_batch_noise(step, len(idx), cfg, x.shape[1:], s0.shape[1:], dtype)
        y = torch.where(drop, torch.full_like(y, NULL_CLASS), y)
        z_t = interpolate(x, sigma * eps_img, t)
        s_hat = state.net(z_t, t, y)
        return sem_v_loss(s_hat, s0, eps_sem, t, clamp)

    return _run(state, loss_fn, len(dataset), cfg, steps, callback)


def frozen_copy(net: torch.nn.Module, ema: EmaShadow | None = None) -> torch.nn.Module:
    import copy
    out = copy.deepcopy(net)
    if ema is not None:
        ema.copy_to(out)
    out.eval()
    for p in out.parameters():
        p.requires_grad_(False)
    return out


def train_pixel(dataset, waypoint_net: WaypointGenerator | None, model_cfg: BackboneConfig,
                cfg: TrainConfig, state: TrainState | None = None, steps: int | None = None,
                callback=None) -> TrainState:
    """Stage two: fit G_theta with x-prediction and the velocity loss.

    ``waypoint_net`` should already be frozen (see ``frozen_copy``); pass
    None to train the waypoint-free baseline, which sees zero waypoints.
    The label drop mask applies to both networks.
    """
    dtype = DTYPES[cfg.dtype]
    if waypoint_net is not None:
        wc = waypoint_net.cfg
        if (wc.waypoint_dim, wc.num_tokens, wc.image_size) != (
                model_cfg.waypoint_dim, model_cfg.num_tokens, model_cfg.image_size):
            raise DimensionError("waypoint generator does not match the pixel generator's grid/width")
        waypoint_net = waypoint_net.to(dtype)
        if any(p.requires_grad for p in waypoint_net.parameters()):
            waypoint_net = frozen_copy(waypoint_net)
    if state is None:
        torch.manual_seed(cfg.seed + 1)
        state = new_state(PixelGenerator(model_cfg).to(dtype), cfg)
    x_all = torch.as_tensor(dataset.images).to(dtype)
    y_all = torch.as_tensor(dataset.labels)
    sigma = _noise_scale(cfg, model_cfg.image_size)
    clamp = ClampConfig(cfg.tau_eps)

    def loss_fn(step):
        idx = torch.as_tensor(batch_indices(step, len(dataset), cfg))
        x, y = x_all[idx], y_all[idx]
        t, eps_img, _, drop = draw_batch_noise(step, len(idx), cfg, x.shape[1:], None, dtype)
        y = torch.where(drop, torch.full_like(y, NULL_CLASS), y)
        eps = sigma * eps_img
        z_t = interpolate(x, eps, t)
        s_hat = None
        if waypoint_net is not None:
            with torch.no_grad():
                s_hat = waypoint_net(z_t, t, y)
        x_hat = state.net(z_t, t, y, s_hat)
        return v_loss(x_hat, x, eps, t, clamp)

    return _run(state, loss_fn, len(dataset), cfg, steps, callback)


# --- checkpoint conversion ----------------------------------------------------

def _tensors(prefix: str, d: dict) -> dict:
    return {f"{prefix}/{n}": t.detach().to(torch.float32).numpy() for n, t in d.items()}


def state_to_checkpoint(state: TrainState, kind: str, model_cfg, train_cfg: TrainConfig,
                        extra_tensors: dict | None = None, extra_config: dict | None = None) -> Checkpoint:
    params = param_store(state.net)
    tensors = {**_tensors("param", params), **_tensors("ema", state.ema.shadow),
               **_tensors("adam_m", state.opt["m"]), **_tensors("adam_v", state.opt["v"])}
    tensors.update(extra_tensors or {})
    config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "step": state.step,
              "adam_step": state.opt["step"], **(extra_config or {})}
    return Checkpoint(kind=kind, config=config, tensors=tensors)


def _load_into(module: torch.nn.Module, tensors: dict, prefix: str):
    params = param_store(module)
    missing = [n for n in params if f"{prefix}/{n}" not in tensors]
    if missing:
        raise DimensionError(f"checkpoint lacks {prefix} tensors: {missing[:3]}")
    with torch.no_grad():
        for n, p in params.items():
            src = torch.as_tensor(tensors[f"{prefix}/{n}"])
            if src.shape != p.shape:
                raise DimensionError(f"{n}: checkpoint shape {tuple(src.shape)} vs model {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))
    return module


def state_from_checkpoint(ckpt: Checkpoint):
    """Rebuild ``(state, model_cfg, train_cfg)`` for exact resumption."""
    train_cfg = TrainConfig.from_dict(ckpt.config["train"])
    if ckpt.kind == "waypoints":
        model_cfg = WaypointGeneratorConfig(**ckpt.config["model"])
        net = WaypointGenerator(model_cfg)
    elif ckpt.kind == "pixel":
        model_cfg = BackboneConfig(**ckpt.config["model"])
        net = PixelGenerator(model_cfg)
    else:
        raise ValueError(f"checkpoint kind {ckpt.kind!r} is not a trainable model")
    net = _load_into(net.to(DTYPES[train_cfg.dtype]), ckpt.tensors, "param")
    state = new_state(net, train_cfg)
    dt = DTYPES[train_cfg.dtype]
    for n in state.ema.shadow:
        state.ema.shadow[n] = torch.as_tensor(ckpt.tensors[f"ema/{n}"]).to(dt)
        state.opt["m"][n] = torch.as_tensor(ckpt.tensors[f"adam_m/{n}"]).to(dt)
        state.opt["v"][n] = torch.as_tensor(ckpt.tensors[f"adam_v/{n}"]).to(dt)
    state.opt["step"] = int(ckpt.config["adam_step"])
    state.step = int(ckpt.config["step"])
    return state, model_cfg, train_cfg


def waypoint_net_from_checkpoint(ckpt: Checkpoint, prefix: str = "ema", dtype=torch.float32,
                                 model_key: str = "model") -> WaypointGenerator:
    cfg = WaypointGeneratorConfig(**ckpt.config[model_key])
    return frozen_copy(_load_into(WaypointGenerator(cfg).to(dtype), ckpt.tensors, prefix))


def models_from_checkpoint(ckpt: Checkpoint, use_ema: bool = True, dtype=torch.float32) -> FlowModels:
    """Frozen ``FlowModels`` from a pixel checkpoint (waypoint net embedded)."""
    if ckpt.kind != "pixel":
        raise ValueError(f"expected a pixel checkpoint, got {ckpt.kind!r}")
    cfg = BackboneConfig(**ckpt.config["model"])
    pixel = frozen_copy(_load_into(PixelGenerator(cfg).to(dtype), ckpt.tensors,
                                   "ema" if use_ema else "param"))
    waypoints = None
    if ckpt.config.get("waypoint_model") is not None:
        waypoints = waypoint_net_from_checkpoint(ckpt, "waypoints", dtype, "waypoint_model")
    tau = ckpt.config["train"].get("tau_eps", 0.05)
    return FlowModels(pixel, waypoints, ClampConfig(tau))


def with_waypoints(ckpt: Checkpoint, waypoint_net: WaypointGenerator | None) -> Checkpoint:
    """Embed the frozen waypoint generator into a pixel checkpoint."""
    if waypoint_net is None:
        ckpt.config["waypoint_model"] = None
        return ckpt
    ckpt.config["waypoint_model"] = waypoint_net.cfg.to_dict()
    ckpt.tensors.update(_tensors("waypoints", param_store(waypoint_net)))
    return ckpt


def replace_config(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
