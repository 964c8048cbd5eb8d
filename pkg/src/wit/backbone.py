"""Pixel-space generator with per-token (spatially varying) AdaLN modulation."""
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .flow import NULL_CLASS
from .nn import MLP, DimensionError, RMSNorm, SelfAttention, init_linear, rms_norm

INJECTIONS = ("adaln", "channel", "in_context")
FREQ_DIM = 256


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 4
    hidden_dim: int = 128
    heads: int = 4
    patch_size: int = 8
    bottleneck: int = 128
    num_classes: int = 4
    image_size: int = 32
    waypoint_dim: int = 16
    mlp_ratio: int = 4
    injection: str = "adaln"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise DimensionError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.injection not in INJECTIONS:
            raise ValueError(f"injection must be one of {INJECTIONS}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2

    def to_dict(self):
        return asdict(self)


def patchify_raw(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """[B, H, W, 3] -> [B, N, p*p*3].

    Patches in row-major order; pixels row-major inside a patch, channel-last.
    """
    B, H, W, C = images.shape
    p = patch_size
    if H % p or W % p:
        raise DimensionError(f"{H}x{W} image not divisible into {p}x{p} patches")
    x = images.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // p) * (W // p), p * p * C)


def unpatchify_raw(patches: torch.Tensor, patch_size: int, height: int, width: int) -> torch.Tensor:
    B, N, P = patches.shape
    p = patch_size
    C = P // (p * p)
    if N != (height // p) * (width // p) or P != p * p * C:
        raise DimensionError(f"cannot fold {N} patches of {P} into {height}x{width}")
    x = patches.reshape(B, height // p, width // p, p, p, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, height, width, C)


def sincos_pos_embed_2d(grid: int, dim: int) -> np.ndarray:
    """Fixed 2-D sine/cosine table [grid*grid, dim]; half the channels per axis.

    Channels beyond the largest multiple of 4 are left at zero.
    """
    quarter = dim // 4
    out = np.zeros((grid * grid, dim))
    if quarter == 0:
        return out
    omega = 1.0 / 10000 ** (np.arange(quarter) / quarter)
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    parts = []
    for pos in (rows.reshape(-1), cols.reshape(-1)):
        ang = np.outer(pos, omega)
        parts += [np.sin(ang), np.cos(ang)]
    out[:, :4 * quarter] = np.concatenate(parts, axis=1)
    return out


def timestep_embedding(t: torch.Tensor, dim: int = FREQ_DIM, max_period: float = 10000.0):
    # t in [0, 1] is scaled by 1000 so the low frequencies still resolve it
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    ang = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)


def as_time_vector(t, batch: int, dtype) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        return t.to(dtype)
    return torch.full((batch,), float(t), dtype=dtype)


def as_label_vector(y, batch: int) -> torch.Tensor:
    if isinstance(y, torch.Tensor) and y.dim() > 0:
        return y.long()
    if isinstance(y, (list, tuple, np.ndarray)):
        return torch.as_tensor(np.asarray(y), dtype=torch.long)
    return torch.full((batch,), int(y), dtype=torch.long)


class PatchEmbed(nn.Module):
    """Patch vector -> bottleneck -> hidden width, plus fixed position table."""

    def __init__(self, in_dim: int, bottleneck: int, hidden_dim: int, grid: int):
        super().__init__()
        self.down = init_linear(nn.Linear(in_dim, bottleneck))
        self.up = init_linear(nn.Linear(bottleneck, hidden_dim))
        self.register_buffer(
            "pos", torch.as_tensor(sincos_pos_embed_2d(grid, hidden_dim), dtype=torch.float32),
            persistent=False)

    def forward(self, patches):
        return self.up(self.down(patches)) + self.pos.to(patches.dtype)


class ConditionEmbedder(nn.Module):
    """Global time-class embedding e(t, y).

    The class table has ``num_classes + 1`` rows; the last one stands for
    ``NULL_CLASS`` and is what classifier-free guidance drops labels to.
    """

    def __init__(self, hidden_dim: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.t_fc1 = init_linear(nn.Linear(FREQ_DIM, hidden_dim))
        self.t_fc2 = init_linear(nn.Linear(hidden_dim, hidden_dim))
        self.table = nn.Embedding(num_classes + 1, hidden_dim)
        nn.init.normal_(self.table.weight, std=0.02)

    def label_rows(self, y: torch.Tensor) -> torch.Tensor:
        bad = ((y < 0) | (y >= self.num_classes)) & (y != NULL_CLASS)
        if bool(bad.any()):
            raise LabelError(f"labels {y[bad].tolist()} outside [0, {self.num_classes}) and not NULL_CLASS")
        return torch.where(y == NULL_CLASS, torch.full_like(y, self.num_classes), y)

    def forward(self, t: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        temb = timestep_embedding(t.to(self.t_fc1.weight.dtype))
        temb = self.t_fc2(torch.nn.functional.silu(self.t_fc1(temb)))
        return temb + self.table(self.label_rows(y))


class JustPixelAdaLNBlock(nn.Module):
    """Transformer block modulated per token by a spatial condition ``c_s``.

    ``h`` and ``c_s`` are both ``[B, N, D]``; the six modulation maps come
    from one zero-initialised linear layer, so a fresh block is the identity.
    """

    def __init__(self, hidden_dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = RMSNorm(hidden_dim)
        self.attn = SelfAttention(hidden_dim, heads)
        self.norm2 = RMSNorm(hidden_dim)
        self.mlp = MLP(hidden_dim, mlp_ratio)
        self.modulation = init_linear(nn.Linear(hidden_dim, 6 * hidden_dim), zero=True)

    def modulate(self, c_s: torch.Tensor):
        return self.modulation(c_s).chunk(6, dim=-1)

    def attention_input(self, h, c_s):
        g1, b1, _, _, _, _ = self.modulate(c_s)
        return (1 + g1) * self.norm1(h) + b1

    def forward(self, h: torch.Tensor, c_s: torch.Tensor) -> torch.Tensor:
        if c_s.shape != h.shape:
            raise DimensionError(f"condition {tuple(c_s.shape)} vs hidden {tuple(h.shape)}")
        g1, b1, a1, g2, b2, a2 = self.modulate(c_s)
        h = h + a1 * self.attn((1 + g1) * self.norm1(h) + b1)
        return h + a2 * self.mlp((1 + g2) * self.norm2(h) + b2)


class GlobalAdaLNBlock(nn.Module):
    """Standard DiT-style AdaLN-Zero block: one condition vector per sample."""

    def __init__(self, hidden_dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = RMSNorm(hidden_dim)
        self.attn = SelfAttention(hidden_dim, heads)
        self.norm2 = RMSNorm(hidden_dim)
        self.mlp = MLP(hidden_dim, mlp_ratio)
        self.modulation = init_linear(nn.Linear(hidden_dim, 6 * hidden_dim), zero=True)

    def forward(self, h: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        # c: [B, D]
        mods = self.modulation(c)[:, None, :]
        g1, b1, a1, g2, b2, a2 = mods.chunk(6, dim=-1)
        x = rms_norm(h, self.norm1.gain, self.norm1.eps) * (1 + g1) + b1
        h = h + a1 * self.attn(x)
        x = rms_norm(h, self.norm2.gain, self.norm2.eps) * (1 + g2) + b2
        return h + a2 * self.mlp(x)


class PixelGenerator(nn.Module):
    """Predicts the clean image from ``(z_t, t, y, s_hat)``.

    ``injection`` selects how waypoints enter the network: per-token AdaLN
    (default), concatenated onto the patch vectors, or as prefix tokens.
    Passing ``s_hat=None`` feeds zeros, which turns the default variant into
    plain globally conditioned AdaLN.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.hidden_dim
        in_dim = cfg.patch_dim + (cfg.waypoint_dim if cfg.injection == "channel" else 0)
        self.embed = PatchEmbed(in_dim, cfg.bottleneck, D, cfg.grid)
        self.cond = ConditionEmbedder(D, cfg.num_classes)
        self.waypoint_proj = init_linear(nn.Linear(cfg.waypoint_dim, D, bias=False))
        self.blocks = nn.ModuleList(
            JustPixelAdaLNBlock(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.final_norm = RMSNorm(D)
        self.out_down = init_linear(nn.Linear(D, cfg.bottleneck))
        self.out_up = init_linear(nn.Linear(cfg.bottleneck, cfg.patch_dim), zero=True)

    def spatial_condition(self, e_ty: torch.Tensor, s_hat: torch.Tensor) -> torch.Tensor:
        if s_hat.shape[-2] != self.cfg.num_tokens:
            raise DimensionError(
                f"waypoint has {s_hat.shape[-2]} tokens, sequence has {self.cfg.num_tokens}")
        return e_ty[:, None, :] + self.waypoint_proj(s_hat)

    def forward(self, z_t: torch.Tensor, t, y, s_hat: torch.Tensor | None = None) -> torch.Tensor:
        cfg = self.cfg
        B, H, W, _ = z_t.shape
        if H != cfg.image_size or W != cfg.image_size:
            raise DimensionError(f"model expects {cfg.image_size}px images, got {H}x{W}")
        if s_hat is None:
            s_hat = z_t.new_zeros(B, cfg.num_tokens, cfg.waypoint_dim)
        if s_hat.shape[-1] != cfg.waypoint_dim:
            raise DimensionError(f"waypoint width {s_hat.shape[-1]} != {cfg.waypoint_dim}")
        e_ty = self.cond(as_time_vector(t, B, z_t.dtype), as_label_vector(y, B))
        patches = patchify_raw(z_t, cfg.patch_size)

        if cfg.injection == "channel":
            h = self.embed(torch.cat([patches, s_hat], dim=-1))
            c_s = e_ty[:, None, :].expand_as(h)
        elif cfg.injection == "in_context":
            prefix = self.waypoint_proj(s_hat) + self.embed.pos.to(z_t.dtype)
            h = torch.cat([prefix, self.embed(patches)], dim=1)
            c_s = e_ty[:, None, :].expand_as(h)
        else:
            h = self.embed(patches)
            c_s = self.spatial_condition(e_ty, s_hat)

        for block in self.blocks:
            h = block(h, c_s)
        h = h[:, -cfg.num_tokens:]
        out = self.out_up(self.out_down(self.final_norm(h)))
        return unpatchify_raw(out, cfg.patch_size, H, W)
