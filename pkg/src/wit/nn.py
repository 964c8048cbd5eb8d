"""Transformer layers shared by the waypoint and pixel generators.

Everything here is plain torch; gradients come from autograd. Tests run in
float64, training usually in float32.
"""
import math
from collections import OrderedDict
from dataclasses import dataclass

import torch
from torch import nn

EPS_NORM = 1e-6

# tanh approximation of GELU
GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    hidden_dim: int
    heads: int
    depth: int = 1

    def __post_init__(self):
        if min(self.hidden_dim, self.heads, self.depth) < 1:
            raise ValueError("hidden_dim, heads and depth must be positive")
        if self.hidden_dim % self.heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = EPS_NORM) -> torch.Tensor:
    if x.shape[-1] == 0:
        raise DimensionError("rms_norm over a zero-length axis")
    if gain.shape[-1] != x.shape[-1]:
        raise DimensionError(f"gain has {gain.shape[-1]} channels, input {x.shape[-1]}")
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * gain


def gelu_tanh(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.tanh(GELU_C * (x + GELU_K * x.pow(3))))


def init_linear(layer: nn.Linear, std: float = 0.02, zero: bool = False) -> nn.Linear:
    if zero:
        nn.init.zeros_(layer.weight)
    else:
        nn.init.trunc_normal_(layer.weight, std=std, a=-2 * std, b=2 * std)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = EPS_NORM):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return rms_norm(x, self.gain, self.eps)


class SelfAttention(nn.Module):
    """Bidirectional multi-head scaled dot-product attention over tokens.

    Accepts ``[N, D]`` or ``[B, N, D]``. No positional information is added
    here, so the layer is permutation-equivariant in the token axis.
    """

    def __init__(self, hidden_dim: int, heads: int):
        super().__init__()
        self.cfg = AttentionConfig(hidden_dim, heads)
        self.qkv = init_linear(nn.Linear(hidden_dim, 3 * hidden_dim))
        self.proj = init_linear(nn.Linear(hidden_dim, hidden_dim))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        D, H = self.cfg.hidden_dim, self.cfg.heads
        if h.shape[-1] != D:
            raise DimensionError(f"expected {D} channels, got {h.shape[-1]}")
        if h.shape[-2] < 1:
            raise DimensionError("attention needs at least one token")
        unbatched = h.dim() == 2
        if unbatched:
            h = h.unsqueeze(0)
        B, N, _ = h.shape
        q, k, v = self.qkv(h).reshape(B, N, 3, H, D // H).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(D // H)
        # torch.softmax subtracts the row max internally
        out = torch.softmax(scores, dim=-1) @ v
        out = self.proj(out.transpose(1, 2).reshape(B, N, D))
        return out[0] if unbatched else out


class MLP(nn.Module):
    def __init__(self, hidden_dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = init_linear(nn.Linear(hidden_dim, ratio * hidden_dim))
        self.fc2 = init_linear(nn.Linear(ratio * hidden_dim, hidden_dim))

    def forward(self, h):
        if h.shape[-1] != self.fc1.in_features:
            raise DimensionError(f"expected {self.fc1.in_features} channels, got {h.shape[-1]}")
        return self.fc2(gelu_tanh(self.fc1(h)))


def param_store(module: nn.Module) -> "OrderedDict[str, nn.Parameter]":
    """Parameters keyed by name in lexicographic order."""
    return OrderedDict(sorted(module.named_parameters(), key=lambda kv: kv[0]))


def backward(loss: torch.Tensor) -> None:
    if loss.dim() != 0:
        raise DimensionError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None and not loss.requires_grad:
        raise StateError("loss carries no graph; run the forward pass first")
    loss.backward()
