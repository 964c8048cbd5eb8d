"""Semantic waypoints: frozen patch features, their PCA subspace, and the
small transformer that predicts them from noisy pixels."""
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import (ConditionEmbedder, GlobalAdaLNBlock, PatchEmbed, as_label_vector,
                       as_time_vector, patchify_raw)
from .nn import DimensionError, RMSNorm, init_linear

log = logging.getLogger(__name__)


class InsufficientDataError(ValueError):
    pass


class RankDeficiencyWarning(UserWarning):
    pass


class ToyFeatureExtractor:
    """Deterministic stand-in for a pretrained patch encoder.

    Each non-overlapping patch is flattened, sent through a fixed random
    semi-orthogonal map to ``feature_dim`` channels, then through ``tanh``.
    No bias, so a zero image maps to zero features, and tokens never mix.
    """

    def __init__(self, patch_size: int = 8, feature_dim: int = 128, seed: int = 0, gain: float = 0.5):
        self.patch_size = patch_size
        self.feature_dim = feature_dim
        self.seed = seed
        self.gain = gain
        in_dim = 3 * patch_size ** 2
        rng = np.random.default_rng(seed)
        tall = rng.standard_normal((max(in_dim, feature_dim), min(in_dim, feature_dim)))
        q, r = np.linalg.qr(tall)
        q = q * np.sign(np.diag(r))
        self.weight = q if in_dim >= feature_dim else q.T   # [in_dim, feature_dim]

    def __call__(self, images) -> np.ndarray:
        x = torch.as_tensor(np.asarray(images, dtype=np.float64))
        single = x.dim() == 3
        if single:
            x = x[None]
        H, W = x.shape[1:3]
        if H % self.patch_size or W % self.patch_size:
            raise DimensionError(f"{H}x{W} image not divisible by patch size {self.patch_size}")
        patches = patchify_raw(x, self.patch_size).numpy()
        feats = np.tanh(self.gain * patches @ self.weight)
        return feats[0] if single else feats

    def get_config(self):
        return {"patch_size": self.patch_size, "feature_dim": self.feature_dim,
                "seed": self.seed, "gain": self.gain}


@dataclass
class WaypointProjection:
    """PCA basis ``components`` [D, d] with feature mean [D].

    ``scale`` holds per-component standard deviations used to whiten the
    projected waypoints (all ones when normalisation is off).
    """
    components: np.ndarray
    mean: np.ndarray
    explained_variance: np.ndarray
    scale: np.ndarray
    warnings: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.components.shape[0]

    def project(self, phi: np.ndarray) -> np.ndarray:
        phi = np.asarray(phi, dtype=np.float64)
        if phi.shape[-1] != self.feature_dim:
            raise DimensionError(f"features have {phi.shape[-1]} channels, basis expects {self.feature_dim}")
        return (phi - self.mean) @ self.components / self.scale

    def reconstruct(self, s: np.ndarray) -> np.ndarray:
        return (np.asarray(s) * self.scale) @ self.components.T + self.mean


def fit_pca(features, d: int, normalize: bool = True) -> WaypointProjection:
    """Top-``d`` principal directions by exact eigendecomposition of the covariance.

    Columns are ordered by decreasing eigenvalue and signed so that each
    column's largest-magnitude entry is positive.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError("features must be a [samples, channels] matrix")
    M, D = X.shape
    if d > D:
        raise DimensionError(f"cannot keep {d} components of {D}-dim features")
    if M <= d:
        raise InsufficientDataError(f"{M} samples cannot support {d} components")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (M - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:d]
    evals = np.clip(evals[order], 0.0, None)
    U = evecs[:, order]
    pivot = np.abs(U).argmax(axis=0)
    U = U * np.where(U[pivot, np.arange(d)] < 0, -1.0, 1.0)

    notes = []
    tol = max(float(evals.max(initial=0.0)) * D * np.finfo(float).eps * 10, np.finfo(float).tiny)
    rank = int((evals > tol).sum())
    if rank < d:
        # eigh already returns an orthonormal basis for the null space; keep it
        msg = f"covariance rank {rank} < {d}; padded with an arbitrary orthonormal complement"
        warnings.warn(msg, RankDeficiencyWarning, stacklevel=2)
        log.warning(msg)
        notes.append(msg)
    scale = np.ones(d)
    if normalize:
        scale = np.where(evals > tol, np.sqrt(np.maximum(evals, tol)), 1.0)
    return WaypointProjection(U, mean, evals, scale, notes)


def project_waypoint(phi_x, proj: WaypointProjection) -> np.ndarray:
    return proj.project(phi_x)


@dataclass(frozen=True)
class WaypointGeneratorConfig:
    depth: int = 2
    hidden_dim: int = 64
    heads: int = 4
    patch_size: int = 8
    num_classes: int = 4
    image_size: int = 32
    waypoint_dim: int = 16
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise DimensionError("image_size must be divisible by patch_size")
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_tokens(self):
        return self.grid ** 2

    def to_dict(self):
        return asdict(self)


class WaypointGenerator(nn.Module):
    """Small ViT that reads ``z_t`` and predicts the clean waypoint [B, N, d].

    Conditioning is ordinary (global) AdaLN on e(t, y). The output head is
    zero-initialised, so an untrained generator predicts all-zero waypoints.
    """

    def __init__(self, cfg: WaypointGeneratorConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.hidden_dim
        self.embed = PatchEmbed(3 * cfg.patch_size ** 2, D, D, cfg.grid)
        self.cond = ConditionEmbedder(D, cfg.num_classes)
        self.blocks = nn.ModuleList(
            GlobalAdaLNBlock(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.final_norm = RMSNorm(D)
        self.head = init_linear(nn.Linear(D, cfg.waypoint_dim), zero=True)

    def forward(self, z_t: torch.Tensor, t, y) -> torch.Tensor:
        B = z_t.shape[0]
        if z_t.shape[1] != self.cfg.image_size or z_t.shape[2] != self.cfg.image_size:
            raise DimensionError(f"expected {self.cfg.image_size}px input, got {tuple(z_t.shape[1:3])}")
        c = self.cond(as_time_vector(t, B, z_t.dtype), as_label_vector(y, B))
        h = self.embed(patchify_raw(z_t, self.cfg.patch_size))
        for block in self.blocks:
            h = block(h, c)
        return self.head(self.final_norm(h))
