"""scikit-learn style wrappers around the two training stages.

``WaypointPCA`` is a transformer from images to per-patch waypoints,
``WaypointRegressor`` fits the waypoint generator and ``PixelFlowGenerator``
fits the pixel generator (with or without waypoints) and samples images.
"""
from dataclasses import replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .backbone import BackboneConfig
from .checkpoint import Checkpoint
from .data import ImageDataset
from .nn import DimensionError
from .sampler import FlowModels, SamplerConfig, sample
from .training import (DTYPES, TrainConfig, frozen_copy, models_from_checkpoint, state_to_checkpoint,
                       train_pixel, train_waypoints, waypoint_net_from_checkpoint, with_waypoints)
from .waypoints import ToyFeatureExtractor, WaypointGeneratorConfig, WaypointProjection, fit_pca


def check_images(X, dtype=np.float32) -> np.ndarray:
    """Validate a stack of square RGB images ``[M, H, H, 3]``."""
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_2d=False)
    if X.ndim != 4 or X.shape[-1] != 3 or X.shape[1] != X.shape[2]:
        raise DimensionError(f"expected images [M, H, H, 3], got {X.shape}")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = check_array(y, ensure_2d=False, dtype=np.int64).reshape(-1)
    if len(y) != n:
        raise DimensionError(f"{len(y)} labels for {n} images")
    if (y < 0).any():
        raise ValueError("training labels must be non-negative class indices")
    return y


class WaypointPCA(TransformerMixin, BaseEstimator):
    """Frozen toy feature extractor followed by a per-patch PCA projection."""

    def __init__(self, n_components=16, patch_size=8, feature_dim=128, extractor_seed=0,
                 normalize=True, max_samples=None, random_state=0):
        self.n_components = n_components
        self.patch_size = patch_size
        self.feature_dim = feature_dim
        self.extractor_seed = extractor_seed
        self.normalize = normalize
        self.max_samples = max_samples
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_images(X)
        if X.shape[1] % self.patch_size:
            raise DimensionError(f"image size {X.shape[1]} not divisible by patch {self.patch_size}")
        if self.max_samples is not None and self.max_samples < len(X):
            rows = np.random.default_rng(self.random_state).choice(len(X), self.max_samples, replace=False)
            X = X[np.sort(rows)]
        self.extractor_ = ToyFeatureExtractor(self.patch_size, self.feature_dim, self.extractor_seed)
        feats = self.extractor_(X).reshape(-1, self.feature_dim)
        self.projection_ = fit_pca(feats, self.n_components, self.normalize)
        self.image_size_ = X.shape[1]
        self.n_samples_seen_ = len(X)
        return self

    @property
    def components_(self):
        return self.projection_.components

    @property
    def mean_(self):
        return self.projection_.mean

    @property
    def explained_variance_(self):
        return self.projection_.explained_variance

    def transform(self, X) -> np.ndarray:
        """Images ``[M, H, W, 3]`` to waypoints ``[M, N, d]``."""
        check_is_fitted(self, "projection_")
        X = check_images(X)
        return self.projection_.project(self.extractor_(X)).astype(np.float32)

    def inverse_transform(self, S) -> np.ndarray:
        """Waypoints back to (rank-d approximations of) patch features."""
        check_is_fitted(self, "projection_")
        return self.projection_.reconstruct(S)

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "projection_")
        p = self.projection_
        return Checkpoint("projection", {
            "params": self.get_params(), "extractor": self.extractor_.get_config(),
            "image_size": self.image_size_, "n_samples_seen": self.n_samples_seen_,
            "warnings": p.warnings},
            {"components": p.components, "mean": p.mean,
             "explained_variance": p.explained_variance, "scale": p.scale})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "WaypointPCA":
        if ckpt.kind != "projection":
            raise ValueError(f"expected a projection checkpoint, got {ckpt.kind!r}")
        est = cls(**ckpt.config["params"])
        t = {k: v.astype(np.float64) for k, v in ckpt.tensors.items()}
        est.projection_ = WaypointProjection(t["components"], t["mean"], t["explained_variance"],
                                             t["scale"], list(ckpt.config.get("warnings", [])))
        est.extractor_ = ToyFeatureExtractor(**ckpt.config["extractor"])
        est.image_size_ = ckpt.config["image_size"]
        est.n_samples_seen_ = ckpt.config["n_samples_seen"]
        return est


def _train_config(cfg, stage) -> TrainConfig:
    return replace(cfg or TrainConfig(), stage=stage)


class WaypointRegressor(BaseEstimator):
    """Waypoint generator: predicts clean-image waypoints from a noisy state.

    ``pca`` must be a fitted ``WaypointPCA``; its extractor and basis define
    the targets.
    """

    def __init__(self, pca=None, depth=2, hidden_dim=64, heads=4, mlp_ratio=4, num_classes=None,
                 train_config=None, steps=None):
        self.pca = pca
        self.depth = depth
        self.hidden_dim = hidden_dim
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.num_classes = num_classes
        self.train_config = train_config
        self.steps = steps

    def fit(self, X, y, callback=None):
        if self.pca is None:
            raise ValueError("a fitted WaypointPCA is required")
        check_is_fitted(self.pca, "projection_")
        X = check_images(X)
        y = check_labels(y, len(X))
        C = self.num_classes or int(y.max()) + 1
        self.model_config_ = WaypointGeneratorConfig(
            depth=self.depth, hidden_dim=self.hidden_dim, heads=self.heads,
            patch_size=self.pca.patch_size, num_classes=C, image_size=X.shape[1],
            waypoint_dim=self.pca.n_components, mlp_ratio=self.mlp_ratio)
        self.train_config_ = _train_config(self.train_config, "waypoints")
        self.state_ = train_waypoints(ImageDataset(X, y), self.pca.projection_, self.pca.extractor_,
                                      self.model_config_, self.train_config_, steps=self.steps,
                                      callback=callback)
        self.net_ = frozen_copy(self.state_.net, self.state_.ema)
        self.n_classes_ = C
        return self

    def predict(self, Z, t, y) -> np.ndarray:
        """EMA-weight waypoint prediction ``[M, N, d]`` for states ``Z`` at times ``t``."""
        check_is_fitted(self, "net_")
        dt = DTYPES[self.train_config_.dtype]
        with torch.no_grad():
            out = self.net_(torch.as_tensor(check_images(Z)).to(dt), t, torch.as_tensor(y))
        return out.numpy()

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "state_")
        ck = state_to_checkpoint(self.state_, "waypoints", self.model_config_, self.train_config_)
        proj = self.pca.to_checkpoint()
        ck.config["projection"] = proj.config
        ck.tensors.update({f"projection/{k}": v for k, v in proj.tensors.items()})
        return ck

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "WaypointRegressor":
        """Inference-only estimator (EMA weights) from a waypoint checkpoint."""
        if ckpt.kind != "waypoints":
            raise ValueError(f"expected a waypoints checkpoint, got {ckpt.kind!r}")
        m = ckpt.config["model"]
        train_cfg = TrainConfig.from_dict(ckpt.config["train"])
        pca = None
        if "projection" in ckpt.config:
            pca = WaypointPCA.from_checkpoint(Checkpoint("projection", ckpt.config["projection"], {
                k.split("/", 1)[1]: v for k, v in ckpt.tensors.items() if k.startswith("projection/")}))
        est = cls(pca=pca, depth=m["depth"], hidden_dim=m["hidden_dim"], heads=m["heads"],
                  mlp_ratio=m["mlp_ratio"], num_classes=m["num_classes"], train_config=train_cfg)
        est.model_config_ = WaypointGeneratorConfig(**m)
        est.train_config_ = train_cfg
        est.net_ = waypoint_net_from_checkpoint(ckpt, "ema", DTYPES[train_cfg.dtype])
        est.n_classes_ = m["num_classes"]
        return est


class PixelFlowGenerator(BaseEstimator):
    """Pixel generator trained by flow matching.

    With ``waypoints`` set to a fitted ``WaypointRegressor`` the generator is
    modulated by its (frozen) predictions; with None it is the plain
    globally conditioned baseline.
    """

    def __init__(self, waypoints=None, depth=4, hidden_dim=128, heads=4, patch_size=8, bottleneck=128,
                 mlp_ratio=4, waypoint_dim=16, injection="adaln", num_classes=None,
                 train_config=None, steps=None):
        self.waypoints = waypoints
        self.depth = depth
        self.hidden_dim = hidden_dim
        self.heads = heads
        self.patch_size = patch_size
        self.bottleneck = bottleneck
        self.mlp_ratio = mlp_ratio
        self.waypoint_dim = waypoint_dim
        self.injection = injection
        self.num_classes = num_classes
        self.train_config = train_config
        self.steps = steps

    def fit(self, X, y, callback=None):
        X = check_images(X)
        y = check_labels(y, len(X))
        wp_net, patch, wdim = None, self.patch_size, self.waypoint_dim
        C = self.num_classes or int(y.max()) + 1
        if self.waypoints is not None:
            check_is_fitted(self.waypoints, "net_")
            wc = self.waypoints.model_config_
            wp_net, patch, wdim, C = self.waypoints.net_, wc.patch_size, wc.waypoint_dim, wc.num_classes
        self.model_config_ = BackboneConfig(
            depth=self.depth, hidden_dim=self.hidden_dim, heads=self.heads, patch_size=patch,
            bottleneck=self.bottleneck, num_classes=C, image_size=X.shape[1], waypoint_dim=wdim,
            mlp_ratio=self.mlp_ratio, injection=self.injection)
        self.train_config_ = _train_config(self.train_config, "pixel")
        self.state_ = train_pixel(ImageDataset(X, y), wp_net, self.model_config_, self.train_config_,
                                  steps=self.steps, callback=callback)
        self.waypoint_net_ = wp_net
        self.n_classes_ = C
        return self

    @property
    def models_(self) -> FlowModels:
        """Frozen EMA pixel generator paired with the frozen waypoint generator."""
        check_is_fitted(self, "state_")
        return FlowModels(frozen_copy(self.state_.net, self.state_.ema), self.waypoint_net_)

    def sample(self, y, sampler_config: SamplerConfig | None = None) -> np.ndarray:
        check_is_fitted(self, "state_")
        cfg = sampler_config or SamplerConfig()
        if cfg.noise_scale is None and self.train_config_.noise_scale >= 0:
            cfg = replace(cfg, noise_scale=self.train_config_.noise_scale)
        images, _ = sample(self.models_, y, cfg, trace=False)
        return images.numpy()

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "state_")
        ck = state_to_checkpoint(self.state_, "pixel", self.model_config_, self.train_config_)
        return with_waypoints(ck, self.waypoint_net_)

    @staticmethod
    def models_from_checkpoint(ckpt: Checkpoint, use_ema: bool = True) -> FlowModels:
        return models_from_checkpoint(ckpt, use_ema)
