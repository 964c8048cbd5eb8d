import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from wit.checkpoint import decode_checkpoint, encode_checkpoint
from wit.data import ToyDatasetSpec, generate_toy_dataset
from wit.estimators import PixelFlowGenerator, WaypointPCA, WaypointRegressor
from wit.nn import DimensionError
from wit.sampler import SamplerConfig
from wit.training import TrainConfig, models_from_checkpoint
from wit.waypoints import ToyFeatureExtractor, fit_pca


@pytest.fixture(scope="module")
def data():
    return generate_toy_dataset(ToyDatasetSpec(num_classes=3, image_size=8, patch_size=4, samples_per_class=8))


def tc(**kw):
    return TrainConfig(batch_size=8, base_lr=1e-3, warmup_epochs=1, log_every=0, noise_scale=1.0, **kw)


def test_pca_matches_direct(data):
    est = WaypointPCA(n_components=3, patch_size=4, feature_dim=12).fit(data.images)
    feats = ToyFeatureExtractor(4, 12, 0)(data.images)
    proj = fit_pca(feats.reshape(-1, 12), 3)
    assert np.allclose(est.components_, proj.components)
    S = est.transform(data.images)
    assert S.shape == (24, 4, 3)
    assert np.allclose(S, proj.project(feats), atol=1e-5)
    assert est.inverse_transform(S).shape == (24, 4, 12)


def test_pca_params_clone_and_checkpoint(data):
    est = WaypointPCA(n_components=2, patch_size=4, feature_dim=8, max_samples=10)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.transform(data.images)
    est.fit(data.images)
    assert est.n_samples_seen_ == 10
    back = WaypointPCA.from_checkpoint(decode_checkpoint(encode_checkpoint(est.to_checkpoint())))
    assert np.allclose(back.transform(data.images), est.transform(data.images), atol=1e-5)
    with pytest.raises(DimensionError):
        WaypointPCA(patch_size=3).fit(data.images)
    with pytest.raises(DimensionError):
        est.transform(data.images[..., :2])


def test_two_stage_fit_sample_and_checkpoint(data):
    pca = WaypointPCA(n_components=2, patch_size=4, feature_dim=8).fit(data.images)
    wr = WaypointRegressor(pca, depth=1, hidden_dim=16, heads=2, train_config=tc(), steps=3)
    wr.fit(data.images, data.labels)
    s = wr.predict(data.images[:2], 0.5, [0, 1])
    assert s.shape == (2, 4, 2)
    wr2 = WaypointRegressor.from_checkpoint(decode_checkpoint(encode_checkpoint(wr.to_checkpoint())))
    assert np.array_equal(wr2.predict(data.images[:2], 0.5, [0, 1]), s)

    gen = PixelFlowGenerator(wr2, depth=1, hidden_dim=16, heads=2, bottleneck=8, train_config=tc(), steps=3)
    gen.fit(data.images, data.labels)
    assert gen.model_config_.patch_size == 4 and gen.model_config_.waypoint_dim == 2
    imgs = gen.sample([0, 1, 2], SamplerConfig(steps=3))
    assert imgs.shape == (3, 8, 8, 3)
    models = models_from_checkpoint(decode_checkpoint(encode_checkpoint(gen.to_checkpoint())))
    assert models.waypoints is not None
    z = torch.as_tensor(data.images[:2])
    with torch.no_grad():
        a = gen.models_.pixel(z, 0.3, torch.tensor([0, 1]), gen.models_.waypoints(z, 0.3, torch.tensor([0, 1])))
        b = models.pixel(z, 0.3, torch.tensor([0, 1]), models.waypoints(z, 0.3, torch.tensor([0, 1])))
    assert torch.equal(a, b)


def test_baseline_generator(data):
    gen = PixelFlowGenerator(None, depth=1, hidden_dim=16, heads=2, patch_size=4, bottleneck=8,
                             waypoint_dim=2, train_config=tc(), steps=2).fit(data.images, data.labels)
    assert gen.models_.waypoints is None and gen.n_classes_ == 3
    with pytest.raises(NotFittedError):
        PixelFlowGenerator().sample([0])
    with pytest.raises(ValueError):
        PixelFlowGenerator(train_config=tc(), steps=1).fit(data.images, -data.labels - 1)
