import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_pca, best_projection_error
from wit.backbone import LabelError
from wit.flow import NULL_CLASS
from wit.nn import DimensionError
from wit.waypoints import (InsufficientDataError, RankDeficiencyWarning, ToyFeatureExtractor,
                           WaypointGenerator, WaypointGeneratorConfig, WaypointProjection, fit_pca,
                           project_waypoint)


def test_fit_pca_diagonal_covariance():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((4000, 2)) * np.array([2.0, 1.0])
    # whiten the sample so its covariance is exactly diag(4, 1)
    Xc = X - X.mean(0)
    L = np.linalg.cholesky(np.cov(Xc.T))
    X = Xc @ np.linalg.inv(L).T @ np.diag([2.0, 1.0])
    proj = fit_pca(X, 1)
    assert np.allclose(proj.components[:, 0], [1.0, 0.0], atol=1e-8)
    assert proj.explained_variance[0] == pytest.approx(4.0)


def test_fit_pca_sign_convention():
    rng = np.random.default_rng(3)
    proj = fit_pca(rng.standard_normal((50, 5)) @ rng.standard_normal((5, 5)), 3)
    for j in range(3):
        col = proj.components[:, j]
        assert col[np.abs(col).argmax()] > 0


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000), st.data())
def test_fit_pca_matches_brute_force(D, seed, data):
    d = data.draw(st.integers(1, D))
    M = data.draw(st.integers(d + 1, 64))
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((M, D)) @ np.diag(np.linspace(3.0, 0.2, D)) @ np.linalg.qr(
        rng.standard_normal((D, D)))[0]
    spectrum = np.linalg.eigvalsh(np.cov(X.T))[::-1]
    if d < D and spectrum[d - 1] - spectrum[d] < 1e-6:
        return  # subspace not identifiable
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficiencyWarning)
        proj = fit_pca(X, d, normalize=False)
    U = proj.components
    assert np.allclose(U.T @ U, np.eye(d), atol=1e-8)
    assert np.all(np.diff(proj.explained_variance) <= 1e-12)
    U_ref, _ = brute_force_pca(X, d)
    assert np.linalg.norm(U @ U.T - U_ref @ U_ref.T) < 1e-8


def test_fit_pca_minimal_reconstruction_error():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((40, 5)) @ rng.standard_normal((5, 5))
    proj = fit_pca(X, 2, normalize=False)
    Xc = X - X.mean(0)
    err = np.linalg.norm(Xc - Xc @ proj.components @ proj.components.T)
    _, evals = brute_force_pca(X, 2)
    assert err ** 2 == pytest.approx(evals[2:].sum() * (len(X) - 1), rel=1e-9)
    assert err <= best_projection_error(X, 2) + 1e-12


def test_fit_pca_errors_and_degenerate():
    with pytest.raises(InsufficientDataError):
        fit_pca(np.zeros((3, 4)), 3)
    with pytest.raises(DimensionError):
        fit_pca(np.zeros((10, 2)), 3)
    with pytest.warns(RankDeficiencyWarning):
        proj = fit_pca(np.tile([[1.0, 2.0, 3.0]], (10, 1)), 2)
    assert proj.warnings
    assert np.allclose(proj.components.T @ proj.components, np.eye(2), atol=1e-10)


def test_fit_pca_normalization_gives_unit_variance():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((500, 6)) * np.arange(1, 7)
    s = fit_pca(X, 3).project(X)
    assert np.allclose(s.var(axis=0, ddof=1), 1.0, atol=1e-10)


def test_project_waypoint_examples():
    rng = np.random.default_rng(0)
    mu = rng.standard_normal(4)
    U = np.linalg.qr(rng.standard_normal((4, 2)))[0]
    proj = WaypointProjection(U, mu, np.ones(2), np.ones(2))
    assert np.allclose(project_waypoint(np.tile(mu, (3, 1)), proj), 0)
    ident = WaypointProjection(np.eye(4), np.zeros(4), np.ones(4), np.ones(4))
    phi = rng.standard_normal((3, 4))
    assert np.allclose(project_waypoint(phi, ident), phi)
    s = rng.standard_normal((5, 2))
    assert np.allclose(proj.project(proj.reconstruct(s)), s, atol=1e-12)
    with pytest.raises(DimensionError):
        project_waypoint(np.zeros((3, 5)), proj)


def test_feature_extractor_properties():
    ext = ToyFeatureExtractor(patch_size=4, feature_dim=16, seed=3)
    rng = np.random.default_rng(0)
    img = rng.uniform(-1, 1, (8, 8, 3))
    assert np.array_equal(ext(img), ext(img))
    other = img.copy()
    other[:4, 4:] = 0.0            # top-right patch is token 1
    diff = np.abs(ext(img) - ext(other)).max(axis=1)
    assert diff[1] > 0 and np.all(diff[[0, 2, 3]] == 0)
    assert np.all(ext(np.zeros((8, 8, 3))) == 0)
    assert ext(img).shape == (4, 16)
    with pytest.raises(DimensionError):
        ext(np.zeros((6, 8, 3)))


def test_feature_extractor_map_is_semi_orthogonal():
    for P, D in [(4, 16), (4, 128), (2, 4)]:
        W = ToyFeatureExtractor(P, D).weight
        small = min(W.shape)
        gram = W.T @ W if W.shape[0] >= W.shape[1] else W @ W.T
        assert np.allclose(gram, np.eye(small), atol=1e-10)


def test_waypoint_generator_shapes_and_init():
    cfg = WaypointGeneratorConfig(depth=1, hidden_dim=32, heads=2, patch_size=16, image_size=32,
                                  waypoint_dim=64, num_classes=3)
    net = WaypointGenerator(cfg).double()
    z = torch.randn(2, 32, 32, 3, dtype=torch.float64)
    out = net(z, 0.3, [0, NULL_CLASS])
    assert out.shape == (2, 4, 64)
    assert out.abs().max() == 0
    with pytest.raises(LabelError):
        net(z, 0.3, [0, 3])
