import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opmark.ica import (
    DEFAULT_COMPONENTS, DimensionMismatch, ICAModel, InsufficientSamples, fit, transform, transform_matrix,
)
from opmark.markov import FeatureVector


def two_sources(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 8 * np.pi, n)
    S = np.column_stack([np.sign(np.sin(3 * t)), rng.uniform(-1, 1, n)])
    A = np.array([[1.0, 0.6], [0.4, 1.0]])
    return S, S @ A.T


def matched_correlation(S, Y):
    C = np.abs(np.corrcoef(S.T, Y.T)[: S.shape[1], S.shape[1]:])
    # best of the two pairings
    return max((C[0, 0] + C[1, 1]) / 2, (C[0, 1] + C[1, 0]) / 2)


def test_recovers_two_sources():
    S, X = two_sources()
    Y = transform_matrix(fit(X, 2, seed=1), X)
    assert matched_correlation(S, Y) >= 0.95


def test_whitened_output_has_identity_covariance():
    _, X = two_sources(seed=4)
    Y = transform_matrix(fit(X, 2, seed=0), X)
    np.testing.assert_allclose(np.cov(Y.T, bias=True), np.eye(2), atol=1e-8)


def test_unmixing_is_orthogonal():
    rng = np.random.default_rng(2)
    model = fit(rng.laplace(size=(300, 6)), 4, seed=3)
    np.testing.assert_allclose(model.unmixing @ model.unmixing.T, np.eye(4), atol=1e-8)


def test_default_component_count():
    X = np.random.default_rng(0).laplace(size=(120, 200))
    model = fit(X, max_iter=20)
    assert DEFAULT_COMPONENTS == 34
    assert model.n_components == 34 and transform_matrix(model, X).shape == (120, 34)


def test_deterministic_given_seed():
    X = np.random.default_rng(1).laplace(size=(80, 10))
    a, b = fit(X, 5, seed=9), fit(X, 5, seed=9)
    assert np.array_equal(a.components, b.components)


def test_mean_maps_to_zero():
    X = np.random.default_rng(5).standard_normal((50, 7))
    model = fit(X, 3)
    assert np.allclose(transform_matrix(model, model.mean[None, :]), 0.0)


@settings(max_examples=25)
@given(st.integers(0, 1000), st.floats(-3, 3), st.floats(-3, 3))
def test_transform_is_affine(seed, a, b):
    rng = np.random.default_rng(seed)
    model = fit(rng.laplace(size=(40, 5)), 3, seed=seed)
    x, y = rng.standard_normal((2, 5))
    lhs = transform_matrix(model, (model.mean + a * (x - model.mean) + b * (y - model.mean))[None, :])
    rhs = a * transform_matrix(model, x[None, :]) + b * transform_matrix(model, y[None, :])
    np.testing.assert_allclose(lhs, rhs, atol=1e-8)


def test_rank_deficient_data_reduces_components(caplog):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((30, 2)) @ rng.standard_normal((2, 6))
    assert fit(X, 4).n_components == 2


def test_errors():
    X = np.random.default_rng(0).standard_normal((10, 4))
    with pytest.raises(InsufficientSamples):
        fit(X, 11)
    with pytest.raises(DimensionMismatch):
        fit(X, 5)
    with pytest.raises(InsufficientSamples):
        fit(np.ones((10, 4)), 2)
    model = fit(X, 2)
    with pytest.raises(DimensionMismatch):
        transform_matrix(model, np.zeros((1, 3)))


def test_transform_keeps_mode():
    X = np.random.default_rng(0).standard_normal((20, 4))
    model = fit(X, 2)
    out = transform(model, FeatureVector("MM:cfg", X[0]))
    assert out.schema == "ICA-MM:cfg" and len(out) == 2


def test_save_load_bit_identical(tmp_path):
    X = np.random.default_rng(7).laplace(size=(60, 9))
    model = fit(X, 4, seed=2)
    model.save(tmp_path / "m.oic")
    back = ICAModel.load(tmp_path / "m.oic")
    probe = np.random.default_rng(8).standard_normal((50, 9))
    assert transform_matrix(model, probe).tobytes() == transform_matrix(back, probe).tobytes()
