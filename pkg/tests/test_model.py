from __future__ import annotations

import numpy as np
import pytest

from opendg import numerics as nx
from opendg.errors import DimensionError
from opendg.model import ModelEnsemble, ensemble_predict, init_model, load_models, save_models
from opendg.numerics import Tensor


def test_init_is_deterministic_with_zero_biases():
    a, b = init_model(5, seed=7), init_model(5, seed=7)
    for p, q in zip(a.params, b.params):
        np.testing.assert_array_equal(p.values, q.values)
    for bias in a.extractor.biases + a.classifier.biases:
        assert not bias.values.any()


def test_glorot_bounds_and_param_count():
    m = init_model(10, feature_dim=64, num_classes=6, seed=0)
    w = m.extractor.weights[0].values
    assert np.abs(w).max() <= np.sqrt(6 / (10 + 64))
    assert m.extractor.num_params + m.classifier.num_params == sum(p.values.size for p in m.params)


def test_zero_input_gives_zero_logits():
    m = init_model(4, seed=1)
    np.testing.assert_array_equal(m.logits(np.zeros((2, 4))).values, 0.0)


def test_features_shape_and_width_error():
    m = init_model(4, seed=1)
    assert m.features(np.ones((1, 4))).shape == (1, 64)
    with pytest.raises(DimensionError):
        m.features(np.ones((2, 3)))


def test_logits_compose_exactly():
    m = init_model(4, seed=2)
    x = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_array_equal(m.logits(x).values, m.logits_from_features(m.features(x)).values)
    np.testing.assert_array_equal(m.logits(np.tile(x[:1], (3, 1))).values[0], m.logits(np.tile(x[:1], (3, 1))).values[2])


def test_feature_gradient_matches_finite_differences():
    m = init_model(3, feature_dim=4, num_classes=2, seed=3, hidden=(5,))
    x = np.random.default_rng(1).normal(size=(2, 3))
    rep = nx.grad_check(lambda t: nx.tsum(nx.mul(m.features(t), m.features(t))), x)
    assert rep.passed


def test_ensemble_single_member_and_duplicates():
    x = np.random.default_rng(0).normal(size=(6, 4))
    a = init_model(4, seed=5)
    np.testing.assert_allclose(ensemble_predict([a], x), a.predict_proba(x), atol=1e-15)
    twin = a.snapshot()
    np.testing.assert_allclose(ensemble_predict([a, twin], x), a.predict_proba(x), atol=1e-15)


def test_ensemble_of_confident_disagreeing_members_is_uniform_mix():
    members = []
    for k in range(2):
        m = init_model(2, feature_dim=2, num_classes=2, seed=k, hidden=(2,))
        for p in m.params:
            p.values = np.zeros_like(p.values)
        m.classifier.biases[0].values = np.array([[60.0, -60.0]]) if k == 0 else np.array([[-60.0, 60.0]])
        members.append(m)
    np.testing.assert_allclose(ensemble_predict(members, np.ones((3, 2))), 0.5, atol=1e-12)


def test_ensemble_rows_stochastic_and_order_invariant():
    rng = np.random.default_rng(0)
    e = ModelEnsemble.create(3, 4, 8, 5, seeds=[1, 2, 3], hidden=(6,))
    x = rng.normal(size=(10, 4)) * 5
    p = ensemble_predict(e, x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(p, ensemble_predict(list(reversed(e.members)), x))


def test_ensemble_rejects_mixed_architectures():
    with pytest.raises(DimensionError):
        ModelEnsemble([init_model(4, seed=0), init_model(5, seed=0)])


def test_checkpoint_roundtrip_is_exact(tmp_path):
    e = ModelEnsemble.create(2, 3, 4, 2, seeds=[8, 9], hidden=(5,))
    save_models(tmp_path / "m.npz", e.members)
    loaded = load_models(tmp_path / "m.npz")
    for a, b in zip(e.members, loaded):
        for p, q in zip(a.params, b.params):
            np.testing.assert_array_equal(p.values, q.values)
    assert isinstance(loaded[0].logits(Tensor(np.ones((1, 3)))), Tensor)
