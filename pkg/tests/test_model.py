"""Forward pass, parameter blending, and parameter-container invariants."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from streamgate.model import (
    VAR_FLOOR,
    ModelParams,
    blend_parameters,
    params_equal,
    params_fingerprint,
    predict,
)
from doubles import tiny_params


def flat_params(dim=3, num_classes=4, **overrides):
    base = dict(
        mu=np.zeros(dim),
        var=np.ones(dim),
        gamma=np.ones(dim),
        beta=np.zeros(dim),
        W=np.zeros((num_classes, dim)),
        b=np.zeros(num_classes),
    )
    base.update(overrides)
    return ModelParams(**base)


def test_zero_weights_give_uniform_probabilities_and_label_zero():
    params = flat_params()
    labels, probs = predict(params, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.allclose(probs, 0.25)
    assert np.all(labels == 0)  # lowest-index tie break


def test_two_class_threshold_model_confident_far_from_boundary():
    params = ModelParams(
        mu=np.zeros(1), var=np.ones(1), gamma=np.ones(1), beta=np.zeros(1),
        W=np.array([[1.0], [-1.0]]), b=np.zeros(2),
    )
    labels, probs = predict(params, np.array([[10.0]]))
    # Closed form: p(class 0) = 1 / (1 + exp(-20)).
    assert labels[0] == 0
    assert probs[0, 0] > 0.99
    assert probs[0, 0] == pytest.approx(1.0 / (1.0 + np.exp(-20.0)))


def test_probabilities_invariant_to_constant_logit_shift():
    params = tiny_params(seed=3)
    shifted = params.copy()
    shifted.b = shifted.b + 7.5
    x = np.random.default_rng(1).normal(size=(6, 4))
    _, p1 = predict(params, x)
    _, p2 = predict(shifted, x)
    assert np.allclose(p1, p2, atol=1e-12)


def test_probability_rows_sum_to_one():
    params = tiny_params(seed=4)
    x = np.random.default_rng(2).normal(size=(64, 4)) * 50.0
    _, probs = predict(params, x)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_predict_rejects_non_finite_features():
    params = flat_params()
    bad = np.zeros((2, 3))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        predict(params, bad)


def test_predict_rejects_wrong_width():
    with pytest.raises(ValueError):
        predict(flat_params(dim=3), np.zeros((2, 4)))


def test_blend_alpha_zero_returns_adapted_exactly():
    theta, theta_hat = tiny_params(seed=1), tiny_params(seed=2)
    out = blend_parameters(theta, theta_hat, 0.0)
    assert params_equal(out, theta_hat)
    assert out is not theta_hat


def test_blend_alpha_one_returns_current_exactly():
    theta, theta_hat = tiny_params(seed=1), tiny_params(seed=2)
    assert params_equal(blend_parameters(theta, theta_hat, 1.0), theta)


def test_blend_midpoint_scalar_field():
    theta = flat_params(beta=np.zeros(3))
    theta_hat = flat_params(beta=np.full(3, 2.0))
    assert np.allclose(blend_parameters(theta, theta_hat, 0.5).beta, 1.0)


@given(st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
def test_blend_convexity(alpha):
    theta, theta_hat = tiny_params(seed=5), tiny_params(seed=6)
    out = blend_parameters(theta, theta_hat, alpha)
    for name in ("mu", "var", "gamma", "beta", "W", "b"):
        a, b, c = getattr(theta, name), getattr(theta_hat, name), getattr(out, name)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        assert np.all(c >= lo - 1e-12) and np.all(c <= hi + 1e-12)


def test_blend_keeps_variance_at_floor():
    theta = flat_params(var=np.full(3, VAR_FLOOR))
    theta_hat = flat_params(var=np.full(3, VAR_FLOOR))
    assert np.all(blend_parameters(theta, theta_hat, 0.5).var >= VAR_FLOOR)


def test_blend_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        blend_parameters(flat_params(dim=3), flat_params(dim=4), 0.5)


def test_blend_rejects_alpha_out_of_range():
    with pytest.raises(ValueError):
        blend_parameters(tiny_params(), tiny_params(), 1.5)


def test_params_validation():
    with pytest.raises(ValueError):
        flat_params(var=np.zeros(3))  # variance must be strictly positive
    with pytest.raises(ValueError):
        flat_params(mu=np.array([0.0, np.inf, 0.0]))
    with pytest.raises(ValueError):
        flat_params(b=np.zeros(5))  # K mismatch


def test_copy_is_independent():
    params = tiny_params(seed=7)
    clone = params.copy()
    clone.beta[0] += 1.0
    assert not params_equal(params, clone)


def test_fingerprint_tracks_bit_equality():
    a, b = tiny_params(seed=8), tiny_params(seed=8)
    assert params_fingerprint(a) == params_fingerprint(b)
    b.gamma[0] = np.nextafter(b.gamma[0], 2.0)
    assert params_fingerprint(a) != params_fingerprint(b)
