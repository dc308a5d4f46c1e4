import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedbaf.data import Dataset
from fedbaf.model import (
    MASK_SENTINEL,
    ClassMask,
    ConfigError,
    LayerSpec,
    ModelSchema,
    ParamVector,
    add,
    evaluate,
    forward,
    init_params,
    linear_schema,
    loss_and_grad,
    mlp_schema,
    norm2,
    normalize,
    scale,
    sgd_epoch,
    softmax,
    zeros,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_schema_counts_and_macs():
    s = mlp_schema(5, 7, 3)
    assert s.size == 5 * 7 + 7 + 7 * 3 + 3
    assert s.macs_per_sample == 5 * 7 + 7 * 3
    assert s.kind == "mlp" and linear_schema(5, 3).kind == "linear"


def test_compatibility_requires_name_and_shape():
    a, b = mlp_schema(5, 7, 3), mlp_schema(5, 7, 4)
    assert a.compatible_layers(b) == ["hidden.weight", "hidden.bias"]
    assert linear_schema(5, 3).compatible_layers(a) == ["out.bias"]
    assert linear_schema(5, 4).compatible_layers(a) == []


def test_schema_rejects_duplicates_and_empty_shapes():
    with pytest.raises(ConfigError):
        ModelSchema((LayerSpec("a", (2,)), LayerSpec("a", (3,))), 2, 2)
    with pytest.raises(ConfigError):
        LayerSpec("a", (0, 3))


def test_param_vector_validates():
    s = linear_schema(2, 2)
    with pytest.raises(ConfigError):
        ParamVector(s, np.zeros(5))
    with pytest.raises(FloatingPointError):
        ParamVector(s, np.full(6, np.nan))
    v = zeros(s)
    with pytest.raises(ValueError):
        v.values[0] = 1.0


def test_forward_zero_weights_give_zero_logits():
    w = zeros(linear_schema(4, 3))
    assert np.array_equal(forward(w, np.arange(4.0)), np.zeros(3))


def test_forward_scalar_layer():
    w = ParamVector(linear_schema(1, 1), np.array([2.0, 0.0]))
    assert forward(w, [3.0])[0] == 6.0


def test_forward_dimension_mismatch():
    with pytest.raises(ConfigError):
        forward(zeros(linear_schema(4, 3)), np.ones(5))


def test_mask_sets_sentinel_and_softmax_vanishes(rng):
    w = init_params(mlp_schema(4, 6, 3), rng)
    mask = ClassMask.of([0, 1], 3)
    logits = forward(w, rng.standard_normal(4), mask)
    assert logits[2] == MASK_SENTINEL
    assert softmax(logits)[2] < 1e-12


def test_uniform_logits_loss_is_log_c():
    C = 7
    loss, _ = loss_and_grad(zeros(linear_schema(3, C)), (np.ones((4, 3)), [0, 1, 2, 6]))
    assert loss == pytest.approx(math.log(C), abs=1e-12)


def test_single_sample_linear_gradient_closed_form(rng):
    D, C = 4, 3
    w = init_params(linear_schema(D, C), rng)
    x, y = rng.standard_normal(D), 2
    _, g = loss_and_grad(w, (x[None, :], [y]))
    p = softmax(x @ w.layer("out.weight") + w.layer("out.bias"))
    onehot = np.eye(C)[y]
    np.testing.assert_allclose(g.layer("out.weight"), np.outer(x, p - onehot), atol=1e-12)
    np.testing.assert_allclose(g.layer("out.bias"), p - onehot, atol=1e-12)


@pytest.mark.parametrize("schema", [linear_schema(6, 4), mlp_schema(6, 5, 4)])
@pytest.mark.parametrize("masked", [False, True])
def test_gradient_matches_central_differences(schema, masked):
    rng = np.random.default_rng(7)
    w = init_params(schema, rng).with_values(rng.standard_normal(schema.size) * 0.5)
    mask = ClassMask.of([0, 2, 3], 4) if masked else None
    x = rng.standard_normal((10, 6))
    y = rng.choice([0, 2, 3], size=10)
    _, g = loss_and_grad(w, (x, y), mask)
    h = 1e-5
    worst = 0.0
    for j in rng.choice(schema.size, size=20, replace=False):
        up, down = w.values.copy(), w.values.copy()
        up[j] += h
        down[j] -= h
        fd = (loss_and_grad(w.with_values(up), (x, y), mask)[0]
              - loss_and_grad(w.with_values(down), (x, y), mask)[0]) / (2 * h)
        denom = max(abs(fd), abs(g.values[j]), 1e-6)
        worst = max(worst, abs(fd - g.values[j]) / denom)
    assert worst < 1e-4


def test_masked_label_rejected():
    w = zeros(linear_schema(2, 3))
    with pytest.raises(ConfigError):
        loss_and_grad(w, (np.ones((1, 2)), [2]), ClassMask.of([0, 1], 3))


def _toy_data(rng, n=40, D=3, C=3):
    return Dataset(rng.standard_normal((n, D)), rng.integers(0, C, n), C)


def test_sgd_zero_lr_is_identity(rng):
    w = init_params(linear_schema(3, 3), rng)
    out = sgd_epoch(w, _toy_data(rng), 0.0, 8, np.random.default_rng(0))
    assert np.array_equal(out.values, w.values)


def test_sgd_is_deterministic(rng):
    w = init_params(mlp_schema(3, 4, 3), rng)
    data = _toy_data(rng)
    a = sgd_epoch(w, data, 0.1, 8, np.random.default_rng(5))
    b = sgd_epoch(w, data, 0.1, 8, np.random.default_rng(5))
    assert a.values.tobytes() == b.values.tobytes()


def test_prox_pulls_toward_anchor(rng):
    s = linear_schema(3, 3)
    anchor = init_params(s, rng)
    w = anchor.with_values(anchor.values + 0.01 * rng.standard_normal(s.size))
    data = _toy_data(rng, n=4)
    lr, mu = 1e-7, 1e6  # lr * mu = 0.1: one step removes 10% of the offset
    out = sgd_epoch(w, data, lr, 4, np.random.default_rng(0), prox=(mu, anchor))
    assert norm2(out.values - anchor.values) < norm2(w.values - anchor.values)
    np.testing.assert_allclose(out.values - anchor.values,
                               0.9 * (w.values - anchor.values), rtol=1e-4, atol=1e-9)


def test_sgd_rejects_empty_dataset(rng):
    empty = Dataset(np.zeros((0, 3)), np.zeros(0, dtype=int), 3)
    with pytest.raises(ConfigError):
        sgd_epoch(zeros(linear_schema(3, 3)), empty, 0.1, 4, rng)


def test_vec_op_examples():
    s = linear_schema(1, 1)
    assert norm2(ParamVector(s, np.array([3.0, 4.0]))) == 5.0
    z = zeros(s)
    assert np.array_equal(normalize(z).values, z.values)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 6, elements=finite), st.floats(-10, 10, allow_nan=False))
def test_vec_ops_properties(values, c):
    v = ParamVector(linear_schema(2, 2), values)
    assert np.array_equal(add(scale(v, -1.0), v).values, np.zeros(6))
    assert norm2(scale(v, c)) == pytest.approx(abs(c) * norm2(v), rel=1e-9, abs=1e-9)
    n = normalize(v)
    if norm2(v) > 1e-12:
        assert norm2(n) == pytest.approx(1.0, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(-5, 5)),
       arrays(np.float64, 3, elements=st.floats(-5, 5)),
       st.floats(-4, 4, allow_nan=False))
def test_linear_forward_is_linear_in_weights(values, x, c):
    w = ParamVector(linear_schema(3, 3), values)
    np.testing.assert_allclose(forward(scale(w, c), x), c * forward(w, x), atol=1e-9)


def test_constant_logits_accuracy_quarter():
    test = Dataset(np.ones((8, 2)), np.repeat(np.arange(4), 2), 4)
    assert evaluate(zeros(linear_schema(2, 4)), test) == 0.25


def test_generating_weights_classify_separable_data(rng):
    W = np.array([[1.0, -1.0], [-1.0, 1.0]])
    x = rng.uniform(0.5, 2.0, size=(50, 2)) * rng.choice([-1, 1], size=(50, 1)) * np.array([1, -1])
    y = (x[:, 0] < 0).astype(int)
    w = ParamVector(linear_schema(2, 2), np.concatenate([W.reshape(-1), [0.0, 0.0]]))
    assert evaluate(w, Dataset(x, y, 2)) == 1.0
