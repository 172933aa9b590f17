import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bhivae.ndgrad import ShapeError
from bhivae.nn import (
    DenseParams,
    MlpSpec,
    glorot_bound,
    init_mlp,
    mlp_forward,
    predictive_entropy,
    softmax_cross_entropy,
)


def test_init_is_deterministic_per_seed():
    spec = MlpSpec((4, 3))
    a, b = init_mlp(spec, 7), init_mlp(spec, 7)
    np.testing.assert_array_equal(a[0].weight, b[0].weight)
    c = init_mlp(spec, 8)
    assert not np.array_equal(a[0].weight, c[0].weight)


def test_glorot_bound_and_range():
    assert glorot_bound(4, 3) == pytest.approx(0.9258200997725514, rel=1e-12)
    w = init_mlp(MlpSpec((4, 3)), 0)[0].weight
    assert np.all(np.abs(w) <= glorot_bound(4, 3))


def test_biases_start_at_zero():
    for layer in init_mlp(MlpSpec((5, 7, 2)), 3):
        assert np.all(layer.bias == 0.0)


def test_zero_weights_output_bias():
    params = [DenseParams(np.zeros((3, 2)), np.array([0.5, -1.5]))]
    out = mlp_forward(params, np.random.default_rng(0).normal(size=(4, 3))).value
    np.testing.assert_array_equal(out, np.tile([0.5, -1.5], (4, 1)))


def test_identity_layer_is_identity():
    x = np.random.default_rng(0).normal(size=(4, 3))
    out = mlp_forward([DenseParams(np.eye(3), np.zeros(3))], x).value
    np.testing.assert_array_equal(out, x)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-50, 50)))
def test_sigmoid_output_in_unit_interval(x):
    spec = MlpSpec((3, 8, 2), output_activation="sigmoid")
    out = mlp_forward(init_mlp(spec, 0), x, spec).value
    assert np.all((out >= 0) & (out <= 1))


def test_width_mismatch():
    with pytest.raises(ShapeError):
        mlp_forward(init_mlp(MlpSpec((3, 2)), 0), np.ones((2, 4)))


def test_cross_entropy_values():
    assert softmax_cross_entropy(np.zeros((2, 10)), [3, 7]).value == pytest.approx(np.log(10), rel=1e-12)
    assert softmax_cross_entropy(np.array([[1.0, 1.0]]), [0]).value == pytest.approx(0.6931471805599453, rel=1e-12)
    assert softmax_cross_entropy(np.array([[60.0, 0.0, 0.0]]), [0]).value < 1e-20


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((1, 3)), [3])


def test_entropy_values():
    assert predictive_entropy(np.zeros((4, 3))).value == pytest.approx(np.log(3), rel=1e-12)
    assert predictive_entropy(np.array([[60.0, 0.0, 0.0]])).value < 1e-20
    assert predictive_entropy(np.array([[np.log(3), 0.0]])).value == pytest.approx(0.5623351446188083, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-20, 20)))
def test_entropy_bounded_by_log_n(logits):
    assert predictive_entropy(logits).value <= np.log(5) + 1e-12


def test_entropy_maximum_on_uniform():
    assert abs(predictive_entropy(np.full((1, 6), 2.5)).value - np.log(6)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-5, 5)), st.integers(0, 3))
def test_cross_entropy_decreases_with_correct_logit(logits, label):
    ces = []
    for bump in (0.0, 0.5, 1.0, 2.0):
        z = logits.copy()
        z[label] += bump
        ces.append(softmax_cross_entropy(z[None, :], [label]).value)
    assert all(c >= 0 for c in ces)
    assert all(a >= b for a, b in zip(ces, ces[1:]))
