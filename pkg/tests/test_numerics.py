import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riveral.errors import ConfigError, DimensionError, NumericalError
from riveral.numerics import (
    Adam,
    ParamStore,
    RngStreams,
    affine,
    grad_check,
    sample_dropout_mask,
    sigmoid_grad,
    sigmoid_vec,
    tanh_grad,
    tanh_vec,
)


def test_affine_examples():
    assert affine(np.eye(2), [1, 2], [0, 0]).tolist() == [1, 2]
    assert affine(np.zeros((2, 2)), [5, 7], [1, -1]).tolist() == [1, -1]
    assert affine([[1, 2], [3, 4]], [1, 1], [0, 0]).tolist() == [3, 7]


def test_affine_shape_errors():
    with pytest.raises(DimensionError):
        affine(np.eye(2), [1, 2, 3], [0, 0])
    with pytest.raises(DimensionError):
        affine(np.eye(2), [1, 2], [0])


def test_affine_rejects_nonfinite():
    with pytest.raises(NumericalError):
        affine(np.eye(2), [np.inf, 0], [0, 0])


def test_activation_values():
    assert tanh_vec([0.0]).tolist() == [0.0]
    assert sigmoid_vec([0.0]).tolist() == [0.5]
    assert sigmoid_vec([-800.0])[0] == 0.0


@pytest.mark.parametrize("x", [0.3, -1.7, 2.2])
def test_activation_derivatives_match_central_difference(x):
    h = 1e-6
    num_s = (sigmoid_vec([x + h])[0] - sigmoid_vec([x - h])[0]) / (2 * h)
    num_t = (tanh_vec([x + h])[0] - tanh_vec([x - h])[0]) / (2 * h)
    s = sigmoid_vec([x])[0]
    assert abs(s * (1 - s) - num_s) < 1e-6
    assert abs(sigmoid_grad([x])[0] - num_s) < 1e-6
    assert abs(tanh_grad([x])[0] - num_t) < 1e-6


def test_grad_check_square():
    store = ParamStore({"theta": np.array([3.0])})
    f = lambda s: float(s["theta"][0] ** 2)
    assert grad_check(f, store, {"theta": np.array([6.0])}) < 1e-8
    # a doubled gradient is flagged: |12 - 6| / 12
    bad = grad_check(f, store, {"theta": np.array([12.0])})
    assert bad == pytest.approx(0.5, abs=1e-6)
    assert store["theta"][0] == 3.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_nonfinite_objective():
    store = ParamStore({"theta": np.array([0.0])})
    with pytest.raises(NumericalError):
        grad_check(lambda s: float(np.log(s["theta"][0] ** 2)), store, {"theta": np.array([0.0])}, h=0.0)


def test_dropout_mask_keep_one():
    m = sample_dropout_mask(1.0, (3, 4), None)
    assert m.scale == 1.0 and np.all(m.mask == 1.0)


def test_dropout_mask_deterministic():
    a = sample_dropout_mask(0.8, 50, RngStreams(7).fresh("dropout"))
    b = sample_dropout_mask(0.8, 50, RngStreams(7).fresh("dropout"))
    assert np.array_equal(a.mask, b.mask)
    assert a.scale == pytest.approx(1 / 0.8)


def test_dropout_mask_keep_fraction():
    m = sample_dropout_mask(0.8, 100_000, RngStreams(1).fresh("dropout"))
    assert abs(m.mask.mean() - 0.8) < 0.01


@pytest.mark.parametrize("keep", [0.0, -0.1, 1.5])
def test_dropout_mask_bad_keep(keep):
    with pytest.raises(ConfigError):
        sample_dropout_mask(keep, 4, np.random.default_rng(0))


def test_named_streams_are_independent():
    s = RngStreams(3)
    a = s.fresh("init").random(5)
    s2 = RngStreams(3)
    s2.get("something-new").random(100)
    assert np.array_equal(a, s2.fresh("init").random(5))
    assert not np.array_equal(a, s.fresh("explore").random(5))


def test_zero_grad_keeps_params():
    store = ParamStore({"a": np.ones((2, 2))})
    store.grads["a"][:] = 3.0
    store.zero_grad()
    assert np.all(store.grads["a"] == 0) and np.all(store["a"] == 1)


def test_adam_zero_lr_is_noop():
    store = ParamStore({"a": np.array([1.0, 2.0])})
    store.grads["a"][:] = [5.0, -1.0]
    Adam(lr=0.0).step(store)
    assert store["a"].tolist() == [1.0, 2.0]


def test_adam_minimises_quadratic():
    store = ParamStore({"a": np.array([4.0, -3.0])})
    opt = Adam(lr=0.1)
    for _ in range(500):
        store.grads["a"][:] = 2 * store["a"]
        opt.step(store)
    assert np.all(np.abs(store["a"]) < 1e-2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(0.1, 10))
def test_clip_grads_bounds_norm(vals, max_norm):
    store = ParamStore({"a": np.zeros(len(vals))})
    store.grads["a"][:] = vals
    store.clip_grads(max_norm)
    assert store.grad_norm() <= max_norm * (1 + 1e-12)
