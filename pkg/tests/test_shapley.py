import numpy as np
import pytest

from oracles import marginal_value, permutation_shapley, random_mlp, spearman
from xrpo.regressor import FunctionPredictor, train_linear_arrays
from xrpo.shapley import (
    MAX_EXACT_FEATURES,
    ExplanationError,
    KernelConfig,
    ShapleyAttribution,
    ShapleyError,
    ValueFunctionConfig,
    coalition_values,
    exact_shapley,
    explain_batch,
    kernel_shapley,
    kernel_shapley_all,
    make_background,
    median_bandwidth,
    value_function,
)


def linear(w, b=0.0):
    w = np.asarray(w, float)
    return FunctionPredictor(lambda x: (x @ w + b)[:, None], len(w))


def test_value_function_extremes():
    bg = np.array([[0.0, 0.0], [2.0, 4.0]])
    f = linear([1.0, 1.0])
    cfg = ValueFunctionConfig(bg)
    x = np.array([5.0, 7.0])
    assert value_function(f, x, [], cfg) == pytest.approx(3.0)
    assert value_function(f, x, [0, 1], cfg) == pytest.approx(12.0)
    assert value_function(f, x, [0], cfg) == pytest.approx(5.0 + 2.0)
    with pytest.raises(ShapleyError):
        value_function(f, x, [2], cfg)


def test_exact_linear_closed_form():
    rng = np.random.default_rng(0)
    w = rng.normal(size=5)
    bg = rng.normal(size=(30, 5))
    x = rng.normal(size=5)
    a = exact_shapley(linear(w, 1.5), x, 0, ValueFunctionConfig(bg))
    assert np.allclose(a.phi, w * (x - bg.mean(axis=0)), atol=1e-12)
    assert a.phi0 == pytest.approx(float(bg.mean(axis=0) @ w + 1.5))
    assert a.reconstruction_residual < 1e-12


def test_exact_matches_permutation_oracle():
    rng = np.random.default_rng(1)
    for p in (2, 3, 4):
        fn = random_mlp(rng, p)
        bg = rng.normal(size=(10, p))
        x = rng.normal(size=p)
        a = exact_shapley(FunctionPredictor(fn, p), x, 0, ValueFunctionConfig(bg))
        ref = permutation_shapley(marginal_value(lambda r: fn(r)[:, 0], x, bg), p)
        assert np.allclose(a.phi, ref, atol=1e-12, rtol=0)


def test_exact_axioms_on_interaction_model():
    # f = x0*x1 + 2*x2, feature 3 is a dummy; x0 and x1 are symmetric
    f = FunctionPredictor(lambda x: (x[:, 0] * x[:, 1] + 2 * x[:, 2])[:, None], 4)
    bg = np.array([[0.0, 0.0, 0.0, 5.0], [1.0, 1.0, 1.0, -3.0]])
    x = np.array([2.0, 2.0, 1.0, 9.0])
    a = exact_shapley(f, x, 0, ValueFunctionConfig(bg))
    assert a.phi[3] == 0.0
    assert a.phi[0] == pytest.approx(a.phi[1], abs=1e-12)
    assert a.phi0 + a.phi.sum() == pytest.approx(a.prediction, abs=1e-12)


def test_exact_feature_limit():
    p = MAX_EXACT_FEATURES + 1
    with pytest.raises(ShapleyError, match="kernel"):
        exact_shapley(linear(np.ones(p)), np.zeros(p), 0, ValueFunctionConfig(np.zeros((2, p))))


def test_coalition_values_cover_every_mask():
    f = linear([1.0, 10.0, 100.0])
    v = coalition_values(f, np.ones(3), np.zeros((1, 3)), 0)
    assert v.tolist() == [0, 1, 10, 11, 100, 101, 110, 111]


def test_dimension_errors():
    f = linear([1.0, 1.0])
    with pytest.raises(ShapleyError):
        exact_shapley(f, np.zeros(3), 0, ValueFunctionConfig(np.zeros((2, 3))))
    with pytest.raises(ShapleyError):
        exact_shapley(f, np.zeros(2), 0, ValueFunctionConfig(np.zeros((2, 3))))
    with pytest.raises(ShapleyError):
        ValueFunctionConfig(np.zeros((0, 2)))
    with pytest.raises(ShapleyError):
        KernelConfig(np.zeros((3, 2)), sigma=-1.0)
    with pytest.raises(ShapleyError):
        KernelConfig(np.zeros((3, 2)), sigma="mean")


def test_kernel_signs_for_linear_model():
    rng = np.random.default_rng(2)
    w = np.array([2.0, -1.0, 0.5, 3.0])
    bg = rng.normal(size=(100, 4))
    x = np.array([2.0, 2.0, -2.0, -2.0])
    a = kernel_shapley(linear(w), x, 0, KernelConfig(bg))
    assert np.array_equal(np.sign(a.phi), np.sign(w * x))
    assert a.method == "kernel" and a.sigma == pytest.approx(median_bandwidth(bg))
    # the residual is measured, not assumed to vanish
    assert a.reconstruction_residual == pytest.approx(abs(a.phi0 + a.phi.sum() - a.prediction))


def test_kernel_single_background_row_equals_drop():
    # with one background row all weight sits on it: phi_i = f(x) - f(x with x_i swapped)
    f = linear([1.0, 2.0, 3.0])
    bg = np.array([[1.0, 1.0, 1.0]])
    x = np.array([2.0, 3.0, 4.0])
    a = kernel_shapley(f, x, 0, KernelConfig(bg, sigma=1.0))
    assert np.allclose(a.phi, [1.0, 4.0, 9.0])


def test_kernel_dummy_feature_is_zero():
    f = FunctionPredictor(lambda x: np.sin(x[:, :1]) + x[:, 1:2] ** 2, 3)
    rng = np.random.default_rng(3)
    a = kernel_shapley(f, rng.normal(size=3), 0, KernelConfig(rng.normal(size=(40, 3))))
    assert a.phi[2] == 0.0


def test_kernel_degenerate_weights_fall_back_to_uniform():
    f = linear([1.0, 1.0])
    bg = np.array([[0.0, 0.0], [1.0, 1.0]])
    x = np.array([1e6, -1e6])
    a = kernel_shapley(f, x, 0, KernelConfig(bg, sigma=1e-3))
    assert a.degenerate_kernel
    assert np.allclose(a.phi, [x[0] - 0.5, x[1] - 0.5])


def test_kernel_all_outputs_consistent():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(3, 2))
    f = FunctionPredictor(lambda x: x @ w, 3, 2)
    bg = rng.normal(size=(20, 3))
    x = rng.normal(size=3)
    both = kernel_shapley_all(f, x, KernelConfig(bg))
    assert [b.output_dim for b in both] == [0, 1]
    assert np.allclose(both[1].phi, kernel_shapley(f, x, 1, KernelConfig(bg)).phi)


def test_kernel_rank_agrees_with_exact_on_mlp():
    rng = np.random.default_rng(5)
    fn = random_mlp(rng, 6)
    bg = rng.normal(size=(100, 6))
    x = rng.normal(size=6)
    f = FunctionPredictor(fn, 6)
    e = exact_shapley(f, x, 0, ValueFunctionConfig(bg)).phi
    k = kernel_shapley(f, x, 0, KernelConfig(bg)).phi
    assert spearman(e, k) >= 0.8


def test_explain_batch_order_parallel_and_errors():
    rng = np.random.default_rng(6)
    f = linear([1.0, -2.0, 0.5])
    bg = rng.normal(size=(25, 3))
    xs = list(rng.normal(size=(5, 3)))
    serial = explain_batch(f, xs, 0, "kernel", KernelConfig(bg))
    par = explain_batch(f, xs, 0, "kernel", KernelConfig(bg), jobs=3)
    assert [a.phi.tolist() for a in serial] == [a.phi.tolist() for a in par]
    # one bandwidth is shared by the whole batch
    assert len({a.sigma for a in serial}) == 1
    ex = explain_batch(f, xs, None, "exact", ValueFunctionConfig(bg))
    assert len(ex) == 5 and len(ex[0]) == 1
    with pytest.raises(ExplanationError) as err:
        explain_batch(f, xs[:2] + [np.zeros(4)], 0, "kernel", KernelConfig(bg))
    assert err.value.index == 2
    with pytest.raises(ShapleyError):
        explain_batch(f, xs, 0, "tree", KernelConfig(bg))


def test_works_with_trained_regressor():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(50, 4))
    y = x @ np.array([[1.0], [0.0], [-1.0], [2.0]])
    m = train_linear_arrays(x, y)
    a = exact_shapley(m, x[0], 0, ValueFunctionConfig(x[:20]))
    assert a.reconstruction_residual < 1e-9


def test_background_sampling():
    x = np.arange(500.0).reshape(250, 2)
    bg = make_background(x, 100, seed=1)
    assert bg.shape == (100, 2)
    assert np.array_equal(bg, make_background(x, 100, seed=1))
    assert len(np.unique(bg[:, 0])) == 100
    assert make_background(x[:10], 100).shape == (10, 2)


def test_median_bandwidth():
    bg = np.array([[0.0], [1.0], [3.0]])
    assert median_bandwidth(bg) == 2.0  # distances 1, 3, 2
    assert median_bandwidth(np.zeros((4, 2))) == 1.0
    assert median_bandwidth(np.zeros((1, 2))) == 1.0


def test_attribution_round_trip():
    a = ShapleyAttribution(np.array([0.5, -1.0]), 2.0, 0, np.array([1.0, 2.0]), "exact", 1.5, 0.0)
    b = ShapleyAttribution.from_dict(a.to_dict())
    assert b.to_dict() == a.to_dict()
