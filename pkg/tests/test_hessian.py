import math

import numpy as np
import pytest

from gnnbound.hessian import (dataset_alpha, diag_second_differences, full_hessian, hvp,
                              hvp_fn, hutchinson_fn, per_layer_alphas, probe_rng,
                              taylor_residual, trace_exact, trace_hutchinson)
from gnnbound.model import MpnnModel, flatten, group_slices, init_model, num_params
from conftest import random_dataset, random_example


def quad(A):
    return (lambda t: 0.5 * t @ A @ t), (lambda t: A @ t)


def sym_matrix(seed, n=6):
    M = np.random.default_rng(seed).standard_normal((n, n))
    return M + M.T


def test_hvp_exact_on_quadratic():
    A = sym_matrix(0)
    _, g = quad(A)
    theta = np.random.default_rng(1).standard_normal(6)
    v = np.random.default_rng(2).standard_normal(6)
    np.testing.assert_allclose(hvp_fn(g, theta, v), A @ v, rtol=1e-8, atol=1e-9)
    np.testing.assert_array_equal(hvp_fn(g, theta, np.zeros(6)), 0.0)


def test_diag_second_differences_on_quadratic():
    A = sym_matrix(3)
    f, _ = quad(A)
    theta = np.random.default_rng(4).standard_normal(6)
    assert diag_second_differences(f, theta, range(6)) == pytest.approx(np.trace(A), rel=1e-7)


def test_hutchinson_exact_on_diagonal():
    D = np.diag(np.arange(1.0, 7.0))
    _, g = quad(D)
    mean, _ = hutchinson_fn(g, np.ones(6), np.arange(6), 3, probe_rng(0))
    assert mean == pytest.approx(21.0, rel=1e-8)


def test_hvp_symmetry_on_tanh_models():
    for seed in range(5):
        ex = random_example(seed)
        m = init_model((3, 4, 4, 2), seed=seed)
        rng = np.random.default_rng(seed)
        u, v = rng.standard_normal((2, num_params(m)))
        assert v @ hvp(m, ex, u) == pytest.approx(u @ hvp(m, ex, v), abs=1e-5)


def _linear_gcn(seed):
    rng = np.random.default_rng(seed)
    W1, W2 = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    return MpnnModel((W1, W2), None, None, ("identity",) * 3, "sym")


def logistic_trace(model, ex):
    """Closed-form trace of the readout Hessian: logistic regression on pooled features."""
    W1, W2 = model.W
    z = np.ones(ex.G.n) @ ex.diffusion("sym") @ ex.X @ W1 / ex.G.n
    m = z @ (W2[:, 1] - W2[:, 0])
    s = 1 / (1 + math.exp(-m))
    return s * (1 - s) * 2 * (z @ z)


def test_trace_exact_matches_logistic_regression():
    for seed in range(5):
        ex = random_example(seed)
        m = _linear_gcn(seed)
        assert trace_exact(m, ex, 2).value == pytest.approx(logistic_trace(m, ex), rel=1e-4)


def test_linear_model_linear_loss_has_zero_readout_trace():
    ex = random_example(1)
    m = _linear_gcn(1)
    for layer in (1, 2):
        assert abs(trace_exact(m, ex, layer, kind="linear").value) < 1e-8


def test_trace_exact_cap():
    m = init_model((3, 4, 4, 2))
    with pytest.raises(ValueError, match="hutchinson"):
        trace_exact(m, random_example(0), 1, cap=10)


def test_hutchinson_deterministic():
    ex = random_example(2)
    m = init_model((3, 4, 4, 2), seed=1)
    a = trace_hutchinson(m, ex, 1, probes=20, seed=5)
    b = trace_hutchinson(m, ex, 1, probes=20, seed=5)
    assert a == b
    assert a.stderr > 0 and a.probes == 20


def test_hutchinson_unbiased_over_seeds():
    for model_seed in range(3):
        ex = random_example(10 + model_seed)
        m = init_model((3, 4, 4, 2), seed=model_seed)
        for layer in (1, 2, 3):
            exact = trace_exact(m, ex, layer).value
            runs = [trace_hutchinson(m, ex, layer, probes=20, seed=s) for s in range(50)]
            grand = np.mean([r.value for r in runs])
            se = np.sqrt(np.mean([r.stderr ** 2 for r in runs]) / 50)
            assert abs(grand - exact) <= 3 * se + 1e-8


def test_dataset_alpha_examples():
    m = init_model((3, 4, 4, 2), seed=0)
    data = random_dataset(20, seed=3)
    one = dataset_alpha(m, data[:1], 1)
    assert one.alpha == pytest.approx(max(one.mean, 0.0)) and len(one.traces) == 1
    dup = dataset_alpha(m, data[:1] * 10, 1)
    assert dup.alpha == one.alpha
    many = dataset_alpha(m, data, 1)
    assert many.alpha >= many.mean


def test_dataset_alpha_floors_negative():
    # this draw has a slightly negative first-layer trace
    ex = random_example(0)
    m = init_model((3, 4, 4, 2), seed=0, scale=1.5)
    assert trace_exact(m, ex, 1).value < 0
    stats = dataset_alpha(m, [ex], 1)
    assert stats.alpha == 0.0 and stats.mean < 0


def test_per_layer_alphas_tied_share_block():
    m = init_model((3, 3, 3, 3, 2), seed=0, weight_tying=True)
    alphas = per_layer_alphas(m, random_dataset(3, seed=1))
    assert len(alphas) == 4
    assert alphas[0] is alphas[1] is alphas[2]


def test_taylor_exact_for_bilinear_objective():
    # identity activations + linear loss: the objective is bilinear in (W1, W2),
    # so its second-order expansion is exact
    ex = random_example(3)
    m = _linear_gcn(3)
    r = taylor_residual(m, ex, 0.1, 200, seed=0, kind="linear", control_variate=False)
    assert r.residual <= 3 * r.stderr + 1e-12


def test_antithetic_reduces_variance():
    ex = random_example(5)
    m = init_model((3, 4, 4, 2), seed=2)
    traces = [trace_exact(m, ex, g).value for g in sorted(group_slices(m))]
    paired = taylor_residual(m, ex, 0.1, 300, seed=1, antithetic=True,
                             control_variate=False, traces=traces)
    single = taylor_residual(m, ex, 0.1, 300, seed=1, antithetic=False,
                             control_variate=False, traces=traces)
    assert paired.stderr < single.stderr


def test_residual_shrinks_at_least_cubically():
    ex = random_example(6)
    m = init_model((3, 4, 4, 2), seed=3)
    H = full_hessian(m, ex)
    traces = [trace_exact(m, ex, g).value for g in sorted(group_slices(m))]
    res = [taylor_residual(m, ex, s, 1000, seed=0, traces=traces, hessian=H)
           for s in (0.2, 0.1, 0.05)]
    for big, small in zip(res, res[1:]):
        assert small.residual <= big.residual / 8 * 1.5


def test_full_hessian_trace_matches_blocks():
    ex = random_example(7)
    m = init_model((3, 4, 2), seed=0)
    H = full_hessian(m, ex)
    total = sum(trace_exact(m, ex, g).value for g in sorted(group_slices(m)))
    assert np.trace(H) == pytest.approx(total, rel=1e-5)
