import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnnbound.graph import Graph, generate
from gnnbound.linalg import spectral_norm
from gnnbound.model import (DatasetExample, MpnnModel, flatten, flatten_gradients, forward,
                            forward_gin, get_activation, gin_loss, gradient, init_model,
                            load_checkpoint, loss, loss_grad, negate, num_params,
                            objective_value, perturb, restore, save_checkpoint, unflatten)
from conftest import random_example
from oracles import naive_forward


def fd_gradient(fn, theta, rel_step=1e-5):
    g = np.empty_like(theta)
    for p in range(theta.size):
        h = rel_step * (1 + abs(theta[p]))
        e = np.zeros_like(theta)
        e[p] = h
        g[p] = (fn(theta + e) - fn(theta - e)) / (2 * h)
    return g


def grad_rel_error(model, ex, kind="binary_logistic", gin=False):
    theta = flatten(model)
    exact = flatten_gradients(model, gradient(model, ex, kind, gin))
    approx = fd_gradient(lambda t: objective_value(unflatten(model, t), ex, kind, gin), theta)
    return np.max(np.abs(exact - approx)) / max(np.max(np.abs(approx)), 1e-12)


# -- activations and losses -------------------------------------------------

@pytest.mark.parametrize("name", ["tanh", "sigmoid", "identity", "relu", "tanh:2"])
def test_activation_centered(name):
    assert get_activation(name).value(np.array(0.0)) == 0.0


def test_tanh_kappas_from_grid():
    a = get_activation("tanh")
    assert a.kappa0 == pytest.approx(1.0, abs=1e-9)
    assert a.kappa1 == pytest.approx(4 / (3 * math.sqrt(3)), rel=1e-6)
    assert a.kappa2 == pytest.approx(2.0, rel=1e-6)


def test_sigmoid_kappas_from_grid():
    a = get_activation("sigmoid")
    assert a.kappa0 == pytest.approx(0.25, rel=1e-9)
    assert a.kappa1 == pytest.approx(1 / (6 * math.sqrt(3)), rel=1e-6)
    assert a.kappa2 == pytest.approx(1 / 8, rel=1e-6)


def test_relu_not_smooth():
    assert not get_activation("relu").smooth
    with pytest.raises(ValueError):
        get_activation("swish")


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(["tanh", "sigmoid", "tanh:0.5"]),
       st.floats(-8, 8), st.floats(-8, 8))
def test_activation_lipschitz(name, a, b):
    act = get_activation(name)
    slack = 1 + 1e-6
    for f, k in ((act.value, act.kappa0), (act.d1, act.kappa1), (act.d2, act.kappa2)):
        assert abs(f(np.array(a)) - f(np.array(b))) <= k * abs(a - b) * slack + 1e-12


def test_loss_examples():
    assert loss([0.0, 0.0], 1) == pytest.approx(math.log(2))
    assert loss([0.0, 10.0, 0.0], 1, "softmax_cross_entropy") < 1e-4
    with pytest.raises(ValueError):
        loss([0.0, 0.0], 2)


@pytest.mark.parametrize("kind, k", [("binary_logistic", 2), ("softmax_cross_entropy", 4)])
def test_loss_gradient_fd(kind, k):
    rng = np.random.default_rng(1)
    for _ in range(10):
        o = rng.standard_normal(k) * 2
        y = int(rng.integers(k))
        fd = fd_gradient(lambda v: loss(v, y, kind), o)
        np.testing.assert_allclose(loss_grad(o, y, kind), fd, rtol=1e-6, atol=1e-9)


# -- forward ----------------------------------------------------------------

def test_zero_weights_give_zero_output(example):
    m = init_model((3, 4, 2), scale=0.0)
    np.testing.assert_array_equal(forward(m, example)[0], 0.0)


def test_matches_naive_transcript():
    for seed in range(5):
        ex = random_example(seed)
        m = init_model((3, 4, 5, 2), seed=seed, activations=("tanh", "sigmoid", "tanh"),
                       kind="adj")
        out, hs = forward(m, ex)
        ref, ref_hs = naive_forward(m, ex)
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-14)
        for h, r in zip(hs, ref_hs):
            np.testing.assert_allclose(h, r, rtol=1e-12, atol=1e-14)


def test_rho_applied_before_weights():
    ex = random_example(3)
    W1 = np.random.default_rng(0).standard_normal((3, 4))
    W2 = np.random.default_rng(1).standard_normal((4, 2))
    m = MpnnModel((W1, W2), None, None, ("identity", "tanh", "identity"), "adj")
    P = ex.diffusion("adj")
    want = np.tanh(P @ ex.X) @ W1
    np.testing.assert_allclose(forward(m, ex)[1][1], want, rtol=1e-12)


def test_linear_two_layer_formula_and_norm():
    ex = random_example(4)
    rng = np.random.default_rng(0)
    W1, W2 = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    m = MpnnModel((W1, W2), None, None, ("identity",) * 3, "sym")
    P = ex.diffusion("sym")
    n = ex.G.n
    want = np.ones(n) @ P @ ex.X @ W1 @ W2 / n
    out = forward(m, ex)[0]
    np.testing.assert_allclose(out, want, rtol=1e-12)
    bound = spectral_norm(P) * spectral_norm(ex.X) * spectral_norm(W1) * spectral_norm(W2)
    assert np.linalg.norm(out) <= bound / math.sqrt(n) * (1 + 1e-9)


def test_gcn_two_node_hand_case():
    ex = DatasetExample(np.eye(2), Graph(2, [(0, 1)]), 0)
    W1 = np.array([[0.5, -1.0], [2.0, 0.3]])
    W2 = np.array([[1.0, 0.0], [0.0, 1.0]])
    m = MpnnModel((W1, W2), None, None, ("tanh", "identity", "identity"), "sym")
    # K2 with self-loops: every degree is 2, so P = [[.5, .5], [.5, .5]]
    row = [0.5 * (0.5 + 2.0), 0.5 * (-1.0 + 0.3)]
    h = [math.tanh(row[0]), math.tanh(row[1])]
    np.testing.assert_allclose(forward(m, ex)[0], h, rtol=1e-14)


def test_shape_error_names_layer():
    with pytest.raises(ValueError, match="layer 2"):
        MpnnModel((np.zeros((3, 4)), np.zeros((5, 2))))
    m = init_model((4, 3, 2))
    with pytest.raises(ValueError, match="layer 1"):
        forward(m, random_example(0, d0=3))


def test_permutation_invariance():
    ex = random_example(7, n=8)
    m = init_model((3, 5, 5, 2), seed=2, kind="adj")
    perm = np.random.default_rng(0).permutation(8)
    # node v of the relabelled graph is node inv[v] of the original
    inv = np.argsort(perm)
    moved = DatasetExample(ex.X[inv], ex.G.relabel(perm), ex.y)
    np.testing.assert_allclose(forward(m, moved)[0], forward(m, ex)[0], rtol=1e-12, atol=1e-14)


def test_norm_contract_random_gcns():
    rng = np.random.default_rng(11)
    for trial in range(100):
        ex = random_example(trial, n=int(rng.integers(2, 8)))
        m = init_model((3, 4, 4, 2), seed=trial, use_U=False, kind="sym",
                       activations=("tanh", "identity", "identity"), scale=float(rng.uniform(0.5, 3)))
        P = ex.diffusion("sym")
        n = ex.G.n
        bound = (spectral_norm(P) ** 2 * spectral_norm(ex.X)
                 * np.prod([spectral_norm(w) for w in m.W]) / math.sqrt(n))
        assert np.linalg.norm(forward(m, ex)[0]) <= bound * (1 + 1e-9)


# -- GIN --------------------------------------------------------------------

def test_gin_heads():
    ex = random_example(2)
    m = init_model((3, 4, 4, 2), seed=1, heads=True)
    zero = unflatten(m, np.where(np.isin(np.arange(num_params(m)), _v_coords(m)), 0.0, flatten(m)))
    assert all(np.all(o == 0) for o in forward_gin(zero, ex))
    assert gin_loss(zero, ex) == pytest.approx(math.log(2))
    outs = forward_gin(m, ex)
    assert gin_loss(m, ex) == pytest.approx(np.mean([loss(o, ex.y) for o in outs]), rel=1e-12)


def _v_coords(m):
    from gnnbound.model import param_blocks
    pos, out = 0, []
    for b in param_blocks(m):
        size = getattr(m, b.name)[b.index - 1].size
        if b.name == "V":
            out.extend(range(pos, pos + size))
        pos += size
    return out


def test_gin_two_layers_equals_forward():
    ex = random_example(5)
    m = init_model((3, 4, 2), seed=3, heads=True)
    swapped = MpnnModel((m.W[0], m.V[0]), m.U, None, m.activations, m.kind)
    np.testing.assert_allclose(forward_gin(m, ex)[0], forward(swapped, ex)[0], rtol=1e-12)
    assert gin_loss(m, ex) == pytest.approx(objective_value(swapped, ex))


def test_gin_needs_heads(example):
    with pytest.raises(ValueError):
        forward_gin(init_model((3, 4, 2)), example)


# -- gradients --------------------------------------------------------------

@pytest.mark.parametrize("tied", [False, True])
@pytest.mark.parametrize("heads, gin", [(False, False), (True, False), (True, True)])
@pytest.mark.parametrize("act", ["tanh", "sigmoid"])
def test_gradient_matches_finite_differences(tied, heads, gin, act):
    ex = random_example(9)
    widths = (3, 3, 3, 2) if tied else (3, 4, 3, 2)
    m = init_model(widths, seed=4, heads=heads, weight_tying=tied, activations=(act,) * 3,
                   kind="adj")
    assert num_params(m) <= 80
    assert grad_rel_error(m, ex, gin=gin) <= 1e-6


def test_gradient_softmax_multiclass():
    ex = random_example(1, k=3)
    m = init_model((3, 4, 4, 3), seed=2)
    assert grad_rel_error(m, ex, kind="softmax_cross_entropy") <= 1e-6


def test_zero_features_zero_first_u_gradient():
    ex = random_example(1)
    ex0 = DatasetExample(np.zeros_like(ex.X), ex.G, ex.y)
    g = gradient(init_model((3, 4, 4, 2), seed=0), ex0)
    np.testing.assert_array_equal(g.U[0], 0.0)


def test_linear_gcn_gradient_is_logistic_regression():
    ex = random_example(6)
    rng = np.random.default_rng(2)
    W1, W2 = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    m = MpnnModel((W1, W2), None, None, ("identity",) * 3, "sym")
    z = np.ones(ex.G.n) @ ex.diffusion("sym") @ ex.X @ W1 / ex.G.n
    sign = 1.0 if ex.y == 1 else -1.0
    margin_ = sign * z @ (W2[:, 1] - W2[:, 0])
    coef = -sign / (1 + math.exp(margin_))
    want = np.stack([-coef * z, coef * z], axis=1)
    np.testing.assert_allclose(gradient(m, ex).W[1], want, rtol=1e-12)


def test_tied_gradient_is_sum_of_untied():
    ex = random_example(8)
    tied = init_model((3, 3, 3, 3, 2), seed=5, weight_tying=True)
    untied = MpnnModel(tied.W, tied.U, None, tied.activations, tied.kind, weight_tying=False)
    gt, gu = gradient(tied, ex), gradient(untied, ex)
    np.testing.assert_allclose(gt.W[0], sum(gu.W[:3]), rtol=1e-12)
    np.testing.assert_allclose(gt.U[0], sum(gu.U), rtol=1e-12)


# -- noise and checkpoints --------------------------------------------------

def test_perturb_zero_sigma_is_identity():
    m = init_model((3, 4, 2), seed=0)
    p, rec = perturb(m, 0.0, seed=1)
    np.testing.assert_array_equal(flatten(p), flatten(m))


def test_perturb_negate_restore():
    m = init_model((3, 4, 4, 2), seed=0)
    p, rec = perturb(m, [0.1, 0.2, 0.3], seed=1)
    np.testing.assert_array_equal(flatten(p), rec.base + rec.E)
    np.testing.assert_array_equal(flatten(negate(m, rec)), rec.base - rec.E)
    np.testing.assert_array_equal(flatten(restore(p, rec)), flatten(m))


def test_perturb_variance_per_layer():
    m = init_model((3, 4, 4, 2), seed=0)
    sig = [0.1, 0.5, 2.0]
    from gnnbound.model import group_slices
    draws = {g: [] for g in (1, 2, 3)}
    for s in range(2000):
        E = perturb(m, sig, seed=s)[1].E
        for g, idx in group_slices(m).items():
            draws[g].append(E[idx])
    for g in (1, 2, 3):
        v = np.concatenate(draws[g]).var()
        assert abs(v / sig[g - 1] ** 2 - 1) < 0.03


def test_perturbed_tied_model_stays_tied():
    m = init_model((3, 3, 3, 2), seed=0, weight_tying=True)
    p, _ = perturb(m, 0.1, seed=2)
    np.testing.assert_array_equal(p.W[0], p.W[1])


def test_checkpoint_round_trip(tmp_path):
    m = init_model((3, 4, 4, 2), seed=0, heads=True, activations=("tanh", "sigmoid", "tanh"),
                   kind="gin")
    path = tmp_path / "m.json"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    np.testing.assert_array_equal(flatten(back), flatten(m))
    assert back.kind == m.kind and back.activations == m.activations
    assert back.widths == m.widths


def test_checkpoint_rejects_unknown_version(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format": "gnnbound-checkpoint", "version": 99}')
    with pytest.raises(ValueError):
        load_checkpoint(path)
