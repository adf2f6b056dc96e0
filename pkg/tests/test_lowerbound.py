import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnnbound import lowerbound as lb
from gnnbound.model import forward


def weights(seed, width=3, depth=2):
    rng = np.random.default_rng(seed)
    dims = [width] * depth + [2]
    return [rng.standard_normal((dims[t], dims[t + 1])) for t in range(depth)]


def test_alpha_closed_form():
    W = [np.diag([2.0, 1.0]), np.eye(2)]
    inst = lb.build_instance(W, 4)
    assert inst.lam == pytest.approx(2.0)
    assert inst.alpha == pytest.approx(8.0)
    assert abs(inst.v11) == pytest.approx(1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(2, 4))
def test_forward_is_alpha_v1(seed, n, depth):
    inst = lb.build_instance(weights(seed, depth=depth), n)
    out = forward(lb.linear_model(weights(seed, depth=depth)), lb.instance_example(inst))[0]
    np.testing.assert_allclose(out, inst.alpha * inst.v1, rtol=1e-9, atol=1e-9)
    assert inst.alpha == pytest.approx(n ** (depth - 1) * np.linalg.norm(inst.Z, 2), rel=1e-9)


def test_build_rejects_bad_shapes():
    with pytest.raises(ValueError):
        lb.build_instance([np.eye(2)], 3)
    with pytest.raises(ValueError):
        lb.build_instance([np.eye(3), np.ones((3, 3))], 3)
    with pytest.raises(ValueError):
        lb.build_instance([np.eye(3), np.ones((2, 2))], 3)
    with pytest.raises(ValueError):
        lb.build_instance(weights(0), 0)


def test_simulated_std_matches_closed_form():
    inst = lb.build_instance(weights(1), 3)
    for N in (10, 100, 1000):
        gaps, emp = lb.simulate_gap(inst, N, 4000, seed=3)
        assert emp == pytest.approx(lb.analytic_gap_std(inst, N), rel=0.05)
        assert abs(gaps.mean()) < 4 * emp / math.sqrt(4000)


def test_gap_std_scales_inverse_sqrt_N():
    inst = lb.build_instance(weights(2), 2)
    assert lb.analytic_gap_std(inst, 100) / lb.analytic_gap_std(inst, 400) == pytest.approx(2.0)


def test_simulation_is_deterministic_and_validated():
    inst = lb.build_instance(weights(0), 2)
    a, _ = lb.simulate_gap(inst, 50, 30, seed=9)
    b, _ = lb.simulate_gap(inst, 50, 30, seed=9)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        lb.simulate_gap(inst, 50, 29, seed=9)
    with pytest.raises(ValueError):
        lb.simulate_gap(inst, 0, 30, seed=9)


def test_gaps_csv_layout():
    inst = lb.build_instance(weights(0), 2)
    gaps, _ = lb.simulate_gap(inst, 20, 30, seed=1)
    lines = lb.gaps_csv(inst, 20, gaps).splitlines()
    assert lines[1] == ",".join(lb.GAP_COLUMNS)
    assert len(lines) == 32
