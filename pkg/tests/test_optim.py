import math

import numpy as np
import pytest

from glf.core import Parameter
from glf.errors import ConfigurationError
from glf.optim import Adam, AdamState, adam_step


def reference_adam(grads, lr=1e-3, amsgrad=False, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out step by step in Python floats."""
    theta, m, v, v_max = 0.0, 0.0, 0.0, 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        if amsgrad:
            v_max = max(v_max, v_hat)
            v_hat = v_max
        theta -= lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(theta)
    return trace


def run_adam(grads, amsgrad=False):
    p = np.zeros(1)
    state = AdamState((1,), np.float64, amsgrad)
    out = []
    for t, g in enumerate(grads, start=1):
        adam_step(p, np.array([g]), state, t, 1e-3, amsgrad)
        out.append(p[0])
    return out, state


def test_first_step():
    (theta,), _ = run_adam([1.0])
    assert abs(theta - (-1e-3 / (1 + 1e-8))) < 1e-15


@pytest.mark.parametrize("amsgrad", [False, True])
def test_matches_reference_recursion(amsgrad):
    grads = list(np.random.default_rng(0).normal(0, 2, 50))
    got, _ = run_adam(grads, amsgrad)
    expected = reference_adam(grads, amsgrad=amsgrad)
    assert np.abs(np.array(got) - expected).max() < 1e-12


def test_zero_gradient_leaves_parameters():
    p = Parameter(np.array([1.5, -2.0]))
    opt = Adam([("p", p)])
    for _ in range(10):
        p.grad = np.zeros(2)
        opt.step()
    assert p.data.tolist() == [1.5, -2.0]


def test_amsgrad_denominator_never_decreases():
    _, state = run_adam([2.0], amsgrad=True)
    first = state.v_max[0]
    assert first == pytest.approx(4.0, rel=1e-12)
    p = np.zeros(1)
    adam_step(p, np.array([1.0]), state, 2, 1e-3, amsgrad=True)
    assert state.v_max[0] == first
    # the bias-corrected second moment itself did drop
    assert state.v[0] / (1 - 0.999 ** 2) < first


def test_shape_mismatch():
    with pytest.raises(ConfigurationError):
        adam_step(np.zeros(3), np.zeros(2), AdamState((3,), np.float64, False), 1, 1e-3)


def test_missing_gradient_counts_as_zero_and_state_roundtrips():
    a, b = Parameter(np.ones(3)), Parameter(np.ones((2, 2)))
    opt = Adam([("a", a), ("b", b)], amsgrad=True)
    a.grad = np.array([1.0, -1.0, 0.5])
    opt.step()
    assert b.data.tolist() == [[1.0, 1.0], [1.0, 1.0]]
    arrays = {k: v.copy() for k, v in opt.state_arrays("o.").items()}
    clone = Adam([("a", Parameter(np.ones(3))), ("b", Parameter(np.ones((2, 2))))], amsgrad=True)
    clone.load_state_arrays(arrays, "o.")
    assert clone.step_count == 1
    assert all(np.array_equal(arrays[k], v) for k, v in clone.state_arrays("o.").items())


def test_float32_large_parameter_matches_unchunked_update():
    rng = np.random.default_rng(0)
    p = rng.standard_normal(100_003).astype(np.float32)
    g = rng.standard_normal(100_003).astype(np.float32)
    state = AdamState(p.shape, np.float32, False)
    expected = p.copy()
    m = np.float32(0.1) * g
    v = np.float32(0.001) * g * g
    expected -= np.float32(1e-3 / 0.1) * (m / (np.sqrt(v / np.float32(0.001)) + np.float32(1e-8)))
    adam_step(p, g, state, 1, 1e-3)
    assert p.dtype == np.float32
    assert np.abs(p - expected).max() < 1e-6
