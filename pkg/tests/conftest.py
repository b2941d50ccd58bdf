import sys

import numpy as np
import pytest

from glf.core import Tensor, no_grad


def perturb_flow(flow, scale=0.3, seed=0):
    """Give every coupling net a non-zero final layer so the flow is not the identity."""
    rng = np.random.default_rng(seed)
    for block in flow.blocks:
        for layer in (block.layer_a, block.layer_b):
            last = layer.net[-1]
            last.weight.data[...] = rng.normal(0, scale, last.weight.shape)
            last.bias.data[...] = rng.normal(0, scale, last.bias.shape)
    return flow


def force_identity_mixing(flow):
    for block in flow.blocks:
        block.W.data[...] = np.eye(flow.dim, dtype=block.W.dtype)
    return flow


def numerical_jacobian(fn, z, step=1e-5):
    """Central-difference Jacobian of fn: R^D -> R^D at a single point z (float64)."""
    z = np.asarray(z, dtype=np.float64)
    dim = z.size
    jac = np.zeros((dim, dim))
    with no_grad():
        for i in range(dim):
            zp, zm = z.copy(), z.copy()
            zp[i] += step
            zm[i] -= step
            jac[:, i] = (fn(zp) - fn(zm)) / (2 * step)
    return jac


def flow_map(flow):
    def fn(z):
        e, _ = flow(Tensor(z[None, :]))
        return e.data[0]
    return fn


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
