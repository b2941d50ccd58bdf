"""Central finite-difference gradient checking."""

import numpy as np

from glf.core.tensor import Tensor, no_grad
from glf.errors import DomainError


def numerical_grad(f, x, step=1e-5, indices=None):
    """Central differences of scalar ``f`` at ``x`` (an ndarray).

    Only the flat positions in ``indices`` are perturbed when given; the
    others are left as zero.
    """
    x = np.array(x, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar(f(Tensor(x.copy())))
            flat[i] = orig - step
            fm = _scalar(f(Tensor(x.copy())))
            flat[i] = orig
            grad.reshape(-1)[i] = (fp - fm) / (2 * step)
    return grad


def _scalar(value):
    v = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(v):
        raise DomainError("grad_check: function value is not finite")
    return v


def analytic_grad(f, x):
    leaf = Tensor(np.array(x, copy=True), requires_grad=True)
    out = f(leaf)
    _scalar(out)
    out.backward()
    return np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad


def grad_check(f, x, step=1e-5, indices=None):
    """Max relative error between backprop and central differences.

    The error per coordinate is ``|a - n| / (|a| + |n| + 1e-12)``.
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    analytic = analytic_grad(f, x)
    numeric = numerical_grad(f, x, step, indices)
    if indices is not None:
        idx = np.asarray(list(indices), dtype=np.intp)
        analytic = analytic.reshape(-1)[idx]
        numeric = numeric.reshape(-1)[idx]
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0
