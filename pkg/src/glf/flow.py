"""Invertible latent flow built from affine coupling blocks.

A block multiplies its input by a learnable mixing matrix ``W`` (initialized
as a random rotation) and then applies two affine coupling layers with
opposite orientation.  The model maps latents ``z`` to noise ``e``; the
generator direction is the inverse.

    y_keep = z_keep
    y_move = z_move * exp(s(z_keep)) + t(z_keep)
    log|det J| = sum_j s(z_keep)_j

The log-scale is bounded as ``s = bound * tanh(raw)`` unless ``scale_bound``
is None.
"""

import math

import numpy as np

from glf.core import nn
from glf.core.tensor import (
    Parameter,
    Tensor,
    as_tensor,
    concat,
    exp,
    make_op,
    matmul,
    mul,
    neg,
    reduce_mean,
    reduce_sum,
    scale,
    split,
    square,
    sub,
    tanh,
    transpose,
)
from glf.errors import ConfigurationError, NumericError, SingularityError

MIN_ABS_DET = 1e-6
LOG_2PI = math.log(2 * math.pi)
BLOCK_ORDERS = ("w_first", "w_last")


def init_rotation(dim, seed):
    """Random rotation: orthogonal with determinant +1 (float64)."""
    if dim < 1:
        raise ConfigurationError("init_rotation: dimension must be >= 1")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def w_logdet(w, name="W"):
    """``log|det W|`` via LU with partial pivoting; gradient ``(W^-1)^T``."""
    w = as_tensor(w)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ConfigurationError(f"w_logdet: {name} must be square, got {w.shape}")
    w64 = w.data.astype(np.float64)
    sign, logabs = np.linalg.slogdet(w64)
    if sign == 0 or logabs < math.log(MIN_ABS_DET):
        raise SingularityError(f"{name}: |det| fell below {MIN_ABS_DET:g}")

    def bw(g):
        return (np.asarray(g * np.linalg.inv(w64).T, dtype=w.dtype),)

    return make_op(np.asarray(logabs, dtype=w.dtype), (w,), bw, "w_logdet")


def gaussian_nll(e):
    """Per-sample standard-normal negative log density of ``e[B, D]``."""
    e = as_tensor(e)
    d = e.shape[1]
    return reduce_sum(square(e), axes=1) * 0.5 + 0.5 * d * LOG_2PI


class CouplingLayer(nn.Module):
    """Affine coupling; ``flip=False`` keeps the first ``d`` coordinates."""

    def __init__(self, dim, d, hidden, rng, flip=False, scale_bound=2.0, dtype=np.float32):
        if not 1 <= d < dim:
            raise ConfigurationError(f"coupling split index must satisfy 1 <= d < D, got d={d}, D={dim}")
        self.dim, self.d, self.flip = dim, d, flip
        self.scale_bound = scale_bound
        n_keep = dim - d if flip else d
        self.n_move = dim - n_keep
        last = nn.Linear(hidden, 2 * self.n_move, rng, dtype)
        last.weight.data[...] = 0
        last.bias.data[...] = 0
        self.net = nn.Sequential(
            nn.Linear(n_keep, hidden, rng, dtype), nn.ReLU(),
            nn.Linear(hidden, hidden, rng, dtype), nn.ReLU(),
            last,
        )

    def _halves(self, x):
        lo, hi = split(x, self.d, axis=1)
        return (hi, lo) if self.flip else (lo, hi)

    def _join(self, keep, move):
        return concat(move, keep, axis=1) if self.flip else concat(keep, move, axis=1)

    def scale_shift(self, keep):
        try:
            raw_s, t = split(self.net(keep), self.n_move, axis=1)
            s = raw_s if self.scale_bound is None else scale(tanh(raw_s), self.scale_bound)
        except NumericError as err:
            rows = err.batch_indices or []
            at = f" at batch index {rows[0]}" if rows else ""
            raise NumericError(f"coupling layer: non-finite s/t{at}", batch_indices=rows) from err
        return s, t

    def forward(self, z):
        z = as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ConfigurationError(f"coupling layer expects [B, {self.dim}], got {z.shape}")
        keep, move = self._halves(z)
        s, t = self.scale_shift(keep)
        moved = mul(move, exp(s)) + t
        return self._join(keep, moved), reduce_sum(s, axes=1)

    def inverse(self, y):
        """Returns ``(z, logdet)`` where logdet is that of the inverse map."""
        y = as_tensor(y)
        if y.ndim != 2 or y.shape[1] != self.dim:
            raise ConfigurationError(f"coupling layer expects [B, {self.dim}], got {y.shape}")
        keep, move = self._halves(y)
        s, t = self.scale_shift(keep)
        restored = mul(sub(move, t), exp(neg(s)))
        return self._join(keep, restored), neg(reduce_sum(s, axes=1))


class CouplingBlock(nn.Module):
    def __init__(self, dim, hidden, rng, seed, scale_bound=2.0, order="w_first",
                 dtype=np.float32, name="block"):
        if order not in BLOCK_ORDERS:
            raise ConfigurationError(f"block order must be one of {BLOCK_ORDERS}, got {order!r}")
        d = (dim + 1) // 2
        self.order = order
        self.name = name
        self.W = Parameter(init_rotation(dim, seed).astype(dtype))
        self.layer_a = CouplingLayer(dim, d, hidden, rng, False, scale_bound, dtype)
        self.layer_b = CouplingLayer(dim, d, hidden, rng, True, scale_bound, dtype)

    def _mix(self, x):
        return matmul(x, transpose(self.W)), w_logdet(self.W, self.name)

    def _unmix(self, y):
        w = self.W.data.astype(np.float64)
        sign, logabs = np.linalg.slogdet(w)
        if sign == 0 or logabs < math.log(MIN_ABS_DET):
            raise SingularityError(f"{self.name}: |det| fell below {MIN_ABS_DET:g}")
        w_inv = np.linalg.inv(w).astype(self.W.dtype)
        return matmul(y, Tensor(np.ascontiguousarray(w_inv.T))), -logabs

    def forward(self, z):
        if self.order == "w_first":
            y, ld_w = self._mix(z)
            y, ld_a = self.layer_a(y)
            y, ld_b = self.layer_b(y)
        else:
            y, ld_a = self.layer_a(z)
            y, ld_b = self.layer_b(y)
            y, ld_w = self._mix(y)
        return y, ld_a + ld_b + ld_w

    def inverse(self, y):
        if self.order == "w_first":
            z, ld_b = self.layer_b.inverse(y)
            z, ld_a = self.layer_a.inverse(z)
            z, ld_w = self._unmix(z)
        else:
            z, ld_w = self._unmix(y)
            z, ld_b = self.layer_b.inverse(z)
            z, ld_a = self.layer_a.inverse(z)
        return z, ld_b + ld_a + ld_w


class FlowModel(nn.Module):
    """Stack of coupling blocks mapping latents ``z`` to standard-normal noise ``e``.

    Args:
        dim: latent dimension D (>= 2).
        n_blocks: number of coupling blocks.
        hidden: width k of every hidden layer in the scale/shift networks.
        scale_bound: bound on the log-scale, or None for an unbounded scale.
        order: ``"w_first"`` multiplies by W before the couplings of a block.
        seed: seeds the mixing-matrix rotations and the network weights.
    """

    def __init__(self, dim, n_blocks=4, hidden=32, scale_bound=2.0, order="w_first",
                 seed=0, dtype=np.float32):
        if dim < 2:
            raise ConfigurationError("flow needs a latent dimension of at least 2")
        if n_blocks < 1 or hidden < 1:
            raise ConfigurationError("flow needs n_blocks >= 1 and hidden >= 1")
        self.dim = dim
        self.dtype = np.dtype(dtype)
        seeds = np.random.SeedSequence(seed).spawn(n_blocks + 1)
        rng = np.random.default_rng(seeds[0])
        self.blocks = [
            CouplingBlock(dim, hidden, rng, seeds[i + 1], scale_bound, order, dtype, f"block {i}")
            for i in range(n_blocks)
        ]

    def _check(self, x):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ConfigurationError(f"flow expects [B, {self.dim}], got {x.shape}")
        return x

    def forward(self, z):
        """Returns ``(e, logdet)`` with a per-sample log-determinant of shape [B]."""
        e = self._check(z)
        logdet = None
        for block in self.blocks:
            e, ld = block(e)
            logdet = ld if logdet is None else logdet + ld
        return e, logdet

    def inverse(self, e):
        return self.inverse_and_logdet(e)[0]

    def inverse_and_logdet(self, e):
        """Returns ``(z, logdet)`` of the inverse map, blocks undone in reverse order."""
        z = self._check(e)
        logdet = None
        for block in reversed(self.blocks):
            z, ld = block.inverse(z)
            logdet = ld if logdet is None else logdet + ld
        return z, logdet

    def nll(self, z):
        return flow_nll(self, z)


def flow_nll(model, z):
    """Batch mean of ``-log p_E(f(z)) - log|det df/dz|``."""
    e, logdet = model(z)
    return reduce_mean(gaussian_nll(e) - logdet)
