"""Adam with optional AMSGrad, operating in place on Parameter data."""

import numpy as np

from glf.errors import ConfigurationError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
CHUNK = 1 << 15


class AdamState:
    """Moment accumulators for one parameter array."""

    __slots__ = ("m", "v", "v_max")

    def __init__(self, shape, dtype, amsgrad):
        self.m = np.zeros(shape, dtype)
        self.v = np.zeros(shape, dtype)
        self.v_max = np.zeros(shape, dtype) if amsgrad else None


def adam_step(param, grad, state, step, lr, amsgrad=False, beta1=BETA1, beta2=BETA2, eps=EPS):
    """Apply one bias-corrected Adam update to ``param`` in place.

    ``step`` is the 1-based update count.  The update is
    ``lr * m_hat / (sqrt(v_hat) + eps)``.  With ``amsgrad`` the running
    maximum is taken over the bias-corrected second moment, so the
    denominator never shrinks from one step to the next.
    """
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ConfigurationError(f"adam_step: shape mismatch {param.shape} / {grad.shape} / {state.m.shape}")
    if step < 1:
        raise ConfigurationError("adam_step: step count starts at 1")
    if not (param.flags.c_contiguous and state.m.flags.c_contiguous):
        raise ConfigurationError("adam_step: parameter and state arrays must be C-contiguous")
    grad = np.ascontiguousarray(grad)
    dt = param.dtype.type
    coef = {
        "b1": dt(beta1), "b2": dt(beta2), "g1": dt(1.0 - beta1), "g2": dt(1.0 - beta2),
        "c2": dt(1.0 - beta2 ** step), "lr": dt(lr / (1.0 - beta1 ** step)), "eps": dt(eps),
    }
    flat = [a.reshape(-1) for a in (param, grad, state.m, state.v)]
    v_max = state.v_max.reshape(-1) if amsgrad else None
    scratch = np.empty(min(CHUNK, param.size), dtype=param.dtype)
    # chunks keep the temporaries cache-resident for large layers
    for lo in range(0, param.size, CHUNK):
        hi = min(lo + CHUNK, param.size)
        p, g, m, v = (a[lo:hi] for a in flat)
        _update(p, g, m, v, None if v_max is None else v_max[lo:hi], scratch[:hi - lo], coef)


def _update(p, g, m, v, v_max, tmp, c):
    m *= c["b1"]
    np.multiply(g, c["g1"], out=tmp)
    m += tmp
    v *= c["b2"]
    np.multiply(g, g, out=tmp)
    tmp *= c["g2"]
    v += tmp
    np.divide(v, c["c2"], out=tmp)
    if v_max is not None:
        np.maximum(v_max, tmp, out=v_max)
        tmp[...] = v_max
    np.sqrt(tmp, out=tmp)
    tmp += c["eps"]
    np.divide(m, tmp, out=tmp)
    tmp *= c["lr"]
    p -= tmp


class Adam:
    """Adam over a named list of Parameters.

    Parameters without a gradient are treated as having a zero gradient so
    every accumulator advances in lockstep with the step counter.
    """

    def __init__(self, named_params, lr=1e-3, amsgrad=False):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr = lr
        self.amsgrad = amsgrad
        self.step_count = 0
        self.states = [AdamState(p.shape, p.dtype, amsgrad) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        self.step_count += 1
        lr = self.lr if lr is None else lr
        for p, state in zip(self.params, self.states):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p.data, grad, state, self.step_count, lr, self.amsgrad)

    def state_arrays(self, prefix):
        """Flat name -> array mapping of all accumulators (for checkpoints)."""
        out = {f"{prefix}step": np.array([self.step_count], dtype=np.int64)}
        for name, state in zip(self.names, self.states):
            out[f"{prefix}m.{name}"] = state.m
            out[f"{prefix}v.{name}"] = state.v
            if self.amsgrad:
                out[f"{prefix}vmax.{name}"] = state.v_max
        return out

    def load_state_arrays(self, arrays, prefix):
        self.step_count = int(arrays[f"{prefix}step"][0])
        for name, state in zip(self.names, self.states):
            for slot in ("m", "v") + (("vmax",) if self.amsgrad else ()):
                src = arrays[f"{prefix}{slot}.{name}"]
                dst = state.v_max if slot == "vmax" else getattr(state, slot)
                if src.shape != dst.shape or src.dtype != dst.dtype:
                    raise ConfigurationError(f"optimizer state {prefix}{slot}.{name}: shape/dtype mismatch")
                dst[...] = src
