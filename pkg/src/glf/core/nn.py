"""Minimal layer containers on top of the autodiff core."""

import numpy as np

from glf.core import functional as F
from glf.core.tensor import Parameter, add_bias, matmul, relu, reshape, tanh
from glf.errors import ConfigurationError


class Module:
    """Holds Parameters, numpy buffers and sub-modules in attribute order.

    Names are dotted attribute paths (``encoder.0.weight``), with list
    positions used as path components.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        out = []
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                out.append((full, value))
            else:
                out.extend(value.named_parameters(full + "."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        out = [(f"{prefix}{k}", v) for k, v in getattr(self, "_buffers", {}).items()]
        for name, value in self._children():
            if isinstance(value, Module):
                out.extend(value.named_buffers(f"{prefix}{name}."))
        return out

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix=""):
        state = {name: p.data for name, p in self.named_parameters(prefix)}
        state.update(self.named_buffers(prefix))
        return state

    def load_state_dict(self, state, prefix=""):
        targets = dict(self.named_parameters(prefix))
        buffers = dict(self.named_buffers(prefix))
        for name, value in state.items():
            if not name.startswith(prefix):
                continue
            if name in targets:
                dst = targets[name].data
            elif name in buffers:
                dst = buffers[name]
            else:
                raise ConfigurationError(f"unexpected state entry {name!r}")
            if dst.shape != value.shape or dst.dtype != value.dtype:
                raise ConfigurationError(
                    f"state entry {name!r}: {value.dtype}{value.shape} != {dst.dtype}{dst.shape}")
            dst[...] = value
        missing = (set(targets) | set(buffers)) - set(state)
        if missing:
            raise ConfigurationError(f"missing state entries: {sorted(missing)}")


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight[in, out]``."""

    def __init__(self, n_in, n_out, rng, dtype=np.float32):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Parameter(_uniform(rng, bound, (n_in, n_out), dtype))
        self.bias = Parameter(_uniform(rng, bound, (n_out,), dtype))

    def forward(self, x):
        return add_bias(matmul(x, self.weight), self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, rng, kernel=4, stride=2, padding=1, dtype=np.float32):
        bound = 1.0 / np.sqrt(c_in * kernel * kernel)
        self.weight = Parameter(_uniform(rng, bound, (c_out, c_in, kernel, kernel), dtype))
        self.bias = Parameter(_uniform(rng, bound, (c_out,), dtype))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, rng, kernel=4, stride=2, padding=1, dtype=np.float32):
        bound = 1.0 / np.sqrt(c_out * kernel * kernel)
        self.weight = Parameter(_uniform(rng, bound, (c_in, c_out, kernel, kernel), dtype))
        self.bias = Parameter(_uniform(rng, bound, (c_out,), dtype))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }

    def forward(self, x):
        return F.batchnorm(x, self.gamma, self.beta, self._buffers["running_mean"],
                           self._buffers["running_var"], self.training)


class ReLU(Module):
    def forward(self, x):
        return relu(x)


class Tanh(Module):
    def forward(self, x):
        return tanh(x)


class Reshape(Module):
    """Reshape every sample, keeping the batch axis."""

    def __init__(self, *shape):
        self.shape = shape

    def forward(self, x):
        return reshape(x, (x.shape[0],) + self.shape)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __getitem__(self, i):
        return self.layers[i]

    def __len__(self):
        return len(self.layers)
