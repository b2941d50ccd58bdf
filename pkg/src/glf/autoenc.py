"""Deterministic encoder/decoder pair and reconstruction losses.

The convolutional template (for a C x H x H image, M = H / 4):

    encoder: Conv4x4(C->64), ReLU; Conv4x4(64->128), BN, ReLU;
             FC(128*M*M -> 1024), BN, ReLU; FC(1024 -> nz)
    decoder: FC(nz -> 1024), BN, ReLU; FC(1024 -> 128*M*M), BN, ReLU;
             Deconv4x4(128->64), BN, ReLU; Deconv4x4(64->C), Tanh

All (de)convolutions use stride 2 and padding 1.  The ``mlp`` variant serves
low-dimensional synthetic data.
"""

from dataclasses import dataclass

import numpy as np

from glf.core import nn
from glf.core.functional import conv2d, pad2d
from glf.core.tensor import Tensor, as_tensor, no_grad, reduce_mean, relu, scale, square, sub
from glf.errors import ConfigurationError

ARCHS = ("conv", "mlp")


@dataclass(frozen=True)
class AeConfig:
    image_shape: tuple
    nz: int
    arch: str = "conv"
    conv_channels: tuple = (64, 128)
    fc_width: int = 1024
    mlp_width: int = 256
    mlp_depth: int = 3

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(n) for n in self.image_shape))
        object.__setattr__(self, "conv_channels", tuple(int(n) for n in self.conv_channels))
        if self.arch not in ARCHS:
            raise ConfigurationError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.nz < 1:
            raise ConfigurationError("nz must be >= 1")
        if self.arch == "conv":
            if len(self.image_shape) != 3:
                raise ConfigurationError("conv arch needs image_shape (C, H, W)")
            _, h, w = self.image_shape
            if h != w or h % 4:
                raise ConfigurationError(f"conv arch needs square images with H divisible by 4, got {h}x{w}")
            if len(self.conv_channels) != 2:
                raise ConfigurationError("conv_channels must list two channel counts")
        elif len(self.image_shape) != 1:
            raise ConfigurationError("mlp arch needs image_shape (features,)")

    @property
    def M(self):
        return self.image_shape[1] // 4


class AutoEncoder(nn.Module):
    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        if config.arch == "conv":
            self.encoder, self.decoder = _conv_template(config, rng, dtype)
        else:
            self.encoder, self.decoder = _mlp_template(config, rng, dtype)

    def encode(self, x):
        x = as_tensor(x)
        expected = self.config.image_shape
        if x.ndim != len(expected) + 1 or x.shape[1:] != expected:
            raise ConfigurationError(f"encode expects [B, {', '.join(map(str, expected))}], got {x.shape}")
        return self.encoder(x)

    def decode(self, z):
        z = as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.config.nz:
            raise ConfigurationError(f"decode expects [B, {self.config.nz}], got {z.shape}")
        return self.decoder(z)

    def forward(self, x):
        return self.decode(self.encode(x))


def _conv_template(cfg, rng, dtype):
    c, _, _ = cfg.image_shape
    c1, c2 = cfg.conv_channels
    m, fc = cfg.M, cfg.fc_width
    encoder = nn.Sequential(
        nn.Conv2d(c, c1, rng, dtype=dtype), nn.ReLU(),
        nn.Conv2d(c1, c2, rng, dtype=dtype), nn.BatchNorm(c2, dtype), nn.ReLU(),
        nn.Reshape(c2 * m * m),
        nn.Linear(c2 * m * m, fc, rng, dtype), nn.BatchNorm(fc, dtype), nn.ReLU(),
        nn.Linear(fc, cfg.nz, rng, dtype),
    )
    decoder = nn.Sequential(
        nn.Linear(cfg.nz, fc, rng, dtype), nn.BatchNorm(fc, dtype), nn.ReLU(),
        nn.Linear(fc, c2 * m * m, rng, dtype), nn.BatchNorm(c2 * m * m, dtype), nn.ReLU(),
        nn.Reshape(c2, m, m),
        nn.ConvTranspose2d(c2, c1, rng, dtype=dtype), nn.BatchNorm(c1, dtype), nn.ReLU(),
        nn.ConvTranspose2d(c1, c, rng, dtype=dtype), nn.Tanh(),
    )
    return encoder, decoder


def _mlp_template(cfg, rng, dtype):
    (n_in,) = cfg.image_shape
    width = cfg.mlp_width

    def stack(first):
        layers = [nn.Linear(first, width, rng, dtype), nn.ReLU()]
        for _ in range(cfg.mlp_depth - 1):
            layers += [nn.Linear(width, width, rng, dtype), nn.ReLU()]
        return layers

    encoder = nn.Sequential(*stack(n_in), nn.Linear(width, cfg.nz, rng, dtype))
    decoder = nn.Sequential(*stack(cfg.nz), nn.Linear(width, n_in, rng, dtype), nn.Tanh())
    return encoder, decoder


class FeatureExtractor:
    """Fixed random conv net whose activations act as a feature space.

    Images are padded with -1 (background) up to a multiple of 8 so that
    every stride-2 layer halves the extent exactly.  Tap 0 is the raw
    (unpadded) input; tap i >= 1 is the output of conv layer i.
    """

    def __init__(self, image_shape, seed=0, channels=(16, 32, 64), taps=(1, 2, 3),
                 dtype=np.float32):
        c, h, w = image_shape
        if h != w:
            raise ConfigurationError("feature extractor needs square images")
        if any(t < 0 or t > len(channels) for t in taps):
            raise ConfigurationError(f"taps must lie in [0, {len(channels)}]")
        self.image_shape = tuple(image_shape)
        self.seed = seed
        self.taps = tuple(taps)
        factor = 2 ** len(channels)
        self.pad = (-h % factor + 1) // 2 if h % factor else 0
        if (h + 2 * self.pad) % factor:
            raise ConfigurationError(f"cannot pad {h} to a multiple of {factor} symmetrically")
        rng = np.random.default_rng(seed)
        self.kernels = []
        c_in = c
        for c_out in channels:
            fan_in = c_in * 16
            k = rng.standard_normal((c_out, c_in, 4, 4)) * np.sqrt(2.0 / fan_in)
            self.kernels.append(Tensor(k.astype(dtype)))
            c_in = c_out
        self.dtype = np.dtype(dtype)

    def activations(self, x):
        """Activations for every tap in ``self.taps`` (a list of Tensors)."""
        x = as_tensor(x)
        if x.shape[1:] != self.image_shape:
            raise ConfigurationError(f"feature extractor expects [B, {self.image_shape}], got {x.shape}")
        acts = [x]
        h = pad2d(x, self.pad, -1.0)
        for k in self.kernels:
            h = relu(conv2d(h, k if k.dtype == h.dtype else Tensor(k.data.astype(h.dtype))))
            acts.append(h)
        return [acts[t] for t in self.taps]

    def embed(self, images, batch_size=500):
        """Flattened last-layer features for an array of images, [N, F] float64."""
        images = np.asarray(images)
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                batch = Tensor(images[i:i + batch_size].astype(self.dtype))
                h = pad2d(batch, self.pad, -1.0)
                for k in self.kernels:
                    h = relu(conv2d(h, k))
                out.append(h.data.reshape(len(batch), -1).astype(np.float64))
        return np.concatenate(out, axis=0)


REDUCTIONS = ("mean", "sum")


def recon_mse(x, x_hat, reduction="mean"):
    """Squared error averaged over all elements (``mean``) or summed per sample
    and averaged over the batch (``sum``)."""
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ConfigurationError(f"recon_mse: shape mismatch {x.shape} vs {x_hat.shape}")
    if reduction not in REDUCTIONS:
        raise ConfigurationError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    loss = reduce_mean(square(sub(x, x_hat)))
    return scale(loss, x.size // x.shape[0]) if reduction == "sum" else loss


def recon_feature(x, x_hat, extractor, reduction="mean"):
    """Sum over taps of the MSE between activations; ``x`` is treated as a constant.

    With ``reduction="sum"`` each tap contributes its per-sample summed
    squared error instead of the per-element mean.
    """
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ConfigurationError(f"recon_feature: shape mismatch {x.shape} vs {x_hat.shape}")
    with no_grad():
        targets = [Tensor(a.data) for a in extractor.activations(x.detach())]
    total = None
    for target, act in zip(targets, extractor.activations(x_hat)):
        term = recon_mse(target, act, reduction)
        total = term if total is None else total + term
    return total
