"""Datasets: IDX image files, synthetic 2-D point clouds, batching and PNM grids."""

import gzip
import math
import os
from dataclasses import dataclass, field

import numpy as np

from glf.errors import ConfigurationError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SYNTH_KINDS = ("ring_of_gaussians", "two_moons")
RING_RADIUS = 2.0


@dataclass(frozen=True)
class Dataset:
    """Immutable sample array with its source.

    ``images`` is float32 with values in [-1, 1]: [N, C, H, W] for image data
    or [N, F] for point clouds.  ``scale`` records the factor the raw values
    were divided by (1.0 for images).
    """

    images: np.ndarray
    name: str
    source: str = ""
    labels: np.ndarray | None = None
    scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) < 1:
            raise ConfigurationError("dataset must hold at least one sample")
        if np.abs(self.images).max() > 1.0:
            raise ConfigurationError("dataset values must lie in [-1, 1]")
        self.images.setflags(write=False)

    def __len__(self):
        return len(self.images)

    @property
    def sample_shape(self):
        return tuple(self.images.shape[1:])


def bytes_to_unit(raw):
    """Map bytes 0..255 to [-1, 1] as x / 127.5 - 1."""
    return (raw.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def unit_to_bytes(x):
    """Inverse of ``bytes_to_unit`` with round-half-up and clamping."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip(np.floor((x + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def _read_bytes(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        raw = fh.read()
    if head == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _parse_idx(raw, path, magic, ndim):
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated magic number", offset=len(raw))
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated dimension header", offset=len(raw))
    dims = tuple(int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim))
    if any(d == 0 for d in dims):
        raise FormatError(f"{path}: zero extent in header {dims}", offset=4)
    count = math.prod(dims)
    if len(raw) - header_end < count:
        raise FormatError(f"{path}: truncated payload, header declares {count} bytes "
                          f"but only {len(raw) - header_end} follow", offset=len(raw))
    if len(raw) - header_end > count:
        raise FormatError(f"{path}: {len(raw) - header_end - count} trailing bytes after payload",
                          offset=header_end + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def load_idx(images_path, labels_path=None, limit=None, subset_seed=None, name=None):
    """Read IDX (optionally gzip-compressed) images and labels.

    With ``limit`` the first ``limit`` images are kept, after a seeded
    shuffle when ``subset_seed`` is given.
    """
    pixels = _parse_idx(_read_bytes(images_path), images_path, IMAGE_MAGIC, 3)
    labels = None
    if labels_path is not None:
        labels = _parse_idx(_read_bytes(labels_path), labels_path, LABEL_MAGIC, 1)
        if len(labels) != len(pixels):
            raise FormatError(f"{labels_path}: {len(labels)} labels for {len(pixels)} images", offset=4)
    index = np.arange(len(pixels))
    if subset_seed is not None:
        index = np.random.default_rng(subset_seed).permutation(len(pixels))
    if limit is not None:
        if not 1 <= limit <= len(pixels):
            raise ConfigurationError(f"limit must be in [1, {len(pixels)}], got {limit}")
        index = index[:limit]
    images = bytes_to_unit(pixels[index])[:, None, :, :]
    meta = {"total": len(pixels), "limit": limit, "subset_seed": subset_seed}
    return Dataset(images, name or os.path.basename(images_path), source=str(images_path),
                   labels=None if labels is None else labels[index].copy(), meta=meta)


def write_idx(path, pixels, magic=IMAGE_MAGIC):
    """Write a uint8 array as an IDX file (gzip when the path ends in .gz)."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    header = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in pixels.shape)
    payload = header + pixels.tobytes()
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as fh:
        fh.write(payload)


@dataclass(frozen=True)
class Synth2DSpec:
    kind: str = "ring_of_gaussians"
    n_modes: int = 8
    noise_sigma: float = 0.05
    n_samples: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SYNTH_KINDS:
            raise ConfigurationError(f"kind must be one of {SYNTH_KINDS}, got {self.kind!r}")
        if self.kind == "ring_of_gaussians" and self.n_modes < 2:
            raise ConfigurationError("ring needs n_modes >= 2")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be >= 1")


def ring_centers(n_modes, radius=RING_RADIUS):
    angles = 2 * np.pi * np.arange(n_modes) / n_modes
    centers = np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)
    # snap the cos/sin rounding residue so that axis-aligned centers are exact
    centers[np.abs(centers) < 1e-12] = 0.0
    return centers


def synth2d(spec):
    """Seeded 2-D points, float64 [N, 2] in raw units."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples
    if spec.kind == "ring_of_gaussians":
        modes = rng.integers(0, spec.n_modes, n)
        points = ring_centers(spec.n_modes)[modes]
    else:
        t = rng.uniform(0, np.pi, n)
        upper = rng.integers(0, 2, n).astype(bool)
        points = np.where(upper[:, None],
                          np.stack([np.cos(t), np.sin(t)], 1),
                          np.stack([1 - np.cos(t), 0.5 - np.sin(t)], 1))
    if spec.noise_sigma > 0:
        points = points + rng.normal(0.0, spec.noise_sigma, points.shape)
    return points


def synth_dataset(spec, scale=2.5):
    """Wrap ``synth2d`` points as a Dataset, dividing by ``scale`` to fit inside (-1, 1)."""
    points = synth2d(spec) / scale
    if np.abs(points).max() > 1.0:
        raise ConfigurationError(f"scale {scale} leaves samples outside [-1, 1]")
    return Dataset(points.astype(np.float32), spec.kind, source=repr(spec), scale=float(scale))


def batches(n, batch_size, rng):
    """Index arrays for one epoch: a permutation drawn from ``rng`` cut into batches.

    The final batch is dropped when it holds a single sample (batchnorm needs
    two).  ``rng`` is a numpy Generator whose state advances by one permutation.
    """
    if batch_size < 2:
        raise ConfigurationError(f"batch_size must be >= 2, got {batch_size}")
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if out and len(out[-1]) < 2:
        out.pop()
    return out


def tile_grid(images, columns):
    """Arrange [n, C, H, W] images row-major into a [C, rows*H, columns*W] array of -1 padding."""
    images = np.asarray(images)
    if images.ndim != 4 or len(images) < 1:
        raise ConfigurationError(f"expected a non-empty [n, C, H, W] array, got shape {images.shape}")
    if columns < 1:
        raise ConfigurationError("columns must be >= 1")
    n, c, h, w = images.shape
    rows = -(-n // columns)
    grid = np.full((c, rows * h, columns * w), -1.0, dtype=np.float64)
    for i, img in enumerate(images):
        r, col = divmod(i, columns)
        grid[:, r * h:(r + 1) * h, col * w:(col + 1) * w] = img
    return grid


def write_grid(images, path, columns):
    """Write images as one binary PGM (1 channel) or PPM (3 channels)."""
    grid = tile_grid(images, columns)
    c, height, width = grid.shape
    if c not in (1, 3):
        raise ConfigurationError(f"write_grid supports 1 or 3 channels, got {c}")
    pixels = unit_to_bytes(grid)
    tag = b"P5" if c == 1 else b"P6"
    body = pixels[0] if c == 1 else np.transpose(pixels, (1, 2, 0))
    with open(path, "wb") as fh:
        fh.write(tag + f"\n{width} {height}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(body).tobytes())


def read_pnm(path):
    """Read a binary PGM/PPM written by ``write_grid``; returns uint8 [C, H, W]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PNM header", offset=pos)
        tokens.append(raw[start:pos])
    pos += 1
    tag, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if tag not in (b"P5", b"P6") or maxval != 255:
        raise FormatError(f"{path}: unsupported PNM variant {tag!r} maxval {maxval}", offset=0)
    c = 1 if tag == b"P5" else 3
    need = width * height * c
    if len(raw) - pos != need:
        raise FormatError(f"{path}: expected {need} pixel bytes, found {len(raw) - pos}", offset=pos)
    pixels = np.frombuffer(raw, np.uint8, need, pos).reshape(height, width, c)
    return np.transpose(pixels, (2, 0, 1)).copy()
