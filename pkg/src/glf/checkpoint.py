"""Binary checkpoint files.

Layout (all integers little-endian)::

    magic      8 bytes  b"GLFCKPT1"
    version    u32
    config     u32 length + UTF-8 JSON run config (stored verbatim)
    n_arrays   u32
    arrays     n_arrays records:
                 u32 name length, UTF-8 name, u8 dtype tag, u32 rank,
                 rank x u32 extents, raw little-endian values
    rng        u32 length + UTF-8 JSON bit-generator state
    epoch      u32
    extra      u32 length + UTF-8 JSON (training history, stage bookkeeping)

Files are written to a temporary sibling and renamed into place.
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from glf.errors import FormatError

MAGIC = b"GLFCKPT1"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
TAG_OF = {np.dtype(v).newbyteorder("="): k for k, v in DTYPE_TAGS.items()}


@dataclass
class Checkpoint:
    config_text: str
    arrays: dict
    rng_state: dict
    epoch: int
    extra: dict = field(default_factory=dict)
    version: int = VERSION


def dump_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode(ckpt):
    out = [MAGIC, struct.pack("<I", ckpt.version)]

    def blob(text):
        raw = text.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)

    blob(ckpt.config_text)
    out.append(struct.pack("<I", len(ckpt.arrays)))
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr)
        tag = TAG_OF.get(arr.dtype.newbyteorder("="))
        if tag is None:
            raise TypeError(f"checkpoint array {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw_name)) + raw_name)
        out.append(struct.pack("<BI", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    blob(dump_json(ckpt.rng_state))
    out.append(struct.pack("<I", ckpt.epoch))
    blob(dump_json(ckpt.extra))
    return b"".join(out)


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated while reading {what}", offset=self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what):
        start = self.pos
        raw = self.take(self.u32(what), what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.path}: {what} is not UTF-8", offset=start) from exc

    def json(self, what):
        start = self.pos
        text = self.text(what)
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{self.path}: {what} is not valid JSON", offset=start) from exc


def decode(raw, path="<bytes>"):
    r = _Reader(raw, path)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", offset=0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})",
                          offset=len(MAGIC))
    config_text = r.text("config")
    arrays = {}
    for _ in range(r.u32("array count")):
        name = r.take(r.u32("array name length"), "array name").decode("utf-8", "replace")
        tag_at = r.pos
        tag, rank = struct.unpack("<BI", r.take(5, f"header of {name!r}"))
        if tag not in DTYPE_TAGS:
            raise FormatError(f"{path}: unknown dtype tag {tag} for {name!r}", offset=tag_at)
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"extents of {name!r}"))
        dtype = DTYPE_TAGS[tag]
        count = int(np.prod(shape, dtype=np.int64))
        data = r.take(count * dtype.itemsize, f"values of {name!r}")
        arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    rng_state = r.json("rng state")
    epoch = r.u32("epoch")
    extra = r.json("extra metadata")
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes", offset=r.pos)
    return Checkpoint(config_text, arrays, rng_state, epoch, extra, version)


def save(path, ckpt):
    """Atomically write ``ckpt`` to ``path``."""
    payload = encode(ckpt)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    return decode(raw, str(path))
