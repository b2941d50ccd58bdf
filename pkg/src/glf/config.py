"""Flat JSON run configuration: validation and model/trainer construction."""

import json
import os
import types
import typing
from dataclasses import MISSING, asdict, dataclass, fields

import numpy as np

from glf.autoenc import AeConfig, AutoEncoder, FeatureExtractor
from glf.data import Synth2DSpec, load_idx, synth_dataset
from glf.errors import ConfigurationError
from glf.flow import BLOCK_ORDERS, FlowModel
from glf.train import TrainConfig

DATASETS = ("idx", "ring_of_gaussians", "two_moons")
FLOAT_TYPES = ("float32", "float64")


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run.  Only ``nz`` is required; paths are resolved on load."""

    nz: int
    # data
    dataset: str = "idx"
    images_path: str | None = None
    labels_path: str | None = None
    limit: int | None = None
    subset_seed: int | None = None
    n_modes: int = 8
    noise_sigma: float = 0.05
    n_samples: int = 2000
    data_seed: int = 0
    data_scale: float = 2.5
    # auto-encoder
    arch: str = "conv"
    conv_channels: list = (64, 128)
    fc_width: int = 1024
    mlp_width: int = 256
    mlp_depth: int = 3
    ae_seed: int = 0
    # flow
    n_blocks: int = 4
    hidden: int = 32
    scale_bound: float | None = 2.0
    block_order: str = "w_first"
    flow_seed: int = 0
    dtype: str = "float32"
    # training
    beta: float = 1.0
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    lr_halving_period: int = 0
    amsgrad_flow: bool = True
    stage_mode: str = "one_stage"
    seed: int = 0
    recon_kind: str = "mse"
    recon_reduction: str = "sum"
    flow_lr: str = "follow"
    flow_epochs: int | None = None
    # evaluation
    fx_seed: int = 0
    n_eval: int = 5000
    prd_clusters: int = 20
    prd_angles: int = 1001
    prd_runs: int = 10
    gmm_components: int = 10
    out_dir: str = "runs"

    def __post_init__(self):
        for f in fields(self):
            _check_type(f.name, getattr(self, f.name), f.type)
        object.__setattr__(self, "conv_channels", [int(c) for c in self.conv_channels])
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"dataset: must be one of {DATASETS}, got {self.dataset!r}")
        if self.dataset == "idx" and not self.images_path:
            raise ConfigurationError("images_path: required when dataset is 'idx'")
        if self.dtype not in FLOAT_TYPES:
            raise ConfigurationError(f"dtype: must be one of {FLOAT_TYPES}")
        if self.block_order not in BLOCK_ORDERS:
            raise ConfigurationError(f"block_order: must be one of {BLOCK_ORDERS}")
        for name in ("n_blocks", "hidden", "n_eval", "prd_clusters", "prd_angles", "prd_runs",
                     "gmm_components", "fc_width", "mlp_width", "mlp_depth", "n_samples"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name}: must be >= 1")
        if self.scale_bound is not None and self.scale_bound <= 0:
            raise ConfigurationError("scale_bound: must be > 0 or null")
        if self.data_scale <= 0:
            raise ConfigurationError("data_scale: must be > 0")
        # delegate the remaining range checks to the component configs
        for build in (self.ae_config, self.train_config, self.synth_spec):
            try:
                build()
            except ConfigurationError as exc:
                raise ConfigurationError(f"invalid config: {exc}") from exc

    @classmethod
    def from_dict(cls, raw, base_dir=None):
        if not isinstance(raw, dict):
            raise ConfigurationError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
        missing = [f.name for f in fields(cls)
                   if f.default is MISSING and f.default_factory is MISSING and f.name not in raw]
        if missing:
            raise ConfigurationError(f"missing required field(s): {', '.join(missing)}")
        values = dict(raw)
        if base_dir is not None:
            for key in ("images_path", "labels_path"):
                if values.get(key):
                    values[key] = os.path.normpath(os.path.join(base_dir, values[key]))
        return cls(**values)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))

    @classmethod
    def from_text(cls, text):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"invalid config JSON ({exc})") from exc
        return cls.from_dict(raw)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes):
        return RunConfig.from_dict({**asdict(self), **changes})

    # -- builders ----------------------------------------------------------------

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def nominal_shape(self):
        """Sample shape used for up-front validation (IDX files are checked again on load)."""
        return (1, 28, 28) if self.dataset == "idx" else (2,)

    def ae_config(self, sample_shape=None):
        if (self.arch == "mlp") != (self.dataset != "idx"):
            raise ConfigurationError(f"arch: {self.arch!r} does not fit dataset {self.dataset!r} "
                                     "(conv for images, mlp for 2-D data)")
        return AeConfig(tuple(sample_shape or self.nominal_shape()), self.nz, arch=self.arch,
                        conv_channels=tuple(self.conv_channels), fc_width=self.fc_width,
                        mlp_width=self.mlp_width, mlp_depth=self.mlp_depth)

    def train_config(self):
        return TrainConfig(beta=self.beta, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           lr_halving_period=self.lr_halving_period, amsgrad_flow=self.amsgrad_flow,
                           stage_mode=self.stage_mode, seed=self.seed, recon_kind=self.recon_kind,
                           recon_reduction=self.recon_reduction,
                           flow_lr=self.flow_lr, flow_epochs=self.flow_epochs)

    def synth_spec(self):
        if self.dataset == "idx":
            return None
        return Synth2DSpec(kind=self.dataset, n_modes=self.n_modes, noise_sigma=self.noise_sigma,
                           n_samples=self.n_samples, seed=self.data_seed)

    def load_dataset(self):
        if self.dataset == "idx":
            return load_idx(self.images_path, self.labels_path, limit=self.limit,
                            subset_seed=self.subset_seed)
        return synth_dataset(self.synth_spec(), scale=self.data_scale)

    def build_models(self, dataset):
        ae = AutoEncoder(self.ae_config(dataset.sample_shape), seed=self.ae_seed, dtype=self.np_dtype)
        flow = FlowModel(self.nz, n_blocks=self.n_blocks, hidden=self.hidden, scale_bound=self.scale_bound,
                         order=self.block_order, seed=self.flow_seed, dtype=self.np_dtype)
        return ae, flow

    def feature_extractor(self, dataset):
        if len(dataset.sample_shape) != 3:
            return None
        return FeatureExtractor(dataset.sample_shape, seed=self.fx_seed)


def _check_type(name, value, annotation):
    args = typing.get_args(annotation) if isinstance(annotation, types.UnionType) else (annotation,)
    base = next(a for a in args if a is not type(None))
    if value is None:
        if type(None) in args:
            return
        raise ConfigurationError(f"{name}: must not be null")
    accepted = {float: (int, float), list: (list, tuple)}.get(base, (base,))
    if (isinstance(value, bool) and base is not bool) or not isinstance(value, accepted):
        raise ConfigurationError(f"{name}: expected {base.__name__}, got {type(value).__name__}")
