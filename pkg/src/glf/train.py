"""One-stage and two-stage training of an auto-encoder with a latent flow."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from glf import checkpoint
from glf.autoenc import REDUCTIONS, recon_feature, recon_mse
from glf.core import Tensor, no_grad, scale
from glf.data import batches
from glf.errors import ConfigurationError, NumericError
from glf.flow import flow_nll
from glf.optim import Adam

STAGE_MODES = ("one_stage", "two_stage")
RECON_KINDS = ("mse", "feature")
FLOW_LR_MODES = ("follow", "constant")
EVAL_CHUNK = 500


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    ``flow_lr`` selects whether the flow's learning rate in one-stage runs
    follows the halving schedule (``follow``) or stays at ``lr``
    (``constant``).  The second stage of a two-stage run always uses a
    constant rate.  ``flow_epochs`` is the stage-2 budget (defaults to
    ``epochs``).  ``recon_reduction`` picks per-sample summed squared error
    (``sum``) or the per-element mean (``mean``); with the mean the
    reconstruction term is too weak against the flow likelihood at
    ``beta=1`` and the latent codes shrink towards zero.
    """

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

    def __post_init__(self):
        if not self.beta >= 0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2 (batchnorm), got {self.batch_size}")
        if self.lr_halving_period < 0:
            raise ConfigurationError("lr_halving_period must be >= 0")
        if self.stage_mode not in STAGE_MODES:
            raise ConfigurationError(f"stage_mode must be one of {STAGE_MODES}")
        if self.recon_kind not in RECON_KINDS:
            raise ConfigurationError(f"recon_kind must be one of {RECON_KINDS}")
        if self.recon_reduction not in REDUCTIONS:
            raise ConfigurationError(f"recon_reduction must be one of {REDUCTIONS}")
        if self.flow_lr not in FLOW_LR_MODES:
            raise ConfigurationError(f"flow_lr must be one of {FLOW_LR_MODES}")
        if self.flow_epochs is not None and self.flow_epochs < 0:
            raise ConfigurationError("flow_epochs must be >= 0")

    @property
    def stage2_epochs(self):
        return self.epochs if self.flow_epochs is None else self.flow_epochs


def lr_schedule(epoch, config):
    """Learning rate for a 0-based epoch: halved every ``lr_halving_period`` epochs."""
    if epoch < 0:
        raise ConfigurationError("epoch must be >= 0")
    if config.lr_halving_period == 0:
        return config.lr
    return config.lr * 2.0 ** -(epoch // config.lr_halving_period)


def reconstruction(x, x_hat, kind, extractor=None, reduction="mean"):
    if kind == "mse":
        return recon_mse(x, x_hat, reduction)
    if extractor is None:
        raise ConfigurationError("feature reconstruction loss needs a FeatureExtractor")
    return recon_feature(x, x_hat, extractor, reduction)


def _attributed(component, fn):
    try:
        return fn()
    except NumericError as exc:
        raise NumericError(f"{component}: {exc}", exc.batch_indices) from exc


def glf_loss(ae, flow, x, beta, recon_kind="mse", extractor=None, reduction="mean"):
    """Joint objective ``recon + beta * nll``; returns (total, recon, nll).

    The latent codes feed the flow without detaching, so for ``beta > 0``
    the likelihood term also shapes the encoder.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    z = _attributed("encoder", lambda: ae.encode(x))
    recon = _attributed("reconstruction", lambda: reconstruction(x, ae.decode(z), recon_kind, extractor, reduction))
    nll = _attributed("flow nll", lambda: flow_nll(flow, z))
    if beta == 0:
        return recon, recon, nll
    total = _attributed("total", lambda: recon + scale(nll, beta))
    return total, recon, nll


class Trainer:
    """Owns the models, the optimizers, the shuffling stream and the history.

    ``stage`` is ``one_stage``, ``stage1`` or ``stage2``; ``epoch`` counts
    epochs completed within the current stage.
    """

    def __init__(self, ae, flow, dataset, config, extractor=None, config_text="{}"):
        if config.recon_kind == "feature" and extractor is None:
            raise ConfigurationError("recon_kind='feature' needs a FeatureExtractor")
        if len(dataset) < 2:
            raise ConfigurationError("training needs at least two samples")
        self.ae, self.flow, self.dataset, self.config = ae, flow, dataset, config
        # datasets are float32; a float64 run trains on a float64 copy
        self.images = dataset.images.astype(ae.dtype, copy=False)
        self.extractor = extractor
        self.config_text = config_text
        self.ae_opt = Adam(ae.named_parameters(), config.lr, amsgrad=False)
        self.flow_opt = Adam(flow.named_parameters(), config.lr, amsgrad=config.amsgrad_flow)
        self.rng = np.random.Generator(np.random.PCG64(config.seed))
        self.stage = "one_stage" if config.stage_mode == "one_stage" else "stage1"
        self.epoch = 0
        self.history = []
        self._latents = None

    # -- driving --------------------------------------------------------------

    def done(self):
        cfg = self.config
        if self.stage == "one_stage":
            return self.epoch >= cfg.epochs
        if self.stage == "stage1":
            return self.epoch >= cfg.epochs and cfg.stage2_epochs == 0
        return self.epoch >= cfg.stage2_epochs

    def run(self, on_epoch=None):
        """Train until the configured budget is spent; ``on_epoch(trainer)`` fires after each epoch."""
        while not self.done():
            self.step_epoch()
            if on_epoch is not None:
                on_epoch(self)
        return self.history

    def step_epoch(self):
        if self.stage == "stage1" and self.epoch >= self.config.epochs:
            self.stage, self.epoch = "stage2", 0
        if self.stage == "one_stage":
            entry = self._one_stage_epoch()
        elif self.stage == "stage1":
            entry = self._stage1_epoch()
        else:
            entry = self._stage2_epoch()
        self.epoch += 1
        entry = {"stage": self.stage, "epoch": self.epoch, **entry}
        self.history.append(entry)
        return entry

    # -- epochs ---------------------------------------------------------------

    def _batch_loop(self, n, body):
        sums = {"recon": 0.0, "nll": 0.0, "total": 0.0}
        parts = batches(n, self.config.batch_size, self.rng)
        for b, idx in enumerate(parts):
            try:
                # overflow surfaces as a NumericError from the finiteness checks
                with np.errstate(over="ignore", invalid="ignore"):
                    values = body(idx)
            except NumericError as exc:
                raise NumericError(f"{self.stage} epoch {self.epoch + 1} batch {b}: {exc}",
                                   exc.batch_indices) from exc
            for k, v in values.items():
                sums[k] += v
        return {k: v / len(parts) for k, v in sums.items()}

    def _one_stage_epoch(self):
        cfg = self.config
        lr = lr_schedule(self.epoch, cfg)
        flow_lr = lr if cfg.flow_lr == "follow" else cfg.lr
        self.ae.train()
        self.flow.train()
        images = self.images

        def body(idx):
            self.ae_opt.zero_grad()
            self.flow_opt.zero_grad()
            total, recon, nll = glf_loss(self.ae, self.flow, Tensor(images[idx]), cfg.beta,
                                         cfg.recon_kind, self.extractor, cfg.recon_reduction)
            total.backward()
            self.ae_opt.step(lr)
            self.flow_opt.step(flow_lr)
            return {"recon": recon.item(), "nll": nll.item(), "total": total.item()}

        return {**self._batch_loop(len(images), body), "lr": lr}

    def _stage1_epoch(self):
        cfg = self.config
        lr = lr_schedule(self.epoch, cfg)
        self.ae.train()
        images = self.images

        def body(idx):
            self.ae_opt.zero_grad()
            x = Tensor(images[idx])
            z = _attributed("encoder", lambda: self.ae.encode(x))
            recon = _attributed("reconstruction",
                                lambda: reconstruction(x, self.ae.decode(z), cfg.recon_kind,
                                                       self.extractor, cfg.recon_reduction))
            recon.backward()
            self.ae_opt.step(lr)
            with no_grad():
                nll = _attributed("flow nll", lambda: flow_nll(self.flow, z.detach()))
            return {"recon": recon.item(), "nll": nll.item(), "total": recon.item()}

        return {**self._batch_loop(len(images), body), "lr": lr}

    def latents(self):
        """Eval-mode encodings of the whole dataset (cached for the frozen second stage)."""
        if self._latents is None:
            cfg = self.config
            self._latents, self._recon = encode_dataset(self.ae, self.images, cfg.recon_kind,
                                                        self.extractor, cfg.recon_reduction)
        return self._latents

    def _stage2_epoch(self):
        cfg = self.config
        self.ae.eval()
        self.flow.train()
        z_all = self.latents()

        def body(idx):
            self.flow_opt.zero_grad()
            nll = _attributed("flow nll", lambda: flow_nll(self.flow, Tensor(z_all[idx])))
            nll.backward()
            self.flow_opt.step(cfg.lr)
            return {"recon": self._recon, "nll": nll.item(), "total": self._recon + cfg.beta * nll.item()}

        return {**self._batch_loop(len(z_all), body), "lr": cfg.lr}

    # -- persistence ------------------------------------------------------------

    def to_checkpoint(self):
        arrays = {}
        for prefix, module in (("ae.", self.ae), ("flow.", self.flow)):
            for name, arr in module.state_dict().items():
                arrays[prefix + name] = arr
        arrays.update(self.ae_opt.state_arrays("opt.ae."))
        arrays.update(self.flow_opt.state_arrays("opt.flow."))
        extra = {"stage": self.stage, "history": self.history, "train_config": asdict(self.config)}
        return checkpoint.Checkpoint(self.config_text, arrays, self.rng.bit_generator.state,
                                     self.epoch, extra)

    def save(self, path):
        checkpoint.save(path, self.to_checkpoint())

    def restore(self, ckpt):
        """Load models, optimizer moments, RNG stream and progress from a checkpoint."""
        load_models(self.ae, self.flow, ckpt)
        self.ae_opt.load_state_arrays(ckpt.arrays, "opt.ae.")
        self.flow_opt.load_state_arrays(ckpt.arrays, "opt.flow.")
        self.rng.bit_generator.state = ckpt.rng_state
        self.epoch = ckpt.epoch
        self.stage = ckpt.extra["stage"]
        self.history = list(ckpt.extra["history"])
        self._latents = None
        return self


def load_models(ae, flow, ckpt):
    for prefix, module in (("ae.", ae), ("flow.", flow)):
        state = {k[len(prefix):]: v for k, v in ckpt.arrays.items() if k.startswith(prefix)}
        module.load_state_dict(state)


def encode_dataset(ae, dataset, recon_kind="mse", extractor=None, reduction="mean"):
    """Eval-mode latent codes of every sample plus the mean reconstruction loss."""
    was_training = ae.training
    ae.eval()
    codes, total = [], 0.0
    images = dataset.images if hasattr(dataset, "images") else np.asarray(dataset)
    with no_grad():
        for i in range(0, len(images), EVAL_CHUNK):
            x = Tensor(images[i:i + EVAL_CHUNK].astype(ae.dtype, copy=False))
            z = ae.encode(x)
            total += reconstruction(x, ae.decode(z), recon_kind, extractor, reduction).item() * len(x)
            codes.append(z.data)
    ae.train(was_training)
    return np.concatenate(codes), total / len(images)


def noise(n, dim, seed, dtype=np.float32):
    """Seeded standard-normal noise of shape [n, dim]."""
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    return np.random.default_rng(seed).standard_normal((n, dim)).astype(dtype)


def decode_noise(ae, flow, e):
    """Map noise through the inverse flow and the decoder (eval mode), returning numpy images."""
    was_training = ae.training
    ae.eval()
    out = []
    e = np.asarray(e, dtype=flow.dtype)
    with no_grad():
        for i in range(0, len(e), EVAL_CHUNK):
            z = flow.inverse(Tensor(e[i:i + EVAL_CHUNK]))
            out.append(ae.decode(Tensor(z.data.astype(ae.dtype))).data)
    ae.train(was_training)
    return np.concatenate(out)


def decode_latents(ae, z):
    was_training = ae.training
    ae.eval()
    z = np.asarray(z, dtype=ae.dtype)
    with no_grad():
        out = [ae.decode(Tensor(z[i:i + EVAL_CHUNK])).data for i in range(0, len(z), EVAL_CHUNK)]
    ae.train(was_training)
    return np.concatenate(out)


def sample(ae, flow, n, seed):
    """Draw ``n`` images: standard-normal noise, inverse flow, decoder."""
    return Tensor(decode_noise(ae, flow, noise(n, flow.dim, seed, flow.dtype)))


def interpolate(ae, flow, e_start, e_end, steps):
    """Decode ``steps`` points on the segment between two noise vectors (endpoints included)."""
    if steps < 2:
        raise ConfigurationError("steps must be >= 2")
    e_start = np.asarray(e_start, dtype=np.float64).reshape(-1)
    e_end = np.asarray(e_end, dtype=np.float64).reshape(-1)
    if e_start.shape != (flow.dim,) or e_end.shape != (flow.dim,):
        raise ConfigurationError(f"noise vectors must have {flow.dim} entries")
    t = np.linspace(0.0, 1.0, steps)[:, None]
    e = e_start[None] + t * (e_end - e_start)[None]
    e[-1] = e_end
    # one point per call: BLAS kernels may round a row differently depending on
    # its position in the batch, and equal noise must give equal images
    return Tensor(np.concatenate([decode_noise(ae, flow, row[None]) for row in e]))


def history_rows(history):
    """History as CSV-ready rows grouped by stage."""
    groups = {}
    for h in history:
        groups.setdefault(h["stage"], []).append(
            [h["epoch"], repr(h["recon"]), repr(h["nll"]), repr(h["total"]), repr(h["lr"])])
    return groups


def finite_history(history):
    return all(math.isfinite(h[k]) for h in history for k in ("recon", "nll", "total"))

