"""End-to-end helpers shared by the command line and the experiment scripts."""

import csv
import os

import numpy as np

from glf import checkpoint
from glf.config import RunConfig
from glf.errors import ConfigurationError
from glf.metrics import fid, fit_gaussian, fit_gmm_em, gaussian_sample, gmm_sample, prd
from glf.train import Trainer, decode_latents, decode_noise, encode_dataset, history_rows, load_models, noise

REPORT_SCHEMA = 1
CHECKPOINT_NAME = "checkpoint.glf"
HISTORY_HEADER = ["epoch", "recon", "nll", "total", "lr"]


def make_trainer(cfg, dataset=None):
    dataset = cfg.load_dataset() if dataset is None else dataset
    ae, flow = cfg.build_models(dataset)
    extractor = cfg.feature_extractor(dataset) if cfg.recon_kind == "feature" else None
    return Trainer(ae, flow, dataset, cfg.train_config(), extractor=extractor, config_text=cfg.to_json())


def write_history(trainer, out_dir):
    """One CSV per stage: history.csv, or history_stage1.csv and history_stage2.csv."""
    paths = []
    for stage, rows in history_rows(trainer.history).items():
        name = "history.csv" if stage == "one_stage" else f"history_{stage}.csv"
        path = os.path.join(out_dir, name)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_HEADER)
            writer.writerows(rows)
        paths.append(path)
    return paths


def train_run(cfg, out_dir, resume=None, dataset=None, on_epoch=None):
    """Train (optionally resuming from a checkpoint), saving after every epoch."""
    os.makedirs(out_dir, exist_ok=True)
    trainer = make_trainer(cfg, dataset)
    if resume is not None:
        ckpt = checkpoint.load(resume)
        saved = RunConfig.from_text(ckpt.config_text)
        if saved.replace(epochs=cfg.epochs, flow_epochs=cfg.flow_epochs, out_dir=cfg.out_dir) != cfg:
            raise ConfigurationError("resume: checkpoint was trained with different settings "
                                     "(only epochs, flow_epochs and out_dir may change)")
        trainer.restore(ckpt)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json())
    ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME)

    def after_epoch(t):
        t.save(ckpt_path)
        write_history(t, out_dir)
        if on_epoch is not None:
            on_epoch(t)

    trainer.run(after_epoch)
    trainer.save(ckpt_path)
    write_history(trainer, out_dir)
    return trainer


def load_run(path):
    """Rebuild config, models and dataset from a checkpoint file."""
    ckpt = checkpoint.load(path)
    cfg = RunConfig.from_text(ckpt.config_text)
    dataset = cfg.load_dataset()
    ae, flow = cfg.build_models(dataset)
    load_models(ae, flow, ckpt)
    ae.eval()
    return cfg, ae, flow, dataset


def features(cfg, dataset, samples):
    """Feature embedding used by FID/PRD; raw coordinates for point-cloud data."""
    extractor = cfg.feature_extractor(dataset)
    samples = np.asarray(samples)
    if extractor is None:
        return samples.reshape(len(samples), -1).astype(np.float64)
    return extractor.embed(samples)


def _real_subset(dataset, n):
    if not 2 <= n <= len(dataset):
        raise ConfigurationError(f"n must be in [2, {len(dataset)}], got {n}")
    return dataset.images[:n]


def score(cfg, real_feats, fake_feats, metrics):
    out = {}
    if "fid" in metrics:
        out["fid"] = fid(real_feats, fake_feats)
    if "prd" in metrics:
        result = prd(real_feats, fake_feats, n_clusters=cfg.prd_clusters, n_angles=cfg.prd_angles,
                     num_runs=cfg.prd_runs, seed=cfg.fx_seed)
        out["prd_f8"] = result.f8
        out["prd_f_1_8"] = result.f_1_8
    return out


def _settings(cfg, n, seed, **extra):
    return {"n_real": n, "n_fake": n, "sample_seed": seed, "feature_extractor_seed": cfg.fx_seed,
            "prd_clusters": cfg.prd_clusters, "prd_angles": cfg.prd_angles, "prd_runs": cfg.prd_runs,
            "dataset": cfg.dataset, "images_path": cfg.images_path, "limit": cfg.limit,
            "subset_seed": cfg.subset_seed, **extra}


def evaluate(cfg, ae, flow, dataset, n, seed, metrics=("fid", "prd"), self_check=False):
    """Score ``n`` GLF samples (or, with ``self_check``, the real images themselves)."""
    unknown = set(metrics) - {"fid", "prd"}
    if unknown:
        raise ConfigurationError(f"unknown metric(s): {', '.join(sorted(unknown))}")
    real = features(cfg, dataset, _real_subset(dataset, n))
    if self_check:
        fake = real
    else:
        fake = features(cfg, dataset, decode_noise(ae, flow, noise(n, flow.dim, seed, flow.dtype)))
    report = {"schema": REPORT_SCHEMA, "fid": None, "prd_f8": None, "prd_f_1_8": None}
    report.update(score(cfg, real, fake, metrics))
    report["settings"] = _settings(cfg, n, seed, metrics=list(metrics), self_check=self_check)
    return report


def expost_latents(cfg, ae, dataset, fit, components, n, seed):
    """Fit a Gaussian or a mixture on the training latents and draw ``n`` codes from it."""
    z, _ = encode_dataset(ae, dataset)
    if fit == "normal":
        return gaussian_sample(fit_gaussian(z), n, seed)
    if fit == "gmm":
        return gmm_sample(fit_gmm_em(z, n_components=components, seed=seed), n, seed)
    raise ConfigurationError(f"fit must be 'normal' or 'gmm', got {fit!r}")


def baseline(cfg, ae, flow, dataset, fit, components, n, seed):
    """FIDs of GLF sampling, ex-post density sampling, and plain N(0, I) codes."""
    real = features(cfg, dataset, _real_subset(dataset, n))
    glf_imgs = decode_noise(ae, flow, noise(n, flow.dim, seed, flow.dtype))
    expost_imgs = decode_latents(ae, expost_latents(cfg, ae, dataset, fit, components, n, seed))
    prior_imgs = decode_latents(ae, noise(n, flow.dim, seed, np.float64))
    report = {
        "schema": REPORT_SCHEMA,
        "glf_fid": fid(real, features(cfg, dataset, glf_imgs)),
        "expost_fid": fid(real, features(cfg, dataset, expost_imgs)),
        "prior_fid": fid(real, features(cfg, dataset, prior_imgs)),
        "fit": fit,
    }
    report["settings"] = _settings(cfg, n, seed, fit=fit, components=components if fit == "gmm" else 1)
    return report
