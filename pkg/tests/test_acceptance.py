"""The twelve acceptance criteria, one test each.

Every test records a one-line PASS/FAIL verdict; the lines are printed in
the terminal summary (and immediately with ``-s``).  Criteria 7 and 8 train
the full-size convolutional auto-encoder on the bundled 5000-image MNIST
subset and take most of the runtime.
"""

import math
import os
import time

import numpy as np
import pytest
from conftest import flow_map, force_identity_mixing, numerical_jacobian, perturb_flow

from glf import checkpoint
from glf.autoenc import AeConfig, AutoEncoder
from glf.config import RunConfig
from glf.core import (
    Tensor, batchnorm, concat, conv2d, conv_transpose2d, exp, grad_check, log, matmul, mul, numerical_grad,
    reduce_mean, reduce_sum, relu, reshape, scale, split, square, sub, tanh,
)
from glf.data import ring_centers
from glf.flow import FlowModel, flow_nll, w_logdet
from glf.metrics import fid, fit_gmm_em, matrix_sqrt_psd, prd
from glf.metrics.prd import curve_from_histograms, slopes
from glf.pipeline import baseline, make_trainer
from glf.train import glf_loss, sample

MNIST = os.path.join(os.path.dirname(__file__), "data", "mnist5k-images-idx3-ubyte.gz")
RESULTS = {}


def record(number, ok, detail, started):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} ({time.perf_counter() - started:.1f} s) {detail}"
    RESULTS[number] = line
    print(line)
    return ok


# -- 1 ------------------------------------------------------------------------------

def test_01_flow_bijectivity():
    t0 = time.perf_counter()
    errors = {}
    for dtype, bound in ((np.float32, 1e-5), (np.float64, 1e-10)):
        flow = perturb_flow(FlowModel(20, n_blocks=4, hidden=32, seed=0, dtype=dtype), scale=0.05, seed=1)
        z = np.random.default_rng(2).standard_normal((1000, 20)).astype(dtype)
        e, _ = flow(Tensor(z))
        back = flow.inverse(e)
        errors[np.dtype(dtype).name] = (float(np.abs(back.data - z).max()), bound)
    ok = all(err < bound for err, bound in errors.values())
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k} max err {v[0]:.2e} (< {v[1]:g})" for k, v in errors.items())
    assert record(1, ok and elapsed < 10, detail, t0)


# -- 2 ------------------------------------------------------------------------------

def test_02_logdet_matches_numerical_jacobian():
    t0 = time.perf_counter()
    worst = 0.0
    for dim in (2, 4, 8):
        for seed in range(10):
            flow = perturb_flow(FlowModel(dim, n_blocks=4, hidden=32, seed=seed, dtype=np.float64),
                                scale=0.3, seed=100 + seed)
            z = np.random.default_rng(seed).standard_normal(dim)
            _, logdet = flow(Tensor(z[None]))
            _, expected = np.linalg.slogdet(numerical_jacobian(flow_map(flow), z))
            worst = max(worst, abs(logdet.data[0] - expected) / max(abs(expected), 1e-12))
    ok = worst < 1e-3 and time.perf_counter() - t0 < 30
    assert record(2, ok, f"worst relative error {worst:.2e} over D in (2, 4, 8) x 10 seeds", t0)


# -- 3 ------------------------------------------------------------------------------

def _rand(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape)


def _weighted(out, seed):
    return reduce_sum(mul(out, Tensor(_rand(out.shape, seed))))


def gradient_cases():
    """(name, function of one tensor, point) for every differentiable operation."""
    c = _rand((3, 5), 1)
    k, kt = _rand((3, 2, 4, 4), 2), _rand((2, 3, 4, 4), 3)
    cases = [
        ("add", lambda t: _weighted(t + Tensor(c), 9), _rand((3, 5), 4)),
        ("sub", lambda t: _weighted(sub(Tensor(c), t), 9), _rand((3, 5), 4)),
        ("mul", lambda t: _weighted(mul(t, Tensor(c)), 9), _rand((3, 5), 4)),
        ("neg", lambda t: _weighted(-t, 9), _rand((3, 5), 4)),
        ("exp", lambda t: _weighted(exp(t), 9), _rand((3, 5), 4)),
        ("log", lambda t: _weighted(log(t), 9), np.abs(_rand((3, 5), 4)) + 0.5),
        ("tanh", lambda t: _weighted(tanh(t), 9), _rand((3, 5), 4)),
        ("relu", lambda t: _weighted(relu(t), 9), _rand((3, 5), 4)),
        ("scale", lambda t: _weighted(scale(t, -1.7), 9), _rand((3, 5), 4)),
        ("square", lambda t: _weighted(square(t), 9), _rand((3, 5), 4)),
        ("matmul", lambda t: _weighted(matmul(t, Tensor(c.T)), 9), _rand((4, 5), 5)),
        ("conv2d", lambda t: _weighted(conv2d(t, Tensor(k)), 9), _rand((1, 2, 6, 6), 6)),
        ("conv2d kernel", lambda t: _weighted(conv2d(Tensor(_rand((1, 2, 6, 6), 6)), t), 9), k),
        ("conv_transpose2d", lambda t: _weighted(conv_transpose2d(t, Tensor(kt)), 9), _rand((1, 2, 3, 3), 7)),
        ("batchnorm", lambda t: _weighted(square(batchnorm(t, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                                                            np.zeros(2), np.ones(2), True)), 9),
         _rand((6, 2, 2, 2), 8)),
        ("reduce_sum", lambda t: _weighted(reduce_sum(t, axes=1), 9), _rand((3, 5), 4)),
        ("reduce_mean", lambda t: reduce_mean(square(t)), _rand((3, 5), 4)),
        ("split/concat", lambda t: _weighted(concat(*reversed(split(t, 2, axis=1)), axis=1), 9), _rand((3, 5), 4)),
        ("reshape", lambda t: _weighted(reshape(t, (5, 3)), 9), _rand((3, 5), 4)),
        ("w_logdet", lambda t: w_logdet(t), _rand((4, 4), 10) + 3 * np.eye(4)),
    ]
    flow = perturb_flow(FlowModel(4, n_blocks=2, hidden=8, seed=0, dtype=np.float64), seed=11)
    cases.append(("flow nll", lambda t: flow_nll(flow, t), _rand((5, 4), 12)))

    ae = AutoEncoder(AeConfig((2,), 4, arch="mlp", mlp_width=16, mlp_depth=2), seed=0, dtype=np.float64)
    glf_flow = perturb_flow(FlowModel(4, n_blocks=2, hidden=8, seed=1, dtype=np.float64), seed=13)
    x = np.random.default_rng(14).uniform(-1, 1, (6, 2))
    for label, param in (("encoder", ae.encoder.layers[0].weight), ("decoder", ae.decoder.layers[-2].weight),
                         ("flow", glf_flow.blocks[0].layer_a.net[0].weight)):
        cases.append((f"glf loss wrt {label}", _param_loss(ae, glf_flow, x, param), param))
    return cases


def _param_loss(ae, flow, x, param):
    def f(w):
        param.data[...] = w.data if isinstance(w, Tensor) else w
        ae.zero_grad()
        flow.zero_grad()
        return glf_loss(ae, flow, x, 1.0)[0]
    return f


def _param_check(loss, param):
    """Backprop gradient of a model parameter against central differences."""
    w0 = param.data.copy()
    loss(w0).backward()
    analytic = param.grad.copy()
    numeric = numerical_grad(loss, w0)
    param.data[...] = w0
    return float((np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)).max())


def test_03_gradient_suite():
    t0 = time.perf_counter()
    errors = {}
    for name, fn, x0 in gradient_cases():
        errors[name] = _param_check(fn, x0) if name.startswith("glf loss") else grad_check(fn, x0)
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and time.perf_counter() - t0 < 60
    assert record(3, ok, f"{len(errors)} gradient checks, worst {worst!r} at {errors[worst]:.2e}", t0)


# -- 4 ------------------------------------------------------------------------------

def test_04_gaussian_nll_analytic():
    t0 = time.perf_counter()
    gaps = {}
    for dim in (2, 20):
        flow = force_identity_mixing(FlowModel(dim, seed=dim, dtype=np.float64))
        e = np.random.default_rng(dim).standard_normal((10_000, dim))
        expected = dim / 2 * (1 + math.log(2 * math.pi))
        gaps[dim] = abs(flow_nll(flow, Tensor(e)).item() - expected) / expected
    ok = max(gaps.values()) < 0.02 and time.perf_counter() - t0 < 5
    assert record(4, ok, ", ".join(f"D={d} rel gap {g:.2%}" for d, g in gaps.items()), t0)


# -- 5 ------------------------------------------------------------------------------

def _encoder_grads(ae, flow, x, beta, recon_only=False):
    ae.zero_grad()
    flow.zero_grad()
    total, recon, _ = glf_loss(ae, flow, x, beta)
    (recon if recon_only else total).backward()
    return [p.grad.copy() for _, p in ae.encoder.named_parameters()]


def test_05_beta_gating():
    t0 = time.perf_counter()
    ae = AutoEncoder(AeConfig((2,), 4, arch="mlp", mlp_width=32, mlp_depth=2), seed=0, dtype=np.float64)
    flow = perturb_flow(FlowModel(4, seed=0, dtype=np.float64), seed=1)
    x = np.random.default_rng(0).uniform(-1, 1, (16, 2))
    alone = _encoder_grads(ae, flow, x, 0.0, recon_only=True)
    gated = _encoder_grads(ae, flow, x, 0.0)
    joint = _encoder_grads(ae, flow, x, 1.0)
    exact = all(np.array_equal(a, b) for a, b in zip(alone, gated))
    diff = max(float(np.abs(a - b).max()) for a, b in zip(alone, joint))
    ok = exact and diff > 1e-8 and time.perf_counter() - t0 < 5
    assert record(5, ok, f"beta=0 bit-exact: {exact}; beta=1 max encoder grad change {diff:.2e}", t0)


# -- 6 ------------------------------------------------------------------------------

RING = {"nz": 2, "dataset": "ring_of_gaussians", "arch": "mlp", "n_modes": 8, "noise_sigma": 0.05,
        "n_samples": 2000, "epochs": 30, "batch_size": 64, "seed": 0}


def mode_coverage(points, n_modes, sigma, radius=2.0):
    d = np.linalg.norm(points[:, None, :] - ring_centers(n_modes, radius)[None], axis=2)
    return (d < 3 * sigma).mean(axis=0)


def test_06_ring_one_stage():
    t0 = time.perf_counter()
    cfg = RunConfig.from_dict(RING)
    trainer = make_trainer(cfg)
    history = trainer.run()
    pts = sample(trainer.ae, trainer.flow, 2000, seed=1).data * trainer.dataset.scale
    frac = mode_coverage(pts, cfg.n_modes, cfg.noise_sigma)
    covered = int((frac >= 0.02).sum())
    nll_first, nll_last = history[0]["nll"], history[-1]["nll"]
    ok = covered >= 7 and nll_last < nll_first and time.perf_counter() - t0 < 120
    detail = (f"{covered}/8 modes covered (fractions {np.round(frac, 3).tolist()}); "
              f"nll epoch 1 {nll_first:.3f} -> epoch 30 {nll_last:.3f}; "
              f"recon epoch 30 {history[-1]['recon']:.4f} vs data variance {trainer.images.var(0).sum():.4f}")
    assert record(6, ok, detail, t0)


# -- 7 and 8 ----------------------------------------------------------------------------

MNIST_RUN = {"nz": 20, "images_path": MNIST, "epochs": 20, "batch_size": 128, "recon_kind": "mse",
             "seed": 0, "n_eval": 5000}


@pytest.fixture(scope="module")
def mnist_one_stage():
    t0 = time.perf_counter()
    cfg = RunConfig.from_dict(MNIST_RUN)
    trainer = make_trainer(cfg)
    trainer.run()
    report = baseline(cfg, trainer.ae, trainer.flow, trainer.dataset, "normal", 1, 5000, seed=1)
    gmm = baseline(cfg, trainer.ae, trainer.flow, trainer.dataset, "gmm", 10, 5000, seed=1)
    return report, gmm["expost_fid"], time.perf_counter() - t0


@pytest.mark.slow
def test_07_flow_beats_expost_fits(mnist_one_stage):
    t0 = time.perf_counter()
    report, gmm_fid, elapsed = mnist_one_stage
    glf_fid, gauss_fid, prior_fid = report["glf_fid"], report["expost_fid"], report["prior_fid"]
    ok = glf_fid < gauss_fid and prior_fid > glf_fid
    detail = (f"FID GLF {glf_fid:.2f} < Gaussian fit {gauss_fid:.2f}; N(0,I) without flow {prior_fid:.2f}; "
              f"GMM-10 fit {gmm_fid:.2f}; one-stage run {elapsed:.0f} s")
    assert record(7, ok, detail, t0 - elapsed)


@pytest.mark.slow
def test_08_two_stage_parity(mnist_one_stage):
    t0 = time.perf_counter()
    one_fid = mnist_one_stage[0]["glf_fid"]
    cfg = RunConfig.from_dict({**MNIST_RUN, "stage_mode": "two_stage"})
    trainer = make_trainer(cfg)
    trainer.run()
    two_fid = baseline(cfg, trainer.ae, trainer.flow, trainer.dataset, "normal", 1, 5000, seed=1)["glf_fid"]
    gap = abs(two_fid - one_fid) / one_fid
    total = time.perf_counter() - t0 + mnist_one_stage[2]
    ok = gap <= 0.25
    detail = (f"two-stage FID {two_fid:.2f} vs one-stage {one_fid:.2f} (gap {gap:.1%}); "
              f"criteria 7+8 total {total:.0f} s")
    assert record(8, ok and total < 1200, detail, t0)


# -- 9 ------------------------------------------------------------------------------

def test_09_fid_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((400, 6)), rng.standard_normal((300, 6)) * 1.5 + 0.3
    self_fid = fid(x, x)
    asym = abs(fid(x, y) - fid(y, x))
    a, b = np.array([[0.0], [2.0]]), np.array([[1.0], [3.0]])  # equal variances, means 1 apart
    one_d = abs(fid(a, b) - 1.0)
    m = rng.standard_normal((6, 6))
    spd = m @ m.T + 0.1 * np.eye(6)
    root = matrix_sqrt_psd(spd)
    recon = np.linalg.norm(root @ root - spd) / np.linalg.norm(spd)
    ok = self_fid < 1e-6 and asym < 1e-6 and one_d < 1e-10 and recon < 1e-6 and time.perf_counter() - t0 < 5
    detail = f"fid(X,X)={self_fid:.1e}, asymmetry {asym:.1e}, 1-d case error {one_d:.1e}, sqrt error {recon:.1e}"
    assert record(9, ok, detail, t0)


# -- 10 -----------------------------------------------------------------------------

def test_10_em_monotone_and_recovery():
    t0 = time.perf_counter()
    monotone = True
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = np.concatenate([rng.standard_normal((100, 3)) + c for c in rng.normal(0, 3, (4, 3))])
        ll = np.asarray(fit_gmm_em(x, n_components=4, seed=seed).log_likelihoods)
        monotone &= bool(np.all(np.diff(ll) >= -1e-9 * np.abs(ll[1:])))
    truth = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
    rng = np.random.default_rng(42)
    x = np.concatenate([rng.standard_normal((500, 2)) * 0.5 + c for c in truth])
    model = fit_gmm_em(x, n_components=3, seed=0)
    err = max(np.linalg.norm(model.means - c, axis=1).min() for c in truth)
    ok = monotone and err < 0.1 and time.perf_counter() - t0 < 30
    assert record(10, ok, f"monotone over 10 seeds: {monotone}; worst mean error {err:.3f}", t0)


# -- 11 -----------------------------------------------------------------------------

def test_11_prd_sanity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((500, 8))
    same = prd(x, x)
    apart = prd(x, rng.standard_normal((500, 8)) + 100)
    p, q = np.array([0.2, 0.3, 0.5, 0.0]), np.array([0.4, 0.0, 0.3, 0.3])
    precision, recall = curve_from_histograms(p, q, 1001)
    lam = slopes(1001)
    direct_p = np.array([sum(min(l * a, b) for a, b in zip(p, q)) for l in lam])
    direct_r = np.array([sum(min(a, b / l) for a, b in zip(p, q)) for l in lam])
    hand = max(np.abs(precision - direct_p).max(), np.abs(recall - direct_r).max())
    ok = (min(same.f8, same.f_1_8) >= 0.98 and max(apart.f8, apart.f_1_8) <= 0.05 and hand < 1e-9
          and time.perf_counter() - t0 < 10)
    detail = (f"identical F8/F1/8 {same.f8:.3f}/{same.f_1_8:.3f}; disjoint {apart.f8:.3f}/{apart.f_1_8:.3f}; "
              f"hand case error {hand:.1e}")
    assert record(11, ok, detail, t0)


# -- 12 -----------------------------------------------------------------------------

def test_12_determinism_and_persistence(tmp_path):
    t0 = time.perf_counter()
    cfg = RunConfig.from_dict({**RING, "epochs": 4, "n_samples": 512})

    def run(epochs_first, path):
        trainer = make_trainer(cfg.replace(epochs=epochs_first))
        trainer.run()
        if epochs_first < cfg.epochs:
            trainer.save(path)
            trainer = make_trainer(cfg)
            trainer.restore(checkpoint.load(path))
            trainer.run()
        trainer.save(path)
        return path.read_bytes()

    first = run(4, tmp_path / "a.glf")
    second = run(4, tmp_path / "b.glf")
    resumed = run(2, tmp_path / "c.glf")
    checkpoint.save(tmp_path / "d.glf", checkpoint.load(tmp_path / "a.glf"))
    roundtrip = (tmp_path / "d.glf").read_bytes()
    same_seed, resume, rt = first == second, first == resumed, first == roundtrip
    ok = same_seed and resume and rt and time.perf_counter() - t0 < 120
    detail = f"same seed identical: {same_seed}; 4 vs 2+resume 2 identical: {resume}; roundtrip identical: {rt}"
    assert record(12, ok, detail, t0)
