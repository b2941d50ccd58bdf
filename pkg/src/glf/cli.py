"""``glf`` command line: train, sample, interpolate, eval, baseline.

Exit codes: 0 success, 2 configuration/usage error, 3 numeric failure,
4 I/O or checkpoint error.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from glf import pipeline
from glf.config import RunConfig
from glf.data import write_grid
from glf.errors import ConfigurationError, DomainError, FormatError, NumericError, UsageError
from glf.train import decode_noise, interpolate, noise

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _write_images(images, path, columns):
    """Image grids go to PGM/PPM; 2-D point samples go to a CSV of coordinates."""
    images = np.asarray(images)
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    if images.ndim == 4:
        write_grid(images, path, columns)
    else:
        np.savetxt(path, images.reshape(len(images), -1), delimiter=",", fmt="%.9g")


def cmd_train(args):
    cfg = RunConfig.load(args.config)
    changes = {}
    if args.stage is not None:
        changes["stage_mode"] = {"one": "one_stage", "two": "two_stage"}[args.stage]
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    cfg = cfg.replace(**changes) if changes else cfg

    def report(t):
        h = t.history[-1]
        if not args.quiet:
            print(f"{h['stage']} epoch {h['epoch']}: recon {h['recon']:.6g} nll {h['nll']:.6g} "
                  f"total {h['total']:.6g} lr {h['lr']:g}", flush=True)

    pipeline.train_run(cfg, cfg.out_dir, resume=args.resume, on_epoch=report)
    if not args.quiet:
        print(f"checkpoint: {os.path.join(cfg.out_dir, pipeline.CHECKPOINT_NAME)}")
    return EXIT_OK


def cmd_sample(args):
    if args.n < 1:
        raise ConfigurationError("--n must be >= 1")
    _, ae, flow, _ = pipeline.load_run(args.checkpoint)
    images = decode_noise(ae, flow, noise(args.n, flow.dim, args.seed, flow.dtype))
    _write_images(images, args.out, math.ceil(math.sqrt(args.n)))
    return EXIT_OK


def cmd_interpolate(args):
    _, ae, flow, _ = pipeline.load_run(args.checkpoint)
    e = noise(2, flow.dim, args.seed, flow.dtype)
    strip = interpolate(ae, flow, e[0], e[1], args.steps)
    _write_images(strip.data, args.out, args.steps)
    return EXIT_OK


def _override_data(cfg, data):
    if data is None:
        return cfg
    if cfg.dataset != "idx":
        raise ConfigurationError("--data only applies to IDX image runs")
    return cfg.replace(images_path=os.path.abspath(data), labels_path=None)


def cmd_eval(args):
    cfg, ae, flow, dataset = pipeline.load_run(args.checkpoint)
    if args.data is not None:
        cfg = _override_data(cfg, args.data)
        dataset = cfg.load_dataset()
    n = min(cfg.n_eval, len(dataset)) if args.n is None else args.n
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    report = pipeline.evaluate(cfg, ae, flow, dataset, n, args.seed, metrics, args.self_check)
    _write_json(args.out, report)
    return EXIT_OK


def cmd_baseline(args):
    cfg, ae, flow, dataset = pipeline.load_run(args.checkpoint)
    n = min(cfg.n_eval, len(dataset)) if args.n is None else args.n
    components = cfg.gmm_components if args.components is None else args.components
    if components < 1:
        raise ConfigurationError("--components must be >= 1")
    report = pipeline.baseline(cfg, ae, flow, dataset, args.fit, components, n, args.seed)
    _write_json(args.out, report)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="glf", description="Auto-encoder with a latent normalizing flow.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", choices=("one", "two"), help="override stage_mode")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, help="override the epoch budget")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="write a grid of random samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("interpolate", help="decode a straight line between two noise vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("eval", help="FID and PRD of samples against the training data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="IDX image file to compare against (defaults to the run's data)")
    p.add_argument("--n", type=int)
    p.add_argument("--metrics", default="fid,prd")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--self-check", action="store_true", help="score the real images against themselves")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="compare flow sampling with an ex-post latent density fit")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fit", choices=("normal", "gmm"), default="gmm")
    p.add_argument("--components", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, UsageError, DomainError) as exc:
        print(f"glf {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"glf {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"glf {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
