"""Command-line surface.

Exit codes: 0 success, 2 configuration error (including bad usage),
3 data error (unreadable/corrupt inputs), 4 training aborted on a
non-finite loss.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import checkpoint as ckpt
from . import data, nets, prior, quantizer, report, trainer
from .autodiff import Tensor
from .config import ConfigError, config_help, load_config
from .data import DataError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NAN = 4


def _load_inputs(path):
    """A corpus path (IDX file or image directory) or one PGM/PPM image."""
    p = Path(path)
    if p.is_file() and p.suffix.lower() in (".pgm", ".ppm"):
        return data.Dataset(data.load_image(p)[None], source=str(p))
    return data.load_dataset(p)


def _decode_grid(model, indices):
    """Indices (B, H, W) -> decoded pixel means, via codebook lookup."""
    emb = model.codebook.embeddings.data
    z = emb[indices].transpose(0, 3, 1, 2)
    with ad.no_grad():
        out = model.decode(Tensor(np.ascontiguousarray(z)))
    return nets.mean_output(out, model.spec)


def _save_images(stack, out_dir, stem):
    out_dir = Path(out_dir)
    suffix = ".pgm" if stack.shape[1] == 1 else ".ppm"
    paths = []
    for i, img in enumerate(stack):
        p = out_dir / f"{stem}_{i:03d}{suffix}"
        data.save_image(img, p)
        paths.append(p)
    return paths


def cmd_train_vqvae(args):
    cfg = load_config(args.config)
    ds = data.load_dataset(args.data)
    model, _, history = trainer.train_vqvae(
        ds, cfg.model, cfg.train, args.out, resume=args.resume,
        debug=args.debug,
    )
    last = history[-1] if history else {}
    print(json.dumps({
        "checkpoint": str(Path(args.out) / "model.vqvk"),
        "steps": int(last.get("step", 0)),
        "recon_nll": last.get("recon_nll"),
        "perplexity": last.get("perplexity"),
    }, sort_keys=True))
    return EXIT_OK


def cmd_train_prior(args):
    cfg = load_config(args.config)
    model, spec, _, _ = ckpt.load_vqvae(args.vqvae)
    ds = data.load_dataset(args.data)
    grids = trainer.encode_dataset(ds, model)
    # prior geometry follows the model unless the config pins it
    inherit = {}
    for name, value in (("grid_h", spec.grid_h), ("grid_w", spec.grid_w),
                        ("codebook_size", spec.codebook_size)):
        if name not in cfg.explicit["prior"]:
            inherit[name] = value
    pspec = dataclasses.replace(cfg.prior, **inherit)
    _, _, history = trainer.train_prior(
        grids, pspec, cfg.train, args.out, resume=args.resume,
        debug=args.debug,
    )
    last = history[-1] if history else {}
    print(json.dumps({
        "checkpoint": str(Path(args.out) / "prior.vqvk"),
        "steps": int(last.get("step", 0)),
        "prior_nll": last.get("prior_nll"),
    }, sort_keys=True))
    return EXIT_OK


def cmd_reconstruct(args):
    model, spec, _, _ = ckpt.load_vqvae(args.vqvae)
    ds = _load_inputs(args.input)
    n = min(args.n, len(ds))
    originals = ds.images[:n]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with ad.no_grad():
        x = Tensor(originals)
        z_e = model.encode(x)
        z_q, _ = model.quantize(z_e)
        recon = nets.mean_output(model.decode(z_q), spec)
    pairs = np.concatenate([originals, recon], axis=3)  # side by side
    paths = _save_images(pairs, out_dir, "pair")
    report.render_image_rows(out_dir / "recon.png", [originals, recon],
                             labels=["original", "reconstruction"])
    print(json.dumps({"n_images": n, "first": str(paths[0])}, sort_keys=True))
    return EXIT_OK


def cmd_sample(args):
    model, spec, _, _ = ckpt.load_vqvae(args.vqvae)
    net, pspec, _, _ = ckpt.load_prior(args.prior)
    if pspec.codebook_size != spec.codebook_size or \
            (pspec.grid_h, pspec.grid_w) != (spec.grid_h, spec.grid_w):
        raise trainer.TrainerError(
            f"prior was fit on {pspec.grid_h}x{pspec.grid_w} grids over "
            f"{pspec.codebook_size} codes; model produces "
            f"{spec.grid_h}x{spec.grid_w} over {spec.codebook_size}"
        )
    rng = np.random.default_rng(args.seed)
    grid = prior.sample_prior(net, rng, args.n)
    images = _decode_grid(model, grid.indices)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = _save_images(images, out_dir, "sample")
    report.render_image_rows(out_dir / "samples.png", [images],
                             labels=["samples"])
    print(json.dumps({"n_images": args.n, "first": str(paths[0])},
                     sort_keys=True))
    return EXIT_OK


def cmd_eval(args):
    model, _, _, _ = ckpt.load_vqvae(args.vqvae)
    pnet = ckpt.load_prior(args.prior)[0] if args.prior else None
    ds = data.load_dataset(args.data)
    rep = trainer.evaluate(ds, model, pnet)
    print(json.dumps(
        {k: rep[k] for k in ("recon_mse", "bits_per_dim", "perplexity",
                             "n_images")},
        sort_keys=True,
    ))
    return EXIT_OK


def cmd_codebook_stats(args):
    model, _, _, _ = ckpt.load_vqvae(args.vqvae)
    ds = data.load_dataset(args.data)
    grids = trainer.encode_dataset(ds, model)
    counts, perp = quantizer.codebook_stats(grids, model.codebook.size)
    print(json.dumps({
        "counts": counts.tolist(),
        "perplexity": perp,
        "code_usage": float((counts > 0).mean()),
    }, sort_keys=True))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vqkit",
        description="Discrete-latent autoencoder toolkit: train, sample, "
                    "reconstruct and evaluate.",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-vqvae", help="train the autoencoder")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--debug", action="store_true",
                   help="per-op finite checks + gradient routing assertion")
    p.set_defaults(func=cmd_train_vqvae)

    p = sub.add_parser("train-prior", help="fit the latent prior")
    p.add_argument("--vqvae", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--debug", action="store_true")
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("reconstruct", help="round-trip images through the model")
    p.add_argument("--vqvae", required=True)
    p.add_argument("--in", dest="input", required=True,
                   help="IDX file, image directory, or single PGM/PPM")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sample", help="draw images from the trained prior")
    p.add_argument("--vqvae", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="print evaluation metrics as JSON")
    p.add_argument("--vqvae", required=True)
    p.add_argument("--prior", default=None)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("codebook-stats", help="code usage histogram + perplexity")
    p.add_argument("--vqvae", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_codebook_stats)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except trainer.TrainAbort as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NAN
    except (DataError, ckpt.CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
