"""Training loops: Adam, loss assembly with correct gradient routing, EMA
scheduling, per-step metrics, and checkpoint cadence.

Runs are reproducible by construction: data order at any step is a pure
function of (seed, step), so resuming from a checkpoint replays the exact
stream an uninterrupted run would have produced (wall_ms aside).
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import nets, prior, quantizer
from .autodiff import DTYPE, Tensor

ABORT_NAME = "abort.vqvk"


class TrainerError(ValueError):
    """Bad training configuration or incompatible resume state."""


class TrainAbort(RuntimeError):
    """Loss went non-finite; a diagnostic checkpoint was written first."""

    def __init__(self, step, message):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 64
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_interval: int = 0
    checkpoint_interval: int = 0
    # None inherits the model spec's setting; True/False overrides it and
    # switches the loss between the full three-term form and the EMA variant.
    ema: bool | None = None

    def validate(self):
        if self.steps < 0:
            raise TrainerError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise TrainerError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise TrainerError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise TrainerError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise TrainerError("Adam eps must be positive")
        if self.eval_interval < 0 or self.checkpoint_interval < 0:
            raise TrainerError("intervals must be >= 0 (0 disables)")
        if self.seed < 0:
            raise TrainerError("seed must be >= 0")


class Adam:
    """Bias-corrected Adam over named parameters, float32 state throughout."""

    def __init__(self, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        names = [name for name, _ in self.params]
        if len(set(names)) != len(names):
            raise TrainerError("duplicate parameter names in optimizer")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        """Apply one in-place update; parameters with no gradient are skipped."""
        self.t += 1
        b1, b2 = DTYPE(self.beta1), DTYPE(self.beta2)
        c1 = DTYPE(1.0 - self.beta1 ** self.t)
        c2 = DTYPE(1.0 - self.beta2 ** self.t)
        lr, eps = DTYPE(self.lr), DTYPE(self.eps)
        one = DTYPE(1)
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (one - b1) * g
            v *= b2
            v += (one - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def state_arrays(self):
        """Moment arrays in a stable order, for checkpointing."""
        out = []
        for name, _ in self.params:
            out.append((f"opt.m.{name}", self.m[name]))
            out.append((f"opt.v.{name}", self.v[name]))
        return out

    def load_state(self, t, arrays):
        self.t = int(t)
        for name, p in self.params:
            for prefix, store in (("opt.m.", self.m), ("opt.v.", self.v)):
                key = prefix + name
                if key not in arrays:
                    raise ckpt.CheckpointError(f"missing optimizer tensor {key!r}")
                if arrays[key].shape != p.data.shape:
                    raise ckpt.CheckpointError(
                        f"optimizer tensor {key!r} has shape "
                        f"{arrays[key].shape}, expected {p.data.shape}"
                    )
                store[name][...] = arrays[key]


def epoch_permutation(seed, epoch, n):
    """Shuffle for one epoch as a pure function of (seed, epoch)."""
    ss = np.random.SeedSequence([int(seed), int(epoch)])
    return np.random.Generator(np.random.PCG64(ss)).permutation(n)


def batch_indices(seed, step, batch_size, n):
    """Image indices for a 1-based global step; trailing partial batches
    are dropped so every step sees a full batch."""
    per_epoch = n // batch_size
    if per_epoch < 1:
        raise TrainerError(
            f"dataset of {n} images cannot fill a batch of {batch_size}")
    i = step - 1
    perm = epoch_permutation(seed, i // per_epoch, n)
    k = i % per_epoch
    return perm[k * batch_size:(k + 1) * batch_size]


def assert_gradient_routing(model, x_batch, spec):
    """One-shot debug check that each loss term only reaches its own
    parameter group: reconstruction never touches the codebook, the
    dictionary term never touches encoder or decoder, and the commitment
    term never touches decoder or codebook."""
    x = Tensor(np.asarray(x_batch, dtype=DTYPE))
    z_e = model.encode(x)
    z_q, grid = model.quantize(z_e)
    dist = model.decode(z_q)
    recon = nets.reconstruction_nll(dist, x, spec)
    cb_loss, commit = quantizer.vq_loss_terms(z_e, grid, model.codebook)
    groups = {
        "encoder": list(model.encoder.named_parameters("encoder")),
        "decoder": list(model.decoder.named_parameters("decoder")),
        "codebook": [("codebook.embeddings", model.codebook.embeddings)],
    }

    def clear():
        for ps in groups.values():
            for _, p in ps:
                p.grad = None

    def leaks(group):
        return any(p.grad is not None and p.grad.any() for _, p in groups[group])

    for term, label, frozen in (
        (recon, "reconstruction", ("codebook",)),
        (cb_loss, "dictionary", ("encoder", "decoder")),
        (commit, "commitment", ("decoder", "codebook")),
    ):
        clear()
        ad.backward(term)
        for group in frozen:
            if leaks(group):
                raise ad.GradientError(
                    f"{label} term leaked gradient into {group} parameters")
    clear()


def _resolve_spec(dataset, spec, cfg):
    if cfg.ema is not None and cfg.ema != spec.ema:
        spec = dataclasses.replace(spec, ema=cfg.ema)
    c, h, w = dataset.shape
    if spec.in_channels is None:
        spec = dataclasses.replace(spec, in_channels=c, in_h=h, in_w=w)
    elif (spec.in_channels, spec.in_h, spec.in_w) != (c, h, w):
        raise TrainerError(
            f"dataset images are {c}x{h}x{w} but the model spec expects "
            f"{spec.in_channels}x{spec.in_h}x{spec.in_w}"
        )
    spec.validate()
    return spec


def _trim_metrics(path, start_step):
    """Drop metric lines past the resume point so the stream stays
    append-only and consistent."""
    if not path.exists():
        return []
    kept = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["step"] <= start_step:
            kept.append(rec)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in kept))
    return kept


def _check_resume_extra(header, cfg):
    extra = header.get("extra", {})
    for key, want in (("seed", cfg.seed), ("batch_size", cfg.batch_size)):
        if key in extra and int(extra[key]) != int(want):
            raise TrainerError(
                f"checkpoint was trained with {key}={extra[key]}, "
                f"config says {want}; refusing to resume"
            )
    return int(header.get("step", 0))


def train_vqvae(dataset, spec, cfg, out_dir, resume=None, debug=False,
                render=True):
    """Train a VQ-VAE; returns (model, optimizer, history).

    Writes metrics.jsonl, periodic + final model.vqvk checkpoints, optional
    eval.jsonl, and report figures into out_dir.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = _resolve_spec(dataset, spec, cfg)
    extra = {"seed": int(cfg.seed), "batch_size": int(cfg.batch_size)}
    rng = np.random.default_rng(cfg.seed)

    if resume is not None:
        model, ck_spec, header, arrays = ckpt.load_vqvae(resume)
        if dataclasses.asdict(ck_spec) != dataclasses.asdict(spec):
            raise TrainerError(
                "checkpoint model spec does not match the configured spec")
        spec = ck_spec
        opt = Adam(model.trainable_parameters(spec.ema), lr=cfg.lr,
                   beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        if "opt" not in header:
            raise ckpt.CheckpointError(
                f"{resume}: no optimizer state, cannot resume training")
        opt.load_state(header["opt"]["t"], arrays)
        start = _check_resume_extra(header, cfg)
        if "rng" in header:
            rng.bit_generator.state = header["rng"]
    else:
        model = nets.VqVae.build(spec, rng)
        opt = Adam(model.trainable_parameters(spec.ema), lr=cfg.lr,
                   beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        start = 0

    n = len(dataset)
    batch_indices(cfg.seed, 1, cfg.batch_size, n)  # validates dataset size
    metrics_path = out_dir / "metrics.jsonl"
    eval_path = out_dir / "eval.jsonl"
    if resume is None:
        metrics_path.write_text("")
        eval_path.unlink(missing_ok=True)
        history = []
    else:
        history = _trim_metrics(metrics_path, start)

    eval_iv = min(cfg.eval_interval, cfg.steps) if cfg.eval_interval else 0
    ck_iv = min(cfg.checkpoint_interval, cfg.steps) if cfg.checkpoint_interval else 0
    ck_path = out_dir / "model.vqvk"

    if debug:
        ad.set_debug(True)
    try:
        if debug and start < cfg.steps:
            probe = dataset.images[batch_indices(cfg.seed, start + 1,
                                                 cfg.batch_size, n)][:2]
            assert_gradient_routing(model, probe, spec)
        with open(metrics_path, "a") as mf:
            for stepno in range(start + 1, cfg.steps + 1):
                t0 = time.perf_counter()
                idx = batch_indices(cfg.seed, stepno, cfg.batch_size, n)
                x = Tensor(dataset.images[idx])
                z_e = model.encode(x)
                # catch encoder blow-ups here, before quantize rejects the
                # non-finite input with an unrelated error
                if not np.isfinite(z_e.data).all():
                    ckpt.save_vqvae(out_dir / ABORT_NAME, model, spec,
                                    step=stepno - 1, optimizer=opt, rng=rng,
                                    extra=extra)
                    raise TrainAbort(
                        stepno, f"non-finite encoder output at step {stepno}")
                z_q, grid = model.quantize(z_e)
                dist = model.decode(z_q)
                recon = nets.reconstruction_nll(dist, x, spec)
                cb_loss, commit = quantizer.vq_loss_terms(z_e, grid,
                                                          model.codebook)
                loss = quantizer.total_loss(recon, cb_loss, commit,
                                            spec.beta, spec.ema)
                vals = (recon.item(), cb_loss.item(), commit.item())
                if not all(math.isfinite(v) for v in vals):
                    ckpt.save_vqvae(out_dir / ABORT_NAME, model, spec,
                                    step=stepno - 1, optimizer=opt, rng=rng,
                                    extra=extra)
                    raise TrainAbort(
                        stepno,
                        f"non-finite loss at step {stepno}: recon={vals[0]}, "
                        f"codebook={vals[1]}, commit={vals[2]}",
                    )
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
                if spec.ema:
                    quantizer.ema_update(model.codebook, z_e.data, grid)
                _, perp = quantizer.codebook_stats(grid, model.codebook.size)
                rec = {
                    "step": stepno,
                    "recon_nll": vals[0],
                    "codebook_loss": vals[1],
                    "commit_loss": vals[2],
                    "perplexity": perp,
                    "wall_ms": int(round((time.perf_counter() - t0) * 1000)),
                }
                mf.write(json.dumps(rec, sort_keys=True) + "\n")
                mf.flush()
                history.append(rec)
                if ck_iv and stepno % ck_iv == 0 and stepno < cfg.steps:
                    ckpt.save_vqvae(ck_path, model, spec, step=stepno,
                                    optimizer=opt, rng=rng, extra=extra)
                if eval_iv and stepno % eval_iv == 0:
                    rep = evaluate(dataset, model)
                    with open(eval_path, "a") as ef:
                        ef.write(json.dumps({"step": stepno, **rep},
                                            sort_keys=True) + "\n")
    finally:
        if debug:
            ad.set_debug(False)

    ckpt.save_vqvae(ck_path, model, spec, step=cfg.steps, optimizer=opt,
                    rng=rng, extra=extra)
    if render:
        from . import report
        report.render_vqvae_report(out_dir, history, model, spec, dataset)
    return model, opt, history


def train_prior(grids, pspec, cfg, out_dir, resume=None, debug=False,
                render=True):
    """Fit the autoregressive prior on encoded index grids; returns
    (net, optimizer, history)."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pspec.validate()
    grids = np.asarray(grids)
    if grids.ndim != 3:
        raise TrainerError(f"encoded dataset must be (B, H, W), got {grids.shape}")
    if grids.shape[1:] != (pspec.grid_h, pspec.grid_w):
        raise TrainerError(
            f"grids are {grids.shape[1]}x{grids.shape[2]} but the prior "
            f"expects {pspec.grid_h}x{pspec.grid_w}"
        )
    if grids.size and (grids.min() < 0 or grids.max() >= pspec.codebook_size):
        raise TrainerError("grid index out of range for the prior codebook")
    extra = {"seed": int(cfg.seed), "batch_size": int(cfg.batch_size)}
    rng = np.random.default_rng(cfg.seed)

    if resume is not None:
        net, ck_spec, header, arrays = ckpt.load_prior(resume)
        if dataclasses.asdict(ck_spec) != dataclasses.asdict(pspec):
            raise TrainerError(
                "checkpoint prior spec does not match the configured spec")
        pspec = ck_spec
        opt = Adam(net.named_parameters(), lr=cfg.lr, beta1=cfg.beta1,
                   beta2=cfg.beta2, eps=cfg.eps)
        if "opt" not in header:
            raise ckpt.CheckpointError(
                f"{resume}: no optimizer state, cannot resume training")
        opt.load_state(header["opt"]["t"], arrays)
        start = _check_resume_extra(header, cfg)
        if "rng" in header:
            rng.bit_generator.state = header["rng"]
    else:
        net = prior.PriorNet(pspec, rng)
        opt = Adam(net.named_parameters(), lr=cfg.lr, beta1=cfg.beta1,
                   beta2=cfg.beta2, eps=cfg.eps)
        start = 0

    n = grids.shape[0]
    batch_indices(cfg.seed, 1, cfg.batch_size, n)
    metrics_path = out_dir / "metrics.jsonl"
    if resume is None:
        metrics_path.write_text("")
        history = []
    else:
        history = _trim_metrics(metrics_path, start)

    ck_iv = min(cfg.checkpoint_interval, cfg.steps) if cfg.checkpoint_interval else 0
    ck_path = out_dir / "prior.vqvk"

    if debug:
        ad.set_debug(True)
    try:
        with open(metrics_path, "a") as mf:
            for stepno in range(start + 1, cfg.steps + 1):
                t0 = time.perf_counter()
                idx = batch_indices(cfg.seed, stepno, cfg.batch_size, n)
                nll = prior.prior_nll(grids[idx], net)
                val = nll.item()
                if not math.isfinite(val):
                    ckpt.save_prior(out_dir / ABORT_NAME, net, pspec,
                                    step=stepno - 1, optimizer=opt, rng=rng,
                                    extra=extra)
                    raise TrainAbort(
                        stepno, f"non-finite prior loss at step {stepno}: {val}")
                opt.zero_grad()
                ad.backward(nll)
                opt.step()
                rec = {
                    "step": stepno,
                    "prior_nll": val,
                    "wall_ms": int(round((time.perf_counter() - t0) * 1000)),
                }
                mf.write(json.dumps(rec, sort_keys=True) + "\n")
                mf.flush()
                history.append(rec)
                if ck_iv and stepno % ck_iv == 0 and stepno < cfg.steps:
                    ckpt.save_prior(ck_path, net, pspec, step=stepno,
                                    optimizer=opt, rng=rng, extra=extra)
    finally:
        if debug:
            ad.set_debug(False)

    ckpt.save_prior(ck_path, net, pspec, step=cfg.steps, optimizer=opt,
                    rng=rng, extra=extra)
    if render:
        from . import report
        report.render_prior_report(out_dir, history, pspec)
    return net, opt, history


def encode_dataset(dataset, model, batch_size=256):
    """Index grids for every image, (B, grid_h, grid_w) int32."""
    spec = model.spec
    out = np.empty((len(dataset), spec.grid_h, spec.grid_w), dtype=np.int32)
    with ad.no_grad():
        for lo in range(0, len(dataset), batch_size):
            chunk = dataset.images[lo:lo + batch_size]
            z_e = model.encode(Tensor(chunk))
            _, grid = model.quantize(z_e)
            out[lo:lo + len(chunk)] = grid.indices
    return out


def evaluate(dataset, model, prior_net=None, batch_size=256):
    """Aggregate reconstruction MSE, bits/dim bound, perplexity and code
    usage over a dataset. Without a prior the bound charges ln K per latent."""
    n = len(dataset)
    if n == 0:
        raise TrainerError("cannot evaluate an empty dataset")
    spec = model.spec
    pixels = spec.in_channels * spec.in_h * spec.in_w
    counts = np.zeros(model.codebook.size, dtype=np.int64)
    sse = 0.0
    recon_total = 0.0
    prior_total = 0.0
    with ad.no_grad():
        for lo in range(0, n, batch_size):
            xb = dataset.images[lo:lo + batch_size]
            b = xb.shape[0]
            x = Tensor(xb)
            z_e = model.encode(x)
            z_q, grid = model.quantize(z_e)
            dist = model.decode(z_q)
            counts += np.bincount(grid.indices.reshape(-1),
                                  minlength=model.codebook.size)
            mu = nets.mean_output(dist, spec).astype(np.float64)
            sse += float(((mu - xb.astype(np.float64)) ** 2).sum())
            parts = prior.elbo_bound(x, model, prior_net)
            recon_total += parts.recon_nll * b
            prior_total += parts.prior_nll * b
    total = counts.sum()
    p = counts[counts > 0] / total
    perplexity = float(np.exp(-(p * np.log(p)).sum()))
    return {
        "recon_mse": sse / (n * pixels),
        "bits_per_dim": (recon_total + prior_total) / n / (pixels * math.log(2)),
        "perplexity": perplexity,
        "code_usage": float((counts > 0).mean()),
        "n_images": n,
    }
