"""Autoregressive categorical prior over latent index grids.

A stack of spatially masked convolutions: the first layer excludes the
current position (mask A), later layers include it (mask B), so the logits at
any position depend only on strictly earlier grid entries in raster order.
Sampling proceeds position by position in that same order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, Tensor
from .quantizer import LatentGrid, kl_to_uniform_prior, quantize


@dataclass
class PriorSpec:
    grid_h: int = 7
    grid_w: int = 7
    codebook_size: int = 512
    layers: int = 4
    hidden: int = 64
    embed_dim: int = 64
    first_kernel: int = 7
    kernel: int = 3

    def validate(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("grid must be at least 1x1")
        if self.codebook_size < 1:
            raise ValueError("codebook_size must be >= 1")
        if self.layers < 1:
            raise ValueError("need at least one masked layer")
        if self.first_kernel % 2 == 0 or self.kernel % 2 == 0:
            raise ValueError("masked kernels must be odd-sized")

    def mask_kinds(self):
        return ["A"] + ["B"] * (self.layers - 1)


def causal_mask(kind, k):
    """0/1 spatial mask over a k x k kernel: everything above the center row,
    the center row left of center, and (for kind B) the center itself."""
    m = np.zeros((k, k), dtype=DTYPE)
    c = k // 2
    m[:c, :] = 1
    m[c, :c] = 1
    if kind == "B":
        m[c, c] = 1
    return m


class MaskedConv:
    def __init__(self, rng, kind, c_in, c_out, k):
        self.kind = kind
        std = math.sqrt(2.0 / (c_in * k * k))
        self.w = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=DTYPE), requires_grad=True)
        self.mask = Tensor(np.broadcast_to(causal_mask(kind, k),
                                           (c_out, c_in, k, k)).copy())
        self.pad = k // 2

    def __call__(self, x):
        return ad.add_bias(
            ad.conv2d(x, ad.mul(self.w, self.mask), 1, self.pad), self.b
        )

    def named_parameters(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class PriorNet:
    """Index embeddings, masked conv stack, and a 1x1 logit head.

    The head is zero-initialized, so an untrained prior is exactly uniform.
    """

    def __init__(self, spec, rng):
        spec.validate()
        self.spec = spec
        self.embed = Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(spec.embed_dim),
                       size=(spec.codebook_size, spec.embed_dim)),
            requires_grad=True,
        )
        kinds = spec.mask_kinds()
        self.convs = [MaskedConv(rng, kinds[0], spec.embed_dim, spec.hidden,
                                 spec.first_kernel)]
        for kind in kinds[1:]:
            self.convs.append(
                MaskedConv(rng, kind, spec.hidden, spec.hidden, spec.kernel)
            )
        self.head_w = Tensor(
            np.zeros((spec.codebook_size, spec.hidden, 1, 1), dtype=DTYPE),
            requires_grad=True,
        )
        self.head_b = Tensor(np.zeros(spec.codebook_size, dtype=DTYPE),
                             requires_grad=True)

    def named_parameters(self):
        yield "prior.embed", self.embed
        for i, conv in enumerate(self.convs):
            yield from conv.named_parameters(f"prior.conv{i}")
        yield "prior.head.w", self.head_w
        yield "prior.head.b", self.head_b


def _as_indices(grid, spec):
    idx = grid.indices if isinstance(grid, LatentGrid) else np.asarray(grid)
    if idx.ndim == 2:
        idx = idx[None]
    if idx.ndim != 3 or idx.shape[1:] != (spec.grid_h, spec.grid_w):
        raise ad.ShapeError(
            f"grid shape {idx.shape} does not match "
            f"{spec.grid_h}x{spec.grid_w} prior"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= spec.codebook_size):
        raise ad.ShapeError("grid index out of range for the prior codebook")
    return idx


def prior_logits(grid, net):
    """Per-position logits over K codes, (B, K, H, W)."""
    idx = _as_indices(grid, net.spec)
    x = ad.gather_rows(net.embed, idx)
    for i, conv in enumerate(net.convs):
        if i:
            x = ad.relu(x)
        x = conv(x)
    x = ad.relu(x)
    return ad.add_bias(ad.conv2d(x, net.head_w, 1, 0), net.head_b)


def prior_nll(grid, net):
    """Mean over batch of the summed per-position NLL, in nats."""
    idx = _as_indices(grid, net.spec)
    logits = prior_logits(idx, net)
    return ad.mul_scalar(ad.cross_entropy_logits(logits, idx),
                         1.0 / idx.shape[0])


def softmax_probs(logits):
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sample_prior(net, rng, batch=1):
    """Ancestral sampling in raster order; deterministic for a fixed rng."""
    spec = net.spec
    h, w = spec.grid_h, spec.grid_w
    idx = np.zeros((batch, h, w), dtype=np.int64)
    with ad.no_grad():
        for i in range(h):
            for j in range(w):
                logits = prior_logits(idx, net).data[:, :, i, j]
                p = softmax_probs(logits[:, :, None, None])[:, :, 0, 0]
                cum = np.cumsum(p, axis=1)
                cum /= cum[:, -1:]
                r = rng.random((batch, 1))
                idx[:, i, j] = np.minimum((cum < r).sum(axis=1),
                                          spec.codebook_size - 1)
    return LatentGrid(idx, spec.codebook_size)


class ElboParts(NamedTuple):
    recon_nll: float
    prior_nll: float
    total_nll: float
    bits_per_dim: float


def elbo_bound(x, model, prior_net=None):
    """Reconstruction NLL plus latent code NLL, per image, and the implied
    bits per dimension. Without a trained prior the latent term falls back to
    the uniform ln K per position."""
    from .nets import reconstruction_nll  # local import avoids a cycle

    x_t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))
    spec = model.spec
    with ad.no_grad():
        z_e = model.encode(x_t)
        z_q, grid = quantize(z_e, model.codebook)
        dist = model.decode(z_q)
        recon = float(reconstruction_nll(dist, x_t, spec).item())
        if prior_net is None:
            latent = grid.indices.shape[1] * grid.indices.shape[2] * \
                kl_to_uniform_prior(model.codebook.size)
        else:
            latent = float(prior_nll(grid, prior_net).item())
    dims = spec.in_channels * spec.in_h * spec.in_w
    total = recon + latent
    return ElboParts(recon, latent, total, total / (dims * math.log(2.0)))
