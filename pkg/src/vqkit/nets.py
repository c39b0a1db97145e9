"""Convolutional encoder/decoder pair around the quantization bottleneck.

Topology: stride-2 4x4 downsampling convs, residual blocks built as
ReLU -> 3x3 conv -> ReLU -> 1x1 conv, and mirrored stride-2 transposed convs
on the way back up. A declarative ``ModelSpec`` fixes every knob.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, Tensor
from .quantizer import Codebook, quantize

GAUSSIAN_SIGMA_DEFAULT = 1.0 / math.sqrt(2.0)

LIKELIHOODS = ("gaussian", "dlogistic")


@dataclass
class ModelSpec:
    """Declarative description of the autoencoder and its bottleneck."""

    in_channels: int | None = None
    in_h: int | None = None
    in_w: int | None = None
    hidden: int = 256
    downsample: int = 2
    res_blocks: int = 2
    embed_dim: int = 64
    codebook_size: int = 512
    beta: float = 0.25
    gamma: float = 0.99
    ema: bool = False
    likelihood: str = "gaussian"
    sigma: float = GAUSSIAN_SIGMA_DEFAULT

    def validate(self):
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.in_h is None or self.in_w is None:
            raise ValueError("input height/width must be set")
        if self.downsample < 1:
            raise ValueError("need at least one downsampling stage")
        f = 2 ** self.downsample
        if self.in_h % f or self.in_w % f:
            raise ValueError(
                f"input {self.in_h}x{self.in_w} not divisible by 2^{self.downsample}"
            )
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"unknown likelihood '{self.likelihood}'")
        if self.hidden < 1 or self.embed_dim < 1 or self.codebook_size < 1:
            raise ValueError("hidden, embed_dim and codebook_size must be >= 1")
        if self.res_blocks < 0:
            raise ValueError("res_blocks must be >= 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def grid_h(self):
        return self.in_h // (2 ** self.downsample)

    @property
    def grid_w(self):
        return self.in_w // (2 ** self.downsample)

    @property
    def out_channels(self):
        # mean only for gaussian; mean + log-scale planes for dlogistic
        return self.in_channels * (2 if self.likelihood == "dlogistic" else 1)


def _he_kernel(rng, shape, fan_in):
    std = math.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Conv:
    def __init__(self, rng, c_in, c_out, k, stride=1, pad=0):
        self.stride, self.pad = stride, pad
        self.w = _he_kernel(rng, (c_out, c_in, k, k), c_in * k * k)
        self.b = Tensor(np.zeros(c_out, dtype=DTYPE), requires_grad=True)

    def __call__(self, x):
        return ad.add_bias(ad.conv2d(x, self.w, self.stride, self.pad), self.b)

    def named_parameters(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class ConvTranspose:
    """Upsampling layer; kernel laid out as its paired forward conv."""

    def __init__(self, rng, c_in, c_out, k, stride=1, pad=0):
        self.stride, self.pad = stride, pad
        self.w = _he_kernel(rng, (c_in, c_out, k, k), c_in * k * k)
        self.b = Tensor(np.zeros(c_out, dtype=DTYPE), requires_grad=True)

    def __call__(self, x):
        return ad.add_bias(
            ad.conv2d_transpose(x, self.w, self.stride, self.pad), self.b
        )

    def named_parameters(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class ResidualBlock:
    def __init__(self, rng, channels):
        self.conv3 = Conv(rng, channels, channels, 3, 1, 1)
        self.conv1 = Conv(rng, channels, channels, 1)

    def __call__(self, x):
        return ad.add(x, self.conv1(ad.relu(self.conv3(ad.relu(x)))))

    def named_parameters(self, prefix):
        yield from self.conv3.named_parameters(f"{prefix}.conv3")
        yield from self.conv1.named_parameters(f"{prefix}.conv1")


class Encoder:
    def __init__(self, rng, spec):
        h = spec.hidden
        self.downs = []
        c = spec.in_channels
        for _ in range(spec.downsample):
            self.downs.append(Conv(rng, c, h, 4, 2, 1))
            c = h
        self.blocks = [ResidualBlock(rng, h) for _ in range(spec.res_blocks)]
        self.proj = Conv(rng, h, spec.embed_dim, 1)

    def __call__(self, x):
        for conv in self.downs:
            x = ad.relu(conv(x))
        for block in self.blocks:
            x = block(x)
        return self.proj(ad.relu(x))

    def named_parameters(self, prefix="encoder"):
        for i, conv in enumerate(self.downs):
            yield from conv.named_parameters(f"{prefix}.down{i}")
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"{prefix}.block{i}")
        yield from self.proj.named_parameters(f"{prefix}.proj")


class Decoder:
    def __init__(self, rng, spec):
        h = spec.hidden
        self.proj = Conv(rng, spec.embed_dim, h, 1)
        self.blocks = [ResidualBlock(rng, h) for _ in range(spec.res_blocks)]
        self.ups = []
        for i in range(spec.downsample):
            last = i == spec.downsample - 1
            self.ups.append(
                ConvTranspose(rng, h, spec.out_channels if last else h, 4, 2, 1)
            )

    def __call__(self, z):
        x = self.proj(z)
        for block in self.blocks:
            x = block(x)
        x = ad.relu(x)
        for i, up in enumerate(self.ups):
            x = up(x)
            if i != len(self.ups) - 1:
                x = ad.relu(x)
        return x

    def named_parameters(self, prefix="decoder"):
        yield from self.proj.named_parameters(f"{prefix}.proj")
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"{prefix}.block{i}")
        for i, up in enumerate(self.ups):
            yield from up.named_parameters(f"{prefix}.up{i}")


class VqVae:
    """Encoder, codebook and decoder bundled with their spec."""

    def __init__(self, spec, encoder, decoder, codebook):
        self.spec = spec
        self.encoder = encoder
        self.decoder = decoder
        self.codebook = codebook

    @classmethod
    def build(cls, spec, rng):
        spec.validate()
        enc = Encoder(rng, spec)
        dec = Decoder(rng, spec)
        cb = Codebook.create(rng, spec.codebook_size, spec.embed_dim,
                             beta=spec.beta, ema_enabled=spec.ema,
                             gamma=spec.gamma)
        return cls(spec, enc, dec, cb)

    def encode(self, x):
        if x.data.ndim != 4 or x.data.shape[1:] != (
            self.spec.in_channels, self.spec.in_h, self.spec.in_w
        ):
            raise ad.ShapeError(
                f"encode expects (B, {self.spec.in_channels}, "
                f"{self.spec.in_h}, {self.spec.in_w}), got {x.data.shape}"
            )
        return self.encoder(x)

    def decode(self, z):
        if z.data.ndim != 4 or z.data.shape[1] != self.spec.embed_dim:
            raise ad.ShapeError(
                f"decode expects (B, {self.spec.embed_dim}, H, W), "
                f"got {z.data.shape}"
            )
        return self.decoder(z)

    def quantize(self, z_e):
        return quantize(z_e, self.codebook)

    def named_parameters(self):
        yield from self.encoder.named_parameters("encoder")
        yield from self.decoder.named_parameters("decoder")
        yield "codebook.embeddings", self.codebook.embeddings

    def trainable_parameters(self, ema_enabled):
        """Gradient-trained parameters; the codebook drops out under EMA."""
        for name, p in self.named_parameters():
            if ema_enabled and name == "codebook.embeddings":
                continue
            yield name, p


def mean_output(dist_params, spec):
    """Predicted pixel means, as a plain array."""
    c = spec.in_channels
    return dist_params.data[:, :c]


def reconstruction_nll(dist_params, x, spec):
    """Mean negative log-likelihood per batch element, in nats.

    Gaussian mode scores pixels under a fixed-variance normal around the
    predicted mean; dlogistic splits the output planes into mean and
    log-scale and scores the 8-bit bin mass of each pixel.
    """
    xv = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    batch = xv.shape[0]
    x_t = x if isinstance(x, Tensor) else Tensor(xv)
    if dist_params.data.shape[0] != batch:
        raise ad.ShapeError("batch size mismatch between prediction and target")

    if spec.likelihood == "gaussian":
        if dist_params.data.shape != xv.shape:
            raise ad.ShapeError(
                f"gaussian nll: prediction {dist_params.data.shape} vs "
                f"target {xv.shape}"
            )
        var2 = 2.0 * spec.sigma * spec.sigma
        pixels = int(np.prod(xv.shape[1:]))
        sse = ad.sum(ad.square(ad.sub(dist_params, x_t)))
        nll = ad.mul_scalar(sse, 1.0 / (var2 * batch))
        const = 0.5 * math.log(2.0 * math.pi * spec.sigma * spec.sigma)
        return ad.add_scalar(nll, pixels * const)

    c = spec.in_channels
    if dist_params.data.shape[1] != 2 * c:
        raise ad.ShapeError(
            f"dlogistic nll needs {2 * c} output channels, "
            f"got {dist_params.data.shape[1]}"
        )
    mu = ad.slice_channels(dist_params, 0, c)
    log_s = ad.slice_channels(dist_params, c, 2 * c)
    total = ad.discretized_logistic_nll(mu, log_s, xv)
    return ad.mul_scalar(total, 1.0 / batch)


def recon_mse(dist_params, x, spec):
    """Per-pixel mean squared error of the predicted means (metric only)."""
    xv = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    mu = mean_output(dist_params, spec)
    diff = mu.astype(np.float64) - xv.astype(np.float64)
    return float((diff * diff).mean())
