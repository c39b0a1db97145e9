"""Vector-quantization bottleneck: nearest-code assignment, straight-through
gradients, the dictionary/commitment loss pair and the moving-average codebook
update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, Tensor


class QuantizerError(ValueError):
    pass


@dataclass
class Codebook:
    """Embedding table of K vectors in R^D plus moving-average accumulators.

    With ``ema_enabled`` the embeddings are not trained by gradient descent;
    they track per-code counts and vector sums decayed by ``gamma`` and are
    re-derived as sums/counts after every update.
    """

    embeddings: Tensor
    beta: float = 0.25
    ema_enabled: bool = False
    gamma: float = 0.99
    ema_counts: np.ndarray = field(default=None, repr=False)
    ema_sums: np.ndarray = field(default=None, repr=False)

    @property
    def size(self):
        return self.embeddings.data.shape[0]

    @property
    def dim(self):
        return self.embeddings.data.shape[1]

    @classmethod
    def create(cls, rng, size, dim, beta=0.25, ema_enabled=False, gamma=0.99):
        """Uniform init on [-1/K, 1/K]; EMA state seeded so sums/counts
        reproduce the embeddings exactly from step zero."""
        if size < 1 or dim < 1:
            raise QuantizerError(f"codebook needs size >= 1 and dim >= 1, "
                                 f"got K={size}, D={dim}")
        lim = 1.0 / size
        emb = Tensor(rng.uniform(-lim, lim, size=(size, dim)), requires_grad=True)
        return cls(
            embeddings=emb,
            beta=beta,
            ema_enabled=ema_enabled,
            gamma=gamma,
            ema_counts=np.ones(size, dtype=DTYPE),
            ema_sums=emb.data.copy(),
        )


@dataclass
class LatentGrid:
    """Integer code indices on a (batch, H, W) grid, each in [0, K)."""

    indices: np.ndarray
    size: int

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim != 3:
            raise QuantizerError(f"latent grid must be 3-D, got {idx.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= self.size):
            raise QuantizerError(f"latent index out of range [0, {self.size})")
        self.indices = idx


def nearest_code(vec, codebook):
    """Index of the codebook row closest in squared L2 distance.

    Ties resolve to the lowest index.
    """
    emb = codebook.embeddings.data
    if emb.shape[0] == 0:
        raise QuantizerError("nearest_code on an empty codebook")
    v = np.asarray(vec, dtype=DTYPE)
    if v.shape != (emb.shape[1],):
        raise QuantizerError(f"vector shape {v.shape} does not match "
                             f"codebook dim {emb.shape[1]}")
    d = ((emb - v) ** 2).sum(axis=1)
    return int(d.argmin())


def _assign(flat, emb, chunk=4096):
    n = flat.shape[0]
    out = np.empty(n, dtype=np.int64)
    for lo in range(0, n, chunk):
        part = flat[lo:lo + chunk]
        diff = part[:, None, :] - emb[None, :, :]
        out[lo:lo + chunk] = (diff * diff).sum(axis=2).argmin(axis=1)
    return out


def quantize(z_e, codebook):
    """Snap each (B, D, H, W) latent vector to its nearest code.

    Returns the quantized tensor plus the index grid. The backward contract is
    straight-through: the gradient at the output is copied unchanged onto
    ``z_e`` and the embeddings receive nothing through this path.
    """
    b, d, h, w = z_e.data.shape if z_e.data.ndim == 4 else (None,) * 4
    if b is None or d != codebook.dim:
        raise QuantizerError(
            f"quantize expects (B, {codebook.dim}, H, W) latents, "
            f"got {z_e.data.shape}"
        )
    if not np.all(np.isfinite(z_e.data)):
        raise QuantizerError("quantize called on non-finite latents")

    flat = np.ascontiguousarray(z_e.data.transpose(0, 2, 3, 1)).reshape(-1, d)
    idx = _assign(flat, codebook.embeddings.data)
    grid = LatentGrid(idx.reshape(b, h, w), codebook.size)
    data = np.ascontiguousarray(
        codebook.embeddings.data[idx].reshape(b, h, w, d).transpose(0, 3, 1, 2)
    )
    z_q = ad.custom_op("quantize", (z_e, codebook.embeddings), data,
                       lambda g: (g, None))
    return z_q, grid


def vq_loss_terms(z_e, grid, codebook):
    """Dictionary and commitment losses, averaged over latent positions.

    Both are the same squared residual between encoder outputs and their
    assigned codes; they differ only in which side the gradient reaches.
    """
    if z_e.data.ndim != 4:
        raise QuantizerError(f"expected 4-D latents, got {z_e.data.shape}")
    selected = ad.gather_rows(codebook.embeddings, grid.indices)
    n_latents = grid.indices.size
    codebook_loss = ad.mul_scalar(
        ad.sum(ad.square(ad.sub(ad.stop_gradient(z_e), selected))),
        1.0 / n_latents,
    )
    commit_loss = ad.mul_scalar(
        ad.sum(ad.square(ad.sub(z_e, ad.stop_gradient(selected)))),
        1.0 / n_latents,
    )
    return codebook_loss, commit_loss


def total_loss(recon_nll, codebook_loss, commit_loss, beta, ema_enabled=False):
    """Reconstruction + dictionary + beta-weighted commitment.

    The dictionary term is dropped when the codebook updates by moving
    averages instead of gradients.
    """
    out = ad.add(recon_nll, ad.mul_scalar(commit_loss, beta))
    if not ema_enabled:
        out = ad.add(out, codebook_loss)
    return out


def ema_update(codebook, z_e_values, grid, gamma=None):
    """Decay-and-renormalize codebook update from one batch of assignments.

    counts <- counts*g + n*(1-g); sums <- sums*g + sum(z)*(1-g);
    embeddings <- sums/counts. With gamma=0 this is one closed-form k-means
    step. Codes with zero decayed count keep their previous embedding.
    """
    if not codebook.ema_enabled:
        raise QuantizerError("ema_update on a codebook without EMA enabled")
    g = codebook.gamma if gamma is None else float(gamma)
    k, d = codebook.size, codebook.dim
    z = np.asarray(z_e_values, dtype=DTYPE)
    flat = np.ascontiguousarray(z.transpose(0, 2, 3, 1)).reshape(-1, d)
    idx = grid.indices.reshape(-1)

    n = np.bincount(idx, minlength=k).astype(DTYPE)
    sums = np.zeros((k, d), dtype=DTYPE)
    np.add.at(sums, idx, flat)

    codebook.ema_counts = (codebook.ema_counts * DTYPE(g)
                           + n * DTYPE(1.0 - g))
    codebook.ema_sums = (codebook.ema_sums * DTYPE(g)
                         + sums * DTYPE(1.0 - g))
    alive = codebook.ema_counts > 0
    emb = codebook.embeddings.data
    emb[alive] = (codebook.ema_sums[alive]
                  / codebook.ema_counts[alive, None])


def kl_to_uniform_prior(size):
    """KL from the one-hot assignment posterior to a uniform categorical:
    a constant ln K nats."""
    if size < 1:
        raise QuantizerError("codebook size must be >= 1")
    return math.log(size)


def codebook_stats(grids, size):
    """Usage histogram and perplexity of code assignments.

    Perplexity is exp(entropy) of the empirical code distribution: 1 on total
    collapse, K when usage is uniform.
    """
    counts = np.zeros(size, dtype=np.int64)
    if isinstance(grids, (LatentGrid,)):
        grids = [grids]
    for g in grids:
        idx = g.indices if isinstance(g, LatentGrid) else np.asarray(g)
        counts += np.bincount(idx.reshape(-1), minlength=size)
    total = counts.sum()
    if total == 0:
        return counts, 1.0
    p = counts[counts > 0] / total
    entropy = -(p * np.log(p)).sum()
    return counts, float(np.exp(entropy))
