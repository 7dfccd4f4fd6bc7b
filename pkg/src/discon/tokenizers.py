"""Dual tokenization of continuous tokens: a fitted k-means codebook gives the
lossy discrete view, an affine normalizer gives the lossless continuous view,
plus the matching decoders.

The codebook is fit once and then frozen, mirroring a pre-trained quantizer;
k-means is written out here (k-means++ init, Lloyd to fixpoint, farthest-point
reseeding of empty clusters) so assignment and tie-break semantics are pinned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluate import frechet_distance
from .rng import Rng
from .synthdata import Dataset


@dataclass(frozen=True)
class Codebook:
    vectors: np.ndarray  # (vocab, dim)
    inertia: float  # final mean squared distance to assigned code
    iterations: int

    @property
    def vocab(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray  # (dim,)
    scale: np.ndarray  # (dim,) strictly positive

    @classmethod
    def fit(cls, tokens: np.ndarray) -> "Normalizer":
        tokens = np.asarray(tokens, dtype=np.float64).reshape(-1, tokens.shape[-1])
        mean = tokens.mean(axis=0)
        scale = tokens.std(axis=0)
        if (scale <= 0.0).any():
            raise ValueError("degenerate token dimension: zero variance")
        return cls(mean, scale)


def _nearest(points: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Index of the closest code per point; ties go to the lowest index."""
    d2 = ((points[:, None, :] - codes[None, :, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1)


def fit_codebook(tokens: np.ndarray, vocab: int, seed: int, max_iters: int = 100) -> Codebook:
    """k-means++ then Lloyd iterations until the assignment stops changing."""
    points = np.asarray(tokens, dtype=np.float64).reshape(-1, tokens.shape[-1])
    distinct = np.unique(points, axis=0)
    if len(distinct) < vocab:
        raise ValueError(f"need >= {vocab} distinct tokens to fit, got {len(distinct)}")
    rng = Rng(seed, "kmeans")

    # k-means++ seeding
    codes = np.empty((vocab, points.shape[1]))
    first = int(rng.integers(0, len(points)))
    codes[0] = points[first]
    d2 = ((points - codes[0]) ** 2).sum(axis=1)
    for j in range(1, vocab):
        probs = d2 / d2.sum()
        codes[j] = points[int(rng.choice(len(points), p=probs))]
        d2 = np.minimum(d2, ((points - codes[j]) ** 2).sum(axis=1))

    assign = _nearest(points, codes)
    iterations = 0
    for iterations in range(1, max_iters + 1):
        reseeded: list[int] = []
        for j in range(vocab):
            members = points[assign == j]
            if len(members):
                codes[j] = members.mean(axis=0)
            else:
                # reseed dead code to the farthest point not already claimed
                residual = ((points - codes[assign]) ** 2).sum(axis=1)
                residual[reseeded] = -1.0
                far = int(residual.argmax())
                codes[j] = points[far]
                reseeded.append(far)
        new_assign = _nearest(points, codes)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign

    inertia = float(((points - codes[assign]) ** 2).sum(axis=1).mean())
    return Codebook(codes.copy(), inertia, iterations)


def encode_discrete(tokens: np.ndarray, cb: Codebook) -> np.ndarray:
    """Map each token to its nearest code index."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape[-1] != cb.dim:
        raise ValueError(f"token dim {tokens.shape[-1]} != codebook dim {cb.dim}")
    flat = tokens.reshape(-1, cb.dim)
    return _nearest(flat, cb.vectors).reshape(tokens.shape[:-1]).astype(np.int64)


def decode_discrete(indices: np.ndarray, cb: Codebook) -> np.ndarray:
    return cb.vectors[np.asarray(indices)]


def encode_continuous(tokens: np.ndarray, norm: Normalizer) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape[-1] != norm.mean.shape[0]:
        raise ValueError(f"token dim {tokens.shape[-1]} != normalizer dim {norm.mean.shape[0]}")
    return (tokens - norm.mean) / norm.scale


def decode(tokens: np.ndarray, norm: Normalizer) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape[-1] != norm.mean.shape[0]:
        raise ValueError(f"token dim {tokens.shape[-1]} != normalizer dim {norm.mean.shape[0]}")
    return tokens * norm.scale + norm.mean


def reconstruction_fd(dataset: Dataset, cb: Codebook | None, norm: Normalizer) -> float:
    """Fréchet distance between original tokens and their reconstruction.

    With a codebook the path is quantize-then-decode (lossy); with cb=None it
    is normalize-then-denormalize, which is exact up to rounding.
    """
    original = dataset.pooled_tokens()
    if cb is None:
        recon = decode(encode_continuous(original, norm), norm)
    else:
        recon = decode_discrete(encode_discrete(original, cb), cb)
    return frechet_distance(original, recon)
