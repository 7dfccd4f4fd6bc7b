"""Masked bidirectional transformer producing per-position latents for the
continuous tokens, optionally conditioned on the full discrete token sequence
as an embedded prefix.

With conditioning="disabled" the discrete path is not constructed at all, so
the unconditioned baseline shares every remaining parameter and code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import numerics as nm
from .numerics import Tensor
from .rng import Rng

CONDITIONING = ("prefix", "disabled")


@dataclass(frozen=True)
class BackboneConfig:
    seq_len: int
    token_dim: int
    vocab: int
    layers: int = 6
    width: int = 128
    heads: int = 4
    z_dim: int | None = None  # defaults to width
    mask_ratio_range: tuple[float, float] = (0.7, 1.0)
    conditioning: str = "prefix"

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        lo, hi = self.mask_ratio_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"mask_ratio_range must satisfy 0 < lo <= hi <= 1, got {self.mask_ratio_range}")
        if self.conditioning not in CONDITIONING:
            raise ValueError(f"conditioning must be one of {CONDITIONING}, got {self.conditioning!r}")
        if self.z_dim is None:
            object.__setattr__(self, "z_dim", self.width)


@dataclass(frozen=True)
class MaskState:
    mask: np.ndarray  # (seq_len,) bool, True = hidden
    reveal_order: np.ndarray  # permutation of [0, seq_len); masked entries are consumed in order

    def __post_init__(self):
        if not self.mask.any():
            raise ValueError("at least one position must be masked")
        if sorted(self.reveal_order.tolist()) != list(range(len(self.mask))):
            raise ValueError("reveal_order must be a permutation of all positions")


def sample_mask(seq_len: int, mask_ratio_range: tuple[float, float], rng: Rng) -> MaskState:
    """Mask ceil(r * seq_len) uniformly random positions, r ~ U[lo, hi]."""
    if seq_len < 2:
        raise ValueError(f"seq_len must be >= 2, got {seq_len}")
    lo, hi = mask_ratio_range
    ratio = float(rng.uniform((), lo, hi))
    count = int(np.ceil(ratio * seq_len))
    order = rng.permutation(seq_len)
    mask = np.zeros(seq_len, dtype=bool)
    mask[order[:count]] = True
    return MaskState(mask=mask, reveal_order=order)


class BackboneModel(nn.Module):
    def __init__(self, config: BackboneConfig, rng: Rng):
        c = config
        self.config = config
        self.cont_in = nn.Linear(c.token_dim, c.width, rng.child("cont_in"))
        self.mask_emb = Tensor(rng.child("mask").normal((c.width,)) * 0.02, requires_grad=True)
        self.cont_pos = Tensor(rng.child("cpos").normal((c.seq_len, c.width)) * 0.02,
                               requires_grad=True)
        if c.conditioning == "prefix":
            self.disc_emb = nn.Embedding(c.vocab, c.width, rng.child("disc"))
            self.disc_pos = Tensor(rng.child("dpos").normal((c.seq_len, c.width)) * 0.02,
                                   requires_grad=True)
        self.blocks = [nn.Block(c.width, c.heads, rng.child("block", i)) for i in range(c.layers)]
        self.ln_f = nn.LayerNorm(c.width)
        self.z_proj = nn.Linear(c.width, c.z_dim, rng.child("zproj"))

    def hidden(self, cont: np.ndarray, disc: np.ndarray | None, mask: np.ndarray) -> Tensor:
        """(B, M, z_dim) latents over the continuous positions.

        cont: (B, M, d) continuous tokens (values at masked positions are
        ignored; the learned mask embedding is substituted). disc: (B, M)
        discrete indices, required for prefix conditioning. mask: (B, M) bool.
        """
        c = self.config
        cont = np.asarray(cont, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        b, m, d = cont.shape
        if m != c.seq_len or d != c.token_dim:
            raise ValueError(f"cont shape {cont.shape} != (B, {c.seq_len}, {c.token_dim})")
        if mask.shape != (b, m):
            raise ValueError(f"mask shape {mask.shape} != tokens shape {(b, m)}")

        hidden_f = mask.astype(np.float64)[:, :, None]
        h = nm.mul(self.cont_in(Tensor(cont)), Tensor(1.0 - hidden_f))
        h = nm.add(h, nm.mul(self.mask_emb, Tensor(hidden_f)))
        h = nm.add(h, self.cont_pos)

        if c.conditioning == "prefix":
            if disc is None:
                raise ValueError("prefix conditioning requires discrete tokens")
            disc = np.asarray(disc)
            if disc.shape != (b, m):
                raise ValueError(f"disc shape {disc.shape} != tokens shape {(b, m)}")
            prefix = nm.add(self.disc_emb(disc), self.disc_pos)
            x = nm.concat([prefix, h], axis=1)
        else:
            x = h

        for block in self.blocks:
            x = block(x)
        x = self.z_proj(self.ln_f(x))
        if c.conditioning == "prefix":
            x = nm.split(x, [m, m], axis=1)[1]
        return x


def encode_context(
    model: BackboneModel,
    cont: np.ndarray,
    disc: np.ndarray | None,
    mask: MaskState,
) -> np.ndarray:
    """Latents for one sample's masked positions, in ascending position order."""
    cont = np.asarray(cont, dtype=np.float64)
    m = model.config.seq_len
    if cont.shape != (m, model.config.token_dim):
        raise ValueError(f"cont shape {cont.shape} != ({m}, {model.config.token_dim})")
    if len(mask.mask) != m:
        raise ValueError(f"mask length {len(mask.mask)} != seq_len {m}")
    if disc is not None and np.asarray(disc).shape != (m,):
        raise ValueError(f"disc shape {np.asarray(disc).shape} != ({m},)")
    with nm.no_grad():
        z = model.hidden(
            cont[None],
            None if disc is None else np.asarray(disc)[None],
            mask.mask[None],
        ).data[0]
    return z[mask.mask]
