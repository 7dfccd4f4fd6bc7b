"""Class-conditional causal transformer over discrete token indices, with
classifier-free guidance at sampling time.

The class enters as sequence position 0 (so logits at position i see exactly
the class and positions < i), and a learned null-class row supports guidance:
guided = null + cfg_scale * (conditional - null), applied per step before the
temperature division and the categorical draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import numerics as nm
from .numerics import Tensor
from .rng import Rng


@dataclass(frozen=True)
class PriorConfig:
    vocab: int
    seq_len: int
    n_classes: int
    layers: int = 4
    width: int = 128
    heads: int = 4
    dropout: float = 0.0
    cfg_null_prob: float = 0.1

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.cfg_null_prob < 1.0:
            raise ValueError("dropout and cfg_null_prob must be in [0, 1)")


class PriorModel(nn.Module):
    def __init__(self, config: PriorConfig, rng: Rng):
        c = config
        self.config = config
        self.tok_emb = nn.Embedding(c.vocab, c.width, rng.child("tok"))
        # one extra class row: the learned null class for guidance
        self.cls_emb = nn.Embedding(c.n_classes + 1, c.width, rng.child("cls"))
        self.pos_emb = Tensor(rng.child("pos").normal((c.seq_len, c.width)) * 0.02,
                              requires_grad=True)
        self.blocks = [nn.Block(c.width, c.heads, rng.child("block", i)) for i in range(c.layers)]
        self.ln_f = nn.LayerNorm(c.width)
        # near-zero initial logits: untrained loss sits at ln(vocab) + O(1e-4)
        self.head = nn.Linear(c.width, c.vocab, rng.child("head"), bias=False,
                              std=0.01 / np.sqrt(c.width))

    @property
    def null_class(self) -> int:
        return self.config.n_classes

    def logits(self, tokens: np.ndarray, classes: np.ndarray, rng: Rng | None = None) -> Tensor:
        """(B, M, V) logits; position i conditions on the class and tokens < i."""
        tokens = np.asarray(tokens)
        classes = np.asarray(classes)
        b, m = tokens.shape
        cls = nm.reshape(self.cls_emb(classes), (b, 1, self.config.width))
        if m > 1:
            tok = self.tok_emb(tokens[:, : m - 1])
            x = nm.concat([cls, tok], axis=1)
        else:
            x = cls
        x = nm.add(x, self.pos_emb)
        x = nn.dropout(x, self.config.dropout, rng)
        mask = nn.causal_mask(m)
        for block in self.blocks:
            x = block(x, mask)
        return self.head(self.ln_f(x))

    def sequence_log_prob(self, sequences: np.ndarray, class_id: int) -> np.ndarray:
        """Exact chain-rule log p(sequence | class) for each row."""
        sequences = np.asarray(sequences)
        n, m = sequences.shape
        classes = np.full(n, class_id, dtype=np.int64)
        with nm.no_grad():
            logits = self.logits(sequences, classes).data
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        rows = np.arange(n)[:, None], np.arange(m)[None, :]
        return logp[rows[0], rows[1], sequences].sum(axis=1)


def prior_loss(
    model: PriorModel,
    tokens: np.ndarray,
    classes: np.ndarray,
    rng: Rng | None = None,
) -> Tensor:
    """Mean next-token cross-entropy. With an rng, classes are dropped to the
    null class with probability cfg_null_prob (guidance training)."""
    tokens = np.asarray(tokens)
    classes = np.asarray(classes)
    c = model.config
    if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab):
        raise IndexError(f"token index out of range [0, {c.vocab})")
    if classes.size and (classes.min() < 0 or classes.max() >= c.n_classes):
        raise IndexError(f"class out of range [0, {c.n_classes})")
    if rng is not None and c.cfg_null_prob > 0.0:
        drop = rng.uniform(classes.shape) < c.cfg_null_prob
        classes = np.where(drop, model.null_class, classes)
    logits = model.logits(tokens, classes, rng)
    return nm.cross_entropy_logits(logits, tokens)


def _categorical(rng: Rng, probs: np.ndarray) -> np.ndarray:
    """One draw per row by inverse CDF; probs rows sum to 1."""
    u = rng.uniform((probs.shape[0], 1))
    cdf = probs.cumsum(axis=1)
    return np.minimum((cdf < u).sum(axis=1), probs.shape[1] - 1).astype(np.int64)


def guided_logits(cond: np.ndarray, null: np.ndarray, cfg_scale: float) -> np.ndarray:
    return null + cfg_scale * (cond - null)


def sample_prior_batch(
    model: PriorModel,
    classes: np.ndarray,
    cfg_scale: float = 1.0,
    temperature: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """Left-to-right ancestral sampling, one sequence per entry of classes."""
    if temperature <= 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if cfg_scale < 0.0:
        raise ValueError(f"cfg_scale must be >= 0, got {cfg_scale}")
    c = model.config
    classes = np.asarray(classes, dtype=np.int64)
    n = len(classes)
    rng = Rng(seed, "prior_sample")
    tokens = np.zeros((n, c.seq_len), dtype=np.int64)
    null = np.full(n, model.null_class, dtype=np.int64)
    with nm.no_grad():
        for i in range(c.seq_len):
            lc = model.logits(tokens, classes).data[:, i, :]
            ln = model.logits(tokens, null).data[:, i, :]
            g = guided_logits(lc, ln, cfg_scale) / temperature
            g = g - g.max(axis=1, keepdims=True)
            e = np.exp(g)
            tokens[:, i] = _categorical(rng.child(i), e / e.sum(axis=1, keepdims=True))
    return tokens


def sample_prior(
    model: PriorModel,
    class_id: int,
    cfg_scale: float = 1.0,
    temperature: float = 1.0,
    seed: int = 0,
    n: int = 1,
) -> np.ndarray:
    """n sequences for a single class."""
    classes = np.full(n, class_id, dtype=np.int64)
    return sample_prior_batch(model, classes, cfg_scale, temperature, seed)
