"""Layers, blocks, and optimizer shared by the prior, backbone, and head models.

Everything is built from the numerics op set; parameters are plain Tensors
with requires_grad=True, registered by attribute walking so state dicts have
a stable, construction-ordered key set.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .rng import Rng

_NEG_MASK = -1e30  # additive attention mask; exp() underflows to exactly 0


class Module:
    """Base with recursive parameter discovery (insertion-ordered)."""

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, attr in vars(self).items():
            if isinstance(attr, Tensor):
                out[name] = attr
            elif isinstance(attr, Module):
                for sub, t in attr.params().items():
                    out[f"{name}.{sub}"] = t
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        for sub, t in item.params().items():
                            out[f"{name}.{i}.{sub}"] = t
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.params()
        if set(params) != set(state):
            missing = set(params) ^ set(state)
            raise KeyError(f"state dict key mismatch: {sorted(missing)}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"param '{k}': shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def n_params(self) -> int:
        return sum(t.size for t in self.params().values())


def _param(rng: Rng, shape: tuple[int, ...], std: float) -> Tensor:
    data = rng.normal(shape) * std if std > 0 else np.zeros(shape)
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: Rng, bias: bool = True, std: float | None = None):
        if std is None:
            std = 1.0 / np.sqrt(n_in)
        self.w = _param(rng, (n_in, n_out), std)
        self.b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = nm.matmul(x, self.w)
        return y if self.b is None else nm.add(y, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nm.layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: Rng, std: float = 0.02):
        self.table = _param(rng, (n, dim), std)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return nm.embedding(self.table, ids)


def causal_mask(n: int) -> np.ndarray:
    """(n, n) additive mask: 0 at or below the diagonal, -inf-like above."""
    return np.triu(np.full((n, n), _NEG_MASK), k=1)


class SelfAttention(Module):
    """Multi-head attention over (B, L, W); optional additive mask (L, L)."""

    def __init__(self, width: int, heads: int, rng: Rng):
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = Linear(width, 3 * width, rng)
        self.out = Linear(width, width, rng, std=0.02)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        b, L, w = x.shape
        h, dh = self.heads, self.head_dim
        q, k, v = nm.split(self.qkv(x), [w, w, w], axis=2)
        q = nm.transpose(nm.reshape(q, (b, L, h, dh)), (0, 2, 1, 3))
        k = nm.transpose(nm.reshape(k, (b, L, h, dh)), (0, 2, 1, 3))
        v = nm.transpose(nm.reshape(v, (b, L, h, dh)), (0, 2, 1, 3))
        scores = nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / np.sqrt(dh))
        if mask is not None:
            scores = nm.add(scores, Tensor(mask))
        attn = nm.softmax(scores)
        ctx = nm.matmul(attn, v)
        ctx = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (b, L, w))
        return self.out(ctx)


class Block(Module):
    """Pre-LN transformer block: attention then 4x GELU MLP, both residual."""

    def __init__(self, width: int, heads: int, rng: Rng):
        self.ln1 = LayerNorm(width)
        self.attn = SelfAttention(width, heads, rng)
        self.ln2 = LayerNorm(width)
        self.fc1 = Linear(width, 4 * width, rng)
        self.fc2 = Linear(4 * width, width, rng, std=0.02)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = nm.add(x, self.attn(self.ln1(x), mask))
        return nm.add(x, self.fc2(nm.gelu(self.fc1(self.ln2(x)))))


def dropout(x: Tensor, p: float, rng: Rng | None) -> Tensor:
    """Inverted dropout; identity when p == 0 or no rng (eval)."""
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.uniform(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return nm.mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay; moments keyed by parameter name."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {
            "t": self.t,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k], dtype=np.float64).copy()
            self.v[k] = np.asarray(state["v"][k], dtype=np.float64).copy()


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    total = float(np.sqrt(total))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


class Ema:
    """Exponential moving average of parameters, used as evaluation weights."""

    def __init__(self, params: dict[str, Tensor], decay: float):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"ema decay must be in [0, 1), got {decay}")
        self.decay = decay
        self.shadow = {k: p.data.copy() for k, p in params.items()}

    def update(self, params: dict[str, Tensor]) -> None:
        d = self.decay
        for k, p in params.items():
            s = self.shadow[k]
            s *= d
            s += (1.0 - d) * p.data

    def state(self) -> dict[str, np.ndarray]:
        return {k: a.copy() for k, a in self.shadow.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k in self.shadow:
            self.shadow[k] = np.asarray(state[k], dtype=np.float64).copy()
