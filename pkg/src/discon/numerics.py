"""Reverse-mode differentiable tensor core on 64-bit numpy arrays.

Small by design: exactly the op set needed for little transformers and MLPs,
trading speed for checkability. Every op output is checked finite, every
backward rule is verified against central finite differences (grad_check),
and execution is fully deterministic so identical seeds give bitwise
identical gradients.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "NonFiniteError",
    "GraphError",
    "no_grad",
    "backward",
    "grad_check",
    "add",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "gather_rows",
    "embedding",
    "concat",
    "split",
    "softmax",
    "layer_norm",
    "gelu",
    "mean",
    "mse",
    "cross_entropy_logits",
]

DTYPE = np.float64

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf; named so it never propagates silently."""


class GraphError(RuntimeError):
    """Backward called on an unusable graph (non-scalar, empty, or consumed)."""


_grad_enabled = True


class no_grad:
    """Context manager that disables op recording (inference / oracles)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array plus the bookkeeping to pull gradients back through it.

    ``_parents`` and ``_grad_fn`` form the op record: ops append themselves to
    the implicit graph in execution order, so a reverse traversal from the
    loss is a reverse topological order by construction.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d shape, unlike unconditional use
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic routes through the module-level ops

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    # NaN/Inf both survive summation, so one reduction detects them without
    # materializing a bool mask (false alarms only if finite values overflow).
    if not np.isfinite(arr.sum()):
        if np.isfinite(arr).all():
            raise NonFiniteError(f"op '{op}' overflowed during the finiteness reduction")
        raise NonFiniteError(f"op '{op}' produced non-finite values")


def _record(op: str, data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    """Build the op's output and register it on the graph if grads are needed."""
    _check_finite(op, data)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g back down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", data, (a, b), grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return _record("scale", a.data * c, (a,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b. Either b is a 2-D weight, or a and b share identical leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul: needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatchError(f"matmul: leading dims of {a.shape} and {b.shape} differ")
    data = a.data @ b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record("matmul", data, (a, b), grad_fn)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.ndim < 2:
            raise ShapeMismatchError(f"transpose: needs >=2-D, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inv),)

    return _record("transpose", np.transpose(a.data, axes), (a,), grad_fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _record("reshape", a.data.reshape(tuple(shape)), (a,), grad_fn)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows a[idx] along the first axis; idx is a 1-D integer array."""
    idx = np.asarray(idx)
    if idx.ndim != 1:
        raise ShapeMismatchError(f"gather_rows: index must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range for first axis of {a.shape}")

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record("gather_rows", a.data[idx], (a,), grad_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of a (V, W) table; ids may have any shape. Output ids.shape + (W,)."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeMismatchError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table {table.shape}")
    flat = ids.reshape(-1)
    width = table.shape[1]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, flat, g.reshape(-1, width))
        return (gt,)

    return _record("embedding", table.data[flat].reshape(ids.shape + (width,)), (table,), grad_fn)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeMismatchError("concat: empty input")
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _record("concat", np.concatenate([t.data for t in ts], axis=axis), tuple(ts), grad_fn)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    sizes = list(sizes)
    if sum(sizes) != a.shape[axis]:
        raise ShapeMismatchError(
            f"split: sizes {sizes} do not sum to axis {axis} of shape {a.shape}"
        )
    offsets = np.cumsum([0] + sizes)
    out = []
    for i in range(len(sizes)):
        lo, hi = offsets[i], offsets[i + 1]
        piece = np.take(a.data, range(lo, hi), axis=axis)

        def grad_fn(g, lo=lo, hi=hi):
            ga = np.zeros_like(a.data)
            sl = [slice(None)] * a.ndim
            sl[axis] = slice(lo, hi)
            ga[tuple(sl)] = g
            return (ga,)

        out.append(_record("split", piece, (a,), grad_fn))
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (numerically stable)."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (p * (g - (p * g).sum(axis=-1, keepdims=True)),)

    return _record("softmax", p, (a,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match last dim of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def grad_fn(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _record("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), grad_fn)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def grad_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (phi + x * pdf),)

    return _record("gelu", x * phi, (a,), grad_fn)


def mean(a: Tensor) -> Tensor:
    n = a.size

    def grad_fn(g):
        return (np.full(a.shape, float(g) / n),)

    return _record("mean", np.asarray(a.data.mean()), (a,), grad_fn)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size

    def grad_fn(g):
        gd = (2.0 * float(g) / n) * diff
        return gd, -gd

    return _record("mse", np.asarray((diff * diff).mean()), (pred, target), grad_fn)


def cross_entropy_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits).

    logits: (..., V); targets: integer array of shape logits.shape[:-1].
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeMismatchError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}"
        )
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy: target index out of range [0, {v})")
    flat = logits.data.reshape(-1, v)
    tflat = targets.reshape(-1)
    n = tflat.size
    shifted = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    nll = logz - shifted[np.arange(n), tflat]

    def grad_fn(g):
        p = np.exp(shifted - logz[:, None])
        p[np.arange(n), tflat] -= 1.0
        return ((float(g) / n) * p.reshape(logits.shape),)

    return _record("cross_entropy", np.asarray(nll.mean()), (logits,), grad_fn)


# ---------------------------------------------------------------------------
# backward and the finite-difference oracle
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse pass from a scalar loss; returns {leaf tensor: gradient}.

    Visits each node exactly once in reverse topological order, then consumes
    the graph (a second backward through the same nodes raises).
    """
    if loss.shape != ():
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward: graph already consumed")
    if loss._grad_fn is None:
        raise GraphError("backward: loss has no graph (no recorded ops)")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=DTYPE)
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        if node._grad_fn is None:
            if node.requires_grad:
                leaves[node] = node.grad
            continue
        grads = node._grad_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if not np.isfinite(g.sum()):
                raise NonFiniteError(f"backward of op '{node._op}' produced non-finite gradient")
            if parent.grad is None:
                parent.grad = g if g.shape == parent.shape else np.broadcast_to(g, parent.shape).copy()
            else:
                parent.grad = parent.grad + g
        # consume: free the op record and the intermediate grad buffer
        node._grad_fn = None
        node._parents = ()
        node._consumed = True
        if node is not loss:
            node.grad = None
    return leaves


def grad_check(
    f: Callable[..., Tensor],
    points: Tensor | Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients of f and central differences.

    Relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
    f must be deterministic and return a scalar Tensor.
    """
    if not (0.0 < step <= 1e-2):
        raise ValueError(f"grad_check: step must be in (0, 1e-2], got {step}")
    pts = [points] if isinstance(points, Tensor) else list(points)
    for p in pts:
        p.requires_grad = True
        p.grad = None

    out = f(*pts)
    grads = backward(out)
    analytic = [np.zeros(p.shape) if p not in grads else np.array(grads[p]) for p in pts]

    worst = 0.0
    with no_grad():
        for p, ga in zip(pts, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f(*pts).item()
                flat[i] = orig - step
                fm = f(*pts).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError("grad_check: f non-finite at perturbed point")
                numeric = (fp - fm) / (2.0 * step)
                rel = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, rel)
    return worst
