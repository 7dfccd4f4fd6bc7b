"""Finite-difference verification of every differentiable op and of the three
end-to-end training losses at small random configurations.
"""

from __future__ import annotations

import numpy as np

from . import backbone as bb
from . import diffhead as dh
from . import numerics as nm
from . import prior as pr
from .numerics import Tensor, grad_check
from .rng import Rng


def _t(rng: Rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(shape) * scale, requires_grad=True)


def _op_cases(seed: int):
    r = Rng(seed, "gradcheck")
    # fixed weightings so reductions exercise non-uniform output gradients
    w = Rng(seed, "gradcheck_weights")

    def weighted(out_shape):
        coef = Tensor(w.normal(out_shape))
        return lambda out: nm.mean(nm.mul(out, coef))

    yield "add", (lambda a, b: nm.mean(nm.add(a, b)), [_t(r, (3, 4)), _t(r, (4,))])
    yield "mul", (lambda a, b: nm.mean(nm.mul(a, b)), [_t(r, (3, 4)), _t(r, (3, 4))])
    yield "scale", (lambda a: nm.mean(nm.scale(a, -2.5)), [_t(r, (5,))])
    yield "matmul", (lambda a, b: nm.mean(nm.matmul(a, b)), [_t(r, (3, 4)), _t(r, (4, 2))])
    yield "matmul_batched", (
        lambda a, b: nm.mean(nm.matmul(a, b)),
        [_t(r, (2, 3, 4)), _t(r, (2, 4, 3))],
    )
    wt = weighted((3, 2, 4))
    yield "transpose", (lambda a: wt(nm.transpose(a, (1, 0, 2))), [_t(r, (2, 3, 4))])
    wr = weighted((6, 2))
    yield "reshape", (lambda a: wr(nm.reshape(a, (6, 2))), [_t(r, (3, 4))])
    yield "gather_rows", (
        lambda a: nm.mean(nm.gather_rows(a, np.array([0, 2, 2, 1]))),
        [_t(r, (4, 3))],
    )
    yield "embedding", (
        lambda t: nm.mean(nm.embedding(t, np.array([[0, 1], [3, 1]]))),
        [_t(r, (4, 3))],
    )
    wc = weighted((2, 5))
    yield "concat", (
        lambda a, b: wc(nm.concat([a, b], axis=1)),
        [_t(r, (2, 3)), _t(r, (2, 2))],
    )
    yield "split", (
        lambda a: nm.mean(nm.mul(*nm.split(a, [2, 2], axis=1))),
        [_t(r, (3, 4))],
    )
    ws = weighted((3, 5))
    yield "softmax", (lambda a: ws(nm.softmax(a)), [_t(r, (3, 5))])
    wl = weighted((4, 6))
    yield "layer_norm", (
        lambda x, g, b: wl(nm.layer_norm(x, g, b)),
        [_t(r, (4, 6)), _t(r, (6,), 0.3), _t(r, (6,), 0.3)],
    )
    yield "gelu", (lambda a: nm.mean(nm.gelu(a)), [_t(r, (4, 5))])
    yield "mean", (lambda a: nm.mean(a), [_t(r, (3, 3))])
    yield "mse", (lambda a, b: nm.mse(a, b), [_t(r, (3, 4)), _t(r, (3, 4))])
    yield "cross_entropy", (
        lambda a: nm.cross_entropy_logits(a, np.array([1, 0, 3])),
        [_t(r, (3, 4))],
    )


def _randomize(params, rng: Rng, scale: float = 0.3) -> None:
    # O(1) random point: tiny-variance layer-norm inputs would blow up the
    # curvature and with it the finite-difference truncation error
    for p in params:
        p.data = rng.normal(p.shape) * scale


def _prior_case(seed: int):
    cfg = pr.PriorConfig(vocab=4, seq_len=4, n_classes=2, layers=1, width=8, heads=2,
                         cfg_null_prob=0.0)
    model = pr.PriorModel(cfg, Rng(seed, "gc_prior"))
    r = Rng(seed, "gc_prior_data")
    tokens = np.asarray(r.integers(0, 4, (3, 4)))
    classes = np.asarray(r.integers(0, 2, (3,)))
    params = list(model.params().values())
    _randomize(params, r.child("point"))

    def f(*_):
        return pr.prior_loss(model, tokens, classes)

    return f, params


def _discon_case(seed: int):
    cfg = bb.BackboneConfig(seq_len=4, token_dim=2, vocab=4, layers=1, width=8, heads=2, z_dim=8)
    hcfg = dh.HeadConfig(token_dim=2, z_dim=8, width=8, blocks=1, time_dim=4)
    model = bb.BackboneModel(cfg, Rng(seed, "gc_bb"))
    head = dh.DiffusionHead(hcfg, Rng(seed, "gc_head"))
    schedule = dh.NoiseSchedule.cosine(50)
    r = Rng(seed, "gc_bb_data")
    cont = np.asarray(r.normal((2, 4, 2)))
    disc = np.asarray(r.integers(0, 4, (2, 4)))
    mask = np.zeros((2, 4), dtype=bool)
    mask[:, :2] = True
    params = list(model.params().values()) + list(head.params().values())
    _randomize(params, r.child("point"))

    def f(*_):
        z = model.hidden(cont, disc, mask)
        z_sel = nm.gather_rows(nm.reshape(z, (8, 8)), np.flatnonzero(mask.reshape(-1)))
        x0 = cont.reshape(8, 2)[mask.reshape(-1)]
        return dh.diffusion_loss(head, z_sel, x0, schedule, Rng(seed, "gc_noise"))

    return f, params


def _head_case(seed: int):
    hcfg = dh.HeadConfig(token_dim=2, z_dim=4, width=8, blocks=1, time_dim=4)
    head = dh.DiffusionHead(hcfg, Rng(seed, "gc_head_solo"))
    schedule = dh.NoiseSchedule.cosine(50)
    r = Rng(seed, "gc_head_data")
    z = np.asarray(r.normal((5, 4)))
    x0 = np.asarray(r.normal((5, 2)))
    params = list(head.params().values())
    _randomize(params, r.child("point"))

    def f(*_):
        return dh.diffusion_loss(head, z, x0, schedule, Rng(seed, "gc_noise2"))

    return f, params


def run_all(seed: int = 0, step: float = 1e-5) -> list[tuple[str, float]]:
    """(name, max relative error) per op and per end-to-end loss."""
    rows: list[tuple[str, float]] = []
    for name, (f, points) in _op_cases(seed):
        rows.append((name, grad_check(f, points, step)))
    for name, maker in (("prior_loss", _prior_case), ("discon_loss", _discon_case),
                        ("diffusion_head_loss", _head_case)):
        f, params = maker(seed)
        rows.append((name, grad_check(f, params, step)))
    return rows
