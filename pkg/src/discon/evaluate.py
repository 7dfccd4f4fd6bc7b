"""Distribution-level evaluation: Fréchet distance between Gaussian moment
fits (the rFID/gFID stand-in on raw tokens), mode coverage / purity / OOD
rates against the known mixture, and a brute-force marginalization check on
enumerable instances.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .synthdata import MixtureSpec

COV_REG = 1e-6  # ridge added to covariances before the matrix square root

PURITY_SIGMA = 3.0  # inside this radius of some center counts as in-mode
OOD_SIGMA = 6.0  # farther than this from every center counts as an artifact


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray  # (d,)
    cov: np.ndarray  # (d, d), symmetric PSD up to fp noise

    @classmethod
    def fit(cls, points: np.ndarray) -> "GaussianMoments":
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2:
            raise ValueError(f"points must be (n, d), got {points.shape}")
        mu = points.mean(axis=0)
        centered = points - mu
        cov = centered.T @ centered / len(points)
        return cls(mu, 0.5 * (cov + cov.T))


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}) over moment fits.

    The cross term uses the symmetrized product sqrt(S_a) S_b sqrt(S_a), whose
    eigenvalues (clamped at zero) give Tr((S_a S_b)^{1/2}). Both covariances
    are regularized by COV_REG * I before the root.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    d = a.shape[-1]
    if b.shape[-1] != d:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if len(a) < d + 1 or len(b) < d + 1:
        raise ValueError(f"need at least d+1={d + 1} points per set, got {len(a)} and {len(b)}")
    ma, mb = GaussianMoments.fit(a), GaussianMoments.fit(b)
    return frechet_from_moments(ma, mb)


def frechet_from_moments(ma: GaussianMoments, mb: GaussianMoments) -> float:
    d = ma.mean.shape[0]
    sa = ma.cov + COV_REG * np.eye(d)
    sb = mb.cov + COV_REG * np.eye(d)

    wa, va = np.linalg.eigh(sa)
    root_a = (va * np.sqrt(np.clip(wa, 0.0, None))) @ va.T
    inner = root_a @ sb @ root_a
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    trace_cross = 2.0 * np.sqrt(np.clip(w, 0.0, None)).sum()

    diff = ma.mean - mb.mean
    fd = float(diff @ diff + np.trace(sa) + np.trace(sb) - trace_cross)
    return max(fd, 0.0)


@dataclass(frozen=True)
class ModeReport:
    hit_counts: np.ndarray  # (n_modes,) tokens nearest to each center
    coverage: float  # fraction of modes with at least one hit
    purity: float  # fraction of tokens within PURITY_SIGMA of some center
    ood_rate: float  # fraction farther than OOD_SIGMA from every center

    def to_dict(self) -> dict:
        return {
            "hit_counts": self.hit_counts.tolist(),
            "coverage": self.coverage,
            "purity": self.purity,
            "ood_rate": self.ood_rate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def mode_report(tokens: np.ndarray, spec: MixtureSpec) -> ModeReport:
    """Nearest-center accounting of a token set against the true mixture."""
    if spec.centers is None:
        raise ValueError("spec carries no centers")
    tokens = np.asarray(tokens, dtype=np.float64).reshape(-1, spec.token_dim)
    diff = tokens[:, None, :] - spec.centers[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    nearest = dist.argmin(axis=1)
    nearest_dist = dist[np.arange(len(tokens)), nearest]
    hits = np.bincount(nearest, minlength=spec.n_modes)
    n = max(len(tokens), 1)
    return ModeReport(
        hit_counts=hits,
        coverage=float((hits > 0).mean()),
        purity=float((nearest_dist <= PURITY_SIGMA * spec.sigma).sum() / n),
        ood_rate=float((dist.min(axis=1) > OOD_SIGMA * spec.sigma).sum() / n),
    )


def marginal_oracle(
    prior_ckpt,
    discon_ckpt,
    tiny_spec: MixtureSpec,
    n_samples: int = 10_000,
    seed: int = 0,
    temperature: float = 1.0,
) -> float:
    """Brute-force check that the two-stage sampler realizes the mixture
    sum_{x_d} p(x_c | x_d) p(x_d).

    Enumerates every discrete sequence of the tiny instance, weighs exact
    chain-rule prior probabilities against conditioned sample sets, and
    returns the Fréchet distance between that explicit mixture and
    unconditioned end-to-end samples.
    """
    from . import pipeline  # local import; pipeline depends on this module

    bundle = pipeline.load_bundle(prior_ckpt, discon_ckpt)
    v = bundle.prior.config.vocab
    m = bundle.prior.config.seq_len
    if v > 4 or m > 2:
        raise ValueError(f"instance V={v}, M={m} too large to enumerate (need V<=4, M<=2)")
    if tiny_spec.seq_len != m:
        raise ValueError(f"spec seq_len {tiny_spec.seq_len} != model seq_len {m}")

    sequences = np.array(list(itertools.product(range(v), repeat=m)), dtype=np.int64)
    log_p = bundle.prior.sequence_log_prob(sequences, class_id=0)
    p = np.exp(log_p - log_p.max())
    p /= p.sum()

    # integer allocation of the mixture budget by largest remainder
    raw = p * n_samples
    counts = np.floor(raw).astype(np.int64)
    short = n_samples - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1

    pieces = []
    for i, seq in enumerate(sequences):
        if counts[i] == 0:
            continue
        req = pipeline.SampleRequest(
            class_label=0, n_images=int(counts[i]), steps=m,
            temperature=temperature, cfg_scale=1.0, seed=seed + 1 + i,
            condition_source="ground_truth",
        )
        out = pipeline.generate_from_bundle(bundle, req, ground_truth_tokens=seq)
        pieces.append(out.tokens.reshape(-1, tiny_spec.token_dim))
    mixture = np.concatenate(pieces, axis=0)

    req = pipeline.SampleRequest(
        class_label=0, n_images=n_samples, steps=m, temperature=temperature,
        cfg_scale=1.0, seed=seed, condition_source="prior",
    )
    end_to_end = pipeline.generate_from_bundle(bundle, req).tokens.reshape(-1, tiny_spec.token_dim)
    return frechet_distance(mixture, end_to_end)
