"""Synthetic datasets: sequences of continuous tokens drawn from well-separated
mixture modes, with known mode and class labels.

Centers are placed on a jittered lattice whose spacing guarantees the
separation constraint constructively (minimum pairwise distance well above
10 sigma even at the smallest allowed separation), so nearest-center
classification of truncated samples is exact by construction.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import Rng

MAGIC = b"DSCN"
FORMAT_VERSION = 1

# tokens are redrawn until within this many sigma of their mode center
TRUNCATE_SIGMA = 5.0


class DatasetFormatError(ValueError):
    """Malformed dataset file."""


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class MixtureSpec:
    n_modes: int
    token_dim: int
    seq_len: int
    separation: float
    sigma: float
    mode_shape: str = "gaussian"
    n_classes: int = 1
    class_to_modes: dict[int, tuple[int, ...]] = field(default_factory=dict)
    centers: np.ndarray | None = None  # (n_modes, token_dim), set at generation

    def __post_init__(self):
        if self.n_modes < 1 or self.token_dim < 1 or self.seq_len < 1 or self.n_classes < 1:
            raise ValueError("n_modes, token_dim, seq_len, n_classes must be positive")
        if self.separation < 6.0:
            raise ValueError(f"separation must be >= 6 (got {self.separation}); disjointness is enforced")
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.mode_shape not in ("gaussian", "annulus"):
            raise ValueError(f"mode_shape must be 'gaussian' or 'annulus', got {self.mode_shape!r}")
        if not self.class_to_modes:
            object.__setattr__(self, "class_to_modes", _even_partition(self.n_modes, self.n_classes))
        self._validate_classes()

    def _validate_classes(self):
        seen: list[int] = []
        for c in range(self.n_classes):
            if c not in self.class_to_modes:
                raise ValueError(f"class {c} missing from class_to_modes")
            seen.extend(self.class_to_modes[c])
        if sorted(seen) != list(range(self.n_modes)):
            raise ValueError("every mode must belong to exactly one class")


def _even_partition(n_modes: int, n_classes: int) -> dict[int, tuple[int, ...]]:
    if n_modes < n_classes:
        raise ValueError(f"cannot partition {n_modes} modes into {n_classes} classes")
    out: dict[int, tuple[int, ...]] = {c: () for c in range(n_classes)}
    for m in range(n_modes):
        c = m % n_classes
        out[c] = out[c] + (m,)
    return out


def default_spec() -> MixtureSpec:
    """The configuration used by the acceptance runs: 8 modes in 2-D, 4 classes."""
    return MixtureSpec(
        n_modes=8, token_dim=2, seq_len=16, separation=10.0, sigma=1.0,
        mode_shape="gaussian", n_classes=4,
    )


@dataclass(frozen=True)
class Sample:
    tokens: np.ndarray  # (seq_len, token_dim)
    mode_ids: np.ndarray  # (seq_len,) int
    class_label: int


@dataclass
class Dataset:
    spec: MixtureSpec
    tokens: np.ndarray  # (n, seq_len, token_dim) float64
    mode_ids: np.ndarray  # (n, seq_len) int32
    class_labels: np.ndarray  # (n,) int32

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.tokens[i], self.mode_ids[i], int(self.class_labels[i]))

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.spec, self.tokens[idx].copy(), self.mode_ids[idx].copy(),
                       self.class_labels[idx].copy())

    def pooled_tokens(self) -> np.ndarray:
        """All tokens as one (n * seq_len, token_dim) point set."""
        return self.tokens.reshape(-1, self.spec.token_dim)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _place_centers(spec: MixtureSpec, rng: Rng) -> np.ndarray:
    """Jittered lattice placement; retries (then fails) if separation is violated."""
    k, d, s, sig = spec.n_modes, spec.token_dim, spec.separation, spec.sigma
    spacing = (1.5 * s + 6.0) * sig
    jitter = 0.5 * sig
    side = int(np.ceil(k ** (1.0 / d)))
    cells = np.stack(np.meshgrid(*([np.arange(side)] * d), indexing="ij"), axis=-1).reshape(-1, d)
    for _ in range(32):
        order = rng.permutation(len(cells))[:k]
        centers = (cells[order] - (side - 1) / 2.0) * spacing
        centers = centers + rng.uniform((k, d), -jitter, jitter)
        if k == 1 or _min_pairwise_distance(centers) >= s * sig:
            return centers
    raise RuntimeError(f"center placement failed separation {s}*sigma after 32 retries")


def _min_pairwise_distance(x: np.ndarray) -> float:
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    return float(dist[~np.eye(len(x), dtype=bool)].min())


def _draw_offsets(n: int, spec: MixtureSpec, rng: Rng) -> np.ndarray:
    """n token offsets around a center, redrawn until within TRUNCATE_SIGMA."""
    d, sig = spec.token_dim, spec.sigma
    if spec.mode_shape == "gaussian":
        off = rng.normal((n, d)) * sig
    else:  # annulus: ring at 2 sigma with radial noise
        direction = rng.normal((n, d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = (2.0 + 0.25 * rng.normal((n,))) * sig
        off = direction * radius[:, None]
    bad = np.linalg.norm(off, axis=1) > TRUNCATE_SIGMA * sig
    while bad.any():
        off[bad] = _draw_offsets(int(bad.sum()), spec, rng)
        bad = np.linalg.norm(off, axis=1) > TRUNCATE_SIGMA * sig
    return off


def generate(spec: MixtureSpec, n: int, seed: int) -> Dataset:
    """Draw n samples: class uniform, then per position a mode from that class."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    root = Rng(seed, "synthdata")
    centers = spec.centers
    if centers is None:
        centers = _place_centers(spec, root.child("centers"))
        spec = replace(spec, centers=centers)

    k, m = spec.n_modes, spec.seq_len
    max_sub = max(len(v) for v in spec.class_to_modes.values())
    subset = np.full((spec.n_classes, max_sub), -1, dtype=np.int64)
    sizes = np.zeros(spec.n_classes, dtype=np.int64)
    for c, modes in spec.class_to_modes.items():
        subset[c, : len(modes)] = modes
        sizes[c] = len(modes)

    draw = root.child("samples")
    classes = draw.integers(0, spec.n_classes, (n,))
    pick = (draw.uniform((n, m)) * sizes[classes][:, None]).astype(np.int64)
    mode_ids = subset[classes[:, None], pick]
    offsets = _draw_offsets(n * m, spec, draw).reshape(n, m, spec.token_dim)
    tokens = centers[mode_ids] + offsets
    return Dataset(spec, tokens, mode_ids.astype(np.int32), classes.astype(np.int32))


def split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint (train, val) partition, stratified by class within +-1 of proportional."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    rng = Rng(seed, "split")
    train_idx: list[np.ndarray] = []
    val_idx: list[np.ndarray] = []
    for c in range(dataset.spec.n_classes):
        idx = np.flatnonzero(dataset.class_labels == c)
        idx = idx[rng.child(c).permutation(len(idx))]
        take = int(round(fraction * len(idx)))
        train_idx.append(idx[:take])
        val_idx.append(idx[take:])
    tr = np.sort(np.concatenate(train_idx))
    va = np.sort(np.concatenate(val_idx))
    if len(tr) == 0 or len(va) == 0:
        raise ValueError(f"fraction {fraction} yields an empty split for n={len(dataset)}")
    return dataset.subset(tr), dataset.subset(va)


# ---------------------------------------------------------------------------
# persistence (DSCN format)
# ---------------------------------------------------------------------------

_SHAPE_CODES = {"gaussian": 0, "annulus": 1}
_SHAPE_NAMES = {v: k for k, v in _SHAPE_CODES.items()}
_HEADER = struct.Struct("<IIIIddBQ")  # n_modes, dim, seq_len, n_classes, sep, sigma, shape, n


def save(dataset: Dataset, path) -> None:
    spec = dataset.spec
    if spec.centers is None:
        raise ValueError("dataset spec carries no centers; save only generated datasets")
    n = len(dataset)
    body = bytearray()
    body += _HEADER.pack(
        spec.n_modes, spec.token_dim, spec.seq_len, spec.n_classes,
        spec.separation, spec.sigma, _SHAPE_CODES[spec.mode_shape], n,
    )
    for c in range(spec.n_classes):
        modes = spec.class_to_modes[c]
        body += struct.pack("<I", len(modes))
        body += struct.pack(f"<{len(modes)}I", *modes)
    body += np.ascontiguousarray(spec.centers, dtype="<f8").tobytes()
    body += np.ascontiguousarray(dataset.tokens, dtype="<f8").tobytes()
    body += np.ascontiguousarray(dataset.mode_ids, dtype="<i4").tobytes()
    body += np.ascontiguousarray(dataset.class_labels, dtype="<i4").tobytes()
    blob = MAGIC + struct.pack("<H", FORMAT_VERSION) + body + struct.pack("<I", zlib.crc32(body))
    with open(path, "wb") as f:
        f.write(blob)


def load(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 2 + 4:
        raise TruncatedFileError(f"{path}: file shorter than fixed framing")
    if blob[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body = blob[6:-4]
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)

    off = 0
    try:
        k, d, m, c, sep, sigma, shape_code, n = _HEADER.unpack_from(body, off)
        off += _HEADER.size
        class_to_modes: dict[int, tuple[int, ...]] = {}
        for ci in range(c):
            (cnt,) = struct.unpack_from("<I", body, off)
            off += 4
            class_to_modes[ci] = struct.unpack_from(f"<{cnt}I", body, off)
            off += 4 * cnt
    except struct.error:
        raise TruncatedFileError(f"{path}: header ends early") from None

    expected = off + 8 * k * d + 8 * n * m * d + 4 * n * m + 4 * n
    if len(body) < expected:
        raise TruncatedFileError(f"{path}: payload {len(body)}B, expected {expected}B")
    if len(body) > expected:
        raise DatasetFormatError(f"{path}: {len(body) - expected} trailing bytes")
    if zlib.crc32(body) != crc_stored:
        raise ChecksumError(f"{path}: CRC-32 mismatch")

    def take(count, dtype, shape):
        nonlocal off
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=off).reshape(shape)
        off += count * np.dtype(dtype).itemsize
        return arr

    centers = take(k * d, "<f8", (k, d)).astype(np.float64)
    tokens = take(n * m * d, "<f8", (n, m, d)).astype(np.float64)
    mode_ids = take(n * m, "<i4", (n, m)).astype(np.int32)
    labels = take(n, "<i4", (n,)).astype(np.int32)
    spec = MixtureSpec(
        n_modes=k, token_dim=d, seq_len=m, separation=sep, sigma=sigma,
        mode_shape=_SHAPE_NAMES[shape_code], n_classes=c,
        class_to_modes=class_to_modes, centers=centers,
    )
    return Dataset(spec, tokens, mode_ids, labels)
