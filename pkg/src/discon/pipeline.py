"""Training loops with EMA and resume-exact checkpointing, plus the two-stage
sampler: discrete prior -> masked continuous decoding -> affine decode.

All stochastic choices inside training derive from (seed, purpose, step), so
a run can be checkpointed at any epoch boundary and resumed to a bitwise
identical trajectory.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import backbone as bb
from . import diffhead as dh
from . import evaluate
from . import nn
from . import numerics as nm
from . import prior as pr
from . import tokenizers as tk
from .rng import Rng
from .synthdata import Dataset

CKPT_MAGIC = b"DSCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or mismatched checkpoint file."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class TrainingAborted(RuntimeError):
    """Non-finite loss; carries the path of the last good checkpoint, if any."""

    def __init__(self, message: str, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 3e-3
    warmup_steps: int = 20
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.grad_clip <= 0.0:
            raise ValueError("grad_clip must be positive")


@dataclass(frozen=True)
class SampleRequest:
    class_label: int | None  # None: draw classes uniformly per image
    n_images: int
    steps: int  # AR steps S for the masked decode
    temperature: float = 1.0
    cfg_scale: float = 1.0
    seed: int = 0
    condition_source: str = "prior"  # or "ground_truth"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.condition_source not in ("prior", "ground_truth"):
            raise ValueError(f"condition_source must be 'prior' or 'ground_truth', got {self.condition_source!r}")


# ---------------------------------------------------------------------------
# checkpoint serialization (DSCK format)
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    kind: str
    meta: dict
    tensors: dict[str, np.ndarray]
    step: int
    rng_key: tuple[int, ...]
    file_hash: str = ""


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, kind: str, meta: dict, tensors: dict[str, np.ndarray],
                    step: int, rng_key: tuple[int, ...]) -> str:
    """Write a DSCK file; returns its sha256 hex digest."""
    index = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = "f8" if arr.dtype.kind == "f" else "i8"
        arr = arr.astype("<f8" if code == "f8" else "<i8")
        index.append([name, code, list(arr.shape)])
        payload += arr.tobytes()
    header = dict(meta)
    header.update({"index": index, "step": int(step), "rng_key": list(rng_key)})
    hjson = _canonical_json(header)
    kind_b = kind.encode()
    body = struct.pack("<H", len(kind_b)) + kind_b + struct.pack("<Q", len(hjson)) + hjson + payload
    blob = CKPT_MAGIC + struct.pack("<H", CKPT_VERSION) + body + struct.pack("<I", zlib.crc32(body))
    with open(path, "wb") as f:
        f.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise CheckpointTruncatedError(f"{path}: shorter than fixed framing")
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {CKPT_VERSION}")
    body = blob[6:-4]
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) != crc_stored:
        raise CheckpointChecksumError(f"{path}: CRC-32 mismatch")
    try:
        off = 0
        (klen,) = struct.unpack_from("<H", body, off)
        off += 2
        kind = body[off : off + klen].decode()
        off += klen
        (hlen,) = struct.unpack_from("<Q", body, off)
        off += 8
        header = json.loads(body[off : off + hlen])
        off += hlen
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointTruncatedError(f"{path}: header ends early") from None

    tensors: dict[str, np.ndarray] = {}
    for name, code, shape in header.pop("index"):
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(body):
            raise CheckpointTruncatedError(f"{path}: tensor '{name}' ends early")
        dtype = "<f8" if code == "f8" else "<i8"
        tensors[name] = np.frombuffer(body, dtype=dtype, count=count, offset=off).reshape(shape).astype(
            np.float64 if code == "f8" else np.int64
        )
        off += nbytes
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} trailing bytes")
    step = int(header.pop("step"))
    rng_key = tuple(header.pop("rng_key"))
    return Checkpoint(kind=kind, meta=header, tensors=tensors, step=step, rng_key=rng_key,
                      file_hash=hashlib.sha256(blob).hexdigest())


def file_sha256(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _pack_states(model_state: dict, ema_state: dict, opt: nn.AdamW) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for k, v in model_state.items():
        out[f"param.{k}"] = v
    for k, v in ema_state.items():
        out[f"ema.{k}"] = v
    ostate = opt.state()
    out["opt.t"] = np.array([ostate["t"]], dtype=np.int64)
    for k, v in ostate["m"].items():
        out[f"opt.m.{k}"] = v
    for k, v in ostate["v"].items():
        out[f"opt.v.{k}"] = v
    return out


def _unpack_states(tensors: dict[str, np.ndarray]) -> tuple[dict, dict, dict]:
    model, ema, opt = {}, {}, {"t": 0, "m": {}, "v": {}}
    for name, arr in tensors.items():
        if name.startswith("param."):
            model[name[6:]] = arr
        elif name.startswith("ema."):
            ema[name[4:]] = arr
        elif name == "opt.t":
            opt["t"] = int(arr[0])
        elif name.startswith("opt.m."):
            opt["m"][name[6:]] = arr
        elif name.startswith("opt.v."):
            opt["v"][name[6:]] = arr
    return model, ema, opt


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    metrics: list[dict]
    step: int
    checkpoint_path: str | None
    checkpoint_hash: str | None


def _lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    return cfg.learning_rate


def _epoch_batches(n: int, batch_size: int, epoch: int, seed: int):
    order = Rng(seed, "order", epoch).permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def _record(metrics: list[dict], step: int, split: str, metric: str, value: float) -> None:
    metrics.append({"step": step, "split": split, "metric": metric, "value": float(value)})


def train_prior(
    train_ds: Dataset,
    val_ds: Dataset,
    model_cfg: pr.PriorConfig,
    train_cfg: TrainConfig,
    codebook: tk.Codebook,
    ckpt_path=None,
    resume_from: Checkpoint | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Cross-entropy training of the discrete prior on quantized tokens."""
    disc_train = tk.encode_discrete(train_ds.tokens, codebook)
    disc_val = tk.encode_discrete(val_ds.tokens, codebook)
    seed = train_cfg.seed
    model = pr.PriorModel(model_cfg, Rng(seed, "prior_init"))
    params = model.params()
    opt = nn.AdamW(params, lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)
    ema = nn.Ema(params, train_cfg.ema_decay)

    start_epoch = 0
    n = len(train_ds)
    steps_per_epoch = int(np.ceil(n / train_cfg.batch_size))
    if resume_from is not None:
        if resume_from.kind != "prior":
            raise CheckpointError(f"expected kind 'prior', got '{resume_from.kind}'")
        m_state, e_state, o_state = _unpack_states(resume_from.tensors)
        model.load_state(m_state)
        ema.load_state(e_state)
        opt.load_state(o_state)
        start_epoch = resume_from.step // steps_per_epoch

    meta = {"model_config": asdict(model_cfg), "train_config": asdict(train_cfg)}
    metrics: list[dict] = []
    step = start_epoch * steps_per_epoch
    last_saved = None

    def save(tag_step: int) -> str | None:
        if ckpt_path is None:
            return None
        return save_checkpoint(ckpt_path, "prior", meta,
                               _pack_states(model.state(), ema.state(), opt), tag_step, (seed,))

    for epoch in range(start_epoch, train_cfg.epochs):
        for idx in _epoch_batches(n, train_cfg.batch_size, epoch, seed):
            if max_steps is not None and step >= max_steps:
                break
            opt.zero_grad()
            try:
                loss = pr.prior_loss(model, disc_train[idx], train_ds.class_labels[idx],
                                     rng=Rng(seed, "cfgdrop", step))
                nm.backward(loss)
            except nm.NonFiniteError as exc:
                raise TrainingAborted(f"non-finite loss at step {step}: {exc}", last_saved) from exc
            nn.clip_grad_norm(params, train_cfg.grad_clip)
            opt.step(lr=_lr_at(step, train_cfg))
            ema.update(params)
            _record(metrics, step, "train", "loss", loss.item())
            step += 1
        try:
            with nm.no_grad():
                val_loss = pr.prior_loss(model, disc_val, val_ds.class_labels).item()
        except nm.NonFiniteError as exc:
            raise TrainingAborted(f"non-finite val loss at step {step}: {exc}", last_saved) from exc
        _record(metrics, step, "val", "loss", val_loss)
        last_saved = save(step)
        if max_steps is not None and step >= max_steps:
            break

    h = last_saved if last_saved is not None else save(step)
    return TrainResult(metrics, step, None if ckpt_path is None else str(ckpt_path), h)


def _sample_batch_masks(batch: int, seq_len: int, ratio_range, rng: Rng) -> np.ndarray:
    """(B, M) boolean masks; per row, ceil(r*M) random positions with r ~ U[lo, hi]."""
    lo, hi = ratio_range
    counts = np.ceil(rng.uniform((batch,), lo, hi) * seq_len).astype(np.int64)
    order = np.argsort(rng.uniform((batch, seq_len)), axis=1)
    mask = np.zeros((batch, seq_len), dtype=bool)
    rows = np.repeat(np.arange(batch), counts)
    cols = np.concatenate([order[i, : counts[i]] for i in range(batch)])
    mask[rows, cols] = True
    return mask


def _discon_step_loss(model, head, cont_norm, disc, mask, schedule, rng) -> nm.Tensor:
    """Diffusion loss over the masked positions of one batch."""
    z_grid = model.hidden(cont_norm, disc, mask)
    b, m, zd = z_grid.shape
    flat_idx = np.flatnonzero(mask.reshape(-1))
    z_sel = nm.gather_rows(nm.reshape(z_grid, (b * m, zd)), flat_idx)
    x0 = cont_norm.reshape(b * m, -1)[flat_idx]
    return dh.diffusion_loss(head, z_sel, x0, schedule, rng)


def train_discon(
    train_ds: Dataset,
    val_ds: Dataset,
    backbone_cfg: bb.BackboneConfig,
    head_cfg: dh.HeadConfig,
    schedule: dh.NoiseSchedule,
    codebook: tk.Codebook,
    normalizer: tk.Normalizer,
    train_cfg: TrainConfig,
    ckpt_path=None,
    resume_from: Checkpoint | None = None,
) -> TrainResult:
    """Joint training of the masked backbone and diffusion head."""
    seed = train_cfg.seed
    model = bb.BackboneModel(backbone_cfg, Rng(seed, "backbone_init"))
    head = dh.DiffusionHead(head_cfg, Rng(seed, "head_init"))
    params = {f"backbone.{k}": t for k, t in model.params().items()}
    params.update({f"head.{k}": t for k, t in head.params().items()})
    opt = nn.AdamW(params, lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)
    ema = nn.Ema(params, train_cfg.ema_decay)

    cont_train = tk.encode_continuous(train_ds.tokens, normalizer)
    cont_val = tk.encode_continuous(val_ds.tokens, normalizer)
    conditioned = backbone_cfg.conditioning == "prefix"
    disc_train = tk.encode_discrete(train_ds.tokens, codebook) if conditioned else None
    disc_val = tk.encode_discrete(val_ds.tokens, codebook) if conditioned else None

    start_epoch = 0
    n = len(train_ds)
    steps_per_epoch = int(np.ceil(n / train_cfg.batch_size))
    if resume_from is not None:
        if resume_from.kind != "discon":
            raise CheckpointError(f"expected kind 'discon', got '{resume_from.kind}'")
        m_state, e_state, o_state = _unpack_states(resume_from.tensors)
        split_m = {k[9:]: v for k, v in m_state.items() if k.startswith("backbone.")}
        split_h = {k[5:]: v for k, v in m_state.items() if k.startswith("head.")}
        model.load_state(split_m)
        head.load_state(split_h)
        ema.load_state(e_state)
        opt.load_state(o_state)
        start_epoch = resume_from.step // steps_per_epoch

    meta = {
        "backbone_config": asdict(backbone_cfg),
        "head_config": asdict(head_cfg),
        "train_config": asdict(train_cfg),
        "schedule_steps": schedule.steps,
    }
    metrics: list[dict] = []
    step = start_epoch * steps_per_epoch
    last_saved = None

    def model_state() -> dict[str, np.ndarray]:
        out = {f"backbone.{k}": v for k, v in model.state().items()}
        out.update({f"head.{k}": v for k, v in head.state().items()})
        return out

    def save(tag_step: int) -> str | None:
        if ckpt_path is None:
            return None
        tensors = _pack_states(model_state(), ema.state(), opt)
        tensors["tokenizer.codebook"] = codebook.vectors
        tensors["tokenizer.mean"] = normalizer.mean
        tensors["tokenizer.scale"] = normalizer.scale
        tensors["schedule.betas"] = schedule.betas
        return save_checkpoint(ckpt_path, "discon", meta, tensors, tag_step, (seed,))

    m = backbone_cfg.seq_len
    val_mask = _sample_batch_masks(len(val_ds), m, backbone_cfg.mask_ratio_range, Rng(seed, "valmask"))
    for epoch in range(start_epoch, train_cfg.epochs):
        for idx in _epoch_batches(n, train_cfg.batch_size, epoch, seed):
            opt.zero_grad()
            mask = _sample_batch_masks(len(idx), m, backbone_cfg.mask_ratio_range,
                                       Rng(seed, "mask", step))
            try:
                loss = _discon_step_loss(
                    model, head, cont_train[idx],
                    None if disc_train is None else disc_train[idx],
                    mask, schedule, Rng(seed, "diff", step),
                )
                nm.backward(loss)
            except nm.NonFiniteError as exc:
                raise TrainingAborted(f"non-finite loss at step {step}: {exc}", last_saved) from exc
            nn.clip_grad_norm(params, train_cfg.grad_clip)
            opt.step(lr=_lr_at(step, train_cfg))
            ema.update(params)
            _record(metrics, step, "train", "loss", loss.item())
            step += 1
        try:
            with nm.no_grad():
                val_loss = _discon_step_loss(model, head, cont_val, disc_val, val_mask,
                                             schedule, Rng(seed, "valdiff")).item()
        except nm.NonFiniteError as exc:
            raise TrainingAborted(f"non-finite val loss at step {step}: {exc}", last_saved) from exc
        _record(metrics, step, "val", "loss", val_loss)
        last_saved = save(step)

    h = last_saved if last_saved is not None else save(step)
    return TrainResult(metrics, step, None if ckpt_path is None else str(ckpt_path), h)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def reveal_schedule(seq_len: int, steps: int) -> np.ndarray:
    """Per-step reveal counts: >= 1 each, non-decreasing, summing to seq_len.

    Targets are the increments of ceil(M * (1 - cos(pi * s / (2 S)))); a
    backwards pass clips each count into its feasible band so the three
    invariants hold for every (M, S) with S <= M.
    """
    if not 1 <= steps <= seq_len:
        raise ValueError(f"steps must be in [1, seq_len={seq_len}], got {steps}")
    cum = np.ceil(seq_len * (1.0 - np.cos(np.pi * np.arange(1, steps + 1) / (2.0 * steps))))
    targets = np.diff(np.concatenate([[0.0], cum])).astype(np.int64)
    counts = np.zeros(steps, dtype=np.int64)
    remaining = seq_len
    upper = seq_len
    for s in range(steps - 1, -1, -1):
        lo = -(-remaining // (s + 1))  # ceil(remaining / steps_left)
        hi = min(remaining - s, upper)
        counts[s] = min(max(targets[s], lo), hi)
        remaining -= counts[s]
        upper = counts[s]
    return counts


@dataclass
class Bundle:
    """Models rebuilt from checkpoints with EMA weights loaded for sampling."""

    prior: pr.PriorModel | None
    backbone: bb.BackboneModel
    head: dh.DiffusionHead
    schedule: dh.NoiseSchedule
    codebook: tk.Codebook
    normalizer: tk.Normalizer
    prior_hash: str | None
    discon_hash: str


def _build_prior(ckpt: Checkpoint) -> pr.PriorModel:
    if ckpt.kind != "prior":
        raise CheckpointError(f"expected kind 'prior', got '{ckpt.kind}'")
    cfg = pr.PriorConfig(**ckpt.meta["model_config"])
    model = pr.PriorModel(cfg, Rng(0, "prior_init"))
    _, ema_state, _ = _unpack_states(ckpt.tensors)
    model.load_state(ema_state)
    return model


def _build_discon(ckpt: Checkpoint) -> tuple[bb.BackboneModel, dh.DiffusionHead, dh.NoiseSchedule, tk.Codebook, tk.Normalizer]:
    if ckpt.kind != "discon":
        raise CheckpointError(f"expected kind 'discon', got '{ckpt.kind}'")
    meta_bb = dict(ckpt.meta["backbone_config"])
    meta_bb["mask_ratio_range"] = tuple(meta_bb["mask_ratio_range"])
    cfg = bb.BackboneConfig(**meta_bb)
    hcfg = dh.HeadConfig(**ckpt.meta["head_config"])
    model = bb.BackboneModel(cfg, Rng(0, "backbone_init"))
    head = dh.DiffusionHead(hcfg, Rng(0, "head_init"))
    _, ema_state, _ = _unpack_states(ckpt.tensors)
    model.load_state({k[9:]: v for k, v in ema_state.items() if k.startswith("backbone.")})
    head.load_state({k[5:]: v for k, v in ema_state.items() if k.startswith("head.")})
    betas = ckpt.tensors["schedule.betas"]
    schedule = dh.NoiseSchedule(betas=betas, alpha_bar=np.cumprod(1.0 - betas))
    codebook = tk.Codebook(ckpt.tensors["tokenizer.codebook"], inertia=0.0, iterations=0)
    normalizer = tk.Normalizer(ckpt.tensors["tokenizer.mean"], ckpt.tensors["tokenizer.scale"])
    return model, head, schedule, codebook, normalizer


def load_bundle(prior_path, discon_path) -> Bundle:
    prior_ckpt = None if prior_path is None else load_checkpoint(prior_path)
    discon_ckpt = load_checkpoint(discon_path)
    model, head, schedule, codebook, normalizer = _build_discon(discon_ckpt)
    prior_model = None if prior_ckpt is None else _build_prior(prior_ckpt)
    return Bundle(
        prior=prior_model, backbone=model, head=head, schedule=schedule,
        codebook=codebook, normalizer=normalizer,
        prior_hash=None if prior_ckpt is None else prior_ckpt.file_hash,
        discon_hash=discon_ckpt.file_hash,
    )


@dataclass
class GenerationResult:
    tokens: np.ndarray  # (n, M, d) in original token space
    disc: np.ndarray | None  # (n, M) conditioning indices (None when unconditioned)
    provenance: dict


def generate_from_bundle(bundle: Bundle, req: SampleRequest,
                         ground_truth_tokens: np.ndarray | None = None) -> GenerationResult:
    cfg = bundle.backbone.config
    m, d = cfg.seq_len, cfg.token_dim
    if req.steps > m:
        raise ValueError(f"steps {req.steps} > seq_len {m}")
    n = req.n_images
    conditioned = cfg.conditioning == "prefix"
    root = Rng(req.seed, "generate")

    disc = None
    if conditioned:
        if req.condition_source == "ground_truth":
            if ground_truth_tokens is None:
                raise ValueError("condition_source='ground_truth' requires ground_truth_tokens")
            gt = np.asarray(ground_truth_tokens, dtype=np.int64)
            disc = np.broadcast_to(gt, (n, m)).copy() if gt.ndim == 1 else gt.copy()
            if disc.shape != (n, m):
                raise ValueError(f"ground truth tokens shape {disc.shape} != ({n}, {m})")
        else:
            if bundle.prior is None:
                raise ValueError("prior-conditioned sampling requires a prior checkpoint")
            if req.class_label is None:
                classes = np.asarray(root.child("classes").integers(
                    0, bundle.prior.config.n_classes, (n,)))
            else:
                classes = np.full(n, req.class_label, dtype=np.int64)
            disc = pr.sample_prior_batch(
                bundle.prior, classes, cfg_scale=req.cfg_scale,
                temperature=1.0, seed=req.seed,
            )

    counts = reveal_schedule(m, req.steps)
    orders = np.argsort(root.child("reveal").uniform((n, m)), axis=1)
    cont = np.zeros((n, m, d))
    mask = np.ones((n, m), dtype=bool)
    revealed = 0
    with nm.no_grad():
        for count in counts:
            z_grid = bundle.backbone.hidden(cont, disc, mask).data
            pos = orders[:, revealed : revealed + count]  # (n, count)
            rows = np.repeat(np.arange(n), count)
            cols = pos.reshape(-1)
            z_rows = z_grid[rows, cols]
            sampled = dh.sample_tokens(
                bundle.head, z_rows, bundle.schedule, req.temperature,
                seed=req.seed, stream_ids=rows * m + cols,
            )
            cont[rows, cols] = sampled
            mask[rows, cols] = False
            revealed += count

    decoded = tk.decode(cont, bundle.normalizer)
    provenance = {
        "request": asdict(req),
        "prior_checkpoint": bundle.prior_hash,
        "discon_checkpoint": bundle.discon_hash,
        "reveal_counts": counts.tolist(),
    }
    return GenerationResult(tokens=decoded, disc=disc, provenance=provenance)


def generate(prior_ckpt_path, discon_ckpt_path, req: SampleRequest,
             ground_truth_tokens: np.ndarray | None = None) -> GenerationResult:
    """End-to-end sampler from checkpoint files."""
    bundle = load_bundle(prior_ckpt_path, discon_ckpt_path)
    return generate_from_bundle(bundle, req, ground_truth_tokens)


# ---------------------------------------------------------------------------
# grid comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridCell:
    run_id: str
    conditioning: str
    steps: int
    temperature: float
    cfg_scale: float
    prior_ckpt: str | None
    discon_ckpt: str
    seed: int
    n_images: int


RESULT_COLUMNS = ["run_id", "conditioning", "S", "tau", "cfg", "fd", "mode_coverage",
                  "ood_rate", "sec_per_batch", "ckpt_hash"]


def compare_runs(cells: list[GridCell], val_dataset: Dataset) -> list[dict]:
    """Evaluate each grid cell; failures are recorded per cell and do not stop the run."""
    real = val_dataset.pooled_tokens()
    rows: list[dict] = []
    for cell in cells:
        row: dict = {
            "run_id": cell.run_id, "conditioning": cell.conditioning, "S": cell.steps,
            "tau": cell.temperature, "cfg": cell.cfg_scale,
        }
        try:
            t0 = time.perf_counter()
            bundle = load_bundle(cell.prior_ckpt, cell.discon_ckpt)
            req = SampleRequest(
                class_label=None, n_images=cell.n_images, steps=cell.steps,
                temperature=cell.temperature, cfg_scale=cell.cfg_scale, seed=cell.seed,
            )
            out = generate_from_bundle(bundle, req)
            elapsed = time.perf_counter() - t0
            pooled = out.tokens.reshape(-1, val_dataset.spec.token_dim)
            report = evaluate.mode_report(pooled, val_dataset.spec)
            row.update({
                "fd": evaluate.frechet_distance(pooled, real),
                "mode_coverage": report.coverage,
                "ood_rate": report.ood_rate,
                "sec_per_batch": elapsed,
                "ckpt_hash": bundle.discon_hash,
            })
        except (OSError, CheckpointError, ValueError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows
