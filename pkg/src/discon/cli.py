"""Operator surface: subcommands over config files and run directories.

Every command resolves its full configuration (defaults, config file, --set
overrides, in that order), writes its artifacts into a locked run directory,
and records a manifest naming the command, resolved config, and the hash of
every input and artifact, so any run can be reproduced from the manifest.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import backbone as bb
from . import diffhead as dh
from . import evaluate
from . import gradcheck as gc
from . import pipeline as pl
from . import plots
from . import prior as pr
from . import synthdata as sd
from . import tokenizers as tk

SUBCOMMANDS = ("gen-data", "fit-tokenizer", "train-prior", "train-discon",
               "sample", "eval", "ablate", "gradcheck", "plot")

GRADCHECK_TOLERANCE = 1e-6


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


# ---------------------------------------------------------------------------
# config resolution (strict)
# ---------------------------------------------------------------------------

def _tf(v: str) -> bool:
    if v.lower() in ("1", "true", "yes"):
        return True
    if v.lower() in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# section -> key -> (parser, default)
CONFIG_SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "n": (int, 1024), "seed": (int, 7), "n_modes": (int, 8), "token_dim": (int, 2),
        "seq_len": (int, 16), "separation": (float, 10.0), "sigma": (float, 1.0),
        "mode_shape": (str, "gaussian"), "n_classes": (int, 4),
        "val_fraction": (float, 0.2), "split_seed": (int, 1),
    },
    "tokenizer": {"vocab": (int, 16), "seed": (int, 3), "max_iters": (int, 100)},
    "prior": {
        "layers": (int, 4), "width": (int, 128), "heads": (int, 4),
        "dropout": (float, 0.0), "cfg_null_prob": (float, 0.1),
    },
    "discon": {
        "layers": (int, 6), "width": (int, 128), "heads": (int, 4), "z_dim": (int, 0),
        "mask_lo": (float, 0.7), "mask_hi": (float, 1.0), "conditioning": (str, "prefix"),
        "diffusion_steps": (int, 100), "head_width": (int, 128), "head_blocks": (int, 3),
        "head_time_dim": (int, 64),
    },
    "train": {
        "epochs": (int, 30), "batch_size": (int, 64), "learning_rate": (float, 3e-3),
        "warmup_steps": (int, 20), "ema_decay": (float, 0.999), "grad_clip": (float, 1.0),
        "weight_decay": (float, 0.01), "seed": (int, 0),
    },
    "sample": {
        "class_label": (int, -1), "n_images": (int, 192), "steps": (int, 16),
        "temperature": (float, 0.6), "cfg_scale": (float, 1.5), "seed": (int, 0),
        "condition_source": (str, "prior"),
    },
    "eval": {"max_points": (int, 0)},
}


def resolve_config(path: str | None, overrides: list[str]) -> dict[str, dict]:
    """Defaults <- config file <- --set overrides; unknown keys are fatal."""
    cfg = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in CONFIG_SCHEMA.items()}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ValidationError(f"config file not found: {path}")
        for sec in parser.sections():
            if sec not in CONFIG_SCHEMA:
                raise ValidationError(f"unknown config section [{sec}]")
            for key, raw in parser.items(sec):
                _apply(cfg, sec, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValidationError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        sec, key = dotted.split(".", 1)
        _apply(cfg, sec, key, raw)
    return cfg


def _apply(cfg: dict, sec: str, key: str, raw: str) -> None:
    if sec not in CONFIG_SCHEMA:
        raise ValidationError(f"unknown config section [{sec}]")
    if key not in CONFIG_SCHEMA[sec]:
        raise ValidationError(f"unknown config key '{key}' in section [{sec}]")
    parse = CONFIG_SCHEMA[sec][key][0]
    try:
        cfg[sec][key] = parse(raw)
    except ValueError as exc:
        raise ValidationError(f"bad value for {sec}.{key}: {exc}") from None


# ---------------------------------------------------------------------------
# run directory and manifest
# ---------------------------------------------------------------------------


class RunDir:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "checkpoints").mkdir(exist_ok=True)
        (self.path / "plots").mkdir(exist_ok=True)
        self._lock = self.path / ".lock"
        try:
            self._lock.touch(exist_ok=False)
        except FileExistsError:
            raise RuntimeError(f"run directory {self.path} is locked by another invocation") from None
        self._t0 = time.perf_counter()
        self.inputs: dict[str, str] = {}
        self.artifacts: dict[str, str] = {}

    def record_input(self, path) -> None:
        self.inputs[str(path)] = pl.file_sha256(path)

    def record_artifact(self, relpath: str) -> None:
        self.artifacts[relpath] = pl.file_sha256(self.path / relpath)

    def write_metrics(self, rows: list[dict]) -> None:
        lines = ["step,split,metric,value"]
        for r in rows:
            lines.append(f"{r['step']},{r['split']},{r['metric']},{r['value']!r}")
        (self.path / "metrics.csv").write_text("\n".join(lines) + "\n")
        self.record_artifact("metrics.csv")

    def finish(self, command: list[str], config: dict) -> None:
        ident = {"command": command, "config": config, "inputs": self.inputs}
        run_id = hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()[:12]
        manifest = {
            "run_id": run_id,
            "command": command,
            "tool_version": __version__,
            "config": config,
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "timings": {"wall_s": round(time.perf_counter() - self._t0, 3)},
        }
        (self.path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        self._lock.unlink(missing_ok=True)

    def abort(self) -> None:
        self._lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# shared builders
# ---------------------------------------------------------------------------


def _mixture_spec(c: dict) -> sd.MixtureSpec:
    d = c["data"]
    return sd.MixtureSpec(
        n_modes=d["n_modes"], token_dim=d["token_dim"], seq_len=d["seq_len"],
        separation=d["separation"], sigma=d["sigma"], mode_shape=d["mode_shape"],
        n_classes=d["n_classes"],
    )


def _backbone_config(c: dict) -> bb.BackboneConfig:
    dc, dd = c["discon"], c["data"]
    return bb.BackboneConfig(
        seq_len=dd["seq_len"], token_dim=dd["token_dim"], vocab=c["tokenizer"]["vocab"],
        layers=dc["layers"], width=dc["width"], heads=dc["heads"],
        z_dim=dc["z_dim"] if dc["z_dim"] > 0 else None,
        mask_ratio_range=(dc["mask_lo"], dc["mask_hi"]), conditioning=dc["conditioning"],
    )


def _head_config(c: dict) -> dh.HeadConfig:
    dc, dd = c["discon"], c["data"]
    z = dc["z_dim"] if dc["z_dim"] > 0 else dc["width"]
    return dh.HeadConfig(token_dim=dd["token_dim"], z_dim=z, width=dc["head_width"],
                         blocks=dc["head_blocks"], time_dim=dc["head_time_dim"])


def _prior_config(c: dict) -> pr.PriorConfig:
    p, dd = c["prior"], c["data"]
    return pr.PriorConfig(
        vocab=c["tokenizer"]["vocab"], seq_len=dd["seq_len"], n_classes=dd["n_classes"],
        layers=p["layers"], width=p["width"], heads=p["heads"],
        dropout=p["dropout"], cfg_null_prob=p["cfg_null_prob"],
    )


def _train_config(c: dict) -> pl.TrainConfig:
    t = c["train"]
    return pl.TrainConfig(**t)


def _load_tokenizer_ckpt(path) -> tuple[tk.Codebook, tk.Normalizer]:
    ckpt = pl.load_checkpoint(path)
    if ckpt.kind != "tokenizer":
        raise pl.CheckpointError(f"expected kind 'tokenizer', got '{ckpt.kind}'")
    cb = tk.Codebook(ckpt.tensors["codebook"], inertia=float(ckpt.meta["inertia"]),
                     iterations=int(ckpt.meta["iterations"]))
    norm = tk.Normalizer(ckpt.tensors["mean"], ckpt.tensors["scale"])
    return cb, norm


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_gen_data(args, cfg: dict, run: RunDir) -> None:
    d = cfg["data"]
    dataset = sd.generate(_mixture_spec(cfg), d["n"], d["seed"])
    train, val = sd.split(dataset, 1.0 - d["val_fraction"], d["split_seed"])
    for name, part in (("dataset.dscn", dataset), ("train.dscn", train), ("val.dscn", val)):
        sd.save(part, run.path / name)
        run.record_artifact(name)


def _cmd_fit_tokenizer(args, cfg: dict, run: RunDir) -> None:
    run.record_input(args.dataset)
    dataset = sd.load(args.dataset)
    t = cfg["tokenizer"]
    cb = tk.fit_codebook(dataset.tokens, t["vocab"], t["seed"], t["max_iters"])
    norm = tk.Normalizer.fit(dataset.tokens)
    out = run.path / "checkpoints" / "tokenizer.ckpt"
    pl.save_checkpoint(
        out, "tokenizer",
        {"inertia": cb.inertia, "iterations": cb.iterations, "vocab": cb.vocab},
        {"codebook": cb.vectors, "mean": norm.mean, "scale": norm.scale},
        step=0, rng_key=(t["seed"],),
    )
    run.record_artifact("checkpoints/tokenizer.ckpt")
    run.write_metrics([{"step": 0, "split": "fit", "metric": "inertia", "value": cb.inertia},
                       {"step": 0, "split": "fit", "metric": "iterations", "value": cb.iterations}])


def _cmd_train_prior(args, cfg: dict, run: RunDir) -> None:
    run.record_input(args.train)
    run.record_input(args.val)
    run.record_input(args.tokenizer)
    train = sd.load(args.train)
    val = sd.load(args.val)
    cb, _ = _load_tokenizer_ckpt(args.tokenizer)
    resume = pl.load_checkpoint(args.resume) if args.resume else None
    out = run.path / "checkpoints" / "prior.ckpt"
    result = pl.train_prior(train, val, _prior_config(cfg), _train_config(cfg), cb,
                            ckpt_path=out, resume_from=resume,
                            max_steps=args.max_steps)
    run.record_artifact("checkpoints/prior.ckpt")
    run.write_metrics(result.metrics)


def _cmd_train_discon(args, cfg: dict, run: RunDir) -> None:
    run.record_input(args.train)
    run.record_input(args.val)
    run.record_input(args.tokenizer)
    train = sd.load(args.train)
    val = sd.load(args.val)
    cb, norm = _load_tokenizer_ckpt(args.tokenizer)
    schedule = dh.NoiseSchedule.cosine(cfg["discon"]["diffusion_steps"])
    resume = pl.load_checkpoint(args.resume) if args.resume else None
    out = run.path / "checkpoints" / "discon.ckpt"
    result = pl.train_discon(train, val, _backbone_config(cfg), _head_config(cfg),
                             schedule, cb, norm, _train_config(cfg),
                             ckpt_path=out, resume_from=resume)
    run.record_artifact("checkpoints/discon.ckpt")
    run.write_metrics(result.metrics)


def _cmd_sample(args, cfg: dict, run: RunDir) -> None:
    s = cfg["sample"]
    run.record_input(args.discon)
    if args.prior:
        run.record_input(args.prior)
    discon_ckpt = pl.load_checkpoint(args.discon)
    seq_len = discon_ckpt.meta["backbone_config"]["seq_len"]
    if s["steps"] > seq_len:
        raise ValidationError(f"sample.steps={s['steps']} violates steps <= seq_len={seq_len}")
    req = pl.SampleRequest(
        class_label=None if s["class_label"] < 0 else s["class_label"],
        n_images=s["n_images"], steps=s["steps"], temperature=s["temperature"],
        cfg_scale=s["cfg_scale"], seed=s["seed"], condition_source=s["condition_source"],
    )
    gt = None
    if s["condition_source"] == "ground_truth":
        if not args.gt_dataset:
            raise ValidationError("condition_source=ground_truth requires --gt-dataset")
        run.record_input(args.gt_dataset)
        gt_ds = sd.load(args.gt_dataset)
        cb, _ = _build_bundle_tokenizer(discon_ckpt)
        gt = tk.encode_discrete(gt_ds.tokens, cb)[: s["n_images"]]
    result = pl.generate(args.prior, args.discon, req, ground_truth_tokens=gt)
    np.save(run.path / "samples.npy", result.tokens)
    run.record_artifact("samples.npy")
    (run.path / "provenance.json").write_text(
        json.dumps(result.provenance, indent=2, sort_keys=True) + "\n")
    run.record_artifact("provenance.json")


def _build_bundle_tokenizer(discon_ckpt: pl.Checkpoint) -> tuple[tk.Codebook, tk.Normalizer]:
    cb = tk.Codebook(discon_ckpt.tensors["tokenizer.codebook"], inertia=0.0, iterations=0)
    norm = tk.Normalizer(discon_ckpt.tensors["tokenizer.mean"], discon_ckpt.tensors["tokenizer.scale"])
    return cb, norm


def _cmd_eval(args, cfg: dict, run: RunDir) -> None:
    run.record_input(args.samples)
    run.record_input(args.dataset)
    samples = np.load(args.samples)
    dataset = sd.load(args.dataset)
    pooled = samples.reshape(-1, dataset.spec.token_dim)
    cap = cfg["eval"]["max_points"]
    if cap > 0:
        pooled = pooled[:cap]
    fd = evaluate.frechet_distance(pooled, dataset.pooled_tokens())
    report = evaluate.mode_report(pooled, dataset.spec)
    rows = [
        {"step": 0, "split": "eval", "metric": "fd", "value": fd},
        {"step": 0, "split": "eval", "metric": "coverage", "value": report.coverage},
        {"step": 0, "split": "eval", "metric": "purity", "value": report.purity},
        {"step": 0, "split": "eval", "metric": "ood_rate", "value": report.ood_rate},
    ]
    run.write_metrics(rows)
    metrics = {"fd": fd, **report.to_dict()}
    (run.path / "metrics.json").write_text(json.dumps(metrics, sort_keys=True) + "\n")
    run.record_artifact("metrics.json")


def _cmd_ablate(args, cfg: dict, run: RunDir) -> None:
    run.record_input(args.cells)
    run.record_input(args.dataset)
    cells_raw = json.loads(Path(args.cells).read_text())
    cells = [pl.GridCell(**c) for c in cells_raw]
    dataset = sd.load(args.dataset)
    rows = pl.compare_runs(cells, dataset)
    lines = [",".join(pl.RESULT_COLUMNS)]
    for row in rows:
        lines.append(",".join("" if row.get(col) is None else
                              (repr(row[col]) if isinstance(row[col], float) else str(row[col]))
                              for col in pl.RESULT_COLUMNS))
    (run.path / "results.csv").write_text("\n".join(lines) + "\n")
    run.record_artifact("results.csv")
    errors = {r["run_id"]: r["error"] for r in rows if "error" in r}
    if errors:
        (run.path / "errors.json").write_text(json.dumps(errors, indent=2, sort_keys=True) + "\n")
        run.record_artifact("errors.json")


def _cmd_gradcheck(args, cfg: dict, run: RunDir) -> None:
    rows = gc.run_all(seed=cfg["train"]["seed"])
    out = [{"step": 0, "split": "gradcheck", "metric": name, "value": err} for name, err in rows]
    run.write_metrics(out)
    worst = max(err for _, err in rows)
    for name, err in rows:
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{status:4s} {name:24s} max_rel_err={err:.3e}")
    print(f"worst={worst:.3e} tolerance={GRADCHECK_TOLERANCE:.0e}")
    if worst >= GRADCHECK_TOLERANCE:
        raise RuntimeError(f"gradient check failed: worst {worst:.3e} >= {GRADCHECK_TOLERANCE}")


def _cmd_plot(args, cfg: dict, run: RunDir) -> None:
    src = Path(args.input)
    if args.kind == "scatter":
        samples_path = src / "samples.npy"
        if not samples_path.exists():
            raise FileNotFoundError(f"expected {samples_path} for a scatter plot")
        run.record_input(samples_path)
        points = np.load(samples_path).reshape(-1, 2)[:, :2]
        colors = np.zeros(len(points), dtype=np.int64)
        if args.dataset:
            run.record_input(args.dataset)
            spec = sd.load(args.dataset).spec
            if len(points):
                diff = points[:, None, :] - spec.centers[None, :, :2]
                colors = np.argmin((diff ** 2).sum(-1), axis=1)
        svg = plots.scatter_svg(points, colors, title="token scatter")
        csv_lines = ["x,y,mode"] + [f"{x!r},{y!r},{c}" for (x, y), c in zip(points, colors)]
    else:
        metrics_path = src / "metrics.csv"
        if not metrics_path.exists():
            raise FileNotFoundError(f"expected {metrics_path} for a curve plot")
        run.record_input(metrics_path)
        series: dict[str, list[tuple[float, float]]] = {}
        lines = metrics_path.read_text().strip().splitlines()
        for line in lines[1:]:
            step, split_, metric, value = line.split(",")
            series.setdefault(f"{split_}/{metric}", []).append((float(step), float(value)))
        svg = plots.curve_svg(series, title="metrics", xlabel="step", ylabel="value")
        csv_lines = lines
    (run.path / "plots" / f"{args.kind}.svg").write_text(svg)
    (run.path / "plots" / f"{args.kind}.csv").write_text("\n".join(csv_lines) + "\n")
    run.record_artifact(f"plots/{args.kind}.svg")
    run.record_artifact(f"plots/{args.kind}.csv")


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _ArgumentParser:
    parser = _ArgumentParser(prog="discon", description="two-stage generative pipeline")
    sub = parser.add_subparsers(dest="subcommand")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None)
    common.add_argument("--run-dir", required=True)
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE")

    sub.add_parser("gen-data", parents=[common])
    p = sub.add_parser("fit-tokenizer", parents=[common])
    p.add_argument("--dataset", required=True)
    for name in ("train-prior", "train-discon"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--train", required=True)
        p.add_argument("--val", required=True)
        p.add_argument("--tokenizer", required=True)
        p.add_argument("--resume", default=None)
        if name == "train-prior":
            p.add_argument("--max-steps", type=int, default=None)
    p = sub.add_parser("sample", parents=[common])
    p.add_argument("--discon", required=True)
    p.add_argument("--prior", default=None)
    p.add_argument("--gt-dataset", default=None)
    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--samples", required=True)
    p.add_argument("--dataset", required=True)
    p = sub.add_parser("ablate", parents=[common])
    p.add_argument("--cells", required=True)
    p.add_argument("--dataset", required=True)
    sub.add_parser("gradcheck", parents=[common])
    p = sub.add_parser("plot", parents=[common])
    p.add_argument("--input", required=True)
    p.add_argument("--kind", choices=("scatter", "curve"), required=True)
    p.add_argument("--dataset", default=None)
    return parser


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "fit-tokenizer": _cmd_fit_tokenizer,
    "train-prior": _cmd_train_prior,
    "train-discon": _cmd_train_discon,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "plot": _cmd_plot,
}


def dispatch(argv: list[str]) -> int:
    """Exit codes: 0 ok, 1 usage error, 2 validation error, 3 runtime failure."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.subcommand is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1

    run = None
    try:
        cfg = resolve_config(args.config, args.overrides)
        run = RunDir(args.run_dir)
        _HANDLERS[args.subcommand](args, cfg, run)
        run.finish([args.subcommand] + argv[1:], cfg)
        return 0
    except (ValidationError, ValueError, IndexError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        if run is not None:
            run.abort()
        return 2
    except Exception as exc:  # noqa: BLE001 - boundary: map to exit code
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        if run is not None:
            run.abort()
        return 3


def rerun_from_manifest(manifest_path, run_dir) -> int:
    """Re-dispatch a recorded command into a fresh run directory."""
    manifest = json.loads(Path(manifest_path).read_text())
    argv = list(manifest["command"])
    out = []
    skip = False
    for i, tok in enumerate(argv):
        if skip:
            skip = False
            continue
        if tok == "--run-dir":
            skip = True
            continue
        if tok.startswith("--run-dir="):
            continue
        out.append(tok)
    return dispatch(out + ["--run-dir", str(run_dir)])


def main(argv: list[str] | None = None) -> None:
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))
