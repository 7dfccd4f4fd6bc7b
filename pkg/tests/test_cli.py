from __future__ import annotations

import json

import numpy as np
import pytest

from discon import cli
from discon import pipeline as pl
from discon import synthdata as sd

TINY = [
    "--set", "data.n=160", "--set", "data.n_modes=2", "--set", "data.n_classes=2",
    "--set", "data.seq_len=4", "--set", "data.separation=8.0",
    "--set", "tokenizer.vocab=4",
    "--set", "prior.layers=1", "--set", "prior.width=16", "--set", "prior.heads=2",
    "--set", "discon.layers=1", "--set", "discon.width=16", "--set", "discon.heads=2",
    "--set", "discon.head_width=16", "--set", "discon.head_blocks=1",
    "--set", "discon.diffusion_steps=50", "--set", "discon.head_time_dim=8",
    "--set", "train.epochs=1", "--set", "train.batch_size=64",
    "--set", "train.ema_decay=0.9",
    "--set", "sample.n_images=6", "--set", "sample.steps=2",
]


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """Full command chain in one workspace: data -> tokenizer -> models -> samples."""
    root = tmp_path_factory.mktemp("cli_chain")
    dirs = {name: root / name for name in
            ("data", "tok", "prior", "discon", "sample", "eval", "plot")}
    assert cli.dispatch(["gen-data", "--run-dir", str(dirs["data"])] + TINY) == 0
    assert cli.dispatch(["fit-tokenizer", "--run-dir", str(dirs["tok"]),
                         "--dataset", str(dirs["data"] / "train.dscn")] + TINY) == 0
    tok = str(dirs["tok"] / "checkpoints" / "tokenizer.ckpt")
    common = ["--train", str(dirs["data"] / "train.dscn"),
              "--val", str(dirs["data"] / "val.dscn"), "--tokenizer", tok]
    assert cli.dispatch(["train-prior", "--run-dir", str(dirs["prior"])] + common + TINY) == 0
    assert cli.dispatch(["train-discon", "--run-dir", str(dirs["discon"])] + common + TINY) == 0
    assert cli.dispatch([
        "sample", "--run-dir", str(dirs["sample"]),
        "--discon", str(dirs["discon"] / "checkpoints" / "discon.ckpt"),
        "--prior", str(dirs["prior"] / "checkpoints" / "prior.ckpt"),
    ] + TINY) == 0
    assert cli.dispatch([
        "eval", "--run-dir", str(dirs["eval"]),
        "--samples", str(dirs["sample"] / "samples.npy"),
        "--dataset", str(dirs["data"] / "val.dscn"),
    ] + TINY) == 0
    return dirs


def test_unknown_subcommand_usage_error(capsys):
    assert cli.dispatch(["frobnicate", "--run-dir", "/tmp/x"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_missing_subcommand_usage_error():
    assert cli.dispatch([]) == 1


def test_unknown_config_key_names_key(tmp_path, capsys):
    rc = cli.dispatch(["gen-data", "--run-dir", str(tmp_path / "r"),
                       "--set", "data.bogus_knob=3"])
    assert rc == 2
    assert "bogus_knob" in capsys.readouterr().err


def test_unknown_config_section_rejected(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[nonsense]\nx = 1\n")
    assert cli.dispatch(["gen-data", "--run-dir", str(tmp_path / "r"),
                         "--config", str(cfg)]) == 2


def test_config_file_applies_and_overrides_win(tmp_path):
    cfg = tmp_path / "ok.cfg"
    cfg.write_text("[data]\nn = 48\nn_modes = 2\nn_classes = 2\nseq_len = 4\nseparation = 8.0\n")
    run = tmp_path / "r"
    rc = cli.dispatch(["gen-data", "--run-dir", str(run), "--config", str(cfg),
                       "--set", "data.n=32"])
    assert rc == 0
    assert len(sd.load(run / "dataset.dscn")) == 32


def test_sample_steps_over_seq_len_is_validation_error(chain, tmp_path, capsys):
    rc = cli.dispatch([
        "sample", "--run-dir", str(tmp_path / "bad_s"),
        "--discon", str(chain["discon"] / "checkpoints" / "discon.ckpt"),
        "--prior", str(chain["prior"] / "checkpoints" / "prior.ckpt"),
        "--set", "sample.steps=9",
    ])
    assert rc == 2
    assert "steps" in capsys.readouterr().err


def test_missing_input_is_runtime_failure(tmp_path):
    rc = cli.dispatch(["fit-tokenizer", "--run-dir", str(tmp_path / "r"),
                       "--dataset", str(tmp_path / "absent.dscn")])
    assert rc == 3


def test_lock_file_blocks_concurrent_use(chain, tmp_path):
    run = tmp_path / "locked"
    run.mkdir()
    (run / ".lock").touch()
    rc = cli.dispatch(["gen-data", "--run-dir", str(run)] + TINY)
    assert rc == 3


def test_manifest_lists_artifacts_and_resolved_config(chain):
    manifest = json.loads((chain["data"] / "manifest.json").read_text())
    assert manifest["command"][0] == "gen-data"
    for name in ("dataset.dscn", "train.dscn", "val.dscn"):
        assert name in manifest["artifacts"]
        assert manifest["artifacts"][name] == pl.file_sha256(chain["data"] / name)
    # config resolution is total: every schema key appears
    for sec, keys in cli.CONFIG_SCHEMA.items():
        assert set(manifest["config"][sec]) == set(keys)
    assert "wall_s" in manifest["timings"]


def test_metrics_csv_schema(chain):
    lines = (chain["eval"] / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "step,split,metric,value"
    metrics = {line.split(",")[2] for line in lines[1:]}
    assert {"fd", "coverage", "purity", "ood_rate"} <= metrics


def test_plot_curve_row_count_matches_metrics(chain, tmp_path):
    out = tmp_path / "plotc"
    rc = cli.dispatch(["plot", "--run-dir", str(out), "--kind", "curve",
                       "--input", str(chain["discon"])])
    assert rc == 0
    svg = (out / "plots" / "curve.svg").read_text()
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    metric_rows = (chain["discon"] / "metrics.csv").read_text().strip().splitlines()
    plot_rows = (out / "plots" / "curve.csv").read_text().strip().splitlines()
    assert len(plot_rows) == len(metric_rows)


def test_plot_scatter_and_byte_stability(chain, tmp_path):
    a, b = tmp_path / "pa", tmp_path / "pb"
    for out in (a, b):
        rc = cli.dispatch(["plot", "--run-dir", str(out), "--kind", "scatter",
                           "--input", str(chain["sample"]),
                           "--dataset", str(chain["data"] / "val.dscn")])
        assert rc == 0
    assert (a / "plots" / "scatter.svg").read_bytes() == (b / "plots" / "scatter.svg").read_bytes()
    assert (a / "plots" / "scatter.csv").read_bytes() == (b / "plots" / "scatter.csv").read_bytes()


def test_plot_empty_scatter_is_valid(tmp_path):
    src = tmp_path / "empty_src"
    src.mkdir()
    np.save(src / "samples.npy", np.zeros((0, 4, 2)))
    out = tmp_path / "empty_plot"
    rc = cli.dispatch(["plot", "--run-dir", str(out), "--kind", "scatter",
                       "--input", str(src)])
    assert rc == 0
    svg = (out / "plots" / "scatter.svg").read_text()
    assert "<path" in svg  # axes are present
    assert "<circle" not in svg


def test_plot_missing_metrics_names_expected_file(tmp_path, capsys):
    src = tmp_path / "no_metrics"
    src.mkdir()
    rc = cli.dispatch(["plot", "--run-dir", str(tmp_path / "out"), "--kind", "curve",
                       "--input", str(src)])
    assert rc == 3
    assert "metrics.csv" in capsys.readouterr().err


def test_ablate_writes_results_csv(chain, tmp_path):
    cells = [
        {"run_id": "cell0", "conditioning": "prefix", "steps": 2, "temperature": 0.8,
         "cfg_scale": 1.0, "prior_ckpt": str(chain["prior"] / "checkpoints" / "prior.ckpt"),
         "discon_ckpt": str(chain["discon"] / "checkpoints" / "discon.ckpt"),
         "seed": 0, "n_images": 4},
        {"run_id": "cell1", "conditioning": "prefix", "steps": 2, "temperature": 0.8,
         "cfg_scale": 1.0, "prior_ckpt": None, "discon_ckpt": str(tmp_path / "missing.ckpt"),
         "seed": 0, "n_images": 4},
    ]
    cells_path = tmp_path / "cells.json"
    cells_path.write_text(json.dumps(cells))
    out = tmp_path / "ablate"
    rc = cli.dispatch(["ablate", "--run-dir", str(out), "--cells", str(cells_path),
                       "--dataset", str(chain["data"] / "val.dscn")])
    assert rc == 0
    lines = (out / "results.csv").read_text().strip().splitlines()
    assert lines[0] == ",".join(pl.RESULT_COLUMNS)
    assert len(lines) == 3
    errors = json.loads((out / "errors.json").read_text())
    assert "cell1" in errors


def test_rerun_from_manifest_reproduces_metrics(chain, tmp_path):
    rerun_dir = tmp_path / "rerun_eval"
    rc = cli.rerun_from_manifest(chain["eval"] / "manifest.json", rerun_dir)
    assert rc == 0
    assert (rerun_dir / "metrics.csv").read_bytes() == (chain["eval"] / "metrics.csv").read_bytes()
