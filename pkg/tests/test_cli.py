import csv
import json
import os

import numpy as np
import pytest

from fedkit import cli, wire
from fedkit.models import CLS_CNN_PLAIN, SEG_UNET_MINI, build_network


def _tree_bytes(root):
    out = {}
    for r, _, files in os.walk(root):
        for f in files:
            p = os.path.join(r, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def _write_config(path, **doc):
    with open(path, "w") as f:
        json.dump(doc, f)
    return str(path)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "d"
    assert cli.main(["gen-data", "--out", str(root), "--per-class", "10", "--seed", "0"]) == 0
    return str(root)


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_gen_data_default_split_manifest(dataset):
    manifest = json.load(open(os.path.join(dataset, "manifest.json")))
    assert manifest["split_ratio"] == 0.9
    assert manifest["counts"]["train"]["0"] == 9
    assert manifest["counts"]["test"]["0"] == 1


def test_gen_data_rerun_byte_identical(dataset, tmp_path):
    again = tmp_path / "again"
    assert cli.main(["gen-data", "--out", str(again), "--per-class", "10", "--seed", "0"]) == 0
    assert _tree_bytes(dataset) == _tree_bytes(again)


def test_gen_data_invalid_counts_no_partial_output(tmp_path, capsys):
    out = tmp_path / "nope"
    assert cli.main(["gen-data", "--out", str(out), "--per-class", "3"]) == 1
    assert "error:" in capsys.readouterr().err
    assert not out.exists()


def test_train_seg_lr_zero_flat_history(dataset, tmp_path):
    out = tmp_path / "segout"
    cfgp = _write_config(
        tmp_path / "seg.json",
        task="segmentation",
        dataset_root=dataset,
        output_dir=str(out),
        rounds=3,
        repetitions=2,
        optimizer={"kind": "sgd", "lr": 0.0},
    )
    assert cli.main(["train-seg", "--config", cfgp]) == 0
    # repetitions=2 -> two log files
    assert (out / "metrics_rep0.csv").exists() and (out / "metrics_rep1.csv").exists()
    assert (out / "metrics.png").exists()
    rows = _read_csv(out / "metrics_rep0.csv")
    assert rows[0] == ["round", "metric", "loss", "duration_ms", "selected_ids"]
    metrics = [r[1] for r in rows[1:]]
    assert len(metrics) == 3 and len(set(metrics)) == 1  # flat: no learning
    # lr=0 never updates weights, so the saved best must be one repetition's
    # untouched init (rep r runs with seed base+r)
    saved = wire.load_weights_file(out / "best_seg.flw")
    inits = [build_network(SEG_UNET_MINI, seed=s)[1] for s in (0, 1)]
    assert any(
        all(np.array_equal(a, b) for (_, a), (_, b) in zip(saved.params, init.params))
        for init in inits
    )


def test_sweep_trivial_threshold_reports_round_one(dataset, tmp_path):
    out = tmp_path / "sweep"
    cfgp = _write_config(
        tmp_path / "sw.json",
        task="segmentation",
        dataset_root=dataset,
        output_dir=str(out),
        rounds=2,
        repetitions=2,
        threshold=0.0,
        optimizer={"kind": "sgd", "lr": 0.0},
    )
    assert cli.main(["sweep-seg", "--config", cfgp, "--sc-grid", "1", "--le-grid", "1"]) == 0
    rows = _read_csv(out / "sweep.csv")
    assert rows[0] == ["le", "sc", "repetition", "rounds_to_threshold"]
    assert [r[3] for r in rows[1:]] == ["1", "1"]  # threshold 0: met at round 1
    assert (out / "sweep.png").exists()


def test_segment_dataset_cli(dataset, tmp_path):
    _, w = build_network(SEG_UNET_MINI, seed=0)
    wpath = tmp_path / "seg.flw"
    wire.save_weights_file(wpath, w)
    out = tmp_path / "segmented"
    assert cli.main(
        ["segment-dataset", "--weights", str(wpath), "--data", dataset, "--out", str(out)]
    ) == 0
    manifest = json.load(open(out / "manifest.json"))
    assert manifest["kind"] == "segmented"
    assert len(manifest["samples"]) == 30


def test_train_cls_lr_zero_chance_accuracy(dataset, tmp_path):
    out = tmp_path / "cls"
    cfgp = _write_config(
        tmp_path / "cls.json",
        task="classification",
        dataset_root=dataset,
        output_dir=str(out),
        rounds=2,
        num_clients=2,
        repetitions=1,
        optimizer={"kind": "sgd", "lr": 0.0},
    )
    assert cli.main(["train-cls", "--config", cfgp]) == 0
    rows = _read_csv(out / "metrics_rep0.csv")
    for r in rows[1:]:
        assert float(r[1]) == pytest.approx(1.0 / 3.0, abs=1e-9)
    summary = _read_csv(out / "summary.csv")
    assert summary[0][:3] == ["architecture", "dataset_kind", "num_clients"]
    assert len(summary) == 2


def test_cli_repeat_runs_are_byte_identical(dataset, tmp_path):
    outs = []
    for tag in ("one", "two"):
        out = tmp_path / tag
        cfgp = _write_config(
            tmp_path / f"{tag}.json",
            task="classification",
            dataset_root=dataset,
            output_dir=str(out),
            rounds=2,
            num_clients=2,
            repetitions=1,
        )
        assert cli.main(["train-cls", "--config", cfgp]) == 0
        outs.append(out)
    a, b = outs
    assert (a / "metrics_rep0.csv").read_bytes() == (b / "metrics_rep0.csv").read_bytes()
    assert (a / "best_cls.flw").read_bytes() == (b / "best_cls.flw").read_bytes()


def test_gradcam_cli_overlay_count(dataset, tmp_path):
    _, w = build_network(CLS_CNN_PLAIN, seed=0)
    wpath = tmp_path / "cls.flw"
    wire.save_weights_file(wpath, w)
    out = tmp_path / "cam"
    assert cli.main(
        ["gradcam", "--model-full", str(wpath), "--model-seg", str(wpath),
         "--data", dataset, "--num-samples", "8", "--out", str(out)]
    ) == 0
    overlays = [f for f in os.listdir(out) if f.endswith(".ppm")]
    # per-class 10 leaves exactly one class-2 test sample -> 2 overlays
    assert len(overlays) == 2
    rows = _read_csv(out / "focus_scores.csv")
    assert rows[0] == ["sample_id", "model_id", "dataset_kind", "score"]
    assert len(rows) == 3


def test_gradcam_cli_zero_samples_header_only(dataset, tmp_path):
    _, w = build_network(CLS_CNN_PLAIN, seed=0)
    wpath = tmp_path / "cls.flw"
    wire.save_weights_file(wpath, w)
    out = tmp_path / "cam0"
    assert cli.main(
        ["gradcam", "--model-full", str(wpath), "--model-seg", str(wpath),
         "--data", dataset, "--num-samples", "0", "--out", str(out)]
    ) == 0
    rows = _read_csv(out / "focus_scores.csv")
    assert rows == [["sample_id", "model_id", "dataset_kind", "score"]]
    assert not [f for f in os.listdir(out) if f.endswith(".ppm")]


def test_missing_dataset_is_a_clean_error(tmp_path, capsys):
    cfgp = _write_config(
        tmp_path / "c.json",
        task="segmentation",
        dataset_root=str(tmp_path / "missing"),
        output_dir=str(tmp_path / "o"),
    )
    assert cli.main(["train-seg", "--config", cfgp]) == 1
    assert "error:" in capsys.readouterr().err


def test_wrong_task_for_command(dataset, tmp_path, capsys):
    cfgp = _write_config(
        tmp_path / "c.json",
        task="classification",
        dataset_root=dataset,
        output_dir=str(tmp_path / "o"),
    )
    assert cli.main(["train-seg", "--config", cfgp]) == 1
    assert "error:" in capsys.readouterr().err
