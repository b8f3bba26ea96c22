"""End-to-end coverage of the command-line interface and its artifacts."""

import json
import subprocess
import sys

import numpy as np
import pytest

from prflow.cli import RunConfig, UsageError, main, parse_config
from prflow.data import (
    MaskSpec,
    TEST_STREAM,
    generate_synthetic,
    load_checkpoint,
    read_idx,
    sample_mask,
    save_idx,
)
from prflow.imputer import impute_dataset
from prflow.training import networks_from_state

BASE_CONFIG = {
    "dataset": "synthetic:blocks",
    "train_size": 24,
    "test_size": 8,
    "image_size": [4, 4],
    "batch_size": 8,
    "max_rounds": 2,
    "num_coupling_layers": 2,
    "coupling_hidden": 8,
    "imputer_hidden": 8,
    "seed": 0,
    "missing_rate": 0.5,
    "classifier_epochs": 3,
}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """One trained CLI run shared by the read-only tests below."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(BASE_CONFIG))
    out = root / "run"
    code = main(["train", "--config", str(cfg_path), "--out", str(out)])
    assert code == 0
    return {"root": root, "config": cfg_path, "out": out, "ckpt": out / "checkpoint.prflow"}


# -- config resolution ---------------------------------------------------------


def test_parse_config_defaults():
    cfg = parse_config(None, {})
    assert cfg.train.alpha == pytest.approx(1.0 / 3.0)
    assert cfg.train.learning_rate == 1e-4
    assert cfg.train.batch_size == 64
    assert cfg.train.lam is None
    assert cfg.missing_rate == 0.6
    assert cfg.passes == 2
    assert cfg.out == "runs/run"


def test_flags_override_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"missing_rate": 0.3, "seed": 9, "alpha": 0.5}))
    cfg = parse_config(path, {"missing_rate": 0.8, "lam": 0.0})
    assert cfg.missing_rate == 0.8  # flag wins
    assert cfg.train.seed == 9  # file survives where no flag given
    assert cfg.train.alpha == 0.5
    assert cfg.train.lam == 0.0


def test_none_overrides_do_not_erase_file_values(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"missing_rate": 0.25}))
    cfg = parse_config(path, {"missing_rate": None, "dataset": None})
    assert cfg.missing_rate == 0.25


def test_unknown_config_key_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"momentum": 0.9}))
    with pytest.raises(UsageError, match="momentum"):
        parse_config(path, {})


def test_invalid_json_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{broken")
    with pytest.raises(UsageError, match="JSON"):
        parse_config(path, {})


def test_missing_config_file():
    with pytest.raises(UsageError, match="not found"):
        parse_config("/nonexistent/config.json", {})


def test_mask_seed_defaults_to_training_seed():
    cfg = parse_config(None, {"seed": 17})
    assert cfg.resolved_mask_seed() == 17
    cfg.mask_seed = 4
    assert cfg.resolved_mask_seed() == 4


# -- exit codes ------------------------------------------------------------------


def test_out_of_range_missing_rate_is_usage_error(capsys):
    code = main(["train", "--dataset", "synthetic:blocks", "--missing-rate", "1.5"])
    assert code == 1
    assert "usage error" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    code = main(["train", "--no-such-flag"])
    assert code == 1


def test_unknown_command_is_usage_error():
    assert main(["frobnicate"]) == 1


def test_no_command_is_usage_error():
    assert main([]) == 1


def test_impute_without_checkpoint_is_usage_error(tmp_path, capsys):
    code = main([
        "impute", "--dataset", "synthetic:blocks", "--out", str(tmp_path / "o"),
    ])
    assert code == 1
    assert "checkpoint" in capsys.readouterr().err


def test_nonexistent_dataset_path_is_usage_error(tmp_path):
    code = main(["train", "--dataset", str(tmp_path / "missing.idx"), "--out", str(tmp_path / "o")])
    assert code == 1


def test_bad_thread_env_is_usage_error(monkeypatch, capsys):
    monkeypatch.setenv("PRFLOW_THREADS", "abc")
    assert main(["train", "--dataset", "synthetic:blocks"]) == 1
    assert "PRFLOW_THREADS" in capsys.readouterr().err
    monkeypatch.setenv("PRFLOW_THREADS", "0")
    assert main(["train", "--dataset", "synthetic:blocks"]) == 1


def test_evaluate_with_nothing_missing_is_runtime_error(run_dir, tmp_path, capsys):
    code = main([
        "evaluate", "--config", str(run_dir["config"]),
        "--checkpoint", str(run_dir["ckpt"]),
        "--missing-rate", "0.0", "--out", str(tmp_path / "o"),
    ])
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "missing" in err


def test_corrupt_checkpoint_is_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.prflow"
    bad.write_bytes(b"PRFLOWCK" + b"\x00" * 4)
    code = main([
        "impute", "--dataset", "synthetic:blocks", "--checkpoint", str(bad),
        "--out", str(tmp_path / "o"),
    ])
    assert code == 2
    assert "error:" in capsys.readouterr().err


# -- train artifacts ------------------------------------------------------------------


def test_train_writes_all_artifacts(run_dir):
    out = run_dir["out"]
    assert (out / "checkpoint.prflow").exists()
    assert (out / "resolved_config.json").exists()
    assert (out / "mask_spec.json").exists()
    lines = (out / "metrics.jsonl").read_text().strip().splitlines()
    assert len(lines) == BASE_CONFIG["max_rounds"]
    first = json.loads(lines[0])
    assert first["round"] == 1
    assert first["lambda"] > 0


def test_resolved_config_echo(run_dir):
    resolved = json.loads((run_dir["out"] / "resolved_config.json").read_text())
    assert resolved["missing_rate"] == 0.5
    assert resolved["train"]["seed"] == 0
    assert resolved["train"]["max_rounds"] == 2
    assert resolved["train"]["alpha"] == pytest.approx(1.0 / 3.0)
    assert resolved["image_size"] == [4, 4]


def test_mask_spec_matches_config(run_dir):
    spec = json.loads((run_dir["out"] / "mask_spec.json").read_text())
    assert spec == {"missing_rate": 0.5, "seed": 0, "stream": 0}


def test_checkpoint_records_training_state(run_dir):
    state = load_checkpoint(run_dir["ckpt"])
    assert state.round_index == 2
    assert state.config.max_rounds == 2
    assert len(state.j2_history) == 2
    assert state.lam is not None and state.lam > 0
    assert state.mask_seed == 0


def test_flag_reaches_training_config(tmp_path):
    out = tmp_path / "run"
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({**BASE_CONFIG, "max_rounds": 1}))
    code = main([
        "train", "--config", str(cfg_path), "--out", str(out),
        "--filters", "literal", "--lambda", "0.125",
    ])
    assert code == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["train"]["filters"] == "literal"
    assert resolved["train"]["lam"] == 0.125
    state = load_checkpoint(out / "checkpoint.prflow")
    assert state.config.filters == "literal"
    assert state.lam == 0.125


def test_train_reruns_are_byte_identical(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps(BASE_CONFIG))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        outs.append(out)
    ck1 = (outs[0] / "checkpoint.prflow").read_bytes()
    ck2 = (outs[1] / "checkpoint.prflow").read_bytes()
    assert ck1 == ck2
    # metrics lines differ only in wall time
    for l1, l2 in zip(
        (outs[0] / "metrics.jsonl").read_text().splitlines(),
        (outs[1] / "metrics.jsonl").read_text().splitlines(),
    ):
        r1, r2 = json.loads(l1), json.loads(l2)
        r1.pop("wall_time_s"), r2.pop("wall_time_s")
        assert r1 == r2


# -- impute ---------------------------------------------------------------------------


def test_impute_matches_library_bitwise(run_dir, tmp_path):
    out = tmp_path / "imp"
    code = main([
        "impute", "--config", str(run_dir["config"]),
        "--checkpoint", str(run_dir["ckpt"]), "--out", str(out),
    ])
    assert code == 0
    recovered_cli = read_idx(out / "recovered.idx")

    # rebuild the identical test split and masks by hand
    test_ds = generate_synthetic("blocks", 8, (4, 4), seed=BASE_CONFIG["seed"] + 1)
    spec = MaskSpec(0.5, seed=0, stream=TEST_STREAM)
    masks = sample_mask(test_ds.images.shape, spec)
    observed = np.where(masks, test_ds.images, 0.0)
    flow, imputer = networks_from_state(load_checkpoint(run_dir["ckpt"]))
    recovered_lib = impute_dataset(observed, masks, flow, imputer, passes=2)

    assert recovered_cli.shape == recovered_lib.shape
    assert np.array_equal(
        recovered_cli.view(np.uint64), recovered_lib.view(np.uint64)
    ), "CLI recovery must be bitwise identical to the library call"
    assert np.array_equal(recovered_cli[masks], test_ds.images[masks])


# -- evaluate / baseline -----------------------------------------------------------------


@pytest.fixture(scope="module")
def eval_rows(run_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    rows = {}
    for cmd, fname in (("evaluate", "evaluate.json"), ("baseline", "baseline.json")):
        out = root / cmd
        code = main([
            cmd, "--config", str(run_dir["config"]),
            "--checkpoint", str(run_dir["ckpt"]), "--out", str(out),
        ])
        assert code == 0
        rows[cmd] = out / fname
    return rows


def test_evaluate_row_contents(eval_rows):
    row = json.loads(eval_rows["evaluate"].read_text())
    assert row["method"] == "prflow"
    assert row["dataset"] == "synthetic:blocks"
    assert row["missing_rate"] == 0.5
    for key in ("rmse", "fd", "scc", "acc_imputed", "acc_reference"):
        assert np.isfinite(row[key])
    assert row["rmse"] > 0
    assert row["fd"] >= 0
    assert 0.0 <= row["scc"] <= 1.0


def test_baseline_row_contents(eval_rows):
    row = json.loads(eval_rows["baseline"].read_text())
    assert row["method"] == "nearest-neighbor"
    assert row["rmse"] > 0


def test_evaluate_rerun_is_byte_identical(run_dir, tmp_path):
    paths = []
    for name in ("x", "y"):
        out = tmp_path / name
        code = main([
            "evaluate", "--config", str(run_dir["config"]),
            "--checkpoint", str(run_dir["ckpt"]), "--out", str(out),
        ])
        assert code == 0
        paths.append(out / "evaluate.json")
    assert paths[0].read_bytes() == paths[1].read_bytes()


# -- report -------------------------------------------------------------------------------


def test_report_grid(eval_rows, tmp_path, capsys):
    # fake a second missing rate so the grid has two sorted columns
    row = json.loads(eval_rows["evaluate"].read_text())
    row_hi = dict(row, missing_rate=0.9, rmse=row["rmse"] + 0.1)
    hi_path = tmp_path / "hi.json"
    hi_path.write_text(json.dumps(row_hi))
    out = tmp_path / "rep"
    code = main([
        "report", "--out", str(out),
        str(eval_rows["evaluate"]), str(eval_rows["baseline"]), str(hi_path),
    ])
    assert code == 0
    text = (out / "report.txt").read_text()
    assert capsys.readouterr().out == text
    lines = text.strip().splitlines()
    header = lines[0]
    assert header.index("0.5") < header.index("0.9")
    body = lines[2:]
    # per (dataset, method): rmse, fd, scc rows in that order
    prflow_rows = [l for l in body if " prflow " in l]
    assert [l.split()[2] for l in prflow_rows] == ["rmse", "fd", "scc"]
    nn_rows = [l for l in body if "nearest-neighbor" in l]
    assert [l.split()[2] for l in nn_rows] == ["rmse", "fd", "scc"]
    # the baseline has no 0.9 column: its cells show a dash there
    assert all(l.rstrip().endswith("-") for l in nn_rows)
    rmse_row = prflow_rows[0]
    assert f"{row['rmse']:.6f}" in rmse_row
    assert f"{row_hi['rmse']:.6f}" in rmse_row


def test_report_without_inputs_is_usage_error(tmp_path):
    assert main(["report", "--out", str(tmp_path / "rep")]) == 1


def test_report_missing_input_file(tmp_path):
    assert main(["report", "--out", str(tmp_path / "rep"), str(tmp_path / "nope.json")]) == 1


# -- dataset resolution -------------------------------------------------------------------


def test_mnist_style_directory_loading(tmp_path):
    # a directory with the four standard IDX files, tiny and synthetic
    rng = np.random.default_rng(0)
    d = tmp_path / "mnist"
    d.mkdir()
    train_imgs = rng.integers(0, 256, size=(12, 6, 6), dtype=np.uint8)
    test_imgs = rng.integers(0, 256, size=(6, 6, 6), dtype=np.uint8)
    save_idx(d / "train-images-idx3-ubyte", train_imgs)
    save_idx(d / "train-labels-idx1-ubyte", rng.integers(0, 10, size=12, dtype=np.uint8))
    save_idx(d / "t10k-images-idx3-ubyte", test_imgs)
    save_idx(d / "t10k-labels-idx1-ubyte", rng.integers(0, 10, size=6, dtype=np.uint8))

    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({
        **{k: v for k, v in BASE_CONFIG.items() if k not in ("dataset", "image_size", "train_size", "test_size")},
        "dataset": str(d), "train_size": 10, "max_rounds": 1,
    }))
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    state = load_checkpoint(out / "checkpoint.prflow")
    assert state.imputed_train.shape == (10, 36)


def test_idx_path_dataset_with_labels(tmp_path):
    imgs = tmp_path / "imgs.idx"
    labs = tmp_path / "labs.idx"
    rng = np.random.default_rng(1)
    save_idx(imgs, rng.integers(0, 256, size=(10, 4, 4), dtype=np.uint8))
    save_idx(labs, rng.integers(0, 10, size=10, dtype=np.uint8))
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({
        "dataset": str(imgs), "dataset_labels": str(labs),
        "batch_size": 4, "max_rounds": 1, "num_coupling_layers": 2,
        "coupling_hidden": 8, "imputer_hidden": 8, "missing_rate": 0.5,
    }))
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0


def test_synthetic_unknown_kind_is_runtime_error(tmp_path, capsys):
    code = main([
        "train", "--dataset", "synthetic:fractal", "--out", str(tmp_path / "o"),
        "--max-rounds", "1",
    ])
    assert code == 2
    assert "fractal" in capsys.readouterr().err


# -- console script ---------------------------------------------------------------------


def test_installed_entry_point_reports_usage():
    proc = subprocess.run(
        [sys.executable, "-m", "prflow.cli"], capture_output=True, text=True
    )
    assert proc.returncode == 1
    assert "usage error" in proc.stderr
