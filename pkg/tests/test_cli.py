import json

import numpy as np
import pytest

from netvlad.cli import EXIT_CHECK_FAILED, EXIT_OK, EXIT_VALIDATION, main, parse_run_config
from netvlad.descriptors import ValidationError, load_dataset
from netvlad.pooling import load_params

SMALL = {
    "world": {"n_places": 30, "n_descriptors": 16, "dim": 8, "prototypes_per_place": 8, "n_landmarks": 8,
              "n_transients": 2, "n_distractors": 6, "distractor_pool": 32, "landmark_dims": 4,
              "transient_dims": 2},
    "train": {"epochs": 2, "clusters": 4, "init_sample": 2000, "lr": 0.01},
    "eval": {"n_values": [1, 5, 10]},
    "seed": 11,
}


def _last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def test_gen_data_standard_and_hash_stable(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "a")]) == EXIT_OK
    first = _last_json(capsys)
    assert first["images"] == 1200
    assert first["splits"] == {"train": 396, "val": 402, "test": 402}
    assert main(["gen-data", "--out", str(tmp_path / "b")]) == EXIT_OK
    assert _last_json(capsys)["hash"] == first["hash"]
    ds = load_dataset(tmp_path / "a")
    assert set(ds.splits) == {"train", "val", "test"}


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["gen-data", "--config", str(missing), "--out", str(tmp_path / "x")]) == EXIT_VALIDATION
    assert str(missing) in capsys.readouterr().err


def test_unknown_keys_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"world": {"n_placez": 3}}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "x")]) == EXIT_VALIDATION
    with pytest.raises(ValidationError):
        parse_run_config({"optimizer": {}})
    with pytest.raises(ValidationError):
        parse_run_config({}, precision="half")


def test_seed_flows_everywhere():
    cfg = parse_run_config({"seed": 4}, seed=9, precision="double")
    assert cfg.world.seed == cfg.train.seed == 9
    assert cfg.train.precision == "double"


def test_train_eval_export_round_trip(tmp_path, small_config, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["gen-data", "--config", small_config, "--out", str(data)]) == EXIT_OK
    assert main(["train", "--config", small_config, "--data", str(data), "--out", str(run)]) == EXIT_OK
    trained = _last_json(capsys)
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3
    rec = json.loads(lines[-1])
    assert {"epoch", "loss", "lr", "cache_rebuilds", "recall@1", "recall@5", "recall@10"} <= set(rec)
    assert (run / "epoch_000.nvlad").is_file() and (run / f"epoch_{trained['best_epoch']:03d}.nvlad").is_file()
    meta = json.loads((run / "best.nvlad.json").read_text())
    assert meta["seed"] == 11 and meta["epoch"] == trained["best_epoch"]

    best = str(run / "best.nvlad")
    assert main(["eval", "--config", small_config, "--data", str(data), "--checkpoint", best,
                 "--out", str(tmp_path / "e1")]) == EXIT_OK
    for fmt, name in (("container", "x.nvlad"), ("npz", "x.npz")):
        exported = tmp_path / name
        assert main(["export", "--checkpoint", best, "--format", fmt, "--out", str(exported)]) == EXIT_OK
        assert load_params(exported).equal(load_params(best))
        out = tmp_path / f"e_{fmt}"
        assert main(["eval", "--config", small_config, "--data", str(data), "--checkpoint", str(exported),
                     "--out", str(out)]) == EXIT_OK
        assert (out / "report.json").read_bytes() == (tmp_path / "e1" / "report.json").read_bytes()
        assert (out / "report_curve.csv").read_bytes() == (tmp_path / "e1" / "report_curve.csv").read_bytes()


def test_eval_baseline_with_whitening_and_nms(tmp_path, small_config, capsys):
    data = tmp_path / "data"
    main(["gen-data", "--config", small_config, "--out", str(data)])
    out = tmp_path / "ev"
    code = main(["eval", "--config", small_config, "--data", str(data), "--pooling", "sum",
                 "--whiten-dim", "4", "--nms-radius", "--out", str(out)])
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["options"]["nms_radius"] == 10.0 and report["options"]["whitening_dim"] == 4
    assert (out / "whitening.nvw").is_file()
    recall = report["recall"]["recall"]
    assert np.all(np.diff(recall) >= 0)


def test_eval_netvlad_requires_checkpoint(tmp_path, small_config):
    data = tmp_path / "data"
    main(["gen-data", "--config", small_config, "--out", str(data)])
    assert main(["eval", "--data", str(data), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--instances", "3"]) == EXIT_OK
    summary = _last_json(capsys)
    assert summary["failed"] == 0 and summary["max_relative_error"] < 1e-6
    assert EXIT_CHECK_FAILED not in (EXIT_OK, EXIT_VALIDATION)
