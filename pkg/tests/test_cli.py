import hashlib
import json
import subprocess
import sys
import time

import pytest

from ismsdae import cli
from ismsdae.config import RunConfig, config_from_dict, load_config
from ismsdae.dataset import load_dataset
from ismsdae.errors import ParameterError, TrainingDivergenceError
from ismsdae.nn import load_model
from ismsdae.report import read_csv

TINY = {
    "seed": 3,
    "synth": {"duration_s": 0.003, "captures_per_profile": 1, "eval_captures_per_profile": 1},
    "dataset": {"per_class": 100, "eval_per_class": 40},
    "sdae": {"dae_train": {"epochs": 2, "batch_size": 32}, "grid_rhos": [0.1],
             "grid_lams": [0.1, 1.0]},
    "head": {"epochs": 2},
    "finetune": {"epochs": 3, "dropout_rate": 0.2},
    "reference": {"epochs": 3},
}


def write_config(path, **overrides):
    cfg = json.loads(json.dumps(TINY))
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return str(path)


def digest_tree(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    conf = write_config(root / "tiny.json")
    out = root / "run"
    assert cli.main(["run", "--config", conf, "--out", str(out)]) == 0
    return conf, out


def test_config_defaults_and_overrides(tmp_path):
    cfg = load_config()
    assert cfg.dataset.burst_len == 128 and cfg.snr_grid == (0, 10, 20, 30, 40, 50)
    c = config_from_dict({"seed": 5, "dataset": {"per_class": 7}})
    assert c.seed == 5 and c.dataset.per_class == 7 and c.dataset.eval_per_class == 500
    with pytest.raises(ParameterError):
        config_from_dict({"dataset": {"perclass": 7}})
    with pytest.raises(ParameterError):
        load_config(tmp_path / "missing.json")
    # the digest ignores where outputs go
    assert RunConfig(out="a").digest() == RunConfig(out="b").digest()
    assert RunConfig(seed=1).digest() != RunConfig(seed=2).digest()


def test_run_layout(tiny_run):
    _, out = tiny_run
    names = {p.name for p in (out / "captures" / "train").glob("*.sigmeta.json")}
    assert {n.split("_")[0] for n in names} == {"BT", "WIFI", "NRF", "ZBEE"}
    for part in ("train", "valid", "eval_pool"):
        assert (out / "datasets" / f"{part}_random_baseband.ismb").exists()
    for stem in ("sdae_random_baseband", "reference_random_baseband"):
        assert (out / "models" / f"{stem}.ismn").exists()
        assert (out / "models" / f"{stem}.manifest.json").exists()
        assert (out / "models" / f"{stem}.curve.csv").exists()
    for i in (1, 2, 3):
        assert (out / "models" / f"sdae_random_baseband.stage{i}.ismn").exists()


def test_dataset_counts(tiny_run):
    _, out = tiny_run
    train = load_dataset(out / "datasets" / "train_random_baseband.ismb")
    valid = load_dataset(out / "datasets" / "valid_random_baseband.ismb")
    pool = load_dataset(out / "datasets" / "eval_pool_random_baseband.ismb")
    assert len(train) + len(valid) == 400
    assert list(train.class_counts() + valid.class_counts()) == [100] * 4
    assert list(pool.class_counts()) == [40] * 4
    assert train.snr_db == 50.0 and pool.snr_db is None
    assert train.burst_mode == "random" and train.channel_mode == "baseband"


def test_models_report_multiplications(tiny_run):
    _, out = tiny_run
    sdae = load_model(out / "models" / "sdae_random_baseband.ismn")
    ref = load_model(out / "models" / "reference_random_baseband.ismn")
    assert sdae.dims == (256, 196, 96, 20, 4) and sdae.meta["multiplications"] == 70992
    assert ref.dims == (256, 256, 128, 64, 32, 4) and ref.meta["multiplications"] == 108672
    manifest = (out / "models" / "sdae_random_baseband.manifest.json").read_bytes()
    assert sdae.meta["manifest_sha256"] == hashlib.sha256(manifest.rstrip(b"\n")).hexdigest()
    curve = read_csv(out / "models" / "sdae_random_baseband.curve.csv")
    assert len(curve) == 4 and "acc_0dB" in curve[0] and "acc_20dB" in curve[0]


def test_outputs_reference_config_hash(tiny_run):
    conf, out = tiny_run
    digest = load_config(conf).digest()
    for m in (out / "captures" / "train" / "manifest.json",
              out / "captures" / "eval" / "manifest.json",
              out / "datasets" / "manifest.json",
              out / "reports" / "run_info.json",
              out / "models" / "sdae_random_baseband.manifest.json"):
        assert json.loads(m.read_text())["config_sha256"] == digest
    listed = json.loads((out / "datasets" / "manifest.json").read_text())["files"]
    assert set(listed) == {p.name for p in (out / "datasets").glob("*.ismb")}


def test_eval_report(tiny_run):
    _, out = tiny_run
    rows = read_csv(out / "reports" / "accuracy_vs_snr.csv")
    assert len(rows) == 12
    assert {r["model_id"] for r in rows} == {"sdae_random_baseband", "reference_random_baseband"}
    assert (out / "reports" / "confusion_sdae_random_baseband_0dB.csv").exists()
    assert (out / "reports" / "accuracy_vs_snr.svg").exists()


def test_eval_two_point_sweep(tiny_run, tmp_path):
    conf, out = tiny_run
    import shutil
    dst = tmp_path / "copy"
    shutil.copytree(out, dst)
    assert cli.main(["eval", "--config", conf, "--out", str(dst), "--snr", "0,50"]) == 0
    rows = read_csv(dst / "reports" / "accuracy_vs_snr.csv")
    assert sorted({r["snr_db"] for r in rows}) == ["0", "50"]
    model = str(dst / "models" / "reference_random_baseband.ismn")
    assert cli.main(["eval", model, "--config", conf, "--out", str(dst), "--snr", "10"]) == 0
    assert len(read_csv(dst / "reports" / "accuracy_vs_snr.csv")) == 1


def test_eval_dimension_mismatch(tiny_run, tmp_path, capsys):
    conf, out = tiny_run
    from ismsdae.nn import DenseNetwork, save_model
    import numpy as np
    bad = tmp_path / "bad.ismn"
    save_model(DenseNetwork.build((10, 4), "relu", "softmax", np.random.default_rng(0)), bad)
    assert cli.main(["eval", str(bad), "--config", conf, "--out", str(out)]) == cli.EXIT_DATA
    assert "model input 10" in capsys.readouterr().err


def test_synth_and_dataset_repeatable(tmp_path):
    conf = write_config(tmp_path / "c.json", dataset={"per_class": 30, "eval_per_class": 10})
    a, b = tmp_path / "new" / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["synth", "--config", conf, "--out", str(out)]) == 0
        assert cli.main(["dataset", "--config", conf, "--out", str(out)]) == 0
    assert digest_tree(a) == digest_tree(b)
    assert cli.main(["dataset", "--config", conf, "--out", str(a), "--seed", "4"]) == 0
    assert digest_tree(a) != digest_tree(b)


def test_start_mode_synthesizes_enough(tmp_path):
    conf = write_config(tmp_path / "c.json", dataset={"per_class": 60, "eval_per_class": 20})
    out = tmp_path / "s"
    assert cli.main(["synth", "--config", conf, "--out", str(out), "--burst-mode", "start"]) == 0
    assert cli.main(["dataset", "--config", conf, "--out", str(out), "--burst-mode",
                     "start"]) == 0
    assert cli.main(["dataset", "--config", conf, "--out", str(out)]) == 0
    start = out / "datasets" / "train_start_baseband.ismb"
    rand = out / "datasets" / "train_random_baseband.ismb"
    assert load_dataset(start).burst_mode == "start"
    assert load_dataset(rand).burst_mode == "random"
    assert start.read_bytes() != rand.read_bytes()


def test_grid_search(tiny_run, tmp_path, capsys):
    conf, out = tiny_run
    import shutil
    dst = tmp_path / "g"
    shutil.copytree(out / "datasets", dst / "datasets")
    assert cli.main(["train", "--grid-search", "--config", conf, "--out", str(dst)]) == 0
    rows = read_csv(dst / "models" / "grid_search_random_baseband.csv")
    assert [(r["rho"], r["lambda"]) for r in rows] == [("0.1", "0.1"), ("0.1", "1.0")]
    assert "rho" in capsys.readouterr().out


def test_exit_codes(tmp_path, monkeypatch):
    conf = write_config(tmp_path / "c.json")
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE
    assert cli.main([]) == cli.EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text('{"dataset": {"nope": 1}}')
    assert cli.main(["synth", "--config", str(bad)]) == cli.EXIT_USAGE
    assert cli.main(["dataset", "--config", conf, "--out", str(tmp_path / "empty")]) == \
        cli.EXIT_DATA
    assert cli.main(["eval", "--config", conf, "--out", str(tmp_path / "empty")]) == cli.EXIT_DATA

    def diverge(*a, **k):
        raise TrainingDivergenceError("loss became nan", 4, 2)

    out = tmp_path / "d"
    assert cli.main(["synth", "--config", conf, "--out", str(out)]) == 0
    assert cli.main(["dataset", "--config", conf, "--out", str(out)]) == 0
    monkeypatch.setattr(cli, "train_sdae_classifier", diverge)
    assert cli.main(["train", "--config", conf, "--out", str(out)]) == cli.EXIT_TRAIN


def test_selftest(capsys):
    t0 = time.perf_counter()
    assert cli.main(["selftest"]) == 0
    assert time.perf_counter() - t0 < 60
    text = capsys.readouterr().out
    assert text.count("PASS") == 6 and "FAIL" not in text
    assert cli.main(["selftest", "--perturb-kl"]) != 0
    lines = capsys.readouterr().out.splitlines()
    failed = [l for l in lines if l.startswith("FAIL")]
    assert len(failed) == 1 and "kl-oracle" in failed[0]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "ismsdae", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    for sub in ("synth", "dataset", "train", "eval", "run", "selftest"):
        assert sub in res.stdout
