import json
import os

import numpy as np
import pytest

from subspace_margins.cli import run
from subspace_margins.datasets import LabeledDataset, load_dataset, write_idx
from subspace_margins.io import file_sha256, read_csv

T1_SMALL = {"kind": "t1", "epsilon": 5.0, "sigma": 1.0, "n_samples": 300, "dim": 12, "n_test": 40}
SMALL_MLP = {"kind": "mlp", "hidden": [16, 16], "init": "uniform"}


def write_config(path, cfg):
    with open(path, "w") as f:
        json.dump(cfg, f)
    return str(path)


def cli(tmp_path, verb, cfg, out, *extra):
    cpath = write_config(tmp_path / f"{verb}-{out}.json", cfg)
    return run([verb, "--config", cpath, "--out", str(tmp_path / out), *extra])


def csv_bytes(directory):
    out = {}
    for name in sorted(os.listdir(directory)):
        if name.endswith((".csv", ".json")) and name != "run.log":
            with open(os.path.join(directory, name), "rb") as f:
                out[name] = f.read()
    return out


@pytest.fixture
def t1_data(tmp_path):
    assert cli(tmp_path, "gen-data", {"seed": 3, "dataset": T1_SMALL}, "data") == 0
    return tmp_path / "data"


def test_gen_data_reproducible(tmp_path, t1_data):
    assert cli(tmp_path, "gen-data", {"seed": 3, "dataset": T1_SMALL}, "again") == 0
    for part in ("train", "test"):
        a, b = load_dataset(str(t1_data / part)), load_dataset(str(tmp_path / "again" / part))
        assert np.array_equal(a.features, b.features) and np.array_equal(a.rotation, b.rotation)
    info = json.loads((t1_data / "dataset.json").read_text())
    assert info["config"]["dataset"]["epsilon"] == 5.0 and info["n_test"] == 40


def test_train_history_and_byte_identical_rerun(tmp_path, t1_data):
    cfg = {"seed": 1, "data": str(t1_data / "train"), "test_data": str(t1_data / "test"),
           "model": SMALL_MLP, "train": {"epochs": 3, "batch_size": 32}}
    assert cli(tmp_path, "train", cfg, "a") == 0
    assert cli(tmp_path, "train", cfg, "b") == 0
    rows = read_csv(str(tmp_path / "a" / "history.csv"))
    assert len(rows) == 3
    assert csv_bytes(tmp_path / "a") == csv_bytes(tmp_path / "b")
    assert file_sha256(str(tmp_path / "a" / "checkpoint.json")) == file_sha256(str(tmp_path / "b" / "checkpoint.json"))
    assert (tmp_path / "a" / "history.csv").read_text().startswith("#")


class Interrupted(Exception):
    pass


@pytest.mark.parametrize("verb", ["train", "advtrain"])
def test_resume_after_interrupt_matches_uninterrupted(tmp_path, t1_data, monkeypatch, verb):
    import subspace_margins.cli as cli_mod

    cfg = {"seed": 1, "data": str(t1_data / "train"), "model": SMALL_MLP,
           "train": {"epochs": 4, "batch_size": 32, "momentum": 0.9}}
    if verb == "advtrain":
        cfg.update(constraint={"radius": 0.3, "box": None}, attack={"pgd_steps": 2})
    assert cli(tmp_path, verb, cfg, "full") == 0

    real_save = cli_mod.save_checkpoint

    def save_then_die(path, model, state=None, config=None, extra=None):
        real_save(path, model, state, config, extra)
        if state is not None and state.epoch == 2:
            raise Interrupted

    monkeypatch.setattr(cli_mod, "save_checkpoint", save_then_die)
    with pytest.raises(Interrupted):
        cli(tmp_path, verb, cfg, "part")
    monkeypatch.setattr(cli_mod, "save_checkpoint", real_save)
    assert cli(tmp_path, verb, cfg, "part") == 0
    assert csv_bytes(tmp_path / "part") == csv_bytes(tmp_path / "full")


def test_advtrain_energy_rows(tmp_path, digits_idx):
    img, lbl = digits_idx
    gen = {"seed": 0, "dataset": {"kind": "idx", "images": img, "labels": lbl, "classes": [0, 1], "n_test": 50}}
    assert cli(tmp_path, "gen-data", gen, "digits") == 0
    cfg = {"seed": 2, "data": str(tmp_path / "digits" / "train"), "model": {"hidden": [16]},
           "train": {"epochs": 2, "batch_size": 64}, "attack": {"pgd_steps": 3},
           "constraint": {"kind": "flipped_l2_ball_box", "radius": 0.5},
           "energy_scheme": {"kind": "grid", "K": 2, "T": 2}}
    # the flipped constraint needs flipped data
    gen_f = dict(gen, dataset=dict(gen["dataset"], transforms=["flip"]))
    assert cli(tmp_path, "gen-data", gen_f, "flipped") == 0
    cfg["data"] = str(tmp_path / "flipped" / "train")
    assert cli(tmp_path, "advtrain", cfg, "adv") == 0
    rows = read_csv(str(tmp_path / "adv" / "perturbations.csv"))
    n_train = len(load_dataset(str(tmp_path / "flipped" / "train")))
    assert len(rows) == 2 * n_train
    for r in rows:
        e = [float(v) for k, v in r.items() if k.startswith("energy_")]
        if all(np.isfinite(e)):
            assert sum(e) <= 1 + 1e-9
    assert len(read_csv(str(tmp_path / "adv" / "history.csv"))) == 2


def _measure_setup(tmp_path, t1_data):
    cfg = {"seed": 1, "data": str(t1_data / "train"), "model": SMALL_MLP, "train": {"epochs": 2, "batch_size": 32}}
    assert cli(tmp_path, "train", cfg, "model") == 0
    return str(tmp_path / "model" / "checkpoint.json")


def test_measure_table1_four_rows(tmp_path, t1_data):
    ck = _measure_setup(tmp_path, t1_data)
    cfg = {"seed": 0, "checkpoint": ck, "data": str(t1_data / "test"), "n_observations": 20,
           "scheme": {"kind": "table1", "S": 3}}
    assert cli(tmp_path, "measure", cfg, "m1") == 0
    assert cli(tmp_path, "measure", cfg, "m2") == 0
    summ = read_csv(str(tmp_path / "m1" / "summary.csv"))
    assert [r["subspace_label"] for r in summ] == ["u1", "u1_perp", "S_orth", "S_rand"]
    assert csv_bytes(tmp_path / "m1") == csv_bytes(tmp_path / "m2")


def test_measure_diagonal_28x28_has_21_rows(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(6, 784))
    ds = LabeledDataset(np.rint(x * 255) / 255, np.array([0, 1, 0, 1, 0, 1]), image_shape=(1, 28, 28))
    write_idx(ds, str(tmp_path / "i.idx"), str(tmp_path / "l.idx"))
    gen = {"dataset": {"kind": "idx", "images": str(tmp_path / "i.idx"), "labels": str(tmp_path / "l.idx")}}
    assert cli(tmp_path, "gen-data", gen, "d") == 0
    tr = {"data": str(tmp_path / "d" / "train"), "model": {"hidden": [8]}, "train": {"epochs": 1}}
    assert cli(tmp_path, "train", tr, "m") == 0
    cfg = {"checkpoint": str(tmp_path / "m" / "checkpoint.json"), "data": str(tmp_path / "d" / "train"),
           "scheme": {"kind": "diagonal", "K": 8, "T": 1}, "attack": {"max_iter": 5}}
    assert cli(tmp_path, "measure", cfg, "meas") == 0
    assert len(read_csv(str(tmp_path / "meas" / "summary.csv"))) == 21


def test_measure_empty_observations_error(tmp_path, t1_data):
    ck = _measure_setup(tmp_path, t1_data)
    cfg = {"checkpoint": ck, "data": str(t1_data / "test"), "n_observations": 0, "scheme": {"kind": "table1"}}
    assert cli(tmp_path, "measure", cfg, "bad") == 2


def test_theory_verb(tmp_path):
    cfg = {"seed": 0, "t1": {"n_samples": 400, "dim": 20}, "S": 3, "reps": 200}
    assert cli(tmp_path, "theory", cfg, "th") == 0
    rep = json.loads((tmp_path / "th" / "theory_report.json").read_text())
    assert rep["pass"] is True
    assert len(read_csv(str(tmp_path / "th" / "xi2_samples.csv"))) == 200
    bad = dict(cfg, reference_epsilon=1.0)
    assert cli(tmp_path, "theory", bad, "th_bad") == 0
    assert json.loads((tmp_path / "th_bad" / "theory_report.json").read_text())["pass"] is False
    deg = dict(cfg, t1={"sigma": 0.0, "n_samples": 100, "dim": 10}, reps=5)
    assert cli(tmp_path, "theory", deg, "th_deg") == 0
    assert json.loads((tmp_path / "th_deg" / "theory_report.json").read_text())["degenerate"] is True


def test_seed_flag_overrides(tmp_path):
    cfg = {"seed": 0, "t1": {"n_samples": 100, "dim": 10}, "reps": 5}
    assert cli(tmp_path, "theory", cfg, "s0") == 0
    assert cli(tmp_path, "theory", cfg, "s7", "--seed", "7") == 0
    a = (tmp_path / "s0" / "xi2_samples.csv").read_text().splitlines()[2:]
    b = (tmp_path / "s7" / "xi2_samples.csv").read_text().splitlines()[2:]
    assert a != b


@pytest.mark.parametrize("cfg", [
    {"seed": 0, "t1": {"n_samples": 100}, "reps": 5, "typo_key": 1},
    {"seed": 0, "t1": {"n_samples": "many"}},
    {"seed": "zero"},
    {"seed": 0, "reps": 0},
])
def test_invalid_config_exit_2(tmp_path, cfg):
    assert cli(tmp_path, "theory", cfg, "x") == 2


def test_missing_inputs_exit_2(tmp_path):
    assert run(["theory", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    cfg = {"checkpoint": str(tmp_path / "none.json"), "data": str(tmp_path / "none"), "scheme": {"kind": "table1"}}
    assert cli(tmp_path, "measure", cfg, "o2") == 2


def test_runtime_failure_exit_1(tmp_path):
    x = np.array([[1e150, 1.0], [-1e150, 1.0]])
    from subspace_margins.datasets import save_dataset

    save_dataset(LabeledDataset(x, np.array([1, -1])), str(tmp_path / "huge"))
    cfg = {"data": str(tmp_path / "huge"), "model": {"hidden": [4]}, "train": {"epochs": 2, "max_lr": 1e10}}
    with np.errstate(all="ignore"):
        assert cli(tmp_path, "train", cfg, "div") == 1


def test_relative_paths_resolve_against_config(tmp_path, t1_data):
    sub = tmp_path / "cfgdir"
    sub.mkdir()
    cfg = {"data": "../data/train", "model": SMALL_MLP, "train": {"epochs": 1}}
    cpath = write_config(sub / "train.json", cfg)
    assert run(["train", "--config", cpath, "--out", str(tmp_path / "rel")]) == 0


def test_csv_formats_numpy_scalars():
    from subspace_margins.io import csv_text

    text = csv_text(["a", "b", "c"], [(np.float64(0.1), np.int64(3), np.float32(0.5))])
    assert text.splitlines()[1] == "0.1,3,0.5"
