import csv
import hashlib
import json

import numpy as np
import pytest

from csialm import channel_sim as cs
from csialm import training as tr
from csialm.backbone import StudentConfig, StudentModel
from csialm.checkpoint import load_checkpoint, save_checkpoint
from csialm.config import config_hash, default_config, load_config, validate
from csialm.errors import ConfigError, ContractError
from csialm.harness import TIMING_COLUMNS, load_model, main


def tiny_config(**dataset):
    c = default_config()
    c["scenario"].update(M=2, F=4, T_history=8, P=4)
    c["dataset"] = {"n_train": 20, "n_val": 10, "n_test": 20, **dataset}
    c["teacher"].update(layers=1, hidden=16, heads=2, vocab=128, pretrain_steps=5, cssa_dim=4, dict_size=8,
                        anchors=4, prompts=2)
    c["student"].update(layers=1, hidden=16, heads=2, prompt_len=2)
    c["train"].update(epochs=2, batch_size=16)
    c["distill"].update(epochs=2, batch_size=16, relation_heads=2)
    c["eval"].update(snr_grid_db=[0, 10], latency_runs=3, embed_samples=5)
    c["ablation"]["variants"] = ["none", "no_prompts"]
    return c


def write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def run(*argv):
    assert main([str(a) for a in argv]) == 0


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "cfg.json", tiny_config())
    out = root / "out"
    run("generate", "--config", cfg, "--out", out)
    run("train", "--config", cfg, "--out", out)
    run("distill", "--config", cfg, "--out", out)
    run("eval", "--config", cfg, "--out", out)
    return root, cfg, out


def test_generate_is_deterministic(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", tiny_config())
    run("generate", "--config", cfg, "--out", tmp_path / "a")
    run("generate", "--config", cfg, "--out", tmp_path / "b")
    for name in ("dataset.bin", "dataset.bin.json"):
        assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name)


def test_tdd_sidecar_has_equal_carriers(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", tiny_config())
    run("generate", "--config", cfg, "--out", tmp_path)
    meta = json.loads((tmp_path / "dataset.bin.json").read_text())
    assert meta["f_uplink"] == meta["f_downlink"]


def test_fdd_sidecar_has_offset_carrier(tmp_path):
    c = tiny_config()
    c["scenario"].update(duplex="FDD", delta_f_fdd=120e6)
    run("generate", "--config", write_cfg(tmp_path / "c.json", c), "--out", tmp_path)
    meta = json.loads((tmp_path / "dataset.bin.json").read_text())
    assert meta["f_downlink"] - meta["f_uplink"] == pytest.approx(120e6)


@pytest.mark.parametrize("section,key", [("dataset", "n_test"), ("train", "lambda1"), ("teacher", "corpus")])
def test_missing_key_is_named(tmp_path, capsys, section, key):
    c = tiny_config()
    del c[section][key]
    rc = main(["train", "--config", write_cfg(tmp_path / "c.json", c), "--out", str(tmp_path)])
    assert rc != 0
    assert f"{section}.{key}" in capsys.readouterr().err


def test_unknown_and_mistyped_keys():
    c = tiny_config()
    c["train"]["epoch"] = 3
    with pytest.raises(ConfigError, match="train.epoch"):
        validate(c, "train")
    c = tiny_config()
    c["train"]["epochs"] = "3"
    with pytest.raises(ConfigError, match="train.epochs"):
        validate(c, "train")
    c = tiny_config()
    c["scenario"]["Mx"] = 2
    with pytest.raises(ConfigError, match="Mx"):
        validate(c, "generate")
    c = tiny_config()
    c["schema_version"] = 99
    with pytest.raises(ConfigError, match="schema_version"):
        validate(c, "generate")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json", "generate")


def test_ablation_hashes_are_distinct():
    hashes = set()
    for variant in ("none", "no_pretrain", "no_cross_modal", "no_prompts"):
        c = tiny_config()
        c["teacher"]["ablation"] = variant
        hashes.add(config_hash(c))
    assert len(hashes) == 4
    assert config_hash(tiny_config()) == config_hash(tiny_config())
    assert config_hash(tiny_config(), few_shot=0.1) != config_hash(tiny_config())


def test_outputs_carry_config_hash(workspace):
    _, _, out = workspace
    for name in ("results.csv", "velocity.csv", "snr.csv", "metrics_teacher.csv", "metrics_student.csv"):
        rows = read_rows(out / name)
        assert rows and len({r["config_hash"] for r in rows}) == 1
        assert all(np.isfinite(float(r["nmse_db"])) for r in rows)


def test_rerun_reproduces_numeric_columns(workspace, tmp_path):
    _, cfg, out = workspace
    run("train", "--config", cfg, "--out", tmp_path)
    run("eval", "--config", cfg, "--out", tmp_path, "--checkpoint", f"teacher={tmp_path / 'teacher.ckpt'}")
    for name in ("metrics_teacher.csv",):
        a, b = read_rows(out / name), read_rows(tmp_path / name)
        strip = lambda rows: [{k: v for k, v in r.items() if k not in TIMING_COLUMNS} for r in rows]
        assert strip(a) == strip(b)
    teacher_rows = [r for r in read_rows(out / "results.csv") if r["model"] == "teacher"]
    again = [r for r in read_rows(tmp_path / "results.csv") if r["model"] == "teacher"]
    assert [r["nmse_db"] for r in teacher_rows] == [r["nmse_db"] for r in again]


def test_resume_continues_epoch_counter(tmp_path):
    c = tiny_config()
    c["train"]["epochs"] = 1
    cfg = write_cfg(tmp_path / "c.json", c)
    run("train", "--config", cfg, "--out", tmp_path)
    c["train"]["epochs"] = 3
    cfg = write_cfg(tmp_path / "c.json", c)
    run("train", "--config", cfg, "--out", tmp_path, "--resume")
    epochs = [int(r["epoch"]) for r in read_rows(tmp_path / "metrics_teacher.csv") if r["split"] == "train"]
    assert epochs == [0, 1, 2]
    _, meta = load_checkpoint(tmp_path / "teacher.ckpt")
    assert meta["run"]["epochs_run"] == 3
    assert meta["run"]["adam_step"] == meta["run"]["steps"] == 3 * 3  # 40 sequences in batches of 16
    # an uninterrupted three-epoch run lands on the same weights
    straight = tmp_path / "straight"
    run("train", "--config", cfg, "--out", straight)
    a, _ = load_checkpoint(tmp_path / "teacher.ckpt")
    b, _ = load_checkpoint(straight / "teacher.ckpt")
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k], err_msg=k)


def test_few_shot_takes_exact_stratified_fraction(tmp_path):
    c = tiny_config(n_train=100)
    cfg = write_cfg(tmp_path / "c.json", c)
    run("train", "--config", cfg, "--out", tmp_path, "--few-shot", "0.1")
    ds = cs.make_dataset(cs.ScenarioConfig.from_dict(c["scenario"]), 100, 10, 20)
    sub = tr.few_shot_subset(ds.train, 0.1, 0)
    assert len(sub) == 10
    assert sorted(sub.velocity_kmh) == sorted(cs.DEFAULT_VELOCITIES_KMH)
    _, meta = load_checkpoint(tmp_path / "teacher.ckpt")
    assert meta["run"]["steps"] == 2 * 2  # 10 samples x M=2 = 20 sequences -> 2 batches of 16


def test_few_shot_flag_is_validated(tmp_path):
    with pytest.raises(SystemExit):
        main(["train", "--config", "x.json", "--few-shot", "1.5"])


def test_persistence_is_exact_on_static_channel(tmp_path, capsys):
    c = tiny_config()
    c["scenario"]["velocity"] = 0.0
    cfg = write_cfg(tmp_path / "c.json", c)
    ds = cs.make_dataset(cs.ScenarioConfig.from_dict(c["scenario"]), 20, 10, 20, grid=(0.0,))
    cs.write_dataset(tmp_path / "dataset.bin", ds)
    student = StudentModel(4, StudentConfig(layers=1, hidden=16, heads=2, prompt_len=2))
    from csialm.harness import save_model

    class Ctx:
        hash, seed = "h", 0
    save_model(tmp_path / "s.ckpt", student, "student",
               dict(layers=1, hidden=16, heads=2, prompt_len=2, ffn_mult=4, max_positions=64), 4, Ctx)
    c["eval"]["snr_velocity_kmh"] = 0.0
    cfg = write_cfg(tmp_path / "c.json", c)
    run("eval", "--config", cfg, "--out", tmp_path)
    rows = {(r["model"], r["experiment"], r["condition"]): float(r["nmse_db"])
            for r in read_rows(tmp_path / "results.csv")}
    assert rows[("persistence", "test", "all")] == -100.0
    assert rows[("zero", "test", "all")] == 0.0


def test_zero_row_and_per_bin_recomputation(workspace):
    _, _, out = workspace
    results = read_rows(out / "results.csv")
    assert all(float(r["nmse_db"]) == 0.0 for r in results if r["model"] == "zero" and r["experiment"] != "snr")
    for name in ("persistence", "teacher", "student"):
        saved = np.load(out / "predictions" / f"{name}.npz")
        pred, target, vel = saved["prediction"].astype(complex), saved["target"].astype(complex), saved["velocity_kmh"]
        overall = next(r for r in results if r["model"] == name and r["experiment"] == "test")
        assert float(overall["nmse_db"]) == pytest.approx(tr.to_db(tr.nmse(pred, target), tr.DB_FLOOR), abs=1e-9)
        for row in (r for r in read_rows(out / "velocity.csv") if r["model"] == name):
            sel = vel == float(row["velocity_kmh"])
            ratios = [np.sum(np.abs(p - t) ** 2) / np.sum(np.abs(t) ** 2) for p, t in zip(pred[sel], target[sel])]
            assert int(row["n_samples"]) == sel.sum()
            assert float(row["nmse_db"]) == pytest.approx(10 * np.log10(np.mean(ratios)), abs=1e-6)


def test_snr_rows_cover_the_grid(workspace):
    _, _, out = workspace
    rows = read_rows(out / "snr.csv")
    models = {r["model"] for r in rows}
    assert models == {"persistence", "zero", "teacher", "student"}
    assert sorted({float(r["snr_db"]) for r in rows}) == [0.0, 10.0]
    assert {float(r["velocity_kmh"]) for r in rows} == {30.0}
    pers = {float(r["snr_db"]): float(r["nmse_db"]) for r in rows if r["model"] == "persistence"}
    assert pers[10.0] < pers[0.0]


def test_eval_reports_missing_checkpoint(workspace, capsys):
    _, cfg, out = workspace
    rc = main(["eval", "--config", cfg, "--out", str(out), "--checkpoint", f"x={out / 'missing.ckpt'}"])
    assert rc != 0
    assert "missing.ckpt" in capsys.readouterr().err


def test_distill_without_teacher_fails(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", tiny_config())
    assert main(["distill", "--config", cfg, "--out", str(tmp_path)]) != 0
    assert "teacher" in capsys.readouterr().err


def test_checkpoint_round_trip_predictions(workspace):
    _, cfg, out = workspace
    model, meta, optim = load_model(out / "teacher.ckpt")
    assert meta["kind"] == "teacher" and optim
    ds = cs.read_dataset(out / "dataset.bin")
    saved = np.load(out / "predictions" / "teacher.npz")
    np.testing.assert_array_equal(tr.predict_samples(model, ds.test), saved["prediction"])


def test_checkpoint_format_errors(tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", {"w": np.arange(6.0).reshape(2, 3)}, {"k": 1})
    state, meta = load_checkpoint(path)
    assert meta == {"k": 1} and state["w"].dtype == np.float32
    np.testing.assert_array_equal(state["w"], np.arange(6.0).reshape(2, 3))
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ContractError, match="magic"):
        load_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.ckpt")


def test_cost_counts(workspace):
    _, cfg, out = workspace
    run("cost", "--config", cfg, "--out", out)
    rows = {r["model"]: r for r in read_rows(out / "cost.csv")}
    teacher = rows["teacher"]
    assert int(teacher["trainable_params"]) < int(teacher["total_params"])
    assert rows["student"]["total_params"] == rows["student"]["trainable_params"]
    model, _, _ = load_model(out / "student.ckpt")
    assert int(rows["student"]["total_params"]) == model.num_parameters()
    assert all(r["config_hash"] and int(r["runs"]) == 3 for r in rows.values())


def test_dump_embeddings(workspace, tmp_path):
    _, cfg, out = workspace
    run("dump-embeddings", "--config", cfg, "--out", out)
    rows = read_rows(out / "embeddings.csv")
    assert {r["kind"] for r in rows} == {"word", "csi"}
    assert sum(r["kind"] == "word" for r in rows) == 4  # anchors
    assert len(rows) == 4 + 5
    first = (out / "embeddings.csv").read_bytes()
    run("dump-embeddings", "--config", cfg, "--out", out)
    assert (out / "embeddings.csv").read_bytes() == first


def test_ablate_writes_variants_and_medians(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", tiny_config())
    run("ablate", "--config", cfg, "--out", tmp_path, "--seed", "3")
    rows = read_rows(tmp_path / "ablation.csv")
    assert [(r["model"], r["condition"]) for r in rows] == [
        ("none", "seed=3"), ("no_prompts", "seed=3"), ("none", "median"), ("no_prompts", "median")]
    assert rows[0]["nmse_db"] == rows[2]["nmse_db"]
