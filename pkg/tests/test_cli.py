import csv
import json

import numpy as np
import pytest

from advgdro import cli
from advgdro import data as D
from advgdro import model as M
from advgdro.evaluation import evaluate

FAST = ["--steps", "60", "--batch-size", "16", "--eval-every", "20", "--hidden", "8"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--out", str(out), "--scale", "0.1", "--seed", "7"]) == 0
    return out


def test_gen_data_sizes_and_manifest(data_dir):
    m = json.loads((data_dir / "train.manifest.json").read_text())
    assert m["group_counts"] == [350, 18, 6, 106]
    assert m["N"] == 480 and m["d"] == 8
    run = json.loads((data_dir / "manifest.json").read_text())
    assert run["config"]["seed"] == 7 and "train.csv" in run["artifacts"]


def test_gen_data_is_reproducible(tmp_path, data_dir):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--scale", "0.1", "--seed", "7"]) == 0
    for split in D.SPLITS:
        assert (tmp_path / f"{split}.csv").read_bytes() == (data_dir / f"{split}.csv").read_bytes()


def test_null_attribute_recorded(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--scale", "0.01", "--spurious-strength", "0"]) == 0
    assert json.loads((tmp_path / "train.manifest.json").read_text())["null_attribute"] is True


def test_erm_rejects_group_and_attack_flags(tmp_path, data_dir, capsys):
    base = ["train", "--data", str(data_dir), "--out", str(tmp_path), "--method", "erm"]
    assert cli.main(base + ["--eta-q", "0.01"]) == 2
    assert "--eta-q" in capsys.readouterr().err
    assert cli.main(base + ["--eps", "0.1"]) == 2
    assert cli.main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--method", "gdro",
                     "--perturb-mode", "group"]) == 2


def test_usage_errors_exit_two(tmp_path, data_dir):
    assert cli.main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 2
    assert cli.main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--method", "sgd"]) == 2
    assert cli.main(["train", "--steps", "many"]) == 2
    assert cli.main(["frobnicate"]) == 2
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("steps = 10\nwarp = 9\n")
    assert cli.main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path)]) == 2


def test_image_scale_attack_settings_are_recorded(tmp_path, data_dir):
    out = tmp_path / "run"
    argv = ["train", "--data", str(data_dir), "--out", str(out), "--method", "adv_gdro", "--perturb-mode",
            "group", "--eps", "2/255", "--pgd-steps", "5", "--eta-delta", "0.01", "--eta-q", "0.01", *FAST]
    assert cli.main(argv) == 0
    conf = json.loads((out / "manifest.json").read_text())["config"]
    assert conf["eps"] == 2 / 255 and conf["sigma"] == (2 / 255) ** 2
    assert (conf["pgd_steps"], conf["eta_delta"], conf["eta_q"], conf["perturb_mode"]) == (5, 0.01, 0.01, "group")
    steps = rows(out / "steps.csv")
    assert len(steps) == 60 and set(steps[0]) >= {"step", "method", "g", "loss", "q_0", "q_3"}
    assert [int(r["step"]) for r in rows(out / "evals.csv")] == [0, 20, 40, 60]


def test_config_file_is_overridden_by_flags(tmp_path, data_dir):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# trial\nmethod = gdro\nsteps = 30\neta-q = 0.2\nhidden = 4\n")
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(out),
                     "--steps", "10"]) == 0
    conf = json.loads((out / "manifest.json").read_text())["config"]
    assert (conf["method"], conf["steps"], conf["eta_q"], conf["hidden"]) == ("gdro", 10, 0.2, [4])


def test_zero_steps_reports_untrained_model(tmp_path, data_dir):
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(data_dir), "--out", str(out), "--steps", "0", "--seed", "3"]) == 0
    assert rows(out / "steps.csv") == []
    init, meta = M.load_checkpoint(out / "best.ckpt.npz")
    final, _ = M.load_checkpoint(out / "final.ckpt.npz")
    assert init.equals(final) and meta["step"] == 0
    report = json.loads((out / "test_metrics.json").read_text())
    test = D.load(data_dir / "test.csv")
    assert report["average_acc"] == evaluate(init, test).average_acc


def test_replay_reproduces_outputs(tmp_path, data_dir):
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(data_dir), "--out", str(out), "--method", "gdro", *FAST]) == 0
    before = {p.name: p.read_bytes() for p in out.iterdir() if p.suffix == ".csv"}
    for name in before:
        (out / name).unlink()
    assert cli.main(["replay", str(out / "manifest.json")]) == 0
    assert {name: (out / name).read_bytes() for name in before} == before


def test_evaluate_and_export(tmp_path, data_dir):
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(data_dir), "--out", str(out), *FAST]) == 0
    ckpt = str(out / "best.ckpt.npz")
    log = tmp_path / "metrics.csv"
    assert cli.main(["evaluate", "--checkpoint", ckpt, "--data", str(data_dir), "--out", str(tmp_path / "m.json"),
                     "--metrics-log", str(log), "--eval-eps", "0"]) == 0
    assert cli.main(["evaluate", "--checkpoint", ckpt, "--data", str(data_dir), "--split", "val",
                     "--metrics-log", str(log)]) == 0
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["adversarial_acc"] == m["average_acc"]
    assert [r["split"] for r in rows(log)] == ["test", "val"]
    assert cli.main(["export", "--checkpoint", ckpt, "--data", str(data_dir), "--out", str(tmp_path / "h.csv"),
                     "--eval-eps", "0.1"]) == 0
    assert len(rows(tmp_path / "h.csv")) == 2 * 256
    assert cli.main(["export", "--checkpoint", ckpt, "--kind", "first-layer", "--out", str(tmp_path / "w.csv")]) == 0
    assert len(rows(tmp_path / "w.csv")) == 8
    assert cli.main(["export", "--checkpoint", str(tmp_path / "none.npz"), "--out", str(tmp_path / "x.csv")]) == 2


@pytest.fixture(scope="module")
def compared(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("cmp")
    assert cli.main(["compare", "--data", str(data_dir), "--out", str(out), "--eps", "0.2", "--eta-delta",
                     "0.255", *FAST]) == 0
    return out


def test_compare_table_layout(compared):
    table = rows(compared / "table.csv")
    assert list(table[0]) == ["metric", "perturbation", "erm", "adv_erm", "gdro", "adv_gdro"]
    assert len(table) == 8
    for r in table:
        if r["perturbation"] == "group":
            assert r["erm"] == r["adv_erm"] == "-"
        assert r["adv_gdro"] != "-"


def test_corrections_recheck(compared):
    preds = {name: {int(r["index"]): r for r in rows(compared / "runs" / name / "test_predictions.csv")}
             for name in ("erm", "adv_erm", "gdro", "adv_gdro_group")}
    listed = rows(compared / "corrections.csv")
    for r in listed:
        weak = preds[r["weaker"]][int(r["index"])]
        strong = preds[r["stronger"]][int(r["index"])]
        assert weak["pred_clean"] != weak["label"] and strong["pred_clean"] == strong["label"]
    for name in ("erm", "adv_erm", "gdro"):
        expected = sum(1 for i, w in preds[name].items()
                       if w["pred_clean"] != w["label"] and preds["adv_gdro_group"][i]["pred_clean"] == w["label"])
        assert sum(1 for r in listed if r["weaker"] == name) == expected


def test_self_comparison_has_zero_deltas(tmp_path, compared):
    run = str(compared / "runs" / "gdro")
    assert cli.main(["compare", "--runs", f"{run},{run}", "--out", str(tmp_path)]) == 0
    deltas = rows(tmp_path / "deltas.csv")
    assert len(deltas) == 4 and all(float(r["delta_points"]) == 0 for r in deltas)
    assert rows(tmp_path / "corrections.csv") == []


def test_compare_rejects_mismatched_datasets(tmp_path, compared):
    other_data = tmp_path / "data"
    assert cli.main(["gen-data", "--out", str(other_data), "--scale", "0.05", "--seed", "1"]) == 0
    other = tmp_path / "other"
    assert cli.main(["train", "--data", str(other_data), "--out", str(other), *FAST]) == 0
    argv = ["compare", "--runs", f"{compared / 'runs' / 'erm'},{other}", "--out", str(tmp_path / "c")]
    assert cli.main(argv) == 2


def test_convergence_command(tmp_path):
    out = tmp_path / "conv"
    assert cli.main(["convergence", "--out", str(out), "--T-grid", "50,200", "--replicates", "2"]) == 0
    table = rows(out / "convergence.csv")
    assert [int(r["T"]) for r in table] == [50, 200]
    assert all(0 < float(r["bound"]) < np.inf for r in table)
    summary = json.loads((out / "convergence.json").read_text())
    assert summary["minimax_converged"]
    assert cli.main(["convergence", "--out", str(tmp_path / "one"), "--m", "1", "--T-grid", "50",
                     "--replicates", "2"]) == 0
