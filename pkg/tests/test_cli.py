import csv
import json
import math

import numpy as np
import pytest

from sotglp.cli import main, write_pgm
from sotglp.synthdata import load_episode

SMALL = {
    "num_classes": 3, "shots": 4, "test_shots": 3, "num_patches": 9, "input_dim": 8, "n_parts": 2,
    "embed_dim": 8, "top_k": 4, "batch_size": 6, "epochs": 3, "warmup_epochs": 1, "seeds": [0, 1], "ood_size": 20,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "train")]) == 0
    return root, cfg


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_data_files_reload(workspace):
    root, _ = workspace
    ep = load_episode(root / "data" / "episode.json")
    assert ep.num_classes == 3 and len(ep.train_y) == 12
    for name in ("ood_background.json", "ood_foreign.json", "config.json"):
        assert (root / "data" / name).exists()


def test_gen_data_deterministic(workspace, tmp_path):
    root, cfg = workspace
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    for name in ("episode.json", "ood_background.json", "ood_foreign.json"):
        assert (tmp_path / name).read_bytes() == (root / "data" / name).read_bytes()


def test_bad_parameter_exits_nonzero(tmp_path, capsys):
    assert main(["gen-data", "--num-patches", "1", "--n-parts", "3", "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


def test_train_outputs(workspace):
    root, _ = workspace
    out = root / "train"
    for name in ("config.json", "encoders.json", "loss_curve.csv", "loss_curve.png"):
        assert (out / name).exists()
    for seed in (0, 1):
        assert (out / f"seed_{seed}" / "checkpoint.json").exists()
        assert (out / f"seed_{seed}" / "checkpoint_epoch_003.json").exists()
    rows = read_rows(out / "loss_curve.csv")
    assert {r["seed"] for r in rows} == {"0", "1"}
    assert set(rows[0]) == {"seed", "epoch", "step", "lr", "L_global", "L_local", "L_total"}
    assert max(int(r["epoch"]) for r in rows) == 3


def test_train_zero_epochs_is_init(tmp_path):
    from sotglp.experiment import episode_from_config
    from sotglp.model import build_encoders, init_model
    from sotglp.train import load_checkpoint

    args = ["train", "--out", str(tmp_path), "--epochs", "0", "--seeds", "4"]
    for k, v in SMALL.items():
        if k not in ("epochs", "seeds", "warmup_epochs"):
            args += [f"--{k.replace('_', '-')}", str(v)]
    assert main(args) == 0
    bank, proj, cfg, _ = load_checkpoint(tmp_path / "seed_4" / "checkpoint.json")
    ref = init_model(cfg, build_encoders(cfg, episode_from_config(cfg)), 4)
    assert np.array_equal(bank.global_prompts, ref.bank.global_prompts)
    assert np.array_equal(bank.local_prompts, ref.bank.local_prompts)
    assert np.array_equal(proj.weight, ref.proj.weight)


def test_train_lambda_zero_logs_unweighted_local(workspace, tmp_path):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path),
                 "--lambda", "0", "--seeds", "0"]) == 0
    for r in read_rows(tmp_path / "loss_curve.csv"):
        assert float(r["L_local"]) > 0
        assert float(r["L_total"]) == float(r["L_global"])


def test_train_default_epochs_curve(tmp_path):
    small = {k: v for k, v in SMALL.items() if k not in ("epochs", "warmup_epochs")}
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**small, "seeds": [0], "shots": 1, "test_shots": 1, "batch_size": 32}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    rows = read_rows(tmp_path / "t" / "loss_curve.csv")
    assert [int(r["epoch"]) for r in rows] == list(range(1, 51))


def test_eval_report(workspace, tmp_path):
    root, cfg = workspace
    assert main(["eval", "--config", str(cfg), "--data", str(root / "data"),
                 "--checkpoint", str(root / "train"), "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "metrics.csv")
    assert [r["seed"] for r in rows] == ["0", "1"]
    rep = json.loads((tmp_path / "metrics_seed_0.json").read_text())
    assert {"top1", "per_class_accuracy", "prompt_overlap", "mean_plan_entropy"} <= set(rep)
    assert set(rep["extra"]) == {"top1_global", "top1_local"}
    assert len(rep["per_class_accuracy"]) == 3


def test_eval_no_vv_changes_local_branch(workspace, tmp_path):
    root, cfg = workspace
    ck = str(root / "train" / "seed_0" / "checkpoint.json")
    base = ["eval", "--config", str(cfg), "--data", str(root / "data"), "--checkpoint", ck]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--out", str(tmp_path / "b"), "--no-vv"]) == 0
    a = json.loads((tmp_path / "a" / "metrics_seed_0.json").read_text())
    b = json.loads((tmp_path / "b" / "metrics_seed_0.json").read_text())
    assert a["mean_plan_entropy"] != b["mean_plan_entropy"]


def test_eval_untrained_is_chance(tmp_path):
    assert main(["train", "--out", str(tmp_path / "t"), "--epochs", "0", "--seeds", "0", "--no-align-text"]) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "t"), "--out", str(tmp_path / "e"), "--no-align-text"]) == 0
    top1 = json.loads((tmp_path / "e" / "metrics_seed_0.json").read_text())["top1"]
    n, c = 128, 8
    assert abs(top1 - 1 / c) <= 3 * math.sqrt((1 / c) * (1 - 1 / c) / n)


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2


def test_ood_rows(workspace, tmp_path):
    root, cfg = workspace
    assert main(["ood", "--config", str(cfg), "--data", str(root / "data"),
                 "--checkpoint", str(root / "train" / "seed_0" / "checkpoint.json"), "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "ood.csv")
    assert {r["variant"] for r in rows} == {"full", "no_proj"}
    assert {(r["pool"], r["score"]) for r in rows} == {(p, s) for p in ("background", "foreign") for s in ("mcm", "glmcm")}
    for r in rows:
        assert 0 <= float(r["auroc"]) <= 1 and 0 <= float(r["fpr95"]) <= 1
    assert (tmp_path / "ood_scores.png").exists()
    assert (tmp_path / "ood_no_proj_seed_0.json").exists()


def test_sweep_single_point(workspace, tmp_path):
    root, cfg = workspace
    assert main(["sweep", "--config", str(cfg), "--data", str(root / "data"), "--axis", "lambda",
                 "--grid", "0.5", "--seeds", "0", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "sweep_lambda.csv")
    assert len(rows) == 1 and float(rows[0]["lam"]) == 0.5
    assert (tmp_path / "sweep_lambda.png").exists()


def test_sweep_k_clamps_to_patches(workspace, tmp_path):
    root, cfg = workspace
    assert main(["sweep", "--config", str(cfg), "--data", str(root / "data"), "--axis", "k",
                 "--grid", "1", "100", "--seeds", "0", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "sweep_k.csv")
    assert [int(r["k_effective"]) for r in rows] == [1, 9]


def test_sweep_bad_grid(workspace, tmp_path):
    root, cfg = workspace
    assert main(["sweep", "--config", str(cfg), "--data", str(root / "data"), "--axis", "k",
                 "--grid", "2.5", "--out", str(tmp_path)]) == 2


def test_dump_plan_single_cell(workspace, tmp_path):
    root, cfg = workspace
    ck = str(root / "train" / "seed_0" / "checkpoint.json")
    assert main(["dump-plan", "--config", str(cfg), "--data", str(root / "data"), "--checkpoint", ck,
                 "--image-id", "2", "--top-k", "1", "--out", str(tmp_path)]) == 0
    rec = json.loads(next(tmp_path.glob("plan_*.json")).read_text())
    assert rec["k"] == 1 and len(rec["plan"]) == 1
    assert sum(rec["plan"][0]) == pytest.approx(1.0)
    pgm = next(tmp_path.glob("plan_*.pgm")).read_text().split("\n")
    assert pgm[0] == "P2" and pgm[1] == "3 3"


def test_dump_plan_record(workspace, tmp_path):
    root, cfg = workspace
    ck = str(root / "train" / "seed_0" / "checkpoint.json")
    assert main(["dump-plan", "--config", str(cfg), "--data", str(root / "data"), "--checkpoint", ck,
                 "--image-id", "0", "--class-id", "1", "--out", str(tmp_path)]) == 0
    rec = json.loads((tmp_path / "plan_test0_class1.json").read_text())
    assert len(rec["support"]) == 4 and rec["support"] == sorted(rec["support"])
    assert np.allclose(np.sum(rec["plan"], axis=0), 1 / len(rec["plan"][0]), atol=1e-6)
    assert all(set(t) <= set(rec["support"]) for t in rec["per_prompt_top3"])
    assert (tmp_path / "plan_test0_class1.png").exists()


def test_dump_plan_bad_image(workspace, tmp_path):
    root, cfg = workspace
    ck = str(root / "train" / "seed_0" / "checkpoint.json")
    assert main(["dump-plan", "--config", str(cfg), "--data", str(root / "data"), "--checkpoint", ck,
                 "--image-id", "99", "--out", str(tmp_path)]) == 2


def test_write_pgm(tmp_path):
    write_pgm(np.array([[0.0, 1.0], [0.5, 0.25]]), tmp_path / "x.pgm")
    assert (tmp_path / "x.pgm").read_text() == "P2\n2 2\n255\n0 255\n128 64\n"


def test_selftest_rejects_bad_epsilon(capsys):
    assert main(["selftest", "--epsilon", "-1"]) == 2
    assert "epsilon" in capsys.readouterr().err


def test_selftest_quick_is_reproducible(tmp_path, capsys):
    assert main(["selftest", "--quick", "--out", str(tmp_path / "a")]) == 0
    assert main(["selftest", "--quick", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "selftest.json").read_bytes() == (tmp_path / "b" / "selftest.json").read_bytes()
    assert "FAIL" not in capsys.readouterr().out
