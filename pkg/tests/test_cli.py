import json
import subprocess
import sys

import numpy as np
import pytest

from hyperssm import cli
from hyperssm import training as tr
from hyperssm.autograd import Tensor

FAST = ["--epochs", "2", "--batch-size", "8", "--warmup-steps", "2", "--neg-ratio", "3"]


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def data(tmp_path, capsys):
    d = tmp_path / "data"
    assert run(["synth", "--branching", "2", "--min-branching", "2", "--depth", "3", "--out", d], capsys)[0] == 0
    return d


@pytest.fixture
def trained(tmp_path, data, capsys):
    out = tmp_path / "run"
    code, _, err = run(["train", "--data", data, "--out", out, "--manifold", "lorentz", *FAST], capsys)
    assert code == 0, err
    return out


# --- synth ---------------------------------------------------------------------------


def test_synth_deterministic_bytes(tmp_path, capsys):
    for name in ("a", "b"):
        run(["synth", "--branching", "3", "--depth", "5", "--seed", "7", "--out", tmp_path / name], capsys)
    for f in ("entities.tsv", "edges.tsv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_depth_one_is_usage_error(tmp_path, capsys):
    code, _, err = run(["synth", "--depth", "1", "--out", tmp_path], capsys)
    assert code == 2 and "usage" in err


@pytest.mark.parametrize("sub", [None, "synth", "train", "eval", "hyperbolicity", "embed", "pretrain"])
def test_help_exits_zero(sub, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(([sub] if sub else []) + ["--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_bad_flags_exit_two(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--manifold", "spherical"])
    assert exc.value.code == 2


# --- train / eval / embed --------------------------------------------------------------


def test_train_writes_run_directory(trained):
    for f in ("config.json", "val.tsv", "test.tsv", "train.tsv", "metrics.jsonl", "model.ckpt"):
        assert (trained / f).is_file()
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["epochs"] == 2 and cfg["manifold"]["kind"] == "lorentz" and cfg["task"] == "mixed"
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [1, 2]


def test_train_euclidean_constant_c(tmp_path, data, capsys):
    out = tmp_path / "e"
    assert run(["train", "--data", data, "--out", out, "--manifold", "euclidean", *FAST], capsys)[0] == 0
    cs = {json.loads(l)["c"] for l in (out / "metrics.jsonl").read_text().splitlines()}
    assert len(cs) == 1


def test_train_fixed_curvature(tmp_path, data, capsys):
    out = tmp_path / "k"
    code, _, _ = run(["train", "--data", data, "--out", out, "--manifold", "poincare",
                      "--fixed-curvature", "-2", *FAST], capsys)
    assert code == 0
    cs = [json.loads(l)["c"] for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert cs == [0.5, 0.5]
    assert run(["train", "--data", data, "--out", out, "--fixed-curvature", "1"], capsys)[0] == 1


def test_train_resume_continues_steps(tmp_path, data, capsys):
    out = tmp_path / "r"
    run(["train", "--data", data, "--out", out, *FAST], capsys)
    step2 = tr.load_checkpoint(out / "model.ckpt")[0].state.step
    fast3 = [a if a != "2" else "3" for a in FAST]
    assert run(["train", "--data", data, "--out", out, "--resume", *fast3], capsys)[0] == 0
    res, _ = tr.load_checkpoint(out / "model.ckpt")
    assert res.epoch == 3 and res.state.step == step2 * 3 // 2
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 3


def test_train_config_file_and_unknown_keys(tmp_path, data, capsys):
    good = tmp_path / "c.json"
    good.write_text(json.dumps({"epochs": 1, "batch_size": 8, "loss": {"alpha0": 0.5}}))
    out = tmp_path / "cf"
    assert run(["train", "--data", data, "--out", out, "--config", good, "--epochs", "2",
                "--neg-ratio", "3"], capsys)[0] == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["epochs"] == 2 and cfg["loss"]["alpha0"] == 0.5 and cfg["batch_size"] == 8
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epochz": 1}))
    code, _, err = run(["train", "--data", data, "--out", out, "--config", bad], capsys)
    assert code == 1 and "epochz" in err


def test_train_missing_data_exits_one(tmp_path, capsys):
    assert run(["train", "--data", tmp_path / "nope", "--out", tmp_path / "o"], capsys)[0] == 1


def test_train_divergence_exits_three(tmp_path, data, capsys, monkeypatch):
    real = tr.triplet_loss

    def nan_loss(*a, **k):
        _, emb = real(*a, **k)
        return Tensor(np.array(np.nan)), emb

    monkeypatch.setattr(tr, "triplet_loss", nan_loss)
    out = tmp_path / "d"
    code, _, err = run(["train", "--data", data, "--out", out, *FAST], capsys)
    assert code == 3 and "diverged" in err
    assert (out / "model.ckpt").is_file()


def test_eval_report_keys_and_determinism(trained, data, capsys):
    argv = ["eval", "--checkpoint", trained / "model.ckpt", "--data", data,
            "--pairs", trained / "test.tsv", "--val-pairs", trained / "val.tsv"]
    code, out1, _ = run(argv, capsys)
    assert code == 0
    rep = json.loads(out1)
    assert set(rep) == {"task", "threshold", "precision", "recall", "f1", "n_pos", "n_neg", "per_hop"}
    assert run(argv, capsys)[1] == out1
    code, out2, _ = run(argv + ["--threshold", str(rep["threshold"])], capsys)
    assert json.loads(out2)["f1"] == rep["f1"]


def test_eval_manifold_mismatch_and_corrupt_checkpoint(trained, data, tmp_path, capsys):
    base = ["--data", data, "--pairs", trained / "test.tsv"]
    assert run(["eval", "--checkpoint", trained / "model.ckpt", "--manifold", "poincare", *base], capsys)[0] == 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((trained / "model.ckpt").read_bytes()[:200])
    assert run(["eval", "--checkpoint", bad, *base], capsys)[0] == 1


def test_embed_lorentz_columns(trained, data, tmp_path, capsys):
    path = tmp_path / "emb.tsv"
    assert run(["embed", "--checkpoint", trained / "model.ckpt", "--data", data, "--out", path], capsys)[0] == 0
    lines = path.read_text().splitlines()
    assert len(lines) == 16  # header + 15 entities
    assert "h_norm" in lines[0] and len(lines[1].split("\t")) == 4 + 65


# --- hyperbolicity and pretrain ---------------------------------------------------------


def test_hyperbolicity_tree_and_flags(data, capsys):
    code, out, _ = run(["hyperbolicity", "--data", data, "--quadruples", "2000", "--seed", "3"], capsys)
    rep = json.loads(out)
    assert code == 0 and rep["delta_mean"] == 0.0 and rep["delta_normalized_mean"] == 0.0
    assert rep["quadruples"] == 2000
    assert run(["hyperbolicity", "--data", data, "--quadruples", "2000", "--seed", "3"], capsys)[1] == out
    rep = json.loads(run(["hyperbolicity", "--data", data, "--exact"], capsys)[1])
    assert rep["exact"] and rep["delta_mean"] == 0.0


def test_pretrain_then_init(tmp_path, data, capsys):
    corpus = tmp_path / "pairs.jsonl"
    rng = np.random.default_rng(0)
    words = ["red", "green", "blue", "cyan", "pink", "gold", "grey", "teal", "jade", "rose"]
    with open(corpus, "w") as fh:
        for i in range(100):
            a, b = rng.choice(words, 2, replace=False)
            fh.write(json.dumps({"text_a": f"{a} {b} thing", "text_b": f"a {b} {a}"}) + "\n")
    ck = tmp_path / "pre" / "enc.ckpt"
    code, out, err = run(["pretrain", "--corpus", corpus, "--out", ck, "--vocab-from", data / "entities.tsv",
                          "--epochs", "4", "--warmup-steps", "5", "--batch-size", "32"], capsys)
    assert code == 0, err
    losses = [json.loads(l)["train_loss"] for l in ck.with_suffix(".metrics.jsonl").read_text().splitlines()]
    assert losses[-1] < losses[0]
    run_dir = tmp_path / "init"
    assert run(["train", "--data", data, "--out", run_dir, "--init", ck, *FAST], capsys)[0] == 0
    assert run(["pretrain", "--corpus", tmp_path / "missing.jsonl", "--out", ck], capsys)[0] == 1


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "hyperssm.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "synth" in proc.stdout
