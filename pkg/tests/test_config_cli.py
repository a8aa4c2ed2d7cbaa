import json
import subprocess
import sys
from fractions import Fraction

import numpy as np
import pytest

from mtard import nets
from mtard.cli import main
from mtard.config import Config
from mtard.exceptions import ConfigError
from mtard.metrics import read_jsonl

TINY = """\
[run]
seed = 1
out = {out}

[data]
kind = two-moons
n_train = 120
n_test = 60
noise = 1/10

[model]
student_hidden = 8
teacher_hidden = 8,8

[optim]
epochs = 3
batch_size = 32
lr_decay_epochs = 2

[attack]
epsilon = 1/10
step_size = 1/40
steps = 3

[eval]
epsilon = 1/10
steps = 5
step_size = 1/40
suite = fgsm,pgd_sat
"""


def _write_config(tmp_path, out="run", extra=""):
    path = tmp_path / "run.ini"
    path.write_text(TINY.format(out=tmp_path / out) + extra)
    return str(path)


@pytest.fixture
def teachers(tmp_path):
    cfg = _write_config(tmp_path)
    for mode in ("natural", "sat"):
        assert main(["pretrain", "--config", cfg, "--mode", mode, "--out", str(tmp_path / "teachers")]) == 0
    extra = (f"\n[teachers]\nclean = {tmp_path / 'teachers' / 'natural_teacher.ckpt'}\n"
             f"robust = {tmp_path / 'teachers' / 'sat_teacher.ckpt'}\n")
    return _write_config(tmp_path, extra=extra)


def test_defaults_match_training_constants():
    cfg = Config()
    assert cfg["attack"]["epsilon"] == Fraction(8, 255)
    assert cfg["attack"]["step_size"] == Fraction(2, 255)
    assert (cfg["attack"]["steps"], cfg["attack"]["random_start"]) == (10, Fraction(1, 1000))
    assert cfg["optim"]["lr"] == Fraction(1, 10) and cfg["optim"]["weight_decay"] == Fraction(2, 10000)
    b = cfg["balance"]
    assert (b["r_w"], b["r_tau"], b["tau_min"], b["tau_max"], b["beta"]) == (
        Fraction(1, 40), Fraction(1, 1000), 1, 10, 1)
    t = cfg.train_config()
    assert t.attack.epsilon == 8 / 255 and t.momentum == 0.9


def test_round_trip_and_hash(tmp_path):
    cfg = Config.load(_write_config(tmp_path))
    assert cfg["attack"]["epsilon"] == Fraction(1, 10)
    text = cfg.to_string()
    again = Config.from_string(text)
    assert again == cfg and again.to_string() == text and again.digest() == cfg.digest()
    cfg.set("attack", "epsilon", "8/255")
    assert cfg.digest() != again.digest()
    assert "epsilon = 8/255" in cfg.to_string()


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError) as e:
        Config.from_string("[attack]\nepsilon = 1/0\n")
    assert e.value.field == "attack.epsilon"
    with pytest.raises(ConfigError) as e:
        Config.from_string("[optim]\nmomentun = 0.9\n")
    assert e.value.field == "optim.momentun"
    with pytest.raises(ConfigError) as e:
        Config.from_string("[optim]\nepochs = 10\nlr_decay_epochs = 20\n")
    assert e.value.field == "optim.lr_decay_epochs"
    with pytest.raises(ConfigError):
        Config.from_string("[run]\nmode = trades\n")
    with pytest.raises(ConfigError):
        Config.load(tmp_path / "missing.ini")


def test_pretrain_writes_artifacts(tmp_path):
    cfg = _write_config(tmp_path)
    out = tmp_path / "a"
    assert main(["pretrain", "--config", cfg, "--mode", "natural", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["mode"] == "natural" and manifest["seed"] == 1
    assert (out / manifest["artifacts"]["checkpoint"]).exists()
    params = nets.load_checkpoint(out / "natural_teacher.ckpt", role="clean-teacher")
    assert params.spec.layers[0].units == 8
    rec = read_jsonl(out / "natural_teacher_metrics.jsonl")[0]
    assert rec.w_robust == rec.recomputed_w_robust()
    # identical rerun: identical hash, checkpoint and metrics
    out2 = tmp_path / "b"
    assert main(["pretrain", "--config", cfg, "--mode", "natural", "--out", str(out2)]) == 0
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m2["artifacts"] == manifest["artifacts"] and m2["seed"] == manifest["seed"]
    assert (out / "natural_teacher.ckpt").read_bytes() == (out2 / "natural_teacher.ckpt").read_bytes()
    assert (out / "natural_teacher_metrics.jsonl").read_text() == (out2 / "natural_teacher_metrics.jsonl").read_text()


def test_pretrain_hash_stable_across_reruns(tmp_path):
    cfg = _write_config(tmp_path)
    hashes = []
    for _ in range(2):
        assert main(["pretrain", "--config", cfg, "--mode", "natural"]) == 0
        hashes.append(json.loads((tmp_path / "run" / "manifest.json").read_text())["config_hash"])
    assert hashes[0] == hashes[1]


def test_missing_dataset_path_is_usage_error(tmp_path, capsys):
    cfg = _write_config(tmp_path, extra="")
    text = open(cfg).read().replace("kind = two-moons", "kind = idx")
    open(cfg, "w").write(text)
    assert main(["pretrain", "--config", cfg, "--mode", "natural"]) == 2
    assert "data.train_path" in capsys.readouterr().err
    text = text.replace("kind = idx", f"kind = cifar\ntrain_path = {tmp_path / 'nope.bin'}")
    open(cfg, "w").write(text)
    assert main(["pretrain", "--config", cfg, "--mode", "natural"]) == 2
    assert "data.train_path" in capsys.readouterr().err


def test_pretrain_rejects_distill_mode(tmp_path, capsys):
    assert main(["pretrain", "--config", _write_config(tmp_path), "--mode", "mtard"]) == 2
    assert "run.mode" in capsys.readouterr().err


def test_data_dir_env(tmp_path, monkeypatch):
    blob = bytes([1]) + bytes(3072)
    (tmp_path / "d.bin").write_bytes(blob * 4)
    monkeypatch.setenv("MTARD_DATA_DIR", str(tmp_path))
    cfg = _write_config(tmp_path)
    text = open(cfg).read().replace("kind = two-moons", "kind = cifar\ntrain_path = d.bin\nn_classes = 2")
    text = text.replace("teacher_hidden = 8,8", "teacher_hidden = 4")
    open(cfg, "w").write(text)
    assert main(["pretrain", "--config", cfg, "--mode", "natural", "--seed", "2"]) == 0


def test_distill_modes_and_logs(teachers, tmp_path):
    for mode in ("baseline-fixed", "mtard"):
        out = tmp_path / mode
        assert main(["distill", "--config", teachers, "--mode", mode, "--out", str(out)]) == 0
        history = read_jsonl(out / "metrics.jsonl")
        assert len(history) == 3
        for rec in history:
            c = rec.controller
            assert 1 <= c["tau_nat"] <= 10 and 1 <= c["tau_adv"] <= 10
            assert rec.w_robust == rec.recomputed_w_robust()
            if mode == "baseline-fixed":
                assert (c["w_nat"], c["w_adv"]) == (0.5, 0.5)
        manifest = json.loads((out / "manifest.json").read_text())
        for rel in manifest["artifacts"].values():
            assert (out / rel).exists()


def test_distill_role_mismatch(teachers, tmp_path, capsys):
    text = open(teachers).read()
    swapped = text.replace("natural_teacher.ckpt", "TMP").replace("sat_teacher.ckpt", "natural_teacher.ckpt")
    open(teachers, "w").write(swapped.replace("TMP", "sat_teacher.ckpt"))
    assert main(["distill", "--config", teachers]) == 2
    assert "role" in capsys.readouterr().err


def test_distill_missing_teacher(tmp_path, capsys):
    assert main(["distill", "--config", _write_config(tmp_path)]) == 2
    assert "teachers.clean" in capsys.readouterr().err


def test_distill_is_deterministic_and_resumable(teachers, tmp_path):
    a, b, c = (str(tmp_path / n) for n in "abc")
    assert main(["distill", "--config", teachers, "--out", a]) == 0
    assert main(["distill", "--config", teachers, "--out", b]) == 0
    assert main(["distill", "--config", teachers, "--out", c, "--until-epoch", "1"]) == 0
    assert len(read_jsonl(f"{c}/metrics.jsonl")) == 1
    assert main(["distill", "--config", teachers, "--out", c, "--resume"]) == 0
    for name in ("student_final.ckpt", "student_best.ckpt", "metrics.jsonl", "manifest.json"):
        ref = open(f"{a}/{name}", "rb").read()
        assert open(f"{b}/{name}", "rb").read() == ref or name == "manifest.json"
        if name != "manifest.json":
            assert open(f"{c}/{name}", "rb").read() == ref


def test_resume_without_state(teachers, tmp_path):
    assert main(["distill", "--config", teachers, "--out", str(tmp_path / "x"), "--resume"]) == 2


def test_eval_zero_budget(teachers, tmp_path, capsys):
    ckpt = str(tmp_path / "teachers" / "sat_teacher.ckpt")
    capsys.readouterr()
    assert main(["eval", "--config", teachers, "--checkpoint", ckpt, "--epsilon", "0"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    rec = json.loads(lines[0])
    assert all(v == rec["clean_acc"] for v in rec["robust_acc"].values())
    assert rec["w_robust"] == 0.5 * rec["clean_acc"] + 0.5 * rec["robust_acc"][rec["attack"]]
    header, row = lines[1].split(","), lines[2].split(",")
    assert len(header) == len(row) and header[:4] == ["epoch", "clean_acc", "robust_acc", "w_robust"]


def test_eval_named_attack_and_errors(teachers, tmp_path, capsys):
    ckpt = str(tmp_path / "teachers" / "sat_teacher.ckpt")
    capsys.readouterr()
    assert main(["eval", "--config", teachers, "--checkpoint", ckpt, "--attack", "cw_inf"]) == 0
    rec = json.loads(capsys.readouterr().out.splitlines()[0])
    assert list(rec["robust_acc"]) == ["cw_inf"]
    assert abs(rec["w_robust"] - (rec["clean_acc"] + rec["robust_acc"]["cw_inf"]) / 2) < 1e-12
    assert main(["eval", "--config", teachers, "--checkpoint", ckpt, "--attack", "square"]) == 2
    assert main(["eval", "--config", teachers, "--checkpoint", str(tmp_path / "none.ckpt")]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"MTRD\x01")
    assert main(["eval", "--config", teachers, "--checkpoint", str(bad)]) == 2


def test_report_svg_points(teachers, tmp_path):
    out = tmp_path / "run3"
    assert main(["distill", "--config", teachers, "--out", str(out)]) == 0
    rep = tmp_path / "report"
    assert main(["report", str(out / "metrics.jsonl"), "--out", str(rep)]) == 0
    for chart in ("loss", "relative_loss", "entropy", "temperature", "weights", "w_robust"):
        svg = (rep / f"{chart}.svg").read_text()
        groups = svg.split('<g class="series"')[1:]
        assert groups
        for g in groups:
            assert g.split("</g>")[0].count("<circle") == 3
    summary = (rep / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("run,best_epoch") and len(summary) == 2
    assert len((rep / "run3_curves.csv").read_text().splitlines()) == 4
    assert main(["report", str(tmp_path / "missing.jsonl"), "--out", str(rep)]) == 2


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mtard.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "pretrain" in r.stdout
    r = subprocess.run([sys.executable, "-m", "mtard.cli", "pretrain"], capture_output=True, text=True)
    assert r.returncode == 2
