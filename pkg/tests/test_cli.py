import json
import os

import numpy as np
import pytest

from ulda import cli
from ulda import config as C

SMALL = [
    "--set", "data.synthetic.size=16", "--set", "data.synthetic.train_classes=6",
    "--set", "data.synthetic.test_classes=5", "--set", "data.synthetic.per_class=6",
    "--set", "train.filters=8", "--set", "train.eval_episodes=3", "--set", "eval.m_query=3",
    "--set", "eval.episodes=20", "--set", "diagnose.samples=20", "--m-query", "2",
]


def run(capsys, *argv):
    code = cli.run(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_train_contract(tmp_path, capsys):
    out = str(tmp_path / "run")
    code, stdout, _ = run(capsys, "train", "--out", out, "--episodes-per-epoch", "5", "--epochs", "2", "--seed", "7", *SMALL)
    assert code == 0
    rows = open(os.path.join(out, "runlog.csv")).read().splitlines()
    assert len(rows) == 3
    assert stdout.startswith("seed = 7\n")
    for name in ("last.bin", "best.bin", "config.txt"):
        assert os.path.exists(os.path.join(out, name))


def test_printed_config_reproduces_run(tmp_path, capsys):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    run(capsys, "train", "--out", a, "--episodes-per-epoch", "3", "--epochs", "1", *SMALL)
    code, _, _ = run(capsys, "train", "--out", b, "--config", os.path.join(a, "config.txt"))
    assert code == 0
    assert open(os.path.join(a, "runlog.csv")).read() == open(os.path.join(b, "runlog.csv")).read()
    assert open(os.path.join(a, "last.bin"), "rb").read() == open(os.path.join(b, "last.bin"), "rb").read()


def test_eval_missing_checkpoint(tmp_path, capsys):
    out = str(tmp_path / "ev")
    code, _, err = run(capsys, "eval", "--out", out, "--checkpoint", str(tmp_path / "nope.bin"), *SMALL)
    assert code == cli.EXIT_CHECKPOINT
    assert json.loads(err.strip().splitlines()[-1])["error"] == "checkpoint"
    assert not os.path.exists(os.path.join(out, "eval.json"))


def test_eval_after_train(tmp_path, capsys):
    out = str(tmp_path / "run")
    run(capsys, "train", "--out", out, "--episodes-per-epoch", "3", "--epochs", "1", *SMALL)
    code, stdout, _ = run(capsys, "eval", "--out", out, *SMALL)
    assert code == 0 and "5-way 1-shot: " in stdout
    report = json.load(open(os.path.join(out, "eval.json")))
    assert report["episode_count"] == 20 and len(report["accuracies"]) == 20
    first = open(os.path.join(out, "eval.json")).read()
    run(capsys, "eval", "--out", out, *SMALL)
    assert open(os.path.join(out, "eval.json")).read() == first


def test_diagnose_pairs(tmp_path, capsys):
    out = str(tmp_path / "d")
    code, stdout, err = run(capsys, "diagnose", "--out", out, "--pairs", "TA:TA,AA:R+TA", *SMALL)
    assert code == 0 and "untrained" in err
    rows = open(os.path.join(out, "diagnose.csv")).read().splitlines()
    assert rows[0] == "aug_support,aug_query,kl,frechet,samples,seed" and len(rows) == 3


def test_unknown_preset_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--out", str(tmp_path), "--aug-query", "R+Blur", *SMALL)
    assert code == cli.EXIT_PRESET
    line = json.loads(err.strip())
    assert line["exit"] == cli.EXIT_PRESET and "Blur" in line["message"]


def test_bad_config_key(tmp_path, capsys):
    path = tmp_path / "c.txt"
    path.write_text("episode.n_wya = 5\n")
    code, _, err = run(capsys, "train", "--out", str(tmp_path), "--config", str(path))
    assert code == cli.EXIT_CONFIG and "n_wya" in err


def test_missing_out(monkeypatch, capsys):
    monkeypatch.delenv("ULDA_OUT", raising=False)
    code, _, err = run(capsys, "train")
    assert code == cli.EXIT_USAGE


def test_out_from_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ULDA_OUT", str(tmp_path / "env"))
    code = cli.run(["preview", *SMALL])
    assert code == 0 and any(f.endswith(".pgm") for f in os.listdir(tmp_path / "env"))


def test_gamma_forced_to_zero_without_rotation(tmp_path, capsys):
    out = str(tmp_path / "g")
    code, stdout, err = run(capsys, "train", "--out", out, "--aug-query", "TA", "--episodes-per-epoch", "2",
                            "--epochs", "1", *SMALL)
    assert code == 0 and "gamma forced to 0" in err
    assert "train.gamma = 0.0" in stdout


def test_dump_episode(tmp_path, capsys):
    out = str(tmp_path / "p")
    code, _, _ = run(capsys, "preview", "--out", out, "--dump-episode", "3", "--n-way", "3", *SMALL)
    files = os.listdir(out)
    assert code == 0
    assert len([f for f in files if "_support" in f]) == 3 and len([f for f in files if "_query" in f]) == 6


def test_pack_and_train_from_disk(tmp_path, capsys):
    from ulda.data_io import generate_synthetic, write_pnm

    src = tmp_path / "tree"
    ls = generate_synthetic(6, 6, (1, 16, 16), seed=0)
    for split, classes in (("train", range(0, 3)), ("test", range(3, 6))):
        for c in classes:
            d = src / split / f"k{c}"
            d.mkdir(parents=True)
            for i, img in enumerate(ls.images[ls.labels == c]):
                write_pnm(str(d / f"{i}.pgm"), img)
    packed = tmp_path / "packed"
    code, _, _ = run(capsys, "pack", "--out", str(packed), "--src", str(src))
    assert code == 0 and sorted(os.listdir(packed)) == ["test.bin", "train.bin"]
    code, _, _ = run(capsys, "train", "--out", str(tmp_path / "r"), "--data", str(packed), "--epochs", "1",
                     "--episodes-per-epoch", "2", "--n-way", "3", "--set", "train.filters=8", "--set",
                     "train.eval_episodes=2", "--set", "eval.n_way=3", "--set", "eval.m_query=3", "--m-query", "2")
    assert code == 0


def test_missing_data_root(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--out", str(tmp_path / "o"), "--data", str(tmp_path / "none"), *SMALL)
    assert code == cli.EXIT_DATA


def test_config_text_round_trip():
    cfg = C.defaults()
    cfg["train.gamma"] = 0.1
    cfg["train.eq5_literal"] = True
    assert C.parse_text(C.to_text(cfg)) == cfg
    with pytest.raises(C.ConfigError):
        C.parse_text("no equals sign")
    assert C.parse_lr_factors("auto") is None
    assert C.parse_lr_factors("3:0.1,6:0.01") == ((3, 0.1), (6, 0.01))
    assert C.parse_pairs("TA:TA, AA:R+TA") == [("TA", "TA"), ("AA", "R+TA")]
