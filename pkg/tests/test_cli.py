import csv
import hashlib
import subprocess
import sys

import numpy as np
import pytest

from bridgeedit import io as bio
from bridgeedit import published as pub
from bridgeedit.cli import main
from bridgeedit.config import ConfigError, RunConfig

SMALL = ["--set", "model.dim=16", "--set", "model.heads=2", "--set", "model.head_dim=8", "--set", "model.layers=1",
         "--set", "model.gate_hidden=8", "--set", "model.gate_ff=8", "--set", "train.batch_size=2"]


def digest(root, skip=()):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--seed", "7", "--n", "10", "--out", str(root / "d")]) == 0
    return root / "d"


def first_test_id(data):
    with open(data / "test.csv") as fh:
        return next(csv.DictReader(fh))["id"]


def test_gen_data_twice_is_hash_equal(data, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    for sub in ("a", "b"):
        monkeypatch.chdir(tmp_path / sub)
        assert main(["gen-data", "--seed", "7", "--n", "10", "--out", "ds"]) == 0
    assert digest(tmp_path / "a" / "ds") == digest(tmp_path / "b" / "ds")
    assert len(list((tmp_path / "a" / "ds" / "images").iterdir())) == 40


def test_train_and_sample_are_deterministic(data, tmp_path):
    outs = []
    for run in ("r1", "r2"):
        args = ["train", "--data", str(data), "--out", str(tmp_path / run), "--steps", "3"] + SMALL
        assert main(args) == 0
        assert main(["sample", "--ckpt", str(tmp_path / run / "ckpt"), "--data", str(data), "--sample",
                     first_test_id(data), "--out", str(tmp_path / run / "s"), "--steps", "2", "--emit-subject"]) == 0
        outs.append(tmp_path / run)
    assert digest(outs[0] / "ckpt") == digest(outs[1] / "ckpt")
    assert (outs[0] / "train_log.csv").read_bytes() == (outs[1] / "train_log.csv").read_bytes()
    assert digest(outs[0] / "s", skip={"config.txt"}) == digest(outs[1] / "s", skip={"config.txt"})
    c1, c2 = (bio.read_kv(o / "s" / "config.txt") for o in outs)
    assert {k for k in c1 if c1[k] != c2[k]} == {"out"}
    assert {p.name for p in (outs[0] / "s").iterdir()} == {"output.ppm", "subject.ppm", "gate_trace.csv", "config.txt"}


def test_resolved_config_reproduces_the_run(data, tmp_path):
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "a"), "--steps", "2"] + SMALL) == 0
    cfg = tmp_path / "a" / "config.txt"
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert digest(tmp_path / "a" / "ckpt") == digest(tmp_path / "b" / "ckpt")


def test_no_subject_ablation_end_to_end(data, tmp_path):
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "t"), "--steps", "2", "--routing", "no_subject"]
                + SMALL) == 0
    assert main(["sample", "--ckpt", str(tmp_path / "t" / "ckpt"), "--data", str(data), "--sample", first_test_id(data),
                 "--out", str(tmp_path / "s"), "--steps", "2"]) == 0
    rows = (tmp_path / "s" / "gate_trace.csv").read_text().splitlines()
    assert rows == ["step,layer,token_index,p,G"]


def test_inputs_are_not_mutated(data, tmp_path):
    before = digest(data)
    main(["audit", "--manifest", str(data / "train.csv"), "--out", str(tmp_path / "a.csv")])
    main(["rank", "--manifest", str(data / "train.csv"), "--k", "3", "--out", str(tmp_path / "r.csv")])
    main(["mask-perturb", str(data / "images" / "00000_true.pgm"), "--out", str(tmp_path / "mp")])
    assert digest(data) == before
    assert (tmp_path / "a.csv.config.txt").exists() and (tmp_path / "mp" / "config.txt").exists()
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9 and sum(r["split"] == "top" for r in rows) <= 3


def test_composite_and_eval(data, tmp_path):
    img = data / "images"
    out = tmp_path / "c.ppm"
    assert main(["composite", "--source", str(img / "00000_src.ppm"), "--target", str(img / "00000_tgt.ppm"),
                 "--mask", str(img / "00000_true.pgm"), "--sigma", "0", "--out", str(out)]) == 0
    comp, tgt = bio.read_ppm(out), bio.read_ppm(img / "00000_tgt.ppm")
    m = bio.read_pgm(img / "00000_true.pgm") > 0
    assert np.array_equal(comp[:, m], tgt[:, m])
    pred = tmp_path / "pred"
    pred.mkdir()
    with open(data / "test.csv") as fh:
        for r in csv.DictReader(fh):
            (pred / f"{r['id']}.ppm").write_bytes((data / r["target"]).read_bytes())
    assert main(["eval", "--pred", str(pred), "--ref", str(data), "--manifest", "test.csv", "--out",
                 str(tmp_path / "e.csv")]) == 0
    with open(tmp_path / "e.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[-1]["id"] == "mean" and float(rows[-1]["local_l1"]) == 0.0


def test_score_prints_and_flags(tmp_path, capsys):
    p = tmp_path / "raw.csv"
    p.write_text("name," + ",".join(pub.TASK17_RAW) + "\nt17," + ",".join(str(v) for v in pub.TASK17_RAW.values()) + "\n")
    assert main(["score", "--raw", str(p)]) == 0
    out = capsys.readouterr().out
    assert "score=0.581081" in out and "DIVERGES reported=0.656471" in out


def test_rank_table(tmp_path, capsys):
    p = tmp_path / "t.csv"
    rows = ["method," + ",".join(pub.MAGICBRUSH_METRICS), "," + ",".join(pub.MAGICBRUSH_DIRECTIONS)]
    rows += [k + "," + ",".join(map(str, v)) for k, v in pub.MAGICBRUSH_TABLE.items()]
    p.write_text("\n".join(rows) + "\n")
    assert main(["rank-table", "--table", str(p)]) == 0
    assert "BRIDGE 2.1000" in capsys.readouterr().out


def test_sweep_grid(data, tmp_path):
    main(["train", "--data", str(data), "--out", str(tmp_path / "t"), "--steps", "1"] + SMALL)
    assert main(["sweep", "--ckpt", str(tmp_path / "t" / "ckpt"), "--data", str(data), "--cfg", "1,2", "--alpha",
                 "0,1", "--n", "1", "--steps", "2", "--out", str(tmp_path / "sw.csv")]) == 0
    with open(tmp_path / "sw.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["cfg"], r["alpha"]) for r in rows] == [("1.0", "0.0"), ("1.0", "1.0"), ("2.0", "0.0"), ("2.0", "1.0")]


def test_diag_and_grad_check(tmp_path, capsys):
    assert main(["diag-pe", "--mode", "masked", "--trials", "5", "--out", str(tmp_path / "d.csv")]) == 0
    assert "max_mutual_weight 0" in capsys.readouterr().out
    assert main(["grad-check", "--configs", "1"]) == 0
    assert "max_relative_error" in capsys.readouterr().out


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--set", "train.nope=1"]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["score", "--raw", str(tmp_path / "missing.csv")]) == 3
    (tmp_path / "bad.csv").write_text("name,aesthetic\nx,1\n")
    assert main(["score", "--raw", str(tmp_path / "bad.csv")]) == 3
    assert main(["sample", "--ckpt", str(tmp_path), "--data", str(tmp_path), "--sample", "x", "--out",
                 str(tmp_path / "o")]) == 3
    assert main(["grad-check", "--configs", "1", "--tol", "1e-30"]) == 4
    err = capsys.readouterr().err.strip().splitlines()
    assert all(line.startswith("bridgeedit: error: ") for line in err)
    assert not (tmp_path / "o").exists()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "bridgeedit", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout


def test_config_schema(tmp_path):
    cfg = RunConfig.from_dict({"seed": "5", "model.dim": "32", "model.head_dim": "16", "sample.support": "mask"})
    assert cfg.train.seed == 5 and cfg.sample.seed == 5 and cfg.model.dim == 32
    cfg.write(tmp_path / "c.txt")
    assert RunConfig.load(tmp_path / "c.txt") == cfg
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"mystery": "1"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train.steps": "many"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train.text_drop": "2"})
