import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sparse_amt import model as M
from sparse_amt.cli import main
from sparse_amt.frontend import read_features
from sparse_amt.tokenizer import parse_notes

FIX = Path(__file__).parent / "fixtures"


@pytest.fixture
def random_ckpt(tmp_path):
    cfg = M.ModelConfig(n_input=512, d_model=16, heads=2, d_ff=32, enc_layers=1, dec_layers=2,
                        window=4, dropout=0.0, pooling=(2, 1), max_output_len=24)
    path = tmp_path / "random.ckpt"
    M.save_checkpoint(path, cfg, M.init_params(cfg, seed=0))
    return path


def test_tokenize_detokenize_roundtrip(tmp_path):
    assert main(["tokenize", str(FIX / "tiny.notes"), "-o", str(tmp_path / "t.txt")]) == 0
    ids = (tmp_path / "t.txt").read_text().split()
    assert ids[0] == "1" and ids[-1] == "2"
    assert main(["detokenize", str(tmp_path / "t.txt"), "-o", str(tmp_path / "n.notes")]) == 0
    assert (tmp_path / "n.notes").read_bytes() == (FIX / "tiny.notes").read_bytes()


def test_tokenize_to_stdout(capsys):
    assert main(["tokenize", str(FIX / "tiny.notes")]) == 0
    assert capsys.readouterr().out.startswith("1 ")


def test_eval_self(tmp_path, capsys):
    notes = str(FIX / "tiny.notes")
    assert main(["eval", "--ref", notes, "--est", notes, "--csv", str(tmp_path / "e.csv")]) == 0
    table = capsys.readouterr().out.splitlines()
    assert [line.split()[3] for line in table[1:]] == ["1.0000"] * 3
    rows = list(csv.DictReader((tmp_path / "e.csv").open()))
    assert [r["f1"] for r in rows] == ["1.000000"] * 3


def test_pipeline_features_transcribe_eval(tmp_path, random_ckpt):
    feats = tmp_path / "f.bin"
    assert main(["features", str(FIX / "tiny.wav"), "-o", str(feats)]) == 0
    frames = read_features(feats)
    assert frames.shape == (101, 512) and np.isfinite(frames).all()

    est = tmp_path / "est.notes"
    assert main(["transcribe", str(FIX / "tiny.wav"), "--ckpt", str(random_ckpt),
                 "-o", str(est)]) == 0
    notes = parse_notes(est.read_text())
    assert all(n.offset > n.onset for n in notes)

    assert main(["eval", "--ref", str(FIX / "tiny.notes"), "--est", str(est),
                 "--csv", str(tmp_path / "e.csv")]) == 0
    rows = list(csv.reader((tmp_path / "e.csv").open()))
    assert rows[0] == ["criterion", "precision", "recall", "f1", "matched", "ref", "est"]
    assert [r[0] for r in rows[1:]] == ["onset", "onset_offset", "onset_offset_velocity"]
    for r in rows[1:]:
        assert all(0.0 <= float(x) <= 1.0 for x in r[1:4])
        assert int(r[5]) == 4 and int(r[6]) == len(notes)


def test_train_toy(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train-toy", "--config", str(FIX / "toy_train.cfg"), "--out-dir", str(out)]) == 0
    lines = (out / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 4
    cfg, params, extra = M.load_checkpoint(out / "model.ckpt")
    assert cfg.d_model == 16 and extra["adamw.step"][0] == 3


def test_bench_two_cells(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench", "--scenario", str(FIX / "two_cells.scenario"), "-o", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["variant", "N", "w", "time_s", "mem_bytes", "macs"]
    assert len(rows) == 3
    for r in rows[1:]:
        assert float(r[3]) > 0 and int(r[4]) >= 0 and int(r[5]) > 0


def test_input_errors_exit_1(tmp_path, capsys):
    assert main([]) == 1
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1
    assert main(["tokenize", str(tmp_path / "missing.notes")]) == 1
    bad = tmp_path / "bad.notes"
    bad.write_text("0.5\t0.1\t60\t80\n")
    assert main(["tokenize", str(bad)]) == 1
    (tmp_path / "x.wav").write_bytes(b"RIFF")
    assert main(["features", str(tmp_path / "x.wav"), "-o", str(tmp_path / "f")]) == 1
    (tmp_path / "s.scenario").write_text("reps=two\n")
    assert main(["bench", "--scenario", str(tmp_path / "s.scenario"), "-o", "o.csv"]) == 1
    assert "error" in capsys.readouterr().err


def test_contract_violation_exit_2(tmp_path):
    cfg = M.ModelConfig(n_input=512, d_model=8, heads=2, d_ff=8, enc_layers=1, dec_layers=1,
                        window=2, pooling=(1,), max_output_len=8)
    params = M.init_params(cfg)
    params["enc.in.b"][:] = np.inf
    M.save_checkpoint(tmp_path / "inf.ckpt", cfg, params)
    with np.errstate(all="ignore"):
        code = main(["transcribe", str(FIX / "tiny.wav"), "--ckpt", str(tmp_path / "inf.ckpt"),
                     "-o", str(tmp_path / "o.notes")])
    assert code == 2


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "sparse_amt.cli", "--help"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "transcribe" in r.stdout
