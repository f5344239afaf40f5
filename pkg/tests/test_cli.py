import json

import pytest

from effadam.cli import main
from effadam.experiment import read_csv
from effadam.problems import load_case

SMALL = ["--N", "3", "--d", "20", "--T", "15"]


def test_run_writes_identical_csv(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["run", "--algo", "Ours_com1", "--seed", "4", *SMALL, "--out", str(a)]) == 0
    assert main(["run", "--algo", "Ours_com1", "--seed", "4", *SMALL, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = read_csv(open(a))
    assert len(rows) == 15 and rows[0].case_seed == 4


def test_reference_engine_and_trace_match(tmp_path):
    a, b, tr = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "t.jsonl"
    main(["run", "--algo", "Ours_com2", *SMALL, "--out", str(a)])
    main(["run", "--algo", "Ours_com2", *SMALL, "--out", str(b), "--trace", str(tr)])
    assert a.read_bytes() == b.read_bytes()
    lines = tr.read_text().splitlines()
    assert len(lines) == 15 and json.loads(lines[-1])["ledger"]["rounds"] == 15


def test_config_file_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"algo": "custom", "uplink": "topk:0.5", "downlink": "identity", "N": 2, "d": 10, "T": 5}))
    assert main(["run", "--config", str(cfg), "--T", "3", "--error-feedback", "false"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 4 and out[1].startswith("custom_")


def test_invalid_config_exit_code(capsys):
    assert main(["run", "--algo", "Ours_com1", "--uplink", "topk:0.5", *SMALL]) == 2
    assert "error" in capsys.readouterr().err


def test_sweep(tmp_path):
    out = tmp_path / "sw"
    args = ["sweep", "--algos", "Ours_full,Ours_com1", "--alphas", "1e-4,1e-3", "--cases", "2", *SMALL, "--out-dir", str(out)]
    assert main(args) == 0
    sel = (out / "selection.csv").read_text().splitlines()
    assert len(sel) == 5 and sum(line.endswith(",1") for line in sel[1:]) == 2
    assert len(read_csv(open(out / "metrics.csv"))) == 2 * 2 * 15
    assert (out / "grad_norm_iterations.png").stat().st_size > 0
    assert (out / "grad_norm_bits.png").stat().st_size > 0


def test_theory(capsys):
    assert main(["theory", "--G", "500", "--L", "4000", "--F-gap", "50"]) == 0
    out = capsys.readouterr().out
    assert "codec_bits_w = 2000" in out and "name,value" in out
    assert main(["theory"]) == 2


def test_cases(tmp_path):
    assert main(["cases", "--case-seeds", "1,2", "--d", "8", "--out-dir", str(tmp_path)]) == 0
    assert load_case(tmp_path / "case_002.npz").seed == 2
    assert (tmp_path / "manifest.csv").read_text().count("\n") == 3


def test_report(tmp_path):
    csv_path = tmp_path / "m.csv"
    main(["run", "--algo", "Ours_com1", *SMALL, "--out", str(csv_path)])
    assert main(["report", str(csv_path), "--out-dir", str(tmp_path / "fig")]) == 0
    assert sorted(p.name for p in (tmp_path / "fig").iterdir()) == ["grad_norm_bits.png", "grad_norm_iterations.png"]


def test_requires_subcommand():
    with pytest.raises(SystemExit):
        main([])
