import csv

import numpy as np
import pytest

from sketchnmf.bench_io import gen_synthetic, write_matrix_market
from sketchnmf.cli import EXIT_BUDGET, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from sketchnmf.sanls import TRACE_HEADER


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "m.mtx"
    M, _, _ = gen_synthetic(80, 60, 5, 0.01, seed=0)
    write_matrix_market(path, M)
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_run_writes_trace(data, tmp_path, capsys):
    out = tmp_path / "t.csv"
    code = main(["run", "--data", str(data), "--method", "sanls-pcd", "--k", "10",
                 "--d-frac", "0.1", "--iters", "100", "--seed", "7", "--out", str(out)])
    assert code == EXIT_OK
    rows = _rows(out)
    assert tuple(rows[0]) == TRACE_HEADER and len(rows) == 102
    assert [int(r[0]) for r in rows[1:]] == list(range(101))
    assert "100 iterations" in capsys.readouterr().out


def test_run_is_reproducible(data, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        main(["run", "--data", str(data), "--method", "hals", "--k", "4", "--iters", "5",
              "--seed", "3", "--out", str(out)])
    assert [r[1] for r in _rows(a)] == [r[1] for r in _rows(b)]


def test_run_with_config_and_nodes(data, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("k=4\nmethod=sanls-pcd\nT=8\n")
    out = tmp_path / "t.csv"
    assert main(["run", "--data", str(data), "--config", str(cfg), "--nodes", "3", "--out", str(out)]) == EXIT_OK
    rows = _rows(out)
    assert len(rows) == 10 and int(rows[-1][4]) > 0


def test_secure_run_appends_clean_audit(data, tmp_path):
    audit = tmp_path / "audit.txt"
    audit.write_text("previous\n")
    code = main(["secure-run", "--data", str(data), "--protocol", "syn-ssd-uv", "--parties", "4",
                 "--k", "5", "--outer", "3", "--audit", str(audit)])
    assert code == EXIT_OK
    lines = audit.read_text().splitlines()
    assert lines[0] == "previous"
    assert lines[-1].endswith("violations=0")
    assert all("violation=0" in line for line in lines[1:-1])


def test_secure_run_widths(data, tmp_path, capsys):
    code = main(["secure-run", "--data", str(data), "--protocol", "asyn-sd", "--widths", "30,20,10",
                 "--k", "4", "--outer", "2"])
    assert code == EXIT_OK
    assert "server updates 6" in capsys.readouterr().out


def test_attack_recovers(capsys):
    assert main(["attack", "--pairs", "4", "--n", "20", "--d", "5"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "recovered, rel_err ≤ 1e-8"


def test_attack_underdetermined_and_replay(tmp_path, capsys):
    rec = tmp_path / "pairs.npz"
    assert main(["attack", "--pairs", "3", "--n", "20", "--d", "5", "--record", str(rec)]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "underdetermined, rank 15 of 20"
    assert main(["attack", "--trace", str(rec)]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "underdetermined, rank 15 of 20"


def test_report(data, tmp_path, capsys):
    for method in ("hals", "mu"):
        main(["run", "--data", str(data), "--method", method, "--k", "4", "--iters", "5",
              "--out", str(tmp_path / f"{method}.csv")])
    capsys.readouterr()
    out = tmp_path / "summary.txt"
    assert main(["report", str(tmp_path), "--target-error", "0.5", "--out", str(out)]) == EXIT_OK
    text = out.read_text().splitlines()
    assert text[0].split()[0] == "method" and {t.split()[0] for t in text[1:]} == {"hals", "mu"}


def test_generate(tmp_path):
    out = tmp_path / "g.mtx"
    assert main(["generate", "--m", "12", "--n", "9", "--k", "2", "--out", str(out)]) == EXIT_OK
    assert out.read_text().startswith("%%MatrixMarket matrix array real general")


@pytest.mark.parametrize("argv", [
    [],
    ["run"],
    ["frobnicate"],
    ["run", "--data", "x.mtx", "--method", "svd"],
    ["run", "--data", "x.mtx", "--k", "ten"],
    ["report"],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE


def test_invalid_config_is_usage(data, capsys):
    assert main(["run", "--data", str(data), "--d-frac", "1.5"]) == EXIT_USAGE


def test_data_errors(tmp_path, capsys):
    assert main(["run", "--data", str(tmp_path / "missing.mtx")]) == EXIT_DATA
    bad = tmp_path / "neg.mtx"
    bad.write_text("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 -1.0\n")
    assert main(["run", "--data", str(bad)]) == EXIT_DATA
    assert "negative" in capsys.readouterr().err


def test_budget_exceeded(data, tmp_path):
    code = main(["run", "--data", str(data), "--method", "mu", "--k", "2", "--iters", "3",
                 "--target-error", "1e-6", "--out", str(tmp_path / "t.csv")])
    assert code == EXIT_BUDGET
    code = main(["secure-run", "--data", str(data), "--protocol", "syn-sd", "--k", "2",
                 "--outer", "1", "--inner", "1", "--target-error", "1e-6"])
    assert code == EXIT_BUDGET


def test_console_entry_point():
    import subprocess
    out = subprocess.run(["sketchnmf", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "secure-run" in out.stdout
