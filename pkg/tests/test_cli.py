import csv
import io
import subprocess
import sys

import pytest

from taylor_attention import cli


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_basis_stdout(capsys):
    code, out, _ = run(capsys, "basis", "--d", "2", "--p-max", "3")
    assert code == 0
    assert out.splitlines()[:3] == ["degree,row,indices,multiplicity", "0,0,,1", "1,0,1,1"]
    assert out.splitlines()[-1] == "2,2,2|2,1"


def test_basis_rejects_several_widths(capsys):
    code, _, err = run(capsys, "basis", "--d", "2,3")
    assert code == 2 and "single --d" in err


def test_basis_budget_is_config_error(capsys):
    code, _, err = run(capsys, "basis", "--d", "128", "--p-max", "8")
    assert code == 2 and "invalid configuration" in err


def test_cost_to_files(tmp_path, capsys):
    out = tmp_path / "cost.csv"
    code, _, _ = run(capsys, "cost", "--d", "64", "--p-max", "4", "--n", "1000000", "--out", str(out))
    assert code == 0
    rows = list(csv.reader(out.open(encoding="utf-8")))
    assert rows[0][:3] == ["d_k", "d_v", "P"]
    assert ["64", "64", "4", "1000000", "1", "3113825", "12738308", "128000000"] == rows[-1][:8]
    assert rows[-1][-1] == "24327"
    alpha = (tmp_path / "cost_alpha.csv").read_text(encoding="utf-8")
    assert alpha.startswith("d_k,scale,p,alpha")


def test_cost_heads(capsys):
    code, out, _ = run(capsys, "cost", "--d", "64", "--heads", "1,2,4,8", "--p-max", "2",
                       "--lengths", "1000")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert sorted({r["heads"] for r in rows}) == ["1", "2", "4", "8"]


def test_recon_stdout(capsys):
    code, out, _ = run(capsys, "recon", "--d", "4", "--p-max", "2", "--n", "64", "--seed", "3")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["P"] for r in rows] == ["1", "2"] and rows[0]["seed"] == "3"


def test_recon_by_pos_file(tmp_path, capsys):
    out = tmp_path / "pos.csv"
    code, stdout, _ = run(capsys, "recon-by-pos", "--d", "4", "--p-max", "2", "--n", "32",
                          "--fallback-degree-zero", "--chunk", "8", "--out", str(out))
    assert code == 0 and stdout == ""
    assert out.read_text(encoding="utf-8").startswith("d,P,n,seed,bucket_start")


def test_perf_small(tmp_path, capsys):
    out = tmp_path / "perf.csv"
    code, _, _ = run(capsys, "perf", "--d", "4", "--p-max", "1", "--n", "200", "--n-min", "100",
                     "--runs", "1", "--out", str(out))
    assert code == 0
    assert (tmp_path / "perf.csv.meta.json").exists()
    assert len(out.read_text().splitlines()) > 2


@pytest.mark.parametrize("argv", [
    ["recon", "--n", "0"],
    ["recon", "--d", "x"],
    ["recon", "--precision", "half"],
    ["nope"],
    [],
    ["recon", "--chunk", "-1"],
])
def test_config_errors_exit_2(capsys, argv):
    with pytest.raises(SystemExit) as info:
        if cli.main(argv) == 2:
            raise SystemExit(2)
    assert info.value.code == 2


def test_selftest_exit_codes(capsys, monkeypatch):
    code, out, _ = run(capsys, "selftest", "--quick")
    assert code == 0 and out.count("PASS") == 6

    def failing(seed, quick):
        from taylor_attention.selftest import CheckResult
        return [CheckResult("basis", False, "multiplicity-sum invariant broken")]
    monkeypatch.setattr(cli, "run_selftest", failing)
    code, out, err = run(capsys, "selftest")
    assert code == 1 and "FAIL basis" in out and "basis" in err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "taylor_attention", "cost", "--d", "16",
                           "--p-max", "1", "--n", "10"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[1] == "16,16,1,10,1,17,68,320,670,1,1"
