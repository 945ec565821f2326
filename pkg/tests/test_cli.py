from __future__ import annotations

import subprocess
import sys
from importlib import resources

import pytest

from recagg.cli import main

PROGRAMS = resources.files("recagg").joinpath("programs")


def prog(name: str) -> str:
    return str(PROGRAMS.joinpath(name))


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_markov_final_populations(capsys):
    code, out, err = run(capsys, "run", "--program", prog("markov.dl"), "--facts", prog("mov.csv"), "--query", "fpop")
    assert code == 0, err
    rows = [line.split(",") for line in out.splitlines()]
    assert [r[:2] for r in rows] == [["fpop", '"a"'], ["fpop", '"b"']]
    assert float(rows[0][2]) == pytest.approx(133333.33, abs=0.01)
    assert float(rows[1][2]) == pytest.approx(66666.67, abs=0.01)


def test_output_is_byte_identical_across_runs(capsys):
    argv = ["run", "--program", prog("kmeans.dl"), "--facts", prog("points.csv"), "--all", "--trace"]
    first = run(capsys, *argv)
    second = run(capsys, *argv)
    assert first == second
    assert first[2].startswith("iter=1 ")


def test_program_facts_and_table_format(capsys):
    code, out, _ = run(capsys, "run", "--program", prog("groupby_sum.dl"), "--query", "qs", "--format", "table")
    assert code == 0
    assert out.splitlines() == ["qs (2 rows)", "  x  3", "  y  5"]


@pytest.mark.parametrize("mode", ["completed", "stratified_rewrite", "naive"])
def test_modes_print_the_same(capsys, mode):
    code, out, _ = run(capsys, "run", "--program", prog("tc.dl"), "--facts", prog("edge.csv"), "--query", "tc", "--mode", mode)
    assert code == 0
    reference = run(capsys, "run", "--program", prog("tc.dl"), "--facts", prog("edge.csv"), "--query", "tc")[1]
    assert out == reference and out


def test_fact_directory(tmp_path, capsys):
    (tmp_path / "edge.facts").write_text("a\tb\nb\tc\n")
    (tmp_path / "ignored.facts").write_text("x\n")
    program = tmp_path / "tc.dl"
    program.write_text("tc(X, Y) :- edge(X, Y).\ntc(X, Z) :- tc(X, Y), edge(Y, Z).\n")
    code, out, _ = run(capsys, "run", "--program", str(program), "--fact-dir", str(tmp_path), "--query", "tc")
    assert code == 0
    assert out.splitlines() == ['tc,"a","b"', 'tc,"a","c"', 'tc,"b","c"']


def test_verify_reports_oracle_agreement(capsys):
    code, out, _ = run(capsys, "run", "--program", prog("kmeans.dl"), "--facts", prog("points.csv"), "--verify")
    assert code == 0
    assert "engine==oracle: PASS" in out
    assert "completed==stratified_rewrite: PASS" in out
    code, out, _ = run(capsys, "run", "--program", prog("markov.dl"), "--facts", prog("mov.csv"), "--verify")
    assert code == 0 and "engine==oracle: PASS" in out


def test_explain_strata(capsys):
    code, out, _ = run(capsys, "run", "--program", prog("markov.dl"), "--explain-strata")
    assert code == 0
    assert "stratum 0 (staged): next" in out
    assert "increment=+1" in out


def test_not_stratifiable_exit(tmp_path, capsys):
    program = tmp_path / "win.dl"
    program.write_text("win(X) :- move(X, Y), not win(Y).\n")
    code, _, err = run(capsys, "run", "--program", str(program), "--all")
    assert code == 3
    assert "win -not-> win" in err


def test_parse_error_exit(tmp_path, capsys):
    program = tmp_path / "bad.dl"
    program.write_text("p(X) :- q(X)\n")
    code, _, err = run(capsys, "run", "--program", str(program), "--all")
    assert code == 2 and "parse error" in err


def test_usage_errors(tmp_path, capsys):
    assert run(capsys, "run")[0] == 1
    assert run(capsys, "run", "--program", prog("tc.dl"))[0] == 1
    assert run(capsys, "run", "--program", str(tmp_path / "missing.dl"), "--all")[0] == 1
    assert run(capsys, "run", "--program", prog("tc.dl"), "--query", "nope")[0] == 1


def test_evaluation_error_exit(tmp_path, capsys):
    program = tmp_path / "div.dl"
    program.write_text("r(X, Y) :- e(X, Y).\nq(Z) :- e(X, Y), Z = X / Y.\n")
    facts = tmp_path / "e.csv"
    facts.write_text("e,1,0\n")
    code, _, err = run(capsys, "run", "--program", str(program), "--facts", str(facts), "--all")
    assert code == 4 and "division" in err.lower()


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "recagg", "run", "--program", prog("groupby_sum.dl"), "--query", "qs"],
        capture_output=True,
        text=True,
        check=False,
    )
    assert proc.returncode == 0
    assert proc.stdout == 'qs,"x",3\nqs,"y",5\n'
