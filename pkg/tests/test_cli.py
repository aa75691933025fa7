"""Command-line interface behavior."""

import json

import pytest

from sgxpart import cli, harness


def run(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_table1_text(capsys):
    code, out, _ = run(capsys, "table1")
    assert code == 0
    assert "WholeApplication" in out and "Hybrid" in out
    assert "private_key,session_key" in out


def test_table1_json(capsys):
    code, out, _ = run(capsys, "table1", "--format", "json")
    assert code == 0
    rows = json.loads(out)
    assert [r["scheme"] for r in rows] == [1, 2, 3, 4]


def test_attack_single_scheme(capsys):
    code, out, _ = run(capsys, "attack", "--scheme", "2")
    assert code == 0
    assert "AllSecrets" in out and "credentials" in out
    assert "as expected" in out


def test_attack_all_schemes_json(capsys):
    code, out, _ = run(capsys, "attack", "--all-schemes", "--format", "json")
    assert code == 0
    reports = json.loads(out)
    assert len(reports) == 4
    assert all(r["verdict"] == "expected" for r in reports)


def test_attack_check_passes(capsys):
    code, _, _ = run(capsys, "attack", "--all-schemes", "--check")
    assert code == 0


def test_attack_check_fails_on_mismatch(capsys, monkeypatch):
    monkeypatch.setitem(harness.EXPECTED_LEAKS, 3, ("private_key",))
    code, _, err = run(capsys, "attack", "--scheme", "3", "--check")
    assert code == 2
    assert "check failed" in err


def test_attack_patched_check(capsys):
    code, out, _ = run(capsys, "attack", "--all-schemes", "--patched", "--check")
    assert code == 0
    assert "leaked: nothing" in out


def test_run_default_script(capsys):
    code, out, _ = run(capsys, "run", "--scheme", "1")
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0].startswith("connect 1 ok cert=")
    assert lines[-1] == "close 1 ok"


def test_run_script_file_and_trace(capsys, tmp_path):
    script = tmp_path / "session.txt"
    script.write_text("connect 1\nconnect 2\nsend 2 aa\nclose 1\nclose 2\n")
    trace = tmp_path / "trace.log"
    code, out, _ = run(
        capsys, "run", "--scheme", "3", "--script", str(script), "--trace", str(trace)
    )
    assert code == 0
    assert out.strip().splitlines()[2] == "send 2 aa"
    text = trace.read_text()
    assert "ECREATE" in text and "EENTER" in text and "CHAN_EST" in text


def test_run_infers_connections(capsys, tmp_path):
    script = tmp_path / "many.txt"
    script.write_text("\n".join(f"connect {i}" for i in range(1, 5)))
    code, out, _ = run(capsys, "run", "--scheme", "4", "--script", str(script))
    assert code == 0
    assert len(out.strip().splitlines()) == 4


def test_run_reports_domain_errors(capsys, tmp_path):
    script = tmp_path / "bad.txt"
    script.write_text("send 1 00\n")  # no session established
    code, _, err = run(capsys, "run", "--scheme", "2", "--script", str(script))
    assert code == 1
    assert "error:" in err


def test_plan_json(capsys):
    code, out, _ = run(capsys, "plan", "--scheme", "3", "--connections", "2")
    assert code == 0
    layout = json.loads(out)
    assert layout["scheme"] == "SeparateSecret"
    assert layout["metrics"]["trusted_channels_per_connection"] == 3


def test_unknown_subcommand_exits_nonzero(capsys):
    with pytest.raises(SystemExit):
        cli.main(["warp"])
