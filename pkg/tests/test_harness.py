"""Attack reports and the comparison table."""

import json

import pytest

from sgxpart.errors import InvalidArgument
from sgxpart.harness import (
    EXPECTED_LEAKS,
    AttackReport,
    attacks_to_json,
    emit,
    render_attack,
    render_table,
    rows_to_json,
    run_attack,
    scan_for_markers,
    scan_spans,
    table1,
)
from sgxpart.miniserver import (
    CREDENTIAL_MARKER,
    KEY_LEN,
    PRIVATE_KEY_MARKER,
    SESSION_KEY_MARKER,
)


def test_scan_for_markers():
    assert scan_for_markers(b"") == ()
    assert scan_for_markers(b"noise" + PRIVATE_KEY_MARKER) == ("private_key",)
    both = SESSION_KEY_MARKER + b"gap" + CREDENTIAL_MARKER
    assert scan_for_markers(both) == ("session_key", "credentials")
    everything = PRIVATE_KEY_MARKER + SESSION_KEY_MARKER + CREDENTIAL_MARKER
    assert scan_for_markers(everything) == ("private_key", "session_key", "credentials")


def test_scan_spans_reports_offsets():
    blob = b"xx" + PRIVATE_KEY_MARKER + b"yy" + CREDENTIAL_MARKER + CREDENTIAL_MARKER
    spans = scan_spans(blob)
    assert spans == (
        (2, KEY_LEN, "private_key"),
        (12, KEY_LEN, "credentials"),
        (20, KEY_LEN, "credentials"),
    )
    assert scan_spans(b"") == ()


@pytest.mark.parametrize("scheme", (1, 2, 3, 4))
def test_vulnerable_attack_matches_matrix(scheme):
    report = run_attack(scheme, seed=1, connections=2)
    assert report.leaked == EXPECTED_LEAKS[scheme]
    assert report.echo_ok
    assert report.matches_expected


@pytest.mark.parametrize("scheme", (1, 2, 3, 4))
def test_patched_attack_leaks_nothing(scheme):
    report = run_attack(scheme, seed=1, connections=2, patched=True)
    assert report.leaked == ()
    assert report.response_length == 0
    assert report.echo_ok
    assert report.matches_expected


def test_attack_stable_across_seeds_spot():
    for seed in (1, 17, 99):
        for scheme in (1, 4):
            assert run_attack(scheme, seed=seed).leaked == EXPECTED_LEAKS[scheme]


def test_attack_requires_a_connection():
    with pytest.raises(InvalidArgument):
        run_attack(1, connections=0)


def test_report_spans_agree_with_classes():
    report = run_attack(1, seed=3, connections=1)
    assert {name for _, _, name in report.leaked_spans} == set(report.leaked)
    for offset, length, _ in report.leaked_spans:
        assert 0 <= offset < report.response_length
        assert length == KEY_LEN
    assert report.entry_total >= report.entries_first_handshake


def test_report_json_shape():
    report = run_attack(2, seed=1, connections=1)
    entry = json.loads(attacks_to_json([report]))[0]
    assert entry["attack"]["leaked"] == {
        "private_key": False,
        "session_key": False,
        "credentials": True,
    }
    assert entry["attack"]["response_length"] == report.response_length
    assert [tuple(span) for span in entry["attack"]["leaked_spans"]] == list(
        report.leaked_spans
    )
    assert entry["counters"]["entries_first_handshake"] == report.entries_first_handshake
    assert entry["verdict"] == "expected"


def test_report_detects_unexpected_outcomes():
    bad = AttackReport(
        scheme=2,
        seed=1,
        connections=1,
        patched=False,
        response_length=10,
        leaked=("private_key",),
        leaked_spans=((0, KEY_LEN, "private_key"),),
        expected=("credentials",),
        echo_ok=True,
        entries_first_handshake=4,
        entry_total=4,
    )
    assert not bad.matches_expected
    assert "UNEXPECTED" in render_attack(bad)
    assert json.loads(attacks_to_json([bad]))[0]["verdict"] == "UNEXPECTED"


def test_table1_values():
    rows = table1(seed=1)
    got = {
        r.scheme: (r.enclaves, r.channels_per_connection, r.tcb_class, r.duplication)
        for r in rows
    }
    assert got == {
        1: (1, 0, "L", False),
        2: (2, 0, "S", False),
        3: (21, 3, "S", True),
        4: (11, 2, "S", True),
    }
    caps = {r.scheme: r.capacity_pages for r in rows}
    assert caps[2] < caps[1] <= caps[4] <= caps[3]
    leaks = {r.scheme: (r.leaked_vulnerable, r.leaked_patched) for r in rows}
    assert leaks[1] == (("private_key", "session_key"), ())
    for scheme in (2, 3, 4):
        assert leaks[scheme] == (("credentials",), ())


def test_renderings_cover_all_rows():
    rows = table1(seed=1)
    text = render_table(rows)
    for row in rows:
        assert row.label in text
    parsed = json.loads(rows_to_json(rows))
    assert [entry["scheme"] for entry in parsed] == [1, 2, 3, 4]
    assert parsed[0]["leaked_vulnerable"] == ["private_key", "session_key"]


def test_emit_is_deterministic_and_typed():
    rows = table1(seed=1)
    assert emit(rows, "json") == emit(rows, "json")
    assert emit(rows, "json") == rows_to_json(rows)
    assert emit(rows, "table") == render_table(rows)

    reports = [run_attack(2, connections=1), run_attack(2, connections=1, patched=True)]
    assert emit(reports, "json") == attacks_to_json(reports)
    text = emit(reports, "table")
    assert text.count("verdict") == 2

    with pytest.raises(InvalidArgument):
        emit(rows, "csv")


def test_emit_empty_table_is_header_only():
    text = emit([], "table")
    lines = text.splitlines()
    assert lines[0].startswith("scheme")
    assert all("yes" not in line and "no" not in line for line in lines[1:])
    assert emit([], "json") == "[]"
