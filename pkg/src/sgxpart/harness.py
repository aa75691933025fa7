"""Attack driver and scheme comparison tables.

Runs the heartbeat over-read against a server built from each partition
plan, classifies what leaked by marker, and renders the side-by-side
numbers (enclave counts, channel counts, trusted code size, capacity,
entries per handshake, leak classes) as text or JSON.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from . import planner
from .errors import InvalidArgument
from .miniserver import (
    CREDENTIAL_MARKER,
    HEARTBEAT_MAX_CLAIM,
    KEY_LEN,
    PRIVATE_KEY_MARKER,
    SESSION_KEY_MARKER,
    HeartbeatRequest,
    ServerConfig,
    SimClient,
    start,
)

#: Marker names in scan output, in reporting order.
LEAK_CLASSES = ("private_key", "session_key", "credentials")

_MARKER_OF = {
    "private_key": PRIVATE_KEY_MARKER,
    "session_key": SESSION_KEY_MARKER,
    "credentials": CREDENTIAL_MARKER,
}

#: What the over-read reaches under each scheme: the secrets adjacent to
#: the heartbeat buffer in the domain that hosts the heartbeat unit.
EXPECTED_LEAKS: dict[int, tuple[str, ...]] = {
    1: ("private_key", "session_key"),
    2: ("credentials",),
    3: ("credentials",),
    4: ("credentials",),
}

ATTACK_PAYLOAD = b"latitude"


def scan_spans(blob: bytes) -> tuple[tuple[int, int, str], ...]:
    """Every marker hit in a byte string as (offset, length, class)."""
    spans = []
    for name in LEAK_CLASSES:
        marker = _MARKER_OF[name]
        pos = blob.find(marker)
        while pos >= 0:
            spans.append((pos, KEY_LEN, name))
            pos = blob.find(marker, pos + 1)
    return tuple(sorted(spans))


def scan_for_markers(blob: bytes) -> tuple[str, ...]:
    """Classify a byte string by which secret markers appear in it."""
    found = {name for _, _, name in scan_spans(blob)}
    return tuple(name for name in LEAK_CLASSES if name in found)


@dataclass(frozen=True)
class AttackReport:
    scheme: int
    seed: int
    connections: int
    patched: bool
    response_length: int
    leaked: tuple[str, ...]
    leaked_spans: tuple[tuple[int, int, str], ...]
    expected: tuple[str, ...]
    echo_ok: bool
    entries_first_handshake: int
    entry_total: int

    @property
    def matches_expected(self) -> bool:
        return self.leaked == self.expected and self.echo_ok

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "scheme_label": planner.Scheme(self.scheme).label,
            "seed": self.seed,
            "connections": self.connections,
            "patched": self.patched,
            "attack": {
                "response_length": self.response_length,
                "leaked": {name: name in self.leaked for name in LEAK_CLASSES},
                "leaked_spans": [list(span) for span in self.leaked_spans],
                "expected": list(self.expected),
                "echo_ok": self.echo_ok,
            },
            "counters": {
                "entries_first_handshake": self.entries_first_handshake,
                "entry_total": self.entry_total,
            },
            "verdict": "expected" if self.matches_expected else "UNEXPECTED",
        }


def run_attack(
    scheme: int,
    seed: int = 1,
    connections: int = 2,
    patched: bool = False,
    memory_pages: int = 1024,
) -> AttackReport:
    """Build a server, establish sessions, fire the over-read, classify."""
    if connections < 1:
        raise InvalidArgument("attack needs at least one connection")
    plan = planner.plan(planner.Scheme(scheme), connections)
    server = start(
        ServerConfig(
            plan=plan,
            seed=seed,
            vulnerable_heartbeat=not patched,
            memory_pages=memory_pages,
        )
    )
    try:
        client = SimClient(server)
        before = server.entry_total()
        client.connect(1)
        entries = server.entry_total() - before
        for connection_id in range(2, connections + 1):
            client.connect(connection_id)
        client.send(1, b"warm-up")

        response = server.heartbeat(
            1, HeartbeatRequest(payload=ATTACK_PAYLOAD, claimed_length=HEARTBEAT_MAX_CLAIM)
        )
        spans = scan_spans(response)

        # A well-formed heartbeat must keep working either way.
        echo = server.heartbeat(
            1, HeartbeatRequest(payload=ATTACK_PAYLOAD, claimed_length=len(ATTACK_PAYLOAD))
        )
        echo_ok = echo == ATTACK_PAYLOAD
        total = server.entry_total()
    finally:
        server.shutdown()
    leaked_names = {name for _, _, name in spans}
    return AttackReport(
        scheme=scheme,
        seed=seed,
        connections=connections,
        patched=patched,
        response_length=len(response),
        leaked=tuple(name for name in LEAK_CLASSES if name in leaked_names),
        leaked_spans=spans,
        expected=() if patched else EXPECTED_LEAKS[scheme],
        echo_ok=echo_ok,
        entries_first_handshake=entries,
        entry_total=total,
    )


@dataclass(frozen=True)
class ComparisonRow:
    scheme: int
    label: str
    enclaves: int
    channels_per_connection: int
    tcb_class: str
    duplication: bool
    duplicated_units: tuple[str, ...]
    capacity_pages: int
    capacity_class: str
    entries_per_handshake: int
    leaked_vulnerable: tuple[str, ...]
    leaked_patched: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "label": self.label,
            "enclaves": self.enclaves,
            "channels_per_connection": self.channels_per_connection,
            "tcb_class": self.tcb_class,
            "duplication": self.duplication,
            "duplicated_units": list(self.duplicated_units),
            "capacity_pages": self.capacity_pages,
            "capacity_class": self.capacity_class,
            "entries_per_handshake": self.entries_per_handshake,
            "leaked_vulnerable": list(self.leaked_vulnerable),
            "leaked_patched": list(self.leaked_patched),
        }


CAPACITY_CONNECTIONS = 10  # plan size used for the capacity column


def table1(seed: int = 1) -> list[ComparisonRow]:
    """One row per scheme: structural metrics plus live attack outcomes."""
    rows = []
    for scheme in planner.Scheme:
        sized_plan = planner.plan(scheme, CAPACITY_CONNECTIONS)
        metrics = planner.metrics(sized_plan)
        duplicated = planner.duplicated_units(sized_plan)
        vulnerable = run_attack(int(scheme), seed=seed, connections=2, patched=False)
        fixed = run_attack(int(scheme), seed=seed, connections=2, patched=True)
        rows.append(
            ComparisonRow(
                scheme=int(scheme),
                label=scheme.label,
                enclaves=metrics.enclave_count,
                channels_per_connection=metrics.trusted_channels_per_connection,
                tcb_class=metrics.tcb_class,
                duplication=bool(duplicated),
                duplicated_units=duplicated,
                capacity_pages=metrics.capacity_pages,
                capacity_class=metrics.capacity_class,
                entries_per_handshake=vulnerable.entries_first_handshake,
                leaked_vulnerable=vulnerable.leaked,
                leaked_patched=fixed.leaked,
            )
        )
    return rows


# -- rendering ----------------------------------------------------------------

_TABLE_COLUMNS = (
    ("scheme", lambda r: f"{r.scheme}:{r.label}"),
    ("enclaves", lambda r: str(r.enclaves)),
    ("chan/conn", lambda r: str(r.channels_per_connection)),
    ("tcb", lambda r: r.tcb_class),
    ("dup", lambda r: "yes" if r.duplication else "no"),
    ("cap_pages", lambda r: str(r.capacity_pages)),
    ("cap", lambda r: r.capacity_class),
    ("entries/hs", lambda r: str(r.entries_per_handshake)),
    ("leak(vuln)", lambda r: ",".join(r.leaked_vulnerable) or "-"),
    ("leak(patched)", lambda r: ",".join(r.leaked_patched) or "-"),
)


def render_table(rows: list[ComparisonRow]) -> str:
    cells = [[header for header, _ in _TABLE_COLUMNS]]
    cells += [[fmt(row) for _, fmt in _TABLE_COLUMNS] for row in rows]
    widths = [max(len(line[i]) for line in cells) for i in range(len(_TABLE_COLUMNS))]
    lines = ["  ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip()
             for line in cells]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines)


def rows_to_json(rows: list[ComparisonRow]) -> str:
    return json.dumps([row.to_dict() for row in rows], indent=2, sort_keys=True)


def render_attack(report: AttackReport) -> str:
    mode = "patched" if report.patched else "vulnerable"
    leaked = ",".join(report.leaked) or "nothing"
    lines = [
        f"scheme {report.scheme} ({planner.Scheme(report.scheme).label}), "
        f"{mode}, seed {report.seed}, {report.connections} connection(s)",
        f"  over-read response: {report.response_length} bytes, leaked: {leaked}",
        f"  exact-length heartbeat intact: {'yes' if report.echo_ok else 'NO'}",
        f"  verdict: {'as expected' if report.matches_expected else 'UNEXPECTED'}",
    ]
    return "\n".join(lines)


def attacks_to_json(reports: list[AttackReport]) -> str:
    return json.dumps([report.to_dict() for report in reports], indent=2, sort_keys=True)


def emit(items: list, format: str = "table") -> str:
    """Render comparison rows or attack reports; same input, same bytes."""
    items = list(items)
    if format == "json":
        return json.dumps([item.to_dict() for item in items], indent=2, sort_keys=True)
    if format != "table":
        raise InvalidArgument(f"unknown format {format!r}")
    if items and isinstance(items[0], AttackReport):
        return "\n\n".join(render_attack(report) for report in items)
    return render_table(items)
