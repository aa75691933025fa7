"""Deterministic enclave platform simulator with a partitioned TLS-like
server and a heartbeat over-read attack harness."""

from .channel import Channel, establish, recv, send
from .enclave import (
    Enclave,
    EnclaveState,
    PageKind,
    Report,
    SgxDriver,
    aex,
    ecall,
    eenter,
    eexit,
    eresume,
)
from .errors import SgxPartError
from .harness import AttackReport, emit, run_attack, scan_for_markers, scan_spans, table1
from .memory import PAGE_SIZE, UNTRUSTED, PlatformMemory
from .miniserver import (
    HeartbeatRequest,
    Server,
    ServerConfig,
    SimClient,
    run_script,
    start,
)
from .planner import PartitionPlan, Scheme, metrics, plan

__version__ = "0.1.0"

__all__ = [
    "AttackReport",
    "Channel",
    "Enclave",
    "EnclaveState",
    "HeartbeatRequest",
    "PAGE_SIZE",
    "PageKind",
    "PartitionPlan",
    "PlatformMemory",
    "Report",
    "Scheme",
    "Server",
    "ServerConfig",
    "SgxDriver",
    "SgxPartError",
    "SimClient",
    "UNTRUSTED",
    "aex",
    "ecall",
    "eenter",
    "eexit",
    "emit",
    "eresume",
    "establish",
    "metrics",
    "plan",
    "recv",
    "run_attack",
    "run_script",
    "scan_for_markers",
    "scan_spans",
    "send",
    "start",
    "table1",
    "__version__",
]
