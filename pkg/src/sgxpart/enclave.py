"""Enclave lifecycle, measurement, execution, and key operations.

An enclave is a reserved range of physical pages with a lifecycle

    Created -> Initialized -> Executing -> Initialized (exit)
                    ^             |
                    |             v
                 Removed      Interrupted -> Executing (resume)

Pages are added and measured by privileged software before initialization;
after initialization the measurement is frozen as the enclave identity and
no further pages can be added.  Execution is single-threaded: at most one
live execution per enclave, entered only through declared entry points.

Ring-0 operations live on :class:`SgxDriver`; ring-3 operations (enter,
exit, key and report access) are module-level functions.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from enum import Enum, IntFlag
from types import GeneratorType
from typing import Callable, Iterable, Optional

from . import crypto
from .errors import (
    DuplicatePage,
    EmptyEnclave,
    InvalidArgument,
    NoSuchEntryPoint,
    NoSuchPage,
    NotInEnclave,
    OutOfRange,
    SealIntegrityFailure,
    WrongEnclaveIdentity,
    WrongState,
)
from .memory import PAGE_SIZE, UNTRUSTED, PlatformMemory, Region

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1

IDENTITY_LEN = 32
USER_DATA_LEN = 64
REPORT_MAC_LEN = 32
REPORT_LEN = IDENTITY_LEN + USER_DATA_LEN + REPORT_MAC_LEN

SEAL_NONCE_LEN = 16


class EnclaveState(Enum):
    CREATED = "created"
    INITIALIZED = "initialized"
    EXECUTING = "executing"
    INTERRUPTED = "interrupted"
    REMOVED = "removed"


class PageKind(Enum):
    CODE = "code"
    DATA = "data"


class PagePerms(IntFlag):
    R = 1
    W = 2
    X = 4


@dataclass
class EpcmEntry:
    """Per-page bookkeeping: location, type, permissions, validity."""

    page_addr: int
    kind: PageKind
    perms: PagePerms
    valid: bool = True
    unit: Optional[str] = None


# -- measurement -------------------------------------------------------------

MEAS_CREATE = 1
MEAS_ADD = 2
MEAS_EXTEND = 3

_RECORD = struct.Struct(">BQ")


class Measurement:
    """Hash chain over the enclave build log.

    Each record is (op-tag, page-offset, 32-byte content digest); the
    digest of the whole log is the enclave identity once frozen.  Records
    carry offsets, not absolute addresses, so identical build sequences
    measure identically wherever the enclave lands in memory.
    """

    def __init__(self, records: Optional[Iterable[tuple[int, int, bytes]]] = None) -> None:
        self.records: list[tuple[int, int, bytes]] = list(records or [])

    def record(self, tag: int, offset: int, content_digest: bytes) -> None:
        if len(content_digest) != 32:
            raise InvalidArgument("measurement records take 32-byte digests")
        self.records.append((tag, offset, content_digest))

    def serialize(self) -> bytes:
        out = len(self.records).to_bytes(8, "big")
        for tag, offset, content_digest in self.records:
            out += _RECORD.pack(tag, offset) + content_digest
        return out

    def digest(self) -> bytes:
        return hashlib.sha256(self.serialize()).digest()

    @classmethod
    def replay(cls, records: Iterable[tuple[int, int, bytes]]) -> "Measurement":
        return cls(records)


# -- execution state ---------------------------------------------------------

class RegisterFile:
    """Sixteen 64-bit general registers plus an instruction counter."""

    SLOTS = 16

    def __init__(self) -> None:
        self.gpr = [0] * self.SLOTS
        self.rip = 0

    def load(self, slot: int, value: int) -> None:
        self.gpr[slot] = value & MASK64

    def clear(self) -> None:
        self.gpr = [0] * self.SLOTS
        self.rip = 0

    def snapshot(self) -> "RegisterFile":
        copy = RegisterFile()
        copy.gpr = list(self.gpr)
        copy.rip = self.rip
        return copy

    def restore(self, other: "RegisterFile") -> None:
        self.gpr = list(other.gpr)
        self.rip = other.rip

    def to_bytes(self) -> bytes:
        return b"".join(v.to_bytes(8, "big") for v in self.gpr) + self.rip.to_bytes(8, "big")

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, RegisterFile)
            and self.gpr == other.gpr
            and self.rip == other.rip
        )


@dataclass(frozen=True)
class Report:
    """Local attestation statement: identity and caller data under a
    platform-wide MAC key.  Only verifiable on the issuing platform."""

    identity: bytes
    user_data: bytes
    mac: bytes

    def to_bytes(self) -> bytes:
        return self.identity + self.user_data + self.mac

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Report":
        if len(raw) != REPORT_LEN:
            raise InvalidArgument(f"report must be {REPORT_LEN} bytes")
        return cls(
            identity=raw[:IDENTITY_LEN],
            user_data=raw[IDENTITY_LEN : IDENTITY_LEN + USER_DATA_LEN],
            mac=raw[IDENTITY_LEN + USER_DATA_LEN :],
        )


class Enclave:
    """One enclave instance.  Mutated only through driver and ring-3 ops."""

    def __init__(self, eid: int, platform: PlatformMemory, region: Region, driver: "SgxDriver") -> None:
        self.id = eid
        self.platform = platform
        self.region = region
        self.driver = driver
        self.state = EnclaveState.CREATED
        self.epcm: dict[int, EpcmEntry] = {}
        self.measurement = Measurement()
        self.identity: Optional[bytes] = None
        self.entry_points: set[str] = set()
        self.handlers: dict[str, Callable] = {}
        self.ssa: Optional[RegisterFile] = None
        self.entry_count = 0
        self.exit_count = 0
        self.aex_count = 0
        self.seal_count = 0
        self._extended: set[int] = set()
        self._execution: Optional["Execution"] = None

    def page_addr(self, offset: int) -> int:
        return self.region.page_addr(offset)

    def bind(self, unit: str, handler: Callable) -> None:
        """Attach the simulated behavior for a hosted code unit."""
        self.handlers[unit] = handler

    def _require(self, *states: EnclaveState) -> None:
        if self.state not in states:
            want = "/".join(s.value for s in states)
            raise WrongState(f"enclave {self.id} is {self.state.value}, needs {want}")

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"<Enclave id={self.id} state={self.state.value} pages={self.region.pages}>"


class EnclaveContext:
    """Facilities available to a code unit while it runs inside."""

    def __init__(self, execution: "Execution") -> None:
        self.execution = execution
        self.enclave = execution.enclave
        self.platform = execution.enclave.platform
        self.regs = execution.regs

    def read(self, addr: int, length: int) -> bytes:
        return self.platform.mem_read(self.enclave.id, addr, length)

    def write(self, addr: int, data: bytes) -> None:
        self.platform.mem_write(self.enclave.id, addr, data)

    def page_addr(self, offset: int) -> int:
        return self.enclave.page_addr(offset)

    def derive(self, label: str, data: bytes = b"", length: int = 32) -> bytes:
        return self.platform.derive_bytes(label, data, length)

    def egetkey(self, policy: str = "identity") -> bytes:
        return egetkey(self.enclave, policy)

    def seal(self, plaintext: bytes) -> bytes:
        return seal(self.enclave, plaintext)

    def unseal(self, blob: bytes) -> bytes:
        return unseal(self.enclave, blob)

    def ereport(self, user_data: bytes) -> Report:
        return ereport(self.enclave, user_data)

    def verify_report(self, report: Report) -> bool:
        return verify_report(self.enclave, report)


class Execution:
    """A single entered computation; steppable so interrupts can land
    between any two instructions."""

    def __init__(self, enclave: Enclave, unit: str, args: bytes) -> None:
        self.enclave = enclave
        self.unit = unit
        self.args = args
        self.regs = RegisterFile()
        self.retval = b""
        self.done = False
        self.ctx = EnclaveContext(self)
        self._handler = enclave.handlers[unit]
        self._gen: Optional[GeneratorType] = None
        self._started = False

    def step(self) -> bool:
        """Advance one instruction.  Returns False once the unit finished.

        No unit code runs before the first step, so a fault inside the
        unit always surfaces after entry, where the caller can still take
        the exit path.
        """
        self.enclave._require(EnclaveState.EXECUTING)
        if self.done:
            return False
        if not self._started:
            self._started = True
            out = self._handler(self.ctx, self.args)
            if not isinstance(out, GeneratorType):
                self.retval = out if out is not None else b""
                self.done = True
                return False
            self._gen = out
        assert self._gen is not None
        try:
            next(self._gen)
            self.regs.rip += 1
            return True
        except StopIteration as stop:
            self.retval = stop.value if stop.value is not None else b""
            self.done = True
            return False

    def run(self) -> bytes:
        while self.step():
            pass
        return self.retval


# -- ring-0 driver ------------------------------------------------------------

class SgxDriver:
    """Privileged facade: page allocation, loading, measurement, teardown.

    Unprivileged code interacts with enclaves only through the module-level
    entry/exit/key functions.
    """

    MAILBOX_PAGES = 2

    def __init__(self, platform: PlatformMemory) -> None:
        self.platform = platform
        self.enclaves: dict[int, Enclave] = {}
        self._next_id = 1
        # Staging area where exit values become visible to untrusted code.
        self.mailbox = platform.alloc(UNTRUSTED, self.MAILBOX_PAGES)

    def ecreate(self, pages: int) -> Enclave:
        if pages <= 0:
            raise InvalidArgument(f"enclave of {pages} pages")
        eid = self._next_id
        region = self.platform.alloc(eid, pages)
        self._next_id += 1
        enclave = Enclave(eid, self.platform, region, self)
        enclave.measurement.record(
            MEAS_CREATE, pages, crypto.digest(b"create", pages.to_bytes(8, "big"))
        )
        self.enclaves[eid] = enclave
        self.platform.trace.event(
            f"ECREATE id={eid} base={region.base:#x} pages={pages}"
        )
        return enclave

    def eadd(
        self,
        enclave: Enclave,
        offset: int,
        content: bytes = b"",
        kind: PageKind = PageKind.DATA,
        perms: Optional[PagePerms] = None,
        entry_point: Optional[str] = None,
    ) -> None:
        """Load one page at ``offset`` pages into the enclave range.

        Code pages may declare the code unit they expose as an entry
        point.  Adding is only legal before initialization.
        """
        enclave._require(EnclaveState.CREATED)
        if not 0 <= offset < enclave.region.pages:
            raise OutOfRange(f"offset {offset} outside enclave of {enclave.region.pages}")
        if offset in enclave.epcm:
            raise DuplicatePage(f"offset {offset} already added")
        if len(content) > PAGE_SIZE:
            raise InvalidArgument("page content exceeds page size")
        if entry_point is not None and kind is not PageKind.CODE:
            raise InvalidArgument("entry points must be code pages")
        if perms is None:
            perms = PagePerms.R | PagePerms.X if kind is PageKind.CODE else PagePerms.R | PagePerms.W
        page_addr = enclave.page_addr(offset)
        self.platform.raw_write(page_addr, content.ljust(PAGE_SIZE, b"\x00"))
        enclave.epcm[offset] = EpcmEntry(page_addr=page_addr, kind=kind, perms=perms, unit=entry_point)
        meta = crypto.digest(
            b"add",
            kind.value.encode(),
            bytes([int(perms)]),
            (entry_point or "").encode(),
        )
        enclave.measurement.record(MEAS_ADD, offset, meta)
        if entry_point is not None:
            enclave.entry_points.add(entry_point)
        self.platform.trace.event(
            f"EADD id={enclave.id} offset={offset} kind={kind.value}"
        )

    def eextend(self, enclave: Enclave, offset: int) -> None:
        """Fold the current content of an added page into the measurement."""
        enclave._require(EnclaveState.CREATED)
        entry = enclave.epcm.get(offset)
        if entry is None:
            raise NoSuchPage(f"no page at offset {offset}")
        content = self.platform.raw_read(entry.page_addr, PAGE_SIZE)
        enclave.measurement.record(MEAS_EXTEND, offset, crypto.digest(content))
        enclave._extended.add(offset)
        self.platform.trace.event(f"EEXTEND id={enclave.id} offset={offset}")

    def einit(self, enclave: Enclave) -> bytes:
        """Freeze the measurement as the enclave identity."""
        enclave._require(EnclaveState.CREATED)
        has_measured_code = any(
            enclave.epcm[off].kind is PageKind.CODE for off in enclave._extended
        )
        if not has_measured_code:
            raise EmptyEnclave("initialization needs at least one measured code page")
        unmeasured = sorted(set(enclave.epcm) - enclave._extended)
        if unmeasured:
            logger.warning(
                "enclave %d initialized with unmeasured pages at offsets %s",
                enclave.id,
                unmeasured,
            )
        enclave.identity = enclave.measurement.digest()
        enclave.state = EnclaveState.INITIALIZED
        self.platform.trace.event(
            f"EINIT id={enclave.id} identity={enclave.identity.hex()[:16]}"
        )
        return enclave.identity

    def eremove(self, enclave: Enclave) -> None:
        """Zero the enclave's pages and return them to the free pool."""
        enclave._require(EnclaveState.CREATED, EnclaveState.INITIALIZED)
        self.platform.free(enclave.region)
        for entry in enclave.epcm.values():
            entry.valid = False
        enclave.state = EnclaveState.REMOVED
        enclave._execution = None
        self.platform.trace.event(f"EREMOVE id={enclave.id}")


# -- ring-3 operations --------------------------------------------------------

def eenter(enclave: Enclave, unit: str, args: bytes = b"") -> Execution:
    """Enter an initialized enclave through a declared entry point."""
    enclave._require(EnclaveState.INITIALIZED)
    if unit not in enclave.entry_points or unit not in enclave.handlers:
        raise NoSuchEntryPoint(f"{unit!r} is not an entry point of enclave {enclave.id}")
    enclave.state = EnclaveState.EXECUTING
    enclave.entry_count += 1
    enclave.platform.address_cache.flush_range(enclave.region.base, enclave.region.end)
    enclave.platform.trace.event(f"EENTER id={enclave.id} unit={unit}")
    execution = Execution(enclave, unit, args)
    enclave._execution = execution
    return execution


def eexit(execution: Execution, retval: Optional[bytes] = None) -> bytes:
    """Leave the enclave, publishing ``retval`` to untrusted memory.

    Registers are cleared and cached translations for the enclave range
    are flushed on the way out.
    """
    enclave = execution.enclave
    enclave._require(EnclaveState.EXECUTING)
    if enclave._execution is not execution:
        raise WrongState("stale execution handle")
    if retval is None:
        retval = execution.retval
    driver = enclave.driver
    if len(retval) > driver.mailbox.size:
        raise InvalidArgument("return value exceeds exit mailbox")
    enclave.platform.mem_write(UNTRUSTED, driver.mailbox.base, retval)
    execution.regs.clear()
    enclave.exit_count += 1
    enclave.state = EnclaveState.INITIALIZED
    enclave._execution = None
    enclave.platform.address_cache.flush_range(enclave.region.base, enclave.region.end)
    enclave.platform.trace.event(f"EEXIT id={enclave.id} len={len(retval)}")
    return retval


def aex(execution: Execution, event: str = "interrupt") -> None:
    """Asynchronous exit: snapshot registers to the save area, then clear
    them so nothing leaks to the interrupt handler."""
    enclave = execution.enclave
    enclave._require(EnclaveState.EXECUTING)
    enclave.ssa = execution.regs.snapshot()
    execution.regs.clear()
    enclave.aex_count += 1
    enclave.state = EnclaveState.INTERRUPTED
    enclave.platform.address_cache.flush_range(enclave.region.base, enclave.region.end)
    enclave.platform.trace.event(f"AEX id={enclave.id} event={event}")


def eresume(enclave: Enclave) -> Execution:
    """Restore the interrupted execution exactly where it stopped."""
    enclave._require(EnclaveState.INTERRUPTED)
    execution = enclave._execution
    if execution is None or enclave.ssa is None:
        raise WrongState(f"enclave {enclave.id} has no interrupted execution")
    execution.regs.restore(enclave.ssa)
    enclave.state = EnclaveState.EXECUTING
    enclave.platform.address_cache.flush_range(enclave.region.base, enclave.region.end)
    enclave.platform.trace.event(f"ERESUME id={enclave.id}")
    return execution


def ecall(enclave: Enclave, unit: str, args: bytes = b"") -> bytes:
    """Enter, run to completion, exit.  The common host-call pattern."""
    execution = eenter(enclave, unit, args)
    try:
        out = execution.run()
    except BaseException:
        eexit(execution, b"")
        raise
    return eexit(execution, out)


def egetkey(enclave: Enclave, policy: str = "identity") -> bytes:
    """Derive this enclave's key for ``policy``.  Only callable inside."""
    if enclave.state is not EnclaveState.EXECUTING:
        raise NotInEnclave("key derivation is only available while executing")
    if policy != "identity":
        raise InvalidArgument(f"unknown key policy {policy!r}")
    assert enclave.identity is not None
    enclave.platform.trace.event(f"EGETKEY id={enclave.id} policy={policy}")
    return crypto.kdf(
        enclave.platform.platform_secret, "enclave-key", enclave.identity, policy.encode()
    )


def seal(enclave: Enclave, plaintext: bytes) -> bytes:
    """Authenticated encryption under the enclave's identity key.

    Blob layout: identity (32) | nonce (16) | ciphertext+tag.
    """
    key = egetkey(enclave)
    assert enclave.identity is not None
    enclave.seal_count += 1
    nonce = enclave.platform.derive_bytes(
        "seal-nonce",
        enclave.identity + enclave.seal_count.to_bytes(8, "big"),
        SEAL_NONCE_LEN,
    )
    return enclave.identity + nonce + crypto.ae_encrypt(key, nonce, plaintext)


def unseal(enclave: Enclave, blob: bytes) -> bytes:
    key = egetkey(enclave)
    assert enclave.identity is not None
    if len(blob) < IDENTITY_LEN + SEAL_NONCE_LEN + crypto.TAG_LEN:
        raise SealIntegrityFailure("sealed blob too short")
    identity = blob[:IDENTITY_LEN]
    if identity != enclave.identity:
        raise WrongEnclaveIdentity("blob sealed by a different enclave identity")
    nonce = blob[IDENTITY_LEN : IDENTITY_LEN + SEAL_NONCE_LEN]
    try:
        return crypto.ae_decrypt(key, nonce, blob[IDENTITY_LEN + SEAL_NONCE_LEN :])
    except ValueError as exc:
        raise SealIntegrityFailure(str(exc)) from exc


def _report_key(platform: PlatformMemory) -> bytes:
    return crypto.kdf(platform.platform_secret, "report-key")


def _mint_report(platform: PlatformMemory, identity: bytes, user_data: bytes) -> Report:
    """Hardware-level report construction, shared with channel setup."""
    if len(user_data) > USER_DATA_LEN:
        raise InvalidArgument(f"user data exceeds {USER_DATA_LEN} bytes")
    padded = user_data.ljust(USER_DATA_LEN, b"\x00")
    tag = crypto.mac(_report_key(platform), identity, padded)[:REPORT_MAC_LEN]
    return Report(identity=identity, user_data=padded, mac=tag)


def ereport(enclave: Enclave, user_data: bytes) -> Report:
    """Produce a report binding this enclave's identity to caller data."""
    if enclave.state is not EnclaveState.EXECUTING:
        raise NotInEnclave("reports can only be requested while executing")
    assert enclave.identity is not None
    enclave.platform.trace.event(f"EREPORT id={enclave.id}")
    return _mint_report(enclave.platform, enclave.identity, user_data)


def _verify_report_raw(platform: PlatformMemory, report: Report) -> bool:
    expect = crypto.mac(_report_key(platform), report.identity, report.user_data)
    return crypto.mac(b"cmp", expect[:REPORT_MAC_LEN]) == crypto.mac(b"cmp", report.mac)


def verify_report(enclave: Enclave, report: Report) -> bool:
    """Check a report against this platform's MAC key.  False on any
    tampered field or a report from another platform."""
    if enclave.state is not EnclaveState.EXECUTING:
        raise NotInEnclave("verification is only available while executing")
    return _verify_report_raw(enclave.platform, report)
