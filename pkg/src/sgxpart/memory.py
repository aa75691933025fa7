"""Flat physical memory with page-granular ownership.

The simulator models one machine as a single byte array split into 4 KiB
pages.  Every page is owned either by untrusted software or by exactly one
enclave, and cross-domain accesses follow abort-page semantics: reads from
a foreign domain return 0xFF per byte, writes are silently dropped and
logged.  All layout is deterministic: allocation is lowest-address
first-fit and every "random" value is derived from the platform seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .errors import InvalidArgument, OutOfBounds, OutOfMemory

PAGE_SIZE = 4096
ABORT_BYTE = 0xFF

#: Domain tag for non-enclave software.  Enclave domains are positive ids.
UNTRUSTED = 0


def domain_name(domain: int) -> str:
    return "untrusted" if domain == UNTRUSTED else f"enclave:{domain}"


@dataclass(frozen=True)
class Region:
    """A contiguous page-aligned allocation and its owning domain."""

    base: int
    pages: int
    owner: int

    @property
    def size(self) -> int:
        return self.pages * PAGE_SIZE

    @property
    def end(self) -> int:
        return self.base + self.size

    def page_addr(self, index: int) -> int:
        if not 0 <= index < self.pages:
            raise OutOfBounds(f"page index {index} outside region of {self.pages}")
        return self.base + index * PAGE_SIZE


class AddressCache:
    """Cached (context, address-range) translations.

    Entries accumulate as domains touch memory and must never survive an
    enclave boundary crossing for ranges inside the enclave.
    """

    def __init__(self) -> None:
        self.entries: set[tuple[int, int, int]] = set()

    def note_access(self, ctx: int, start: int, end: int) -> None:
        if end > start:
            self.entries.add((ctx, start, end))

    def overlapping(self, start: int, end: int) -> list[tuple[int, int, int]]:
        return [e for e in self.entries if e[1] < end and start < e[2]]

    def flush_range(self, start: int, end: int) -> None:
        """Drop every entry overlapping [start, end), for any context."""
        self.entries -= set(self.overlapping(start, end))

    def clear(self) -> None:
        self.entries.clear()


class TraceLog:
    """Append-only event log.

    Security-relevant events (access violations, enclave lifecycle,
    channel traffic) are always recorded; per-access read/write events
    only when verbose tracing is on, since they are high volume.
    """

    def __init__(self, verbose: bool = False) -> None:
        self.verbose = verbose
        self.records: list[str] = []

    def event(self, line: str) -> None:
        self.records.append(line)

    def access(self, name: str, ctx: int, addr: int, length: int) -> None:
        if self.verbose:
            self.event(f"event={name} ctx={domain_name(ctx)} addr={addr:#x} len={length}")

    def violation(self, ctx: int, addr: int, length: int) -> None:
        self.event(
            f"event=AccessViolation ctx={domain_name(ctx)} addr={addr:#x} len={length}"
        )

    def find(self, prefix: str) -> list[str]:
        return [r for r in self.records if r.startswith(prefix)]

    def dump(self) -> str:
        return "\n".join(self.records) + ("\n" if self.records else "")


@dataclass
class PlatformMemory:
    """One simulated machine: memory, ownership table, trace, secrets.

    Two instances built with the same seed and fed the same operation
    sequence hold bit-identical memory.  ``platform_secret`` anchors all
    key derivation for enclaves on this machine.
    """

    pages: int = 1024
    seed: int = 0
    trace_verbose: bool = False

    data: bytearray = field(init=False, repr=False)
    page_owner: list[int] = field(init=False, repr=False)
    page_allocated: list[bool] = field(init=False, repr=False)
    address_cache: AddressCache = field(init=False, repr=False)
    trace: TraceLog = field(init=False, repr=False)
    platform_secret: bytes = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.pages <= 0:
            raise InvalidArgument("memory must have at least one page")
        self.data = bytearray(self.pages * PAGE_SIZE)
        self.page_owner = [UNTRUSTED] * self.pages
        self.page_allocated = [False] * self.pages
        self.address_cache = AddressCache()
        self.trace = TraceLog(verbose=self.trace_verbose)
        self.platform_secret = hashlib.sha256(
            b"platform-secret" + self.seed.to_bytes(8, "big", signed=False)
        ).digest()
        self._seqs: dict[str, int] = {}

    # -- geometry ------------------------------------------------------------

    @property
    def size(self) -> int:
        return self.pages * PAGE_SIZE

    def page_of(self, addr: int) -> int:
        return addr // PAGE_SIZE

    def owner_of(self, addr: int) -> int:
        self._check_range(addr, 1)
        return self.page_owner[self.page_of(addr)]

    def _check_range(self, addr: int, length: int) -> None:
        if length < 0:
            raise InvalidArgument(f"negative length {length}")
        if addr < 0 or addr + length > self.size:
            raise OutOfBounds(
                f"range [{addr:#x}, {addr + length:#x}) outside memory of {self.size:#x}"
            )

    # -- allocation ----------------------------------------------------------

    def alloc(self, owner: int, pages: int) -> Region:
        """Reserve the lowest contiguous run of free pages for ``owner``."""
        if pages <= 0:
            raise InvalidArgument(f"allocation of {pages} pages")
        run = 0
        for idx in range(self.pages):
            run = run + 1 if not self.page_allocated[idx] else 0
            if run == pages:
                start = idx - pages + 1
                for p in range(start, start + pages):
                    self.page_allocated[p] = True
                    self.page_owner[p] = owner
                return Region(base=start * PAGE_SIZE, pages=pages, owner=owner)
        raise OutOfMemory(f"no run of {pages} free pages")

    def free(self, region: Region) -> None:
        """Zero a region and return its pages to the free pool."""
        first = self.page_of(region.base)
        for p in range(first, first + region.pages):
            if not self.page_allocated[p]:
                raise InvalidArgument(f"page {p} is not allocated")
            self.page_allocated[p] = False
            self.page_owner[p] = UNTRUSTED
        self.data[region.base : region.end] = bytes(region.size)
        self.address_cache.flush_range(region.base, region.end)

    # -- access --------------------------------------------------------------

    def mem_read(self, ctx: int, addr: int, length: int) -> bytes:
        """Read with abort-page semantics.

        Bytes on pages owned by ``ctx`` or by untrusted software come back
        verbatim; bytes on any other enclave's pages read as 0xFF.
        """
        self._check_range(addr, length)
        out = bytearray()
        pos, end = addr, addr + length
        while pos < end:
            page = self.page_of(pos)
            chunk_end = min(end, (page + 1) * PAGE_SIZE)
            owner = self.page_owner[page]
            if owner == UNTRUSTED or owner == ctx:
                out += self.data[pos:chunk_end]
            else:
                out += bytes([ABORT_BYTE]) * (chunk_end - pos)
            pos = chunk_end
        self.address_cache.note_access(ctx, addr, end)
        self.trace.access("mem_read", ctx, addr, length)
        return bytes(out)

    def mem_write(self, ctx: int, addr: int, data: bytes) -> None:
        """Write within the caller's own domain.

        Chunks landing on a foreign domain's pages are dropped without
        error and an AccessViolation is traced.
        """
        self._check_range(addr, len(data))
        pos, end = addr, addr + len(data)
        offset = 0
        while pos < end:
            page = self.page_of(pos)
            chunk_end = min(end, (page + 1) * PAGE_SIZE)
            size = chunk_end - pos
            if self.page_owner[page] == ctx:
                self.data[pos:chunk_end] = data[offset : offset + size]
            else:
                self.trace.violation(ctx, pos, size)
            pos = chunk_end
            offset += size
        if data:
            self.address_cache.note_access(ctx, addr, end)
        self.trace.access("mem_write", ctx, addr, len(data))

    def adversary_read(self, addr: int, length: int) -> bytes:
        """What untrusted software observes for an arbitrary range."""
        return self.mem_read(UNTRUSTED, addr, length)

    def raw_write(self, addr: int, data: bytes) -> None:
        """Privileged write used by the hardware model (page loading)."""
        self._check_range(addr, len(data))
        self.data[addr : addr + len(data)] = data

    def raw_read(self, addr: int, length: int) -> bytes:
        """Privileged read used by the hardware model (measurement)."""
        self._check_range(addr, length)
        return bytes(self.data[addr : addr + length])

    def next_seq(self, label: str) -> int:
        """Monotonic per-label counter, part of deterministic platform state."""
        value = self._seqs.get(label, 0) + 1
        self._seqs[label] = value
        return value

    # -- deterministic derivation -------------------------------------------

    def derive_bytes(self, label: str, data: bytes = b"", length: int = 32) -> bytes:
        """Seed-stable byte derivation for nonces and simulated randomness.

        Labeled hashing rather than a shared stateful RNG keeps values
        independent of how many other draws happened first.
        """
        out = b""
        counter = 0
        while len(out) < length:
            out += hashlib.sha256(
                self.platform_secret
                + label.encode()
                + b"\x00"
                + data
                + counter.to_bytes(4, "big")
            ).digest()
            counter += 1
        return out[:length]
