"""Flat memory, the allocator, and domain isolation."""

import random

import pytest

from sgxpart.errors import InvalidArgument, OutOfBounds, OutOfMemory
from sgxpart.memory import ABORT_BYTE, PAGE_SIZE, UNTRUSTED, PlatformMemory


def test_fresh_platform_is_zeroed(platform):
    assert platform.adversary_read(0, platform.size) == bytes(platform.size)


def test_alloc_is_lowest_first_fit():
    mem = PlatformMemory(pages=16, seed=0)
    a = mem.alloc(UNTRUSTED, 4)
    b = mem.alloc(1, 2)
    assert a.base == 0
    assert b.base == 4 * PAGE_SIZE
    mem.free(a)
    # The freed low hole is preferred even though higher pages are free too.
    c = mem.alloc(2, 3)
    assert c.base == 0


def test_alloc_against_reference_allocator():
    # Oracle: an explicit bitmap allocator making the same decisions.
    rng = random.Random(1234)
    mem = PlatformMemory(pages=48, seed=0)
    bitmap = [False] * 48
    live = []

    def ref_alloc(pages):
        run = 0
        for i, used in enumerate(bitmap):
            run = run + 1 if not used else 0
            if run == pages:
                start = i - pages + 1
                for j in range(start, i + 1):
                    bitmap[j] = True
                return start
        return None

    for _ in range(300):
        if live and rng.random() < 0.4:
            idx, region = live.pop(rng.randrange(len(live)))
            for j in range(idx, idx + region.pages):
                bitmap[j] = False
            mem.free(region)
            continue
        want = rng.randint(1, 6)
        expect = ref_alloc(want)
        if expect is None:
            with pytest.raises(OutOfMemory):
                mem.alloc(1, want)
        else:
            region = mem.alloc(1, want)
            assert region.base == expect * PAGE_SIZE
            live.append((expect, region))


def test_alloc_rejects_nonpositive(platform):
    for bad in (0, -3):
        with pytest.raises(InvalidArgument):
            platform.alloc(UNTRUSTED, bad)


def test_free_zeroes_pages():
    mem = PlatformMemory(pages=8, seed=0)
    region = mem.alloc(UNTRUSTED, 2)
    mem.mem_write(UNTRUSTED, region.base, b"\xaa" * 100)
    mem.free(region)
    again = mem.alloc(UNTRUSTED, 2)
    assert again.base == region.base
    assert mem.mem_read(UNTRUSTED, again.base, 100) == bytes(100)


def test_out_of_bounds_access(platform):
    with pytest.raises(OutOfBounds):
        platform.mem_read(UNTRUSTED, platform.size - 4, 8)
    with pytest.raises(OutOfBounds):
        platform.mem_write(UNTRUSTED, platform.size, b"x")
    with pytest.raises(OutOfBounds):
        platform.raw_read(-1, 4)


def test_cross_domain_read_aborts():
    mem = PlatformMemory(pages=8, seed=0)
    theirs = mem.alloc(7, 1)
    mem.raw_write(theirs.base, b"secret-bytes")
    got = mem.mem_read(UNTRUSTED, theirs.base, 16)
    assert got == bytes([ABORT_BYTE]) * 16
    # The owner still sees the real content.
    assert mem.mem_read(7, theirs.base, 12) == b"secret-bytes"


def test_read_straddling_domains_masks_per_page():
    mem = PlatformMemory(pages=8, seed=0)
    mine = mem.alloc(UNTRUSTED, 1)
    theirs = mem.alloc(3, 1)
    assert theirs.base == mine.base + PAGE_SIZE
    mem.mem_write(UNTRUSTED, mine.base, b"A" * PAGE_SIZE)
    mem.raw_write(theirs.base, b"B" * PAGE_SIZE)
    got = mem.mem_read(UNTRUSTED, mine.base + PAGE_SIZE - 4, 8)
    assert got == b"A" * 4 + bytes([ABORT_BYTE]) * 4


def test_cross_domain_write_is_dropped_and_traced():
    mem = PlatformMemory(pages=8, seed=0)
    theirs = mem.alloc(5, 1)
    mem.raw_write(theirs.base, b"before")
    mem.mem_write(UNTRUSTED, theirs.base, b"AFTER!")
    assert mem.raw_read(theirs.base, 6) == b"before"
    assert any("AccessViolation" in line for line in mem.trace.records)


def test_write_straddle_applies_only_own_pages():
    mem = PlatformMemory(pages=8, seed=0)
    mine = mem.alloc(UNTRUSTED, 1)
    mem.alloc(4, 1)
    mem.mem_write(UNTRUSTED, mine.base + PAGE_SIZE - 3, b"XXXYYY")
    assert mem.raw_read(mine.base + PAGE_SIZE - 3, 3) == b"XXX"
    assert mem.raw_read(mine.base + PAGE_SIZE, 3) == bytes(3)


def test_random_adversary_never_reads_enclave_bytes():
    rng = random.Random(99)
    mem = PlatformMemory(pages=32, seed=3)
    owned = {}
    for owner in (1, 2, 3):
        region = mem.alloc(owner, rng.randint(1, 4))
        pattern = bytes([owner * 17 % 251]) * region.size
        mem.raw_write(region.base, pattern)
        owned[owner] = region
    for _ in range(200):
        addr = rng.randrange(0, mem.size - 64)
        length = rng.randint(1, 64)
        view = mem.adversary_read(addr, length)
        for i, byte in enumerate(view):
            page_owner = mem.page_owner[(addr + i) // PAGE_SIZE]
            if page_owner not in (UNTRUSTED, None):
                assert byte == ABORT_BYTE


def test_derive_bytes_is_seed_stable_and_label_separated():
    a = PlatformMemory(pages=4, seed=11)
    b = PlatformMemory(pages=4, seed=11)
    c = PlatformMemory(pages=4, seed=12)
    assert a.derive_bytes("x", b"d", 48) == b.derive_bytes("x", b"d", 48)
    assert a.derive_bytes("x", b"d", 48) != c.derive_bytes("x", b"d", 48)
    assert a.derive_bytes("x", b"d") != a.derive_bytes("y", b"d")
    assert a.derive_bytes("x", b"d") != a.derive_bytes("x", b"e")
    assert len(a.derive_bytes("x", b"", 100)) == 100


def test_next_seq_counts_per_label(platform):
    assert platform.next_seq("a") == 1
    assert platform.next_seq("a") == 2
    assert platform.next_seq("b") == 1
