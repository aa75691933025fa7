"""Stepped execution, interrupt transparency, and exit hygiene."""

import random

import pytest

from sgxpart.enclave import (
    EnclaveState,
    SgxDriver,
    aex,
    ecall,
    eenter,
    eexit,
    eresume,
)
from sgxpart.errors import InvalidArgument, WrongState
from sgxpart.memory import ABORT_BYTE, UNTRUSTED, PlatformMemory

from conftest import build_enclave


def counting_unit(steps):
    """A generator handler: loads registers and writes memory each step."""

    def handler(ctx, args):
        addr = ctx.page_addr(1)
        total = 0
        for i in range(steps):
            value = int.from_bytes(ctx.derive("step", bytes([i]), 8), "big")
            ctx.regs.load(i % 16, value)
            total = (total + value) & ((1 << 64) - 1)
            ctx.write(addr + 8 * i, value.to_bytes(8, "big"))
            yield
        return total.to_bytes(8, "big")

    return handler


def fresh(seed, steps=16):
    platform = PlatformMemory(pages=16, seed=seed)
    driver = SgxDriver(platform)
    enclave = build_enclave(
        driver, code=(b"code",), data=(b"",), handlers={"main": counting_unit(steps)}
    )
    return platform, driver, enclave


def run_plain(seed, steps=16):
    _, _, enclave = fresh(seed, steps)
    execution = eenter(enclave, "main")
    out = execution.run()
    eexit(execution, out)
    data = enclave.platform.raw_read(enclave.page_addr(1), 8 * steps)
    return out, data


def test_step_until_done():
    _, _, enclave = fresh(1, steps=5)
    execution = eenter(enclave, "main")
    ticks = 0
    while execution.step():
        ticks += 1
    assert ticks == 5
    assert execution.step() is False  # idempotent once finished
    eexit(execution)
    assert enclave.state is EnclaveState.INITIALIZED


def test_interrupt_every_position_is_transparent():
    steps = 16
    want_out, want_data = run_plain(3, steps)
    for cut in range(steps):
        _, _, enclave = fresh(3, steps)
        execution = eenter(enclave, "main")
        for _ in range(cut):
            execution.step()
        aex(execution, "device")
        assert enclave.state is EnclaveState.INTERRUPTED
        execution = eresume(enclave)
        out = execution.run()
        eexit(execution, out)
        data = enclave.platform.raw_read(enclave.page_addr(1), 8 * steps)
        assert out == want_out
        assert data == want_data


def test_multiple_interrupts_one_execution():
    rng = random.Random(5)
    steps = 24
    want_out, want_data = run_plain(9, steps)
    _, _, enclave = fresh(9, steps)
    execution = eenter(enclave, "main")
    done = False
    while not done:
        for _ in range(rng.randint(0, 4)):
            if not execution.step():
                done = True
                break
        if done:
            break
        aex(execution)
        execution = eresume(enclave)
    eexit(execution, execution.retval)
    assert execution.retval == want_out
    assert enclave.platform.raw_read(enclave.page_addr(1), 8 * steps) == want_data


def test_registers_cleared_on_aex_and_snapshot_kept():
    _, _, enclave = fresh(2, steps=8)
    execution = eenter(enclave, "main")
    execution.step()
    execution.step()
    live = list(execution.regs.gpr)
    assert any(live)  # handler really loaded registers
    aex(execution)
    assert execution.regs.gpr == [0] * 16 and execution.regs.rip == 0
    assert enclave.ssa is not None and list(enclave.ssa.gpr) == live
    execution = eresume(enclave)
    assert list(execution.regs.gpr) == live


def test_registers_cleared_on_eexit():
    _, _, enclave = fresh(4, steps=4)
    execution = eenter(enclave, "main")
    out = execution.run()
    assert any(execution.regs.gpr)
    eexit(execution, out)
    assert execution.regs.gpr == [0] * 16 and execution.regs.rip == 0


def test_address_cache_flushed_on_every_crossing():
    platform, _, enclave = fresh(6, steps=4)
    region = enclave.region

    def in_range():
        return platform.address_cache.overlapping(region.base, region.end)

    execution = eenter(enclave, "main")
    execution.step()
    assert in_range()  # the handler's accesses were cached
    aex(execution)
    assert not in_range()
    execution = eresume(enclave)
    execution.step()
    assert in_range()
    eexit(execution, b"")
    assert not in_range()


def test_cache_flushed_on_free():
    platform = PlatformMemory(pages=8, seed=0)
    region = platform.alloc(UNTRUSTED, 2)
    platform.mem_read(UNTRUSTED, region.base, 10)
    assert platform.address_cache.overlapping(region.base, region.end)
    platform.free(region)
    assert not platform.address_cache.overlapping(region.base, region.end)


def test_enclaves_cannot_read_each_other():
    platform = PlatformMemory(pages=24, seed=0)
    driver = SgxDriver(platform)

    def peeker(ctx, args):
        addr = int.from_bytes(args[:8], "big")
        return ctx.read(addr, 16)

    first = build_enclave(driver, code=(b"a",), data=(b"mine",), handlers={"main": peeker})
    second = build_enclave(driver, code=(b"b",), data=(b"theirs",), handlers={"main": peeker})

    # Reading its own page works; reading the sibling's aborts to 0xFF.
    own = ecall(first, "main", first.page_addr(1).to_bytes(8, "big"))
    assert own.startswith(b"mine")
    stolen = ecall(first, "main", second.page_addr(1).to_bytes(8, "big"))
    assert stolen == bytes([ABORT_BYTE]) * 16
    # And the same the other way around.
    stolen = ecall(second, "main", first.page_addr(1).to_bytes(8, "big"))
    assert stolen == bytes([ABORT_BYTE]) * 16


def test_enclave_write_into_untrusted_dropped():
    platform = PlatformMemory(pages=16, seed=0)
    driver = SgxDriver(platform)
    target = platform.alloc(UNTRUSTED, 1)

    def scribbler(ctx, args):
        ctx.write(int.from_bytes(args[:8], "big"), b"OVERWRITE")
        return b"tried"

    enclave = build_enclave(driver, handlers={"main": scribbler})
    violations = len([r for r in platform.trace.records if "AccessViolation" in r])
    ecall(enclave, "main", target.base.to_bytes(8, "big"))
    assert platform.raw_read(target.base, 9) == bytes(9)
    assert len([r for r in platform.trace.records if "AccessViolation" in r]) == violations + 1


def test_exit_value_lands_in_untrusted_mailbox():
    platform = PlatformMemory(pages=16, seed=0)
    driver = SgxDriver(platform)
    enclave = build_enclave(driver)
    out = ecall(enclave, "main", b"visible-to-host")
    assert out == b"visible-to-host"
    assert platform.adversary_read(driver.mailbox.base, len(out)) == b"visible-to-host"


def test_oversized_exit_value_rejected():
    platform = PlatformMemory(pages=16, seed=0)
    driver = SgxDriver(platform)
    enclave = build_enclave(driver)
    too_big = bytes(driver.mailbox.size + 1)
    execution = eenter(enclave, "main", b"")
    with pytest.raises(InvalidArgument):
        eexit(execution, too_big)
    eexit(execution, b"")


def test_step_refused_while_interrupted():
    _, _, enclave = fresh(8, steps=4)
    execution = eenter(enclave, "main")
    aex(execution)
    with pytest.raises(WrongState):
        execution.step()
    eexit(eresume(enclave), b"")
