"""Trusted channel bootstrap and wire protection."""

import pytest

from sgxpart.channel import (
    ChannelState,
    complete,
    establish,
    initiate,
    recv,
    respond,
    send,
)
from sgxpart.enclave import SgxDriver
from sgxpart.errors import (
    AttestationFailure,
    CrossPlatform,
    IntegrityFailure,
    NotEndpoint,
    ReplayDetected,
    WrongState,
)
from sgxpart.memory import PlatformMemory

from conftest import build_enclave


def _pair(seed=1):
    platform = PlatformMemory(pages=32, seed=seed)
    driver = SgxDriver(platform)
    a = build_enclave(driver, code=(b"endpoint a",))
    b = build_enclave(driver, code=(b"endpoint b",))
    return platform, driver, a, b


def test_establish_and_roundtrip():
    platform, _, a, b = _pair()
    link = establish(a, b)
    assert link.state is ChannelState.ESTABLISHED
    wire = send(link, a, b"from a")
    assert recv(link, b, wire) == b"from a"
    wire = send(link, b, b"from b")
    assert recv(link, a, wire) == b"from b"


def test_three_step_bootstrap_equals_wrapper():
    _, _, a, b = _pair()
    pending, first = initiate(a, b)
    second = respond(b, a, first)
    link = complete(pending, second)
    assert link.state is ChannelState.ESTABLISHED
    assert recv(link, b, send(link, a, b"hello")) == b"hello"


def test_wire_is_ciphertext_in_untrusted_memory():
    platform, _, a, b = _pair()
    link = establish(a, b)
    secret = b"SESSKEY\x02" + b"k" * 24
    wire = send(link, a, secret)
    assert secret not in wire
    on_the_wire = platform.adversary_read(link.wire_region.base, len(wire))
    assert on_the_wire == wire  # visible to the adversary...
    assert secret not in on_the_wire  # ...but opaque
    assert recv(link, b, wire) == secret


def test_replay_detected():
    _, _, a, b = _pair()
    link = establish(a, b)
    wire = send(link, a, b"one")
    assert recv(link, b, wire) == b"one"
    with pytest.raises(ReplayDetected):
        recv(link, b, wire)
    # An older counter after a newer one is also replay.
    w1 = send(link, a, b"x")
    w2 = send(link, a, b"y")
    assert recv(link, b, w2) == b"y"
    with pytest.raises(ReplayDetected):
        recv(link, b, w1)


def test_tampered_wire_rejected():
    _, _, a, b = _pair()
    link = establish(a, b)
    wire = bytearray(send(link, a, b"payload"))
    wire[-1] ^= 1
    with pytest.raises(IntegrityFailure):
        recv(link, b, bytes(wire))
    with pytest.raises(IntegrityFailure):
        recv(link, b, b"\x00" * 4)


def test_only_endpoints_may_use_the_channel():
    _, driver, a, b = _pair()
    outsider = build_enclave(driver, code=(b"outsider",))
    link = establish(a, b)
    with pytest.raises(NotEndpoint):
        send(link, outsider, b"hi")
    wire = send(link, a, b"hi")
    with pytest.raises(NotEndpoint):
        recv(link, outsider, wire)


def test_bootstrap_requires_initialized_enclaves():
    platform = PlatformMemory(pages=32, seed=1)
    driver = SgxDriver(platform)
    ready = build_enclave(driver, code=(b"ready",))
    raw = driver.ecreate(1)  # never initialized
    with pytest.raises(WrongState):
        establish(ready, raw)
    with pytest.raises(WrongState):
        establish(raw, ready)


def test_cross_platform_refused():
    _, _, a, _ = _pair(seed=1)
    _, _, _, other = _pair(seed=2)
    with pytest.raises(CrossPlatform):
        establish(a, other)


def test_forged_report_wire_rejected():
    _, _, a, b = _pair()
    pending, first = initiate(a, b)
    with pytest.raises(AttestationFailure):
        respond(b, a, b"junk" * 8)
    bent = bytearray(first)
    bent[0] ^= 0x40
    with pytest.raises(AttestationFailure):
        respond(b, a, bytes(bent))
    # Report from the wrong claimant: b cannot replay a's report as its own.
    second = respond(b, a, first)
    with pytest.raises(AttestationFailure):
        respond(b, a, second)
    link = complete(pending, second)
    assert link.state is ChannelState.ESTABLISHED


def test_closed_channel_refuses_traffic():
    _, _, a, b = _pair()
    link = establish(a, b)
    link.close()
    with pytest.raises(WrongState):
        send(link, a, b"late")
    with pytest.raises(WrongState):
        recv(link, b, b"\x00" * 32)


def test_channel_keys_differ_per_channel():
    _, driver, a, b = _pair()
    first = establish(a, b)
    second = establish(a, b)
    assert first.key != second.key
    assert first.channel_id != second.channel_id
    # Traffic on one channel cannot be opened on the other.
    wire = send(first, a, b"bound")
    with pytest.raises(IntegrityFailure):
        recv(second, b, wire)
