"""Authenticated channels between enclaves on one platform.

Two initialized enclaves bootstrap a shared key by exchanging reports
over fresh nonces; each side accepts the other only after its report
verifies.  Messages then travel through untrusted memory as

    counter (8 bytes, big-endian) | ciphertext | tag (16 bytes)

with strictly increasing counters for replay protection.  The channel
key never leaves the two endpoints; everything the host relays is
ciphertext.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from . import crypto
from .enclave import Enclave, EnclaveState, Report, _mint_report, _verify_report_raw
from .errors import (
    AttestationFailure,
    CrossPlatform,
    IntegrityFailure,
    InvalidArgument,
    NotEndpoint,
    ReplayDetected,
    WrongState,
)
from .memory import UNTRUSTED, PlatformMemory, Region

NONCE_LEN = 32
COUNTER_LEN = 8


class ChannelState(Enum):
    PENDING = "pending"
    ESTABLISHED = "established"
    CLOSED = "closed"


@dataclass
class Channel:
    """An established pairwise channel.  One object models both ends."""

    channel_id: int
    platform: PlatformMemory
    enclave_a: Enclave
    enclave_b: Enclave
    key: bytes
    wire_region: Region
    state: ChannelState = ChannelState.ESTABLISHED
    send_counter: int = 0
    recv_counter: int = 0

    def is_endpoint(self, enclave: Enclave) -> bool:
        return enclave is self.enclave_a or enclave is self.enclave_b

    def close(self) -> None:
        self.state = ChannelState.CLOSED


@dataclass
class PendingChannel:
    """Initiator-side state between the two report exchanges."""

    enclave_a: Enclave
    enclave_b: Enclave
    nonce_a: bytes


def _require_ready(enclave: Enclave) -> None:
    if enclave.state is not EnclaveState.INITIALIZED:
        raise WrongState(
            f"channel endpoints must be initialized, enclave {enclave.id} is {enclave.state.value}"
        )
    assert enclave.identity is not None


def _fresh_nonce(platform: PlatformMemory) -> bytes:
    seq = platform.next_seq("channel-nonce")
    return platform.derive_bytes("channel-nonce", seq.to_bytes(8, "big"), NONCE_LEN)


def _check_report(platform: PlatformMemory, wire: bytes, claimant: Enclave, addressee: Enclave) -> Report:
    """Verify a report wire and its peer binding.  Returns the report."""
    try:
        report = Report.from_bytes(wire)
    except InvalidArgument as exc:
        raise AttestationFailure(str(exc)) from exc
    if not _verify_report_raw(platform, report):
        raise AttestationFailure("report MAC did not verify")
    if report.identity != claimant.identity:
        raise AttestationFailure("report identity does not match the expected peer")
    if report.user_data[NONCE_LEN:] != addressee.identity:
        raise AttestationFailure("report is addressed to a different enclave")
    return report


def initiate(enclave_a: Enclave, enclave_b: Enclave) -> tuple[PendingChannel, bytes]:
    """First flight: A attests itself to B over a fresh nonce."""
    if enclave_a.platform is not enclave_b.platform:
        raise CrossPlatform("endpoints live on different platform instances")
    _require_ready(enclave_a)
    _require_ready(enclave_b)
    nonce_a = _fresh_nonce(enclave_a.platform)
    report = _mint_report(
        enclave_a.platform, enclave_a.identity, nonce_a + enclave_b.identity
    )
    return PendingChannel(enclave_a, enclave_b, nonce_a), report.to_bytes()


def respond(enclave_b: Enclave, enclave_a: Enclave, report_wire: bytes) -> bytes:
    """Second flight: B checks A's report and attests back."""
    _require_ready(enclave_b)
    _check_report(enclave_b.platform, report_wire, claimant=enclave_a, addressee=enclave_b)
    nonce_b = _fresh_nonce(enclave_b.platform)
    report = _mint_report(
        enclave_b.platform, enclave_b.identity, nonce_b + enclave_a.identity
    )
    return report.to_bytes()


def complete(pending: PendingChannel, report_wire: bytes) -> Channel:
    """A checks B's report and derives the channel key."""
    a, b = pending.enclave_a, pending.enclave_b
    report = _check_report(a.platform, report_wire, claimant=b, addressee=a)
    nonce_b = report.user_data[:NONCE_LEN]
    key = crypto.kdf(
        a.platform.platform_secret,
        "channel-key",
        a.identity,
        b.identity,
        pending.nonce_a,
        nonce_b,
    )
    channel_id = a.platform.next_seq("channel-id")
    wire_region = a.platform.alloc(UNTRUSTED, 1)
    a.platform.trace.event(f"CHAN_EST a={a.id} b={b.id}")
    return Channel(
        channel_id=channel_id,
        platform=a.platform,
        enclave_a=a,
        enclave_b=b,
        key=key,
        wire_region=wire_region,
    )


def establish(enclave_a: Enclave, enclave_b: Enclave) -> Channel:
    """Full mutual attestation in one call."""
    pending, report_a = initiate(enclave_a, enclave_b)
    report_b = respond(enclave_b, enclave_a, report_a)
    return complete(pending, report_b)


def send(channel: Channel, sender: Enclave, plaintext: bytes) -> bytes:
    """Seal a message onto the channel's untrusted wire buffer."""
    if channel.state is not ChannelState.ESTABLISHED:
        raise WrongState(f"channel {channel.channel_id} is {channel.state.value}")
    if not channel.is_endpoint(sender):
        raise NotEndpoint(f"enclave {sender.id} is not on channel {channel.channel_id}")
    channel.send_counter += 1
    counter = channel.send_counter.to_bytes(COUNTER_LEN, "big")
    wire = counter + crypto.ae_encrypt(channel.key, counter, plaintext)
    if len(wire) > channel.wire_region.size:
        raise InvalidArgument("message exceeds the channel wire buffer")
    channel.platform.mem_write(UNTRUSTED, channel.wire_region.base, wire)
    channel.platform.trace.event(
        f"CHAN_MSG chan={channel.channel_id} ctr={channel.send_counter} len={len(plaintext)}"
    )
    return wire


def recv(channel: Channel, receiver: Enclave, wire: bytes) -> bytes:
    """Open a wire message, enforcing counter monotonicity."""
    if channel.state is not ChannelState.ESTABLISHED:
        raise WrongState(f"channel {channel.channel_id} is {channel.state.value}")
    if not channel.is_endpoint(receiver):
        raise NotEndpoint(f"enclave {receiver.id} is not on channel {channel.channel_id}")
    if len(wire) < COUNTER_LEN + crypto.TAG_LEN:
        raise IntegrityFailure("wire message too short")
    counter_bytes, body = wire[:COUNTER_LEN], wire[COUNTER_LEN:]
    counter = int.from_bytes(counter_bytes, "big")
    if counter <= channel.recv_counter:
        raise ReplayDetected(
            f"counter {counter} did not advance past {channel.recv_counter}"
        )
    try:
        plaintext = crypto.ae_decrypt(channel.key, counter_bytes, body)
    except ValueError as exc:
        raise IntegrityFailure(str(exc)) from exc
    channel.recv_counter = counter
    return plaintext
