"""A deterministic TLS-like echo server laid out by a partition plan.

The server hosts the fixed code-unit inventory across enclaves according
to its plan: the same handshake, record exchange, and heartbeat logic runs
whether a unit landed inside an enclave or in untrusted memory, which is
exactly what makes the schemes comparable.

Secrets carry fixed 8-byte marker prefixes so leak scans can classify
what a byte string contains.  The heartbeat payload buffer sits at the
tail of the page immediately below the secret region of whichever domain
hosts the heartbeat unit; an over-read from the buffer therefore walks
straight into that domain's secrets.

Simulated I/O (framing bytes through shared memory) always executes
outside enclaves, mirroring the rule that enclave code cannot perform
I/O directly, even under the whole-application scheme that loads the
dispatch unit into the enclave.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from . import channel as chan
from . import crypto
from .enclave import EnclaveContext, PageKind, SgxDriver, ecall
from .errors import (
    DuplicateConnection,
    HandshakeFailure,
    InvalidArgument,
    NoSuchSession,
    RecordIntegrityFailure,
)
from .memory import PAGE_SIZE, UNTRUSTED, PlatformMemory, Region
from .planner import (
    UNTRUSTED_PLACEMENT,
    EnclaveSpec,
    PartitionPlan,
    Scheme,
    SecretClass,
    validate,
)

# -- secret tagging -----------------------------------------------------------

MARKER_LEN = 8
PRIVATE_KEY_MARKER = b"PRIVKEY\x01"
SESSION_KEY_MARKER = b"SESSKEY\x02"
CREDENTIAL_MARKER = b"CREDENT\x03"

MARKERS: dict[SecretClass, bytes] = {
    SecretClass.PRIVATE_KEY: PRIVATE_KEY_MARKER,
    SecretClass.SESSION_KEY: SESSION_KEY_MARKER,
    SecretClass.CREDENTIALS: CREDENTIAL_MARKER,
}

KEY_LEN = 32  # marker prefix + 24 bytes of key material

# -- page geometry ------------------------------------------------------------

#: Key/credential slots are 64 bytes: 32 key bytes + two 8-byte record
#: sequence counters + padding.
SLOT_SIZE = 64

#: The heartbeat payload buffer occupies the last bytes of its page, so a
#: claimed length up to one page reads past the page boundary.
HEARTBEAT_CAPACITY = 256
HEARTBEAT_BUFFER_OFFSET = PAGE_SIZE - HEARTBEAT_CAPACITY
HEARTBEAT_MAX_CLAIM = PAGE_SIZE

MAX_PLANNED_CONNECTIONS = 63  # slots per 4 KiB page, one page reserved for shared keys

NONCE_LEN = 16
PREMASTER_LEN = 24
WRAP_NONCE_LEN = 8

# handler command bytes
CMD_HELLO = 1
CMD_KEYSHARE = 2
CMD_KEYSHARE_FIN = 3
CMD_PROVISION = 4
CMD_DECRYPT = 5
CMD_ENCRYPT = 6
CMD_FINALIZE = 7
CMD_CLOSE = 8
CMD_CERT = 9
CMD_HEARTBEAT = 10

DIR_CLIENT = b"c2s"
DIR_SERVER = b"s2c"


def _pack(cmd: int, conn: int, slot: int, *blobs: bytes) -> bytes:
    out = bytes([cmd]) + conn.to_bytes(8, "big") + slot.to_bytes(2, "big")
    for blob in blobs:
        out += len(blob).to_bytes(4, "big") + blob
    return out


def _unpack(payload: bytes) -> tuple[int, int, int, list[bytes]]:
    cmd = payload[0]
    conn = int.from_bytes(payload[1:9], "big")
    slot = int.from_bytes(payload[9:11], "big")
    blobs = []
    pos = 11
    while pos < len(payload):
        size = int.from_bytes(payload[pos : pos + 4], "big")
        pos += 4
        blobs.append(payload[pos : pos + size])
        pos += size
    return cmd, conn, slot, blobs


# -- records ------------------------------------------------------------------

def seal_record(key: bytes, direction: bytes, seq: int, plaintext: bytes) -> bytes:
    seq_bytes = seq.to_bytes(8, "big")
    return seq_bytes + crypto.ae_encrypt(key, direction + seq_bytes, plaintext)


def open_record(key: bytes, direction: bytes, expected_seq: int, record: bytes) -> bytes:
    """Decrypt one record, enforcing the exact next sequence number."""
    if len(record) < 8 + crypto.TAG_LEN:
        raise RecordIntegrityFailure("record too short")
    seq = int.from_bytes(record[:8], "big")
    if seq != expected_seq:
        raise RecordIntegrityFailure(f"record sequence {seq}, expected {expected_seq}")
    try:
        return crypto.ae_decrypt(key, direction + record[:8], record[8:])
    except ValueError as exc:
        raise RecordIntegrityFailure(str(exc)) from exc


def format_certificate(public_id: bytes) -> bytes:
    """The certificate parser's output: a framed public identity."""
    return b"CERT:" + public_id.hex().encode() + b":END"


def _session_key_from(premaster: bytes, client_nonce: bytes, server_nonce: bytes) -> bytes:
    material = crypto.digest(b"session-key", premaster, client_nonce, server_nonce)
    return SESSION_KEY_MARKER + material[: KEY_LEN - MARKER_LEN]


# -- configuration and session state -----------------------------------------

DEFAULT_CREDENTIALS = (("alice", "wonderland"), ("bob", "curtains"))


@dataclass
class ServerConfig:
    plan: PartitionPlan
    seed: int = 1
    vulnerable_heartbeat: bool = True
    memory_pages: int = 1024
    trace_verbose: bool = False
    credentials: tuple[tuple[str, str], ...] = DEFAULT_CREDENTIALS


@dataclass
class SessionContext:
    """Host-side view of one established session.

    The session key itself stays in the pages of whichever enclaves the
    plan assigns it to; this object only records where.
    """

    connection_id: int
    slot: int
    established: bool
    transcript_digest: bytes
    certificate: bytes


@dataclass(frozen=True)
class HeartbeatRequest:
    payload: bytes
    claimed_length: int


@dataclass
class EnclaveInstance:
    spec: EnclaveSpec
    enclave: object  # Enclave; kept loose to avoid import cycles in tooling
    pages: dict[str, int] = field(default_factory=dict)

    def page_addr(self, name: str) -> int:
        return self.enclave.page_addr(self.pages[name])


#: Units the host enters directly, per enclave role.  Everything else in
#: an enclave is internal and reachable only from these.
ENTRY_UNITS: dict[str, tuple[str, ...]] = {
    "library": (
        "handshake_fsm",
        "record_encrypt",
        "record_decrypt",
        "heartbeat",
        "cert_parse",
        "session_mgmt",
    ),
    "key_handling": ("handshake_fsm",),
    "record_crypto": ("record_encrypt", "record_decrypt"),
    "handshake": ("handshake_fsm",),
    "data_exchange": ("record_encrypt", "record_decrypt"),
    "private_key": ("private_key_ops",),
    "session": ("handshake_fsm", "record_encrypt", "record_decrypt"),
    "service": ("cert_parse",),
}


class Server:
    """The running system: platform, enclaves, channels, sessions."""

    def __init__(self, config: ServerConfig) -> None:
        validate(config.plan)
        if config.plan.connections > MAX_PLANNED_CONNECTIONS:
            raise InvalidArgument(
                f"plans support at most {MAX_PLANNED_CONNECTIONS} connections"
            )
        self.config = config
        self.plan = config.plan
        self.platform = PlatformMemory(
            pages=config.memory_pages, seed=config.seed, trace_verbose=config.trace_verbose
        )
        self.driver = SgxDriver(self.platform)
        self.server_private_key = PRIVATE_KEY_MARKER + self.platform.derive_bytes(
            "server-private-key", b"", KEY_LEN - MARKER_LEN
        )
        self.public_id = crypto.digest(b"public-identity", self.server_private_key)[:8]
        self.instances: dict[tuple[str, Optional[int]], EnclaveInstance] = {}
        self.channels: dict[tuple[str, str, Optional[int]], chan.Channel] = {}
        self.sessions: dict[int, SessionContext] = {}
        self._slot_of: dict[int, int] = {}
        self._next_slot = 1
        self._shut_down = False

        self._layout_untrusted()
        self._build_enclaves()
        self._establish_channels()

    # -- construction ---------------------------------------------------------

    def _layout_untrusted(self) -> None:
        """Fixed allocation order keeps addresses reproducible per scheme."""
        if self.plan.scheme is Scheme.WHOLE_APPLICATION:
            self.hb_region: Optional[Region] = None
            self.cred_region = self.platform.alloc(UNTRUSTED, 1)
        else:
            # Heartbeat buffer page directly below the credential page:
            # the untrusted domain's secrets are adjacent to the buffer.
            pair = self.platform.alloc(UNTRUSTED, 2)
            self.hb_region = Region(pair.base, 1, UNTRUSTED)
            self.cred_region = Region(pair.base + PAGE_SIZE, 1, UNTRUSTED)
        self.io_region = self.platform.alloc(UNTRUSTED, 1)
        if self.plan.scheme is Scheme.WHOLE_APPLICATION:
            self.session_state_region: Optional[Region] = None
        else:
            self.session_state_region = self.platform.alloc(UNTRUSTED, 1)
        for row, (user, password) in enumerate(self.config.credentials):
            entry = user.encode() + b":" + CREDENTIAL_MARKER + password.encode()
            if len(entry) > SLOT_SIZE:
                raise InvalidArgument("credential entry exceeds its slot")
            self.platform.mem_write(
                UNTRUSTED, self.cred_region.base + row * SLOT_SIZE, entry.ljust(SLOT_SIZE, b"\x00")
            )

    def _data_page_plan(self, spec: EnclaveSpec) -> list[tuple[str, bytes]]:
        """Named data pages for a role, with initial content."""
        pk_slot = self.server_private_key.ljust(SLOT_SIZE, b"\x00")
        if spec.role == "library":
            pages = [("heartbeat_buffer", b""), ("keys", pk_slot)]
            pages += [(f"session:{c}", b"") for c in range(1, self.plan.connections + 1)]
            return pages
        if spec.role == "key_handling":
            return [("private", pk_slot), ("session_store", b"")]
        if spec.role == "record_crypto":
            return [("work", b"")]
        if spec.role in ("handshake", "data_exchange"):
            return [("keys", b"")]
        if spec.role == "private_key":
            return [("private", pk_slot)]
        if spec.role == "session":
            # Session key slot at offset 0, private-key copy at slot 1.
            return [("keys", bytes(SLOT_SIZE) + pk_slot)]
        if spec.role == "service":
            return []
        raise InvalidArgument(f"no layout for role {spec.role!r}")

    def _build_enclaves(self) -> None:
        for spec in self.plan.enclave_specs:
            data_pages = self._data_page_plan(spec)
            if len(data_pages) != spec.data_pages:
                raise InvalidArgument(
                    f"role {spec.role!r} layout disagrees with its plan"
                )
            enclave = self.driver.ecreate(spec.code_pages + spec.data_pages)
            entries = ENTRY_UNITS[spec.role]
            unit_table = ",".join(spec.units).encode()
            for offset in range(spec.code_pages):
                content = unit_table + b"|page:" + str(offset).encode()
                entry = entries[offset] if offset < len(entries) else None
                self.driver.eadd(
                    enclave, offset, content, kind=PageKind.CODE, entry_point=entry
                )
            index: dict[str, int] = {}
            for i, (name, content) in enumerate(data_pages):
                offset = spec.code_pages + i
                self.driver.eadd(enclave, offset, content, kind=PageKind.DATA)
                index[name] = offset
            for offset in range(spec.code_pages + spec.data_pages):
                self.driver.eextend(enclave, offset)
            self.driver.einit(enclave)
            instance = EnclaveInstance(spec=spec, enclave=enclave, pages=index)
            self.instances[(spec.role, spec.connection)] = instance
            self._bind_handlers(instance)

    def _establish_channels(self) -> None:
        for spec in self.plan.channel_specs:
            if spec.per_connection:
                for slot in range(1, self.plan.connections + 1):
                    a = self._instance(spec.endpoint_a, slot).enclave
                    b = self._instance(spec.endpoint_b, slot).enclave
                    self.channels[(spec.endpoint_a, spec.endpoint_b, slot)] = chan.establish(a, b)
            else:
                a = self._instance(spec.endpoint_a, None).enclave
                b = self._instance(spec.endpoint_b, None).enclave
                self.channels[(spec.endpoint_a, spec.endpoint_b, None)] = chan.establish(a, b)

    def _instance(self, role: str, slot: Optional[int]) -> EnclaveInstance:
        if (role, None) in self.instances:
            return self.instances[(role, None)]
        return self.instances[(role, slot)]

    # -- key slot access (runs in the caller's domain) ------------------------

    @staticmethod
    def _slot_write_key(write: Callable, addr: int, key: bytes) -> None:
        write(addr, key.ljust(SLOT_SIZE, b"\x00"))

    @staticmethod
    def _slot_key(read: Callable, addr: int) -> bytes:
        return read(addr, KEY_LEN)

    @staticmethod
    def _slot_seq(read: Callable, addr: int, which: int) -> int:
        return int.from_bytes(read(addr + KEY_LEN + 8 * which, 8), "big")

    @staticmethod
    def _slot_set_seq(write: Callable, addr: int, which: int, value: int) -> None:
        write(addr + KEY_LEN + 8 * which, value.to_bytes(8, "big"))

    def _record_slot_addr(self, inst: EnclaveInstance, slot: int) -> int:
        """Where a connection's session key lives in this instance."""
        role = inst.spec.role
        if role == "library":
            return inst.page_addr("keys") + slot * SLOT_SIZE
        if role == "key_handling":
            return inst.page_addr("session_store") + (slot - 1) * SLOT_SIZE
        if role == "record_crypto":
            return inst.page_addr("work") + (slot - 1) * SLOT_SIZE
        if role in ("handshake", "data_exchange", "session"):
            return inst.page_addr("keys")
        raise InvalidArgument(f"role {role!r} hosts no session keys")

    def _private_key_addr(self, inst: EnclaveInstance) -> int:
        role = inst.spec.role
        if role == "library":
            return inst.page_addr("keys")
        if role in ("key_handling", "private_key"):
            return inst.page_addr("private")
        if role == "session":
            return inst.page_addr("keys") + SLOT_SIZE
        raise InvalidArgument(f"role {role!r} hosts no private key")

    # -- handler construction -------------------------------------------------

    def _bind_handlers(self, inst: EnclaveInstance) -> None:
        role = inst.spec.role
        if role in ("library", "key_handling", "handshake", "session"):
            inst.enclave.bind("handshake_fsm", self._make_handshake_handler(inst))
        if role in ("library", "record_crypto", "data_exchange", "session"):
            inst.enclave.bind("record_decrypt", self._make_record_decrypt_handler(inst))
            inst.enclave.bind("record_encrypt", self._make_record_encrypt_handler(inst))
        if role == "private_key":
            inst.enclave.bind("private_key_ops", self._make_private_key_handler(inst))
        if role == "library":
            inst.enclave.bind("heartbeat", self._make_enclave_heartbeat_handler(inst))
            inst.enclave.bind("cert_parse", self._cert_handler)
            inst.enclave.bind("session_mgmt", self._make_session_mgmt_handler(inst))
        if role == "service":
            inst.enclave.bind("cert_parse", self._make_service_cert_handler(inst))

    def _unwrap_premaster(self, ctx: EnclaveContext, inst: EnclaveInstance, conn: int, wrapped: bytes) -> bytes:
        """private_key_ops logic: open the client key share in-enclave."""
        private_key = self._slot_key(ctx.read, self._private_key_addr(inst))
        wrap_nonce = ctx.derive("wrap-nonce", conn.to_bytes(8, "big"), WRAP_NONCE_LEN)
        try:
            return crypto.ae_decrypt(private_key, wrap_nonce, wrapped)
        except ValueError as exc:
            raise HandshakeFailure(f"key share rejected: {exc}") from exc

    def _store_session_key(self, ctx: EnclaveContext, inst: EnclaveInstance, slot: int, key: bytes) -> None:
        self._slot_write_key(ctx.write, self._record_slot_addr(inst, slot), key)

    def _make_handshake_handler(self, inst: EnclaveInstance):
        def handshake_fsm(ctx: EnclaveContext, args: bytes) -> bytes:
            cmd, conn, slot, blobs = _unpack(args)
            if cmd == CMD_HELLO:
                return ctx.derive("server-nonce", conn.to_bytes(8, "big"), NONCE_LEN)
            if cmd == CMD_KEYSHARE:
                client_nonce, server_nonce, wrapped = blobs
                premaster = self._unwrap_premaster(ctx, inst, conn, wrapped)
                key = _session_key_from(premaster, client_nonce, server_nonce)
                self._store_session_key(ctx, inst, slot, key)
                if inst.spec.role == "key_handling":
                    link = self.channels[("key_handling", "record_crypto", None)]
                    return chan.send(link, inst.enclave, _pack(CMD_PROVISION, conn, slot, key))
                return b"ok"
            if cmd == CMD_KEYSHARE_FIN:
                # Separate-secret flow: the private-key enclave already sent
                # the premaster over our channel; finish key setup and
                # forward the session key to the data-exchange enclave.
                client_nonce, server_nonce, pk_wire = blobs
                from_pk = self.channels[("handshake", "private_key", slot)]
                premaster = chan.recv(from_pk, inst.enclave, pk_wire)
                key = _session_key_from(premaster, client_nonce, server_nonce)
                self._store_session_key(ctx, inst, slot, key)
                to_dx = self.channels[("handshake", "data_exchange", slot)]
                return chan.send(to_dx, inst.enclave, _pack(CMD_PROVISION, conn, slot, key))
            raise InvalidArgument(f"handshake_fsm: unknown command {cmd}")

        return handshake_fsm

    def _make_private_key_handler(self, inst: EnclaveInstance):
        def private_key_ops(ctx: EnclaveContext, args: bytes) -> bytes:
            cmd, conn, slot, blobs = _unpack(args)
            if cmd != CMD_KEYSHARE:
                raise InvalidArgument(f"private_key_ops: unknown command {cmd}")
            premaster = self._unwrap_premaster(ctx, inst, conn, blobs[0])
            link = self.channels[("handshake", "private_key", slot)]
            return chan.send(link, inst.enclave, premaster)

        return private_key_ops

    def _make_record_decrypt_handler(self, inst: EnclaveInstance):
        def record_decrypt(ctx: EnclaveContext, args: bytes) -> bytes:
            cmd, conn, slot, blobs = _unpack(args)
            if cmd == CMD_PROVISION:
                if inst.spec.role == "record_crypto":
                    link = self.channels[("key_handling", "record_crypto", None)]
                else:
                    link = self.channels[("handshake", "data_exchange", slot)]
                message = chan.recv(link, inst.enclave, blobs[0])
                _, _, msg_slot, key_blobs = _unpack(message)
                self._store_session_key(ctx, inst, msg_slot, key_blobs[0])
                return b"ok"
            if cmd == CMD_DECRYPT:
                addr = self._record_slot_addr(inst, slot)
                key = self._slot_key(ctx.read, addr)
                expected = self._slot_seq(ctx.read, addr, 0) + 1
                plaintext = open_record(key, DIR_CLIENT, expected, blobs[0])
                self._slot_set_seq(ctx.write, addr, 0, expected)
                return plaintext
            raise InvalidArgument(f"record_decrypt: unknown command {cmd}")

        return record_decrypt

    def _make_record_encrypt_handler(self, inst: EnclaveInstance):
        def record_encrypt(ctx: EnclaveContext, args: bytes) -> bytes:
            cmd, conn, slot, blobs = _unpack(args)
            if cmd != CMD_ENCRYPT:
                raise InvalidArgument(f"record_encrypt: unknown command {cmd}")
            addr = self._record_slot_addr(inst, slot)
            key = self._slot_key(ctx.read, addr)
            seq = self._slot_seq(ctx.read, addr, 1) + 1
            record = seal_record(key, DIR_SERVER, seq, blobs[0])
            self._slot_set_seq(ctx.write, addr, 1, seq)
            return record

        return record_encrypt

    def _heartbeat_logic(self, read: Callable, write: Callable, buffer_page: int, payload: bytes, claimed: int) -> bytes:
        """One heartbeat implementation for every domain.

        Vulnerable mode copies ``claimed`` bytes from the payload buffer
        without comparing against the actual payload length.
        """
        if claimed > len(payload) and not self.config.vulnerable_heartbeat:
            return b""
        payload_addr = buffer_page + HEARTBEAT_BUFFER_OFFSET
        write(payload_addr, payload)
        return read(payload_addr, claimed)

    def _make_enclave_heartbeat_handler(self, inst: EnclaveInstance):
        def heartbeat(ctx: EnclaveContext, args: bytes) -> bytes:
            cmd, conn, slot, blobs = _unpack(args)
            claimed = int.from_bytes(blobs[1], "big")
            return self._heartbeat_logic(
                ctx.read, ctx.write, inst.page_addr("heartbeat_buffer"), blobs[0], claimed
            )

        return heartbeat

    def _cert_handler(self, ctx: EnclaveContext, args: bytes) -> bytes:
        _, _, _, blobs = _unpack(args)
        return format_certificate(blobs[0])

    def _make_service_cert_handler(self, inst: EnclaveInstance):
        def cert_parse(ctx: EnclaveContext, args: bytes) -> bytes:
            cmd, conn, slot, blobs = _unpack(args)
            request_link = self.channels[("session", "service", slot)]
            chan.recv(request_link, inst.enclave, blobs[1])  # the framed request
            cert = format_certificate(blobs[0])
            response_link = self.channels[("service", "session", slot)]
            return chan.send(response_link, inst.enclave, cert)

        return cert_parse

    def _make_session_mgmt_handler(self, inst: EnclaveInstance):
        def session_mgmt(ctx: EnclaveContext, args: bytes) -> bytes:
            cmd, conn, slot, blobs = _unpack(args)
            addr = inst.page_addr(f"session:{slot}")
            if cmd == CMD_FINALIZE:
                ctx.write(addr, b"\x01" + blobs[0])
                return b"ok"
            if cmd == CMD_CLOSE:
                ctx.write(addr, bytes(1 + 32))
                return b"ok"
            raise InvalidArgument(f"session_mgmt: unknown command {cmd}")

        return session_mgmt

    # -- untrusted unit implementations ---------------------------------------

    def _untrusted_read(self, addr: int, length: int) -> bytes:
        return self.platform.mem_read(UNTRUSTED, addr, length)

    def _untrusted_write(self, addr: int, data: bytes) -> None:
        self.platform.mem_write(UNTRUSTED, addr, data)

    def _untrusted_session_mgmt(self, cmd: int, slot: int, digest: bytes) -> None:
        assert self.session_state_region is not None
        addr = self.session_state_region.base + (slot - 1) * SLOT_SIZE
        if cmd == CMD_FINALIZE:
            self._untrusted_write(addr, b"\x01" + digest)
        else:
            self._untrusted_write(addr, bytes(1 + 32))

    def _credential_check(self, auth_plaintext: bytes) -> bool:
        """Compare a decrypted login against the untrusted credential store."""
        sep = auth_plaintext.find(b":")
        if sep < 0:
            return False
        user, password = auth_plaintext[:sep], auth_plaintext[sep + 1 :]
        for row in range(len(self.config.credentials)):
            entry = self._untrusted_read(self.cred_region.base + row * SLOT_SIZE, SLOT_SIZE)
            stored_user, _, stored_pass = entry.rstrip(b"\x00").partition(b":")
            if stored_user == user:
                return stored_pass == password
        return False

    def _frame_io(self, data: bytes) -> bytes:
        """io_dispatch logic: bounce a wire message through shared memory."""
        framed = len(data).to_bytes(4, "big") + data
        if len(framed) > self.io_region.size:
            raise InvalidArgument("wire message exceeds the I/O buffer")
        self._untrusted_write(self.io_region.base, framed)
        echoed = self._untrusted_read(self.io_region.base, len(framed))
        return echoed[4:]

    # -- connection lifecycle --------------------------------------------------

    def handshake(self, connection_id: int) -> SessionContext:
        """Run the full key establishment for one client connection."""
        if self._shut_down:
            raise InvalidArgument("server is shut down")
        if connection_id in self.sessions or connection_id in self._slot_of:
            raise DuplicateConnection(f"connection {connection_id} already exists")
        if self._next_slot > self.plan.connections:
            raise InvalidArgument("plan has no free connection slots")
        slot = self._next_slot
        self._next_slot += 1
        self._slot_of[connection_id] = slot
        conn8 = connection_id.to_bytes(8, "big")

        # Client hello arrives over untrusted I/O.
        client_nonce = self.platform.derive_bytes("client-nonce", conn8, NONCE_LEN)
        self._frame_io(client_nonce)

        certificate = self._certificate_for(connection_id, slot)
        server_nonce = self._invoke(
            "handshake_fsm", _pack(CMD_HELLO, connection_id, slot), slot
        )
        self._frame_io(server_nonce + certificate)

        # Client wraps its premaster under the server's key pair.
        premaster = self.platform.derive_bytes("premaster", conn8, PREMASTER_LEN)
        wrap_nonce = self.platform.derive_bytes("wrap-nonce", conn8, WRAP_NONCE_LEN)
        wrapped = crypto.ae_encrypt(self.server_private_key, wrap_nonce, premaster)
        self._frame_io(wrapped)
        self._deliver_keyshare(connection_id, slot, client_nonce, server_nonce, wrapped)

        # Client authenticates inside the fresh session.
        session_key = _session_key_from(premaster, client_nonce, server_nonce)
        user, password = self.config.credentials[0]
        login = user.encode() + b":" + CREDENTIAL_MARKER + password.encode()
        auth_record = seal_record(session_key, DIR_CLIENT, 1, login)
        self._frame_io(auth_record)
        auth_plain = self._invoke(
            "record_decrypt", _pack(CMD_DECRYPT, connection_id, slot, auth_record), slot
        )
        if not self._credential_check(auth_plain):
            raise HandshakeFailure("credential check failed")

        transcript = crypto.digest(client_nonce, server_nonce, certificate, wrapped)
        if self.plan.scheme is Scheme.WHOLE_APPLICATION:
            self._invoke(
                "session_mgmt", _pack(CMD_FINALIZE, connection_id, slot, transcript), slot
            )
        else:
            self._untrusted_session_mgmt(CMD_FINALIZE, slot, transcript)
        context = SessionContext(
            connection_id=connection_id,
            slot=slot,
            established=True,
            transcript_digest=transcript,
            certificate=certificate,
        )
        self.sessions[connection_id] = context
        return context

    def _certificate_for(self, connection_id: int, slot: int) -> bytes:
        if self.plan.scheme is Scheme.HYBRID:
            session = self._instance("session", slot)
            request_link = self.channels[("session", "service", slot)]
            request = chan.send(request_link, session.enclave, b"certificate-request")
            response = ecall(
                self._instance("service", None).enclave,
                "cert_parse",
                _pack(CMD_CERT, connection_id, slot, self.public_id, request),
            )
            response_link = self.channels[("service", "session", slot)]
            return chan.recv(response_link, session.enclave, response)
        if self.plan.scheme is Scheme.WHOLE_APPLICATION:
            return self._invoke(
                "cert_parse", _pack(CMD_CERT, connection_id, slot, self.public_id), slot
            )
        return format_certificate(self.public_id)

    def _deliver_keyshare(
        self, connection_id: int, slot: int, client_nonce: bytes, server_nonce: bytes, wrapped: bytes
    ) -> None:
        if self.plan.scheme is Scheme.SEPARATE_SECRET:
            pk_wire = ecall(
                self._instance("private_key", None).enclave,
                "private_key_ops",
                _pack(CMD_KEYSHARE, connection_id, slot, wrapped),
            )
            dx_wire = self._invoke(
                "handshake_fsm",
                _pack(CMD_KEYSHARE_FIN, connection_id, slot, client_nonce, server_nonce, pk_wire),
                slot,
            )
            self._invoke(
                "record_decrypt", _pack(CMD_PROVISION, connection_id, slot, dx_wire), slot
            )
            return
        result = self._invoke(
            "handshake_fsm",
            _pack(CMD_KEYSHARE, connection_id, slot, client_nonce, server_nonce, wrapped),
            slot,
        )
        if self.plan.scheme is Scheme.ALL_SECRETS:
            # The key-handling enclave returned a provisioning message for
            # the record enclave; deliver it.
            self._invoke(
                "record_decrypt", _pack(CMD_PROVISION, connection_id, slot, result), slot
            )

    # -- established-session operations ---------------------------------------

    def _require_session(self, connection_id: int) -> SessionContext:
        session = self.sessions.get(connection_id)
        if session is None or not session.established:
            raise NoSuchSession(f"no established session {connection_id}")
        return session

    def exchange(self, connection_id: int, app_record: bytes) -> bytes:
        """Decrypt one client record and return the encrypted echo."""
        session = self._require_session(connection_id)
        self._frame_io(app_record)
        plaintext = self._invoke(
            "record_decrypt",
            _pack(CMD_DECRYPT, connection_id, session.slot, app_record),
            session.slot,
        )
        response = self._invoke(
            "record_encrypt",
            _pack(CMD_ENCRYPT, connection_id, session.slot, plaintext),
            session.slot,
        )
        self._frame_io(response)
        return response

    def heartbeat(self, connection_id: int, request: HeartbeatRequest) -> bytes:
        """Echo ``claimed_length`` bytes from the heartbeat buffer."""
        session = self._require_session(connection_id)
        if not 0 <= request.claimed_length <= HEARTBEAT_MAX_CLAIM:
            raise InvalidArgument(
                f"claimed length outside protocol maximum {HEARTBEAT_MAX_CLAIM}"
            )
        if len(request.payload) > HEARTBEAT_CAPACITY:
            raise InvalidArgument(f"payload exceeds buffer of {HEARTBEAT_CAPACITY}")
        self._frame_io(request.payload)
        if self.plan.placement["heartbeat"] == UNTRUSTED_PLACEMENT:
            assert self.hb_region is not None
            return self._heartbeat_logic(
                self._untrusted_read,
                self._untrusted_write,
                self.hb_region.base,
                request.payload,
                request.claimed_length,
            )
        claimed = request.claimed_length.to_bytes(8, "big")
        return self._invoke(
            "heartbeat",
            _pack(CMD_HEARTBEAT, connection_id, session.slot, request.payload, claimed),
            session.slot,
        )

    def close(self, connection_id: int) -> None:
        session = self._require_session(connection_id)
        if self.plan.scheme is Scheme.WHOLE_APPLICATION:
            self._invoke(
                "session_mgmt",
                _pack(CMD_CLOSE, connection_id, session.slot, b""),
                session.slot,
            )
        else:
            self._untrusted_session_mgmt(CMD_CLOSE, session.slot, b"")
        session.established = False
        del self.sessions[connection_id]

    def shutdown(self) -> None:
        """Tear everything down; every enclave ends Removed."""
        if self._shut_down:
            return
        for link in self.channels.values():
            link.close()
        for instance in self.instances.values():
            self.driver.eremove(instance.enclave)
        self.sessions.clear()
        self._shut_down = True

    # -- dispatch --------------------------------------------------------------

    def _invoke(self, unit: str, payload: bytes, slot: Optional[int]) -> bytes:
        role = self.plan.placement[unit]
        if role == UNTRUSTED_PLACEMENT:
            raise InvalidArgument(f"unit {unit!r} has no untrusted entry path")
        return ecall(self._instance(role, slot).enclave, unit, payload)

    def entry_total(self) -> int:
        return sum(inst.enclave.entry_count for inst in self.instances.values())


def start(config: ServerConfig) -> Server:
    """Build the platform, enclaves, and channels for a plan."""
    return Server(config)


# -- scripted client -----------------------------------------------------------

class SimClient:
    """In-process peer that derives the same handshake values the
    simulated client inside :meth:`Server.handshake` used."""

    def __init__(self, server: Server) -> None:
        self.server = server
        self.keys: dict[int, bytes] = {}
        self.send_seq: dict[int, int] = {}
        self.recv_seq: dict[int, int] = {}

    def connect(self, connection_id: int) -> str:
        context = self.server.handshake(connection_id)
        conn8 = connection_id.to_bytes(8, "big")
        platform = self.server.platform
        premaster = platform.derive_bytes("premaster", conn8, PREMASTER_LEN)
        client_nonce = platform.derive_bytes("client-nonce", conn8, NONCE_LEN)
        server_nonce = platform.derive_bytes("server-nonce", conn8, NONCE_LEN)
        self.keys[connection_id] = _session_key_from(premaster, client_nonce, server_nonce)
        self.send_seq[connection_id] = 1  # the login record used sequence 1
        self.recv_seq[connection_id] = 0
        return f"connect {connection_id} ok cert={context.certificate.hex()}"

    def _key(self, connection_id: int) -> bytes:
        try:
            return self.keys[connection_id]
        except KeyError:
            raise NoSuchSession(f"client has no session {connection_id}") from None

    def send(self, connection_id: int, plaintext: bytes) -> str:
        key = self._key(connection_id)
        self.send_seq[connection_id] += 1
        record = seal_record(key, DIR_CLIENT, self.send_seq[connection_id], plaintext)
        response = self.server.exchange(connection_id, record)
        self.recv_seq[connection_id] += 1
        echoed = open_record(key, DIR_SERVER, self.recv_seq[connection_id], response)
        return f"send {connection_id} {echoed.hex()}"

    def heartbeat(self, connection_id: int, payload: bytes, claimed_length: int) -> str:
        self._key(connection_id)
        response = self.server.heartbeat(
            connection_id, HeartbeatRequest(payload=payload, claimed_length=claimed_length)
        )
        return f"heartbeat {connection_id} {response.hex()}"

    def close(self, connection_id: int) -> str:
        self._key(connection_id)
        self.server.close(connection_id)
        del self.keys[connection_id]
        return f"close {connection_id} ok"


def run_script(server: Server, script: str) -> list[str]:
    """Execute a client script; one transcript line per command.

    Commands: ``connect <id>``, ``send <id> <hex>``,
    ``heartbeat <id> <payload-hex> <claimed-len>``, ``close <id>``.
    """
    client = SimClient(server)
    transcript = []
    for lineno, raw in enumerate(script.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "connect" and len(parts) == 2:
                transcript.append(client.connect(int(parts[1])))
            elif parts[0] == "send" and len(parts) == 3:
                transcript.append(client.send(int(parts[1]), bytes.fromhex(parts[2])))
            elif parts[0] == "heartbeat" and len(parts) == 4:
                transcript.append(
                    client.heartbeat(int(parts[1]), bytes.fromhex(parts[2]), int(parts[3]))
                )
            elif parts[0] == "close" and len(parts) == 2:
                transcript.append(client.close(int(parts[1])))
            else:
                raise InvalidArgument(f"line {lineno}: unknown command {line!r}")
        except ValueError as exc:
            raise InvalidArgument(f"line {lineno}: {exc}") from exc
    return transcript
