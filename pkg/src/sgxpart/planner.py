"""Partitioning schemes for the TLS-like server.

A fixed inventory of ten code units (weights sum to 42) is assigned to
enclaves by one of four schemes:

1. whole application: the entire library, heartbeat included, in one
   shared enclave; only the credential checker stays outside.
2. all secrets: one shared enclave for key handling, one for record
   crypto; everything else untrusted.
3. separate secret: per-connection handshake and data-exchange enclaves
   plus one shared private-key enclave, wired by per-connection channels.
4. hybrid: one enclave per connection holding all key-touching units,
   plus a shared stateless service enclave for certificate parsing.

The credential store is untrusted in every scheme, so the credential
checker never moves into an enclave.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Optional

from .errors import InvalidArgument, PlanError

UNTRUSTED_PLACEMENT = "untrusted"

WEIGHT_UNITS_PER_PAGE = 4

# Thresholds over summed unit weights per enclave.  Calibrated to the
# inventory below: the largest enclave of schemes 2-4 weighs 22, the
# whole-application enclave 39.
TCB_SMALL_MAX = 24
TCB_MEDIUM_MAX = 36

# Thresholds over total provisioned pages at the reference size of ten
# connections.  The hybrid scheme is reported as a straddling "M-L" when
# it lands within 20% of the medium/large boundary.
CAPACITY_SMALL_MAX = 15
CAPACITY_MEDIUM_MAX = 30
CAPACITY_STRADDLE_FRACTION = 0.2


class SecretClass(Enum):
    PRIVATE_KEY = "private_key"
    SESSION_KEY = "session_key"
    CREDENTIALS = "credentials"


class Frequency(Enum):
    HIGH = "high"
    LOW = "low"


class Scheme(IntEnum):
    WHOLE_APPLICATION = 1
    ALL_SECRETS = 2
    SEPARATE_SECRET = 3
    HYBRID = 4

    @property
    def label(self) -> str:
        return {
            Scheme.WHOLE_APPLICATION: "WholeApplication",
            Scheme.ALL_SECRETS: "AllSecrets",
            Scheme.SEPARATE_SECRET: "SeparateSecret",
            Scheme.HYBRID: "Hybrid",
        }[self]


@dataclass(frozen=True)
class CodeUnit:
    name: str
    frequency: Frequency
    secret_access: frozenset[SecretClass]
    weight: int


def _unit(name: str, freq: Frequency, secrets: set[SecretClass], weight: int) -> CodeUnit:
    return CodeUnit(name, freq, frozenset(secrets), weight)


#: The server's code units.  Weights model relative code size.
INVENTORY: tuple[CodeUnit, ...] = (
    _unit("handshake_fsm", Frequency.HIGH, {SecretClass.PRIVATE_KEY, SecretClass.SESSION_KEY}, 8),
    _unit("key_generation", Frequency.HIGH, {SecretClass.SESSION_KEY}, 4),
    _unit("private_key_ops", Frequency.HIGH, {SecretClass.PRIVATE_KEY}, 4),
    _unit("record_encrypt", Frequency.HIGH, {SecretClass.SESSION_KEY}, 3),
    _unit("record_decrypt", Frequency.HIGH, {SecretClass.SESSION_KEY}, 3),
    _unit("heartbeat", Frequency.LOW, set(), 2),
    _unit("cert_parse", Frequency.LOW, set(), 6),
    _unit("io_dispatch", Frequency.LOW, set(), 5),
    _unit("session_mgmt", Frequency.LOW, set(), 4),
    _unit("credential_check", Frequency.LOW, {SecretClass.CREDENTIALS}, 3),
)

UNIT_BY_NAME: dict[str, CodeUnit] = {u.name: u for u in INVENTORY}


def default_inventory() -> tuple[CodeUnit, ...]:
    return INVENTORY


@dataclass(frozen=True)
class EnclaveSpec:
    """One enclave instance the scheme will create.

    ``connection`` is None for shared enclaves.  ``data_pages`` counts the
    pages provisioned for resident data: one page per hosted secret slot,
    plus, for the whole-application enclave, the per-connection session
    state and the heartbeat buffer that live inside it.
    """

    role: str
    units: tuple[str, ...]
    secrets: tuple[SecretClass, ...]
    connection: Optional[int]
    code_pages: int
    data_pages: int

    @property
    def weight(self) -> int:
        return sum(UNIT_BY_NAME[u].weight for u in self.units)

    @property
    def total_pages(self) -> int:
        return self.code_pages + self.data_pages


@dataclass(frozen=True)
class ChannelSpec:
    """A trusted channel between two roles.  Per-connection specs expand
    to one channel per connection at start-up."""

    endpoint_a: str
    endpoint_b: str
    per_connection: bool


@dataclass(frozen=True)
class PartitionPlan:
    scheme: Scheme
    connections: int
    enclave_specs: tuple[EnclaveSpec, ...]
    channel_specs: tuple[ChannelSpec, ...]
    placement: dict[str, str]

    @property
    def enclave_count(self) -> int:
        return len(self.enclave_specs)

    def roles(self) -> set[str]:
        return {spec.role for spec in self.enclave_specs}

    def specs_for_role(self, role: str) -> list[EnclaveSpec]:
        return [s for s in self.enclave_specs if s.role == role]

    def hosting_role(self, secret: SecretClass) -> Optional[str]:
        for spec in self.enclave_specs:
            if secret in spec.secrets:
                return spec.role
        return None


@dataclass(frozen=True)
class PlanMetrics:
    scheme: Scheme
    enclave_count: int
    trusted_channels_per_connection: int
    tcb_class: str
    duplication: bool
    capacity_pages: int
    capacity_class: str
    entries_per_handshake: Optional[int] = None


def _code_pages(weight: int) -> int:
    return math.ceil(weight / WEIGHT_UNITS_PER_PAGE)


def _spec(
    role: str,
    units: tuple[str, ...],
    secrets: tuple[SecretClass, ...],
    connection: Optional[int],
    data_pages: int,
) -> EnclaveSpec:
    weight = sum(UNIT_BY_NAME[u].weight for u in units)
    return EnclaveSpec(
        role=role,
        units=units,
        secrets=secrets,
        connection=connection,
        code_pages=_code_pages(weight),
        data_pages=data_pages,
    )


LIBRARY_UNITS = (
    "handshake_fsm",
    "key_generation",
    "private_key_ops",
    "record_encrypt",
    "record_decrypt",
    "heartbeat",
    "cert_parse",
    "io_dispatch",
    "session_mgmt",
)
KEY_HANDLING_UNITS = ("handshake_fsm", "key_generation", "private_key_ops")
RECORD_UNITS = ("record_encrypt", "record_decrypt")
HANDSHAKE_UNITS = ("handshake_fsm", "key_generation")
PRIVATE_KEY_UNITS = ("private_key_ops",)
SESSION_UNITS = (
    "handshake_fsm",
    "key_generation",
    "private_key_ops",
    "record_encrypt",
    "record_decrypt",
)
SERVICE_UNITS = ("cert_parse",)


def plan(scheme: Scheme, connections: int) -> PartitionPlan:
    """Build the enclave and channel layout for one scheme."""
    if connections < 0:
        raise InvalidArgument("connection count cannot be negative")
    scheme = Scheme(scheme)
    both_keys = (SecretClass.PRIVATE_KEY, SecretClass.SESSION_KEY)

    if scheme is Scheme.WHOLE_APPLICATION:
        specs = (
            # Data: heartbeat buffer, key store, one session page per
            # connection.  The whole library's working state is inside.
            _spec("library", LIBRARY_UNITS, both_keys, None, 2 + connections),
        )
        channels: tuple[ChannelSpec, ...] = ()
    elif scheme is Scheme.ALL_SECRETS:
        specs = (
            _spec("key_handling", KEY_HANDLING_UNITS, both_keys, None, 2),
            _spec("record_crypto", RECORD_UNITS, (SecretClass.SESSION_KEY,), None, 1),
        )
        # A single static channel provisions session keys to the record
        # enclave; it is shared, so it does not count per connection.
        channels = (ChannelSpec("key_handling", "record_crypto", per_connection=False),)
    elif scheme is Scheme.SEPARATE_SECRET:
        specs = tuple(
            [_spec("private_key", PRIVATE_KEY_UNITS, (SecretClass.PRIVATE_KEY,), None, 1)]
            + [
                s
                for c in range(1, connections + 1)
                for s in (
                    _spec("handshake", HANDSHAKE_UNITS, (SecretClass.SESSION_KEY,), c, 1),
                    _spec("data_exchange", RECORD_UNITS, (SecretClass.SESSION_KEY,), c, 1),
                )
            ]
        )
        channels = (
            ChannelSpec("handshake", "private_key", per_connection=True),
            ChannelSpec("handshake", "data_exchange", per_connection=True),
            ChannelSpec("data_exchange", "private_key", per_connection=True),
        )
    elif scheme is Scheme.HYBRID:
        specs = tuple(
            [_spec("service", SERVICE_UNITS, (), None, 0)]
            + [
                # One data page holds the connection's session key and its
                # private-key copy together.
                _spec("session", SESSION_UNITS, both_keys, c, 1)
                for c in range(1, connections + 1)
            ]
        )
        # Request and response directions modeled as two channels.
        channels = (
            ChannelSpec("session", "service", per_connection=True),
            ChannelSpec("service", "session", per_connection=True),
        )
    else:  # pragma: no cover - Scheme() above rejects other values
        raise InvalidArgument(f"unknown scheme {scheme}")

    placement = {unit.name: UNTRUSTED_PLACEMENT for unit in INVENTORY}
    for spec in specs:
        for unit in spec.units:
            placement[unit] = spec.role
    result = PartitionPlan(
        scheme=scheme,
        connections=connections,
        enclave_specs=specs,
        channel_specs=channels,
        placement=placement,
    )
    validate(result)
    return result


def validate(p: PartitionPlan) -> None:
    """Structural checks every generated or hand-built plan must pass."""
    seen_roles: dict[str, tuple[str, ...]] = {}
    for spec in p.enclave_specs:
        if spec.role in seen_roles and seen_roles[spec.role] != spec.units:
            raise PlanError(f"role {spec.role!r} has inconsistent unit sets")
        seen_roles[spec.role] = spec.units
        for unit in spec.units:
            if unit not in UNIT_BY_NAME:
                raise PlanError(f"unknown code unit {unit!r}")
            if p.placement.get(unit) != spec.role:
                raise PlanError(f"unit {unit!r} placed outside its enclave role")
    for unit in INVENTORY:
        if unit.name not in p.placement:
            raise PlanError(f"unit {unit.name!r} has no placement")
    if p.placement["credential_check"] != UNTRUSTED_PLACEMENT:
        raise PlanError("the credential checker always stays untrusted")
    for chan in p.channel_specs:
        if chan.per_connection and p.connections == 0:
            continue  # expands to no channels, endpoints may not exist
        for endpoint in (chan.endpoint_a, chan.endpoint_b):
            if endpoint not in seen_roles:
                raise PlanError(f"channel endpoint {endpoint!r} is not a planned role")
    hosts_secrets = any(s.secrets for s in p.enclave_specs)
    if hosts_secrets and p.hosting_role(SecretClass.PRIVATE_KEY) is None:
        raise PlanError("private_key is not hosted by any enclave")
    if hosts_secrets and p.connections > 0 and p.hosting_role(SecretClass.SESSION_KEY) is None:
        raise PlanError("session_key is not hosted by any enclave")


def duplicated_units(p: PartitionPlan) -> tuple[str, ...]:
    """Code units loaded into more than one enclave, sorted by name."""
    count: dict[str, int] = {}
    for spec in p.enclave_specs:
        for unit in spec.units:
            count[unit] = count.get(unit, 0) + 1
    return tuple(sorted(name for name, n in count.items() if n > 1))


def duplication(p: PartitionPlan) -> bool:
    """True when any code unit is loaded into more than one enclave."""
    return bool(duplicated_units(p))


def _weight_class(weight: int) -> str:
    if weight <= TCB_SMALL_MAX:
        return "S"
    if weight <= TCB_MEDIUM_MAX:
        return "M"
    return "L"


def _capacity_class(pages: int) -> str:
    if pages <= CAPACITY_SMALL_MAX:
        return "S"
    if pages <= CAPACITY_MEDIUM_MAX:
        return "M"
    return "L"


def capacity_pages(p: PartitionPlan) -> int:
    return sum(spec.total_pages for spec in p.enclave_specs)


def metrics(p: PartitionPlan, entries_per_handshake: Optional[int] = None) -> PlanMetrics:
    """Summarize a plan the way the comparison table reports it.

    The TCB class grades the heaviest single enclave; capacity counts
    every page the plan provisions.  The hybrid scheme reports the
    straddling class "M-L" when its total lands near the medium/large
    boundary.
    """
    heaviest = max((spec.weight for spec in p.enclave_specs), default=0)
    pages = capacity_pages(p)
    cap_class = _capacity_class(pages)
    if p.scheme is Scheme.HYBRID:
        band = CAPACITY_MEDIUM_MAX * CAPACITY_STRADDLE_FRACTION
        if abs(pages - CAPACITY_MEDIUM_MAX) <= band:
            cap_class = "M-L"
    return PlanMetrics(
        scheme=p.scheme,
        enclave_count=p.enclave_count,
        trusted_channels_per_connection=sum(
            1 for c in p.channel_specs if c.per_connection
        ),
        tcb_class=_weight_class(heaviest),
        duplication=duplication(p),
        capacity_pages=pages,
        capacity_class=cap_class,
        entries_per_handshake=entries_per_handshake,
    )


def plan_to_dict(p: PartitionPlan) -> dict:
    """JSON-ready view of a plan and its metrics."""
    m = metrics(p)
    return {
        "scheme": p.scheme.label,
        "connections": p.connections,
        "enclaves": [
            {
                "role": spec.role,
                "units": list(spec.units),
                "secrets": [s.value for s in spec.secrets],
                "connection": spec.connection,
            }
            for spec in p.enclave_specs
        ],
        "channels": [
            {
                "a": chan.endpoint_a,
                "b": chan.endpoint_b,
                "per_connection": chan.per_connection,
            }
            for chan in p.channel_specs
        ],
        "metrics": {
            "enclave_count": m.enclave_count,
            "trusted_channels_per_connection": m.trusted_channels_per_connection,
            "tcb_class": m.tcb_class,
            "duplication": m.duplication,
            "capacity_pages": m.capacity_pages,
            "capacity_class": m.capacity_class,
        },
    }
