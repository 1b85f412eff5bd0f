"""Shared protocol machinery: events, messages, cost metering, interfaces.

The cost model meters the server only.  Five kinds are counted: key
generations, encryptions, unicast messages, multicast messages, and payload
keys (message size in key units).  Member-side hash work is tallied
separately as ``member_derivations`` and zero-payload signals as ``notices``;
neither contributes to the five server counters.  Secure-channel bootstrap
deliveries (individual keys, position codes) are out of band and unmetered.
"""

from __future__ import annotations

import csv
import io
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from random import Random
from typing import Literal

from gkms.crypto import SymKey, WrappedKey

COST_KINDS = ("keygen", "encrypt", "unicast", "multicast", "payload_key")

CSV_COLUMNS = [
    "protocol",
    "n",
    "m",
    "op",
    "keygen",
    "encrypt",
    "unicast",
    "multicast",
    "msg_size_keys",
    "member_derivations",
]

Op = Literal["join", "leave"]


class EventError(Exception):
    """An event the current group state cannot accept."""


@dataclass(frozen=True)
class MembershipEvent:
    seq: int
    op: Op
    member_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.op not in ("join", "leave"):
            raise EventError(f"unknown op {self.op!r}")
        if not self.member_ids:
            raise EventError("event must name at least one member")
        if len(set(self.member_ids)) != len(self.member_ids):
            raise EventError("duplicate member ids in one event")

    @property
    def batch_size(self) -> int:
        return len(self.member_ids)


@dataclass(frozen=True)
class RekeyMessage:
    """One wire message carrying wrapped keys.

    ``aux`` is plaintext routing metadata (node ids for each payload,
    structural deltas).  It carries no key material and costs nothing in the
    key-unit size model.
    """

    channel: Literal["unicast", "multicast"]
    recipients: tuple[str, ...]
    payloads: tuple[WrappedKey, ...]
    aux: dict
    event_seq: int

    def __post_init__(self) -> None:
        if not self.recipients:
            raise ValueError("message must have at least one recipient")
        if self.channel == "unicast" and len(self.recipients) != 1:
            raise ValueError("unicast messages have exactly one recipient")

    @property
    def size_in_keys(self) -> int:
        return len(self.payloads)


@dataclass(frozen=True)
class Notice:
    """Zero-payload signal (for example a join announcement)."""

    kind: str
    recipients: tuple[str, ...]
    aux: dict
    event_seq: int


@dataclass(frozen=True)
class Bootstrap:
    """Secure-channel delivery to one member; never metered."""

    member_id: str
    individual_key: SymKey | None
    leaf_id: int | None
    extra: dict


@dataclass
class EventOutput:
    """What one event produced.

    ``deliveries`` preserves emission order across messages and notices;
    later items may depend on state changes earlier ones cause, so receivers
    must apply them in order.  Bootstraps are secure-channel side deliveries
    applied before any wire traffic.
    """

    bootstraps: list[Bootstrap] = field(default_factory=list)
    deliveries: list[RekeyMessage | Notice] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    @property
    def messages(self) -> list[RekeyMessage]:
        return [d for d in self.deliveries if isinstance(d, RekeyMessage)]

    @property
    def notices(self) -> list[Notice]:
        return [d for d in self.deliveries if isinstance(d, Notice)]


@dataclass(frozen=True)
class EventCost:
    seq: int
    op: Op
    m: int
    keygen: int
    encrypt: int
    unicast: int
    multicast: int
    payload_keys: int
    member_derivations: int
    notices: int
    extras: dict


@dataclass(frozen=True)
class CostReport:
    totals: dict
    member_derivations: int
    notices: int
    events: tuple[EventCost, ...]

    def total(self, kind: str) -> int:
        return self.totals[kind]


class CostMeter:
    """Counts metered operations, with per-event snapshots."""

    def __init__(self) -> None:
        self._totals = dict.fromkeys(COST_KINDS, 0)
        self.member_derivations = 0
        self.notices = 0
        self.events: list[EventCost] = []
        self._mark: dict | None = None
        self._event: tuple[int, Op, int] | None = None

    def count(self, kind: str, amount: int = 1) -> None:
        if kind not in self._totals:
            raise ValueError(f"unknown cost kind {kind!r}")
        self._totals[kind] += amount

    def count_member_derivation(self, amount: int = 1) -> None:
        self.member_derivations += amount

    def count_notice(self) -> None:
        self.notices += 1

    def count_message(self, message: RekeyMessage) -> None:
        self.count(message.channel)
        self.count("payload_key", message.size_in_keys)

    def total(self, kind: str) -> int:
        return self._totals[kind]

    def begin_event(self, seq: int, op: Op, batch_size: int) -> None:
        if self._event is not None:
            raise RuntimeError("previous event not closed")
        self._event = (seq, op, batch_size)
        self._mark = dict(
            self._totals,
            member_derivations=self.member_derivations,
            notices=self.notices,
        )

    def end_event(self, **extras) -> EventCost:
        if self._event is None or self._mark is None:
            raise RuntimeError("no open event")
        seq, op, batch_size = self._event
        cost = EventCost(
            seq=seq,
            op=op,
            m=batch_size,
            keygen=self._totals["keygen"] - self._mark["keygen"],
            encrypt=self._totals["encrypt"] - self._mark["encrypt"],
            unicast=self._totals["unicast"] - self._mark["unicast"],
            multicast=self._totals["multicast"] - self._mark["multicast"],
            payload_keys=self._totals["payload_key"] - self._mark["payload_key"],
            member_derivations=self.member_derivations - self._mark["member_derivations"],
            notices=self.notices - self._mark["notices"],
            extras=extras,
        )
        self.events.append(cost)
        self._event = None
        self._mark = None
        return cost

    def report(self) -> CostReport:
        return CostReport(
            totals=dict(self._totals),
            member_derivations=self.member_derivations,
            notices=self.notices,
            events=tuple(self.events),
        )


class DiscardMeter:
    """Meter that counts nothing; for probes and out-of-band re-execution."""

    def count(self, kind: str, amount: int = 1) -> None:
        pass

    def count_member_derivation(self, amount: int = 1) -> None:
        pass

    def count_notice(self) -> None:
        pass

    def count_message(self, message: RekeyMessage) -> None:
        pass


def csv_row(protocol: str, n: int, cost: EventCost) -> dict:
    """One schema row for one event; ``n`` is the group size when the event
    starts."""
    return {
        "protocol": protocol,
        "n": n,
        "m": cost.m,
        "op": cost.op,
        "keygen": cost.keygen,
        "encrypt": cost.encrypt,
        "unicast": cost.unicast,
        "multicast": cost.multicast,
        "msg_size_keys": cost.payload_keys,
        "member_derivations": cost.member_derivations,
    }


def rows_to_csv(rows: list[dict], extra_columns: list[str] | None = None) -> str:
    columns = CSV_COLUMNS + (extra_columns or [])
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({col: row.get(col, "") for col in columns})
    return out.getvalue()


class Knowledge:
    """Everything a principal has ever held: key bytes and node codes.

    Monotone by construction; the secrecy analyzer seeds adversaries from it.
    """

    def __init__(self) -> None:
        self.key_bytes: set[bytes] = set()
        self.codes: set[str] = set()

    def learn_key(self, key: SymKey) -> None:
        self.key_bytes.add(key.data)

    def learn_code(self, code: str) -> None:
        self.codes.add(code)


class MemberView(ABC):
    """Client-side state of one member.

    Concrete views keep whatever keys their protocol calls for; all of them
    expose the current group key and accumulate a knowledge log.
    """

    def __init__(self, member_id: str, individual_key: SymKey) -> None:
        self.member_id = member_id
        self.individual_key = individual_key
        self.group_key: SymKey | None = None
        self.knowledge = Knowledge()
        self.unwrap_misses = 0
        self.knowledge.learn_key(individual_key)

    def _check_addressed(self, recipients: tuple[str, ...]) -> None:
        if self.member_id not in recipients:
            raise EventError(
                f"message not addressed to {self.member_id}: {recipients}"
            )

    @abstractmethod
    def apply_message(self, message: RekeyMessage, meter) -> None: ...

    def apply_notice(self, notice: Notice, meter) -> None:
        raise EventError(f"{type(self).__name__} does not handle notices")

    def _learn_group_key(self, key: SymKey) -> None:
        self.group_key = key
        self.knowledge.learn_key(key)


class ServerProtocol(ABC):
    """Server-side engine of one protocol instance."""

    name: str
    arity: int

    @property
    @abstractmethod
    def group_key(self) -> SymKey: ...

    @property
    @abstractmethod
    def member_ids(self) -> list[str]: ...

    @property
    def member_count(self) -> int:
        return len(self.member_ids)

    @abstractmethod
    def handle_event(self, event: MembershipEvent, rng: Random, meter: CostMeter) -> EventOutput: ...

    @abstractmethod
    def build_member(self, bootstrap: Bootstrap) -> MemberView:
        """Construct the client view a bootstrap delivery creates."""

    def _validate(self, event: MembershipEvent, members: set[str]) -> None:
        if event.op == "join":
            stale = [m for m in event.member_ids if m in members]
            if stale:
                raise EventError(f"members already present: {stale}")
        else:
            unknown = [m for m in event.member_ids if m not in members]
            if unknown:
                raise EventError(f"cannot remove unknown members: {unknown}")
            if len(event.member_ids) >= len(members):
                raise EventError("cannot remove every member; the group may not empty")
