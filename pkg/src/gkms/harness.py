"""Deterministic scenario runner and measurement sweeps.

A scenario is a line-oriented script: one ``init`` line fixing the protocol,
starting group size and seed, followed by ``join``/``leave`` steps.  The
runner builds the server, replays the script, delivers every message to the
tracked member states in emission order, runs a probe test after every event
(every current member must unwrap a fresh key wrapped under the group key;
every departed member must fail), and meters costs into one CSV row per
event.  Runs are deterministic: the same scenario text reproduces the same
trace digest byte for byte.

``sweep`` runs one-event measurements over a (protocol, n, m, op) grid with
members untracked, so the wall-time column reflects server-side rekeying
work only.  Throughout, ``n`` is the group size at the moment the event
starts.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from random import Random

from gkms.baselines import LkhServer, OftServer, OkdServer
from gkms.ckcs import CkcsServer
from gkms.core import (
    CostMeter,
    DiscardMeter,
    EventCost,
    EventError,
    EventOutput,
    MembershipEvent,
    MemberView,
    Notice,
    RekeyMessage,
    ServerProtocol,
    csv_row,
)
from gkms.crypto import SymKey, UnwrapError, random_key, unwrap, wrap
from gkms.tree import KeyTree

LAYOUTS = ("random", "best-half", "worst-spread")


class ScenarioError(Exception):
    """Malformed or inconsistent scenario script."""


class ProbeError(AssertionError):
    """A probe test failed; carries the diagnostic state dump."""


class RecordingMeter(CostMeter):
    """Cost meter that additionally logs which key wrapped each ciphertext.

    The log is an analysis-side artifact (the wire carries only ciphertexts);
    the secrecy analyzer uses it to index unwrap attempts without changing
    their outcome, since exactly the wrapping key can open a payload.
    """

    def __init__(self) -> None:
        super().__init__()
        self.wrap_log: dict[bytes, bytes] = {}

    def record_wrap(self, kek, wrapped) -> None:
        self.wrap_log[wrapped.ciphertext] = kek.data


@dataclass(frozen=True)
class Step:
    op: str  # "join" | "leave"
    count: int | None = None
    ids: tuple[str, ...] | None = None
    layout: str | None = None

    def __post_init__(self) -> None:
        if self.op not in ("join", "leave"):
            raise ScenarioError(f"unknown step op {self.op!r}")
        if (self.count is None) == (self.ids is None):
            raise ScenarioError("step needs a count or explicit ids, not both")
        if self.count is not None and self.count < 1:
            raise ScenarioError("step batch size must be at least 1")
        if self.ids is not None and self.op != "leave":
            raise ScenarioError("explicit ids are only supported for leave steps")
        if self.layout is not None:
            if self.op != "leave":
                raise ScenarioError("layout applies to leave steps only")
            if self.layout not in LAYOUTS:
                raise ScenarioError(f"unknown layout {self.layout!r}")


@dataclass(frozen=True)
class Scenario:
    protocol: str
    n: int
    seed: int
    steps: tuple[Step, ...]
    root_code: str | None = None

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ScenarioError(f"unknown protocol {self.protocol!r}")
        if self.n < 1:
            raise ScenarioError("initial group size must be at least 1")


PROTOCOLS = {
    "ckcs": CkcsServer,
    "lkh": LkhServer,
    "oft": OftServer,
    "okd": OkdServer,
}


def make_server(protocol: str, member_ids: list[str], rng: Random, root_code: str | None = None) -> ServerProtocol:
    if protocol not in PROTOCOLS:
        raise ScenarioError(f"unknown protocol {protocol!r}")
    if protocol == "ckcs":
        return CkcsServer(member_ids, rng, root_code=root_code)
    if root_code is not None:
        raise ScenarioError(f"protocol {protocol!r} does not use position codes")
    return PROTOCOLS[protocol](member_ids, rng)


# -- scenario text format ----------------------------------------------------


def parse_scenario(text: str) -> Scenario:
    init: dict | None = None
    steps: list[Step] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        kind = tokens[0]
        if kind == "init":
            if init is not None:
                raise ScenarioError(f"line {line_no}: duplicate init line")
            init = _parse_kv(tokens[1:], line_no)
            for required in ("n", "protocol", "seed"):
                if required not in init:
                    raise ScenarioError(f"line {line_no}: init needs {required}=")
        elif kind in ("join", "leave"):
            if init is None:
                raise ScenarioError(f"line {line_no}: init must come first")
            steps.append(_parse_step(kind, tokens[1:], line_no))
        else:
            raise ScenarioError(f"line {line_no}: unknown directive {kind!r}")
    if init is None:
        raise ScenarioError("scenario has no init line")
    return Scenario(
        protocol=init["protocol"],
        n=int(init["n"]),
        seed=int(init["seed"]),
        steps=tuple(steps),
        root_code=init.get("root_code"),
    )


def _parse_kv(tokens: list[str], line_no: int) -> dict:
    out = {}
    for token in tokens:
        if "=" not in token:
            raise ScenarioError(f"line {line_no}: expected key=value, got {token!r}")
        key, value = token.split("=", 1)
        out[key] = value
    return out


def _parse_step(op: str, tokens: list[str], line_no: int) -> Step:
    count: int | None = None
    ids: tuple[str, ...] | None = None
    layout: str | None = None
    for token in tokens:
        if token.isdigit():
            count = int(token)
        elif token.startswith("ids="):
            ids = tuple(part for part in token[4:].split(",") if part)
        elif token.startswith("layout="):
            layout = token[7:]
        else:
            raise ScenarioError(f"line {line_no}: unexpected token {token!r}")
    try:
        return Step(op=op, count=count, ids=ids, layout=layout)
    except ScenarioError as exc:
        raise ScenarioError(f"line {line_no}: {exc}") from None


def format_scenario(scenario: Scenario) -> str:
    init = f"init n={scenario.n} protocol={scenario.protocol} seed={scenario.seed}"
    if scenario.root_code is not None:
        init += f" root_code={scenario.root_code}"
    lines = [init]
    for step in scenario.steps:
        if step.ids is not None:
            lines.append(f"{step.op} ids={','.join(step.ids)}")
        else:
            line = f"{step.op} {step.count}"
            if step.layout is not None:
                line += f" layout={step.layout}"
            lines.append(line)
    return "\n".join(lines) + "\n"


# -- leaver layouts ----------------------------------------------------------


def leaver_layout(tree: KeyTree, m: int, layout: str, rng: Random) -> list[str]:
    """Pick ``m`` leavers by placement strategy.

    ``random`` samples uniformly.  ``best-half`` takes the first ``m`` leaves
    (in tree order) of one root-child subtree — leaving a whole subtree keeps
    the cover tiny.  ``worst-spread`` greedily picks the leaf that touches
    the most so-far-untouched ancestors, spreading leavers across disjoint
    subtrees to drive the cover as large as possible.
    """
    n = tree.member_count
    if m < 1:
        raise ScenarioError("cannot pick an empty leaver set")
    if m >= n:
        raise ScenarioError(f"cannot remove {m} of {n} members; the group may not empty")
    if layout == "random":
        return sorted(rng.sample(tree.members, m))
    if layout == "best-half":
        best: list[str] | None = None
        for child_id in tree.root.children:
            members = tree.subtree_member_ids(child_id)
            if len(members) >= m and (best is None or len(best) < len(members)):
                best = members
        if best is None:
            raise ScenarioError(
                f"best-half infeasible: no root subtree holds {m} of {n} members"
            )
        return best[:m]
    if layout == "worst-spread":
        tainted: set[int] = set()
        chosen: list[str] = []
        leaves = [tree.leaf_of(member) for member in tree.members]
        for _ in range(m):
            best_leaf = None
            best_gain = -1
            for leaf in leaves:
                if leaf.member in chosen:
                    continue
                path = [leaf.node_id] + tree.ancestors(leaf.node_id)
                gain = sum(1 for node_id in path if node_id not in tainted)
                if gain > best_gain:
                    best_leaf, best_gain = leaf, gain
            assert best_leaf is not None
            chosen.append(best_leaf.member)  # type: ignore[arg-type]
            tainted.add(best_leaf.node_id)
            tainted.update(tree.ancestors(best_leaf.node_id))
        return chosen
    raise ScenarioError(f"unknown layout {layout!r}")


# -- trace running -----------------------------------------------------------


@dataclass
class EventRecord:
    seq: int
    op: str
    member_ids: tuple[str, ...]
    n_at_event: int  # group size when the event started
    cost: EventCost
    output: EventOutput
    group_key: SymKey  # server group key after the event


@dataclass
class TraceRecord:
    scenario: Scenario
    server: ServerProtocol
    events: list[EventRecord] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)
    group_key_history: list[SymKey] = field(default_factory=list)
    members: dict[str, MemberView] = field(default_factory=dict)
    departed: dict[str, MemberView] = field(default_factory=dict)
    join_epoch: dict[str, int] = field(default_factory=dict)
    leave_epoch: dict[str, int] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    digest: str = ""
    # analysis-side records (never on the wire): which node each key value
    # belonged to across epochs, the binary sibling structure over time, and
    # the wrapping key of every emitted ciphertext
    node_key_log: dict[bytes, set[int]] = field(default_factory=dict)
    sibling_pairs: set[tuple[int, int, int]] = field(default_factory=set)
    wrap_log: dict[bytes, bytes] = field(default_factory=dict)

    @property
    def deliveries(self) -> list[RekeyMessage | Notice]:
        """Full public transcript in delivery order."""
        out: list[RekeyMessage | Notice] = []
        for record in self.events:
            out.extend(record.output.deliveries)
        return out


def run(scenario: Scenario, track_members: bool = True) -> TraceRecord:
    """Execute a scenario and return its full trace."""
    rng = Random(scenario.seed)
    probe_rng = Random(f"{scenario.seed}/probe")
    initial = [f"u{i}" for i in range(1, scenario.n + 1)]
    next_index = scenario.n + 1
    server = make_server(scenario.protocol, initial, rng, scenario.root_code)
    trace = TraceRecord(scenario=scenario, server=server)
    trace.group_key_history.append(server.group_key)
    meter = RecordingMeter()
    trace.wrap_log = meter.wrap_log
    _log_tree(trace)

    if track_members:
        for boot in server.initial_bootstraps():
            trace.members[boot.member_id] = server.build_member(boot)
            trace.join_epoch[boot.member_id] = 0
        _run_probe(trace, probe_rng, event_seq=0)

    for seq, step in enumerate(scenario.steps, start=1):
        n_before = server.member_count
        if step.op == "join":
            batch = tuple(f"u{i}" for i in range(next_index, next_index + step.count))
            next_index += step.count
        elif step.ids is not None:
            batch = step.ids
        else:
            layout = step.layout or "random"
            batch = tuple(leaver_layout(server.tree, step.count, layout, rng))
        event = MembershipEvent(seq, step.op, batch)

        meter.begin_event(seq, step.op, len(batch))
        output = server.handle_event(event, rng, meter)
        cost = meter.end_event(**output.stats)

        trace.group_key_history.append(server.group_key)
        _log_tree(trace)
        record = EventRecord(
            seq=seq,
            op=step.op,
            member_ids=batch,
            n_at_event=n_before,
            cost=cost,
            output=output,
            group_key=server.group_key,
        )
        trace.events.append(record)
        trace.rows.append(csv_row(scenario.protocol, n_before, cost))

        if track_members:
            _deliver(trace, record, seq)
            _run_probe(trace, probe_rng, event_seq=seq)

    trace.digest = _trace_digest(trace)
    return trace


def _log_tree(trace: TraceRecord) -> None:
    tree = trace.server.tree
    for node in tree.walk():
        if node.key is not None:
            trace.node_key_log.setdefault(node.key.data, set()).add(node.node_id)
        if not node.is_leaf and len(node.children) == 2:
            left, right = node.children
            trace.sibling_pairs.add((left, right, node.node_id))
    trace.node_key_log.setdefault(trace.server.group_key.data, set()).add(tree.root_id)


def _deliver(trace: TraceRecord, record: EventRecord, seq: int) -> None:
    meter = CostMeter()  # tallies member-side derivation work during delivery
    for boot in record.output.bootstraps:
        trace.members[boot.member_id] = trace.server.build_member(boot)
        trace.join_epoch[boot.member_id] = seq
    if record.op == "leave":
        for member in record.member_ids:
            trace.departed[member] = trace.members.pop(member)
            trace.leave_epoch[member] = seq
    for delivery in record.output.deliveries:
        for recipient in delivery.recipients:
            view = trace.members.get(recipient)
            if view is None:
                continue  # departed or untracked
            if isinstance(delivery, Notice):
                view.apply_notice(delivery, meter)
            else:
                view.apply_message(delivery, meter)
    trace.rows[-1]["member_derivations"] = meter.member_derivations


def _run_probe(trace: TraceRecord, probe_rng: Random, event_seq: int) -> None:
    quiet = DiscardMeter()
    probe_payload = random_key(probe_rng, quiet)
    probe = wrap(trace.server.group_key, probe_payload, quiet, kek_id="probe")
    if set(trace.members) != set(trace.server.member_ids):
        raise ProbeError(
            f"event {event_seq}: tracked members {sorted(trace.members)} != "
            f"server membership {sorted(trace.server.member_ids)}"
        )
    for member_id, view in trace.members.items():
        if view.group_key != trace.server.group_key:
            raise ProbeError(
                f"event {event_seq}: member {member_id} holds group key "
                f"{view.group_key.fingerprint if view.group_key else None}, server has "
                f"{trace.server.group_key.fingerprint}"
            )
        try:
            got = unwrap(view.group_key, probe)
        except UnwrapError as exc:
            raise ProbeError(f"event {event_seq}: member {member_id} failed the probe: {exc}") from exc
        if got != probe_payload:
            raise ProbeError(f"event {event_seq}: member {member_id} unwrapped a wrong probe value")
        if view.unwrap_misses:
            raise ProbeError(
                f"event {event_seq}: member {member_id} missed {view.unwrap_misses} deliveries"
            )
    for member_id, view in trace.departed.items():
        if view.group_key is None:
            continue
        try:
            unwrap(view.group_key, probe)
        except UnwrapError:
            continue
        raise ProbeError(
            f"event {event_seq}: departed member {member_id} still unwraps the probe"
        )


def _trace_digest(trace: TraceRecord) -> str:
    """Stable digest over costs and wire bytes; replays must reproduce it."""
    payload = []
    for record in trace.events:
        deliveries = []
        for delivery in record.output.deliveries:
            if isinstance(delivery, Notice):
                deliveries.append(
                    {
                        "kind": delivery.kind,
                        "recipients": list(delivery.recipients),
                        "aux": delivery.aux,
                    }
                )
            else:
                deliveries.append(
                    {
                        "channel": delivery.channel,
                        "recipients": list(delivery.recipients),
                        "kek_ids": [p.kek_id for p in delivery.payloads],
                        "ciphertexts": [p.ciphertext.hex() for p in delivery.payloads],
                        "aux": delivery.aux,
                    }
                )
        payload.append(
            {
                "seq": record.seq,
                "op": record.op,
                "members": list(record.member_ids),
                "n": record.n_at_event,
                "cost": {
                    "keygen": record.cost.keygen,
                    "encrypt": record.cost.encrypt,
                    "unicast": record.cost.unicast,
                    "multicast": record.cost.multicast,
                    "msg_size_keys": record.cost.payload_keys,
                },
                "group_key": record.group_key.data.hex(),
                "deliveries": deliveries,
            }
        )
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# -- random corpus -----------------------------------------------------------


def generate_random_scenario(
    seed: int,
    protocol: str | None = None,
    max_n: int = 64,
    max_events: int = 8,
) -> Scenario:
    """A reproducible random scenario: mixed batch sizes and leaver layouts."""
    rng = Random(f"scenario/{seed}")
    protocol = protocol or rng.choice(sorted(PROTOCOLS))
    arity = PROTOCOLS[protocol].arity
    n0 = rng.randint(1, 16)
    steps: list[Step] = []
    n = n0
    for _ in range(rng.randint(1, max_events)):
        can_leave = n > 1
        op = rng.choice(["join", "leave"]) if can_leave else "join"
        if op == "join":
            m = rng.randint(1, min(8, max_n - n)) if n < max_n else 0
            if m == 0:
                op = "leave"
        if op == "join":
            steps.append(Step(op="join", count=m))
            n += m
        else:
            m = rng.randint(1, min(8, n - 1))
            layout = rng.choice(LAYOUTS)
            if layout == "best-half" and m > max(1, n // arity):
                layout = "random"  # a root subtree of that size is not guaranteed
            steps.append(Step(op="leave", count=m, layout=layout))
            n -= m
    return Scenario(protocol=protocol, n=n0, seed=seed, steps=tuple(steps))


# -- measurement sweeps ------------------------------------------------------


def sweep(
    protocols: list[str],
    n_values: list[int],
    m_values: list[int],
    ops: list[str],
    seed: int = 0,
    layout: str = "random",
) -> tuple[list[dict], list[str]]:
    """One-event measurements per grid cell, members untracked.

    ``n`` is the group size when the event starts.  Leave cells with m >= n
    are adjusted (m > n skipped, m == n trimmed to n-1) with a note, since a
    group may not empty.  Wall time covers the server's event handling only.
    """
    rows: list[dict] = []
    notes: list[str] = []
    for protocol in protocols:
        for op in ops:
            for n in n_values:
                for m in m_values:
                    if op == "leave" and m > n:
                        notes.append(f"{protocol} leave n={n} m={m}: skipped, m > n")
                        continue
                    batch = m
                    if op == "leave" and m == n:
                        batch = n - 1
                        notes.append(
                            f"{protocol} leave n={n} m={m}: trimmed to m={batch}; "
                            "the group may not empty"
                        )
                        if batch == 0:
                            continue
                    rows.append(
                        _sweep_cell(protocol, op, n, m, batch, seed, layout, notes)
                    )
    return rows, notes


def _sweep_cell(
    protocol: str,
    op: str,
    n: int,
    m: int,
    batch: int,
    seed: int,
    layout: str,
    notes: list[str],
) -> dict:
    rng = Random(f"sweep/{protocol}/{op}/{n}/{m}/{seed}")
    members = [f"u{i}" for i in range(1, n + 1)]
    server = make_server(protocol, members, rng)
    if op == "join":
        batch_ids = tuple(f"u{i}" for i in range(n + 1, n + batch + 1))
    else:
        batch_ids = tuple(leaver_layout(server.tree, batch, layout, rng))
    event = MembershipEvent(1, op, batch_ids)
    meter = CostMeter()
    meter.begin_event(1, op, len(batch_ids))
    start = time.perf_counter()
    output = server.handle_event(event, rng, meter)
    elapsed = time.perf_counter() - start
    cost = meter.end_event(**output.stats)
    row = csv_row(protocol, n, cost)
    row["m"] = m  # the requested cell, even when the batch was trimmed
    row["keygen_dedup"] = cost.extras.get("keygen_dedup", "")
    row["wall_ms"] = round(elapsed * 1000, 4)
    if protocol == "ckcs" and op == "leave":
        notes.append(
            f"ckcs leave n={n} m={m}: encryptions equal the measured cover size "
            f"({cost.encrypt}), which depends on leaver placement"
        )
    return row


SWEEP_EXTRA_COLUMNS = ["keygen_dedup", "wall_ms"]
