"""Mechanized forward/backward secrecy checking.

The adversary model is a passive eavesdropper who keeps every secret it ever
legitimately held (a member's accumulated keys and codes) plus the full
public transcript of wire messages.  ``closure`` computes the fixed point of
that knowledge under the active protocol's derivation rules, operating on
real key bytes from the simulation rather than an abstract term algebra, so
every derived fact is backed by an executable witness chain.

Rules (per protocol):

- ``hash-forward`` / ``okd-derive`` — step a key with the one-way refresh
  function; chains are capped at the trace's event count, the only epochs
  that exist.
- ``code-derive`` — combine a key with a known node code.
- ``unwrap-from-transcript`` — open an observed ciphertext with a known key.
- ``oft-blind`` / ``oft-mix`` — blind a known node key, or fold two known
  sibling blinds into the parent key.  Mix candidates are driven by the
  public tree structure (which sibling pairs existed), keeping the closure
  finite; combining non-sibling values can never produce a protocol key.

There is deliberately no inverse rule for any one-way function: backward
secrecy rests exactly on that absence.

Verdicts carry a human-readable witness chain on breach; witnesses are
always re-executed with real crypto before being reported.
"""

from __future__ import annotations

import hashlib
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

from gkms.core import RekeyMessage
from gkms.crypto import (
    SymKey,
    UnwrapError,
    WrappedKey,
    blind,
    decode_code,
    derive,
    derive_with_code,
    mix,
    unwrap,
)
from gkms.harness import TraceRecord, generate_random_scenario, run

RULESETS: dict[str, tuple[str, ...]] = {
    "ckcs": ("hash-forward", "code-derive", "unwrap-from-transcript"),
    "lkh": ("unwrap-from-transcript",),
    "oft": ("unwrap-from-transcript", "oft-blind", "oft-mix"),
    "okd": ("okd-derive", "unwrap-from-transcript"),
}

# kinds of fact a key-refresh or code derivation may legitimately start from;
# chaining them off code-derived/blinded/mixed values models nothing any
# protocol computes and would make the fact universe explode
_CHAINABLE = ("seed", "derived", "opaque")


def fingerprint(value: bytes | SymKey) -> str:
    data = value.data if isinstance(value, SymKey) else value
    return data[:4].hex()


def _ct_fingerprint(ciphertext: bytes) -> str:
    return "ct:" + hashlib.sha256(ciphertext).hexdigest()[:8]


@dataclass(frozen=True)
class Fact:
    """One known key value and how it was obtained (rule None = seed)."""

    value: bytes
    rule: str | None = None
    inputs: tuple[bytes, ...] = ()
    code: str | None = None
    wrapped: WrappedKey | None = None
    hops: int = 0  # consecutive one-way refresh steps
    kind: str = "seed"

    def line(self) -> str:
        parts = [fingerprint(v) for v in self.inputs]
        if self.code is not None:
            parts.append(f"code={self.code}")
        if self.wrapped is not None:
            parts.append(_ct_fingerprint(self.wrapped.ciphertext))
        return f"{self.rule}({', '.join(parts)}) -> {fingerprint(self.value)}"


class KnowledgeSet:
    """Keys and codes a principal knows, plus the context they grow in.

    The context — public transcript, active rule set, one-way chain cap, and
    the public structural metadata (which node each observed key slot
    belonged to, which sibling pairs existed) — travels with the set so that
    :func:`closure` is self-contained.
    """

    def __init__(
        self,
        keys: Iterable[bytes | SymKey] = (),
        codes: Iterable[str] = (),
        transcript: Iterable[RekeyMessage] = (),
        rules: Iterable[str] = (),
        derive_cap: int = 8,
        node_tags: dict[bytes, set[int]] | None = None,
        sibling_pairs: Iterable[tuple[int, int, int]] = (),
        wrap_log: dict[bytes, bytes] | None = None,
    ) -> None:
        self.facts: dict[bytes, Fact] = {}
        for key in keys:
            data = key.data if isinstance(key, SymKey) else key
            self.facts.setdefault(data, Fact(value=data))
        # code -> value of the fact it was decoded from (None = always held)
        self.codes: dict[str, bytes | None] = {code: None for code in codes}
        self.transcript: tuple[RekeyMessage, ...] = tuple(transcript)
        self.rules: tuple[str, ...] = tuple(rules)
        self.derive_cap = derive_cap
        self.node_tags = node_tags or {}
        self.sibling_pairs = tuple(sibling_pairs)
        self.wrap_log = wrap_log

    # -- queries -----------------------------------------------------------

    @property
    def keys(self) -> set[bytes]:
        return set(self.facts)

    def knows(self, key: bytes | SymKey) -> bool:
        data = key.data if isinstance(key, SymKey) else key
        return data in self.facts

    def witness_facts(self, key: bytes | SymKey) -> list[Fact]:
        """Every rule application behind ``key``, dependencies first."""
        data = key.data if isinstance(key, SymKey) else key
        if data not in self.facts:
            raise KeyError(f"key {fingerprint(data)} is not in this knowledge set")
        ordered: list[Fact] = []
        seen: set[bytes] = set()

        def visit(value: bytes) -> None:
            if value in seen:
                return
            seen.add(value)
            fact = self.facts[value]
            for inp in fact.inputs:
                visit(inp)
            if fact.code is not None:
                origin = self.codes.get(fact.code)
                if origin is not None:
                    visit(origin)
            if fact.rule is not None:
                ordered.append(fact)

        visit(data)
        return ordered

    def witness(self, key: bytes | SymKey) -> str:
        """Witness chain text: one ``rule(inputs) -> output`` line per step."""
        lines = [fact.line() for fact in self.witness_facts(key)]
        return "\n".join(lines) if lines else "(held from the start)"


def closure(initial: KnowledgeSet) -> KnowledgeSet:
    """Least fixed point of the knowledge set under its rule set.

    Terminates because every rule draws on finite material: transcript
    payloads, known codes, structural sibling pairs, and one-way chains
    capped at ``derive_cap``.
    """
    out = KnowledgeSet(
        transcript=initial.transcript,
        rules=initial.rules,
        derive_cap=initial.derive_cap,
        node_tags=initial.node_tags,
        sibling_pairs=initial.sibling_pairs,
        wrap_log=initial.wrap_log,
    )
    facts = out.facts
    facts.update(initial.facts)
    out.codes.update(initial.codes)

    rules = set(initial.rules)
    derive_rule = next((r for r in ("hash-forward", "okd-derive") if r in rules), None)

    # transcript payloads, deduplicated by ciphertext
    cts: dict[bytes, WrappedKey] = {}
    for message in initial.transcript:
        for payload in message.payloads:
            cts.setdefault(payload.ciphertext, payload)
    cts_by_kek: dict[bytes, list[WrappedKey]] | None = None
    if initial.wrap_log is not None:
        cts_by_kek = {}
        for ct, kek in initial.wrap_log.items():
            if ct in cts:
                cts_by_kek.setdefault(kek, []).append(cts[ct])

    # blind(real node key) -> node ids; lets the mix rule recognise which
    # known values are blinds of which tree slots (public placement metadata)
    blind_oracle: dict[bytes, set[int]] = {}
    if "oft-mix" in rules:
        for key_bytes, nodes in initial.node_tags.items():
            blind_oracle.setdefault(blind(SymKey(key_bytes)).data, set()).update(nodes)
    pairs_left: dict[int, list[tuple[int, int, int]]] = {}
    pairs_right: dict[int, list[tuple[int, int, int]]] = {}
    for left, right, parent in initial.sibling_pairs:
        pairs_left.setdefault(left, []).append((left, right, parent))
        pairs_right.setdefault(right, []).append((left, right, parent))
    blinds_by_node: dict[int, set[bytes]] = {}

    queue: deque[bytes] = deque(facts)

    def add(fact: Fact) -> None:
        if fact.value in facts:
            return
        facts[fact.value] = fact
        queue.append(fact.value)

    def add_code(code: str, origin: bytes | None) -> None:
        if code in out.codes:
            return
        out.codes[code] = origin
        if "code-derive" in rules:
            for value, fact in list(facts.items()):
                if fact.kind in _CHAINABLE:
                    add(_code_derived(value, code))

    def _code_derived(value: bytes, code: str) -> Fact:
        derived = derive_with_code(SymKey(value), code)
        return Fact(derived.data, "code-derive", (value,), code=code, kind="code-derived")

    def try_unwrap(value: bytes, wrapped: WrappedKey) -> None:
        try:
            plaintext = unwrap(SymKey(value), wrapped)
        except UnwrapError:
            return
        add(Fact(plaintext.data, "unwrap-from-transcript", (value,), wrapped=wrapped, kind="opaque"))
        try:
            add_code(decode_code(plaintext.data), plaintext.data)
        except ValueError:
            pass  # an ordinary key, not an encoded node code

    def register_blind(value: bytes) -> None:
        for node in blind_oracle.get(value, ()):
            per_node = blinds_by_node.setdefault(node, set())
            if value in per_node:
                continue
            per_node.add(value)
            for left, right, parent in pairs_left.get(node, ()):
                for partner in list(blinds_by_node.get(right, ())):
                    mixed = mix(SymKey(value), SymKey(partner))
                    add(Fact(mixed.data, "oft-mix", (value, partner), kind="mixed"))
            for left, right, parent in pairs_right.get(node, ()):
                for partner in list(blinds_by_node.get(left, ())):
                    mixed = mix(SymKey(partner), SymKey(value))
                    add(Fact(mixed.data, "oft-mix", (partner, value), kind="mixed"))

    while queue:
        value = queue.popleft()
        fact = facts[value]

        if "unwrap-from-transcript" in rules:
            if cts_by_kek is not None:
                for wrapped in cts_by_kek.get(value, ()):
                    try_unwrap(value, wrapped)
            else:
                for wrapped in cts.values():
                    try_unwrap(value, wrapped)

        if derive_rule and fact.kind in _CHAINABLE and fact.hops < initial.derive_cap:
            stepped = derive(SymKey(value))
            add(Fact(stepped.data, derive_rule, (value,), hops=fact.hops + 1, kind="derived"))

        if "code-derive" in rules and fact.kind in _CHAINABLE:
            for code in list(out.codes):
                add(_code_derived(value, code))

        if "oft-blind" in rules and value in initial.node_tags:
            blinded = blind(SymKey(value))
            add(Fact(blinded.data, "oft-blind", (value,), kind="blinded"))

        if "oft-mix" in rules:
            register_blind(value)

    return out


def verify_witness(ks: KnowledgeSet, key: bytes | SymKey) -> bool:
    """Re-execute a witness chain with real crypto and byte-check each step."""
    try:
        chain = ks.witness_facts(key)
    except KeyError:
        return False
    for fact in chain:
        if fact.rule in ("hash-forward", "okd-derive"):
            ok = derive(SymKey(fact.inputs[0])).data == fact.value
        elif fact.rule == "code-derive":
            ok = derive_with_code(SymKey(fact.inputs[0]), fact.code).data == fact.value
        elif fact.rule == "oft-blind":
            ok = blind(SymKey(fact.inputs[0])).data == fact.value
        elif fact.rule == "oft-mix":
            ok = mix(SymKey(fact.inputs[0]), SymKey(fact.inputs[1])).data == fact.value
        elif fact.rule == "unwrap-from-transcript":
            try:
                ok = unwrap(SymKey(fact.inputs[0]), fact.wrapped).data == fact.value
            except UnwrapError:
                ok = False
        else:
            ok = False
        if not ok:
            return False
    return True


# -- trace-level checks ------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    secure: bool
    check: str  # "forward-secrecy" | "backward-secrecy"
    adversary: tuple[str, ...]
    targets_checked: int
    breached_epoch: int | None = None
    witness: str | None = None

    def __str__(self) -> str:
        who = "+".join(self.adversary)
        if self.secure:
            return f"{self.check}: secure for {who} ({self.targets_checked} target keys)"
        return (
            f"{self.check}: BREACH by {who} of epoch-{self.breached_epoch} group key\n"
            f"{self.witness}"
        )


def adversary_knowledge(
    trace: TraceRecord,
    members: tuple[str, ...],
    codes_public: bool = False,
) -> KnowledgeSet:
    """Everything the named principals ever held, plus the public transcript."""
    keys: set[bytes] = set()
    codes: set[str] = set()
    for member in members:
        view = trace.members.get(member) or trace.departed.get(member)
        if view is None:
            raise ValueError(f"{member!r} never appears in this trace")
        keys.update(view.knowledge.key_bytes)
        codes.update(view.knowledge.codes)
    if codes_public:
        all_codes = getattr(trace.server, "all_codes", None)
        if all_codes is None:
            raise ValueError("codes-public mode only applies to the coded protocol")
        codes.update(all_codes())
    return KnowledgeSet(
        keys=keys,
        codes=codes,
        transcript=[d for d in trace.deliveries if isinstance(d, RekeyMessage)],
        rules=RULESETS[trace.scenario.protocol],
        derive_cap=len(trace.events),
        node_tags=trace.node_key_log,
        sibling_pairs=trace.sibling_pairs,
        wrap_log=trace.wrap_log,
    )


def _check(
    trace: TraceRecord,
    member: str,
    check: str,
    target_epochs: range,
    codes_public: bool,
    colluders: tuple[str, ...],
) -> Verdict:
    adversaries = (member, *colluders)
    closed = closure(adversary_knowledge(trace, adversaries, codes_public))
    targets = [trace.group_key_history[e] for e in target_epochs]
    for epoch, target in zip(target_epochs, targets):
        if closed.knows(target):
            witness = closed.witness(target)
            if not verify_witness(closed, target):  # pragma: no cover - soundness guard
                raise AssertionError(f"witness failed re-execution:\n{witness}")
            return Verdict(False, check, adversaries, len(targets), epoch, witness)
    return Verdict(True, check, adversaries, len(targets))


def check_forward_secrecy(
    trace: TraceRecord,
    leaver: str,
    *,
    codes_public: bool = False,
    colluders: tuple[str, ...] = (),
) -> Verdict:
    """Can the departed member reach any group key from its leave onward?"""
    if leaver not in trace.leave_epoch:
        raise ValueError(f"{leaver!r} never leaves in this trace")
    epoch = trace.leave_epoch[leaver]
    return _check(
        trace,
        leaver,
        "forward-secrecy",
        range(epoch, len(trace.group_key_history)),
        codes_public,
        colluders,
    )


def check_backward_secrecy(
    trace: TraceRecord,
    joiner: str,
    *,
    codes_public: bool = False,
    colluders: tuple[str, ...] = (),
) -> Verdict:
    """Can the member reach any group key from before it joined?

    Founding members have no earlier epochs, so they are vacuously secure.
    """
    if joiner not in trace.join_epoch:
        raise ValueError(f"{joiner!r} never appears in this trace")
    epoch = trace.join_epoch[joiner]
    return _check(
        trace,
        joiner,
        "backward-secrecy",
        range(0, epoch),
        codes_public,
        colluders,
    )


# -- corpus audit ------------------------------------------------------------


@dataclass
class AuditReport:
    trials: int
    checks: int = 0
    breaches: list[tuple[int, Verdict]] = field(default_factory=list)
    elapsed_s: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.breaches

    def summary(self) -> str:
        status = "all secure" if self.ok else f"{len(self.breaches)} BREACHES"
        return (
            f"audit: {self.trials} traces, {self.checks} closure checks, "
            f"{status}, {self.elapsed_s:.1f}s"
        )


def _audit_adversaries(trace: TraceRecord, sample: str) -> list[tuple[str, str]]:
    """(kind, member) pairs to check: endpoints by default, or everyone."""
    leave_events = [r for r in trace.events if r.op == "leave"]
    join_events = [r for r in trace.events if r.op == "join"]
    picks: list[tuple[str, str]] = []
    if sample == "all":
        for record in leave_events:
            picks.extend(("forward", m) for m in record.member_ids)
        for record in join_events:
            picks.extend(("backward", m) for m in record.member_ids)
    else:  # earliest and latest churn, the largest target sets on each side
        for record in (leave_events[:1] + leave_events[-1:]):
            picks.append(("forward", record.member_ids[0]))
        for record in (join_events[:1] + join_events[-1:]):
            picks.append(("backward", record.member_ids[0]))
    seen: set[tuple[str, str]] = set()
    unique = []
    for pick in picks:
        if pick not in seen:
            seen.add(pick)
            unique.append(pick)
    return unique


def audit(
    trials: int = 1000,
    max_n: int = 64,
    seed: int = 7,
    *,
    max_events: int = 8,
    codes_public: bool = False,
    sample: str = "endpoints",
) -> AuditReport:
    """Run secrecy checks over a corpus of seeded random traces.

    With ``codes_public`` the corpus is pinned to the coded protocol (the only
    one that has codes to leak); breaches are then the expected finding.
    """
    protocol = "ckcs" if codes_public else None
    report = AuditReport(trials=trials)
    start = time.perf_counter()
    for index in range(trials):
        scenario = generate_random_scenario(
            seed * 1_000_000 + index, protocol=protocol, max_n=max_n, max_events=max_events
        )
        trace = run(scenario)
        for kind, member in _audit_adversaries(trace, sample):
            if kind == "forward":
                verdict = check_forward_secrecy(trace, member, codes_public=codes_public)
            else:
                verdict = check_backward_secrecy(trace, member, codes_public=codes_public)
            report.checks += 1
            if not verdict.secure:
                report.breaches.append((scenario.seed, verdict))
    report.elapsed_s = time.perf_counter() - start
    return report
