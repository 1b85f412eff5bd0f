"""Code-keyed rekeying engine (protocol id ``ckcs``).

The server stores real keys only at the leaves (individual keys) and the
root (the group key).  Every other internal node holds a position code, and
its key is a pure function of the current group key and that code, so the
server recomputes middle keys lazily per epoch instead of storing them.

A join batch mounts the new members as one subtree beside the old root,
refreshes the group key with a one-way step that every current member can
take locally, and multicasts the new group key wrapped once per joiner.  A
leave batch wraps a fresh random group key under the keys of the cover (the
maximal leaver-free subtrees computed before removal) in a single multicast;
everyone else recomputes their middle keys from their codes.

Codes are secrets of the members on the corresponding paths, delivered only
over per-member secure channels.  The secrecy analyzer demonstrates that
publishing them breaks forward secrecy.
"""

from __future__ import annotations

from random import Random

from gkms import tree as kt
from gkms.core import (
    Bootstrap,
    CostMeter,
    DiscardMeter,
    EventError,
    EventOutput,
    MembershipEvent,
    MemberView,
    Notice,
    RekeyMessage,
    ServerProtocol,
)
from gkms.crypto import (
    KeyRole,
    SymKey,
    decode_code,
    derive,
    derive_with_code,
    encode_code,
    random_key,
    unwrap,
    wrap,
)


class CkcsServer(ServerProtocol):
    name = "ckcs"
    arity = 2

    def __init__(self, member_ids: list[str], rng: Random, root_code: str | None = None) -> None:
        setup = DiscardMeter()  # initial group setup is out of band, unmetered
        self.tree = kt.build_balanced(member_ids, self.arity, rng, root_code=root_code, coded=True)
        for leaf_id in self.tree.leaf_ids():
            self.tree.nodes[leaf_id].key = random_key(rng, setup, KeyRole.INDIVIDUAL)
        self._group_key = random_key(rng, setup)
        self.epoch = 0
        self._middle_cache: dict[int, SymKey] = {}
        self._code_log: set[str] = {
            n.code for n in self.tree.walk() if n.code is not None
        }

    # -- state accessors ---------------------------------------------------

    @property
    def group_key(self) -> SymKey:
        return self._group_key

    @property
    def member_ids(self) -> list[str]:
        return self.tree.members

    def node_key(self, node_id: int) -> SymKey:
        """Current key at any node: stored for leaves, group key at the root,
        code-derived for middle nodes (memoized per epoch)."""
        node = self.tree.node(node_id)
        if node_id == self.tree.root_id:
            return self._group_key
        if node.is_leaf:
            assert node.key is not None
            return node.key
        cached = self._middle_cache.get(node_id)
        if cached is None:
            assert node.code is not None
            cached = derive_with_code(self._group_key, node.code)
            self._middle_cache[node_id] = cached
        return cached

    def all_codes(self) -> set[str]:
        """Every code ever assigned (for the codes-public analysis mode)."""
        return set(self._code_log)

    def _bump_epoch(self, new_key: SymKey) -> None:
        self._group_key = new_key
        self.epoch += 1
        self._middle_cache.clear()

    def dump(self) -> str:
        return self.tree.dump(key_of=self.node_key)

    # -- event handling ----------------------------------------------------

    def handle_event(self, event: MembershipEvent, rng: Random, meter: CostMeter) -> EventOutput:
        self._validate(event, set(self.member_ids))
        if event.op == "join":
            return self._join(event, rng, meter)
        return self._leave(event, rng, meter)

    def _fresh_root_code(self, rng: Random) -> str:
        """A new root code lineage, prefix-disjoint from every code ever used.

        Prefix-disjointness keeps full-code collisions impossible, so no two
        nodes can ever hold equal code-derived keys by accident.
        """
        while True:
            code = "".join(rng.choice(kt.DIGITS) for _ in range(kt.ROOT_CODE_LEN))
            if not any(code.startswith(c) or c.startswith(code) for c in self._code_log):
                return code

    def _join(self, event: MembershipEvent, rng: Random, meter: CostMeter) -> EventOutput:
        joiners = list(event.member_ids)
        old_members = self.member_ids
        old_root_code = self.tree.root.code  # None when the root is a bare leaf

        individual: dict[str, SymKey] = {
            m: random_key(rng, meter, KeyRole.INDIVIDUAL) for m in joiners
        }
        subtree = kt.build_balanced(joiners, self.arity)
        for leaf_id in subtree.leaf_ids():
            node = subtree.nodes[leaf_id]
            node.key = individual[node.member]  # type: ignore[index]

        # Normally the new root's code is the old one less a digit, which old
        # members derive locally.  A bare-leaf root has no code and a single
        # digit cannot shorten, so those cases start a fresh lineage below.
        fresh_code: str | None = None
        if old_root_code is None or len(old_root_code) < 2:
            fresh_code = self._fresh_root_code(rng)
        new_root_id, incoming_top_id = kt.attach_subtree(
            self.tree, subtree, rng, fresh_root_code=fresh_code
        )
        kt.assign_codes_below(self.tree, incoming_top_id, rng)
        self._code_log.update(
            n.code for n in self.tree.walk(incoming_top_id) if n.code is not None
        )
        new_root_code = self.tree.root.code
        assert new_root_code is not None
        self._code_log.add(new_root_code)

        meter.count("keygen")  # one-way refresh of the group key
        new_group_key = derive(self._group_key)
        self._bump_epoch(new_group_key)

        output = EventOutput()
        if fresh_code is not None:
            # Old members cannot derive the fresh lineage; each gets the code
            # confidentially, wrapped under its individual key.  Codes stay
            # secret: in transcript plaintext a departed member could combine
            # an old group key with a later cover node's code and unwrap keys
            # it must not have.
            code_block = SymKey(encode_code(new_root_code))
            for member in old_members:
                leaf = self.tree.leaf_of(member)
                reset = RekeyMessage(
                    channel="unicast",
                    recipients=(member,),
                    payloads=(wrap(self.node_key(leaf.node_id), code_block, meter, kek_id=leaf.node_id),),
                    aux={"op": "code_reset", "new_root": new_root_id},
                    event_seq=event.seq,
                )
                meter.count_message(reset)
                output.deliveries.append(reset)

        payloads = tuple(
            wrap(individual[m], new_group_key, meter, kek_id=self.tree.leaf_of(m).node_id)
            for m in joiners
        )
        message = RekeyMessage(
            channel="multicast",
            recipients=tuple(joiners),
            payloads=payloads,
            aux={"op": "join", "joined": joiners, "new_root": new_root_id},
            event_seq=event.seq,
        )
        meter.count_message(message)

        for m in joiners:
            output.bootstraps.append(self._bootstrap_for(m, individual[m]))
        output.deliveries.append(message)
        meter.count_notice()  # zero-payload signal, outside the size model
        output.deliveries.append(
            Notice(
                kind="join",
                recipients=tuple(old_members),
                aux={"op": "join", "new_root": new_root_id, "joined": joiners},
                event_seq=event.seq,
            )
        )
        output.stats["keygen_dedup"] = len(joiners) + 1
        if fresh_code is not None:
            output.stats["code_resets"] = len(old_members)
        return output

    def _leave(self, event: MembershipEvent, rng: Random, meter: CostMeter) -> EventOutput:
        leavers = list(event.member_ids)
        cover_ids = kt.compute_cover(self.tree, leavers)
        cover_keys = [(node_id, self.node_key(node_id)) for node_id in cover_ids]

        removal = kt.remove_leaves(self.tree, leavers)
        remaining = self.member_ids
        new_group_key = random_key(rng, meter)
        self._bump_epoch(new_group_key)

        payloads = tuple(
            wrap(key, new_group_key, meter, kek_id=node_id) for node_id, key in cover_keys
        )
        message = RekeyMessage(
            channel="multicast",
            recipients=tuple(remaining),
            payloads=payloads,
            aux={
                "op": "leave",
                "left": leavers,
                "deleted": list(removal.removed_node_ids),
                "promotions": [list(p) for p in removal.promotions],
                "cover": list(cover_ids),
            },
            event_seq=event.seq,
        )
        meter.count_message(message)

        output = EventOutput(deliveries=[message])
        output.stats["keygen_dedup"] = 1
        output.stats["cover_size"] = len(cover_ids)
        return output

    # -- member construction -----------------------------------------------

    def _bootstrap_for(self, member: str, individual_key: SymKey, include_group_key: bool = False) -> Bootstrap:
        leaf = self.tree.leaf_of(member)
        path = [
            {"node_id": entry.node_id, "code": entry.code}
            for entry in self.tree.path_to_root(member)
        ]
        extra: dict = {"path": path}
        if include_group_key:
            extra["group_key"] = self._group_key
        return Bootstrap(
            member_id=member, individual_key=individual_key, leaf_id=leaf.node_id, extra=extra
        )

    def initial_bootstraps(self) -> list[Bootstrap]:
        """Secure-channel deliveries that stand up the founding members."""
        out = []
        for member in self.member_ids:
            leaf = self.tree.leaf_of(member)
            assert leaf.key is not None
            out.append(self._bootstrap_for(member, leaf.key, include_group_key=True))
        return out

    def build_member(self, bootstrap: Bootstrap) -> "CkcsMember":
        return CkcsMember(bootstrap)


class CkcsMember(MemberView):
    """Client view: individual key, path codes, code-derived middle keys."""

    def __init__(self, bootstrap: Bootstrap) -> None:
        assert bootstrap.individual_key is not None and bootstrap.leaf_id is not None
        super().__init__(bootstrap.member_id, bootstrap.individual_key)
        self.leaf_id = bootstrap.leaf_id
        self.path: list[kt.PathEntry] = [
            kt.PathEntry(e["node_id"], e["code"]) for e in bootstrap.extra["path"]
        ]
        for entry in self.path:
            if entry.code is not None:
                self.knowledge.learn_code(entry.code)
        self.middle_keys: dict[int, SymKey] = {}
        self._pending_root: kt.PathEntry | None = None
        group_key = bootstrap.extra.get("group_key")
        if group_key is not None:
            self._learn_group_key(group_key)
            self._recompute_middle_keys(DiscardMeter())

    def _recompute_middle_keys(self, meter) -> None:
        """Refresh every non-root path key from the current group key."""
        assert self.group_key is not None
        self.middle_keys.clear()
        for entry in self.path[:-1]:
            assert entry.code is not None
            key = derive_with_code(self.group_key, entry.code)
            meter.count_member_derivation()
            self.middle_keys[entry.node_id] = key
            self.knowledge.learn_key(key)

    def apply_notice(self, notice: Notice, meter) -> None:
        if notice.kind != "join":
            raise EventError(f"unexpected notice kind {notice.kind!r}")
        self._check_addressed(notice.recipients)
        new_root_id = notice.aux["new_root"]
        if self._pending_root is not None and self._pending_root.node_id == new_root_id:
            entry = self._pending_root
            self._pending_root = None
        else:
            last = self.path[-1]
            assert last.code is not None
            entry = kt.PathEntry(new_root_id, kt.parent_code(last.code))
        self.path.append(entry)
        self.knowledge.learn_code(entry.code)  # type: ignore[arg-type]

        assert self.group_key is not None
        meter.count_member_derivation()  # one-way group key refresh
        self._learn_group_key(derive(self.group_key))
        self._recompute_middle_keys(meter)

    def apply_message(self, message: RekeyMessage, meter) -> None:
        self._check_addressed(message.recipients)
        op = message.aux.get("op")
        if op == "join":
            self._apply_join_delivery(message, meter)
        elif op == "leave":
            self._apply_leave(message, meter)
        elif op == "code_reset":
            self._apply_code_reset(message)
        else:
            raise EventError(f"unexpected message op {op!r}")

    def _apply_code_reset(self, message: RekeyMessage) -> None:
        """A fresh root code, individually wrapped; held until the join notice
        names the node it belongs to."""
        payload = message.payloads[0]
        if payload.kek_id != self.leaf_id:
            self.unwrap_misses += 1
            return
        code = decode_code(unwrap(self.individual_key, payload).data)
        self._pending_root = kt.PathEntry(message.aux["new_root"], code)
        self.knowledge.learn_code(code)

    def _apply_join_delivery(self, message: RekeyMessage, meter) -> None:
        for payload in message.payloads:
            if payload.kek_id == self.leaf_id:
                self._learn_group_key(unwrap(self.individual_key, payload))
                self._recompute_middle_keys(meter)
                return
        self.unwrap_misses += 1

    def _apply_leave(self, message: RekeyMessage, meter) -> None:
        deleted = set(message.aux["deleted"])
        if deleted:
            self.path = [e for e in self.path if e.node_id not in deleted]
            for node_id in deleted:
                self.middle_keys.pop(node_id, None)
        for payload in message.payloads:
            kek: SymKey | None = None
            if payload.kek_id == self.leaf_id:
                kek = self.individual_key
            elif payload.kek_id in self.middle_keys:
                kek = self.middle_keys[payload.kek_id]  # pre-refresh epoch value
            if kek is None:
                continue
            self._learn_group_key(unwrap(kek, payload))
            self._recompute_middle_keys(meter)
            return
        self.unwrap_misses += 1
