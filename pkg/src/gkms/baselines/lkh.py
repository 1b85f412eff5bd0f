"""Hierarchy-of-key-encryption-keys rekeying (binary tree, independent node keys).

Every tree node holds an independently drawn symmetric key; the root key is
the group key and each member holds the keys on its leaf-to-root path.  A
join fills an open slot when one exists (splitting the shallowest leaf
otherwise), then redraws every key on the new leaf's path: the joiner gets
the path keys over a chained unicast, everyone else gets each redrawn key
wrapped under the keys of that node's children.  A leave deletes the leaf
and redraws the keys of its surviving former ancestors the same way.  Batch
events are processed as a sequence of single joins or leaves.
"""

from __future__ import annotations

import random

from gkms.core import (
    Bootstrap,
    CostMeter,
    DiscardMeter,
    EventError,
    EventOutput,
    MemberView,
    MembershipEvent,
    RekeyMessage,
    ServerProtocol,
)
from gkms.crypto import KeyRole, MeterLike, SymKey, random_key, unwrap, wrap
from gkms.tree import KeyTree, build_balanced, detach_leaf, insert_leaf


class LkhServer(ServerProtocol):
    """Key server for the key-hierarchy baseline."""

    name = "lkh"
    arity = 2

    def __init__(self, member_ids: list[str], rng: random.Random) -> None:
        if not member_ids:
            raise EventError("initial group must not be empty")
        self.rng = rng
        self.tree: KeyTree = build_balanced(member_ids, arity=self.arity, rng=rng, coded=False)
        setup = DiscardMeter()
        for node in self.tree.walk():
            role = KeyRole.INDIVIDUAL if node.is_leaf else KeyRole.MIDDLE
            if node.node_id == self.tree.root_id:
                role = KeyRole.GROUP
            node.key = random_key(rng, setup, role)

    # -- state ------------------------------------------------------------

    @property
    def group_key(self) -> SymKey:
        return self.tree.root.key

    @property
    def member_ids(self) -> tuple[str, ...]:
        return list(self.tree.members)

    def node_key(self, node_id: int) -> SymKey:
        return self.tree.node(node_id).key

    # -- event handling ---------------------------------------------------

    def handle_event(self, event: MembershipEvent, rng: random.Random, meter: CostMeter) -> EventOutput:
        # One membership snapshot per event, maintained incrementally: the
        # per-member helpers would otherwise walk the whole tree per sub-join.
        current = list(self.member_ids)
        self._validate(event, set(current))
        output = EventOutput()
        touched: set[int] = set()
        individual_keygens = 0
        for member in event.member_ids:
            if event.op == "join":
                chain = self._join_one(member, rng, meter, output, event.seq, current)
                current.append(member)
                individual_keygens += 1
            else:
                current.remove(member)
                chain = self._leave_one(member, rng, meter, output, event.seq, current)
            touched.update(chain)
        output.stats["keygen_dedup"] = len(touched) + individual_keygens
        return output

    def _join_one(
        self,
        member: str,
        rng: random.Random,
        meter: CostMeter,
        output: EventOutput,
        seq: int,
        old_members: list[str],
    ) -> list[int]:
        individual = random_key(rng, meter, KeyRole.INDIVIDUAL)
        inserted = insert_leaf(self.tree, member, fill_slots=True)
        leaf = self.tree.node(inserted.leaf_id)
        leaf.key = individual

        chain = list(self.tree.ancestors(inserted.leaf_id))
        for node_id in chain:
            role = KeyRole.GROUP if node_id == self.tree.root_id else KeyRole.MIDDLE
            self.tree.node(node_id).key = random_key(rng, meter, role)

        split = None
        if inserted.split_member is not None:
            split = {
                "member": inserted.split_member,
                "new_node": inserted.new_internal_id,
                "joiner_leaf": inserted.leaf_id,
            }

        # Chained unicast: each path key wrapped under the key one level below.
        payloads = []
        targets = []
        prev_key, prev_id = individual, inserted.leaf_id
        for node_id in chain:
            node_key = self.tree.node(node_id).key
            payloads.append(wrap(prev_key, node_key, meter, kek_id=prev_id))
            targets.append(node_id)
            prev_key, prev_id = node_key, node_id
        joiner_msg = RekeyMessage(
            channel="unicast",
            recipients=(member,),
            payloads=tuple(payloads),
            aux={"op": "join", "joined": [member], "targets": targets, "split": split},
            event_seq=seq,
        )
        meter.count_message(joiner_msg)
        output.deliveries.append(joiner_msg)

        # Multicast: each redrawn key wrapped under each child's current key.
        payloads = []
        targets = []
        for node_id in chain:
            node = self.tree.node(node_id)
            for child_id in node.children:
                if child_id == inserted.leaf_id:
                    continue  # the joiner is served by the unicast
                child_key = self.tree.node(child_id).key
                payloads.append(wrap(child_key, node.key, meter, kek_id=child_id))
                targets.append(node_id)
        group_msg = RekeyMessage(
            channel="multicast",
            recipients=tuple(old_members),
            payloads=tuple(payloads),
            aux={"op": "join", "joined": [member], "targets": targets, "split": split},
            event_seq=seq,
        )
        meter.count_message(group_msg)
        output.deliveries.append(group_msg)

        output.bootstraps.append(self._bootstrap_for(member, individual))
        return chain

    def _leave_one(
        self,
        member: str,
        rng: random.Random,
        meter: CostMeter,
        output: EventOutput,
        seq: int,
        remaining: list[str],
    ) -> list[int]:
        detached = detach_leaf(self.tree, member)

        chain = list(detached.rekey_chain)
        for node_id in chain:
            role = KeyRole.GROUP if node_id == self.tree.root_id else KeyRole.MIDDLE
            self.tree.node(node_id).key = random_key(rng, meter, role)

        payloads = []
        targets = []
        for node_id in chain:
            node = self.tree.node(node_id)
            for child_id in node.children:
                child_key = self.tree.node(child_id).key
                payloads.append(wrap(child_key, node.key, meter, kek_id=child_id))
                targets.append(node_id)
        message = RekeyMessage(
            channel="multicast",
            recipients=tuple(remaining),
            payloads=tuple(payloads),
            aux={
                "op": "leave",
                "left": [member],
                "deleted": list(detached.removed_node_ids),
                "targets": targets,
            },
            event_seq=seq,
        )
        meter.count_message(message)
        output.deliveries.append(message)
        return chain

    # -- member construction ------------------------------------------------

    def _bootstrap_for(self, member: str, individual: SymKey) -> Bootstrap:
        leaf = self.tree.leaf_of(member)
        chain = [leaf.node_id] + self.tree.ancestors(leaf.node_id)
        return Bootstrap(
            member_id=member,
            individual_key=individual,
            leaf_id=leaf.node_id,
            extra={"chain": chain},
        )

    def initial_bootstraps(self) -> list[Bootstrap]:
        out = []
        for member in self.member_ids:
            leaf = self.tree.leaf_of(member)
            boot = self._bootstrap_for(member, leaf.key)
            boot.extra["path_keys"] = [
                (i, self.tree.node(i).key) for i in self.tree.ancestors(leaf.node_id)
            ]
            out.append(boot)
        return out

    def build_member(self, bootstrap: Bootstrap) -> "LkhMember":
        return LkhMember(bootstrap)


class LkhMember(MemberView):
    """Member state for the key-hierarchy baseline: path node ids plus keys."""

    def __init__(self, bootstrap: Bootstrap) -> None:
        super().__init__(bootstrap.member_id, bootstrap.individual_key)
        self.leaf_id: int = bootstrap.leaf_id
        self.chain: list[int] = list(bootstrap.extra["chain"])
        self.keys: dict[int, SymKey] = {self.leaf_id: bootstrap.individual_key}
        for node_id, key in bootstrap.extra.get("path_keys", []):
            self.keys[node_id] = key
            self.knowledge.learn_key(key)
        self._refresh_group_key()

    def _refresh_group_key(self) -> None:
        root_key = self.keys.get(self.chain[-1])
        if root_key is not None:
            self._learn_group_key(root_key)

    def _apply_structure(self, aux: dict) -> None:
        split = aux.get("split")
        if split and split["member"] == self.member_id:
            self.chain.insert(1, split["new_node"])
        deleted = set(aux.get("deleted", ()))
        if deleted:
            self.chain = [n for n in self.chain if n not in deleted]
            for node_id in deleted:
                self.keys.pop(node_id, None)

    def apply_message(self, message: RekeyMessage, meter: MeterLike) -> None:
        self._check_addressed(message.recipients)
        self._apply_structure(message.aux)
        targets = message.aux["targets"]
        matched = False
        for payload, target in zip(message.payloads, targets):
            kek = self.keys.get(payload.kek_id)
            if kek is None or target not in self.chain:
                continue
            new_key = unwrap(kek, payload)
            self.keys[target] = new_key
            self.knowledge.learn_key(new_key)
            matched = True
        if not matched:
            self.unwrap_misses += 1
        self._refresh_group_key()
