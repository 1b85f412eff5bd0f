"""One-way-function folding rekeying (strictly binary tree, bottom-up keys).

Every internal node's key is computed, not stored independently: it is the
mix of the one-way-blinded keys of its two children, so the root (group) key
folds up from the leaves.  Each member holds its own leaf key plus the
blinded key of the sibling subtree at every level of its path, which is
exactly enough to fold the group key locally.  Rekeying therefore ships
"adverts": the blinded key of each changed path node, wrapped under the key
of that node's sibling, one advert per level.

A join always splits a leaf (keeping the tree strictly binary) and a leave
splices the vacated parent (promoting the remaining subtree).  In both cases
the affected neighbour leaf — the split victim at a join, one leaf of the
promoted subtree at a leave — gets a fresh individual key first, wrapped
under its old one.  Without that refresh the departed or arriving member
could keep folding: all other inputs to the new group key would be values it
already knows.  Batch events run as a sequence of single joins or leaves.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

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
from gkms.crypto import KeyRole, MeterLike, SymKey, blind, mix, random_key, unwrap, wrap
from gkms.tree import KeyTree, Node, build_balanced, insert_leaf, remove_leaves


@dataclass
class Level:
    """One path level as a member sees it: who the sibling is and its blind."""

    sibling_id: int | None
    side: int  # sibling's child index under the shared parent (0 or 1)
    blinded: SymKey | None


class OftServer(ServerProtocol):
    """Key server for the blinded-key-folding baseline."""

    name = "oft"
    arity = 2

    def __init__(self, member_ids: list[str], rng: random.Random) -> None:
        if not member_ids:
            raise EventError("initial group must not be empty")
        self.rng = rng
        self.tree: KeyTree = build_balanced(member_ids, arity=self.arity, rng=rng, coded=False)
        setup = DiscardMeter()
        for leaf_id in self.tree.leaf_ids():
            self.tree.node(leaf_id).key = random_key(rng, setup, KeyRole.INDIVIDUAL)
        self._fold_subtree(self.tree.root)

    def _fold_subtree(self, node: Node) -> SymKey:
        if node.is_leaf:
            return node.key
        left, right = (self.tree.node(c) for c in node.children)
        node.key = mix(blind(self._fold_subtree(left)), blind(self._fold_subtree(right)))
        return node.key

    def _fold_node(self, node: Node) -> None:
        left, right = (self.tree.node(c) for c in node.children)
        node.key = mix(blind(left.key), blind(right.key))

    def _sibling(self, node_id: int) -> Node:
        parent = self.tree.node(self.tree.node(node_id).parent)
        others = [c for c in parent.children if c != node_id]
        return self.tree.node(others[0])

    # -- state ------------------------------------------------------------

    @property
    def group_key(self) -> SymKey:
        return self.tree.root.key

    @property
    def member_ids(self) -> tuple[str, ...]:
        return list(self.tree.members)

    def node_key(self, node_id: int) -> SymKey:
        return self.tree.node(node_id).key

    def check_fold_invariant(self) -> bool:
        """True when every internal key equals the mix of its children's blinds."""
        for node in self.tree.walk():
            if node.is_leaf:
                continue
            left, right = (self.tree.node(c) for c in node.children)
            if node.key != mix(blind(left.key), blind(right.key)):
                return False
        return True

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
                individual_keygens += 2  # joiner key + split-victim refresh
            else:
                current.remove(member)
                chain = self._leave_one(member, rng, meter, output, event.seq, current)
                individual_keygens += 1  # promoted-leaf refresh
            touched.update(chain)
        output.stats["keygen_dedup"] = len(touched) + individual_keygens
        return output

    def _refresh_leaf(
        self,
        leaf: Node,
        rng: random.Random,
        meter: CostMeter,
        output: EventOutput,
        seq: int,
        aux: dict,
    ) -> None:
        old_key = leaf.key
        new_key = random_key(rng, meter, KeyRole.INDIVIDUAL)
        message = RekeyMessage(
            channel="unicast",
            recipients=(leaf.member,),
            payloads=(wrap(old_key, new_key, meter, kek_id=leaf.node_id),),
            aux={"op": "refresh", "targets": [leaf.node_id], **aux},
            event_seq=seq,
        )
        meter.count_message(message)
        output.deliveries.append(message)
        leaf.key = new_key

    def _advert_multicast(
        self,
        changed: list[Node],
        recipients: tuple[str, ...],
        aux: dict,
        meter: CostMeter,
        output: EventOutput,
        seq: int,
    ) -> None:
        """One blinded-key advert per changed node, wrapped for its sibling."""
        payloads = []
        targets = []
        for node in changed:
            sibling = self._sibling(node.node_id)
            payloads.append(wrap(sibling.key, blind(node.key), meter, kek_id=sibling.node_id))
            targets.append(node.node_id)
        if not payloads:
            return
        message = RekeyMessage(
            channel="multicast",
            recipients=recipients,
            payloads=tuple(payloads),
            aux={**aux, "targets": targets},
            event_seq=seq,
        )
        meter.count_message(message)
        output.deliveries.append(message)

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
        inserted = insert_leaf(self.tree, member, fill_slots=False)
        if inserted.split_member is None or inserted.new_internal_id is None:
            raise EventError("binary folding tree requires a split at every join")

        victim = self.tree.leaf_of(inserted.split_member)
        # The victim must not fold yet: its new level only becomes foldable
        # once the advert multicast delivers the joiner's blinded key.
        self._refresh_leaf(victim, rng, meter, output, seq, {"fold": False})

        leaf = self.tree.node(inserted.leaf_id)
        leaf.key = individual

        chain = [self.tree.node(i) for i in self.tree.ancestors(inserted.leaf_id)]
        for node in chain:
            self._fold_node(node)
            meter.count("keygen")

        joiner_side = self.tree.node(inserted.new_internal_id).children.index(inserted.leaf_id)
        split = {
            "member": inserted.split_member,
            "new_node": inserted.new_internal_id,
            "joiner_leaf": inserted.leaf_id,
            "joiner_side": joiner_side,
        }

        # Unicast to the joiner: the blinded sibling at every level, plus the
        # group key, all wrapped under the joiner's new individual key.
        payloads = []
        targets = []
        below = leaf.node_id
        for node in chain:
            sibling_id = [c for c in node.children if c != below][0]
            sibling = self.tree.node(sibling_id)
            payloads.append(wrap(individual, blind(sibling.key), meter, kek_id=leaf.node_id))
            targets.append(sibling_id)
            below = node.node_id
        payloads.append(wrap(individual, self.group_key, meter, kek_id=leaf.node_id))
        targets.append(self.tree.root_id)
        joiner_msg = RekeyMessage(
            channel="unicast",
            recipients=(member,),
            payloads=tuple(payloads),
            aux={"op": "join", "joined": [member], "targets": targets, "split": split},
            event_seq=seq,
        )
        meter.count_message(joiner_msg)
        output.deliveries.append(joiner_msg)

        changed = ([leaf] + chain)[:-1]  # every changed node below the root
        self._advert_multicast(
            changed,
            tuple(old_members),
            {"op": "join", "joined": [member], "split": split},
            meter,
            output,
            seq,
        )

        output.bootstraps.append(self._bootstrap_for(member, individual, with_blinds=False))
        return [n.node_id for n in chain]

    def _leave_one(
        self,
        member: str,
        rng: random.Random,
        meter: CostMeter,
        output: EventOutput,
        seq: int,
        remaining: list[str],
    ) -> list[int]:
        removal = remove_leaves(self.tree, [member])
        if not removal.promotions:
            raise EventError("binary folding tree expects a splice at every leave")
        promoted_id = removal.promotions[0][0]
        refresh_leaf = self._first_leaf_below(promoted_id)

        # The refreshed member gets the splice layout with its new key: all
        # its surviving sibling blinds are unchanged, so it can fold at once.
        self._refresh_leaf(
            refresh_leaf,
            rng,
            meter,
            output,
            seq,
            {"fold": True, "deleted": list(removal.removed_node_ids)},
        )

        chain = [self.tree.node(i) for i in self.tree.ancestors(refresh_leaf.node_id)]
        for node in chain:
            self._fold_node(node)
            meter.count("keygen")

        changed = ([refresh_leaf] + chain)[:-1]
        self._advert_multicast(
            changed,
            tuple(remaining),
            {
                "op": "leave",
                "left": [member],
                "deleted": list(removal.removed_node_ids),
                "refresh_leaf": refresh_leaf.node_id,
            },
            meter,
            output,
            seq,
        )
        return [n.node_id for n in chain]

    def _first_leaf_below(self, node_id: int) -> Node:
        queue = [node_id]
        while queue:
            node = self.tree.node(queue.pop(0))
            if node.is_leaf:
                return node
            queue.extend(node.children)
        raise EventError("subtree has no leaves")

    # -- member construction ------------------------------------------------

    def _levels_for(self, leaf_id: int, with_blinds: bool) -> list[tuple]:
        levels = []
        below = leaf_id
        for node_id in self.tree.ancestors(leaf_id):
            node = self.tree.node(node_id)
            sibling_id = [c for c in node.children if c != below][0]
            sibling = self.tree.node(sibling_id)
            side = node.children.index(sibling_id)
            blinded = blind(sibling.key) if with_blinds else None
            levels.append((sibling_id, side, blinded))
            below = node.node_id
        return levels

    def _bootstrap_for(self, member: str, individual: SymKey, with_blinds: bool) -> Bootstrap:
        leaf = self.tree.leaf_of(member)
        chain = [leaf.node_id] + self.tree.ancestors(leaf.node_id)
        return Bootstrap(
            member_id=member,
            individual_key=individual,
            leaf_id=leaf.node_id,
            extra={"chain": chain, "levels": self._levels_for(leaf.node_id, with_blinds)},
        )

    def initial_bootstraps(self) -> list[Bootstrap]:
        return [
            self._bootstrap_for(m, self.tree.leaf_of(m).key, with_blinds=True)
            for m in self.member_ids
        ]

    def build_member(self, bootstrap: Bootstrap) -> "OftMember":
        return OftMember(bootstrap)


class OftMember(MemberView):
    """Member state for the folding baseline: path ids plus sibling blinds."""

    def __init__(self, bootstrap: Bootstrap) -> None:
        super().__init__(bootstrap.member_id, bootstrap.individual_key)
        self.leaf_id: int = bootstrap.leaf_id
        self.chain: list[int] = list(bootstrap.extra["chain"])
        self.levels: list[Level] = [
            Level(sibling_id, side, blinded)
            for sibling_id, side, blinded in bootstrap.extra["levels"]
        ]
        for level in self.levels:
            if level.blinded is not None:
                self.knowledge.learn_key(level.blinded)
        self.computed: dict[int, SymKey] = {}
        if all(level.blinded is not None for level in self.levels):
            self._fold(None)

    def _fold(self, meter: MeterLike | None) -> None:
        key = self.individual_key
        self.computed = {}
        for level, parent_id in zip(self.levels, self.chain[1:]):
            if level.blinded is None:
                raise EventError(f"cannot fold: missing blinded key below node {parent_id}")
            mine = blind(key)
            if meter is not None:
                meter.count_member_derivation()
            key = mix(level.blinded, mine) if level.side == 0 else mix(mine, level.blinded)
            if meter is not None:
                meter.count_member_derivation()
            self.computed[parent_id] = key
            self.knowledge.learn_key(key)
        self._learn_group_key(key)

    def _kek_for(self, kek_id) -> SymKey | None:
        if kek_id == self.leaf_id:
            return self.individual_key
        return self.computed.get(kek_id)

    def _apply_structure(self, aux: dict) -> bool:
        changed = False
        split = aux.get("split")
        if split and split["member"] == self.member_id:
            self.chain.insert(1, split["new_node"])
            self.levels.insert(0, Level(split["joiner_leaf"], split["joiner_side"], None))
            changed = True
        deleted = set(aux.get("deleted", ()))
        if deleted:
            new_chain = [self.chain[0]]
            new_levels = []
            for level, parent_id in zip(self.levels, self.chain[1:]):
                if parent_id in deleted:
                    changed = True  # my former ancestor was spliced out
                    continue
                if level.sibling_id in deleted:
                    # the sibling slot was refilled by a promotion; the advert
                    # in this same message carries the replacement
                    level = Level(None, level.side, None)
                    changed = True
                new_levels.append(level)
                new_chain.append(parent_id)
            self.chain = new_chain
            self.levels = new_levels
        return changed

    def _apply_refresh(self, message: RekeyMessage, meter: MeterLike) -> None:
        self._apply_structure(message.aux)
        payload = message.payloads[0]
        if payload.kek_id != self.leaf_id:
            self.unwrap_misses += 1
            return
        self.individual_key = unwrap(self.individual_key, payload)
        self.knowledge.learn_key(self.individual_key)
        if message.aux.get("fold", False):
            self._fold(meter)

    def apply_message(self, message: RekeyMessage, meter: MeterLike) -> None:
        self._check_addressed(message.recipients)
        if message.aux.get("op") == "refresh":
            self._apply_refresh(message, meter)
            return
        changed = self._apply_structure(message.aux)
        targets = message.aux["targets"]
        matched = False
        for payload, target in zip(message.payloads, targets):
            kek = self._kek_for(payload.kek_id)
            if kek is None:
                continue
            if target == self.chain[-1] and payload.kek_id == self.leaf_id:
                # group key shipped directly (joiner bundle); folding confirms it
                self._learn_group_key(unwrap(kek, payload))
                matched = True
                continue
            placed = False
            for level in self.levels:
                if level.sibling_id == target:
                    level.blinded = unwrap(kek, payload)
                    self.knowledge.learn_key(level.blinded)
                    placed = True
                    break
            if not placed:
                # a changed node replaced the sibling at the level whose own
                # node the payload is keyed for
                for index, node_id in enumerate(self.chain[:-1]):
                    if node_id == payload.kek_id and index < len(self.levels):
                        level = self.levels[index]
                        level.sibling_id = target
                        level.blinded = unwrap(kek, payload)
                        self.knowledge.learn_key(level.blinded)
                        placed = True
                        break
            matched = matched or placed
        if matched or changed:
            self._fold(meter)
        elif message.aux.get("refresh_leaf") != self.leaf_id:
            # the refreshed member was fully served by its unicast; anyone
            # else should always find at least one decryptable advert
            self.unwrap_misses += 1
