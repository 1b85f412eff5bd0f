"""One-way key-derivation rekeying (ternary tree, self-updating joins).

Like the key-hierarchy baseline, every node holds its own key and members
hold their path keys.  The difference is the join: instead of redrawing and
re-distributing path keys, the server steps every key on the joiner's path
through a one-way derivation, sends the stepped keys to the joiner over one
unicast, and announces the affected node ids in a payload-free notice.
Current members then step their own copies locally — the old keys are the
pre-images, so the joiner learns nothing about traffic from before it
arrived.  When a slot-split is needed, the brand-new internal node has no
previous key to step, so the server draws a fresh random one and unicasts it
to the displaced member under that member's leaf key (a key derived from any
long-lived value would repeat if churn ever splits the same member again,
re-creating retired wrapping keys).  Leaves redraw fresh random path keys (a
derived key would still be computable by the departed member) and distribute
them wrapped under child keys, as in the key hierarchy.
"""

from __future__ import annotations

import random

from gkms.baselines.lkh import LkhMember, LkhServer
from gkms.core import (
    Bootstrap,
    CostMeter,
    EventOutput,
    Notice,
    RekeyMessage,
)
from gkms.crypto import KeyRole, MeterLike, SymKey, derive, random_key, wrap
from gkms.tree import insert_leaf


class OkdServer(LkhServer):
    """Key server for the derive-step baseline."""

    name = "okd"
    arity = 3

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

        split = None
        if inserted.split_member is not None:
            split = {
                "member": inserted.split_member,
                "new_node": inserted.new_internal_id,
                "joiner_leaf": inserted.leaf_id,
            }
        new_node_id = split["new_node"] if split else None

        chain = list(self.tree.ancestors(inserted.leaf_id))
        for node_id in chain:
            node = self.tree.node(node_id)
            if node_id == new_node_id:
                # brand-new internal node: nothing exists to step, so it gets
                # fresh randomness; the displaced member receives it by
                # unicast below, everyone else never needs it
                node.key = random_key(rng, meter, KeyRole.MIDDLE)
            else:
                node.key = derive(node.key)
                meter.count("keygen")

        payloads = []
        for node_id in chain:
            node_key = self.tree.node(node_id).key
            payloads.append(wrap(individual, node_key, meter, kek_id=inserted.leaf_id))
        joiner_msg = RekeyMessage(
            channel="unicast",
            recipients=(member,),
            payloads=tuple(payloads),
            aux={"op": "join", "joined": [member], "targets": list(chain), "split": split},
            event_seq=seq,
        )
        meter.count_message(joiner_msg)
        output.deliveries.append(joiner_msg)

        if split is not None:
            victim_leaf = self.tree.leaf_of(inserted.split_member)
            victim_msg = RekeyMessage(
                channel="unicast",
                recipients=(inserted.split_member,),
                payloads=(
                    wrap(
                        victim_leaf.key,
                        self.tree.node(new_node_id).key,
                        meter,
                        kek_id=victim_leaf.node_id,
                    ),
                ),
                aux={
                    "op": "join",
                    "joined": [member],
                    "targets": [new_node_id],
                    "split": split,
                },
                event_seq=seq,
            )
            meter.count_message(victim_msg)
            output.deliveries.append(victim_msg)

        notice = Notice(
            kind="join",
            recipients=tuple(old_members),
            aux={"op": "join", "joined": [member], "chain": list(chain), "split": split},
            event_seq=seq,
        )
        meter.count_notice()
        output.deliveries.append(notice)

        output.bootstraps.append(self._bootstrap_for(member, individual))
        return chain

    def build_member(self, bootstrap: Bootstrap) -> "OkdMember":
        return OkdMember(bootstrap)


class OkdMember(LkhMember):
    """Member that steps its own path keys on a join notice."""

    def apply_notice(self, notice: Notice, meter: MeterLike) -> None:
        self._check_addressed(notice.recipients)
        aux = notice.aux
        split = aux.get("split")
        new_node = split["new_node"] if split else None
        for node_id in aux["chain"]:
            if node_id == new_node:
                continue  # fresh node: its key travels by unicast, not stepping
            old = self.keys.get(node_id)
            if old is None:
                continue
            self.keys[node_id] = derive(old)
            meter.count_member_derivation()
            self.knowledge.learn_key(self.keys[node_id])
        self._refresh_group_key()
