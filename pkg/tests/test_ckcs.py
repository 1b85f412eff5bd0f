"""Coded-tree protocol engine: join/leave walkthroughs, code lifecycle
(shortening, exhaustion, confidential reset), and server/member agreement."""

import re
from random import Random

import pytest

from gkms import tree as kt
from gkms.ckcs import CkcsMember, CkcsServer
from gkms.core import CostMeter, DiscardMeter, EventError, MembershipEvent, Notice, RekeyMessage
from gkms.crypto import SymKey, decode_code, derive, derive_with_code, unwrap


def members(n):
    return [f"u{i}" for i in range(1, n + 1)]


def make(n=4, root_code="278", seed=1):
    rng = Random(seed)
    return CkcsServer(members(n), rng, root_code=root_code), rng


def deliver(views, output, meter=None):
    meter = meter or DiscardMeter()
    for delivery in output.deliveries:
        for member_id in delivery.recipients:
            view = views.get(member_id)
            if view is None:
                continue
            if isinstance(delivery, Notice):
                view.apply_notice(delivery, meter)
            else:
                view.apply_message(delivery, meter)


def build_initial_views(server):
    return {b.member_id: server.build_member(b) for b in server.initial_bootstraps()}


# -- initial state ----------------------------------------------------------------


def test_initial_tree_and_node_keys():
    server, _ = make(n=8, root_code="278")
    tree = server.tree
    assert tree.root.code == "278"
    assert server.member_ids == members(8)
    assert server.node_key(tree.root_id) == server.group_key
    for node in tree.walk():
        if node.is_leaf:
            assert server.node_key(node.node_id) == node.key
        elif node.node_id != tree.root_id:
            expected = derive_with_code(server.group_key, node.code)
            assert server.node_key(node.node_id) == expected
    # memoized within an epoch, recomputed after the key changes
    middle_id = tree.root.children[0]
    before = server.node_key(middle_id)
    assert server.node_key(middle_id) is server._middle_cache[middle_id]
    server._bump_epoch(derive(server.group_key))
    assert server.node_key(middle_id) != before


def test_initial_members_agree_with_server():
    server, _ = make(n=8)
    views = build_initial_views(server)
    for view in views.values():
        assert view.group_key == server.group_key
        for entry in view.path[:-1]:
            assert view.middle_keys[entry.node_id] == server.node_key(entry.node_id)


# -- join -------------------------------------------------------------------------


def test_join_batch_costs_and_structure():
    server, rng = make(n=4, root_code="278")
    old_key = server.group_key
    meter = CostMeter()
    meter.begin_event(1, "join", 3)
    output = server.handle_event(MembershipEvent(1, "join", ("u5", "u6", "u7")), rng, meter)
    cost = meter.end_event(**output.stats)

    assert cost.keygen == 4  # one per joiner + one group-key refresh
    assert cost.encrypt == 3
    assert cost.multicast == 1 and cost.unicast == 0
    assert cost.payload_keys == 3
    assert cost.notices == 1
    assert output.stats["keygen_dedup"] == 4
    assert "code_resets" not in output.stats

    assert server.group_key == derive(old_key)  # one-way refresh
    assert server.tree.root.code == "27"
    top = server.tree.node(server.tree.root.children[1])
    assert re.fullmatch(r"27[0-9]", top.code) and top.code != "278"
    inner = [server.tree.node(c) for c in top.children if not server.tree.node(c).is_leaf]
    for node in inner:
        assert node.code.startswith(top.code) and len(node.code) == len(top.code) + 1

    (message,) = output.messages
    assert message.channel == "multicast"
    assert set(message.recipients) == {"u5", "u6", "u7"}
    assert [p.kek_id for p in message.payloads] == [
        server.tree.leaf_of(m).node_id for m in ("u5", "u6", "u7")
    ]
    (notice,) = output.notices
    assert set(notice.recipients) == set(members(4))
    assert len(output.bootstraps) == 3


def test_join_delivery_brings_everyone_to_the_new_key():
    server, rng = make(n=4, root_code="278")
    views = build_initial_views(server)
    meter = CostMeter()
    meter.begin_event(1, "join", 2)
    output = server.handle_event(MembershipEvent(1, "join", ("u5", "u6")), rng, meter)
    meter.end_event()
    for boot in output.bootstraps:
        views[boot.member_id] = server.build_member(boot)
    tally = CostMeter()
    deliver(views, output, tally)
    for member_id, view in views.items():
        assert view.group_key == server.group_key, member_id
        assert view.unwrap_misses == 0
        for entry in view.path[:-1]:
            assert view.middle_keys[entry.node_id] == server.node_key(entry.node_id)
    assert tally.member_derivations > 0  # old members stepped the key locally


def test_joiner_multicast_is_opaque_to_old_members():
    server, rng = make(n=4, root_code="278")
    views = build_initial_views(server)
    output = server.handle_event(
        MembershipEvent(1, "join", ("u5",)), rng, CostMeter()
    )
    (message,) = output.messages
    assert set(message.recipients) == {"u5"}  # old members are not addressed
    old = views["u1"]
    with pytest.raises(EventError):
        old.apply_message(message, DiscardMeter())


# -- code lifecycle -----------------------------------------------------------------


def test_repeated_joins_shorten_then_reset_the_root_code():
    server, rng = make(n=4, root_code="27", seed=3)
    views = build_initial_views(server)
    codes_before_reset = set(server.all_codes())

    # first join: "27" shortens to "2"
    output = server.handle_event(MembershipEvent(1, "join", ("u5",)), rng, CostMeter())
    for boot in output.bootstraps:
        views[boot.member_id] = server.build_member(boot)
    deliver(views, output)
    assert server.tree.root.code == "2"

    # second join: nothing left to drop, so a fresh confidential lineage starts
    meter = CostMeter()
    meter.begin_event(2, "join", 1)
    output = server.handle_event(MembershipEvent(2, "join", ("u6",)), rng, meter)
    cost = meter.end_event(**output.stats)
    fresh = server.tree.root.code
    assert len(fresh) == kt.ROOT_CODE_LEN
    for old in codes_before_reset:
        assert not fresh.startswith(old) and not old.startswith(fresh)

    assert output.stats["code_resets"] == 5  # one reset unicast per old member
    assert cost.unicast == 5
    assert cost.payload_keys == 1 + 5  # joiner key + five wrapped code blocks
    resets = [m for m in output.messages if m.aux["op"] == "code_reset"]
    assert len(resets) == 5
    for reset in resets:
        (recipient,) = reset.recipients
        leaf = server.tree.leaf_of(recipient)
        assert reset.payloads[0].kek_id == leaf.node_id
        block = unwrap(leaf.key, reset.payloads[0])
        assert decode_code(block.data) == fresh

    for boot in output.bootstraps:
        views[boot.member_id] = server.build_member(boot)
    deliver(views, output)
    for member_id, view in views.items():
        assert view.group_key == server.group_key, member_id
        assert view.path[-1].code == fresh
        assert view.unwrap_misses == 0
    assert fresh in server.all_codes()


def test_first_join_onto_single_member_group_starts_a_lineage():
    rng = Random(5)
    server = CkcsServer(["u1"], rng)
    views = build_initial_views(server)
    assert server.tree.root.is_leaf  # no code yet
    output = server.handle_event(MembershipEvent(1, "join", ("u2",)), rng, CostMeter())
    assert len(server.tree.root.code) == kt.ROOT_CODE_LEN
    assert output.stats["code_resets"] == 1
    for boot in output.bootstraps:
        views[boot.member_id] = server.build_member(boot)
    deliver(views, output)
    assert views["u1"].group_key == server.group_key
    assert views["u2"].group_key == server.group_key


def test_all_codes_accumulates_history():
    server, rng = make(n=4, root_code="278")
    before = set(server.all_codes())
    assert "278" in before
    server.handle_event(MembershipEvent(1, "join", ("u5", "u6")), rng, CostMeter())
    after = server.all_codes()
    assert before < after  # old codes are never forgotten
    assert "27" in after


# -- leave ------------------------------------------------------------------------


def test_leave_spread_uses_the_pre_removal_cover():
    server, rng = make(n=8, root_code="27")
    views = build_initial_views(server)
    expected_cover = kt.compute_cover(server.tree, ["u1", "u4", "u8"])
    old_key = server.group_key

    meter = CostMeter()
    meter.begin_event(1, "leave", 3)
    output = server.handle_event(MembershipEvent(1, "leave", ("u1", "u4", "u8")), rng, meter)
    cost = meter.end_event(**output.stats)

    assert cost.keygen == 1  # a single fresh group key
    assert cost.encrypt == 4 and cost.payload_keys == 4
    assert cost.multicast == 1 and cost.unicast == 0
    assert output.stats["cover_size"] == 4

    (message,) = output.messages
    assert message.aux["cover"] == expected_cover
    assert [p.kek_id for p in message.payloads] == expected_cover
    cover_members = [server.tree.subtree_member_ids(i) for i in message.aux["cover"]]
    assert cover_members == [["u2"], ["u3"], ["u5", "u6"], ["u7"]]
    promoted = {p for p, _ in (tuple(pair) for pair in message.aux["promotions"])}
    assert promoted == {server.tree.leaf_of(m).node_id for m in ("u2", "u3", "u7")}

    assert server.group_key != derive(old_key)  # fresh draw, not a one-way step
    for leaver in ("u1", "u4", "u8"):
        views.pop(leaver)
    deliver(views, output)
    for member_id, view in views.items():
        assert view.group_key == server.group_key, member_id
        assert view.unwrap_misses == 0
        for entry in view.path[:-1]:
            assert view.middle_keys[entry.node_id] == server.node_key(entry.node_id)


def test_leave_of_a_whole_subtree_needs_one_encryption():
    server, rng = make(n=8, root_code="27")
    half = server.tree.subtree_member_ids(server.tree.root.children[0])
    other = server.tree.root.children[1]
    meter = CostMeter()
    meter.begin_event(1, "leave", len(half))
    output = server.handle_event(MembershipEvent(1, "leave", tuple(half)), rng, meter)
    cost = meter.end_event(**output.stats)
    assert cost.keygen == 1
    assert cost.encrypt == 1
    assert output.messages[0].aux["cover"] == [other]


def test_departed_member_cannot_open_the_leave_multicast():
    server, rng = make(n=4, root_code="278")
    views = build_initial_views(server)
    leaver = views["u1"]
    output = server.handle_event(MembershipEvent(1, "leave", ("u1",)), rng, CostMeter())
    (message,) = output.messages
    assert "u1" not in message.recipients
    for payload in message.payloads:
        kek = leaver.middle_keys.get(payload.kek_id)
        if payload.kek_id == leaver.leaf_id:
            kek = leaver.individual_key
        if kek is None:
            continue
        # even a held key for a surviving node id no longer opens anything:
        # leaver-path nodes are never cover nodes
        with pytest.raises(Exception):
            unwrap(kek, payload)


# -- validation and message handling ------------------------------------------------


def test_event_validation_errors():
    server, rng = make(n=4)
    with pytest.raises(EventError):
        server.handle_event(MembershipEvent(1, "join", ("u1",)), rng, CostMeter())
    with pytest.raises(EventError):
        server.handle_event(MembershipEvent(1, "leave", ("nope",)), rng, CostMeter())
    with pytest.raises(EventError):
        server.handle_event(MembershipEvent(1, "leave", tuple(members(4))), rng, CostMeter())


def test_member_rejects_unknown_traffic():
    server, _ = make(n=4)
    views = build_initial_views(server)
    view = views["u1"]
    bogus = RekeyMessage(
        channel="multicast",
        recipients=("u1",),
        payloads=(),
        aux={"op": "mystery"},
        event_seq=1,
    )
    with pytest.raises(EventError):
        view.apply_message(bogus, DiscardMeter())
    with pytest.raises(EventError):
        view.apply_notice(Notice(kind="farewell", recipients=("u1",), aux={}, event_seq=1), DiscardMeter())
