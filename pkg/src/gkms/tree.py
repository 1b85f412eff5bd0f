"""Logical key trees with optional per-node position codes.

The tree is the shared data structure of every protocol engine: leaves stand
for members, internal nodes for subgroup keys.  Nodes keep a stable integer
id for their whole lifetime; codes and keys travel with the node when
restructuring moves it.

Position codes are digit strings.  A child's code extends its parent's code
by one digit, so everyone who knows a node's code can compute every ancestor
code by dropping trailing digits.  Codes are assigned to internal nodes only;
leaves are keyed by individual member keys and need no code.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from random import Random
from typing import Callable, Iterable, Iterator, Sequence

from gkms.crypto import SymKey

DIGITS = "0123456789"
ROOT_CODE_LEN = 8  # fresh root codes leave headroom for repeated shortening


class TreeError(Exception):
    """Structural misuse of a key tree."""


class CodeSpaceError(TreeError):
    """No unused sibling digit or no room left to shorten the root code."""


def parent_code(code: str) -> str:
    """Drop the rightmost digit; the result names the parent position."""
    if len(code) < 2:
        raise CodeSpaceError(f"code {code!r} too short to have a parent code")
    return code[:-1]


def child_code(parent: str, rng: Random, used: Iterable[str] = ()) -> str:
    """Extend ``parent`` by one random digit not used by existing siblings."""
    taken = {code[-1] for code in used}
    free = [d for d in DIGITS if d not in taken]
    if not free:
        raise CodeSpaceError(f"all sibling digits under code {parent!r} are taken")
    return parent + rng.choice(free)


@dataclass
class Node:
    node_id: int
    parent: int | None = None
    children: list[int] = field(default_factory=list)
    key: SymKey | None = None
    code: str | None = None
    member: str | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True)
class PathEntry:
    node_id: int
    code: str | None


@dataclass(frozen=True)
class RemovalResult:
    removed_node_ids: tuple[int, ...]
    promotions: tuple[tuple[int, int], ...]  # (promoted node, vacated parent)


@dataclass(frozen=True)
class DetachResult:
    removed_node_ids: tuple[int, ...]
    rekey_chain: tuple[int, ...]  # surviving former ancestors, bottom-up


@dataclass(frozen=True)
class InsertResult:
    leaf_id: int
    parent_id: int
    new_internal_id: int | None
    split_member: str | None


class KeyTree:
    """Mutable rooted tree; every operation is deterministic."""

    def __init__(self, arity: int) -> None:
        if arity < 2:
            raise TreeError("arity must be at least 2")
        self.arity = arity
        self.nodes: dict[int, Node] = {}
        self.root_id: int | None = None
        self._next_id = 0
        self._member_leaf: dict[str, int] = {}
        # Placement bookkeeping for insert_leaf (see the helpers below):
        # open child slots plus a lazy min-heap over their breadth-first
        # ranks, and a resumable breadth-first scan for split victims.
        self._open_slots: set[int] = set()
        self._slot_keys: dict[int, tuple[int, tuple[int, ...]]] = {}
        self._slot_heap: list[tuple[tuple[int, tuple[int, ...]], int]] | None = None
        self._split_scan: deque[int] | None = None

    # -- basic accessors ---------------------------------------------------

    def node(self, node_id: int) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise TreeError(f"no node {node_id}") from None

    @property
    def root(self) -> Node:
        if self.root_id is None:
            raise TreeError("tree is empty")
        return self.nodes[self.root_id]

    def leaf_of(self, member: str) -> Node:
        try:
            return self.nodes[self._member_leaf[member]]
        except KeyError:
            raise TreeError(f"no leaf for member {member!r}") from None

    def has_member(self, member: str) -> bool:
        return member in self._member_leaf

    @property
    def members(self) -> list[str]:
        """Members in registration order (joins append, removals keep order).

        O(n) list construction without touching the tree, so building
        recipient lists never dominates an O(m) event.
        """
        return list(self._member_leaf)

    @property
    def member_count(self) -> int:
        return len(self._member_leaf)

    def leaf_ids(self) -> list[int]:
        return [n.node_id for n in self.walk() if n.is_leaf]

    def walk(self, start: int | None = None) -> Iterator[Node]:
        """Depth-first, children in stored order."""
        if self.root_id is None:
            return
        stack = [self.root_id if start is None else start]
        while stack:
            node = self.nodes[stack.pop()]
            yield node
            stack.extend(reversed(node.children))

    def depth(self, node_id: int) -> int:
        depth = 0
        node = self.node(node_id)
        while node.parent is not None:
            node = self.nodes[node.parent]
            depth += 1
        return depth

    def height(self) -> int:
        return max((self.depth(i) for i in self.leaf_ids()), default=0)

    def ancestors(self, node_id: int) -> list[int]:
        """Node ids from the parent of ``node_id`` up to and including the root."""
        out = []
        node = self.node(node_id)
        while node.parent is not None:
            out.append(node.parent)
            node = self.nodes[node.parent]
        return out

    def path_to_root(self, member: str) -> list[PathEntry]:
        """(node id, code) pairs from the member's leaf parent up to the root."""
        leaf = self.leaf_of(member)
        return [
            PathEntry(i, self.nodes[i].code) for i in self.ancestors(leaf.node_id)
        ]

    def siblings(self, node_id: int) -> list[int]:
        node = self.node(node_id)
        if node.parent is None:
            return []
        return [c for c in self.nodes[node.parent].children if c != node_id]

    def subtree_member_ids(self, node_id: int) -> list[str]:
        return [n.member for n in self.walk(node_id) if n.is_leaf and n.member]

    def subtree_leaf_count(self, node_id: int) -> int:
        return sum(1 for n in self.walk(node_id) if n.is_leaf)

    # -- placement bookkeeping ----------------------------------------------
    # insert_leaf picks its target in breadth-first order.  Rescanning the
    # whole tree per insert would make a batch of m joins cost O(n*m), so the
    # tree keeps two structures in step with mutations instead.  Both yield
    # exactly the node a fresh breadth-first scan would pick.

    def _bfs_rank(self, node_id: int) -> tuple[int, tuple[int, ...]]:
        """Sort key equal to breadth-first visit order.

        Breadth-first order is: shallower first, then by the child-index
        path from the root compared left to right.
        """
        path: list[int] = []
        node = self.nodes[node_id]
        while node.parent is not None:
            parent = self.nodes[node.parent]
            path.append(parent.children.index(node.node_id))
            node = parent
        path.reverse()
        return (len(path), tuple(path))

    def _slot_sync(self, node_id: int) -> None:
        """Re-check one node's open-slot status after its children changed."""
        node = self.nodes.get(node_id)
        if node is not None and not node.is_leaf and len(node.children) < self.arity:
            if node_id not in self._open_slots:
                self._open_slots.add(node_id)
                if self._slot_heap is not None:
                    rank = self._bfs_rank(node_id)
                    self._slot_keys[node_id] = rank
                    heapq.heappush(self._slot_heap, (rank, node_id))
        else:
            self._open_slots.discard(node_id)

    def _slot_drop(self, node_id: int) -> None:
        """Forget a node that is being deleted."""
        self._open_slots.discard(node_id)

    def _ranks_dirty(self) -> None:
        """Depths or sibling indexes changed: cached slot ranks are stale."""
        self._slot_heap = None
        self._slot_keys.clear()

    def _scan_dirty(self) -> None:
        """The tree changed where a resumed split scan may already have passed."""
        self._split_scan = None

    def _first_open_slot(self) -> Node | None:
        """The open slot a breadth-first scan would reach first, if any."""
        if not self._open_slots:
            return None
        if self._slot_heap is None:
            self._slot_keys = {i: self._bfs_rank(i) for i in self._open_slots}
            self._slot_heap = [(rank, i) for i, rank in self._slot_keys.items()]
            heapq.heapify(self._slot_heap)
        while self._slot_heap:
            rank, node_id = self._slot_heap[0]
            if node_id in self._open_slots and self._slot_keys.get(node_id) == rank:
                return self.nodes[node_id]
            heapq.heappop(self._slot_heap)  # filled, deleted, or re-ranked
        return None

    def _first_split_victim(self) -> Node:
        """The leaf a breadth-first scan would reach first.

        The scan queue survives between calls: a split consumes the popped
        leaf and pushes the replacement pair at the tail, which is exactly
        the queue state a fresh scan of the new tree would have at that
        point (the new internal node occupies the consumed position).  Any
        other mutation discards the queue via _scan_dirty.
        """
        if self._split_scan is None:
            self._split_scan = deque([self.root_id])
        queue = self._split_scan
        while queue:
            node = self.nodes[queue.popleft()]
            if node.is_leaf:
                return node
            queue.extend(node.children)
        raise TreeError("tree has no leaves")

    # -- construction ------------------------------------------------------

    def _new_node(self, **kwargs) -> Node:
        node = Node(node_id=self._next_id, **kwargs)
        self._next_id += 1
        self.nodes[node.node_id] = node
        if node.member is not None:
            self._member_leaf[node.member] = node.node_id
        return node

    def dump(self, key_of: Callable[[int], SymKey | None] | None = None) -> str:
        """Deterministic indented rendering for debugging and golden files."""
        lines: list[str] = []

        def render(node_id: int, indent: int) -> None:
            node = self.nodes[node_id]
            key = key_of(node_id) if key_of else node.key
            lines.append(
                "{}node {} code={} key={} member={}".format(
                    "  " * indent,
                    node.node_id,
                    node.code or "-",
                    key.fingerprint if key else "-",
                    node.member or "-",
                )
            )
            for child in node.children:
                render(child, indent + 1)

        if self.root_id is not None:
            render(self.root_id, 0)
        return "\n".join(lines)


def build_balanced(
    member_ids: Sequence[str],
    arity: int,
    rng: Random | None = None,
    root_code: str | None = None,
    coded: bool = False,
) -> KeyTree:
    """Balanced tree over the members, height ceil(log_arity n).

    With ``coded=True`` internal nodes receive position codes: the root gets
    ``root_code`` (or a fresh ``ROOT_CODE_LEN``-digit draw) and every other
    internal node a child code of its parent.
    """
    if not member_ids:
        raise TreeError("cannot build a tree with no members")
    if len(set(member_ids)) != len(member_ids):
        raise TreeError("duplicate member ids")
    tree = KeyTree(arity)

    def grow(ids: Sequence[str], parent: int | None) -> int:
        if len(ids) == 1:
            return tree._new_node(parent=parent, member=ids[0]).node_id
        node = tree._new_node(parent=parent)
        parts = _split_even(ids, arity)
        node.children = [grow(part, node.node_id) for part in parts]
        tree._slot_sync(node.node_id)
        return node.node_id

    tree.root_id = grow(list(member_ids), None)
    if coded:
        if rng is None and root_code is None:
            raise TreeError("coded build needs an rng or an explicit root code")
        assign_codes(tree, rng, root_code=root_code)
    return tree


def _split_even(ids: Sequence[str], parts: int) -> list[Sequence[str]]:
    count = min(parts, len(ids))
    base, extra = divmod(len(ids), count)
    out, start = [], 0
    for i in range(count):
        size = base + (1 if i < extra else 0)
        out.append(ids[start:start + size])
        start += size
    return out


def assign_codes(tree: KeyTree, rng: Random | None, root_code: str | None = None) -> None:
    """Give every internal node a code; the root draws or uses ``root_code``."""
    root = tree.root
    if root.is_leaf:
        return  # single-member tree: the leaf carries no code
    if root.code is None:
        if root_code is not None:
            root.code = _checked_code(root_code)
        else:
            assert rng is not None
            root.code = "".join(rng.choice(DIGITS) for _ in range(ROOT_CODE_LEN))
    assign_codes_below(tree, root.node_id, rng)


def assign_codes_below(tree: KeyTree, top_id: int, rng: Random | None) -> None:
    """Assign child codes to uncoded internal descendants of ``top_id``."""
    queue = deque([top_id])
    while queue:
        node = tree.nodes[queue.popleft()]
        for child_id in node.children:
            child = tree.nodes[child_id]
            if not child.is_leaf:
                if child.code is None:
                    assert rng is not None and node.code is not None
                    used = [
                        tree.nodes[s].code
                        for s in node.children
                        if tree.nodes[s].code is not None and s != child_id
                    ]
                    child.code = child_code(node.code, rng, used)  # type: ignore[arg-type]
                queue.append(child_id)


def _checked_code(code: str) -> str:
    if not code or not code.isdigit():
        raise TreeError(f"invalid node code {code!r}")
    return code


def attach_subtree(
    current: KeyTree,
    incoming: KeyTree,
    rng: Random,
    fresh_root_code: str | None = None,
) -> tuple[int, int]:
    """Mount ``incoming`` beside the current root under a fresh root.

    The new root's code is the current root's code shortened by one digit
    (everyone below can compute it locally).  When no digit can be dropped —
    the old root is a bare leaf, or its code is already a single digit — the
    new root starts a fresh code lineage: ``fresh_root_code`` if given, else
    a random ``ROOT_CODE_LEN``-digit draw.  The incoming subtree's top gets a
    sibling child code of the new root.  Node keys and codes of both old
    trees are untouched.  Returns (new root id, incoming top id).
    """
    if current.arity != incoming.arity:
        raise TreeError("arity mismatch between trees")
    old_root = current.root
    current._ranks_dirty()  # every existing node gets one level deeper
    current._scan_dirty()

    id_map: dict[int, int] = {}
    for node in incoming.walk():
        clone = current._new_node(key=node.key, code=node.code, member=node.member)
        id_map[node.node_id] = clone.node_id
    for node in incoming.walk():
        clone = current.nodes[id_map[node.node_id]]
        clone.parent = id_map[node.parent] if node.parent is not None else None
        clone.children = [id_map[c] for c in node.children]
        current._slot_sync(clone.node_id)
    incoming_top = current.nodes[id_map[incoming.root_id]]  # type: ignore[index]

    new_root = current._new_node()
    if old_root.code is not None and len(old_root.code) >= 2:
        new_root.code = parent_code(old_root.code)
    elif fresh_root_code is not None:
        new_root.code = _checked_code(fresh_root_code)
    else:
        new_root.code = "".join(rng.choice(DIGITS) for _ in range(ROOT_CODE_LEN))
    new_root.children = [old_root.node_id, incoming_top.node_id]
    old_root.parent = new_root.node_id
    incoming_top.parent = new_root.node_id
    current.root_id = new_root.node_id
    current._slot_sync(new_root.node_id)

    if not incoming_top.is_leaf:
        used = [old_root.code] if old_root.code is not None else []
        incoming_top.code = child_code(new_root.code, rng, used)
    return new_root.node_id, incoming_top.node_id


def remove_leaves(tree: KeyTree, member_ids: Sequence[str]) -> RemovalResult:
    """Delete leaver leaves; splice away parents left with a single child.

    A spliced parent's surviving child is promoted into its position (same
    index under the grandparent), keeping sibling order stable.  Returns the
    removed node ids and the (promoted, vacated) pairs.
    """
    unique = list(dict.fromkeys(member_ids))
    for member in unique:
        if not tree.has_member(member):
            raise TreeError(f"cannot remove unknown member {member!r}")
    if len(unique) >= tree.member_count:
        raise TreeError("cannot remove every member; the group may not empty")

    tree._scan_dirty()
    removed: list[int] = []
    promotions: list[tuple[int, int]] = []
    touched: list[int] = []
    for member in unique:
        leaf = tree.leaf_of(member)
        parent_id = leaf.parent
        if parent_id is not None:
            tree.nodes[parent_id].children.remove(leaf.node_id)
            tree._slot_sync(parent_id)
            touched.append(parent_id)
        del tree.nodes[leaf.node_id]
        del tree._member_leaf[member]
        removed.append(leaf.node_id)

    # process deepest first so cascades reach the root in one pass
    queue = sorted(set(touched), key=lambda i: (-tree.depth(i), i))
    seen = set(queue)
    index = 0
    while index < len(queue):
        node_id = queue[index]
        index += 1
        node = tree.nodes.get(node_id)
        if node is None:
            continue
        if len(node.children) == 0:
            parent_id = node.parent
            if parent_id is not None:
                tree.nodes[parent_id].children.remove(node_id)
                tree._slot_sync(parent_id)
            del tree.nodes[node_id]
            tree._slot_drop(node_id)
            removed.append(node_id)
            if parent_id is not None and parent_id not in seen:
                queue.append(parent_id)
                seen.add(parent_id)
        elif len(node.children) == 1:
            child = tree.nodes[node.children[0]]
            parent_id = node.parent
            child.parent = parent_id
            if parent_id is None:
                tree.root_id = child.node_id
            else:
                siblings = tree.nodes[parent_id].children
                siblings[siblings.index(node_id)] = child.node_id
            del tree.nodes[node_id]
            tree._slot_drop(node_id)
            tree._ranks_dirty()  # the promoted subtree moved up a level
            removed.append(node_id)
            promotions.append((child.node_id, node_id))
    return RemovalResult(tuple(removed), tuple(promotions))


def detach_leaf(tree: KeyTree, member: str) -> DetachResult:
    """Delete one leaf without splicing; empty ancestors are pruned.

    Internal nodes keep their position (and key) even when left with a
    single child, which matches trees that track fixed key slots.  Returns
    the removed ids and the surviving former-ancestor chain bottom-up.
    """
    if tree.member_count <= 1:
        raise TreeError("cannot remove the last member")
    leaf = tree.leaf_of(member)
    removed = [leaf.node_id]
    parent_id = leaf.parent
    tree.nodes[parent_id].children.remove(leaf.node_id)  # type: ignore[index]
    del tree.nodes[leaf.node_id]
    del tree._member_leaf[member]
    tree._scan_dirty()
    tree._slot_sync(parent_id)  # type: ignore[arg-type]
    while parent_id is not None:
        node = tree.nodes[parent_id]
        if node.children or node.parent is None:
            break
        tree.nodes[node.parent].children.remove(parent_id)
        del tree.nodes[parent_id]
        tree._slot_drop(parent_id)
        tree._slot_sync(node.parent)
        removed.append(parent_id)
        parent_id = node.parent
    chain = [parent_id] + tree.ancestors(parent_id) if parent_id is not None else []
    return DetachResult(tuple(removed), tuple(chain))


def insert_leaf(tree: KeyTree, member: str, fill_slots: bool) -> InsertResult:
    """Add a member at the shallowest spot.

    With ``fill_slots`` the shallowest internal node with a free child slot
    takes the new leaf directly.  Otherwise (or when the tree is full) the
    shallowest leaf is split: a new internal node takes its position and
    holds the old leaf and the new one.
    """
    if tree.has_member(member):
        raise TreeError(f"member {member!r} already present")
    root = tree.root
    if root.is_leaf:
        new_internal = tree._new_node()
        new_leaf = tree._new_node(parent=new_internal.node_id, member=member)
        new_internal.children = [root.node_id, new_leaf.node_id]
        root.parent = new_internal.node_id
        tree.root_id = new_internal.node_id
        tree._scan_dirty()
        tree._slot_sync(new_internal.node_id)
        return InsertResult(new_leaf.node_id, new_internal.node_id,
                            new_internal.node_id, root.member)

    if fill_slots:
        slot = tree._first_open_slot()
        if slot is not None:
            leaf = tree._new_node(parent=slot.node_id, member=member)
            slot.children.append(leaf.node_id)
            tree._slot_sync(slot.node_id)
            tree._scan_dirty()
            return InsertResult(leaf.node_id, slot.node_id, None, None)

    victim = tree._first_split_victim()
    parent = tree.nodes[victim.parent]  # type: ignore[index]
    new_internal = tree._new_node(parent=parent.node_id)
    new_leaf = tree._new_node(parent=new_internal.node_id, member=member)
    new_internal.children = [victim.node_id, new_leaf.node_id]
    parent.children[parent.children.index(victim.node_id)] = new_internal.node_id
    victim.parent = new_internal.node_id
    tree._split_scan.extend((victim.node_id, new_leaf.node_id))  # type: ignore[union-attr]
    tree._slot_sync(new_internal.node_id)
    return InsertResult(new_leaf.node_id, new_internal.node_id,
                        new_internal.node_id, victim.member)


def compute_cover(tree: KeyTree, leaver_ids: Sequence[str]) -> list[int]:
    """Roots of the maximal subtrees containing no leaver, in DFS order.

    Computed on the pre-removal tree: every remaining member sits under
    exactly one cover node and no leaver sits under any.
    """
    for member in leaver_ids:
        if not tree.has_member(member):
            raise TreeError(f"unknown member {member!r}")
    tainted: set[int] = set()
    for member in leaver_ids:
        leaf = tree.leaf_of(member)
        node_id: int | None = leaf.node_id
        while node_id is not None and node_id not in tainted:
            tainted.add(node_id)
            node_id = tree.nodes[node_id].parent
    if tree.root_id not in tainted:
        return [tree.root_id]  # type: ignore[list-item]

    cover: list[int] = []

    def visit(node_id: int) -> None:
        for child_id in tree.nodes[node_id].children:
            if child_id in tainted:
                visit(child_id)
            else:
                cover.append(child_id)

    visit(tree.root_id)  # type: ignore[arg-type]
    return cover
