"""Two coordinated radix trees over block pools: shared base rows and per-agent residual rows.

The base tree is keyed by token ids (optionally under a namespace, which the
unified baseline uses for per-adapter caches). The residual tree is a forest
with one root per agent. Each tree has its own LRU clock and evicts only its
own leaves.

Edges are stored as whole blocks: a node's edge of length L is backed by
ceil(L / capacity) block slots, all full except possibly the last, and a node
is only ever split at a block boundary. Children are keyed by the tokens of
their first block.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field

import numpy as np

from .kv_pool import BlockHandle, KVPools, NeedsEviction, PoolKind

# One handle per layer for the same run of tokens.
BlockSlot = tuple[BlockHandle, ...]


@dataclass
class SlotRef:
    slot: BlockSlot
    rows: int


@dataclass(eq=False)
class RadixNode:
    edge_tokens: tuple[int, ...] = ()
    slots: list[BlockSlot] = field(default_factory=list)
    children: dict[tuple[int, ...], "RadixNode"] = field(default_factory=dict)
    parent: "RadixNode | None" = None
    last_access: int = 0
    lock_count: int = 0
    order: int = 0

    def __repr__(self) -> str:
        head = list(self.edge_tokens[:6])
        more = "..." if len(self.edge_tokens) > 6 else ""
        return f"RadixNode({head}{more}, len={len(self.edge_tokens)}, lock={self.lock_count})"

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def block_refs(self) -> list[list[BlockHandle]]:
        """Handles per layer, in token order."""
        if not self.slots:
            return []
        return [list(layer) for layer in zip(*self.slots)]

    def slot_rows(self, capacity: int) -> list[int]:
        n = len(self.edge_tokens)
        return [min(capacity, n - i * capacity) for i in range(len(self.slots))]


@dataclass
class MatchResult:
    matched_len: int
    path: list[tuple[RadixNode, int]]  # (node, tokens of its edge used)
    slots: list[SlotRef]
    truncated: int = 0  # tokens that matched but were dropped to stay block aligned

    @property
    def last_node(self) -> RadixNode | None:
        return self.path[-1][0] if self.path else None


@dataclass
class EvictResult:
    freed: list[BlockHandle]
    evicted_nodes: int
    shortfall: int


def _common_prefix(a, b) -> int:
    n = min(len(a), len(b))
    i = 0
    while i < n and a[i] == b[i]:
        i += 1
    return i


class RadixTree:
    def __init__(self, kind: PoolKind, pools: KVPools, capacity: int, num_layers: int):
        self.kind = PoolKind(kind)
        self.pools = pools
        self.pool = pools[kind]
        self.capacity = capacity
        self.num_layers = num_layers
        self.roots: dict[str, RadixNode] = {}
        self.clock = 0
        self._order = itertools.count(1)
        self.evicted_nodes = 0
        self.evicted_blocks = 0

    def root(self, namespace: str, create: bool = False) -> RadixNode | None:
        node = self.roots.get(namespace)
        if node is None and create:
            node = self.roots[namespace] = RadixNode()
        return node

    # -- lookup ---------------------------------------------------------------

    def _child_for(self, node: RadixNode, tokens, pos: int) -> RadixNode | None:
        key = tuple(tokens[pos : pos + self.capacity])
        child = node.children.get(key)
        if child is not None:
            return child
        best = None
        for ck, c in node.children.items():
            if len(ck) < len(key) and tuple(tokens[pos : pos + len(ck)]) == ck:
                if best is None or len(ck) > len(best.edge_tokens[: self.capacity]):
                    best = c
        return best

    def _walk(self, namespace: str, tokens) -> MatchResult:
        node = self.roots.get(namespace)
        path: list[tuple[RadixNode, int]] = []
        slots: list[SlotRef] = []
        pos, truncated = 0, 0
        while node is not None and pos < len(tokens):
            child = self._child_for(node, tokens, pos)
            if child is None:
                break
            c = _common_prefix(child.edge_tokens, tokens[pos:])
            rows = child.slot_rows(self.capacity)
            if c == len(child.edge_tokens):
                path.append((child, c))
                slots.extend(SlotRef(s, r) for s, r in zip(child.slots, rows))
                pos += c
                node = child
                continue
            usable = (c // self.capacity) * self.capacity
            truncated = c - usable
            if usable:
                k = usable // self.capacity
                path.append((child, usable))
                slots.extend(SlotRef(s, r) for s, r in zip(child.slots[:k], rows[:k]))
                pos += usable
            break
        return MatchResult(matched_len=pos, path=path, slots=slots, truncated=truncated)

    def match_prefix(self, namespace: str, tokens) -> MatchResult:
        result = self._walk(namespace, list(tokens))
        self.clock += 1
        for node, _ in result.path:
            node.last_access = self.clock
        return result

    # -- mutation -------------------------------------------------------------

    def _split(self, node: RadixNode, at: int) -> RadixNode:
        """Cut ``node`` at block boundary ``at``; returns the new upper node."""
        assert at % self.capacity == 0 and 0 < at < len(node.edge_tokens)
        k = at // self.capacity
        top = RadixNode(
            edge_tokens=node.edge_tokens[:at],
            slots=node.slots[:k],
            parent=node.parent,
            last_access=node.last_access,
            lock_count=node.lock_count,
            order=node.order,
        )
        parent_key = node.edge_tokens[: self.capacity]
        node.parent.children[parent_key] = top
        node.edge_tokens = node.edge_tokens[at:]
        node.slots = node.slots[k:]
        node.parent = top
        top.children[node.edge_tokens[: self.capacity]] = node
        return top

    def _attach(self, parent: RadixNode, tokens: tuple[int, ...], slots: list[SlotRef]) -> RadixNode:
        """Hang a chain of new nodes off ``parent``; a partial slot always ends a node."""
        self.clock += 1
        node, pos, i = parent, 0, 0
        while i < len(slots):
            j = i
            while j < len(slots) and slots[j].rows == self.capacity:
                j += 1
            j = min(j + 1, len(slots))  # include the partial slot that closes the run
            length = sum(s.rows for s in slots[i:j])
            child = RadixNode(
                edge_tokens=tokens[pos : pos + length],
                slots=[s.slot for s in slots[i:j]],
                parent=node,
                last_access=self.clock,
                order=next(self._order),
            )
            for slot in child.slots:
                for handle in slot:
                    self.pool.retain(handle)
            node.children[child.edge_tokens[: self.capacity]] = child
            node, pos, i = child, pos + length, j
        return node

    def insert(self, namespace: str, tokens, slots: list[SlotRef], start: int = 0) -> tuple[RadixNode | None, int]:
        """Cache ``tokens``; ``slots`` hold the rows for tokens[start:].

        Whatever prefix the tree already holds is left alone and only the rest
        is linked in, so inserting an identical sequence twice is a no-op.
        Returns (deepest node on the path, tokens newly linked).
        """
        tokens = tuple(int(t) for t in tokens)
        covered = start + sum(s.rows for s in slots)
        if covered != len(tokens):
            raise ValueError(f"slots cover {covered - start} tokens, expected {len(tokens) - start}")
        root = self.root(namespace, create=True)
        found = self._walk(namespace, tokens)
        p = found.matched_len
        deepest = found.last_node or root
        if p >= len(tokens):
            return (deepest if deepest is not root else None), 0
        # The new suffix must begin exactly at one of the provided slot boundaries.
        offset, first = start, None
        for idx, s in enumerate(slots):
            if offset == p:
                first = idx
                break
            offset += s.rows
        if first is None:
            return (deepest if deepest is not root else None), 0
        if found.path:
            node, used = found.path[-1]
            if used < len(node.edge_tokens):
                node = self._split(node, used)
            parent = node
        else:
            parent = root
        leaf = self._attach(parent, tokens[p:], slots[first:])
        return leaf, len(tokens) - p

    def lock(self, node: RadixNode | None) -> None:
        while node is not None and node.parent is not None:
            node.lock_count += 1
            node = node.parent

    def unlock(self, node: RadixNode | None) -> None:
        while node is not None and node.parent is not None:
            if node.lock_count <= 0:
                raise RuntimeError(f"unlocking unlocked node {node!r}")
            node.lock_count -= 1
            node = node.parent

    def _remove(self, node: RadixNode) -> list[BlockHandle]:
        freed = []
        for slot in node.slots:
            for handle in slot:
                if self.pool.release(handle) == 0:
                    freed.append(handle)
        del node.parent.children[node.edge_tokens[: self.capacity]]
        node.slots = []
        return freed

    def evict(self, blocks_needed: int) -> EvictResult:
        """Drop least-recently-used unlocked leaves until enough blocks are free."""
        if blocks_needed < 1:
            raise ValueError("blocks_needed must be >= 1")
        heap = [(n.last_access, n.order, n) for n in self.iter_nodes() if n.is_leaf and n.lock_count == 0]
        heapq.heapify(heap)
        freed: list[BlockHandle] = []
        evicted = 0
        while len(freed) < blocks_needed and heap:
            _, _, node = heapq.heappop(heap)
            parent = node.parent
            freed.extend(self._remove(node))
            evicted += 1
            if parent.parent is not None and parent.is_leaf and parent.lock_count == 0:
                heapq.heappush(heap, (parent.last_access, parent.order, parent))
        self.evicted_nodes += evicted
        self.evicted_blocks += len(freed)
        return EvictResult(freed=freed, evicted_nodes=evicted, shortfall=max(0, blocks_needed - len(freed)))

    # -- inspection -----------------------------------------------------------

    def iter_nodes(self, namespace: str | None = None):
        roots = [self.roots[namespace]] if namespace is not None else [self.roots[k] for k in sorted(self.roots)]
        stack = [c for r in reversed(roots) for c in reversed(list(r.children.values()))]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(list(node.children.values())))

    def evictable_blocks(self) -> int:
        return sum(
            1
            for node in self.iter_nodes()
            if node.lock_count == 0
            for slot in node.slots
            for handle in slot
            if self.pool.refcount(handle) == 1
        )

    def held_handles(self) -> list[BlockHandle]:
        return [h for node in self.iter_nodes() for slot in node.slots for h in slot]

    def sequences(self, namespace: str = "") -> set[tuple[int, ...]]:
        """Every root-to-node token sequence (each node end is a cached sequence end)."""
        out = set()
        root = self.roots.get(namespace)
        if root is None:
            return out
        stack = [(c, ()) for c in root.children.values()]
        while stack:
            node, prefix = stack.pop()
            seq = prefix + node.edge_tokens
            out.add(seq)
            stack.extend((c, seq) for c in node.children.values())
        return out

    def dump(self) -> str:
        lines = [f"[{self.kind.value}] clock={self.clock}"]
        for ns in sorted(self.roots):
            lines.append(f"  ns={ns!r}")
            stack = [(c, 2) for c in reversed(self._sorted_children(self.roots[ns]))]
            while stack:
                node, depth = stack.pop()
                refs = [self.pool.refcount(h) if self.pool.is_live(h) else 0 for s in node.slots for h in s]
                lines.append(
                    f"{'  ' * depth}{list(node.edge_tokens)} slots={[list(s) for s in node.slots]} "
                    f"refs={refs} t={node.last_access} lock={node.lock_count}"
                )
                stack.extend((c, depth + 1) for c in reversed(self._sorted_children(node)))
        return "\n".join(lines)

    @staticmethod
    def _sorted_children(node: RadixNode) -> list[RadixNode]:
        return [node.children[k] for k in sorted(node.children)]


@dataclass
class PartialHitPlan:
    total: int
    recompute_base_range: list[tuple[int, int]]
    reuse_residual_range: list[tuple[int, int]]
    recompute_residual_range: list[tuple[int, int]]

    @staticmethod
    def _span(ranges) -> int:
        return sum(hi - lo for lo, hi in ranges)

    @property
    def base_recompute_tokens(self) -> int:
        return self._span(self.recompute_base_range)

    @property
    def residual_recompute_tokens(self) -> int:
        return self._span(self.recompute_residual_range)

    def validate(self) -> None:
        covered = sorted(self.reuse_residual_range + self.recompute_residual_range)
        pos = 0
        for lo, hi in covered:
            if lo != pos or hi < lo:
                raise AssertionError(f"residual ranges {covered} do not partition [0, {self.total})")
            pos = hi
        if pos != self.total:
            raise AssertionError(f"residual ranges {covered} do not partition [0, {self.total})")


@dataclass
class AgentCacheView:
    agent_id: str
    adapter_id: str
    tokens: list[int]
    base_namespace: str
    base_slots: list[SlotRef] = field(default_factory=list)
    residual_slots: list[SlotRef] = field(default_factory=list)
    matched_base_len: int = 0
    matched_residual_len: int = 0
    base_node: RadixNode | None = None
    residual_node: RadixNode | None = None
    reserved: dict[PoolKind, int] = field(default_factory=lambda: {PoolKind.BASE: 0, PoolKind.RESIDUAL: 0})
    committed: dict[PoolKind, int] = field(default_factory=lambda: {PoolKind.BASE: 0, PoolKind.RESIDUAL: 0})
    uses_residual: bool = True
    released: bool = False
    truncated_tokens: int = 0  # matched tokens dropped for block alignment, both trees

    def slots(self, kind: PoolKind) -> list[SlotRef]:
        return self.base_slots if kind is PoolKind.BASE else self.residual_slots

    def covered(self, kind: PoolKind) -> int:
        return sum(s.rows for s in self.slots(kind))

    def handles(self, kind: PoolKind) -> list[BlockHandle]:
        return [h for s in self.slots(kind) for h in s.slot]

    def slot_starts(self, kind: PoolKind) -> list[int]:
        starts, pos = [], 0
        for s in self.slots(kind):
            starts.append(pos)
            pos += s.rows
        return starts


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


class DualRadixTree:
    def __init__(self, pools: KVPools, capacity: int, num_layers: int):
        self.pools = pools
        self.capacity = capacity
        self.num_layers = num_layers
        self.base = RadixTree(PoolKind.BASE, pools, capacity, num_layers)
        self.residual = RadixTree(PoolKind.RESIDUAL, pools, capacity, num_layers)

    def tree(self, kind: PoolKind) -> RadixTree:
        return self.base if PoolKind(kind) is PoolKind.BASE else self.residual

    def _alloc_slots(self, kind: PoolKind, lo: int, hi: int, from_reservation: bool = False) -> list[SlotRef]:
        pool = self.pools[kind]
        return [
            SlotRef(tuple(pool.alloc(from_reservation) for _ in range(self.num_layers)), min(self.capacity, hi - start))
            for start in range(lo, hi, self.capacity)
        ]

    def slots_needed(self, lo: int, hi: int) -> int:
        return _ceil_div(max(0, hi - lo), self.capacity) * self.num_layers

    def fork_agent(
        self,
        agent_id: str,
        adapter_id: str,
        tokens,
        base_namespace: str = "",
        use_residual: bool = True,
        decode_tokens: int = 0,
        allow_evict: bool = False,
    ) -> tuple[AgentCacheView, PartialHitPlan]:
        """Map the shared base prefix into a new view and allocate the agent's own blocks.

        Step 1 matches the base tree and retains the matched base blocks. Step 2
        matches the agent's residual tree and allocates fresh blocks for every
        position not yet cached (base misses and residual misses). Room for
        ``decode_tokens`` generated rows is reserved in both pools.

        With ``allow_evict`` a short pool first evicts from its own tree while
        the matched path stays locked. If it is still short, everything is
        rolled back and NeedsEviction names the pool that must shrink.
        """
        tokens = [int(t) for t in tokens]
        if not tokens:
            raise ValueError("cannot fork on an empty context")
        s = len(tokens)
        bm = self.base.match_prefix(base_namespace, tokens)
        rm = self.residual.match_prefix(agent_id, tokens) if use_residual else None
        mb = bm.matched_len
        mr = rm.matched_len if rm else 0
        view = AgentCacheView(
            agent_id=agent_id,
            adapter_id=adapter_id,
            tokens=tokens,
            base_namespace=base_namespace,
            uses_residual=use_residual,
            matched_base_len=mb,
            matched_residual_len=mr,
            truncated_tokens=bm.truncated + (rm.truncated if rm else 0),
        )
        view.base_node = bm.last_node
        view.residual_node = rm.last_node if rm else None
        self.base.lock(view.base_node)
        self.residual.lock(view.residual_node)

        decode_slots = self.slots_needed(0, decode_tokens)
        need = {PoolKind.BASE: self.slots_needed(mb, s) + decode_slots}
        need[PoolKind.RESIDUAL] = self.slots_needed(mr, s) + decode_slots if use_residual else 0
        for kind, n in need.items():
            short = n - self.pools[kind].available
            if short > 0 and allow_evict:
                self.tree(kind).evict(short)
                short = n - self.pools[kind].available
            if short > 0:
                self.base.unlock(view.base_node)
                self.residual.unlock(view.residual_node)
                raise NeedsEviction(kind, short)

        # Nothing below can fail: capacity was checked for both pools.
        for ref in bm.slots:
            for h in ref.slot:
                self.pools.base.retain(h)
        view.base_slots = list(bm.slots) + self._alloc_slots(PoolKind.BASE, mb, s)
        view.committed[PoolKind.BASE] = mb
        if use_residual:
            for ref in rm.slots:
                for h in ref.slot:
                    self.pools.residual.retain(h)
            view.residual_slots = list(rm.slots) + self._alloc_slots(PoolKind.RESIDUAL, mr, s)
            view.committed[PoolKind.RESIDUAL] = mr
        for kind in (PoolKind.BASE, PoolKind.RESIDUAL):
            if kind is PoolKind.RESIDUAL and not use_residual:
                continue
            self.pools[kind].reserve(decode_slots)
            view.reserved[kind] = decode_slots

        # Merged layouts carry the adapter part inside the base rows.
        reused = mr if use_residual else mb
        plan = PartialHitPlan(
            total=s,
            recompute_base_range=[(mb, s)] if mb < s else [],
            reuse_residual_range=[(0, reused)] if reused else [],
            recompute_residual_range=[(reused, s)] if reused < s else [],
        )
        plan.validate()
        return view, plan

    def _tree_ns(self, view: AgentCacheView, kind: PoolKind) -> str:
        return view.base_namespace if kind is PoolKind.BASE else view.agent_id

    def commit(self, view: AgentCacheView, kind: PoolKind | None = None) -> int:
        """Link every written block of the view into its tree; returns tokens linked."""
        kinds = [kind] if kind is not None else [PoolKind.BASE, PoolKind.RESIDUAL]
        linked = 0
        for k in kinds:
            if k is PoolKind.RESIDUAL and not view.uses_residual:
                continue
            covered = view.covered(k)
            if covered <= view.committed[k]:
                continue
            tree = self.tree(k)
            node, n = tree.insert(self._tree_ns(view, k), view.tokens[:covered], view.slots(k), 0)
            linked += n
            tree.lock(node)
            old = view.base_node if k is PoolKind.BASE else view.residual_node
            tree.unlock(old)
            if k is PoolKind.BASE:
                view.base_node = node
            else:
                view.residual_node = node
            view.committed[k] = covered
        return linked

    def write_rows(self, view: AgentCacheView, kind: PoolKind, layer: int, lo: int, rows) -> None:
        """Write rows for positions [lo, lo + len(rows)) into the view's own blocks.

        ``rows`` may be an int to only advance fill levels (accounting runs).
        """
        count = rows if isinstance(rows, int) else rows.shape[0]
        pool = self.pools[kind]
        pos = 0
        written = 0
        for ref in self.slots(view, kind):
            end = pos + ref.rows
            if end > lo and pos < lo + count:
                handle = ref.slot[layer]
                a = max(lo, pos) - pos
                b = min(lo + count, end) - pos
                if pool.filled(handle) != a:
                    raise RuntimeError(f"{handle!r}: out-of-order write at row {a}")
                if isinstance(rows, int):
                    pool.advance(handle, b - a)
                else:
                    pool.write_rows(handle, rows[written : written + b - a])
                written += b - a
            pos = end
        if written != count:
            raise ValueError(f"view covers only {pos} positions, cannot write [{lo}, {lo + count})")

    @staticmethod
    def slots(view: AgentCacheView, kind: PoolKind) -> list[SlotRef]:
        return view.slots(kind)

    def read_rows(self, view: AgentCacheView, kind: PoolKind, layer: int, lo: int, hi: int) -> np.ndarray:
        pool = self.pools[kind]
        parts = []
        pos = 0
        for ref in view.slots(kind):
            end = pos + ref.rows
            if end > lo and pos < hi:
                parts.append(pool.read_rows(ref.slot[layer], max(lo, pos) - pos, min(hi, end) - pos))
            pos = end
        if not parts:
            return np.zeros((0, pool.width), dtype=np.float32)
        return np.concatenate(parts)

    def append_generated(self, view: AgentCacheView, new_tokens, base_rows=None, residual_rows=None) -> None:
        """Extend the view by decoded tokens.

        ``base_rows``/``residual_rows`` are per-layer row arrays (or None in
        accounting runs). Rows land in the view's private tail block; a new
        block is taken when the tail is full or already linked, and blocks are
        linked into their tree once they fill up. On pool exhaustion nothing
        changes and NeedsEviction is raised.
        """
        new_tokens = [int(t) for t in new_tokens]
        if not new_tokens:
            return
        count = len(new_tokens)
        kinds = [PoolKind.BASE] + ([PoolKind.RESIDUAL] if view.uses_residual else [])
        payload = {PoolKind.BASE: base_rows, PoolKind.RESIDUAL: residual_rows}
        start = len(view.tokens)
        for kind in kinds:
            rows = payload[kind]
            if rows is not None and (len(rows) != self.num_layers or any(len(r) != count for r in rows)):
                raise ValueError(f"{kind.value} rows do not cover {count} tokens in every layer")
            if view.covered(kind) != start:
                raise RuntimeError(f"{kind.value} rows cover {view.covered(kind)} of {start} tokens")

        grown: dict[PoolKind, tuple[int, list[SlotRef], int]] = {}
        try:
            for kind in kinds:
                grown[kind] = self._grow(view, kind, count)
        except NeedsEviction:
            for kind, (_, new, from_res) in grown.items():
                for ref in new:
                    for h in ref.slot:
                        self.pools[kind].release(h)
                self.pools[kind].reserve(from_res)
                view.reserved[kind] += from_res
            raise

        view.tokens.extend(new_tokens)
        for kind in kinds:
            tail_room, new, _ = grown[kind]
            slots = view.slots(kind)
            if tail_room:
                slots[-1].rows += tail_room
            slots.extend(new)
            for layer in range(self.num_layers):
                rows = payload[kind]
                data = count if rows is None else np.asarray(rows[layer], dtype=np.float32)
                self.write_rows(view, kind, layer, start, data)
            full_end = self._full_prefix(view, kind)
            if full_end > view.committed[kind]:
                self._commit_upto(view, kind, full_end)

    def _grow(self, view: AgentCacheView, kind: PoolKind, count: int) -> tuple[int, list[SlotRef], int]:
        """Room used in the private tail block, fresh slots for the rest, handles taken from the reservation."""
        slots = view.slots(kind)
        tail_room = 0
        if slots and view.covered(kind) > view.committed[kind]:
            tail_room = min(self.capacity - slots[-1].rows, count)
        rest = count - tail_room
        n_handles = _ceil_div(rest, self.capacity) * self.num_layers
        pool = self.pools[kind]
        from_res = min(n_handles, view.reserved[kind])
        if n_handles - from_res > pool.available:
            raise NeedsEviction(kind, n_handles - from_res - pool.available)
        handles = [pool.alloc(from_reservation=i < from_res) for i in range(n_handles)]
        view.reserved[kind] -= from_res
        new = []
        for i in range(0, n_handles, self.num_layers):
            new.append(SlotRef(tuple(handles[i : i + self.num_layers]), min(self.capacity, rest)))
            rest -= self.capacity
        return tail_room, new, from_res

    def _full_prefix(self, view: AgentCacheView, kind: PoolKind) -> int:
        """Covered length up to the end of the last full (or already linked) block."""
        pos, end = 0, 0
        for ref in view.slots(kind):
            pos += ref.rows
            if ref.rows == self.capacity or pos <= view.committed[kind]:
                end = pos
            else:
                break
        return end

    def _commit_upto(self, view: AgentCacheView, kind: PoolKind, end: int) -> None:
        tree = self.tree(kind)
        slots, acc = [], 0
        for ref in view.slots(kind):
            if acc >= end:
                break
            slots.append(ref)
            acc += ref.rows
        node, _ = tree.insert(self._tree_ns(view, kind), view.tokens[:end], slots, 0)
        tree.lock(node)
        old = view.base_node if kind is PoolKind.BASE else view.residual_node
        tree.unlock(old)
        if kind is PoolKind.BASE:
            view.base_node = node
        else:
            view.residual_node = node
        view.committed[kind] = end

    def release_view(self, view: AgentCacheView, commit: bool = True) -> None:
        """Link remaining rows into the trees, then drop the view's references and locks."""
        if view.released:
            raise RuntimeError(f"view of {view.agent_id} already released")
        if commit:
            self.commit(view)
        for kind in (PoolKind.BASE, PoolKind.RESIDUAL):
            pool = self.pools[kind]
            for h in view.handles(kind):
                pool.release(h)
            if view.reserved[kind]:
                pool.unreserve(view.reserved[kind])
                view.reserved[kind] = 0
        self.base.unlock(view.base_node)
        self.residual.unlock(view.residual_node)
        view.base_node = view.residual_node = None
        view.released = True

    def evict(self, kind: PoolKind, blocks_needed: int) -> EvictResult:
        return self.tree(kind).evict(blocks_needed)

    def dump(self) -> str:
        return self.base.dump() + "\n" + self.residual.dump()
