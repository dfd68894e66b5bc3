"""Durable lock-free sets built on :class:`~flitsim.pvlib.PvMemory`.

The list is Harris's lock-free linked list with Michael's traversal.  Every
access is a p-instruction: node fields are initialized with private stores
before the node is published by a shared CAS, and everything else is shared.

Node layout: three data words ``key, value, next``.  ``next`` holds
``successor_address << 1 | mark``; a set mark logically deletes the node.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .pmem import FLAG_BIT, NULL, CapacityError, PersistentSnapshot
from .pvlib import PvMemory
from .sched import Inv, Resp

NODE_FIELDS = 3
OPS = ("insert", "delete", "contains")


class CorruptionError(RuntimeError):
    """A persistent snapshot does not decode to a well-formed structure."""


def _ptr(word: int) -> int:
    return word >> 1


def _marked(word: int) -> bool:
    return bool(word & 1)


@dataclass(frozen=True)
class RecoveredState:
    keys: frozenset[int]


class DurableList:
    """Sorted set of keys in ``[0, key_range)``.

    ``heads`` lists one head word per bucket; a plain list has one bucket.
    """

    buckets = 1

    def __init__(self, pv: PvMemory, key_range: int | None = None, buckets: int = 1):
        pv.require_flag_bit_free(False)
        self.pv = pv
        self.key_range = key_range
        self.buckets = buckets
        self.stride = pv.stride
        self.heads = [pv.alloc(1)[0] for _ in range(buckets)]
        self.node_words = NODE_FIELDS * self.stride
        # node bases handed out after this point are multiples of node_words
        self.node_base = -(-pv.mem.cursor // self.stride) * self.stride

    # -- layout helpers ---------------------------------------------------
    def _value(self, node: int) -> int:
        return node + self.stride

    def _next(self, node: int) -> int:
        return node + 2 * self.stride

    def head_for(self, key: int) -> int:
        return self.heads[key % self.buckets]

    def _alloc_node(self) -> int:
        try:
            fields = self.pv.alloc(NODE_FIELDS)
        except CapacityError as exc:
            raise CapacityError(f"allocator exhausted: {exc}") from None
        return fields[0]

    # -- operations --------------------------------------------------------
    def _find(self, pid, head, key):
        pv = self.pv
        while True:
            prev = head
            cur = _ptr((yield from pv.load(pid, prev)))
            while True:
                if cur == NULL:
                    return False, prev, NULL
                nxt = yield from pv.load(pid, self._next(cur))
                ckey = yield from pv.load(pid, cur)
                if (yield from pv.load(pid, prev)) != cur << 1:
                    break
                if not _marked(nxt):
                    if ckey >= key:
                        return ckey == key, prev, cur
                    prev = self._next(cur)
                else:
                    ok, _ = yield from pv.store(pid, prev, "cas", (cur << 1, nxt & ~1))
                    if not ok:
                        break
                cur = _ptr(nxt)

    def insert(self, pid: int, key: int):
        self._check_key(key)
        pv = self.pv
        pv.begin_op(pid)
        head = self.head_for(key)
        node = NULL
        while True:
            found, prev, cur = yield from self._find(pid, head, key)
            if found:
                result = False
                break
            if node == NULL:
                node = self._alloc_node()
                yield from pv.store(pid, node, "write", (key,), shared=False)
                yield from pv.store(pid, self._value(node), "write", (key,), shared=False)
            yield from pv.store(pid, self._next(node), "write", (cur << 1,), shared=False)
            ok, _ = yield from pv.store(pid, prev, "cas", (cur << 1, node << 1))
            if ok:
                result = True
                break
        yield from pv.complete_op(pid)
        return result

    def delete(self, pid: int, key: int):
        self._check_key(key)
        pv = self.pv
        pv.begin_op(pid)
        head = self.head_for(key)
        while True:
            found, prev, cur = yield from self._find(pid, head, key)
            if not found:
                result = False
                break
            nxt = yield from pv.load(pid, self._next(cur))
            if _marked(nxt):
                continue
            ok, _ = yield from pv.store(pid, self._next(cur), "cas", (nxt, nxt | 1))
            if not ok:
                continue
            ok, _ = yield from pv.store(pid, prev, "cas", (cur << 1, nxt))
            if not ok:
                yield from self._find(pid, head, key)
            result = True
            break
        yield from pv.complete_op(pid)
        return result

    def contains(self, pid: int, key: int):
        self._check_key(key)
        pv = self.pv
        pv.begin_op(pid)
        cur = _ptr((yield from pv.load(pid, self.head_for(key))))
        result = False
        while cur != NULL:
            ckey = yield from pv.load(pid, cur)
            nxt = yield from pv.load(pid, self._next(cur))
            if ckey >= key:
                result = ckey == key and not _marked(nxt)
                break
            cur = _ptr(nxt)
        yield from pv.complete_op(pid)
        return result

    def apply(self, pid: int, name: str, key: int):
        if name == "insert":
            return (yield from self.insert(pid, key))
        if name == "delete":
            return (yield from self.delete(pid, key))
        if name == "contains":
            return (yield from self.contains(pid, key))
        raise ValueError(f"unknown set operation {name!r}")

    def _check_key(self, key: int) -> None:
        if key < 0 or (self.key_range is not None and key >= self.key_range):
            raise ValueError(f"key {key} outside configured range")

    # -- recovery ----------------------------------------------------------
    def recover(self, snapshot: PersistentSnapshot) -> RecoveredState:
        """Keys of unmarked reachable nodes in ``snapshot``.

        Reads only the snapshot.  Raises :class:`CorruptionError` on a cycle,
        a link to something that is not a node, or out-of-order keys.
        """
        keys = set()
        for b, head in enumerate(self.heads):
            seen = set()
            last = -1
            word = snapshot.get(head) & ~FLAG_BIT
            while _ptr(word) != NULL:
                node = _ptr(word)
                if node in seen:
                    raise CorruptionError(f"cycle through node {node} in bucket {b}")
                seen.add(node)
                if node < self.node_base or (node - self.node_base) % self.node_words:
                    raise CorruptionError(f"dangling link to {node} in bucket {b}")
                key = snapshot.get(node) & ~FLAG_BIT
                nxt = snapshot.get(self._next(node)) & ~FLAG_BIT
                if key <= last:
                    raise CorruptionError(f"key {key} after {last} in bucket {b}")
                if self.key_range is not None and key >= self.key_range:
                    raise CorruptionError(f"key {key} outside range in bucket {b}")
                if key % self.buckets != b:
                    raise CorruptionError(f"key {key} in wrong bucket {b}")
                last = key
                if not _marked(nxt):
                    keys.add(key)
                word = nxt
        return RecoveredState(frozenset(keys))

    def volatile_keys(self) -> frozenset[int]:
        """Abstract state read directly from volatile memory (test helper)."""
        vol = self.pv.mem.volatile
        keys = set()
        for head in self.heads:
            word = vol.get(head, 0) & ~FLAG_BIT
            while _ptr(word):
                node = _ptr(word)
                nxt = vol.get(self._next(node), 0) & ~FLAG_BIT
                if not _marked(nxt):
                    keys.add(vol.get(node, 0) & ~FLAG_BIT)
                word = nxt
        return frozenset(keys)


class DurableHashTable(DurableList):
    """Fixed-size hash table; bucket ``key % buckets`` is an independent list."""

    def __init__(self, pv: PvMemory, buckets: int, key_range: int | None = None):
        if buckets < 1:
            raise ValueError("buckets must be >= 1")
        super().__init__(pv, key_range, buckets)


def parse_ds(text: str) -> int:
    """Parse ``list | ht:<buckets>``; returns the bucket count (list = 1)."""
    if text == "list":
        return 1
    if text.startswith("ht:"):
        try:
            n = int(text[3:])
        except ValueError:
            raise ValueError(f"bad bucket count in {text!r}") from None
        if n < 1:
            raise ValueError("buckets must be >= 1")
        return n
    raise ValueError(f"unknown data structure {text!r}")


def make_set(pv: PvMemory, ds: str, key_range: int | None = None) -> DurableList:
    buckets = parse_ds(ds)
    if ds == "list":
        return DurableList(pv, key_range)
    return DurableHashTable(pv, buckets, key_range)


def client(ds: DurableList, pid: int, ops: Iterable[tuple[str, int]]):
    """Program running ``ops`` in order, each wrapped in inv/resp markers."""
    for name, key in ops:
        yield Inv(name, key)
        r = yield from ds.apply(pid, name, key)
        yield Resp(name, r)
