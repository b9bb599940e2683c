"""Prefix-trie KV reuse for prefill and norm-guided per-head KV pruning for decode.

The trie stores token-id segments in canonical radix form: no node has two
children whose labels start with the same token, and the concatenated labels
along any root-to-leaf path equal exactly one inserted prompt. A node's KV is
"cached" once the segment has actually been prefilled; reuse estimates count
only the contiguous cached prefix from the root. Eviction offloads least
recently used zero-reference nodes; an evicted segment is simply recomputed
at full prefill cost if needed again.

Head pruning keeps a rolling window of per-head attention-output norms,
reallocates per-request KV slots proportionally to the window means, and
releases a head's oldest positions beyond its allocation whenever the head
goes stale or its current norm falls below the threshold.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .workload import Request


class CacheContractError(ValueError):
    pass


@dataclass
class TrieNode:
    node_id: int
    label: list[int]
    parent: "TrieNode | None" = None
    children: dict[int, "TrieNode"] = field(default_factory=dict)
    cached: bool = False
    kv_mb: float = 0.0
    last_used: float = 0.0
    ref_count: int = 0
    depth: int = 0

    def path_nodes(self) -> list["TrieNode"]:
        nodes: list[TrieNode] = []
        node: TrieNode | None = self
        while node is not None and node.parent is not None:
            nodes.append(node)
            node = node.parent
        nodes.reverse()
        return nodes


@dataclass
class InsertResult:
    shared_len: int        # longest cached prefix reusable by this prompt
    matched_len: int       # longest structural match, cached or not
    leaf: TrieNode


@dataclass
class OffloadResult:
    evicted: list[TrieNode]
    freed_mb: float
    satisfied: bool


class PrefixTrie:
    def __init__(self, kv_mb_per_token: float):
        self.kv_mb_per_token = kv_mb_per_token
        self.root = TrieNode(node_id=0, label=[])
        self._ids = itertools.count(1)
        self.residency_mb = 0.0

    def _new_node(self, label: list[int], parent: TrieNode) -> TrieNode:
        node = TrieNode(node_id=next(self._ids), label=label, parent=parent, depth=parent.depth + 1)
        parent.children[label[0]] = node
        return node

    def _split(self, node: TrieNode, at: int) -> TrieNode:
        """Split ``node`` so a new head holds label[:at]; returns the head.

        ``node`` itself becomes the tail, so leaf references held by earlier
        inserts stay valid. A cached segment stays cached on both halves: the
        KV for a prefix segment covers every sub-segment of it.
        """
        parent = node.parent
        assert parent is not None
        head = TrieNode(
            node_id=next(self._ids),
            label=node.label[:at],
            parent=parent,
            cached=node.cached,
            kv_mb=at * self.kv_mb_per_token if node.cached else 0.0,
            last_used=node.last_used,
            ref_count=node.ref_count,
            depth=node.depth,
        )
        parent.children[head.label[0]] = head
        node.label = node.label[at:]
        node.parent = head
        if node.cached:
            node.kv_mb = len(node.label) * self.kv_mb_per_token
        head.children = {node.label[0]: node}
        _renumber_depths(head)
        return head

    def insert(self, prompt_tokens: list[int], t: float) -> InsertResult:
        """Insert a prompt, splitting nodes as needed; bumps ref counts on the path.

        Returns both the cached shared length (what prefill can actually
        reuse) and the structural match length against all earlier prompts.
        The two agree whenever every earlier prompt has been executed and
        nothing was evicted.
        """
        if not prompt_tokens:
            raise CacheContractError("insert requires a non-empty prompt")
        node = self.root
        idx = 0
        shared_cached = 0
        cached_run = True
        matched = -1
        n = len(prompt_tokens)
        while idx < n:
            child = node.children.get(prompt_tokens[idx])
            if child is None:
                matched = idx
                node = self._new_node(prompt_tokens[idx:], node)
                idx = n
                break
            label = child.label
            limit = min(len(label), n - idx)
            match = 0
            while match < limit and label[match] == prompt_tokens[idx + match]:
                match += 1
            if match < len(label):
                # the prompt diverges (or ends) inside this label
                head = self._split(child, match)
                idx += match
                if cached_run and head.cached:
                    shared_cached += match
                else:
                    cached_run = False
                matched = idx
                if idx < n:
                    node = self._new_node(prompt_tokens[idx:], head)
                    idx = n
                else:
                    node = head
                break
            idx += match
            if cached_run and child.cached:
                shared_cached += match
            else:
                cached_run = False
            node = child
        if matched < 0:
            matched = n  # the whole prompt lay along existing nodes
        leaf = node
        for path_node in leaf.path_nodes():
            path_node.ref_count += 1
            path_node.last_used = max(path_node.last_used, t)
        return InsertResult(shared_len=shared_cached, matched_len=matched, leaf=leaf)

    def cached_prefix_len(self, prompt_tokens: list[int]) -> int:
        """Length of the contiguous cached prefix reusable by this prompt."""
        node = self.root
        idx = 0
        shared = 0
        n = len(prompt_tokens)
        while idx < n:
            child = node.children.get(prompt_tokens[idx])
            if child is None or not child.cached:
                break
            label = child.label
            limit = min(len(label), n - idx)
            match = 0
            while match < limit and label[match] == prompt_tokens[idx + match]:
                match += 1
            shared += match
            idx += match
            if match < len(label):
                break
            node = child
        return shared

    def mark_executed(self, leaf: TrieNode, t: float) -> float:
        """Flag the leaf's whole path as cached after a prefill; returns new MB."""
        added = 0.0
        for node in leaf.path_nodes():
            node.last_used = max(node.last_used, t)
            if not node.cached:
                node.cached = True
                node.kv_mb = len(node.label) * self.kv_mb_per_token
                added += node.kv_mb
        self.residency_mb += added
        return added

    def release(self, leaf: TrieNode) -> None:
        """Drop one live reference along the leaf's path (request retired)."""
        for node in leaf.path_nodes():
            if node.ref_count <= 0:
                raise CacheContractError(f"release underflow at node {node.node_id}")
            node.ref_count -= 1

    def touch(self, leaf: TrieNode, t: float) -> None:
        for node in leaf.path_nodes():
            node.last_used = max(node.last_used, t)

    def _iter_nodes(self) -> Iterable[TrieNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node is not self.root:
                yield node
            stack.extend(node.children.values())

    def lru_offload(self, bytes_needed: float, t: float) -> OffloadResult:
        """Evict zero-reference cached nodes, least recently used first.

        Ties on last_used evict deeper nodes first so ancestors are never
        stranded uncached beneath cached descendants by a tie. Never touches
        a node with live references.
        """
        if bytes_needed <= 0:
            raise CacheContractError("bytes_needed must be > 0")
        candidates = [n for n in self._iter_nodes() if n.cached and n.ref_count == 0]
        candidates.sort(key=lambda n: (n.last_used, -n.depth, n.node_id))
        evicted: list[TrieNode] = []
        freed = 0.0
        for node in candidates:
            if freed >= bytes_needed:
                break
            node.cached = False
            freed += node.kv_mb
            self.residency_mb -= node.kv_mb
            node.kv_mb = 0.0
            evicted.append(node)
        return OffloadResult(evicted=evicted, freed_mb=freed, satisfied=freed >= bytes_needed)

    def node_count(self) -> int:
        return sum(1 for _ in self._iter_nodes())


def _renumber_depths(node: TrieNode) -> None:
    stack = [node]
    while stack:
        current = stack.pop()
        for child in current.children.values():
            child.depth = current.depth + 1
            stack.append(child)


def dfs_order(trie: PrefixTrie, pending: Sequence[tuple[Request, TrieNode]]) -> list[Request]:
    """Order pending prefills depth-first so prefix-sharing requests are adjacent.

    Children are visited in ascending first-token order; multiple requests on
    one leaf (identical prompts) stay together in id order.
    """
    by_leaf: dict[int, list[Request]] = {}
    for req, leaf in pending:
        by_leaf.setdefault(leaf.node_id, []).append(req)
    for reqs in by_leaf.values():
        reqs.sort(key=lambda r: r.id)
    ordered: list[Request] = []
    stack = [trie.root]
    while stack:
        node = stack.pop()
        ordered.extend(by_leaf.get(node.node_id, ()))
        for tok in sorted(node.children, reverse=True):
            stack.append(node.children[tok])
    if len(ordered) != len(pending):
        raise CacheContractError("pending prefills must be attached to trie leaves")
    return ordered


class HeadStats:
    """Rolling per-head attention-output norm statistics for one decode stream."""

    def __init__(self, num_heads: int, window: int, tau: float | None = None):
        if num_heads < 1 or window < 1:
            raise CacheContractError("num_heads and window must be >= 1")
        self.num_heads = num_heads
        self.window = window
        self.tau = tau  # resolved to 0.1 * mean initial norm on first update if unset
        self._windows: list[deque[float]] = [deque(maxlen=window) for _ in range(num_heads)]
        self._sums = [0.0 for _ in range(num_heads)]
        self.current = [0.0 for _ in range(num_heads)]
        self.last_used = [0.0 for _ in range(num_heads)]
        self.steps = 0

    def update(self, step_norms: Sequence[float], t: float) -> None:
        if len(step_norms) != self.num_heads:
            raise CacheContractError(
                f"expected {self.num_heads} per-head norms, got {len(step_norms)}"
            )
        if any(x < 0 for x in step_norms):
            raise CacheContractError("norms must be >= 0")
        if self.tau is None:
            self.tau = 0.1 * (sum(step_norms) / self.num_heads)
        for h, norm in enumerate(step_norms):
            win = self._windows[h]
            if len(win) == win.maxlen:
                self._sums[h] -= win[0]
            win.append(norm)
            self._sums[h] += norm
            self.current[h] = norm
            if norm >= self.tau:
                self.last_used[h] = t
        self.steps += 1

    def means(self) -> list[float]:
        return [
            (self._sums[h] / len(self._windows[h])) if self._windows[h] else 0.0
            for h in range(self.num_heads)
        ]


def allocate_capacity(stats: HeadStats | Sequence[float], c_total: int) -> list[int]:
    """Per-head KV slot allocation: floors of weight * total, remainder greedily.

    Leftover slots go to heads in descending weight (ties to the lower head
    index). Every head ends with at least one slot; when all means are zero
    the split is uniform.
    """
    means = stats.means() if isinstance(stats, HeadStats) else list(stats)
    n = len(means)
    if n == 0:
        raise CacheContractError("allocate_capacity requires at least one head")
    if c_total < n:
        raise CacheContractError(f"c_total={c_total} must be >= number of heads ({n})")
    total = sum(means)
    if total <= 0.0:
        base = c_total // n
        caps = [base] * n
        for h in range(c_total - base * n):
            caps[h] += 1
        return caps
    weights = [m / total for m in means]
    floors = [int(w * c_total) for w in weights]
    caps = list(floors)
    leftover = c_total - sum(caps)
    order = sorted(range(n), key=lambda h: (-weights[h], h))
    for i in range(leftover):
        caps[order[i % n]] += 1
    # no head may end at zero slots; steal from holders of remainder slots first
    for h in range(n):
        if caps[h] == 0:
            donors = [j for j in range(n) if caps[j] >= 2]
            donors.sort(key=lambda j: (-(caps[j] - floors[j]), -caps[j], j))
            caps[donors[0]] -= 1
            caps[h] += 1
    return caps


def prune_decision(t: float, head: int, stats: HeadStats, window: float, tau: float) -> bool:
    """True when the head went stale (> window since last strong norm) or its
    current norm is strictly below the threshold."""
    if window < 1 or tau < 0:
        raise CacheContractError("prune window must be >= 1 and tau >= 0")
    if not (0 <= head < stats.num_heads):
        raise CacheContractError(f"head {head} out of range")
    return (t - stats.last_used[head] > window) or (stats.current[head] < tau)
