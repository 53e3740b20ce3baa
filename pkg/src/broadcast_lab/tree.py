"""Finite leaf-aligned rooted trees addressed by integer words.

The root is the empty word ``()``; the ``i``-th child of ``u`` is ``u + (i,)``
with ``i`` starting at 1.  Every leaf sits on the deepest layer, so the height
``h(u) = depth - len(u)`` is 0 exactly on the leaf set ``L``.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from functools import cached_property
from typing import Tuple

import numpy as np

from .errors import EmptySet, Extinct, HeightOutOfRange, NodeNotInTree, TooLarge
from .textio import dumps

Word = Tuple[int, ...]

MAX_NODES = 10**6
POISSON_CAP = 32


def word_key(w: Word):
    """Length-then-lex order key."""
    return (len(w), w)


def word_str(w: Word) -> str:
    return ".".join(str(i) for i in w)


def parse_word(s: str) -> Word:
    s = s.strip()
    return tuple(int(t) for t in s.split(".")) if s else ()


class RootedTree:
    """Immutable rooted tree; all leaves on layer ``depth``."""

    def __init__(self, children_counts: Mapping[Word, int], depth: int | None = None):
        counts = {tuple(k): int(v) for k, v in children_counts.items() if int(v) > 0}
        nodes: list[Word] = [()]
        frontier: list[Word] = [()]
        while frontier:
            nxt = []
            for u in frontier:
                for i in range(1, counts.get(u, 0) + 1):
                    nxt.append(u + (i,))
            nodes.extend(nxt)
            frontier = nxt
            if len(nodes) > MAX_NODES:
                raise TooLarge(f"tree exceeds {MAX_NODES} nodes")
        known = set(nodes)
        stray = [w for w in counts if w not in known]
        if stray:
            raise NodeNotInTree(f"children_counts mentions unreachable words {stray[:3]}")
        ell = max(len(w) for w in nodes)
        if depth is not None and depth != ell:
            raise ValueError(f"declared depth {depth} but deepest vertex is at {ell}")
        short = [w for w in nodes if counts.get(w, 0) == 0 and len(w) != ell]
        if short:
            raise ValueError(f"leaf {word_str(short[0]) or '<root>'} is not on the last layer")
        self._counts = {w: counts.get(w, 0) for w in nodes}
        self.depth = ell
        self.nodes: tuple[Word, ...] = tuple(sorted(nodes, key=word_key))
        self.index = {w: i for i, w in enumerate(self.nodes)}

    # -- basic structure ------------------------------------------------
    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, u) -> bool:
        return tuple(u) in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, RootedTree) and self._counts == other._counts

    def __hash__(self) -> int:
        return hash(self.nodes)

    def __repr__(self) -> str:
        return f"RootedTree(depth={self.depth}, nodes={len(self)}, leaves={len(self.leaves)})"

    def check(self, u) -> Word:
        u = tuple(u)
        if u not in self.index:
            raise NodeNotInTree(f"{word_str(u) or '<root>'} is not a vertex")
        return u

    root: Word = ()

    def parent(self, u: Word) -> Word:
        u = self.check(u)
        if not u:
            raise NodeNotInTree("the root has no parent")
        return u[:-1]

    def children(self, u: Word) -> list[Word]:
        u = self.check(u)
        return [u + (i,) for i in range(1, self._counts[u] + 1)]

    def n_children(self, u: Word) -> int:
        return self._counts[u]

    def height(self, u: Word) -> int:
        return self.depth - len(self.check(u))

    def ancestor(self, u: Word, k: int) -> Word:
        """``p^k(u)``."""
        u = self.check(u)
        if k > len(u):
            raise HeightOutOfRange(f"{word_str(u)} has no ancestor {k} levels up")
        return u[: len(u) - k]

    @staticmethod
    def is_below(v: Word, u: Word) -> bool:
        """``v <= u``: v is u or a descendant of u."""
        return len(v) >= len(u) and v[: len(u)] == u

    @cached_property
    def leaves(self) -> tuple[Word, ...]:
        return tuple(w for w in self.nodes if len(w) == self.depth)

    def layer(self, k: int) -> list[Word]:
        """Vertices ``k`` steps below the root."""
        return [w for w in self.nodes if len(w) == k]

    def descendants_at_height(self, u: Word, k: int) -> list[Word]:
        """``D_k(u)``: vertices below-or-equal u with height k."""
        u = self.check(u)
        if not 0 <= k <= self.height(u):
            raise HeightOutOfRange(f"k={k} outside [0, {self.height(u)}]")
        target = self.depth - k
        out = [u]
        while len(out[0]) < target:
            out = [c for w in out for c in self.children(w)]
        return out

    def subtree(self, u: Word) -> list[Word]:
        u = self.check(u)
        return [w for w in self.nodes if self.is_below(w, u)]

    def leaves_below(self, u: Word) -> list[Word]:
        return self.descendants_at_height(u, 0)

    @cached_property
    def layer_sizes(self) -> list[int]:
        sizes = [0] * (self.depth + 1)
        for w in self.nodes:
            sizes[len(w)] += 1
        return sizes

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        cc = {word_str(w): c for w, c in sorted(self._counts.items(), key=lambda x: word_key(x[0])) if c > 0}
        return {"depth": self.depth, "children_counts": cc}

    def to_json(self) -> str:
        return dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "RootedTree":
        cc = {parse_word(k): int(v) for k, v in obj["children_counts"].items()}
        return cls(cc, depth=int(obj["depth"]))


def make_dary(d: int, depth: int) -> RootedTree:
    """Complete d-ary tree with ``d**depth`` leaves."""
    if d < 1 or depth < 0:
        raise ValueError("need d >= 1 and depth >= 0")
    n = depth + 1 if d == 1 else (d ** (depth + 1) - 1) // (d - 1)
    if n > MAX_NODES:
        raise TooLarge(f"make_dary({d},{depth}) has {n} nodes > {MAX_NODES}")
    counts: dict[Word, int] = {}
    layer: list[Word] = [()]
    for _ in range(depth):
        nxt = []
        for u in layer:
            counts[u] = d
            nxt.extend(u + (i,) for i in range(1, d + 1))
        layer = nxt
    return RootedTree(counts, depth)


def sample_galton_watson(mean_degree: float, depth: int, seed: int,
                         max_nodes: int = MAX_NODES, cap: int = POISSON_CAP) -> RootedTree:
    """Poisson(mean_degree) offspring (truncated at ``cap``), pruned to be leaf-aligned."""
    if mean_degree < 0:
        raise ValueError("mean_degree must be non-negative")
    rng = np.random.default_rng(seed)
    counts: dict[Word, int] = {}
    layers: list[list[Word]] = [[()]]
    total = 1
    for _ in range(depth):
        nxt = []
        for u in layers[-1]:
            c = min(int(rng.poisson(mean_degree)), cap)
            counts[u] = c
            nxt.extend(u + (i,) for i in range(1, c + 1))
        total += len(nxt)
        if total > max_nodes:
            raise TooLarge(f"Galton-Watson sample exceeds {max_nodes} nodes")
        layers.append(nxt)
    # keep only vertices with a descendant on the last layer
    alive = set(layers[-1])
    if not alive:
        raise Extinct(f"no vertex survives to depth {depth}")
    for lay in reversed(layers[:-1]):
        for u in lay:
            if any(u + (i,) in alive for i in range(1, counts.get(u, 0) + 1)):
                alive.add(u)
    # relabel surviving children consecutively, preserving order
    new_counts: dict[Word, int] = {}
    rename: dict[Word, Word] = {(): ()}
    for lay in layers[:-1]:
        for u in lay:
            if u not in alive:
                continue
            kept = [u + (i,) for i in range(1, counts.get(u, 0) + 1) if u + (i,) in alive]
            nu = rename[u]
            new_counts[nu] = len(kept)
            for j, c in enumerate(kept, start=1):
                rename[c] = nu + (j,)
    return RootedTree(new_counts, depth)


def nearest_common_ancestor(S: Iterable[Word]) -> Word:
    """Longest common prefix of the words in S."""
    words = [tuple(w) for w in S]
    if not words:
        raise EmptySet("nearest_common_ancestor of an empty set")
    first = min(words, key=len)
    n = len(first)
    for w in words:
        m = 0
        while m < n and w[m] == first[m]:
            m += 1
        n = m
    return first[:n]


def check_domination(tree: RootedTree, d: float) -> float:
    """Smallest R with ``|L_k(u)| <= R d^k`` for every vertex u and k >= 0."""
    if d < 1:
        raise ValueError("d must be >= 1")
    # sizes[u][k] = number of descendants k layers below u, computed bottom-up
    sizes: dict[Word, list[int]] = {}
    best = 1.0
    for u in reversed(tree.nodes):
        row = [1]
        for c in tree.children(u):
            cr = sizes[c]
            for k, s in enumerate(cr, start=1):
                if k < len(row):
                    row[k] += s
                else:
                    row.append(s)
        sizes[u] = row
        for k, s in enumerate(row):
            best = max(best, s / d ** k)
    return best
