"""Partition machinery for chains with sparse rows.

Given the row supports ``S_i = supp(row_i(M))`` we build the grid of
partitions ``P[r, s]`` (``0 <= s <= r``), the word set indexing its parts, and
the basis ``xi_w = 1_{P_w} - pi(P_w)`` in which ``xi_w(X_u)`` is a function of
the ancestor ``r(w)`` levels above ``u``.

Partial order: ``P <= Q`` means ``Q`` is finer than or equal to ``P``.
"""

from __future__ import annotations

import math
from collections.abc import Iterable
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np
from networkx.utils import UnionFind

from .errors import (EmptyInputSet, MeasurabilityViolation, NonTermination,
                     NotCompatible, NotIrreducible)
from .markov import as_array, is_irreducible, stationary_distribution
from .tree import word_str

Part = FrozenSet[int]
Word = Tuple[int, ...]


@dataclass(frozen=True)
class Partition:
    """Set partition of ``{0..q-1}``; parts kept sorted by minimal element."""

    parts: Tuple[Part, ...]

    def __post_init__(self) -> None:
        ps = tuple(sorted((frozenset(p) for p in self.parts), key=min))
        object.__setattr__(self, "parts", ps)
        seen: set[int] = set()
        for p in ps:
            if not p:
                raise ValueError("empty part")
            if seen & p:
                raise ValueError("parts overlap")
            seen |= p
        if seen != set(range(len(seen))):
            raise ValueError("parts do not cover 0..q-1")

    @classmethod
    def of(cls, parts: Iterable[Iterable[int]]) -> "Partition":
        return cls(tuple(frozenset(p) for p in parts))

    @classmethod
    def discrete(cls, q: int) -> "Partition":
        return cls(tuple(frozenset([i]) for i in range(q)))

    @classmethod
    def trivial(cls, q: int) -> "Partition":
        return cls((frozenset(range(q)),))

    @property
    def q(self) -> int:
        return sum(len(p) for p in self.parts)

    def __len__(self) -> int:
        return len(self.parts)

    def __iter__(self):
        return iter(self.parts)

    def is_trivial(self) -> bool:
        return len(self.parts) == 1

    def block_of(self, i: int) -> Part:
        for p in self.parts:
            if i in p:
                return p
        raise KeyError(i)

    def __le__(self, other: "Partition") -> bool:
        """``self <= other``: ``other`` refines ``self``."""
        return all(any(p <= b for b in self.parts) for p in other.parts)

    def __ge__(self, other: "Partition") -> bool:
        return other <= self

    def indicator_matrix(self) -> np.ndarray:
        """Rows are indicator vectors of the parts."""
        out = np.zeros((len(self.parts), self.q))
        for k, p in enumerate(self.parts):
            out[k, sorted(p)] = 1.0
        return out

    def measures(self, f: np.ndarray, tol: float = 0.0) -> bool:
        """True if ``f`` is constant on every part."""
        f = np.asarray(f)
        return all(np.ptp(f[sorted(p)]) <= tol for p in self.parts)

    def to_list(self) -> list[list[int]]:
        return [sorted(p) for p in self.parts]


def row_supports(M) -> list[Part]:
    """``S_i = {j : M[i, j] > 0}``, by exact comparison with zero."""
    a = as_array(M)
    return [frozenset(np.flatnonzero(a[i] > 0).tolist()) for i in range(a.shape[0])]


def constrained_partition(collection: Iterable[Iterable[int]], q: int) -> Partition:
    """Finest partition of ``[q]`` in which every given subset lies inside one part."""
    uf = UnionFind(range(q))
    for s in collection:
        s = list(s)
        if not s:
            raise EmptyInputSet("constraint subsets must be non-empty")
        uf.union(*s)
    return Partition(tuple(frozenset(g) for g in uf.to_sets()))


def p_sc(M, Q: Partition) -> Partition:
    """Finest partition compatible with both ``Q`` and every row support."""
    return constrained_partition(list(Q.parts) + row_supports(M), Q.q)


def _forward_parts(M, P: Partition) -> Dict[Part, Part]:
    a = as_array(M)
    supports = row_supports(a)
    image: Dict[Part, Part] = {}
    for part in P.parts:
        for i, s in enumerate(supports):
            if s & part and not s <= part:
                raise NotCompatible(f"row support of state {i} straddles part {sorted(part)}")
        qk = frozenset(i for i, s in enumerate(supports) if s <= part)
        if not qk:
            raise NotIrreducible(f"no state moves into part {sorted(part)}")
        ind = np.zeros(a.shape[0])
        ind[sorted(part)] = 1.0
        target = np.zeros(a.shape[0])
        target[sorted(qk)] = 1.0
        if np.max(np.abs(a @ ind - target)) > 1e-12:
            raise NotCompatible("M 1_P is not an indicator")  # pragma: no cover - guarded above
        image[part] = qk
    return image


def forward_partition(M, P: Partition) -> Partition:
    """Image partition ``M P``: part ``P_k`` maps to ``{i : S_i subset of P_k}``."""
    return Partition(tuple(_forward_parts(M, P).values()))


@dataclass
class PartitionChain:
    """Grid ``P[(r, s)]`` for ``0 <= s <= r <= r0 + 1``."""

    q: int
    grid: Dict[Tuple[int, int], Partition]
    r0: int
    #: partition of the last column's level 0; trivial for irreducible aperiodic chains
    limit: Partition
    reducible: bool = False

    def __getitem__(self, key: Tuple[int, int]) -> Partition:
        return self.grid[key]

    def column0(self) -> list[Partition]:
        return [self.grid[(r, 0)] for r in range(self.r0 + 1)]

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "r0": self.r0,
            "grid": [{"r": r, "s": s, "parts": self.grid[(r, s)].to_list()} for (r, s) in sorted(self.grid)],
        }


def build_partition_chain(M, allow_reducible: bool = False) -> PartitionChain:
    """Construct the partition grid column by column.

    Column ``r`` starts with ``P[r, r-1] = P_SC(P[r-1, r-1])``, sets
    ``P[r, r] = M P[r, r-1]`` and fills ``s = r-2 .. 0`` by pulling back through
    the bijection ``P -> M P`` between partitions below ``P[1,0]`` and ``P[1,1]``.

    By default the construction stops at the first ``r0`` with ``P[r0, 0]``
    trivial and raises NonTermination past ``4q`` columns.  With
    ``allow_reducible`` the grid is run to the cap and ``r0`` is the first
    column whose level-0 partition equals the final one (which may be
    non-trivial for chains with several closed classes).
    """
    a = as_array(M)
    q = a.shape[0]
    cap = 4 * q
    if not allow_reducible and not is_irreducible(a):
        raise NotIrreducible("partition chain needs an irreducible chain")
    grid: Dict[Tuple[int, int], Partition] = {(0, 0): Partition.discrete(q)}
    base = p_sc(a, grid[(0, 0)])
    base_image = _forward_parts(a, base)  # P[1,0] part -> P[1,1] part

    def pull_back(Q: Partition) -> Partition:
        parts = []
        for qpart in Q.parts:
            parts.append(frozenset().union(*(p for p, img in base_image.items() if img <= qpart)))
        return Partition(tuple(parts))

    def add_column(r: int) -> None:
        grid[(r, r - 1)] = p_sc(a, grid[(r - 1, r - 1)])
        grid[(r, r)] = forward_partition(a, grid[(r, r - 1)])
        for s in range(r - 2, -1, -1):
            grid[(r, s)] = pull_back(grid[(r, s + 1)])

    r = 0
    if allow_reducible:
        while r < cap:
            r += 1
            add_column(r)
        limit = grid[(cap, 0)]
        r0 = min(t for t in range(cap + 1) if grid[(t, 0)] == limit)
        for key in [k for k in grid if k[0] > r0 + 1]:
            del grid[key]
        return PartitionChain(q, grid, r0, limit, reducible=not limit.is_trivial())
    while not grid[(r, 0)].is_trivial():
        r += 1
        if r > cap:
            raise NonTermination(f"P[r,0] still non-trivial after {cap} columns")
        add_column(r)
    add_column(r + 1)
    return PartitionChain(q, grid, r, grid[(r, 0)])


@dataclass
class WordSet:
    """Words indexing the pairs ``(P, s)``; ``W`` are those ending in a positive integer."""

    all_words: Dict[Word, Tuple[Part, int]]   # word -> (part, level s)
    W: List[Word]
    r0: int
    top: FrozenSet[Word]                      # length-1 words (parts of the limit partition)

    def part_of(self, w: Word) -> Part:
        return self.all_words[w][0]

    def r(self, w: Word) -> int:
        return self.r0 + 1 - len(w)

    def to_dict(self) -> dict:
        return {
            "r0": self.r0,
            "words": [{"word": list(w), "part": sorted(p), "r": self.r(w)} for w, (p, _) in self.all_words.items()],
            "W": [list(w) for w in self.W],
        }


def build_word_set(chain: PartitionChain) -> WordSet:
    """Assign words top-down; siblings ordered with index 0 on the part holding the parent's minimum."""
    r0 = chain.r0
    words: Dict[Word, Tuple[Part, int]] = {}
    top = chain.grid[(r0, 0)].parts
    level = []
    for i, p in enumerate(top, start=1):
        words[(i,)] = (p, r0)
        level.append((i,))
    for s in range(r0 - 1, -1, -1):
        nxt = []
        for w in level:
            parent = words[w][0]
            kids = [p for p in chain.grid[(s, 0)].parts if p <= parent]
            first = [p for p in kids if min(parent) in p]
            rest = sorted((p for p in kids if min(parent) not in p), key=min)
            for i, p in enumerate(first + rest):
                words[w + (i,)] = (p, s)
                nxt.append(w + (i,))
        level = nxt
    W = sorted((w for w in words if w[-1] > 0), key=lambda w: (len(w), w))
    return WordSet(words, W, r0, frozenset((i,) for i in range(1, len(top) + 1)))


@dataclass
class XiBasis:
    words: List[Word]
    xi: Dict[Word, np.ndarray]
    r: Dict[Word, int]
    parts: Dict[Word, Part]
    w0: Word
    pi: np.ndarray
    #: words whose xi is measurable at every level (parts of the limit partition)
    top: FrozenSet[Word] = frozenset()

    @property
    def q(self) -> int:
        return len(self.pi)

    def matrix(self) -> np.ndarray:
        """Rows are the xi vectors in ``self.words`` order."""
        return np.array([self.xi[w] for w in self.words])

    def coefficients(self, values) -> Dict[Word, float]:
        c = np.linalg.solve(self.matrix().T, np.asarray(values, dtype=float))
        return dict(zip(self.words, c.tolist()))

    def level(self, w: Word) -> float:
        """Number of generations up at which ``xi_w`` becomes measurable (inf for top words)."""
        return math.inf if w in self.top else self.r[w]

    def to_dict(self) -> dict:
        return {
            "w0": list(self.w0),
            "basis": [{"word": list(w), "r": self.r[w], "part": sorted(self.parts[w]),
                       "xi": self.xi[w].tolist()} for w in self.words],
        }


def build_xi_basis(M, chain: PartitionChain, words: WordSet, pi: Optional[np.ndarray] = None) -> XiBasis:
    """``xi_(1) = 1``; every other ``xi_w = 1_{P_w} - pi(P_w)``."""
    a = as_array(M)
    if pi is None:
        pi = stationary_distribution(a)
    pi = np.asarray(pi, dtype=float)
    q = a.shape[0]
    xi: Dict[Word, np.ndarray] = {}
    parts: Dict[Word, Part] = {}
    for w in words.W:
        p = words.part_of(w)
        parts[w] = p
        if w == (1,):
            xi[w] = np.ones(q)
        else:
            ind = np.zeros(q)
            ind[sorted(p)] = 1.0
            xi[w] = ind - ind @ pi
    r = {w: words.r(w) for w in words.W}
    top = frozenset(w for w in words.W if w in words.top and w != (1,))
    return XiBasis(list(words.W), xi, r, parts, (1,), pi, top)


def xi_basis(M, allow_reducible: bool = False, pi=None) -> XiBasis:
    chain = build_partition_chain(M, allow_reducible=allow_reducible)
    return build_xi_basis(M, chain, build_word_set(chain), pi)


# -- conditional-variance helpers ------------------------------------------

def expected_conditional_variance(M, f, r: int, pi=None) -> float:
    """``E Var[f(X_u) | X_{p^r(u)}]`` with the ancestor distributed as ``pi``."""
    a = as_array(M)
    if pi is None:
        pi = stationary_distribution(a)
    f = np.asarray(f, dtype=float)
    Mr = np.linalg.matrix_power(a, r)
    cond_var = Mr @ (f * f) - (Mr @ f) ** 2
    return float(np.dot(pi, np.clip(cond_var, 0.0, None)))


def _two_level_gram(a: np.ndarray, pi: np.ndarray, vecs: np.ndarray, r: int) -> np.ndarray:
    """Gram matrix of ``c -> E Var[(M^r sum c xi)(X_v) | X_p(v)]``."""
    b = vecs @ np.linalg.matrix_power(a, r).T     # rows: M^r xi_w
    mb = b @ a.T                                  # rows: M (M^r xi_w)
    prod = np.einsum("it,jt->ijt", b, b) @ a.T    # M (b_i b_j)
    g = np.einsum("ijt,t->ij", prod, pi) - np.einsum("it,jt,t->ij", mb, mb, pi)
    return (g + g.T) / 2


@dataclass
class CVBasisReport:
    w0_unique: bool
    measurability: Dict[Word, float]
    c_item3: float
    c_item4: Dict[int, float]
    c_item5: Dict[int, float]
    sampled_item3: float
    sampled_item4: Dict[int, float]
    sampled_item5: Dict[int, float]
    C: float = field(init=False)

    def __post_init__(self) -> None:
        vals = [self.c_item3, *self.c_item4.values(), *self.c_item5.values(), 1.0]
        self.C = float(max(vals))

    @property
    def finite(self) -> bool:
        return math.isfinite(self.C)

    def to_dict(self) -> dict:
        return {
            "w0_unique": self.w0_unique,
            "measurability": {word_str(w): v for w, v in self.measurability.items()},
            "c_item3": self.c_item3,
            "c_item4": {str(k): v for k, v in self.c_item4.items()},
            "c_item5": {str(k): v for k, v in self.c_item5.items()},
            "sampled_item3": self.sampled_item3,
            "sampled_item4": {str(k): v for k, v in self.sampled_item4.items()},
            "sampled_item5": {str(k): v for k, v in self.sampled_item5.items()},
            "C": self.C,
        }


def check_cvbasis_properties(basis: XiBasis, M, tree_stub=None, n_samples: int = 200,
                             seed: int = 0, tol: float = 1e-10) -> CVBasisReport:
    """Measurability of each ``xi_w`` and finite constants for the three variance comparisons.

    Constants are certified from extreme eigenvalues of the relevant quadratic
    forms (``max|c| <= |c|_2 <= sqrt(n) max|c|``); sampled ratios over random
    coefficient vectors are reported alongside.  ``tree_stub``, if given, must
    be deep enough to contain a path of ``r0 + 1`` edges.
    """
    a = as_array(M)
    pi = basis.pi
    r0 = basis.r[basis.w0]
    if tree_stub is not None and tree_stub.depth < r0 + 1:
        raise ValueError(f"tree of depth {tree_stub.depth} too shallow; need {r0 + 1}")
    rng = np.random.default_rng(seed)
    w0_unique = sum(1 for w in basis.words if basis.r[w] == r0) == 1 + len(basis.top)

    meas: Dict[Word, float] = {}
    for w in basis.words:
        if w == basis.w0:
            meas[w] = 0.0
            continue
        lev = r0 + 1 if w in basis.top else basis.r[w]
        meas[w] = expected_conditional_variance(a, basis.xi[w], lev, pi)
        if meas[w] > tol:
            raise MeasurabilityViolation(f"xi_{w} not measurable {lev} levels up: {meas[w]:.3e}")

    # item 3: Var[sum c xi] <= C max_{r(w) != r0} |c|^2
    non_top = [w for w in basis.words if w != basis.w0 and w not in basis.top]
    centered = np.array([basis.xi[w] for w in non_top]) if non_top else np.zeros((0, basis.q))
    g3 = (centered * pi) @ centered.T if non_top else np.zeros((0, 0))
    c3 = float(np.linalg.eigvalsh(g3).max() * len(non_top)) if non_top else 0.0
    s3 = 0.0
    for _ in range(n_samples if non_top else 0):
        c = rng.uniform(-1, 1, len(non_top))
        s3 = max(s3, float(c @ g3 @ c) / float(np.max(np.abs(c)) ** 2))

    c4: Dict[int, float] = {}
    s4: Dict[int, float] = {}
    c5: Dict[int, float] = {}
    s5: Dict[int, float] = {}
    for rp in range(r0):
        lvl = [w for w in basis.words if basis.r[w] == rp and w not in basis.top]
        if lvl:
            g = _two_level_gram(a, pi, np.array([basis.xi[w] for w in lvl]), rp)
            lo = float(np.linalg.eigvalsh(g).min())
            c4[rp] = math.inf if lo <= 1e-14 else 1.0 / lo
            worst = 0.0
            for _ in range(n_samples):
                c = rng.uniform(-1, 1, len(lvl))
                val = float(c @ g @ c)
                worst = max(worst, math.inf if val <= 0 else float(np.max(np.abs(c)) ** 2) / val)
            s4[rp] = worst
        low = [w for w in basis.words if basis.r[w] < rp and w not in basis.top]
        if low:
            g = _two_level_gram(a, pi, np.array([basis.xi[w] for w in low]), rp)
            c5[rp] = float(max(np.linalg.eigvalsh(g).max(), 0.0) * len(low))
            worst = 0.0
            for _ in range(n_samples):
                c = rng.uniform(-1, 1, len(low))
                worst = max(worst, float(c @ g @ c) / float(np.max(np.abs(c)) ** 2))
            s5[rp] = worst
    return CVBasisReport(w0_unique, meas, c3, c4, c5, s3, s4, s5)


def all_partitions(q: int) -> Iterable[Partition]:
    """Every set partition of ``[q]`` (restricted-growth strings)."""
    def rgs(n):
        if n == 0:
            yield []
            return
        for head in rgs(n - 1):
            for b in range(max(head, default=-1) + 2):
                yield head + [b]
    for labels in rgs(q):
        groups: Dict[int, list] = {}
        for i, b in enumerate(labels):
            groups.setdefault(b, []).append(i)
        yield Partition.of(groups.values())


__all__ = [
    "Partition", "PartitionChain", "WordSet", "XiBasis", "CVBasisReport",
    "row_supports", "constrained_partition", "p_sc", "forward_partition",
    "build_partition_chain", "build_word_set", "build_xi_basis", "xi_basis",
    "check_cvbasis_properties", "expected_conditional_variance", "all_partitions",
]
