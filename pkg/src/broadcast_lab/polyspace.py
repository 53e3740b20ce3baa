"""Leaf polynomials in the product basis and their structural decompositions.

A multi-index ``sigma`` assigns a basis index in ``1..q-1`` to finitely many
leaves (absent leaves carry index 0).  It is stored as a sorted tuple of
``(leaf, index)`` pairs; the empty tuple is the constant monomial.

Conventions used below, for a leaf set ``S`` with ``|S| >= 2``:

* ``rho(S)`` is the nearest common ancestor and the *branch parts* are the
  non-empty intersections of ``S`` with the child subtrees of ``rho(S)``;
* ``cap(S) = 1`` for singletons and ``1 + max cap(part)`` otherwise;
* ``A_1`` is the family of singletons and ``A_k = B(A_{k-1})`` where ``B(A)``
  adds every set whose branch parts all lie in ``A``;
* ``psi_sigma = prod_parts (phi_{sigma_i} - E phi_{sigma_i})``.
"""

from __future__ import annotations

import math
from collections import defaultdict
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from typing import Dict, FrozenSet, Optional, Tuple

import numpy as np

from . import engine
from .errors import (BadSupport, EmptySet, NotCentered, NotClosed, NotDegreeOne,
                     TooLarge, TooSmall)
from .markov import (SiteBasis, as_array, closed_classes, site_basis_from_pi,
                     stationary_distribution)
from .partitions import XiBasis, xi_basis
from .tree import (RootedTree, Word, check_domination, nearest_common_ancestor, parse_word,
                   word_key, word_str)

Sigma = Tuple[Tuple[Word, int], ...]
LeafSet = FrozenSet[Word]

MAX_AK_LEAVES = 12


# -- multi-indices and leaf polynomials -------------------------------------------------

def make_sigma(assign: Mapping[Word, int] | Iterable[Tuple[Word, int]]) -> Sigma:
    items = assign.items() if isinstance(assign, Mapping) else assign
    return tuple(sorted(((tuple(v), int(i)) for v, i in items if int(i) != 0), key=lambda p: word_key(p[0])))


def support(sigma: Sigma) -> LeafSet:
    return frozenset(v for v, _ in sigma)


def restrict(sigma: Sigma, leaves: Iterable[Word]) -> Sigma:
    keep = set(leaves)
    return tuple(p for p in sigma if p[0] in keep)


class LeafPolynomial:
    """Sparse map ``sigma -> coefficient`` in the product basis."""

    __slots__ = ("coeffs",)

    def __init__(self, coeffs: Mapping[Sigma, float] | None = None):
        self.coeffs: Dict[Sigma, float] = {}
        for s, c in (coeffs or {}).items():
            if c != 0:
                key = make_sigma(s)
                self.coeffs[key] = self.coeffs.get(key, 0.0) + float(c)

    @classmethod
    def constant(cls, c: float) -> "LeafPolynomial":
        return cls({(): c})

    def copy(self) -> "LeafPolynomial":
        out = LeafPolynomial()
        out.coeffs = dict(self.coeffs)
        return out

    def __len__(self) -> int:
        return len(self.coeffs)

    def __repr__(self) -> str:
        return f"LeafPolynomial({len(self.coeffs)} coefficients)"

    def items(self):
        return sorted(self.coeffs.items(), key=lambda kv: (len(kv[0]), [(word_key(v), i) for v, i in kv[0]]))

    def add_term(self, sigma: Sigma, c: float) -> None:
        if c != 0:
            self.coeffs[sigma] = self.coeffs.get(sigma, 0.0) + c

    def __add__(self, other: "LeafPolynomial") -> "LeafPolynomial":
        out = self.copy()
        for s, c in other.coeffs.items():
            out.add_term(s, c)
        return out

    def __sub__(self, other: "LeafPolynomial") -> "LeafPolynomial":
        return self + other.scaled(-1.0)

    def scaled(self, a: float) -> "LeafPolynomial":
        out = LeafPolynomial()
        out.coeffs = {s: a * c for s, c in self.coeffs.items()}
        return out

    def constant_part(self) -> float:
        return self.coeffs.get((), 0.0)

    def without_constant(self) -> "LeafPolynomial":
        out = self.copy()
        out.coeffs.pop((), None)
        return out

    def leaf_support(self) -> LeafSet:
        out: set = set()
        for s in self.coeffs:
            out |= support(s)
        return frozenset(out)

    def max_abs_diff(self, other: "LeafPolynomial") -> float:
        keys = set(self.coeffs) | set(other.coeffs)
        return max((abs(self.coeffs.get(k, 0.0) - other.coeffs.get(k, 0.0)) for k in keys), default=0.0)

    def to_vertex(self, basis: SiteBasis) -> engine.VertexPolynomial:
        phi = basis.phi
        return engine.VertexPolynomial(
            engine.ProductTerm(c, {v: phi[i] for v, i in s}) for s, c in self.items())

    def evaluate(self, tree: RootedTree, basis: SiteBasis, x):
        return self.to_vertex(basis).evaluate(tree, x)

    @classmethod
    def from_vertex(cls, tree: RootedTree, basis: SiteBasis, f: engine.VertexPolynomial) -> "LeafPolynomial":
        """Expand a polynomial whose factors all sit on leaves into the product basis."""
        leaves = set(tree.leaves)
        out = cls()
        for t in f.terms:
            expansion: Dict[Sigma, float] = {(): t.coeff}
            for v, vec in t.factors.items():
                if v not in leaves:
                    raise BadSupport(f"factor at non-leaf {word_str(v) or '<root>'}")
                a = basis.coefficients(vec)
                nxt: Dict[Sigma, float] = {}
                for s, c in expansion.items():
                    for i, ai in enumerate(a):
                        if ai != 0:
                            key = make_sigma(list(s) + ([(v, i)] if i else []))
                            nxt[key] = nxt.get(key, 0.0) + c * ai
                expansion = nxt
            for s, c in expansion.items():
                out.add_term(s, c)
        return out

    def to_dict(self) -> dict:
        return {"coeffs": [{"sigma": {word_str(v): i for v, i in s}, "c": c} for s, c in self.items()]}

    @classmethod
    def from_dict(cls, obj: dict) -> "LeafPolynomial":
        out = cls()
        for item in obj["coeffs"]:
            out.add_term(make_sigma({parse_word(k): v for k, v in item["sigma"].items()}), float(item["c"]))
        return out


def efron_stein_degree(f: LeafPolynomial, tol: float = 0.0) -> int:
    """Largest ``|sigma|`` carrying a non-zero coefficient (0 for constants)."""
    return max((len(s) for s, c in f.coeffs.items() if abs(c) > tol), default=0)


# -- branch decomposition, capacity, A_k -----------------------------------------------

@dataclass(frozen=True)
class BranchParts:
    rho_S: Word
    I_S: Tuple[int, ...]
    parts: Dict[int, LeafSet]


def branch_decompose(tree: RootedTree, S: Iterable[Word]) -> BranchParts:
    S = frozenset(tree.check(v) for v in S)
    if len(S) < 2:
        raise TooSmall("branch decomposition needs at least two leaves")
    rho = nearest_common_ancestor(S)
    parts: Dict[int, set] = defaultdict(set)
    for v in S:
        parts[v[len(rho)]].add(v)
    idx = tuple(sorted(parts))
    return BranchParts(rho, idx, {i: frozenset(parts[i]) for i in idx})


def sigma_root(sigma: Sigma) -> Word:
    return nearest_common_ancestor(support(sigma))


def sigma_parts(sigma: Sigma) -> Dict[int, Sigma]:
    """Branch parts of ``sigma`` keyed by child index of ``rho(sigma)``."""
    rho = sigma_root(sigma)
    parts: Dict[int, list] = defaultdict(list)
    for v, i in sigma:
        parts[v[len(rho)]].append((v, i))
    return {k: tuple(parts[k]) for k in sorted(parts)}


def fractal_capacity(tree: RootedTree, S: Iterable[Word]) -> int:
    """``1`` for singletons, else ``1 + max`` over branch parts."""
    S = frozenset(S)
    if not S:
        raise EmptySet("capacity of the empty set")
    for v in S:
        tree.check(v)
    return _capacity(S)


@lru_cache(maxsize=1 << 16)
def _capacity(S: LeafSet) -> int:
    if len(S) == 1:
        return 1
    rho = nearest_common_ancestor(S)
    parts: Dict[int, set] = defaultdict(set)
    for v in S:
        parts[v[len(rho)]].add(v)
    return 1 + max(_capacity(frozenset(p)) for p in parts.values())


def build_Ak(tree: RootedTree, k: int) -> set:
    """Explicit family ``A_k`` as a set of frozensets of leaves (``|L| <= 12``)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    L = list(tree.leaves)
    if len(L) > MAX_AK_LEAVES:
        raise TooLarge(f"{len(L)} leaves > {MAX_AK_LEAVES}; powerset enumeration refused")
    all_sets = [frozenset(c) for r in range(1, len(L) + 1) for c in combinations(L, r)]
    fam = {frozenset([v]) for v in L}
    for _ in range(k - 1):
        nxt = set(fam)
        for S in all_sets:
            if len(S) >= 2 and S not in nxt:
                if all(p in fam for p in branch_decompose(tree, S).parts.values()):
                    nxt.add(S)
        fam = nxt
    return fam


def capacity_by_construction(tree: RootedTree, S: Iterable[Word]) -> int:
    """Smallest ``k`` with ``S`` in ``A_k``, iterating ``A_k = B(A_{k-1})`` on the sets that matter.

    Only ``S`` and its iterated branch parts can influence membership of
    ``S``, so the explicit construction is run on that finite collection
    rather than on the powerset.
    """
    S = frozenset(tree.check(v) for v in S)
    if not S:
        raise EmptySet("capacity of the empty set")
    relevant, stack = {S}, [S]
    while stack:
        T = stack.pop()
        if len(T) >= 2:
            for p in branch_decompose(tree, T).parts.values():
                if p not in relevant:
                    relevant.add(p)
                    stack.append(p)
    fam = {T for T in relevant if len(T) == 1}
    k = 1
    while S not in fam:
        fam = {T for T in relevant if len(T) == 1
               or all(p in fam for p in branch_decompose(tree, T).parts.values())}
        k += 1
    return k


class SetFamily:
    """Membership-testable family of non-empty leaf sets."""

    def __contains__(self, S) -> bool:  # pragma: no cover - interface
        raise NotImplementedError


class CapacityFamily(SetFamily):
    """``A_k`` by streaming membership: ``cap(S) <= k``."""

    def __init__(self, tree: RootedTree, k: int):
        self.tree, self.k = tree, k

    def __contains__(self, S) -> bool:
        S = frozenset(S)
        return bool(S) and S <= set(self.tree.leaves) and _capacity(S) <= self.k

    def __repr__(self) -> str:
        return f"CapacityFamily(k={self.k})"


class ExplicitFamily(SetFamily):
    def __init__(self, sets: Iterable[Iterable[Word]]):
        self.sets = {frozenset(s) for s in sets}

    def __contains__(self, S) -> bool:
        return frozenset(S) in self.sets


def validate_closed(tree: RootedTree, family: SetFamily, candidates: Optional[Iterable[LeafSet]] = None) -> None:
    """Raise NotClosed unless singletons are members and branch parts of members are members."""
    for v in tree.leaves:
        if frozenset([v]) not in family:
            raise NotClosed(f"singleton {{{word_str(v)}}} missing")
    if candidates is None:
        if isinstance(family, ExplicitFamily):
            candidates = family.sets
        elif isinstance(family, CapacityFamily):
            return  # closed by construction: parts have strictly smaller capacity
        else:
            raise NotClosed("cannot validate an implicit family without candidate sets")
    for S in candidates:
        if len(S) >= 2 and S in family:
            for p in branch_decompose(tree, S).parts.values():
                if p not in family:
                    raise NotClosed(f"part {sorted(map(word_str, p))} of a member is not a member")


# -- psi basis ---------------------------------------------------------------------------

def _law(M, nu) -> np.ndarray:
    a = as_array(M)
    if nu is not None:
        return np.asarray(nu, dtype=float)
    return stationary_distribution(a)


def _phi_mean(tree, M, basis: SiteBasis, sigma: Sigma, law) -> float:
    return engine.expectation(tree, M, engine.ProductTerm(1.0, {v: basis.phi[i] for v, i in sigma}), law)


def _psi_expansion(tree, M, sigma: Sigma, basis: SiteBasis, law) -> Dict[int, LeafPolynomial]:
    """Expansion of ``psi_sigma`` grouped by ``|I1|`` (number of un-centered parts)."""
    parts = list(sigma_parts(sigma).values())
    means = [_phi_mean(tree, M, basis, p, law) for p in parts]
    groups: Dict[int, LeafPolynomial] = defaultdict(LeafPolynomial)
    n = len(parts)
    for r in range(n + 1):
        for I1 in combinations(range(n), r):
            c = 1.0
            for j in range(n):
                if j not in I1:
                    c *= -means[j]
            if c != 0:
                groups[r].add_term(make_sigma([p for j in I1 for p in parts[j]]), c)
    return groups


def psi_leaf(tree: RootedTree, M, sigma: Sigma, nu=None, basis: Optional[SiteBasis] = None) -> LeafPolynomial:
    sigma = make_sigma(sigma)
    if len(sigma) < 2:
        raise TooSmall("psi needs |sigma| >= 2")
    law = _law(M, nu)
    basis = basis or site_basis_from_pi(law)
    out = LeafPolynomial()
    for g in _psi_expansion(tree, M, sigma, basis, law).values():
        out = out + g
    return out


def psi(tree: RootedTree, M, sigma, nu=None, basis: Optional[SiteBasis] = None) -> engine.VertexPolynomial:
    """``prod_{parts} (phi_{sigma_i} - E phi_{sigma_i})`` as a product-form polynomial."""
    law = _law(M, nu)
    basis = basis or site_basis_from_pi(law)
    return psi_leaf(tree, M, sigma, law, basis).to_vertex(basis)


@dataclass
class PhiInPsi:
    psi_product: engine.VertexPolynomial
    psi_leaf: LeafPolynomial
    a_subset: LeafPolynomial
    a_less: LeafPolynomial
    a_const: float

    def __iter__(self):
        return iter((self.psi_product, self.a_subset, self.a_less, self.a_const))


def expand_phi_in_psi(tree: RootedTree, M, sigma, nu=None, basis: Optional[SiteBasis] = None) -> PhiInPsi:
    """``phi_sigma = psi_sigma - a_subset - a_less - a_const``.

    ``a_subset`` collects sub-products over at least two but not all branch
    parts, ``a_less`` those over a single part, ``a_const`` the product of all
    part means; each carries the sign it has inside ``psi_sigma``.
    """
    sigma = make_sigma(sigma)
    if len(sigma) < 2:
        raise TooSmall("expansion needs |sigma| >= 2")
    law = _law(M, nu)
    basis = basis or site_basis_from_pi(law)
    groups = _psi_expansion(tree, M, sigma, basis, law)
    n = len(sigma_parts(sigma))
    a_subset = LeafPolynomial()
    for r in range(2, n):
        a_subset = a_subset + groups.get(r, LeafPolynomial())
    a_less = groups.get(1, LeafPolynomial()).copy()
    a_const = groups.get(0, LeafPolynomial()).constant_part()
    full = LeafPolynomial()
    for g in groups.values():
        full = full + g
    return PhiInPsi(full.to_vertex(basis), full, a_subset, a_less, a_const)


@dataclass
class PsiCombination:
    """``f_u = sum_sigma c_sigma psi_sigma``; ``centered()`` is ``f_u - E f_u``."""

    psi_coeffs: Dict[Sigma, float]
    expanded: LeafPolynomial   # f_u in the product basis
    mean: float

    def centered(self) -> LeafPolynomial:
        return self.expanded - LeafPolynomial.constant(self.mean)

    @classmethod
    def zero(cls) -> "PsiCombination":
        return cls({}, LeafPolynomial(), 0.0)

    def __add__(self, other: "PsiCombination") -> "PsiCombination":
        pc = dict(self.psi_coeffs)
        for s, c in other.psi_coeffs.items():
            pc[s] = pc.get(s, 0.0) + c
        return PsiCombination(pc, self.expanded + other.expanded, self.mean + other.mean)


def _check_pu(p_u: LeafPolynomial, u: Optional[Word]) -> Word:
    roots = set()
    for s in p_u.coeffs:
        if len(s) < 2:
            raise BadSupport("every term must involve at least two leaves")
        roots.add(sigma_root(s))
    if u is None:
        if len(roots) > 1:
            raise BadSupport("terms have different decomposition roots")
        u = next(iter(roots)) if roots else ()
    elif roots - {u}:
        raise BadSupport(f"term rooted away from {word_str(u) or '<root>'}")
    return u


def decompose_pu(tree: RootedTree, M, p_u: LeafPolynomial, u: Optional[Word] = None, nu=None,
                 basis: Optional[SiteBasis] = None) -> Tuple[PsiCombination, LeafPolynomial, float]:
    """Split ``p_u = tilde_f_u + p_less + c_u`` by recursion on the largest number of branch parts.

    Returns ``(f_u, p_less, c_u)`` where ``f_u.centered()`` is ``tilde_f_u``
    and ``c_u`` already contains ``E f_u``.
    """
    u = _check_pu(p_u, u)
    law = _law(M, nu)
    basis = basis or site_basis_from_pi(law)
    f_u = PsiCombination.zero()
    p_less = LeafPolynomial()
    c_u = 0.0
    current = p_u.copy()
    while current.coeffs:
        nparts = {s: len(sigma_parts(s)) for s in current.coeffs}
        r = max(nparts.values())
        top = {s: c for s, c in current.coeffs.items() if nparts[s] == r}
        rest = LeafPolynomial({s: c for s, c in current.coeffs.items() if nparts[s] < r})
        layer = PsiCombination.zero()
        for s, c in sorted(top.items(), key=lambda kv: [(word_key(v), i) for v, i in kv[0]]):
            ex = expand_phi_in_psi(tree, M, s, law, basis)
            layer = layer + PsiCombination({s: c}, ex.psi_leaf.scaled(c), 0.0)
            rest = rest - ex.a_subset.scaled(c)
            p_less = p_less - ex.a_less.scaled(c)
            c_u -= c * ex.a_const
        layer.mean = engine.expectation(tree, M, layer.expanded.to_vertex(basis), law)
        c_u += layer.mean
        f_u = f_u + layer
        current = rest
        # drop cancellations so the loop terminates on exact zeros
        current.coeffs = {s: c for s, c in current.coeffs.items() if c != 0}
    return f_u, p_less, c_u


# -- degree-one canonicalization -----------------------------------------------------------

@dataclass
class Degree1Parts:
    parts: Dict[Word, np.ndarray]          # g_v as a function of x_v
    naive: Dict[Word, np.ndarray]          # per-vertex functions read off the input
    var_f: float
    sum_var_parts: float
    sum_var_naive: float
    R: float
    xi: XiBasis = field(repr=False)

    @property
    def ratio(self) -> float:
        """``sum_v Var g_v / Var f`` (``inf`` when Var f = 0 but the parts vary)."""
        if self.var_f > 1e-14:
            return self.sum_var_parts / self.var_f
        return 0.0 if self.sum_var_parts <= 1e-12 else math.inf

    def as_polynomials(self) -> Dict[Word, engine.VertexPolynomial]:
        return {v: engine.VertexPolynomial.single(v, g) for v, g in self.parts.items()}


def _chain_law(M, nu) -> np.ndarray:
    if nu is not None:
        return np.asarray(nu, dtype=float)
    return stationary_distribution(M)


def degree1_canonicalize(tree: RootedTree, M, f, rho_prime: Word = (),
                         k: int = 0, nu=None) -> Degree1Parts:
    """Rewrite a degree-one ``f`` over ``D_k(rho')`` with block-averaged xi coefficients.

    ``f`` is expanded per vertex in the xi basis; for each word the coefficient
    is replaced by its average over the vertices sharing the ancestor
    ``level(w)`` generations up (or over all of ``D_k(rho')`` when that
    ancestor lies above ``rho'``).  Constants are spread evenly.
    """
    A = as_array(M)
    q = A.shape[0]
    law = _chain_law(A, nu)
    if isinstance(f, LeafPolynomial):
        f = f.to_vertex(site_basis_from_pi(law))
    rho_prime = tree.check(rho_prime)
    layer = tree.descendants_at_height(rho_prime, k)
    in_layer = set(layer)
    h: Dict[Word, np.ndarray] = {v: np.zeros(q) for v in layer}
    c0 = 0.0
    for t in f.terms:
        if not t.factors:
            c0 += t.coeff
            continue
        if len(t.factors) > 1:
            raise NotDegreeOne("a term touches more than one vertex")
        (v, vec), = t.factors.items()
        if v not in in_layer:
            raise NotDegreeOne(f"factor at {word_str(v)} is not in the layer")
        h[v] = h[v] + t.coeff * vec
    many = len(closed_classes(A)) > 1
    centering = engine.node_law(tree, A, layer[0], law) if many else stationary_distribution(A)
    xb = xi_basis(A, allow_reducible=many, pi=centering)
    naive = {v: h[v] + c0 / len(layer) for v in layer}
    coeffs = {v: xb.coefficients(naive[v]) for v in layer}
    top_h = tree.height(rho_prime)
    averaged: Dict[Word, Dict] = {v: {} for v in layer}
    for w in xb.words:
        lev = math.inf if (w == xb.w0 or w in xb.top) else xb.r[w]
        if k + lev >= top_h:
            blocks = {(): layer}
        else:
            blocks = defaultdict(list)
            for v in layer:
                blocks[v[: len(v) - int(lev)]].append(v)
        for members in blocks.values():
            avg = sum(coeffs[v][w] for v in members) / len(members)
            for v in members:
                averaged[v][w] = avg
    parts = {v: sum((averaged[v][w] * xb.xi[w] for w in xb.words), np.zeros(q)) for v in layer}

    def var_at(v, g):
        lv = engine.node_law(tree, A, v, law)
        m = float(lv @ g)
        return max(float(lv @ (g * g)) - m * m, 0.0)

    dmax = max(1, max(tree.n_children(u) for u in tree.nodes))
    return Degree1Parts(parts, naive, engine.variance(tree, A, f, law),
                        sum(var_at(v, g) for v, g in parts.items()),
                        sum(var_at(v, g) for v, g in naive.items()),
                        check_domination(tree, dmax), xb)


# -- full decomposition --------------------------------------------------------------------

@dataclass
class LayerDecomposition:
    k1: int
    rho_prime: Word
    f_u: Dict[Word, PsiCombination]                     # h(u) > k1
    f_bar: Dict[Word, engine.VertexPolynomial]          # v in D_{k1}(rho')
    naive_bottom: Dict[Word, LeafPolynomial]            # layer-k1 pieces before canonicalization
    f_k: Dict[int, engine.VertexPolynomial]
    canonical: Degree1Parts
    sandwich_low: float = math.nan    # max_w sum E fbar_v^2 / E (sum fbar_v)^2
    sandwich_high: float = math.nan   # max_w E (sum fbar_v)^2 / sum E fbar_v^2

    def total(self) -> engine.VertexPolynomial:
        out = engine.VertexPolynomial()
        for k in sorted(self.f_k):
            out = out + self.f_k[k]
        return out


def full_decompose(tree: RootedTree, M, f: LeafPolynomial, k1: int, rho_prime: Word = (),
                   family: Optional[SetFamily] = None, nu=None, sandwich: bool = True,
                   tol: float = 1e-10) -> LayerDecomposition:
    """Top-down psi decomposition above layer ``k1`` plus degree-one canonicalization at ``k1``."""
    A = as_array(M)
    rho_prime = tree.check(rho_prime)
    top = tree.height(rho_prime)
    if not 0 <= k1 < top:
        raise ValueError(f"need 0 <= k1 < h(rho') = {top}")
    law = _chain_law(A, nu)
    basis = site_basis_from_pi(law)
    for s in f.coeffs:
        if s and not all(RootedTree.is_below(v, rho_prime) for v, _ in s):
            raise BadSupport("term outside the subtree of rho'")
        if s and family is not None and support(s) not in family:
            raise BadSupport(f"support {sorted(map(word_str, support(s)))} is not in the family")
    mean = engine.expectation(tree, A, f.to_vertex(basis), law)
    if abs(mean) > tol:
        raise NotCentered(f"E f = {mean:.3e}")

    remainder = f.copy()
    const = remainder.coeffs.pop((), 0.0)
    f_u: Dict[Word, PsiCombination] = {}
    for h in range(top, k1, -1):
        for u in tree.descendants_at_height(rho_prime, h):
            sel = {s: c for s, c in remainder.coeffs.items() if len(s) >= 2 and sigma_root(s) == u}
            for s in sel:
                del remainder.coeffs[s]
            if not sel:
                continue
            fu, p_less, c_u = decompose_pu(tree, A, LeafPolynomial(sel), u, law, basis)
            f_u[u] = fu
            const += c_u
            for s, c in p_less.coeffs.items():
                if s:
                    remainder.add_term(s, c)
                else:
                    const += c
            remainder.coeffs = {s: c for s, c in remainder.coeffs.items() if c != 0}

    layer = tree.descendants_at_height(rho_prime, k1)
    bottom: Dict[Word, LeafPolynomial] = {v: LeafPolynomial() for v in layer}
    for s, c in remainder.coeffs.items():
        v = sigma_root(s)
        anc = v[: len(v) - (k1 - tree.height(v))]
        bottom[anc].add_term(s, c)
    messages = {v: engine.message_at(tree, A, bottom[v].to_vertex(basis), v) for v in layer}
    hpoly = engine.VertexPolynomial(
        [engine.ProductTerm(1.0, {v: m}) for v, m in messages.items()] + [engine.ProductTerm(const)])
    canon = degree1_canonicalize(tree, A, hpoly, rho_prime, k1, law)
    f_bar = {}
    for v in layer:
        f_bar[v] = (bottom[v].to_vertex(basis)
                    + engine.VertexPolynomial.single(v, canon.parts[v] - messages[v]))
    f_k: Dict[int, engine.VertexPolynomial] = {}
    for h in range(k1 + 1, top + 1):
        acc = engine.VertexPolynomial()
        for u in tree.descendants_at_height(rho_prime, h):
            if u in f_u:
                acc = acc + f_u[u].centered().to_vertex(basis)
        f_k[h] = acc
    acc = engine.VertexPolynomial()
    for v in layer:
        acc = acc + f_bar[v]
    f_k[k1] = acc
    out = LayerDecomposition(k1, rho_prime, f_u, f_bar, bottom, f_k, canon)
    if sandwich:
        lo, hi = 0.0, 0.0
        for h in range(k1, top + 1):
            for w in tree.descendants_at_height(rho_prime, h):
                members = tree.descendants_at_height(w, k1)
                indiv = sum(engine.second_moment(tree, A, f_bar[v], law) for v in members)
                tot = engine.VertexPolynomial()
                for v in members:
                    tot = tot + f_bar[v]
                joint = engine.second_moment(tree, A, tot, law)
                if joint > 1e-14:
                    lo = max(lo, indiv / joint)
                elif indiv > 1e-12:
                    lo = math.inf
                if indiv > 1e-14:
                    hi = max(hi, joint / indiv)
        out.sandwich_low, out.sandwich_high = lo, hi
    return out


__all__ = [
    "Sigma", "make_sigma", "support", "LeafPolynomial", "efron_stein_degree",
    "BranchParts", "branch_decompose", "sigma_root", "sigma_parts", "fractal_capacity", "capacity_by_construction", "build_Ak",
    "SetFamily", "CapacityFamily", "ExplicitFamily", "validate_closed",
    "psi", "psi_leaf", "expand_phi_in_psi", "PhiInPsi", "PsiCombination", "decompose_pu",
    "Degree1Parts", "degree1_canonicalize", "LayerDecomposition", "full_decompose",
]
