"""Broadcast process on a rooted tree: sampling and exact moments.

A polynomial is a sum of product terms ``coeff * prod_v factor_v(x_v)`` over
tree vertices.  Moments are computed by upward message passing restricted to
the ancestor closure of each term's vertices:

    m_u(theta) = own_u(theta) * prod_{children c} (M m_c)(theta).

The root law defaults to the stationary distribution; every entry point also
accepts an explicit ``nu``.
"""

from __future__ import annotations

from collections import defaultdict
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import BadDistribution, NodeNotInTree, OverlappingU, TooLarge, ZeroLikelihood
from .markov import as_array, stationary_distribution
from .tree import RootedTree, Word, parse_word, word_key, word_str

MAX_TERMS = 5000
BRUTE_FORCE_CAP = 2 ** 24
VAR_FLOOR = -1e-12


# -- polynomial types ---------------------------------------------------------

@dataclass(frozen=True)
class ProductTerm:
    """``coeff * prod_v factors[v](x_v)``; an empty factor map is a constant."""

    coeff: float
    factors: Mapping[Word, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        fx = {}
        for v in sorted(self.factors, key=word_key):
            arr = np.array(self.factors[v], dtype=float)
            arr.setflags(write=False)
            fx[tuple(v)] = arr
        object.__setattr__(self, "factors", fx)
        object.__setattr__(self, "coeff", float(self.coeff))

    @property
    def nodes(self) -> Tuple[Word, ...]:
        return tuple(self.factors)

    def times(self, other: "ProductTerm") -> "ProductTerm":
        """Pointwise product; factors at shared vertices multiply."""
        fx = dict(self.factors)
        for v, vec in other.factors.items():
            fx[v] = fx[v] * vec if v in fx else vec
        return ProductTerm(self.coeff * other.coeff, fx)

    def scaled(self, c: float) -> "ProductTerm":
        return ProductTerm(self.coeff * c, self.factors)

    def to_dict(self) -> dict:
        return {"coeff": self.coeff, "factors": {word_str(v): f.tolist() for v, f in self.factors.items()}}


class VertexPolynomial:
    """Finite sum of :class:`ProductTerm`."""

    __slots__ = ("terms",)

    def __init__(self, terms: Iterable[ProductTerm] = ()):
        self.terms: Tuple[ProductTerm, ...] = tuple(terms)

    @classmethod
    def constant(cls, c: float) -> "VertexPolynomial":
        return cls([ProductTerm(c)]) if c != 0 else cls()

    @classmethod
    def single(cls, v: Word, vec, coeff: float = 1.0) -> "VertexPolynomial":
        return cls([ProductTerm(coeff, {tuple(v): vec})])

    def __len__(self) -> int:
        return len(self.terms)

    def __repr__(self) -> str:
        return f"VertexPolynomial({len(self.terms)} terms)"

    def __add__(self, other: "VertexPolynomial") -> "VertexPolynomial":
        if isinstance(other, (int, float)):
            other = VertexPolynomial.constant(other)
        return VertexPolynomial(self.terms + other.terms)

    __radd__ = __add__

    def __neg__(self) -> "VertexPolynomial":
        return self.scaled(-1.0)

    def __sub__(self, other: "VertexPolynomial") -> "VertexPolynomial":
        if isinstance(other, (int, float)):
            other = VertexPolynomial.constant(other)
        return self + (-other)

    def scaled(self, c: float) -> "VertexPolynomial":
        return VertexPolynomial(t.scaled(c) for t in self.terms)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scaled(other)
        return VertexPolynomial(s.times(t) for s in self.terms for t in other.terms)

    __rmul__ = __mul__

    def nodes(self) -> set:
        out = set()
        for t in self.terms:
            out.update(t.factors)
        return out

    def constant_part(self) -> float:
        return sum(t.coeff for t in self.terms if not t.factors)

    def evaluate(self, tree: RootedTree, x) -> np.ndarray | float:
        """Value at one assignment (mapping word -> state, or array in tree order) or a batch.

        A 2-D array of shape ``(n, |T|)`` evaluates ``n`` assignments at once.
        """
        if isinstance(x, Mapping):
            total = 0.0
            for t in self.terms:
                val = t.coeff
                for v, vec in t.factors.items():
                    val *= vec[x[v]]
                total += val
            return total
        X = np.asarray(x)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        out = np.zeros(X.shape[0])
        for t in self.terms:
            val = np.full(X.shape[0], t.coeff)
            for v, vec in t.factors.items():
                val = val * vec[X[:, tree.index[v]]]
            out += val
        return float(out[0]) if single else out

    def to_dict(self) -> dict:
        return {"terms": [t.to_dict() for t in self.terms]}

    @classmethod
    def from_dict(cls, obj: dict) -> "VertexPolynomial":
        return cls(ProductTerm(t["coeff"], {parse_word(k): v for k, v in t.get("factors", {}).items()})
                   for t in obj["terms"])


@dataclass
class BroadcastSample:
    assignment: Dict[Word, int]
    seed: int


# -- helpers ------------------------------------------------------------------------

def _root_law(M, nu) -> np.ndarray:
    a = as_array(M)
    if nu is None:
        return stationary_distribution(a)
    nu = np.asarray(nu, dtype=float)
    if nu.shape != (a.shape[0],) or np.any(nu < 0) or abs(nu.sum() - 1.0) > 1e-12:
        raise BadDistribution("nu must be a probability vector of length q")
    return nu


def _check_nodes(tree: RootedTree, f: VertexPolynomial) -> None:
    for t in f.terms:
        for v in t.factors:
            if v not in tree.index:
                raise NodeNotInTree(f"factor at {word_str(v) or '<root>'} is not a vertex")


def _upward(A: np.ndarray, factors: Mapping[Word, np.ndarray], top: Word = ()) -> np.ndarray:
    """Message at ``top`` from factors that all sit at or below ``top``."""
    q = A.shape[0]
    depth_top = len(top)
    acc: Dict[Word, np.ndarray] = {}
    buckets: Dict[int, list] = defaultdict(list)
    for v, vec in factors.items():
        acc[v] = np.array(vec, dtype=float)
        buckets[len(v)].append(v)
    if top not in acc:
        acc[top] = np.ones(q)
    if not buckets:
        return acc[top]
    for L in range(max(buckets), depth_top, -1):
        for u in buckets.get(L, ()):
            p = u[:-1]
            msg = A @ acc[u]
            if p in acc:
                acc[p] = acc[p] * msg
            else:
                acc[p] = msg
                buckets[L - 1].append(p)
    return acc[top]


def term_root_message(A: np.ndarray, term: ProductTerm) -> np.ndarray:
    """``coeff * E[prod factors | X_root = theta]`` as a vector over theta."""
    return term.coeff * _upward(A, term.factors, ())


def conditional_root(tree: RootedTree, M, f: VertexPolynomial) -> np.ndarray:
    """``theta -> E[f | X_root = theta]``."""
    A = as_array(M)
    _check_nodes(tree, f)
    out = np.zeros(A.shape[0])
    for t in f.terms:
        out += term_root_message(A, t)
    return out


def message_at(tree: RootedTree, M, f: VertexPolynomial, u: Word) -> np.ndarray:
    """``theta -> E[f | X_u = theta]`` for ``f`` supported on the subtree of ``u``."""
    A = as_array(M)
    u = tree.check(u)
    out = np.zeros(A.shape[0])
    for t in f.terms:
        for v in t.factors:
            if not RootedTree.is_below(v, u):
                raise ValueError(f"factor at {word_str(v)} lies outside the subtree of {word_str(u)}")
        out += t.coeff * _upward(A, t.factors, u)
    return out


def node_law(tree: RootedTree, M, u: Word, nu=None) -> np.ndarray:
    """Marginal law of ``X_u``."""
    A = as_array(M)
    law = _root_law(A, nu)
    for _ in range(len(tree.check(u))):
        law = law @ A
    return law


# -- public operations --------------------------------------------------------------

def sample_many(tree: RootedTree, M, nu, n: int, seed: int) -> np.ndarray:
    """``n`` independent draws, shape ``(n, |T|)``, columns in ``tree.nodes`` order."""
    A = as_array(M)
    nu = _root_law(A, nu)
    rng = np.random.default_rng(seed)
    q = A.shape[0]
    X = np.zeros((n, len(tree)), dtype=np.int64)
    cum_nu = np.cumsum(nu)
    X[:, 0] = np.minimum((rng.random(n)[:, None] >= cum_nu[None, :]).sum(axis=1), q - 1)
    cum = np.cumsum(A, axis=1)
    for u in tree.nodes[1:]:
        par = X[:, tree.index[u[:-1]]]
        draw = rng.random(n)
        X[:, tree.index[u]] = np.minimum((draw[:, None] >= cum[par]).sum(axis=1), q - 1)
    return X


def sample(tree: RootedTree, M, nu, seed: int) -> BroadcastSample:
    """One draw of the broadcast process (root from ``nu``; ``None`` means stationary)."""
    X = sample_many(tree, M, nu, 1, seed)[0]
    return BroadcastSample({v: int(X[i]) for i, v in enumerate(tree.nodes)}, seed)


def expectation(tree: RootedTree, M, term, nu=None) -> float:
    """Exact mean of a product term (or of a whole polynomial)."""
    A = as_array(M)
    law = _root_law(A, nu)
    if isinstance(term, VertexPolynomial):
        return float(law @ conditional_root(tree, A, term))
    _check_nodes(tree, VertexPolynomial([term]))
    return float(law @ term_root_message(A, term))


def conditional_expectation_U(tree: RootedTree, M, f: VertexPolynomial, U: Iterable[Word]) -> VertexPolynomial:
    """Collapse every factor at or strictly below some ``u in U`` into one factor at ``u``."""
    A = as_array(M)
    U = sorted({tree.check(u) for u in U}, key=word_key)
    for a in U:
        for b in U:
            if a != b and RootedTree.is_below(b, a):
                raise OverlappingU(f"{word_str(b)} lies below {word_str(a) or '<root>'}")
    _check_nodes(tree, f)
    if not U:
        return f
    out = []
    for t in f.terms:
        groups: Dict[Word, Dict[Word, np.ndarray]] = {}
        rest: Dict[Word, np.ndarray] = {}
        for v, vec in t.factors.items():
            anc = next((u for u in U if RootedTree.is_below(v, u)), None)
            if anc is None:
                rest[v] = vec
            else:
                groups.setdefault(anc, {})[v] = vec
        fx = dict(rest)
        for u, sub in groups.items():
            fx[u] = _upward(A, sub, u)
        out.append(ProductTerm(t.coeff, fx))
    return VertexPolynomial(out)


def _is_separable(f: VertexPolynomial) -> bool:
    return all(len(t.factors) <= 1 for t in f.terms)


def _separable_moments(tree: RootedTree, A: np.ndarray, f: VertexPolynomial, law: np.ndarray) -> Tuple[float, float]:
    """Mean and second moment of ``c0 + sum_v g_v(x_v)`` by an upward pass of conditional moments."""
    q = A.shape[0]
    c0 = 0.0
    g: Dict[Word, np.ndarray] = {}
    for t in f.terms:
        if not t.factors:
            c0 += t.coeff
        else:
            (v, vec), = t.factors.items()
            g[v] = g.get(v, 0.0) + t.coeff * vec
    # only vertices with a g below them matter
    need = set()
    for v in g:
        for k in range(len(v) + 1):
            need.add(v[:k])
    first: Dict[Word, np.ndarray] = {}
    second: Dict[Word, np.ndarray] = {}
    for u in sorted(need, key=word_key, reverse=True):
        own = g.get(u, np.zeros(q))
        a1 = own.copy()
        corr = np.zeros(q)
        for c in tree.children(u):
            if c in first:
                m1 = A @ first.pop(c)
                a1 += m1
                corr += A @ second.pop(c) - m1 * m1
        first[u] = a1
        second[u] = a1 * a1 + corr
    s1 = float(law @ first[()]) if () in first else 0.0
    s2 = float(law @ second[()]) if () in second else 0.0
    return c0 + s1, c0 * c0 + 2 * c0 * s1 + s2


def second_moment(tree: RootedTree, M, f: VertexPolynomial, nu=None) -> float:
    A = as_array(M)
    law = _root_law(A, nu)
    _check_nodes(tree, f)
    if _is_separable(f):
        return _separable_moments(tree, A, f, law)[1]
    if len(f.terms) > MAX_TERMS:
        raise TooLarge(f"{len(f.terms)} terms exceeds the pairwise-product guard of {MAX_TERMS}")
    terms = f.terms
    total = 0.0
    for i, s in enumerate(terms):
        total += float(law @ term_root_message(A, s.times(s)))
        for t in terms[i + 1:]:
            total += 2.0 * float(law @ term_root_message(A, s.times(t)))
    return total


def variance(tree: RootedTree, M, f: VertexPolynomial, nu=None) -> float:
    """``E f^2 - (E f)^2`` via pairwise term products (or an O(|T| q^2) pass for separable f)."""
    A = as_array(M)
    law = _root_law(A, nu)
    _check_nodes(tree, f)
    if _is_separable(f):
        m1, m2 = _separable_moments(tree, A, f, law)
    else:
        m1 = float(law @ conditional_root(tree, A, f))
        m2 = second_moment(tree, A, f, law)
    v = m2 - m1 * m1
    if v < 0:
        scale = max(1.0, abs(m2))
        if v < VAR_FLOOR * scale:
            raise ArithmeticError(f"negative variance {v:.3e}")
        v = 0.0
    return v


def var_conditional_on(tree: RootedTree, M, f: VertexPolynomial, w: Word = (), nu=None) -> float:
    """``Var(E[f | X_v, v not strictly below w])``; the root case is ``Var_theta E[f | X_root=theta]``."""
    A = as_array(M)
    law = _root_law(A, nu)
    w = tree.check(w)
    if w == ():
        h = conditional_root(tree, A, f)
        m = float(law @ h)
        return max(float(law @ (h * h)) - m * m, 0.0)
    return variance(tree, A, conditional_expectation_U(tree, A, f, [w]), law)


def correlation(tree: RootedTree, M, f: VertexPolynomial, g: VertexPolynomial, nu=None) -> float:
    A = as_array(M)
    law = _root_law(A, nu)
    cov = expectation(tree, A, f * g, law) - expectation(tree, A, f, law) * expectation(tree, A, g, law)
    vf, vg = variance(tree, A, f, law), variance(tree, A, g, law)
    return cov / np.sqrt(vf * vg)


@dataclass
class TotalVarianceTerms:
    total: float
    root_term: float
    middle_terms: float
    bottom_terms: float

    @property
    def residual(self) -> float:
        return self.total - (self.root_term + self.middle_terms + self.bottom_terms)


def total_variance_terms(tree: RootedTree, M, parts: Mapping[Word, VertexPolynomial],
                         rho_prime: Word, k: int, nu=None) -> TotalVarianceTerms:
    """Three-term variance split of ``g = sum_{v in D_k(rho')} g_v`` (each g_v on the subtree of v).

    ``Var g = Var[(E_rho' g)(X_rho')]
             + sum_{w != rho', h(w) >= k} E Var[(E_w g_w)(X_w) | X_p(w)]
             + sum_v E Var[g_v | X_v]``.
    """
    A = as_array(M)
    law = _root_law(A, nu)
    layer = tree.descendants_at_height(rho_prime, k)
    g = VertexPolynomial()
    msg: Dict[Word, np.ndarray] = {}
    bottom = 0.0
    for v in layer:
        gv = parts.get(v, VertexPolynomial())
        g = g + gv
        m = message_at(tree, A, gv, v)
        msg[v] = m
        lv = node_law(tree, A, v, law)
        bottom += second_moment(tree, A, gv, law) - float(lv @ (m * m))
    total = variance(tree, A, g, law)
    middle = 0.0
    for h in range(k, tree.height(rho_prime)):
        for w in tree.descendants_at_height(rho_prime, h):
            a = msg[w]
            lp = node_law(tree, A, w[:-1], law)
            middle += float(lp @ (A @ (a * a) - (A @ a) ** 2))
        # messages one level up
        for p in tree.descendants_at_height(rho_prime, h + 1):
            msg[p] = sum((A @ msg[c] for c in tree.children(p)), np.zeros(A.shape[0]))
    top = msg[rho_prime]
    lr = node_law(tree, A, rho_prime, law)
    root_term = float(lr @ (top * top)) - float(lr @ top) ** 2
    return TotalVarianceTerms(total, root_term, middle, bottom)


# -- enumeration oracle ---------------------------------------------------------------

class Enumeration:
    """Full joint probability table of the broadcast process (``q^|T|`` entries)."""

    def __init__(self, tree: RootedTree, M, nu=None):
        A = as_array(M)
        q = A.shape[0]
        n = len(tree)
        if q ** n > BRUTE_FORCE_CAP:
            raise TooLarge(f"q^|T| = {q}^{n} exceeds {BRUTE_FORCE_CAP}")
        self.tree, self.A, self.q = tree, A, q
        self.nu = _root_law(A, nu)
        P = self.nu.copy()
        for i, u in enumerate(tree.nodes[1:], start=1):
            j = tree.index[u[:-1]]
            shape = [1] * (i + 1)
            shape[j] = q
            shape[i] = q
            P = P[..., None] * A.reshape(shape)
        self.P = P
        self._marg: Dict[Tuple[int, ...], np.ndarray] = {}

    def mass(self) -> float:
        return float(self.P.sum())

    def marginal(self, axes: Sequence[int]) -> np.ndarray:
        axes = tuple(sorted(set(axes)))
        if axes not in self._marg:
            drop = tuple(i for i in range(self.P.ndim) if i not in axes)
            self._marg[axes] = self.P.sum(axis=drop) if drop else self.P
        return self._marg[axes]

    def _grid(self, f: VertexPolynomial, axes: Tuple[int, ...]) -> np.ndarray:
        pos = {a: k for k, a in enumerate(axes)}
        out = np.zeros((self.q,) * len(axes))
        for t in f.terms:
            val = np.full((1,) * len(axes), t.coeff)
            for v, vec in t.factors.items():
                shape = [1] * len(axes)
                shape[pos[self.tree.index[v]]] = self.q
                val = val * np.asarray(vec).reshape(shape)
            out = out + val
        return out

    def _table(self, f: VertexPolynomial):
        _check_nodes(self.tree, f)
        axes = tuple(sorted({0} | {self.tree.index[v] for v in f.nodes()}))
        return self.marginal(axes), self._grid(f, axes)

    def expectation(self, f: VertexPolynomial) -> float:
        P, F = self._table(f)
        return float((P * F).sum())

    def variance(self, f: VertexPolynomial) -> float:
        P, F = self._table(f)
        m = float((P * F).sum())
        return float((P * F * F).sum()) - m * m

    def conditional_root(self, f: VertexPolynomial) -> np.ndarray:
        P, F = self._table(f)
        num = (P * F).reshape(self.q, -1).sum(axis=1)
        den = P.reshape(self.q, -1).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / den, 0.0)

    def var_conditional_root(self, f: VertexPolynomial) -> float:
        h = self.conditional_root(f)
        pr = self.marginal((0,))
        m = float(pr @ h)
        return float(pr @ (h * h)) - m * m

    def moments(self, f: VertexPolynomial) -> Tuple[float, float, float]:
        """``(E f, Var f, Var E[f | X_root])`` from a single pass over the table."""
        P, F = self._table(f)
        PF = P * F
        m = float(PF.sum())
        var = float((PF * F).sum()) - m * m
        num = PF.reshape(self.q, -1).sum(axis=1)
        den = P.reshape(self.q, -1).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            h = np.where(den > 0, num / den, 0.0)
        mc = float(den @ h)
        return m, var, float(den @ (h * h)) - mc * mc

    def root_posterior(self, observation: Mapping[Word, int]) -> np.ndarray:
        leaves = [self.tree.index[v] for v in self.tree.leaves]
        axes = tuple(sorted({0} | set(leaves)))
        P = self.marginal(axes)
        idx = [slice(None)] + [observation[self.tree.nodes[a]] for a in axes if a != 0]
        col = np.array(P[tuple(idx)], dtype=float)
        if () in self.tree.leaves:
            # single-vertex tree: the root itself is observed
            seen = int(observation[()])
            col = np.where(np.arange(self.q) == seen, col, 0.0)
        if not col.sum() > 0:
            raise ZeroLikelihood("the observation has probability zero")
        return col / col.sum()


_ENUM_CACHE: Dict[tuple, Enumeration] = {}


def enumeration(tree: RootedTree, M, nu=None) -> Enumeration:
    A = as_array(M)
    law = _root_law(A, nu)
    key = (tree.nodes, A.tobytes(), law.tobytes())
    if key not in _ENUM_CACHE:
        if len(_ENUM_CACHE) >= 2:
            _ENUM_CACHE.pop(next(iter(_ENUM_CACHE)))
        _ENUM_CACHE[key] = Enumeration(tree, A, law)
    return _ENUM_CACHE[key]


def brute_force(tree: RootedTree, M, query: str, f: Optional[VertexPolynomial] = None,
                observation: Optional[Mapping[Word, int]] = None, nu=None):
    """Answer ``query`` by summing the full joint table.

    ``query`` is one of ``mass``, ``expectation``, ``variance``,
    ``conditional_root``, ``var_conditional_root``, ``root_posterior``.
    """
    e = enumeration(tree, M, nu)
    if query == "mass":
        return e.mass()
    if query == "root_posterior":
        return e.root_posterior(observation)
    if f is None:
        raise ValueError(f"query {query!r} needs a polynomial")
    return getattr(e, query)(f)


__all__ = [
    "ProductTerm", "VertexPolynomial", "BroadcastSample", "sample", "sample_many",
    "expectation", "conditional_expectation_U", "variance", "var_conditional_on",
    "second_moment", "conditional_root", "message_at", "node_law", "correlation",
    "total_variance_terms", "TotalVarianceTerms", "brute_force", "Enumeration", "enumeration",
]
