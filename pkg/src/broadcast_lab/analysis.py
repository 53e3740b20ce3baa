"""Verification harness: decay ratios, threshold sweeps, root posteriors, assumption checkers.

Everything here is exact (engine message passing); random inputs come from
seeded ``numpy`` generators.  The checkers report empirical parameters rather
than asserting unknown constants.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from . import engine
from .engine import ProductTerm, VertexPolynomial
from .errors import ZeroLikelihood, ZeroVariance
from .markov import (as_array, build_site_basis, epsilon_from, second_eigenvalue,
                     site_basis_from_pi, stationary_distribution, symmetric2, threshold_value)
from .polyspace import (CapacityFamily, LeafPolynomial, SetFamily, efron_stein_degree,
                        fractal_capacity, make_sigma, validate_closed)
from .tree import RootedTree, Word, make_dary

ZERO_VAR = 1e-14


def _max_branching(tree: RootedTree) -> int:
    return max(1, max(tree.n_children(u) for u in tree.nodes))


def _law(M, nu):
    return stationary_distribution(M) if nu is None else np.asarray(nu, dtype=float)


# -- random inputs ---------------------------------------------------------------------

def random_leaf_polynomial(tree: RootedTree, q: int, rng: np.random.Generator, n_terms: int = 6,
                           max_support: int = 3, family: Optional[SetFamily] = None,
                           leaves: Optional[Sequence[Word]] = None, constant: bool = False,
                           max_tries: int = 50) -> LeafPolynomial:
    """Coefficients uniform on [-1, 1]; supports drawn from ``leaves`` and kept only if in ``family``."""
    pool = list(leaves if leaves is not None else tree.leaves)
    f = LeafPolynomial()
    for _ in range(n_terms):
        S = None
        for _ in range(max_tries):
            size = int(rng.integers(1, min(max_support, len(pool)) + 1))
            cand = [pool[i] for i in sorted(rng.choice(len(pool), size=size, replace=False))]
            if family is None or frozenset(cand) in family:
                S = cand
                break
        if S is None:
            S = [pool[int(rng.integers(len(pool)))]]
        f.add_term(make_sigma({v: int(rng.integers(1, q)) for v in S}), float(rng.uniform(-1, 1)))
    if constant:
        f.add_term((), float(rng.uniform(-1, 1)))
    return f


def random_vertex_polynomial(tree: RootedTree, q: int, rng: np.random.Generator, n_terms: int = 4,
                             max_factors: int = 3, vertices: Optional[Sequence[Word]] = None) -> VertexPolynomial:
    """Product terms with standard-normal factor vectors on random vertices, plus a constant."""
    pool = list(vertices if vertices is not None else tree.nodes)
    terms = [ProductTerm(float(rng.uniform(-1, 1)))]
    for _ in range(n_terms):
        k = int(rng.integers(1, min(max_factors, len(pool)) + 1))
        picks = rng.choice(len(pool), size=k, replace=False)
        terms.append(ProductTerm(float(rng.uniform(-1, 1)),
                                 {pool[i]: rng.standard_normal(q) for i in picks}))
    return VertexPolynomial(terms)


def center(tree: RootedTree, M, f: LeafPolynomial, nu=None) -> LeafPolynomial:
    """Shift the constant coefficient so that ``E f = 0``."""
    law = _law(M, nu)
    m = engine.expectation(tree, M, f.to_vertex(site_basis_from_pi(law)), law)
    out = f.copy()
    out.add_term((), -m)
    return out


# -- decay -------------------------------------------------------------------------------

@dataclass
class DecayReport:
    var_f: float
    var_cond_root: float
    ratio: float
    bound: float
    degree: int
    capacity: int
    passed: bool
    lam: float
    d: float

    def to_dict(self) -> dict:
        return asdict(self)


def decay_report(tree: RootedTree, M, f: LeafPolynomial, d: Optional[float] = None) -> DecayReport:
    """Exact ``Var(E[f | X_root]) / Var f`` against ``max{d lam^2, lam}^(depth/4)``."""
    A = as_array(M)
    basis = build_site_basis(A)
    fv = f.to_vertex(basis)
    vf = engine.variance(tree, A, fv)
    if vf <= ZERO_VAR:
        raise ZeroVariance("Var f = 0")
    vc = engine.var_conditional_on(tree, A, fv, ())
    d = _max_branching(tree) if d is None else d
    lam = second_eigenvalue(A)
    bound = threshold_value(lam, d) ** (tree.depth / 4)
    sup = f.leaf_support()
    ratio = vc / vf
    return DecayReport(vf, vc, ratio, bound, efron_stein_degree(f),
                       fractal_capacity(tree, sup) if sup else 0, bool(ratio <= bound), lam, d)


def correlation_with_root(tree: RootedTree, M, f: LeafPolynomial, g) -> float:
    """Pearson correlation of ``f(X_L)`` and ``g(X_root)``."""
    A = as_array(M)
    pi = stationary_distribution(A)
    fv = f.to_vertex(site_basis_from_pi(pi))
    g = np.asarray(g, dtype=float)
    vf = engine.variance(tree, A, fv)
    vg = float(pi @ g ** 2) - float(pi @ g) ** 2
    if vf <= ZERO_VAR or vg <= ZERO_VAR:
        raise ZeroVariance("correlation needs two non-degenerate variables")
    h = engine.conditional_root(tree, A, fv)
    cov = float(pi @ (h * g)) - float(pi @ h) * float(pi @ g)
    return cov / math.sqrt(vf * vg)


# -- threshold sweep ------------------------------------------------------------------------

def count_variance_closed_form(d: int, depth: int, lam: float) -> float:
    """``Var sum_{v in L} phi_1(x_v)`` on the d-ary tree: ``sum_{u,v} lam^(2 h(lca))``."""
    total = 1.0  # v = u
    for j in range(1, depth + 1):
        total += (d - 1) * d ** (j - 1) * lam ** (2 * j)
    return d ** depth * total


def count_ratio_closed_form(d: int, depth: int, lam: float) -> float:
    return (d * lam) ** (2 * depth) / count_variance_closed_form(d, depth, lam)


@dataclass
class SweepRow:
    lam: float
    d: int
    depth: int
    statistic: str
    ratio: float
    correlation: float
    bound: float
    closed_form: float
    quotient: float   # ratio(depth) / ratio(depth - 1); nan for the first depth of a lambda

    @property
    def oracle_gap(self) -> float:
        return abs(self.ratio - self.closed_form)

    def to_dict(self) -> dict:
        return asdict(self)


def count_statistic(tree: RootedTree) -> VertexPolynomial:
    phi1 = np.array([1.0, -1.0])
    return VertexPolynomial(ProductTerm(1.0, {v: phi1}) for v in tree.leaves)


def ks_sweep(d: int, depths: Iterable[int], lambdas: Iterable[float], statistic: str = "count") -> List[SweepRow]:
    """Exact count-statistic ratios for 2-state symmetric chains, one row per (lambda, depth)."""
    if statistic != "count":
        raise ValueError(f"unknown statistic {statistic!r}")
    depths = list(depths)
    rows: List[SweepRow] = []
    phi1 = np.array([1.0, -1.0])
    for lam in lambdas:
        M = symmetric2(lam)
        prev = math.nan
        for ell in depths:
            tree = make_dary(d, ell)
            f = count_statistic(tree)
            vf = engine.variance(tree, M, f)
            ratio = engine.var_conditional_on(tree, M, f, ()) / vf
            h = engine.conditional_root(tree, M, f)
            corr = float(0.5 * (h * phi1).sum()) / math.sqrt(vf)
            t = threshold_value(abs(lam), d)
            q = ratio / prev if prev and not math.isnan(prev) and prev > 0 else math.nan
            rows.append(SweepRow(float(lam), d, ell, statistic, ratio, corr, t ** (ell / 4),
                                 count_ratio_closed_form(d, ell, lam), q))
            prev = ratio
    return rows


# -- belief propagation ------------------------------------------------------------------------

def bp_root_posterior(tree: RootedTree, M, leaf_observation: Mapping[Word, int], nu=None) -> np.ndarray:
    """Exact ``P(X_root = . | X_L)`` from upward likelihood messages."""
    A = as_array(M)
    q = A.shape[0]
    prior = _law(A, nu)
    msg: Dict[Word, np.ndarray] = {}
    for v in tree.leaves:
        if v not in leaf_observation:
            raise ValueError(f"leaf {v} is unobserved")
        e = np.zeros(q)
        e[int(leaf_observation[v])] = 1.0
        msg[v] = e
    for u in reversed(tree.nodes):
        if tree.n_children(u):
            m = np.ones(q)
            for c in tree.children(u):
                m = m * (A @ msg.pop(c))
            # rescale to avoid underflow on deep trees
            s = m.max()
            msg[u] = m / s if s > 0 else m
    post = prior * msg[()]
    z = post.sum()
    if not z > 0:
        raise ZeroLikelihood("the observation has probability zero")
    return post / z


# -- assumption checkers -------------------------------------------------------------------------

def _as_family(tree: RootedTree, family) -> SetFamily:
    fam = CapacityFamily(tree, int(family)) if isinstance(family, (int, np.integer)) else family
    validate_closed(tree, fam)
    return fam


def _smallest_valid(required: Sequence[tuple], gate: bool = True) -> float:
    """Smallest H >= 0 with ``req <= H`` for every (height, req) with ``height >= H`` (all if not gated)."""
    if not required:
        return 0.0
    if not gate:
        return max(0.0, max(r for _, r in required))
    cands = sorted({0.0} | {max(0.0, r) for _, r in required} | {h + 1e-9 for h, _ in required})
    for H in cands:
        if all(r <= H for h, r in required if h >= H):
            return H
    return cands[-1]


def _eps(tree, A, eps, d):
    if eps is not None:
        return float(eps)
    return epsilon_from(second_eigenvalue(A), _max_branching(tree) if d is None else d)


@dataclass
class AssumptionAReport:
    h_star: float
    c_star: float
    eps: float
    n_var: int
    n_moment: int
    worst_margin_var: float      # min over checked v of exp(-eps (h - h*)) - ratio; >= 0 means pass
    worst_margin_moment: float   # min over checked v of the two slacks, relative to E (E_v f)^2
    passed_var: bool
    passed_moment: bool
    h_star_min: float            # smallest h* valid on the sampled instances
    c_star_max: float            # largest c* valid on the sampled instances with h(v) >= h_star
    c_M: float
    c_star_implied: float          # min{c_M, min_j pi(j)}; equals c_M
    c_star_implied_holds: bool
    instances: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.passed_var and self.passed_moment

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def _sample_instances(tree, A, fam, budget, rng, q, law, basis, centered):
    internal = list(tree.nodes)
    out = []
    for _ in range(budget):
        v = internal[int(rng.integers(len(internal)))]
        f = random_leaf_polynomial(tree, q, rng, n_terms=int(rng.integers(1, 6)), family=fam,
                                   leaves=tree.leaves_below(v), max_support=4)
        if centered:
            m = engine.expectation(tree, A, f.to_vertex(basis), law)
            f.add_term((), -m)
        out.append((v, f))
    return out


def check_assumption_A(tree: RootedTree, M, family, h_star: float, c_star: float,
                       sample_budget: int = 50, seed: int = 0, eps: Optional[float] = None,
                       d: Optional[float] = None, tol: float = 1e-12) -> AssumptionAReport:
    """Sampled check of the variance-decay and two-sided conditional-moment conditions.

    ``family`` is a :class:`SetFamily` or an integer ``k`` meaning ``A_k``.
    Polynomials are drawn below a random vertex ``v``; the decay condition
    is checked when ``h(v) >= h_star``, the moment condition additionally
    needs ``v`` to have a parent.
    """
    A = as_array(M)
    q = A.shape[0]
    fam = _as_family(tree, family)
    eps = _eps(tree, A, eps, d)
    law = stationary_distribution(A)
    basis = site_basis_from_pi(law)
    rng = np.random.default_rng(seed)
    req_var, worst0, worst1, n0, n1 = [], math.inf, math.inf, 0, 0
    cmax = math.inf
    rows = []
    for v, f in _sample_instances(tree, A, fam, sample_budget, rng, q, law, basis, centered=True):
        h = tree.height(v)
        fv = f.to_vertex(basis)
        vf = engine.variance(tree, A, fv)
        if vf <= ZERO_VAR:
            continue
        m = engine.message_at(tree, A, fv, v)
        lv = engine.node_law(tree, A, v)
        mean_m = float(lv @ m)
        ratio = max(float(lv @ (m * m)) - mean_m ** 2, 0.0) / vf
        req = h + (math.log(ratio) / eps if ratio > 0 else -math.inf)
        req_var.append((h, req))
        row = {"v": ".".join(map(str, v)), "h": h, "ratio": ratio}
        if h >= h_star:
            n0 += 1
            worst0 = min(worst0, math.exp(-eps * (h - h_star)) - ratio)
        if v:
            g = m * m
            eg = float(lv @ g)
            if eg > ZERO_VAR:
                mg = A @ g
                lo, hi = float(mg.min()) / eg, eg / float(mg.max())
                row["c_valid"] = min(lo, hi)
                if h >= h_star:
                    n1 += 1
                    cmax = min(cmax, lo, hi)
                    worst1 = min(worst1, lo - c_star, 1.0 / c_star - 1.0 / hi)
        rows.append(row)
    cM = float(A.min())
    c_implied = min(cM, float(law.min()))
    cmax = 1.0 if cmax == math.inf else cmax
    return AssumptionAReport(
        h_star, c_star, eps, n0, n1,
        worst0 if n0 else math.inf, worst1 if n1 else math.inf,
        n0 == 0 or worst0 >= -tol, n1 == 0 or worst1 >= -tol,
        _smallest_valid(req_var), cmax, cM, c_implied,
        c_implied <= 0 or cmax >= c_implied - 1e-12, rows)


@dataclass
class AssumptionAgReport:
    h_circ: float
    eps: float
    n_var: int
    n_cov: int
    worst_margin_var: float
    worst_margin_cov: float
    passed_var: bool
    passed_cov: bool
    h_circ_min: float
    cross_check: Optional[AssumptionAReport] = None
    instances: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.passed_var and self.passed_cov

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "cross_check"}
        out["passed"] = self.passed
        if self.cross_check is not None:
            out["cross_check"] = self.cross_check.to_dict()
        return out


def check_assumption_Ag(tree: RootedTree, M, family, h_circ: float, sample_budget: int = 50,
                        seed: int = 0, eps: Optional[float] = None, d: Optional[float] = None,
                        tol: float = 1e-12, cross_check: bool = True) -> AssumptionAgReport:
    """Sampled check of the decay condition and the sup-norm covariance condition below ``u``.

    With ``cross_check`` the A-checker is rerun on the same seed with
    ``h* = h_circ_min + (2/eps) ln 2`` and ``c* = 1/2``.
    """
    A = as_array(M)
    q = A.shape[0]
    fam = _as_family(tree, family)
    eps = _eps(tree, A, eps, d)
    law = stationary_distribution(A)
    basis = site_basis_from_pi(law)
    rng = np.random.default_rng(seed)
    req0, req1 = [], []
    worst0 = worst1 = math.inf
    n0 = n1 = 0
    rows = []
    for u, f in _sample_instances(tree, A, fam, sample_budget, rng, q, law, basis, centered=True):
        h = tree.height(u)
        g = random_leaf_polynomial(tree, q, rng, n_terms=int(rng.integers(1, 6)), family=fam,
                                   leaves=tree.leaves_below(u), max_support=4)
        g.add_term((), -engine.expectation(tree, A, g.to_vertex(basis), law))
        fv, gv = f.to_vertex(basis), g.to_vertex(basis)
        vf = engine.variance(tree, A, fv)
        lu = engine.node_law(tree, A, u)
        row = {"u": ".".join(map(str, u)), "h": h}
        if vf > ZERO_VAR:
            m = engine.message_at(tree, A, fv, u)
            ratio = max(float(lu @ (m * m)) - float(lu @ m) ** 2, 0.0) / vf
            req0.append((h, h + (math.log(ratio) / eps if ratio > 0 else -math.inf)))
            n0 += 1
            worst0 = min(worst0, math.exp(-eps * (h - h_circ)) - ratio)
            row["ratio"] = ratio
        # the sampled pair (f, g) and the diagonal pair (f, f)
        for a, b, tag in ((fv, gv, "fg"), (fv, fv, "ff")):
            ab = engine.message_at(tree, A, a * b, u)
            lhs = float(np.max(np.abs(ab - float(lu @ ab))))
            rhs0 = math.sqrt(max(engine.message_at(tree, A, a * a, u).min(), 0.0)
                             * max(engine.message_at(tree, A, b * b, u).min(), 0.0))
            if lhs > 1e-13:
                req = h + 2.0 * math.log(lhs / rhs0) / eps if rhs0 > 0 else math.inf
            else:
                req = -math.inf
            req1.append((h, req))
            row.update({f"lhs_{tag}": lhs, f"rhs0_{tag}": rhs0})
            if h >= h_circ:
                n1 += 1
                worst1 = min(worst1, math.exp(-0.5 * eps * (h - h_circ)) * rhs0 - lhs)
        rows.append(row)
    h0 = _smallest_valid(req0, gate=False)
    h1 = _smallest_valid(req1)
    hmin = max(h0, h1)
    rep = AssumptionAgReport(h_circ, eps, n0, n1, worst0 if n0 else math.inf, worst1 if n1 else math.inf,
                             n0 == 0 or worst0 >= -tol, n1 == 0 or worst1 >= -tol, hmin, None, rows)
    if cross_check and math.isfinite(hmin):
        rep.cross_check = check_assumption_A(tree, A, fam, hmin + 2.0 * math.log(2.0) / eps, 0.5,
                                             sample_budget, seed, eps)
    return rep


__all__ = [
    "random_leaf_polynomial", "random_vertex_polynomial", "center",
    "DecayReport", "decay_report", "correlation_with_root",
    "count_variance_closed_form", "count_ratio_closed_form", "count_statistic", "SweepRow", "ks_sweep",
    "bp_root_posterior", "AssumptionAReport", "check_assumption_A",
    "AssumptionAgReport", "check_assumption_Ag",
]
