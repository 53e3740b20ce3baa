import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from broadcast_lab import engine, markov
from broadcast_lab import polyspace as ps
from broadcast_lab.analysis import center, random_leaf_polynomial
from broadcast_lab.engine import ProductTerm, VertexPolynomial
from broadcast_lab.errors import (BadSupport, EmptySet, NotCentered, NotClosed, NotDegreeOne,
                                  TooLarge, TooSmall)
from broadcast_lab.markov import site_basis_from_pi
from broadcast_lab.tree import RootedTree, make_dary, sample_galton_watson

REDUCIBLE4 = 0.5 * np.array([[1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1]], dtype=float)
UNIFORM4 = np.full(4, 0.25)


def positive_chain(q, seed):
    return markov.random_chain(q, np.random.default_rng(seed), strictly_positive=True)


def basis_of(M):
    return markov.build_site_basis(M)


def leaf_assignments(tree, q, limit=None, rng=None):
    """All assignments of the leaves (internal nodes at state 0), or a random batch."""
    idx = [tree.index[v] for v in tree.leaves]
    if limit is None:
        rows = list(itertools.product(range(q), repeat=len(idx)))
    else:
        rows = rng.integers(0, q, (limit, len(idx)))
    X = np.zeros((len(rows), len(tree)), dtype=int)
    X[:, idx] = np.asarray(rows)
    return X


# -- test-side A_k oracle on bitmasks ---------------------------------------------------

def ak_bitmask_oracle(tree, kmax):
    """Capacity of every non-empty leaf subset from an independent bitmask construction."""
    L = list(tree.leaves)
    n = len(L)

    def parts(mask):
        members = [L[i] for i in range(n) if mask >> i & 1]
        depth = 0
        while all(len(w) > depth for w in members) and len({w[depth] for w in members}) == 1:
            depth += 1
        groups = {}
        for i in range(n):
            if mask >> i & 1:
                groups[L[i][depth]] = groups.get(L[i][depth], 0) | (1 << i)
        return list(groups.values())

    cap = {1 << i: 1 for i in range(n)}
    fam = set(cap)
    for k in range(2, kmax + 1):
        new = {m for m in range(1, 1 << n) if m not in fam and bin(m).count("1") >= 2
               and all(p in fam for p in parts(m))}
        for m in new:
            cap[m] = k
        fam |= new
    return {frozenset(L[i] for i in range(n) if m >> i & 1): c for m, c in cap.items()}


# -- leaf polynomials ---------------------------------------------------------------------------

@given(st.integers(2, 4), st.integers(0, 10_000))
def test_leaf_polynomial_vertex_round_trip(q, seed):
    rng = np.random.default_rng(seed)
    t = make_dary(2, 2)
    b = basis_of(positive_chain(q, seed))
    f = random_leaf_polynomial(t, q, rng, constant=True)
    g = ps.LeafPolynomial.from_vertex(t, b, f.to_vertex(b))
    assert f.max_abs_diff(g) < 1e-12


def test_from_vertex_rejects_internal_factor():
    t = make_dary(2, 2)
    b = basis_of(markov.symmetric2(0.2))
    with pytest.raises(BadSupport):
        ps.LeafPolynomial.from_vertex(t, b, VertexPolynomial.single((1,), np.ones(2)))


def test_leaf_polynomial_json_round_trip(rng):
    t = make_dary(3, 2)
    f = random_leaf_polynomial(t, 3, rng, constant=True)
    assert ps.LeafPolynomial.from_dict(f.to_dict()).max_abs_diff(f) == 0.0


@pytest.mark.parametrize("terms, degree", [
    ({(): 2.0}, 0),
    ({((1, 1), 1): 1.0}, 1),
    ({((1, 1), 1): 1.0, ((1, 1), 1, (1, 2), 1, (2, 1), 2): 0.5, ((2, 2), 1): -1.0}, 3),
])
def test_efron_stein_degree(terms, degree):
    f = ps.LeafPolynomial()
    for flat, c in terms.items():
        pairs = [(flat[i], flat[i + 1]) for i in range(0, len(flat), 2)]
        f.add_term(ps.make_sigma(pairs), c)
    assert ps.efron_stein_degree(f) == degree


# -- branch decomposition --------------------------------------------------------------------

def test_branch_decompose_siblings():
    bp = ps.branch_decompose(make_dary(2, 3), [(1, 2, 1), (1, 2, 2)])
    assert bp.rho_S == (1, 2) and bp.I_S == (1, 2)
    assert bp.parts == {1: frozenset({(1, 2, 1)}), 2: frozenset({(1, 2, 2)})}


def test_branch_decompose_full_leaf_set():
    t = make_dary(2, 3)
    bp = ps.branch_decompose(t, t.leaves)
    assert bp.rho_S == ()
    assert {i: len(p) for i, p in bp.parts.items()} == {1: 4, 2: 4}


def test_branch_decompose_too_small():
    with pytest.raises(TooSmall):
        ps.branch_decompose(make_dary(2, 2), [(1, 1)])


def test_branch_parts_random_sets():
    rng = np.random.default_rng(0)
    t = make_dary(3, 3)
    L = list(t.leaves)
    for _ in range(100):
        S = [L[i] for i in rng.choice(len(L), size=int(rng.integers(2, 8)), replace=False)]
        bp = ps.branch_decompose(t, S)
        prefix = tuple(x[0] for x in itertools.takewhile(lambda col: len(set(col)) == 1, zip(*S)))
        assert bp.rho_S == prefix
        assert len(bp.I_S) >= 2
        assert frozenset().union(*bp.parts.values()) == frozenset(S)
        assert sum(map(len, bp.parts.values())) == len(S)


# -- capacity and A_k ---------------------------------------------------------------------------

def test_capacity_basic():
    t = make_dary(2, 3)
    assert ps.fractal_capacity(t, [(1, 1, 1)]) == 1
    assert ps.fractal_capacity(t, t.leaves) == 4
    with pytest.raises(EmptySet):
        ps.fractal_capacity(t, [])


@pytest.mark.parametrize("tree", [make_dary(2, 3), make_dary(3, 2), RootedTree({(): 3, (1,): 1, (2,): 2, (3,): 2}),
                                  sample_galton_watson(1.5, 3, seed=7)])
def test_capacity_agrees_with_explicit_constructions(tree):
    L = list(tree.leaves)
    assert len(L) <= 9
    kmax = tree.depth + 1
    oracle = ak_bitmask_oracle(tree, kmax)
    families = [ps.build_Ak(tree, k) for k in range(1, kmax + 1)]
    for r in range(1, len(L) + 1):
        for S in map(frozenset, itertools.combinations(L, r)):
            cap = ps.fractal_capacity(tree, S)
            assert cap == oracle[S] == ps.capacity_by_construction(tree, S)
            assert cap == min(k for k, fam in enumerate(families, start=1) if S in fam)
            assert cap <= len(S)


def test_Ak_chain_properties():
    t = make_dary(2, 3)
    fams = [ps.build_Ak(t, k) for k in range(1, t.depth + 2)]
    assert fams[0] == {frozenset([v]) for v in t.leaves}
    for a, b in zip(fams, fams[1:]):
        assert a <= b
    assert all(frozenset(p) in fams[1] for p in itertools.combinations(t.leaves, 2))
    assert len(fams[-1]) == 2 ** len(t.leaves) - 1
    assert frozenset(t.leaves) not in fams[t.depth - 1] and frozenset(t.leaves) in fams[t.depth]


@pytest.mark.parametrize("d, depth", [(2, 4), (3, 3), (2, 5)])
def test_full_leaf_set_capacity_on_regular_trees(d, depth):
    t = make_dary(d, depth)
    assert ps.fractal_capacity(t, t.leaves) == depth + 1 == ps.capacity_by_construction(t, t.leaves)


def test_build_Ak_refuses_large_trees():
    with pytest.raises(TooLarge):
        ps.build_Ak(make_dary(2, 4), 2)


@given(st.integers(0, 10_000))
@settings(max_examples=25)
def test_capacity_recursion_vs_construction_random(seed):
    rng = np.random.default_rng(seed)
    t = make_dary(3, 4)
    L = list(t.leaves)
    S = [L[i] for i in rng.choice(len(L), size=int(rng.integers(1, 20)), replace=False)]
    assert ps.fractal_capacity(t, S) == ps.capacity_by_construction(t, S)


def test_validate_closed():
    t = make_dary(2, 2)
    singletons = [[v] for v in t.leaves]
    ps.validate_closed(t, ps.ExplicitFamily(ps.build_Ak(t, 2)))
    ps.validate_closed(t, ps.CapacityFamily(t, 2))
    with pytest.raises(NotClosed):
        ps.validate_closed(t, ps.ExplicitFamily(singletons[1:]))
    with pytest.raises(NotClosed):
        ps.validate_closed(t, ps.ExplicitFamily(singletons + [list(t.leaves)]))


# -- psi basis -----------------------------------------------------------------------------------

def test_psi_equals_phi_for_zero_mean_parts():
    t = make_dary(2, 2)
    M = markov.symmetric2(0.5)
    sigma = ps.make_sigma({(1, 1): 1, (2, 2): 1})
    f = ps.psi_leaf(t, M, sigma)
    assert f.max_abs_diff(ps.LeafPolynomial({sigma: 1.0})) < 1e-15
    ex = ps.expand_phi_in_psi(t, M, sigma)
    assert not ex.a_subset.coeffs and not ex.a_less.coeffs and ex.a_const == 0


def test_psi_three_parts_term_count():
    t = make_dary(3, 1)
    M = positive_chain(3, 1)
    sigma = ps.make_sigma({(1,): 1, (2,): 2, (3,): 1})
    assert len(ps.psi_leaf(t, M, sigma)) <= 8
    with pytest.raises(TooSmall):
        ps.psi_leaf(t, M, ps.make_sigma({(1,): 1}))


@pytest.mark.parametrize("seed", range(4))
def test_psi_pointwise_matches_defining_product(seed):
    rng = np.random.default_rng(seed)
    t = make_dary(3, 2)
    M = positive_chain(3, seed)
    b = basis_of(M)
    sigma = ps.make_sigma({(1, 1): 1, (1, 2): 2, (2, 3): 1, (3, 1): 2})
    got = ps.psi(t, M, sigma).evaluate(t, leaf_assignments(t, 3, 100, rng))
    want = np.ones(100)
    X = leaf_assignments(t, 3, 100, np.random.default_rng(seed))
    for part in ps.sigma_parts(sigma).values():
        phi_part = VertexPolynomial([ProductTerm(1.0, {v: b.phi[i] for v, i in part})])
        want *= phi_part.evaluate(t, X) - engine.expectation(t, M, phi_part)
    np.testing.assert_allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_phi_in_psi_identity_on_all_assignments(seed):
    t = make_dary(2, 3)
    M = positive_chain(2, seed)
    b = basis_of(M)
    rng = np.random.default_rng(seed)
    L = list(t.leaves)
    chosen = [L[i] for i in rng.choice(len(L), size=int(rng.integers(2, 6)), replace=False)]
    sigma = ps.make_sigma({v: 1 for v in chosen})
    ex = ps.expand_phi_in_psi(t, M, sigma)
    X = leaf_assignments(t, 2)
    rhs = (ex.psi_product - ex.a_subset.to_vertex(b) - ex.a_less.to_vertex(b)).evaluate(t, X) - ex.a_const
    lhs = ps.LeafPolynomial({sigma: 1.0}).to_vertex(b).evaluate(t, X)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    u = ps.sigma_root(sigma)
    n_parts = len(ps.sigma_parts(sigma))
    for s in ex.a_less.coeffs:
        (v,) = {ps.sigma_root(s)} if len(s) > 1 else {s[0][0]}
        assert RootedTree.is_below(v, u) and v != u
    for s in ex.a_subset.coeffs:
        assert ps.sigma_root(s) == u and 2 <= len(ps.sigma_parts(s)) < n_parts
    if n_parts == 2:
        assert not ex.a_subset.coeffs


# -- decompose_pu ----------------------------------------------------------------------------

def _random_pu(t, q, rng, u=()):
    kids = t.children(u)
    f = ps.LeafPolynomial()
    for _ in range(5):
        picks = rng.choice(len(kids), size=int(rng.integers(2, len(kids) + 1)), replace=False)
        assign = {}
        for i in picks:
            leaves = t.descendants_at_height(kids[i], 0)
            for j in rng.choice(len(leaves), size=int(rng.integers(1, 3)), replace=False):
                assign[leaves[j]] = int(rng.integers(1, q))
        f.add_term(ps.make_sigma(assign), float(rng.uniform(-1, 1)))
    return f


@pytest.mark.parametrize("seed", range(5))
def test_decompose_pu_identity_and_centering(seed):
    rng = np.random.default_rng(seed)
    t = make_dary(3, 2)
    M = positive_chain(3, seed)
    b = basis_of(M)
    p = _random_pu(t, 3, rng)
    f_u, p_less, c_u = ps.decompose_pu(t, M, p)
    X = leaf_assignments(t, 3, 500, rng)
    lhs = p.to_vertex(b).evaluate(t, X)
    rhs = f_u.centered().to_vertex(b).evaluate(t, X) + p_less.to_vertex(b).evaluate(t, X) + c_u
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    assert abs(engine.expectation(t, M, f_u.centered().to_vertex(b))) < 1e-12
    for s in p_less.coeffs:
        if s:
            assert ps.sigma_root(s) != () or len(s) == 1


def test_decompose_pu_single_sigma_base_case():
    t = make_dary(2, 2)
    M = positive_chain(2, 3)
    sigma = ps.make_sigma({(1, 1): 1, (2, 1): 1})
    f_u, p_less, c_u = ps.decompose_pu(t, M, ps.LeafPolynomial({sigma: 2.0}))
    ex = ps.expand_phi_in_psi(t, M, sigma)
    assert f_u.psi_coeffs == {sigma: 2.0}
    assert p_less.max_abs_diff(ex.a_less.scaled(-2.0)) < 1e-15


def test_decompose_pu_zero():
    f_u, p_less, c_u = ps.decompose_pu(make_dary(2, 2), markov.symmetric2(0.3), ps.LeafPolynomial())
    assert not f_u.psi_coeffs and not p_less.coeffs and c_u == 0.0


def test_decompose_pu_bad_support():
    t = make_dary(2, 2)
    M = markov.symmetric2(0.3)
    with pytest.raises(BadSupport):
        ps.decompose_pu(t, M, ps.LeafPolynomial({ps.make_sigma({(1, 1): 1}): 1.0}))
    mixed = ps.LeafPolynomial({ps.make_sigma({(1, 1): 1, (1, 2): 1}): 1.0,
                               ps.make_sigma({(1, 1): 1, (2, 2): 1}): 1.0})
    with pytest.raises(BadSupport):
        ps.decompose_pu(t, M, mixed)


# -- full decomposition -------------------------------------------------------------------------

def test_full_decompose_single_psi():
    t = make_dary(2, 3)
    M = positive_chain(2, 7)
    b = basis_of(M)
    sigma = ps.make_sigma({(1, 1, 1): 1, (2, 1, 2): 1})
    f = center(t, M, ps.psi_leaf(t, M, sigma))
    dec = ps.full_decompose(t, M, f, k1=0)
    assert set(dec.f_u) == {()}
    X = leaf_assignments(t, 2)
    np.testing.assert_allclose(dec.f_k[3].evaluate(t, X), f.to_vertex(b).evaluate(t, X), atol=1e-12)
    for k in (0, 1, 2):
        np.testing.assert_allclose(dec.f_k[k].evaluate(t, X), 0.0, atol=1e-12)


def test_full_decompose_reducible_example():
    t = make_dary(2, 1)
    b = site_basis_from_pi(UNIFORM4)
    ind = np.array([1.0, 0, 1, 0])
    g = VertexPolynomial.single((1,), ind) - VertexPolynomial.single((2,), ind)
    f = ps.LeafPolynomial.from_vertex(t, b, g)
    assert engine.variance(t, REDUCIBLE4, f.to_vertex(b), UNIFORM4) < 1e-15
    dec = ps.full_decompose(t, REDUCIBLE4, f, k1=0, nu=UNIFORM4)
    assert dec.canonical.sum_var_naive == pytest.approx(0.5)
    assert dec.canonical.sum_var_parts < 1e-14
    for v, fb in dec.f_bar.items():
        assert engine.variance(t, REDUCIBLE4, fb, UNIFORM4) < 1e-14


@pytest.mark.parametrize("seed", range(3))
def test_full_decompose_random_identity_on_samples(seed):
    rng = np.random.default_rng(seed)
    t = make_dary(2, 4)
    M = positive_chain(2, 40 + seed)
    b = basis_of(M)
    f = center(t, M, random_leaf_polynomial(t, 2, rng, n_terms=8, max_support=2, constant=True))
    assert ps.efron_stein_degree(f) == 2
    dec = ps.full_decompose(t, M, f, k1=int(rng.integers(0, 3)))
    X = engine.sample_many(t, M, None, 10_000, seed=seed)
    np.testing.assert_allclose(dec.total().evaluate(t, X), f.to_vertex(b).evaluate(t, X), atol=1e-10)
    for fu in dec.f_u.values():
        assert abs(engine.expectation(t, M, fu.centered().to_vertex(b))) < 1e-10
    assert dec.sandwich_low >= 1 - 1e-9 and dec.sandwich_high >= 1 - 1e-9


def test_full_decompose_on_subtree_with_family():
    rng = np.random.default_rng(11)
    t = make_dary(2, 4)
    M = positive_chain(2, 5)
    b = basis_of(M)
    fam = ps.CapacityFamily(t, 2)
    sub = t.descendants_at_height((1,), 0)
    f = center(t, M, random_leaf_polynomial(t, 2, rng, n_terms=6, family=fam, leaves=sub))
    dec = ps.full_decompose(t, M, f, k1=1, rho_prime=(1,), family=fam)
    X = engine.sample_many(t, M, None, 2000, seed=1)
    np.testing.assert_allclose(dec.total().evaluate(t, X), f.to_vertex(b).evaluate(t, X), atol=1e-10)


def test_full_decompose_errors():
    t = make_dary(2, 2)
    M = markov.symmetric2(0.4)
    sigma = ps.make_sigma({(1, 1): 1, (2, 1): 1})
    with pytest.raises(NotCentered):
        ps.full_decompose(t, M, ps.LeafPolynomial({(): 1.0}), k1=0)
    with pytest.raises(ValueError):
        ps.full_decompose(t, M, ps.LeafPolynomial({sigma: 1.0}), k1=2)
    with pytest.raises(BadSupport):
        ps.full_decompose(t, M, ps.LeafPolynomial({sigma: 1.0}), k1=0, rho_prime=(1,))
    with pytest.raises(BadSupport):
        ps.full_decompose(t, M, ps.LeafPolynomial({sigma: 1.0}), k1=0, family=ps.CapacityFamily(t, 1))


# -- degree-one canonicalization -------------------------------------------------------------

def dist(u, v):
    k = 0
    while k < len(u) and u[k] == v[k]:
        k += 1
    return 2 * (len(u) - k)


@pytest.mark.parametrize("lam", [0.3, 0.7, -0.5])
def test_degree1_two_state_identity_and_closed_form(lam):
    t = make_dary(2, 3)
    M = markov.symmetric2(lam)
    phi1 = np.array([1.0, -1.0])
    a = np.random.default_rng(1).uniform(-1, 1, len(t.leaves))
    f = VertexPolynomial(ProductTerm(c, {v: phi1}) for c, v in zip(a, t.leaves))
    out = ps.degree1_canonicalize(t, M, f)
    for v in t.leaves:
        np.testing.assert_allclose(out.parts[v], out.naive[v], atol=1e-14)
    L = list(t.leaves)
    var_f = sum(a[i] * a[j] * lam ** dist(L[i], L[j]) for i in range(len(L)) for j in range(len(L)))
    assert out.var_f == pytest.approx(var_f)
    assert out.ratio == pytest.approx(float(np.sum(a ** 2)) / var_f)


def test_degree1_block_constant_input_unchanged():
    t = make_dary(2, 2)
    M = np.array([[0, 1, 0], [0, 0, 1], [0.5, 0.5, 0]])
    xb = ps.xi_basis(M)
    # xi_(1,1) is measurable one level up: give siblings equal coefficients
    f = VertexPolynomial()
    for v in t.leaves:
        c = 1.0 if v[0] == 1 else -2.0
        f = f + VertexPolynomial.single(v, c * xb.xi[(1, 1)] + 0.3 * xb.xi[(1, 0, 1)] * (v[1] - 1.5))
    out = ps.degree1_canonicalize(t, M, f)
    for v in t.leaves:
        np.testing.assert_allclose(out.parts[v], out.naive[v], atol=1e-12)


def test_degree1_reducible_parts_constant():
    t = make_dary(2, 1)
    ind = np.array([1.0, 0, 1, 0])
    f = VertexPolynomial.single((1,), ind) - VertexPolynomial.single((2,), ind)
    out = ps.degree1_canonicalize(t, REDUCIBLE4, f, nu=UNIFORM4)
    assert out.sum_var_naive == pytest.approx(0.5)
    assert out.sum_var_parts < 1e-14


@given(st.integers(0, 10_000))
@settings(max_examples=20)
def test_degree1_parts_sum_to_f_almost_surely(seed):
    rng = np.random.default_rng(seed)
    t = make_dary(2, 3)
    M = markov.random_chain(3, rng, density=0.5)
    f = VertexPolynomial([ProductTerm(0.4)] + [ProductTerm(1.0, {v: rng.standard_normal(3)}) for v in t.leaves])
    out = ps.degree1_canonicalize(t, M, f)
    X = engine.sample_many(t, M, None, 500, seed=seed)
    total = sum(VertexPolynomial.single(v, g).evaluate(t, X) for v, g in out.parts.items())
    np.testing.assert_allclose(total, f.evaluate(t, X), atol=1e-10)


def test_degree1_rejects_non_degree_one():
    t = make_dary(2, 2)
    M = markov.symmetric2(0.3)
    with pytest.raises(NotDegreeOne):
        ps.degree1_canonicalize(t, M, VertexPolynomial([ProductTerm(1.0, {(1, 1): np.ones(2), (1, 2): np.ones(2)})]))
    with pytest.raises(NotDegreeOne):
        ps.degree1_canonicalize(t, M, VertexPolynomial.single((1,), np.ones(2)))
