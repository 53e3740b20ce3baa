import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from broadcast_lab.errors import EmptySet, Extinct, HeightOutOfRange, NodeNotInTree, TooLarge
from broadcast_lab.tree import (RootedTree, check_domination, make_dary, nearest_common_ancestor,
                                parse_word, sample_galton_watson, word_str)


def bfs_layer(tree, u, k):
    """Vertices exactly k edges below u, by breadth-first expansion."""
    frontier = [u]
    for _ in range(k):
        frontier = [c for w in frontier for c in tree.children(w)]
    return frontier


def domination_oracle(tree, d):
    best = 1.0
    for u in tree.nodes:
        for k in range(tree.height(u) + 1):
            best = max(best, len(bfs_layer(tree, u, k)) / d ** k)
    return best


def prefix_oracle(S):
    S = list(S)
    out = ()
    for i in range(min(map(len, S))):
        if len({w[i] for w in S}) == 1:
            out += (S[0][i],)
        else:
            break
    return out


def _gw_or_none(m, dep, s):
    try:
        return sample_galton_watson(m, dep, s)
    except Extinct:
        return make_dary(2, dep)


trees = st.one_of(
    st.builds(make_dary, st.integers(1, 3), st.integers(0, 4)),
    st.builds(_gw_or_none, st.floats(1.2, 2.5), st.integers(1, 4), st.integers(0, 10_000)),
)


@pytest.mark.parametrize("d, depth, n_nodes, n_leaves", [(2, 3, 15, 8), (1, 5, 6, 1), (3, 2, 13, 9), (4, 0, 1, 1)])
def test_make_dary_counts(d, depth, n_nodes, n_leaves):
    t = make_dary(d, depth)
    assert len(t) == n_nodes and len(t.leaves) == n_leaves


def test_make_dary_too_large():
    with pytest.raises(TooLarge):
        make_dary(10, 7)


def test_words_and_heights():
    t = make_dary(2, 3)
    assert t.nodes[0] == () and t.nodes[1] == (1,)
    assert t.height(()) == 3 and t.height((2, 1, 2)) == 0
    assert t.parent((2, 1)) == (2,)
    assert t.children((1,)) == [(1, 1), (1, 2)]
    assert t.ancestor((2, 1, 2), 2) == (2,)
    with pytest.raises(HeightOutOfRange):
        t.ancestor((2,), 2)
    with pytest.raises(NodeNotInTree):
        t.check((3,))
    with pytest.raises(NodeNotInTree):
        t.parent(())


def test_word_text_round_trip():
    assert word_str((1, 2, 3)) == "1.2.3"
    assert parse_word("1.2.3") == (1, 2, 3)
    assert parse_word("") == ()


def test_leaf_alignment_enforced():
    with pytest.raises(ValueError):
        RootedTree({(): 2, (1,): 1})


def test_unreachable_counts_rejected():
    with pytest.raises(NodeNotInTree):
        RootedTree({(): 1, (3,): 1})


@pytest.mark.parametrize("u, k, size", [((), 0, 8), ((), 1, 4), ((), 3, 1), ((1,), 1, 2)])
def test_descendants_at_height(u, k, size):
    t = make_dary(2, 3)
    got = t.descendants_at_height(u, k)
    assert len(got) == size
    assert got == bfs_layer(t, u, t.height(u) - k)


def test_descendants_at_height_range():
    t = make_dary(2, 3)
    with pytest.raises(HeightOutOfRange):
        t.descendants_at_height((1,), 3)
    assert t.descendants_at_height((), 0) == list(t.leaves)


@pytest.mark.parametrize("S, expected", [
    ([(1, 1, 1), (1, 1, 2)], (1, 1)),
    ([(2, 1, 2)], (2, 1, 2)),
    ([(1, 1, 1), (2, 1, 1)], ()),
    ([(1, 2, 1), (1, 2, 2), (1, 1, 2)], (1,)),
])
def test_nearest_common_ancestor(S, expected):
    assert nearest_common_ancestor(S) == expected == prefix_oracle(S)


def test_nca_empty():
    with pytest.raises(EmptySet):
        nearest_common_ancestor([])


@given(trees, st.data())
def test_nca_properties(t, data):
    S = data.draw(st.lists(st.sampled_from(t.nodes), min_size=1, max_size=5))
    a = nearest_common_ancestor(S)
    assert all(RootedTree.is_below(s, a) for s in S)
    for c in t.children(a):
        assert not all(RootedTree.is_below(s, c) for s in S)


@pytest.mark.parametrize("tree, d, expected", [
    (make_dary(3, 2), 3, 1.0),
    (make_dary(1, 4), 1, 1.0),
    (make_dary(2, 3), 1.5, (4 / 3) ** 3),
])
def test_check_domination(tree, d, expected):
    assert check_domination(tree, d) == pytest.approx(expected, rel=1e-12)


@given(trees, st.floats(1.0, 3.0))
def test_domination_matches_enumeration(t, d):
    R = check_domination(t, d)
    assert R == pytest.approx(domination_oracle(t, d), rel=1e-12)
    for u in t.nodes:
        for k in range(t.height(u) + 1):
            assert len(bfs_layer(t, u, k)) <= R * d ** k * (1 + 1e-12)


@given(trees)
def test_structural_invariants(t):
    assert sum(t.layer_sizes) == len(t)
    for u in t.nodes[1:]:
        assert t.height(t.parent(u)) == t.height(u) + 1
    assert all(t.height(v) == 0 for v in t.leaves)


def test_gw_extinct_with_zero_mean():
    with pytest.raises(Extinct):
        sample_galton_watson(0.0, 2, seed=1)


def test_gw_deterministic_and_aligned():
    a = sample_galton_watson(2.0, 4, seed=0)
    b = sample_galton_watson(2.0, 4, seed=0)
    assert a == b and a.to_json() == b.to_json()
    assert all(len(v) == 4 for v in a.leaves)
    assert all(a.n_children(u) > 0 for u in a.nodes if len(u) < 4)


def test_gw_too_large():
    with pytest.raises(TooLarge):
        sample_galton_watson(30.0, 5, seed=0, max_nodes=1000)


def test_gw_domination_over_seeds():
    Rs = []
    for seed in range(200):
        try:
            t = sample_galton_watson(2.0, 6, seed)
        except Extinct:
            continue
        Rs.append(check_domination(t, 2.0))
    assert len(Rs) > 50
    assert np.isfinite(np.median(Rs))


@given(trees)
def test_tree_json_round_trip(t):
    assert RootedTree.from_dict(t.to_dict()) == t
