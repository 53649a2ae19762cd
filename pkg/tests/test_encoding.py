import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgt.encoding import (ComputationGraphSet, TreeShape, flatten_bfs, read_cgs, sample_computation_graph,
                          sample_computation_graphs, sample_node_ids, split_paths, tree_adjacency, unflatten_bfs,
                          write_cgs)
from cgt.graph import build_graph


def graph_from_edges(n, edges, d=2, seed=0):
    feats = np.random.default_rng(seed).normal(size=(n, d)) + 5.0
    g, _ = build_graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), feats, np.arange(n) % 2)
    return g


def random_graph(n, p, seed):
    rng = np.random.default_rng(seed)
    src, dst = np.nonzero(np.triu(rng.random((n, n)) < p, 1))
    return graph_from_edges(n, np.stack([src, dst], 1), seed=seed)


@pytest.mark.parametrize("s,L,T", [(2, 2, 7), (1, 3, 4), (3, 2, 13), (5, 2, 31), (2, 3, 15)])
def test_tree_size(s, L, T):
    shape = TreeShape(s, L)
    assert shape.T == T
    assert shape.T == sum(s**l for l in range(L + 1))


def test_tree_adjacency_examples():
    one_indexed = {tuple(e) for e in (tree_adjacency(TreeShape(2, 2)) + 1).tolist()}
    assert one_indexed == {(1, 2), (1, 3), (2, 4), (2, 5), (3, 6), (3, 7)}
    assert (tree_adjacency(TreeShape(1, 3)) + 1).tolist() == [[1, 2], [2, 3], [3, 4]]
    adj = tree_adjacency(TreeShape(3, 2))
    assert adj.shape == (12, 2) and TreeShape(3, 2).T == 13


@pytest.mark.parametrize("s,L", [(2, 2), (3, 2), (2, 3), (1, 4), (4, 1)])
def test_parent_formula_one_indexed(s, L):
    shape = TreeShape(s, L)
    for t1 in range(2, shape.T + 1):
        assert shape.parent(t1 - 1) + 1 == (t1 - 2) // s + 1
        assert len(shape.ancestors(t1 - 1)) == shape.layers[t1 - 1]
    assert shape.layers[0] == 0


def test_flatten_layers_and_round_trip():
    g = random_graph(12, 0.3, 1)
    cg = sample_computation_graph(g, 0, 2, 2, seed=3)
    rows, layers = flatten_bfs(cg)
    assert len(rows) == 7
    assert layers.tolist() == [0, 1, 1, 2, 2, 2, 2]
    back = unflatten_bfs(rows, cg.shape, cg.root_label, cg.source_node)
    assert np.array_equal(back.feature_rows, cg.feature_rows)


def test_split_paths_examples():
    shape = TreeShape(2, 2)
    paths = split_paths(list(range(1, 8)), shape, root_label=0)
    assert [p.tokens for p in paths] == [(1, 2, 4), (1, 2, 5), (1, 3, 6), (1, 3, 7)]
    one = split_paths(list("abcd"), TreeShape(1, 3), 0)
    assert len(one) == 1 and one[0].tokens == tuple("abcd")


def test_split_paths_coverage_counts():
    shape = TreeShape(3, 2)
    paths = split_paths(list(range(shape.T)), shape, 0)
    assert len(paths) == 9
    counts = np.bincount(np.concatenate([p.positions for p in paths]), minlength=shape.T)
    assert counts[0] == 9
    assert (counts[1:4] == 3).all()
    assert (counts[4:] == 1).all()
    for p in paths:
        for a, b in zip(p.positions, p.positions[1:]):
            assert shape.parent(b) == a


def test_path_first_visit_scores_each_position_once():
    for s, L in [(2, 2), (3, 2), (2, 3), (1, 3)]:
        shape = TreeShape(s, L)
        hits = np.zeros(shape.T, int)
        np.add.at(hits, shape.path_table[shape.path_first_visit], 1)
        assert (hits == 1).all()


def test_isolated_root():
    g = graph_from_edges(3, [(1, 2)])
    cg = sample_computation_graph(g, 0, 2, 2, seed=0)
    assert np.array_equal(cg.feature_rows[0], g.features[0])
    assert not cg.feature_rows[1:].any()


def check_tree(ids, g, s, L):
    shape = TreeShape(s, L)
    for p in range(shape.num_internal):
        kids = ids[shape.children(p).start:shape.children(p).stop]
        if ids[p] < 0:
            assert (kids < 0).all()
            continue
        live = kids[kids >= 0]
        nbrs = g.neighbors(ids[p])
        assert len(live) == min(s, len(nbrs))
        assert set(live.tolist()) <= set(nbrs.tolist())
        assert len(set(live.tolist())) == len(live)
        assert (np.diff(live) > 0).all()
        # nulls come last within the slot block
        assert (kids[:len(live)] >= 0).all()


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 30), p=st.floats(0, 0.6), s=st.integers(1, 4), L=st.integers(1, 3),
       seed=st.integers(0, 2**63))
def test_sampler_structure(n, p, s, L, seed):
    g = random_graph(n, p, seed % 997)
    ids = sample_node_ids(g, np.arange(n), s, L, seed)
    for v in range(n):
        assert ids[v, 0] == v
        check_tree(ids[v], g, s, L)
        if g.degree(v) >= s:
            assert (ids[v, 1:s + 1] >= 0).all()


def test_null_propagation_over_many_samples():
    g = random_graph(200, 0.015, 4)
    cgs = sample_computation_graphs(g, None, 3, 3, seed=11)
    shape = cgs.shape
    null = cgs.null_mask
    for t in range(1, shape.T):
        par = shape.parent(t)
        assert not (null[:, par] & ~null[:, t]).any()
    assert len(cgs) == 200


def test_sampling_is_deterministic_and_seed_sensitive():
    g = random_graph(50, 0.2, 0)
    a = sample_node_ids(g, np.arange(50), 3, 2, 7)
    b = sample_node_ids(g, np.arange(50), 3, 2, 7)
    c = sample_node_ids(g, np.arange(50), 3, 2, 8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    # a node's tree does not depend on which other roots are in the batch
    assert np.array_equal(sample_node_ids(g, [17], 3, 2, 7)[0], a[17])


def test_triangle_duplicates_by_enumeration():
    g = graph_from_edges(3, [(0, 1), (1, 2), (0, 2)])
    # exhaustive: root A has children {B, C}; each of B, C has both other nodes
    for seed in range(20):
        ids = sample_node_ids(g, [0], 2, 2, seed)[0]
        assert ids.tolist() == [0, 1, 2, 0, 2, 0, 1]
        cg = sample_computation_graph(g, 0, 2, 2, seed)
        assert not (~cg.feature_rows.any(axis=1)).any()
        rows = [r.tobytes() for r in cg.feature_rows]
        dup = sum(1 for t in range(7) if rows[t] in rows[:t])
        assert dup == 4


def test_triangle_s1_enumerates_all_paths():
    g = graph_from_edges(3, [(0, 1), (1, 2), (0, 2)])
    seen = set()
    for seed in range(200):
        seen.add(tuple(sample_node_ids(g, [0], 1, 2, seed)[0].tolist()))
    # every walk 0 -> x -> y with y != x
    expected = {(0, x, y) for x in (1, 2) for y in (0, 1, 2) if y != x}
    assert seen == expected


def test_uniformity_of_child_choice():
    g = graph_from_edges(6, [(0, i) for i in range(1, 6)])
    counts = np.zeros(6)
    trials = 3000
    ids = sample_node_ids(g, np.zeros(trials, dtype=np.int64), 2, 1, 123)
    assert (ids[:, 0] == 0).all()  # same root, same stream -> identical rows
    for seed in range(trials):
        row = sample_node_ids(g, [0], 2, 1, seed)[0]
        counts[row[1:]] += 1
    freq = counts[1:] / trials
    assert np.allclose(freq, 2 / 5, atol=0.04)
    pairs = {}
    for seed in range(600):
        row = tuple(sample_node_ids(g, [0], 2, 1, seed)[0][1:].tolist())
        pairs[row] = pairs.get(row, 0) + 1
    assert set(pairs) == set(itertools.combinations(range(1, 6), 2))


def test_cgs_round_trip(tmp_path):
    g = random_graph(30, 0.2, 2)
    cgs = sample_computation_graphs(g, None, 2, 2, seed=1)
    write_cgs(tmp_path / "x.bin", cgs)
    back = read_cgs(tmp_path / "x.bin")
    assert np.array_equal(back.features.view(np.uint32), cgs.features.view(np.uint32))
    assert np.array_equal(back.labels, cgs.labels)
    assert np.array_equal(back.sources, cgs.sources)
    assert back.shape == cgs.shape
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw[:4] == b"CGCG"
    assert len(raw) == 28 + len(cgs) * (12 + 7 * g.d * 4)


def test_cgs_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(ValueError):
        read_cgs(tmp_path / "x.bin")


def test_set_indexing():
    g = random_graph(10, 0.3, 0)
    cgs = sample_computation_graphs(g, None, 2, 2, seed=0)
    sub = cgs[[1, 3]]
    assert isinstance(sub, ComputationGraphSet) and len(sub) == 2
    assert cgs[3].source_node == 3
    assert [c.root_label for c in cgs] == cgs.labels.tolist()
