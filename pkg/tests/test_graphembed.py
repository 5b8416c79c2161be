import numpy as np
import pytest

from kinject.errors import MissingCategory, TooFewVertices
from kinject.graphembed import (
    EmbeddingMatrix,
    WalkParams,
    build_huffman_tree,
    category_vectors,
    hs_probability,
    pairs_per_walk,
    random_walk,
    skipgram_step,
    train_embeddings,
)
from kinject.knowledge import KnowledgeGraph
from kinject.seeding import derive_rng


def ring(names):
    n = len(names)
    return KnowledgeGraph(
        vertices=tuple(names),
        edges=tuple((i, (i + 1) % n, "r/x") for i in range(n)),
    )


def clique_pair():
    """Two disconnected 4-cliques on vertices a..h."""
    edges = []
    for grp in (range(4), range(4, 8)):
        grp = list(grp)
        for i in range(4):
            for j in range(i + 1, 4):
                edges.append((grp[i], grp[j], "linked/to"))
    return KnowledgeGraph(vertices=tuple("abcdefgh"), edges=tuple(edges))


def random_embedding(graph, dim, seed):
    rng = np.random.default_rng(seed)
    n = len(graph.vertices)
    return EmbeddingMatrix(
        vertices=graph.vertices,
        phi=rng.normal(scale=0.5, size=(n, dim)),
        inner=rng.normal(scale=0.5, size=(n - 1, dim)),
    )


# -- walks ---------------------------------------------------------------


def test_walk_isolated_vertex():
    g = KnowledgeGraph(vertices=("a", "b", "c"), edges=((0, 1, "r/x"),))
    assert random_walk(g, 2, 5, derive_rng(0, "w")) == [2]


def test_walk_path_graph_forced():
    g = KnowledgeGraph(vertices=("a", "b"), edges=((0, 1, "r/x"),))
    assert random_walk(g, 0, 3, derive_rng(0, "w")) == [0, 1, 0]


def test_walk_respects_length():
    g = ring("abcde")
    walk = random_walk(g, 0, 17, derive_rng(1, "w"))
    assert len(walk) == 17
    for u, v in zip(walk, walk[1:]):
        assert v in g.adjacency[u]


def test_walk_uniform_neighbor_choice():
    # 10k walks of length 100 on a triangle: each neighbor 50% +/- 2%
    tri = KnowledgeGraph(
        vertices=("a", "b", "c"),
        edges=((0, 1, "r/x"), (1, 2, "r/x"), (0, 2, "r/x")),
    )
    counts = {u: {} for u in range(3)}
    for w in range(10_000):
        walk = random_walk(tri, w % 3, 100, derive_rng(123, "chi", w))
        for u, v in zip(walk, walk[1:]):
            counts[u][v] = counts[u].get(v, 0) + 1
    for u, neigh in counts.items():
        total = sum(neigh.values())
        assert len(neigh) == 2
        for c in neigh.values():
            assert abs(c / total - 0.5) < 0.02


# -- Huffman tree --------------------------------------------------------


def test_huffman_equal_weights_balanced():
    g = ring("abcd")
    tree = build_huffman_tree(g, freq={n: 1.0 for n in "abcd"})
    assert all(len(code) == 2 for code in tree.codes)


def test_huffman_heavy_leaf_shortest():
    g = ring("abcd")
    tree = build_huffman_tree(g, freq={"a": 8.0, "b": 1.0, "c": 1.0, "d": 1.0})
    lengths = [len(c) for c in tree.codes]
    assert lengths[0] == min(lengths)
    assert lengths[0] < max(lengths)


@pytest.mark.parametrize("n", [2, 3, 5, 17, 33])
def test_huffman_kraft_equality(n):
    g = ring([f"v{i:02d}" for i in range(n)])
    tree = build_huffman_tree(g)
    kraft = sum(2.0 ** -len(code) for code in tree.codes)
    assert kraft <= 1.0 + 1e-12
    assert kraft == pytest.approx(1.0)


def test_huffman_codes_prefix_free():
    g = ring([f"v{i:02d}" for i in range(11)])
    codes = build_huffman_tree(g).codes
    for i, a in enumerate(codes):
        for j, b in enumerate(codes):
            if i != j:
                assert a != b[: len(a)]


def test_huffman_path_matches_code_length():
    tree = build_huffman_tree(ring("abcdefg"))
    for code, path in zip(tree.codes, tree.paths):
        assert len(code) == len(path)


def test_huffman_too_few_vertices():
    g = KnowledgeGraph(vertices=("a",), edges=())
    with pytest.raises(TooFewVertices):
        build_huffman_tree(g)


# -- hierarchical softmax ------------------------------------------------


def test_hs_two_vertices_zero_params():
    g = KnowledgeGraph(vertices=("a", "b"), edges=((0, 1, "r/x"),))
    tree = build_huffman_tree(g)
    emb = EmbeddingMatrix(
        vertices=g.vertices, phi=np.zeros((2, 4)), inner=np.zeros((1, 4))
    )
    assert hs_probability(emb, tree, 0, 0) == pytest.approx(0.5)
    assert hs_probability(emb, tree, 0, 1) == pytest.approx(0.5)


@pytest.mark.parametrize("n", [2, 3, 5, 17])
def test_hs_sums_to_one(n):
    g = ring([f"v{i:02d}" for i in range(n)])
    tree = build_huffman_tree(g)
    emb = random_embedding(g, 8, seed=n)
    for center in range(n):
        total = sum(hs_probability(emb, tree, center, t) for t in range(n))
        assert total == pytest.approx(1.0, abs=1e-6)


def test_hs_monotone_in_root_logit():
    g = ring("abcde")
    tree = build_huffman_tree(g)
    emb = random_embedding(g, 8, seed=9)
    target = next(t for t in range(5) if tree.codes[t][0] == 0)
    center = 1
    root = tree.paths[target][0]
    base = hs_probability(emb, tree, center, target)
    emb.inner[root] += 1e-3 * emb.phi[center]  # increases the root logit
    assert hs_probability(emb, tree, center, target) > base


# -- skipgram updates ----------------------------------------------------


def test_skipgram_single_vertex_walk_no_update():
    g = ring("abcd")
    tree = build_huffman_tree(g)
    emb = random_embedding(g, 8, seed=1)
    phi0, inner0 = emb.phi.copy(), emb.inner.copy()
    skipgram_step(emb, tree, [2], window=3, alpha=0.05)
    assert np.array_equal(emb.phi, phi0)
    assert np.array_equal(emb.inner, inner0)


def test_skipgram_zero_rate_no_update():
    g = ring("abcd")
    tree = build_huffman_tree(g)
    emb = random_embedding(g, 8, seed=2)
    phi0, inner0 = emb.phi.copy(), emb.inner.copy()
    skipgram_step(emb, tree, [0, 1, 2], window=2, alpha=0.0)
    assert np.array_equal(emb.phi, phi0)
    assert np.array_equal(emb.inner, inner0)


def test_skipgram_descends_pair_loss():
    g = ring("abcd")
    tree = build_huffman_tree(g)
    emb = random_embedding(g, 8, seed=3)
    before = -np.log(hs_probability(emb, tree, 0, 1))
    skipgram_step(emb, tree, [0, 1], window=1, alpha=1e-2)
    after = -np.log(hs_probability(emb, tree, 0, 1))
    assert after < before


def test_skipgram_leaves_absent_rows_alone():
    g = ring("abcdef")
    tree = build_huffman_tree(g)
    emb = random_embedding(g, 8, seed=4)
    phi0 = emb.phi.copy()
    skipgram_step(emb, tree, [0, 1, 2], window=2, alpha=0.05)
    for absent in (3, 4, 5):
        assert np.array_equal(emb.phi[absent], phi0[absent])


# -- training ------------------------------------------------------------


def test_train_deterministic():
    g = clique_pair()
    p = WalkParams(dim=16, walks_per_vertex=4, walk_length=6, seed=11)
    a = train_embeddings(g, p)
    b = train_embeddings(g, p)
    assert np.array_equal(a.phi, b.phi)
    assert np.array_equal(a.inner, b.inner)


def test_train_zero_rate_keeps_initialization():
    g = clique_pair()
    p0 = WalkParams(dim=16, walks_per_vertex=2, walk_length=5, learning_rate=0.0, seed=5)
    trained = train_embeddings(g, p0)
    fresh = train_embeddings(
        g, WalkParams(dim=16, walks_per_vertex=1, walk_length=1, learning_rate=0.0, seed=5)
    )
    assert np.array_equal(trained.phi, fresh.phi)


def test_train_too_few_vertices():
    g = KnowledgeGraph(vertices=("a",), edges=())
    with pytest.raises(TooFewVertices):
        train_embeddings(g, WalkParams())


def test_train_separates_cliques():
    # reference oracle run: margin ~= 1.99 with these settings; floor is 0.2
    emb = train_embeddings(clique_pair(), WalkParams(seed=7))
    P = emb.phi / np.linalg.norm(emb.phi, axis=1, keepdims=True)
    C = P @ P.T
    intra = [C[i, j] for i in range(8) for j in range(i + 1, 8) if (i < 4) == (j < 4)]
    inter = [C[i, j] for i in range(8) for j in range(i + 1, 8) if (i < 4) != (j < 4)]
    assert np.mean(intra) - np.mean(inter) >= 0.2


def test_train_no_nan_on_large_graph():
    rng = np.random.default_rng(0)
    n = 1000
    edges = {(i, int(rng.integers(n)), "r/x") for i in range(n)}
    edges |= {(i, (i + 1) % n, "r/x") for i in range(n)}
    g = KnowledgeGraph(
        vertices=tuple(f"v{i:04d}" for i in range(n)),
        edges=tuple(e for e in edges if e[0] != e[1]),
    )
    p = WalkParams(dim=16, walks_per_vertex=2, walk_length=5, learning_rate=0.1, seed=1)
    emb = train_embeddings(g, p)
    assert np.all(np.isfinite(emb.phi))
    assert np.all(np.isfinite(emb.inner))


def test_train_relabeling_equivariance():
    edges_by_name = [("a", "b"), ("b", "c"), ("c", "d"), ("d", "a"), ("a", "c")]
    order1 = ("a", "b", "c", "d")
    order2 = ("c", "a", "d", "b")

    def graph_for(order):
        idx = {n: i for i, n in enumerate(order)}
        return KnowledgeGraph(
            vertices=order,
            edges=tuple((idx[u], idx[v], "r/x") for u, v in edges_by_name),
        )

    p = WalkParams(dim=8, walks_per_vertex=6, walk_length=6, seed=3)
    e1 = train_embeddings(graph_for(order1), p)
    e2 = train_embeddings(graph_for(order2), p)
    for name in order1:
        assert np.array_equal(e1.phi[e1.index[name]], e2.phi[e2.index[name]])


def test_train_parallel_mode_smoke():
    g = clique_pair()
    p = WalkParams(dim=16, walks_per_vertex=4, walk_length=6, seed=2)
    emb = train_embeddings(g, p, workers=2)
    assert emb.phi.shape == (8, 16)
    assert np.all(np.isfinite(emb.phi))


def test_category_vectors():
    g = clique_pair()
    emb = train_embeddings(g, WalkParams(dim=16, walks_per_vertex=2, seed=0))
    vecs = category_vectors(emb, ["a", "h"])
    assert len(vecs) == 2
    for v in vecs:
        assert abs(np.linalg.norm(v) - 1.0) < 1e-6
    assert np.allclose(vecs[0], emb.phi[0] / np.linalg.norm(emb.phi[0]))
    with pytest.raises(MissingCategory):
        category_vectors(emb, ["nope"])


def test_pairs_per_walk_matches_enumeration():
    for t, w in [(1, 3), (5, 2), (10, 3)]:
        expected = sum(
            1
            for j in range(t)
            for k in range(t)
            if k != j and abs(k - j) <= w
        )
        assert pairs_per_walk(t, w) == expected
