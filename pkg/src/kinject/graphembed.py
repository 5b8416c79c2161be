"""Graph vertex embedding via truncated random walks and SkipGram.

Walks over the undirected part-relation graph are treated as sentences and a
hierarchical-softmax SkipGram is trained on them: the output softmax over
vertices is factored into sigmoid branch decisions along a Huffman tree, so
one update touches only the walk vertex's row and the internal nodes on the
context vertex's root-to-leaf path.

Everything downstream of the integer seed is keyed by vertex *name*, not
index (initialization, visit order, per-walk RNG streams, Huffman
tie-breaking). Relabeling the vertices of a graph therefore permutes the
embedding rows and nothing else.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import heapq

import numpy as np

from .errors import MissingCategory, TooFewVertices
from .knowledge import KnowledgeGraph
from .seeding import derive_rng, stable_hash64


@dataclass(frozen=True)
class WalkParams:
    window: int = 3
    dim: int = 64
    walks_per_vertex: int = 40
    walk_length: int = 10
    learning_rate: float = 0.025
    epochs: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.window < 1 or self.dim < 2 or self.walks_per_vertex < 1:
            raise ValueError(f"invalid walk parameters: {self}")
        # learning_rate 0 is allowed as an explicit no-op diagnostic
        if self.walk_length < 1 or self.learning_rate < 0 or self.epochs < 1:
            raise ValueError(f"invalid walk parameters: {self}")


@dataclass(frozen=True)
class HuffmanTree:
    """Per-leaf code bits and root-to-leaf internal-node paths.

    Leaf i corresponds to vertex i; code[i][k] is the branch taken at
    path[i][k] (0 = left = first-popped child).
    """

    codes: tuple[tuple[int, ...], ...]
    paths: tuple[tuple[int, ...], ...]

    @property
    def n_leaves(self) -> int:
        return len(self.codes)


@dataclass
class EmbeddingMatrix:
    """Vertex representations plus hierarchical-softmax internal parameters."""

    vertices: tuple[str, ...]
    phi: np.ndarray    # (|V|, d)
    inner: np.ndarray  # (|V|-1, d)

    @cached_property
    def index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.vertices)}


def random_walk(
    graph: KnowledgeGraph, start: int, length: int, rng: np.random.Generator
) -> list[int]:
    """Uniform random walk of at most ``length`` vertices; stops early at a
    vertex with no neighbors."""
    walk = [start]
    current = start
    while len(walk) < length:
        nbrs = graph.adjacency[current]
        if not nbrs:
            break
        current = nbrs[rng.integers(len(nbrs))]
        walk.append(current)
    return walk


def build_huffman_tree(
    graph: KnowledgeGraph, freq: dict[str, float] | None = None
) -> HuffmanTree:
    """Huffman tree over vertices; default weight is degree + 1.

    Ties break on the lexicographically smallest vertex name in a subtree,
    which keeps the tree invariant under vertex relabeling.
    """
    n = len(graph.vertices)
    if n < 2:
        raise TooFewVertices(f"need at least 2 vertices, have {n}")
    if freq is None:
        weights = [float(graph.degree(i) + 1) for i in range(n)]
    else:
        weights = [float(freq[name]) for name in graph.vertices]

    # heap entries: (weight, min leaf name, node); node = leaf index or
    # (internal index, left, right)
    heap: list[tuple[float, str, object]] = [
        (weights[i], graph.vertices[i], i) for i in range(n)
    ]
    heapq.heapify(heap)
    next_internal = 0
    while len(heap) > 1:
        w1, k1, left = heapq.heappop(heap)
        w2, k2, right = heapq.heappop(heap)
        heapq.heappush(heap, (w1 + w2, min(k1, k2), (next_internal, left, right)))
        next_internal += 1

    codes: list[tuple[int, ...]] = [()] * n
    paths: list[tuple[int, ...]] = [()] * n
    stack = [(heap[0][2], (), ())]
    while stack:
        node, code, path = stack.pop()
        if isinstance(node, int):
            codes[node] = code
            paths[node] = path
        else:
            idx, left, right = node
            stack.append((left, code + (0,), path + (idx,)))
            stack.append((right, code + (1,), path + (idx,)))
    return HuffmanTree(codes=tuple(codes), paths=tuple(paths))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def hs_probability(
    emb: EmbeddingMatrix, tree: HuffmanTree, center: int, target: int
) -> float:
    """P(target | center): product of sigmoid branch decisions on target's path."""
    path = np.asarray(tree.paths[target], dtype=np.intp)
    code = np.asarray(tree.codes[target], dtype=np.float64)
    x = emb.inner[path] @ emb.phi[center]
    signs = 1.0 - 2.0 * code
    return float(np.prod(_sigmoid(signs * x)))


class LinearDecay:
    """Learning rate decaying linearly from ``start`` to ``start/100`` over an
    expected total number of SkipGram pairs, clamped at the floor."""

    def __init__(self, start: float, total_pairs: int, floor_ratio: float = 0.01):
        self.start = start
        self.floor = start * floor_ratio
        self.total = max(total_pairs, 1)
        self.consumed = 0

    def take(self) -> float:
        rate = self.start - (self.start - self.floor) * (self.consumed / self.total)
        self.consumed += 1
        return max(rate, self.floor)


def skipgram_step(
    emb: EmbeddingMatrix,
    tree: HuffmanTree,
    walk: Sequence[int],
    window: int,
    alpha: float | LinearDecay,
) -> EmbeddingMatrix:
    """One SkipGram pass over a walk, updating ``emb`` in place.

    For each (center, context) pair within the window, takes one SGD step on
    -log hs_probability(center, context). Only phi rows of walk vertices and
    inner rows on context paths change.
    """
    n = len(walk)
    for j in range(n):
        center = walk[j]
        phi_c = emb.phi[center]
        for k in range(max(0, j - window), min(n, j + window + 1)):
            if k == j:
                continue
            rate = alpha.take() if isinstance(alpha, LinearDecay) else alpha
            target = walk[k]
            path = np.asarray(tree.paths[target], dtype=np.intp)
            code = np.asarray(tree.codes[target], dtype=np.float64)
            inner_rows = emb.inner[path]
            x = inner_rows @ phi_c
            g = rate * (1.0 - code - _sigmoid(x))
            # context-path rows learn against the old phi row and vice versa
            grad_phi = g @ inner_rows
            emb.inner[path] += np.outer(g, phi_c)
            phi_c += grad_phi
    return emb


def pairs_per_walk(walk_length: int, window: int) -> int:
    """Number of (center, context) pairs in a full-length walk."""
    return sum(
        min(j + window, walk_length - 1) - max(j - window, 0)
        for j in range(walk_length)
    )


def train_embeddings(
    graph: KnowledgeGraph,
    params: WalkParams,
    uniform_tree: bool = False,
    workers: int = 1,
) -> EmbeddingMatrix:
    """Algorithmic core: initialize phi uniformly in [-0.5/d, 0.5/d], then for
    each epoch and each walks-per-vertex round, visit every vertex in a
    seed-shuffled order, walk from it, and apply a SkipGram step.

    Deterministic for ``workers == 1``. With more workers, walk batches run
    concurrently and updates interleave without locks (asynchronous SGD), so
    results vary run to run.
    """
    n = len(graph.vertices)
    if n < 2:
        raise TooFewVertices(f"need at least 2 vertices, have {n}")
    d = params.dim
    phi = np.stack(
        [
            derive_rng(params.seed, "phi-init", name).uniform(-0.5 / d, 0.5 / d, d)
            for name in graph.vertices
        ]
    )
    inner = np.zeros((n - 1, d), dtype=np.float64)
    emb = EmbeddingMatrix(vertices=graph.vertices, phi=phi, inner=inner)
    freq = {name: 1.0 for name in graph.vertices} if uniform_tree else None
    tree = build_huffman_tree(graph, freq)

    total = params.epochs * params.walks_per_vertex * n * pairs_per_walk(
        params.walk_length, params.window
    )
    schedule = LinearDecay(params.learning_rate, total)

    def run_vertex(epoch: int, round_: int, i: int, sched: LinearDecay) -> None:
        rng = derive_rng(params.seed, "walk", epoch, round_, graph.vertices[i])
        walk = random_walk(graph, i, params.walk_length, rng)
        skipgram_step(emb, tree, walk, params.window, sched)

    for epoch in range(params.epochs):
        for round_ in range(params.walks_per_vertex):
            order = sorted(
                range(n),
                key=lambda i: stable_hash64(
                    params.seed, "order", epoch, round_, graph.vertices[i]
                ),
            )
            if workers <= 1:
                for i in order:
                    run_vertex(epoch, round_, i, schedule)
            else:
                chunks = [order[w::workers] for w in range(workers)]
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    futures = [
                        pool.submit(
                            lambda chunk=chunk: [
                                run_vertex(epoch, round_, i, schedule) for i in chunk
                            ]
                        )
                        for chunk in chunks
                    ]
                    for f in futures:
                        f.result()
    return emb


def category_vectors(
    emb: EmbeddingMatrix, categories: Sequence[str]
) -> list[np.ndarray]:
    """L2-normalized phi rows for the given category names."""
    out = []
    for cat in categories:
        if cat not in emb.index:
            raise MissingCategory(cat)
        row = emb.phi[emb.index[cat]]
        norm = float(np.linalg.norm(row))
        out.append(row if norm == 0.0 else row / norm)
    return out
