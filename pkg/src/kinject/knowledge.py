"""Knowledge triples and the part-relation graph they induce.

Triples are subject-relation-object records ("deck is/top/of cabin"); the
relation tag always carries at least one ``/`` and no whitespace, which is
what makes the tolerant text format parseable even though entity names may
contain spaces. A set of triples induces an undirected graph whose vertices
are entities (categories and parts) and whose edges keep the relation tag as
metadata.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyField, MalformedTriple, UnknownCategory

_WS = re.compile(r"\s+")

STRICT = "strict"
TOLERANT = "tolerant"


def normalize_entity(text: str) -> str:
    """Case-fold and collapse runs of whitespace to single spaces."""
    return _WS.sub(" ", text.strip()).casefold()


@dataclass(frozen=True)
class Triple:
    """A normalized subject-relation-object record."""

    subject: str
    relation: str
    object: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "subject", normalize_entity(self.subject))
        object.__setattr__(self, "relation", normalize_entity(self.relation))
        object.__setattr__(self, "object", normalize_entity(self.object))
        if not self.subject or not self.object:
            raise EmptyField(f"empty subject or object in {self!r}")
        if "/" not in self.relation:
            raise MalformedTriple(f"relation {self.relation!r} has no '/'")
        if " " in self.relation:
            raise MalformedTriple(f"relation {self.relation!r} contains whitespace")
        # '/' inside an entity would make the tolerant format ambiguous
        for field in (self.subject, self.object):
            if "/" in field:
                raise MalformedTriple(f"entity {field!r} contains '/'")


def parse_triple_line(line: str, mode: str = STRICT) -> Triple:
    """Parse one line into a Triple.

    Strict mode expects exactly three tab-separated fields. Tolerant mode
    splits on whitespace and anchors on the single token containing ``/``:
    everything before it is the subject, everything after the object.
    """
    if mode == STRICT:
        fields = line.rstrip("\n").split("\t")
        if len(fields) != 3:
            raise MalformedTriple(
                f"expected 3 tab-separated fields, found {len(fields)}: {line!r}"
            )
        return Triple(*fields)
    if mode == TOLERANT:
        tokens = line.split()
        anchors = [i for i, tok in enumerate(tokens) if "/" in tok]
        if len(anchors) != 1:
            raise MalformedTriple(
                f"expected exactly one '/'-token, found {len(anchors)}: {line!r}"
            )
        i = anchors[0]
        return Triple(" ".join(tokens[:i]), tokens[i], " ".join(tokens[i + 1:]))
    raise ValueError(f"unknown parse mode {mode!r}")


def format_triple(t: Triple, mode: str = STRICT) -> str:
    """Inverse of :func:`parse_triple_line` for well-formed triples."""
    if mode == STRICT:
        return f"{t.subject}\t{t.relation}\t{t.object}"
    if mode == TOLERANT:
        return f"{t.subject} {t.relation} {t.object}"
    raise ValueError(f"unknown parse mode {mode!r}")


def read_triples(path: str | Path, mode: str = STRICT) -> list[Triple]:
    """Read a triple file; ``#`` starts a comment line, blank lines skipped."""
    triples = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        triples.append(parse_triple_line(raw, mode))
    return triples


def write_triples(path: str | Path, triples: Iterable[Triple]) -> None:
    lines = [format_triple(t, STRICT) for t in triples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class KnowledgeGraph:
    """Entities as vertices, relations as undirected edges with tags.

    ``edges`` stores each record once in its stated direction; the adjacency
    view used for walks is symmetric. ``categories`` marks the subset of
    vertices that are classification categories.
    """

    vertices: tuple[str, ...]
    edges: tuple[tuple[int, int, str], ...]
    categories: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        n = len(self.vertices)
        if len(set(self.vertices)) != n:
            raise ValueError("duplicate vertex names")
        for u, v, _ in self.edges:
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge endpoint out of range: ({u}, {v})")
        missing = self.categories - set(self.vertices)
        if missing:
            raise UnknownCategory(f"categories not in vertex set: {sorted(missing)}")

    @cached_property
    def index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.vertices)}

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        """Distinct neighbors per vertex (symmetric view).

        Neighbors are ordered by vertex name, not index, so walk behaviour is
        invariant under relabeling of the vertex set.
        """
        nbrs: list[set[int]] = [set() for _ in self.vertices]
        for u, v, _ in self.edges:
            if u != v:
                nbrs[u].add(v)
                nbrs[v].add(u)
        return tuple(
            tuple(sorted(s, key=lambda i: self.vertices[i])) for s in nbrs
        )

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    @property
    def category_indices(self) -> tuple[int, ...]:
        return tuple(self.index[c] for c in sorted(self.categories))


def build_graph(triples: Sequence[Triple], categories: Sequence[str]) -> KnowledgeGraph:
    """Build the part-relation graph from triples.

    One vertex per distinct normalized entity, so identically named parts are
    shared across categories. Edge multiplicity collapses to one edge per
    distinct (subject, object, relation).
    """
    if not categories:
        raise UnknownCategory("category list is empty")
    cats = [normalize_entity(c) for c in categories]
    order: dict[str, int] = {}
    edges: dict[tuple[int, int, str], None] = {}
    for t in triples:
        for name in (t.subject, t.object):
            if name not in order:
                order[name] = len(order)
        edges.setdefault((order[t.subject], order[t.object], t.relation))
    absent = [c for c in cats if c not in order]
    if absent:
        raise UnknownCategory(f"categories never mentioned by any triple: {absent}")
    return KnowledgeGraph(
        vertices=tuple(order),
        edges=tuple(edges),
        categories=frozenset(cats),
    )


def merge_graphs(base: KnowledgeGraph, external: KnowledgeGraph) -> KnowledgeGraph:
    """Union of vertices by name and edges by (names, relation); categories of
    ``base`` are preserved."""
    order: dict[str, int] = {name: i for i, name in enumerate(base.vertices)}
    for name in external.vertices:
        if name not in order:
            order[name] = len(order)
    edges: dict[tuple[int, int, str], None] = {}
    for g in (base, external):
        for u, v, rel in g.edges:
            edges.setdefault((order[g.vertices[u]], order[g.vertices[v]], rel))
    return KnowledgeGraph(
        vertices=tuple(order),
        edges=tuple(edges),
        categories=base.categories,
    )
