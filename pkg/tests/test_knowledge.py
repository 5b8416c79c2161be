import pytest
from hypothesis import given, strategies as st

from kinject.errors import EmptyField, MalformedTriple, UnknownCategory
from kinject.knowledge import (
    STRICT,
    TOLERANT,
    KnowledgeGraph,
    Triple,
    build_graph,
    format_triple,
    merge_graphs,
    normalize_entity,
    parse_triple_line,
    read_triples,
    write_triples,
)

KIEV_LINES = [
    "Kiev Aircraft carrier has/part deck",
    "Kiev Aircraft carrier has/part cabin",
    "Kiev Aircraft carrier has/part shipbridge",
    "Kiev Aircraft carrier has/part radar",
    "Kiev Aircraft carrier has/part runway",
    "Kiev Aircraft carrier has/part shipboard aircraft",
    "deck is/top/of cabin",
    "Shipbridge is/top/of deck",
    "radar is/top/of Shipbridge",
    "runway is/top/of deck",
    "radar is/top/of Shipbridge",
    "runway is/top/of deck",
    "shipboard aircraft is/top/of deck",
    "deck is/adjacent/to runway",
    "shipbridge is/adjacent/to radar",
]


def test_parse_tolerant_table_row():
    t = parse_triple_line("Kiev Aircraft carrier has/part deck", TOLERANT)
    assert t == Triple("kiev aircraft carrier", "has/part", "deck")


def test_parse_strict_minimal():
    assert parse_triple_line("a\thas/part\tb", STRICT) == Triple("a", "has/part", "b")


def test_parse_no_relation_token():
    with pytest.raises(MalformedTriple):
        parse_triple_line("deck runway", TOLERANT)


def test_parse_two_relation_tokens():
    with pytest.raises(MalformedTriple):
        parse_triple_line("a has/part b is/top/of c", TOLERANT)


def test_parse_strict_wrong_field_count():
    with pytest.raises(MalformedTriple):
        parse_triple_line("a\tb", STRICT)
    with pytest.raises(MalformedTriple):
        parse_triple_line("a\thas/part\tb\tc", STRICT)


def test_empty_field():
    with pytest.raises(EmptyField):
        parse_triple_line("\thas/part\tb", STRICT)
    with pytest.raises(EmptyField):
        parse_triple_line("has/part b", TOLERANT)


def test_relation_requires_slash_in_strict_mode():
    with pytest.raises(MalformedTriple):
        parse_triple_line("a\tpart\tb", STRICT)


def test_normalization_casefold_and_whitespace():
    t = parse_triple_line("Shipbridge   is/top/of\t deck", TOLERANT)
    assert t.subject == "shipbridge"
    assert t.object == "deck"
    assert normalize_entity("  Kiev   Aircraft carrier ") == "kiev aircraft carrier"


_entity = st.text(
    alphabet="abcdefghijklmnopqrstuvwxyz0123456789- ", min_size=1, max_size=24
).filter(lambda s: normalize_entity(s))
_relation = st.from_regex(r"[a-z]{1,8}(/[a-z]{1,8}){1,3}", fullmatch=True)


@given(_entity, _relation, _entity, st.sampled_from([STRICT, TOLERANT]))
def test_parse_format_round_trip(subj, rel, obj, mode):
    t = Triple(subj, rel, obj)
    assert parse_triple_line(format_triple(t, mode), mode) == t


def test_entity_with_slash_rejected():
    with pytest.raises(MalformedTriple):
        Triple("f/a-18", "has/part", "wing")


def kiev_graph():
    triples = [parse_triple_line(ln, TOLERANT) for ln in KIEV_LINES]
    return build_graph(triples, ["Kiev Aircraft carrier"])


def test_build_graph_kiev_deck_neighbors():
    g = kiev_graph()
    deck = g.index["deck"]
    neighbor_names = {g.vertices[i] for i in g.adjacency[deck]}
    assert neighbor_names == {
        "kiev aircraft carrier",
        "cabin",
        "shipbridge",
        "runway",
        "shipboard aircraft",
    }


def test_build_graph_collapses_duplicate_edges():
    g = kiev_graph()
    assert len(set(g.edges)) == len(g.edges)
    # the duplicated "radar is/top/of shipbridge" rows collapse to one edge
    radar, bridge = g.index["radar"], g.index["shipbridge"]
    dup = [e for e in g.edges if e == (radar, bridge, "is/top/of")]
    assert len(dup) == 1


def test_build_graph_unknown_category():
    with pytest.raises(UnknownCategory):
        build_graph([], ["ghost"])


def test_build_graph_requires_categories():
    with pytest.raises(UnknownCategory):
        build_graph([Triple("a", "has/part", "b")], [])


def test_shared_part_merges_to_one_vertex():
    triples = [
        Triple("plane", "has/part", "wing"),
        Triple("drone", "has/part", "wing"),
    ]
    g = build_graph(triples, ["plane", "drone"])
    assert g.vertices.count("wing") == 1
    assert g.degree(g.index["wing"]) == 2


def test_build_graph_permutation_invariant():
    triples = [parse_triple_line(ln, TOLERANT) for ln in KIEV_LINES]
    g1 = build_graph(triples, ["Kiev Aircraft carrier"])
    g2 = build_graph(list(reversed(triples)), ["Kiev Aircraft carrier"])
    assert set(g1.vertices) == set(g2.vertices)
    by_name = lambda g: {
        (g.vertices[u], g.vertices[v], rel) for u, v, rel in g.edges
    }
    assert by_name(g1) == by_name(g2)


def test_merge_identity_and_idempotence():
    g = kiev_graph()
    empty = KnowledgeGraph(vertices=(), edges=())
    assert merge_graphs(g, empty) == g
    assert merge_graphs(g, g) == g


def test_merge_union_counts():
    a = KnowledgeGraph(
        vertices=("x", "y", "z"), edges=((0, 1, "r/a"), (1, 2, "r/a"))
    )
    b = KnowledgeGraph(
        vertices=("z", "p", "q"), edges=((0, 1, "r/b"), (1, 2, "r/b"))
    )
    merged = merge_graphs(a, b)
    assert len(merged.vertices) == 5
    assert len(merged.edges) == 4


def test_merge_preserves_base_categories():
    g = kiev_graph()
    other = KnowledgeGraph(
        vertices=("deck", "harbor"),
        edges=((0, 1, "is/near/to"),),
        categories=frozenset({"harbor"}),
    )
    merged = merge_graphs(g, other)
    assert merged.categories == g.categories


def test_graph_rejects_bad_edges_and_categories():
    with pytest.raises(ValueError):
        KnowledgeGraph(vertices=("a",), edges=((0, 1, "r/a"),))
    with pytest.raises(UnknownCategory):
        KnowledgeGraph(vertices=("a",), edges=(), categories=frozenset({"b"}))


def test_triple_file_round_trip(tmp_path):
    triples = [parse_triple_line(ln, TOLERANT) for ln in KIEV_LINES]
    path = tmp_path / "kiev.tsv"
    write_triples(path, triples)
    assert read_triples(path) == triples


def test_read_triples_skips_comments_and_blanks(tmp_path):
    path = tmp_path / "k.tsv"
    path.write_text("# header comment\n\na\thas/part\tb\n  # indented comment\n")
    assert read_triples(path) == [Triple("a", "has/part", "b")]
