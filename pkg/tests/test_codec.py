import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from rdflib import URIRef
from rdflib.plugins.sparql import prepareQuery

from sparql_lm.codec import (
    EncodedQuery,
    EncodingUnsupported,
    MalformedToken,
    NamespaceTable,
    QueryRejected,
    RawQuery,
    UnknownPrefix,
    UnterminatedLiteral,
    decode,
    dedupe_corpus,
    encode,
    inline_prefixes,
    lex,
    prepare_query,
    strip_comments,
    validate_query,
)

from .strategies import queries

TABLE1 = (
    "SELECT DISTINCT ?uri\n"
    "WHERE { <http://dbpedia.org/resource/Tom_Hanks> <http://dbpedia.org/ontology/spouse> ?uri }"
)
TABLE1_ENC = "select distinct var_uri where brack_open <dbr_Tom_Hanks> <dbo_spouse> var_uri brack_close"
TABLE3 = (
    "SELECT DISTINCT COUNT(?uri) WHERE { ?uri <http://dbpedia.org/ontology/team> "
    "<http://dbpedia.org/resource/Dallas_Cowboys> }"
)
TABLE3_ENC = (
    "select distinct count(var_uri) where brack_open var_uri <dbo_team> "
    "<dbr_Dallas_Cowboys> brack_close"
)
NS = NamespaceTable()


def test_strip_comment_outside_literals():
    assert strip_comments("SELECT ?x # pick x\nWHERE { ?x a ?y }") == "SELECT ?x \nWHERE { ?x a ?y }"


def test_strip_keeps_hash_in_iri_and_strings():
    q = "SELECT ?x WHERE { ?x ?p <http://w.org/ns#label> }"
    assert strip_comments(q) == q
    # the lexer sees one IRI token carrying the fragment, so no comment exists
    assert [t.kind for t in lex(q)].count("COMMENT") == 0
    q2 = "SELECT ?x WHERE { ?x ?p \"a # b\" . ?x ?q 'c#d' } # tail"
    assert strip_comments(q2) == "SELECT ?x WHERE { ?x ?p \"a # b\" . ?x ?q 'c#d' } "


def test_strip_noop():
    assert strip_comments(RawQuery("SELECT ?x")) == "SELECT ?x"


@pytest.mark.parametrize("bad", ['SELECT ?x WHERE { ?x ?p "open }', "SELECT ?x WHERE { ?x ?p <http://a.org/x }"])
def test_strip_unterminated(bad):
    with pytest.raises(UnterminatedLiteral):
        strip_comments(bad)


def test_raw_query_rejects_blank():
    with pytest.raises(ValueError):
        RawQuery("   ")


def test_inline_prefixes_example():
    q = "PREFIX dbo: <http://dbpedia.org/ontology/> SELECT ?u WHERE { ?u dbo:spouse ?v }"
    assert inline_prefixes(q) == "SELECT ?u WHERE { ?u <http://dbpedia.org/ontology/spouse> ?v }"


def test_inline_prefixes_matches_rdflib_expansion():
    q = (
        "PREFIX dbo: <http://dbpedia.org/ontology/>\n"
        "PREFIX dbr: <http://dbpedia.org/resource/>\n"
        "SELECT ?u WHERE { dbr:Tom_Hanks dbo:spouse ?u . ?u dbo:birth.Place ?p }"
    )
    ours = inline_prefixes(q)
    expected = {str(n) for n in _walk(prepareQuery(q).algebra) if isinstance(n, URIRef)}
    got = {t.value for t in lex(ours) if t.kind == "IRI"}
    assert got == expected
    assert "PREFIX" not in ours


def _walk(node):
    yield node
    if isinstance(node, dict):
        node = list(node.values())
    if isinstance(node, (list, tuple, set)):
        for child in node:
            yield from _walk(child)


def test_inline_prefixes_noop():
    q = "SELECT ?u WHERE { ?u <http://x.org/p> ?v }"
    assert inline_prefixes(q) == q


def test_inline_prefixes_unknown():
    with pytest.raises(UnknownPrefix):
        inline_prefixes("SELECT ?u WHERE { ?u foaf:name ?n }")


def test_inline_prefixes_shadowing():
    q = "PREFIX p: <http://a.org/> PREFIX p: <http://b.org/> SELECT ?x WHERE { ?x p:q ?y }"
    assert inline_prefixes(q) == "SELECT ?x WHERE { ?x <http://b.org/q> ?y }"


def test_validate_table1():
    assert validate_query(TABLE1).accepted


def test_validate_unbalanced():
    assert not validate_query("SELECT WHERE {").accepted
    rep = validate_query("SELECT ?x WHERE {")
    assert not rep.accepted and "unbalanced" in rep.error


def test_validate_unknown_link():
    q = "SELECT ?x WHERE { ?x ?p <http://spam.example/x> }"
    rep = validate_query(q, allowlist={"dbpedia.org", "w3.org"})
    assert not rep.accepted
    assert rep.unknown_links == ["http://spam.example/x"]
    assert validate_query(q).accepted
    assert validate_query(TABLE1, allowlist={"dbpedia.org"}).accepted


@pytest.mark.parametrize(
    "q",
    [
        "SELECT ?x WHERE { ?x ?p ?o } GROUP BY ?x",
        "CONSTRUCT { ?s ?p ?o } WHERE { ?s ?p ?o }",
        "SELECT ?x WHERE { ?x dbo:p ?o }",
        "SELECT ?x WHERE { ?x <http://a.org/p>/<http://a.org/q> ?o }",
    ],
)
def test_validate_rejects_outside_subset(q):
    assert not validate_query(q).accepted


def test_encode_reference_examples():
    assert encode(TABLE1, NS).text == TABLE1_ENC
    assert encode(TABLE3, NS).text == TABLE3_ENC
    assert encode("ASK WHERE { }", NS).text == "ask where brack_open brack_close"


def test_encode_separators():
    q = "SELECT ?x WHERE { ?x <http://dbpedia.org/ontology/a> ?y ; <http://dbpedia.org/ontology/b> ?z . }"
    assert encode(q).tokens == [
        "select", "var_x", "where", "brack_open", "var_x", "<dbo_a>", "var_y", "sep_semi",
        "<dbo_b>", "var_z", "sep_dot", "brack_close",
    ]


def test_encode_unknown_iri_verbatim():
    q = "SELECT ?x WHERE { ?x <http://example.org/p#q> ?y }"
    assert "<http://example.org/p#q>" in encode(q).tokens


def test_encode_unsupported():
    with pytest.raises(EncodingUnsupported):
        encode("SELECT ?x WHERE { ?x ?p ?o } GROUP BY ?x")
    with pytest.raises(EncodingUnsupported):
        encode("SELECT ?x WHERE { ?x <relative> ?o }")


def test_decode_reference_examples():
    assert " ".join(decode(EncodedQuery.from_text(TABLE1_ENC)).split()) == " ".join(TABLE1.split())
    assert " ".join(decode(TABLE3_ENC).split()) == " ".join(TABLE3.split())


def test_decode_malformed():
    with pytest.raises(MalformedToken):
        decode("select var_x where brack_open var_x brack_close brack_close")
    with pytest.raises(MalformedToken):
        decode("select var_x where brack_open var_x frobnicate brack_close")
    with pytest.raises(MalformedToken):
        decode("select var_x where brack_open <zzz_Foo> brack_close")


def test_encoded_check():
    encode(TABLE1).check(NS)
    with pytest.raises(MalformedToken):
        EncodedQuery.from_text("brack_close brack_open").check(NS)
    with pytest.raises(MalformedToken):
        EncodedQuery.from_text("<nope_X>").check(NS)


def test_namespace_table_invariants():
    with pytest.raises(ValueError):
        NamespaceTable((("http://a.org/", "a"), ("http://a.org/b/", "b")))
    with pytest.raises(ValueError):
        NamespaceTable((("http://a.org/", "a"), ("http://b.org/", "a")))
    assert NS.shorten("http://dbpedia.org/resource/X") == ("dbr", "X")
    assert NS.shorten("http://nowhere.org/X") is None


def test_namespace_file(tmp_path):
    p = tmp_path / "ns.txt"
    p.write_text("# comment\ndbr: <http://dbpedia.org/resource/>\nex http://example.org/\n")
    ns = NamespaceTable.from_file(p)
    assert ns.tags == {"dbr": "http://dbpedia.org/resource/", "ex": "http://example.org/"}


def test_prepare_query_pipeline():
    raw = RawQuery(
        "PREFIX dbo: <http://dbpedia.org/ontology/>  # ontology\n"
        "SELECT DISTINCT ?uri   WHERE {\n  <http://dbpedia.org/resource/Tom_Hanks> dbo:spouse ?uri\n}"
    )
    assert prepare_query(raw).text == TABLE1_ENC
    with pytest.raises(QueryRejected):
        prepare_query("SELECT ?x WHERE { ?x ?p <http://spam.example/x> }", allowlist=["dbpedia.org"])


def test_dedupe():
    q1, q2 = encode(TABLE1), encode(TABLE3)
    assert [q.text for q in dedupe_corpus([q1, q1, q2])] == [q1.text, q2.text]
    assert list(dedupe_corpus([])) == []


def test_dedupe_known_multiplicities():
    import random

    rng = random.Random(0)
    distinct = [EncodedQuery(["select", f"var_v{i}", "where", "brack_open", "brack_close"]) for i in range(1000)]
    # multiplicities 1..19 summing to exactly 10_000
    mult = [1 + i % 19 for i in range(1000)]
    mult[-1] += 10_000 - sum(mult)
    corpus = [q for q, m in zip(distinct, mult) for _ in range(m)]
    rng.shuffle(corpus)
    assert len(corpus) == 10_000
    out = list(dedupe_corpus(corpus))
    assert len(out) == 1000
    first_seen = list(dict.fromkeys(q.text for q in corpus))
    assert [q.text for q in out] == first_seen


@settings(max_examples=200, deadline=None)
@given(queries())
def test_round_trip_law(q):
    assert validate_query(q).accepted, q
    enc = encode(q, NS)
    enc.check(NS)
    dec = decode(enc, NS)
    assert validate_query(dec).accepted
    assert encode(dec, NS).tokens == enc.tokens
    assert encode(q, NS).tokens == enc.tokens  # determinism


@settings(max_examples=200, deadline=None)
@given(queries(), st.text("abc #\"' ", max_size=12))
def test_comment_safety(q, comment):
    commented = q.replace("WHERE", "# " + comment.replace("\n", " ") + "\nWHERE", 1)
    stripped = strip_comments(commented)
    literal_spans = [t.value for t in lex(q) if t.kind in ("IRI", "STRING")]
    assert [t.value for t in lex(stripped) if t.kind in ("IRI", "STRING")] == literal_spans
