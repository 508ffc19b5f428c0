from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparql_lm.codec import encode
from sparql_lm.tokenizer import (
    SPECIAL_TOKENS,
    UNK,
    CorpusEmpty,
    DuplicateToken,
    MissingSpecial,
    Vocab,
    VocabError,
    detokenize,
    encode_sequence,
    load_vocab,
    pretokenize,
    tokenize,
    train_wordpiece,
)

TABLE1_ENC = "select distinct var_uri where brack_open <dbr_Tom_Hanks> <dbo_spouse> var_uri brack_close"


def toy_vocab(*extra):
    return Vocab(tuple(SPECIAL_TOKENS) + tuple(extra))


def test_load_vocab(tmp_path):
    p = tmp_path / "vocab.txt"
    p.write_text("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nhello\n")
    v = load_vocab(p)
    assert len(v) == 6 and v.cls_id == 2 and v.pad_id == 0 and v.token_to_id["hello"] == 5


def test_load_vocab_missing_special(tmp_path):
    p = tmp_path / "vocab.txt"
    p.write_text("[PAD]\n[UNK]\n[CLS]\n[SEP]\nhello\n")
    with pytest.raises(MissingSpecial):
        load_vocab(p)


def test_load_vocab_duplicate(tmp_path):
    p = tmp_path / "vocab.txt"
    p.write_text("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nx\nx\n")
    with pytest.raises(DuplicateToken):
        load_vocab(p)


def test_load_vocab_line_count_matches_size(tmp_path):
    # cased-BERT-format file: specials plus filler, one token per line
    n = 28_996
    lines = list(SPECIAL_TOKENS) + [f"tok{i}" for i in range(n - len(SPECIAL_TOKENS))]
    p = tmp_path / "vocab.txt"
    p.write_text("\n".join(lines) + "\n")
    with open(p) as fh:
        expected = sum(1 for _ in fh)
    assert len(load_vocab(p)) == expected == n


def test_vocab_dense_bijection():
    v = toy_vocab("a", "##b")
    assert sorted(v.token_to_id.values()) == list(range(len(v)))
    assert all(v.tokens[i] == t for t, i in v.token_to_id.items())


def _oracle_merges(words: Counter, budget: int, min_freq: int):
    """Independent re-derivation: symbols as space-joined strings."""
    splits = {w: " ".join([w[0]] + ["##" + c for c in w[1:]]) for w in words}
    vocab = set()
    for s in splits.values():
        vocab.update(s.split())
    merges = []
    while len(vocab) < budget:
        freq = Counter()
        for w, s in splits.items():
            syms = s.split()
            for i in range(len(syms) - 1):
                freq[(syms[i], syms[i + 1])] += words[w]
        if not freq or max(freq.values()) < min_freq:
            break
        top = max(freq.values())
        a, b = sorted(p for p in freq if freq[p] == top)[0]
        new = a + b[2:]
        merges.append(new)
        vocab.add(new)
        for w, s in splits.items():
            syms, out, i = s.split(), [], 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == (a, b):
                    out.append(new)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            splits[w] = " ".join(out)
    return vocab


def test_train_small_corpus_against_oracle():
    v = train_wordpiece(["aaab", "aab"], target_size=len(SPECIAL_TOKENS) + 4)
    assert {"a", "##a", "##b"} <= set(v.tokens)
    expected = _oracle_merges(Counter(["aaab", "aab"]), 4, 2)
    assert set(v.tokens) - set(SPECIAL_TOKENS) == expected
    assert len(v) == len(SPECIAL_TOKENS) + 4


def test_train_single_word():
    v = train_wordpiece(["ab"], target_size=100, min_freq=1)
    assert "ab" in v
    assert tokenize("ab", v) == ["ab"]


def test_train_budget_too_small():
    with pytest.raises(VocabError):
        train_wordpiece(["abc def"], target_size=len(SPECIAL_TOKENS) + 2)


def test_train_empty():
    with pytest.raises(CorpusEmpty):
        train_wordpiece(["", "   "], target_size=100)


def test_train_no_unk_on_seen_characters():
    corpus = ["how many people play for the Dallas Cowboys ?", TABLE1_ENC, "Tom Hanks married whom ?"]
    v = train_wordpiece(corpus, target_size=60, min_freq=2)
    for line in corpus:
        assert UNK not in tokenize(line, v)


def test_tokenize_greedy_longest_match():
    v = toy_vocab("un", "##aff", "##able", "##a", "u", "##n")
    assert tokenize("unaffable", v) == ["un", "##aff", "##able"]


def test_tokenize_identity_and_unk():
    v = toy_vocab("select")
    assert tokenize("select", v) == ["select"]
    assert tokenize("zzz", v) == [UNK]


def test_pretokenize_keeps_codec_tokens():
    assert pretokenize(TABLE1_ENC) == TABLE1_ENC.split()
    assert pretokenize("count(var_uri) 3.5 -2") == ["count(var_uri)", "3.5", "-2"]
    assert pretokenize("Dallas Cowboys?") == ["Dallas", "Cowboys", "?"]


def test_encode_sequence_empty():
    v = toy_vocab()
    seq = encode_sequence([], v, 4)
    assert seq.ids == [v.cls_id, v.sep_id, v.pad_id, v.pad_id]
    assert seq.attention_mask == [1, 1, 0, 0]
    assert seq.segment_ids == [0, 0, 0, 0]


def test_encode_sequence_truncation():
    v = toy_vocab("x")
    seq = encode_sequence(["x"] * 100, v, 16)
    assert len(seq.ids) == 16
    assert seq.ids.count(v.token_to_id["x"]) == 14
    assert seq.ids[0] == v.cls_id and seq.ids[-1] == v.sep_id


def test_table1_round_trip_under_trained_vocab():
    v = train_wordpiece([TABLE1_ENC, encode("ASK WHERE { ?x ?y ?z }").text], target_size=200, min_freq=1)
    toks = tokenize(TABLE1_ENC, v)
    seq = encode_sequence(toks, v, 64)
    back = [v.tokens[i] for i in seq.ids]
    assert detokenize(back) == TABLE1_ENC


def test_detokenize():
    assert detokenize(["un", "##aff", "##able"]) == "unaffable"
    assert detokenize(["[CLS]", "select", "[SEP]", "[PAD]"]) == "select"


WORDS = st.text("abcdeXYZ", min_size=1, max_size=8)
SENTENCES = st.lists(WORDS, min_size=1, max_size=8).map(" ".join)
# every character both word-initial and as a continuation piece
SHARED_VOCAB = train_wordpiece(
    [" ".join("abcdeXYZ") + " " + " ".join("a" + c for c in "abcdeXYZ") + " abcde XYZ"],
    target_size=60,
    min_freq=1,
)


@settings(max_examples=100, deadline=None)
@given(SENTENCES)
def test_detokenize_inverts_tokenize(text):
    assert detokenize(tokenize(text, SHARED_VOCAB)) == " ".join(text.split())


@settings(max_examples=100, deadline=None)
@given(WORDS)
def test_pieces_concatenate_to_word(word):
    pieces = tokenize(word, SHARED_VOCAB)
    assert pieces[0] + "".join(p[2:] for p in pieces[1:]) == word
    assert all(p.startswith("##") for p in pieces[1:])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["a", "##b", "zz"]), max_size=40), st.integers(2, 30))
def test_sequence_invariants(tokens, max_len):
    v = toy_vocab("a", "##b")
    seq = encode_sequence(tokens, v, max_len)
    assert len(seq.ids) == len(seq.attention_mask) == len(seq.segment_ids) == max_len
    assert seq.ids[0] == v.cls_id
    assert seq.ids[seq.length - 1] == v.sep_id
    assert seq.attention_mask == [int(i != v.pad_id) for i in seq.ids]
    assert seq.length <= max_len
