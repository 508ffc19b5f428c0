import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sparql_lm.decoding import (
    EmptySource,
    GenerateConfig,
    Seq2SeqScorer,
    beam_search,
    generate,
    greedy,
)
from sparql_lm.model import ModelConfig, build_seq2seq
from sparql_lm.tokenizer import SPECIAL_TOKENS, Vocab


class TableScorer:
    """Toy model: next-token log-probs are a fixed random function of the prefix."""

    def __init__(self, V, seed, temp=1.0):
        self.V, self.seed, self.temp = V, seed, temp
        self.calls = 0

    def row(self, prefix):
        rng = np.random.default_rng([self.seed, len(prefix), *prefix])
        z = rng.normal(size=self.V) * self.temp
        return z - np.log(np.exp(z).sum())

    def __call__(self, prefixes):
        self.calls += 1
        return np.stack([self.row(p) for p in prefixes])


def brute_force(scorer, V, eos, max_len):
    """Every complete sequence: ends in eos (eos nowhere else) or has max_len tokens."""
    best = None
    for n in range(1, max_len + 1):
        for seq in itertools.product(range(V), repeat=n):
            if eos in seq[:-1]:
                continue
            if seq[-1] != eos and n < max_len:
                continue
            lp = sum(scorer.row(list(seq[:k]))[seq[k]] for k in range(n))
            if best is None or lp > best[0] + 1e-12 or (abs(lp - best[0]) <= 1e-12 and list(seq) < best[1]):
                best = (lp, list(seq))
    return best


def test_known_optimum_two_tokens():
    # greedy takes token 0 first, but the best 3-token sequence starts with 1
    table = {
        (): [np.log(0.6), np.log(0.4)],
        (0,): [np.log(0.5), np.log(0.5)],
        (1,): [np.log(0.95), np.log(0.05)],
        (0, 0): [np.log(0.5), np.log(0.5)],
        (0, 1): [np.log(0.5), np.log(0.5)],
        (1, 0): [np.log(0.99), np.log(0.01)],
        (1, 1): [np.log(0.5), np.log(0.5)],
    }
    scorer = lambda ps: np.array([table[tuple(p)] for p in ps])  # noqa: E731
    best = beam_search(scorer, eos_id=99, beam_width=4, max_len=3)[0]
    assert best.ids == [1, 0, 0]
    assert np.isclose(best.logprob, np.log(0.4 * 0.95 * 0.99))
    assert greedy(scorer, 99, 3).ids[0] == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.integers(2, 5), st.integers(0, 10_000))
def test_enumeration_bound_beam_is_exact(V, max_len, seed):
    scorer = TableScorer(V, seed)
    eos = V - 1
    best = beam_search(scorer, eos, beam_width=V**max_len, max_len=max_len)[0]
    lp, ids = brute_force(scorer, V, eos, max_len)
    assert np.isclose(best.logprob, lp, atol=1e-10) and best.ids == ids


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(2, 8), st.integers(0, 10_000))
def test_width_one_is_greedy(V, max_len, seed):
    scorer = TableScorer(V, seed, temp=2.0)
    (h,) = beam_search(scorer, V - 1, beam_width=1, max_len=max_len)
    g = greedy(scorer, V - 1, max_len)
    assert h.ids == g.ids and np.isclose(h.logprob, g.logprob)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.integers(2, 5), st.integers(1, 12), st.integers(0, 10_000),
       st.sampled_from([0.0, 0.6, 1.0]))
def test_hypothesis_invariants(V, max_len, k, seed, lp):
    eos = 0
    hyps = beam_search(TableScorer(V, seed), eos, beam_width=k, max_len=max_len, length_penalty=lp)
    assert 1 <= len(hyps) <= k
    scores = [h.score(lp) for h in hyps]
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    for h in hyps:
        assert h.logprob <= 0 and h.finished
        assert (h.ids[-1] == eos) or len(h.ids) == max_len
        assert eos not in h.ids[:-1]  # nothing after the end token


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.integers(2, 5), st.integers(1, 20), st.integers(0, 10_000))
def test_exhaustive_beam_dominates_any_width(V, max_len, k, seed):
    scorer = TableScorer(V, seed)
    narrow = beam_search(scorer, V - 1, beam_width=k, max_len=max_len)[0]
    wide = beam_search(scorer, V - 1, beam_width=V**max_len, max_len=max_len)[0]
    assert narrow.logprob <= wide.logprob + 1e-12


def test_wider_beam_can_score_worse():
    # width 2 keeps prefix 1 whose two children crowd out 0 -> 0, and then decays;
    # width 1 follows 0 -> 0 -> 0 and scores higher. Wider is not always better.
    log = np.log
    table = {
        (): log([0.5, 0.3, 0.1, 0.1]),
        (0,): log([0.25] * 4),
        (1,): log([0.49, 0.49, 0.01, 0.01]),
        (0, 0): log([0.99, 0.0033, 0.0033, 0.0034]),
    }
    scorer = lambda ps: np.stack([table.get(tuple(p), log([0.25] * 4)) for p in ps])  # noqa: E731
    w1 = beam_search(scorer, eos_id=3, beam_width=1, max_len=3)[0]
    w2 = beam_search(scorer, eos_id=3, beam_width=2, max_len=3)[0]
    assert w1.ids == [0, 0, 0] and np.isclose(np.exp(w1.logprob), 0.5 * 0.25 * 0.99)
    assert w2.ids[0] == 1 and w2.logprob < w1.logprob
    exact = beam_search(scorer, eos_id=3, beam_width=4**3, max_len=3)[0]
    assert exact.logprob >= w1.logprob


def test_width_16_can_miss_the_optimum():
    # prefix (0,0,0) ranks last of 27 live prefixes at depth 3, then ends with certainty
    log = np.log

    def row(p):
        p = tuple(p)
        if p == (0, 0):
            return log([0.30, 0.345, 0.345, 0.01])
        if p == (0, 0, 0):
            return log([1e-4, 1e-4, 1e-4, 1 - 3e-4])
        return log([0.33, 0.33, 0.33, 0.01])

    scorer = lambda ps: np.stack([row(p) for p in ps])  # noqa: E731
    assert beam_search(scorer, 3, beam_width=16, max_len=5)[0].ids != [0, 0, 0, 3]
    assert beam_search(scorer, 3, beam_width=27, max_len=5)[0].ids == [0, 0, 0, 3]


def test_ties_go_to_lower_ids():
    flat = lambda ps: np.full((len(ps), 3), -np.log(3.0))  # noqa: E731
    hyps = beam_search(flat, eos_id=2, beam_width=3, max_len=2)
    assert hyps[0].ids == [2]
    assert [h.ids for h in beam_search(flat, eos_id=2, beam_width=1, max_len=3)] == [[0, 0, 0]]


def test_bad_arguments():
    with pytest.raises(ValueError):
        beam_search(TableScorer(3, 0), 2, beam_width=0)


VOCAB = Vocab(tuple(SPECIAL_TOKENS) + tuple("abcdefg"))


def _model():
    cfg = ModelConfig(num_layers=1, hidden=16, heads=2, vocab_size=len(VOCAB), max_positions=32, dropout=0.0)
    return build_seq2seq(cfg, cfg.as_decoder(), seed=0).eval()


def test_seq2seq_scorer_matches_full_forward():
    model = _model()
    src = [2, 5, 6, 7, 3]
    scorer = Seq2SeqScorer(model, src, None, bos_id=VOCAB.cls_id)
    rows = scorer([[5, 6], [7]])
    with torch.no_grad():
        full = model(torch.tensor([src]), torch.ones(1, 5, dtype=torch.long),
                     torch.tensor([[2, 5, 6]]), torch.ones(1, 3, dtype=torch.long))
    np.testing.assert_allclose(rows[0], full[0, 2].double().log_softmax(-1).numpy(), atol=1e-6)


def test_generate_respects_max_len_and_empty_source():
    model = _model()
    gen = generate(model, "a b c", "nl2sparql", VOCAB, VOCAB, GenerateConfig(beam_width=3, max_len=6))
    assert len(gen.tokens) <= 6
    assert gen.decode_ok in (True, False)
    with pytest.raises(EmptySource):
        generate(model, "   ", "nl2sparql", VOCAB, VOCAB)
    with pytest.raises(ValueError):
        generate(model, "a", "translate", VOCAB, VOCAB)
