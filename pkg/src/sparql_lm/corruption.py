"""Masked-token and n-gram-permutation corruption for pre-training examples."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import IO, Iterable, Iterator

import numpy as np

from .codec import EncodedQuery
from .tokenizer import TokenSequence, Vocab, encode_sequence, tokenize

IGNORE = -100


@dataclass(frozen=True)
class CorruptionConfig:
    mlm_rate: float = 0.15
    wso_rate: float = 0.10
    ngram_size: int = 3
    mask_split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.mlm_rate <= 1.0 and 0.0 <= self.wso_rate <= 1.0):
            raise ValueError("rates must lie in [0, 1]")
        if self.ngram_size < 2:
            raise ValueError("ngram_size must be >= 2")
        if len(self.mask_split) != 3 or min(self.mask_split) < 0 or abs(sum(self.mask_split) - 1) > 1e-9:
            raise ValueError("mask_split must be three non-negative fractions summing to 1")


@dataclass
class PretrainExample:
    input_ids: list[int]
    mlm_labels: list[int]
    wso_labels: list[int]
    attention_mask: list[int]


def content_positions(seq: TokenSequence) -> list[int]:
    """Positions strictly between the leading [CLS] and the closing [SEP]."""
    return list(range(1, seq.length - 1))


def apply_mlm(
    seq: TokenSequence, cfg: CorruptionConfig, rng: np.random.Generator, vocab: Vocab
) -> tuple[TokenSequence, list[int]]:
    """Select each content position with probability ``mlm_rate``.

    Selected positions become [MASK], a random non-special id, or stay
    unchanged according to ``mask_split``; labels carry the original id there.
    """
    ids = list(seq.ids)
    labels = [IGNORE] * len(ids)
    pos = np.asarray(content_positions(seq), dtype=np.int64)
    if len(pos) == 0 or cfg.mlm_rate == 0:
        return replace(seq, ids=ids), labels
    chosen = pos[rng.random(len(pos)) < cfg.mlm_rate]
    action = rng.random(len(chosen))
    specials = vocab.special_ids
    normal = np.array([i for i in range(len(vocab)) if i not in specials], dtype=np.int64)
    random_ids = normal[rng.integers(0, len(normal), size=len(chosen))] if len(normal) else None
    p_mask, p_rand, _ = cfg.mask_split
    for k, p in enumerate(chosen):
        labels[p] = ids[p]
        if action[k] < p_mask:
            ids[p] = vocab.mask_id
        elif action[k] < p_mask + p_rand and random_ids is not None:
            ids[p] = int(random_ids[k])
    return replace(seq, ids=ids), labels


def candidate_ngrams(seq: TokenSequence, masked: set[int], n: int) -> list[int]:
    """Start positions of non-overlapping n-grams inside unmasked runs."""
    starts: list[int] = []
    run: list[int] = []
    for p in content_positions(seq) + [None]:
        if p is not None and p not in masked:
            run.append(p)
            continue
        starts.extend(run[i] for i in range(0, len(run) - n + 1, n))
        run = []
    return starts


def _non_identity_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    while True:
        perm = rng.permutation(n)
        if np.any(perm != np.arange(n)):
            return perm


def apply_wso(
    seq: TokenSequence, masked_positions: Iterable[int], cfg: CorruptionConfig, rng: np.random.Generator
) -> tuple[TokenSequence, list[int], list[tuple[int, tuple[int, ...]]]]:
    """Shuffle a fraction of the n-grams found among unmasked positions.

    Returns the corrupted sequence, the labels (original ids inside every
    shuffled n-gram) and the applied ``(start, permutation)`` pairs, where
    ``new[start + j] = old[start + perm[j]]``.
    """
    ids = list(seq.ids)
    labels = [IGNORE] * len(ids)
    if cfg.wso_rate == 0:
        return replace(seq, ids=ids), labels, []
    n = cfg.ngram_size
    starts = candidate_ngrams(seq, set(masked_positions), n)
    k = math.ceil(cfg.wso_rate * len(starts))
    if k == 0:
        return replace(seq, ids=ids), labels, []
    picked = sorted(rng.choice(len(starts), size=k, replace=False))
    applied = []
    for idx in picked:
        s = starts[idx]
        perm = _non_identity_permutation(n, rng)
        window = [seq.ids[s + j] for j in range(n)]
        for j in range(n):
            ids[s + j] = window[perm[j]]
            labels[s + j] = seq.ids[s + j]
        applied.append((s, tuple(int(x) for x in perm)))
    return replace(seq, ids=ids), labels, applied


def undo_wso(ids: list[int], applied: list[tuple[int, tuple[int, ...]]]) -> list[int]:
    out = list(ids)
    for s, perm in applied:
        for j, src in enumerate(perm):
            out[s + src] = ids[s + j]
    return out


def corrupt(
    seq: TokenSequence, vocab: Vocab, cfg: CorruptionConfig, rng: np.random.Generator, wso: bool = True
) -> PretrainExample:
    masked_seq, mlm_labels = apply_mlm(seq, cfg, rng, vocab)
    masked = {p for p, lab in enumerate(mlm_labels) if lab != IGNORE}
    if wso and cfg.wso_rate > 0:
        out, wso_labels, _ = apply_wso(masked_seq, masked, cfg, rng)
    else:
        out, wso_labels = masked_seq, [IGNORE] * len(seq.ids)
    return PretrainExample(list(out.ids), mlm_labels, wso_labels, list(seq.attention_mask))


def example_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def make_pretrain_stream(
    corpus: Iterable[EncodedQuery | str],
    vocab: Vocab,
    cfg: CorruptionConfig,
    max_len: int,
    wso: bool = True,
) -> Iterator[PretrainExample]:
    """Tokenize, assemble and corrupt each query; example ``i`` uses substream (seed, i)."""
    for i, q in enumerate(corpus):
        text = q.text if isinstance(q, EncodedQuery) else q
        seq = encode_sequence(tokenize(text, vocab), vocab, max_len)
        yield corrupt(seq, vocab, cfg, example_rng(cfg.seed, i), wso=wso)


def dump_examples(examples: Iterable[PretrainExample], vocab: Vocab, fh: IO[str]) -> int:
    """Write inspection JSON lines; returns the number written."""
    n = 0
    for ex in examples:
        row = {
            "input_tokens": [vocab.tokens[i] for i, m in zip(ex.input_ids, ex.attention_mask) if m],
            "mlm_label_positions": [p for p, lab in enumerate(ex.mlm_labels) if lab != IGNORE],
            "wso_label_positions": [p for p, lab in enumerate(ex.wso_labels) if lab != IGNORE],
        }
        fh.write(json.dumps(row) + "\n")
        n += 1
    return n
