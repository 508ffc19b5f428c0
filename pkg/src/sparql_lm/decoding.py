"""Beam search over a next-token scorer, and text-to-text generation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .codec import CodecError, NamespaceTable, decode, encode, validate_query
from .model import Seq2Seq
from .tokenizer import Vocab, decode_ids, detokenize, encode_sequence, tokenize


class EmptySource(ValueError):
    pass


@dataclass
class Hypothesis:
    ids: list[int]  # generated tokens, no start token
    logprob: float
    finished: bool

    def score(self, length_penalty: float = 0.0) -> float:
        if length_penalty == 0.0 or not self.ids:
            return self.logprob
        return self.logprob / (len(self.ids) ** length_penalty)


# a scorer maps generated prefixes to next-token log-probabilities (n x V)
Scorer = Callable[[list[list[int]]], np.ndarray]


class Seq2SeqScorer:
    """Next-token log-probabilities from an encoder-decoder for one source.

    The source is encoded once; each call re-runs the decoder over the full
    prefixes (no incremental state).
    """

    def __init__(self, model: Seq2Seq, src_ids: Sequence[int], src_mask: Sequence[int] | None, bos_id: int):
        self.model = model
        self.bos_id = bos_id
        src = torch.tensor([list(src_ids)], dtype=torch.long)
        mask = torch.tensor([list(src_mask) if src_mask is not None else [1] * len(src_ids)], dtype=torch.long)
        with torch.no_grad():
            self.enc = model.encode(src, mask)
        self.src_mask = mask

    @torch.no_grad()
    def __call__(self, prefixes: list[list[int]]) -> np.ndarray:
        n = len(prefixes)
        width = 1 + max(len(p) for p in prefixes)
        ids = torch.zeros(n, width, dtype=torch.long)
        mask = torch.zeros(n, width, dtype=torch.long)
        for i, p in enumerate(prefixes):
            row = [self.bos_id, *p]
            ids[i, : len(row)] = torch.tensor(row)
            mask[i, : len(row)] = 1
        logits = self.model.decode(ids, mask, self.enc.expand(n, -1, -1), self.src_mask.expand(n, -1))
        last = torch.tensor([len(p) for p in prefixes])
        out = logits[torch.arange(n), last].double().log_softmax(-1)
        return out.numpy()


def beam_search(
    scorer: Scorer,
    eos_id: int,
    beam_width: int = 10,
    max_len: int = 128,
    length_penalty: float = 0.0,
) -> list[Hypothesis]:
    """Breadth-limited best-first decoding.

    At each step every live hypothesis is extended by every token and the
    ``beam_width`` best extensions (by summed log-probability) survive;
    those ending in ``eos_id`` or reaching ``max_len`` tokens retire to the
    finished pool. Ties go to the lexicographically smaller id sequence.
    The pool is ranked by ``logprob / len ** length_penalty``.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    live = [Hypothesis([], 0.0, False)]
    pool: list[Hypothesis] = []
    for t in range(max_len):
        if not live:
            break
        lp = np.asarray(scorer([h.ids for h in live]), dtype=np.float64)
        cand = []
        for i, h in enumerate(live):
            row = lp[i]
            # only the beam_width best tokens of a row can survive
            top = np.argsort(-row, kind="stable")[:beam_width]
            cand.extend((h.logprob + float(row[v]), h.ids + [int(v)]) for v in top)
        cand.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for logprob, ids in cand[:beam_width]:
            done = ids[-1] == eos_id or len(ids) == max_len
            (pool if done else live).append(Hypothesis(ids, logprob, done))
    pool.sort(key=lambda h: (-h.score(length_penalty), h.ids))
    return pool[:beam_width]


def greedy(scorer: Scorer, eos_id: int, max_len: int = 128) -> Hypothesis:
    ids: list[int] = []
    logprob = 0.0
    while len(ids) < max_len:
        row = np.asarray(scorer([ids])[0], dtype=np.float64)
        v = int(np.argmax(row))  # first maximum = lowest id
        ids.append(v)
        logprob += float(row[v])
        if v == eos_id:
            break
    return Hypothesis(ids, logprob, True)


# --------------------------------------------------------------------------
# generation

TASKS = ("nl2sparql", "sparql2nl")
DEFAULT_MAX_LEN = {"nl2sparql": 128, "sparql2nl": 64}


@dataclass
class GenerateConfig:
    beam_width: int = 10
    max_len: int | None = None  # generated tokens; None: per-task default
    length_penalty: float = 0.0
    src_max: int = 128
    namespaces: NamespaceTable = field(default_factory=NamespaceTable)


@dataclass
class Generation:
    text: str
    tokens: list[str]
    logprob: float
    sparql: str | None = None  # executable form, nl2sparql only
    decode_ok: bool | None = None  # decoded and accepted by the validator
    decode_error: str | None = None


def _source_text(text: str, task: str, ns: NamespaceTable) -> str:
    if task == "sparql2nl":
        try:
            return encode(text, ns).text
        except CodecError:
            return text  # already in encoded form
    return text


def generate(
    model: Seq2Seq,
    text: str,
    task: str,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    cfg: GenerateConfig = GenerateConfig(),
) -> Generation:
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    if not text.strip():
        raise EmptySource("empty input")
    src_text = _source_text(text, task, cfg.namespaces)
    toks = tokenize(src_text, src_vocab)
    if not toks:
        raise EmptySource("input produced no tokens")
    seq = encode_sequence(toks, src_vocab, cfg.src_max)
    scorer = Seq2SeqScorer(model, seq.ids[: seq.length], seq.attention_mask[: seq.length], tgt_vocab.cls_id)
    max_len = cfg.max_len or DEFAULT_MAX_LEN[task]
    model.eval()
    best = beam_search(scorer, tgt_vocab.sep_id, cfg.beam_width, max_len, cfg.length_penalty)[0]
    pieces = decode_ids(best.ids, tgt_vocab)
    out_text = detokenize(pieces)
    gen = Generation(out_text, pieces, best.logprob)
    if task == "nl2sparql":
        try:
            gen.sparql = decode(out_text, cfg.namespaces)
        except CodecError as exc:
            gen.decode_ok, gen.decode_error = False, str(exc)
            return gen
        report = validate_query(gen.sparql)
        gen.decode_ok, gen.decode_error = report.accepted, report.error
    return gen
