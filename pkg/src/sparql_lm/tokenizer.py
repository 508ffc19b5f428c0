"""WordPiece vocabulary, tokenization and BERT-style sequence assembly."""
from __future__ import annotations

import hashlib
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

CLS, SEP, MASK, PAD, UNK = "[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
CONTINUATION = "##"
MAX_WORD_CHARS = 100


class VocabError(ValueError):
    pass


class MissingSpecial(VocabError):
    pass


class DuplicateToken(VocabError):
    pass


class CorpusEmpty(VocabError):
    pass


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    continuation_prefix: str = CONTINUATION
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mapping: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok in mapping:
                raise DuplicateToken(f"{tok!r} at lines {mapping[tok] + 1} and {i + 1}")
            mapping[tok] = i
        missing = [s for s in SPECIAL_TOKENS if s not in mapping]
        if missing:
            raise MissingSpecial(f"vocab lacks {', '.join(missing)}")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.token_to_id

    @property
    def cls_id(self) -> int:
        return self.token_to_id[CLS]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP]

    @property
    def mask_id(self) -> int:
        return self.token_to_id[MASK]

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.token_to_id[s] for s in SPECIAL_TOKENS)

    def id_of(self, tok: str) -> int:
        return self.token_to_id.get(tok, self.unk_id)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> Vocab:
    """One token per line, line index = id."""
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n").rstrip("\r") for line in fh]
    if tokens and tokens[-1] == "":
        tokens.pop()
    return Vocab(tuple(tokens))


# --------------------------------------------------------------------------
# pretokenization

# whitespace words kept whole: IRI refs, fused calls like count(var_x),
# identifiers such as var_uri / brack_open, and numbers
_KEEP_WHOLE = re.compile(
    r"^(?:<[^<>\s]*>"
    r"|[A-Za-z]+\([^\s()]*\)"
    r"|\w+"
    r"|[+-]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)$"
)


def _is_punct(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def pretokenize(text: str) -> list[str]:
    words: list[str] = []
    for chunk in text.split():
        if _KEEP_WHOLE.match(chunk):
            words.append(chunk)
            continue
        buf = ""
        for ch in chunk:
            if _is_punct(ch) and ch != "_":
                if buf:
                    words.append(buf)
                    buf = ""
                words.append(ch)
            else:
                buf += ch
        if buf:
            words.append(buf)
    return words


# --------------------------------------------------------------------------
# tokenization


def wordpiece(word: str, v: Vocab) -> list[str]:
    """Greedy longest-match-first split of a single word."""
    if len(word) > MAX_WORD_CHARS:
        return [UNK]
    pieces, start = [], 0
    while start < len(word):
        end = len(word)
        while end > start:
            sub = word[start:end]
            if start > 0:
                sub = v.continuation_prefix + sub
            if sub in v:
                break
            end -= 1
        if end == start:
            return [UNK]
        pieces.append(sub)
        start = end
    return pieces


def tokenize(text: str, v: Vocab) -> list[str]:
    out: list[str] = []
    for word in pretokenize(text):
        out.extend(wordpiece(word, v))
    return out


def detokenize(tokens: Iterable[str], continuation_prefix: str = CONTINUATION) -> str:
    words: list[str] = []
    for tok in tokens:
        if tok in SPECIAL_TOKENS and tok != UNK:
            continue
        if tok.startswith(continuation_prefix) and words:
            words[-1] += tok[len(continuation_prefix):]
        else:
            words.append(tok)
    return " ".join(words)


@dataclass
class TokenSequence:
    """Model-ready ids. ``length`` counts the non-pad positions."""

    ids: list[int]
    attention_mask: list[int]
    segment_ids: list[int]
    length: int

    def __len__(self) -> int:
        return len(self.ids)


def encode_sequence(tokens: list[str], v: Vocab, max_len: int) -> TokenSequence:
    """[CLS] tokens [SEP], content truncated to fit, padded to ``max_len``."""
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    body = [v.id_of(t) for t in tokens[: max_len - 2]]
    ids = [v.cls_id, *body, v.sep_id]
    n = len(ids)
    pad = max_len - n
    return TokenSequence(
        ids=ids + [v.pad_id] * pad,
        attention_mask=[1] * n + [0] * pad,
        segment_ids=[0] * max_len,
        length=n,
    )


def decode_ids(ids: Iterable[int], v: Vocab) -> list[str]:
    return [v.tokens[i] for i in ids]


# --------------------------------------------------------------------------
# training


def _merge_word(word: tuple[str, ...], a: str, b: str, merged: str) -> tuple[str, ...]:
    out, i = [], 0
    while i < len(word):
        if i + 1 < len(word) and word[i] == a and word[i + 1] == b:
            out.append(merged)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


def train_wordpiece(corpus: Iterable[str], target_size: int, min_freq: int = 2) -> Vocab:
    """Build a vocabulary by repeatedly merging the most frequent adjacent pair.

    Every word starts as its characters (non-initial ones carrying ``##``), so
    any character seen in training is always representable. Ties between
    equally frequent pairs go to the lexicographically smallest pair.
    """
    counts: Counter[str] = Counter()
    for line in corpus:
        counts.update(w for w in pretokenize(line) if len(w) <= MAX_WORD_CHARS)
    if not counts:
        raise CorpusEmpty("no words in training corpus")

    words = {w: tuple([w[0]] + [CONTINUATION + c for c in w[1:]]) for w in counts}
    alphabet = sorted({s for split in words.values() for s in split})
    if target_size < len(SPECIAL_TOKENS) + len(alphabet):
        raise VocabError(
            f"target_size {target_size} below specials + alphabet "
            f"({len(SPECIAL_TOKENS)} + {len(alphabet)})"
        )
    vocab = list(SPECIAL_TOKENS) + alphabet
    known = set(vocab)

    while len(vocab) < target_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for w, split in words.items():
            c = counts[w]
            for a, b in zip(split, split[1:]):
                pairs[a, b] += c
        if not pairs:
            break
        best_count = max(pairs.values())
        if best_count < min_freq:
            break
        a, b = min(p for p, c in pairs.items() if c == best_count)
        merged = a + b[len(CONTINUATION):]
        for w, split in words.items():
            if len(split) > 1:
                words[w] = _merge_word(split, a, b, merged)
        if merged not in known:
            known.add(merged)
            vocab.append(merged)
    return Vocab(tuple(vocab))
