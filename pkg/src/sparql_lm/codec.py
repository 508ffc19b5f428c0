"""Cleaning and word-token encoding of SPARQL queries.

The pipeline for one raw log entry is::

    strip_comments -> inline_prefixes -> normalize_whitespace
        -> validate_query -> encode

``encode`` rewrites executable SPARQL into a space-delimited surface form
(``select distinct var_uri where brack_open <dbr_Tom_Hanks> ...``) and
``decode`` inverts it. The full token table lives in ``PUNCT_TOKENS`` /
``OP_TOKENS`` below; it is a superset of the tokens attested for DBpedia
query logs (``var_``, ``brack_open``/``brack_close``, lowercase keywords,
``<tag_Local>`` IRIs, fused ``count(var_x)`` calls).
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple
from urllib.parse import urlsplit


class CodecError(ValueError):
    pass


class UnterminatedLiteral(CodecError):
    pass


class UnknownPrefix(CodecError):
    pass


class EncodingUnsupported(CodecError):
    pass


class MalformedToken(CodecError):
    pass


class QueryRejected(CodecError):
    def __init__(self, report: "ValidationReport"):
        super().__init__(f"query rejected at {report.position}: {report.error}")
        self.report = report


# --------------------------------------------------------------------------
# namespaces

_TAG_RE = re.compile(r"^[A-Za-z][A-Za-z0-9]*$")

DEFAULT_NAMESPACES = (
    ("http://dbpedia.org/resource/", "dbr"),
    ("http://dbpedia.org/ontology/", "dbo"),
    ("http://dbpedia.org/property/", "dbp"),
    ("http://www.w3.org/1999/02/22-rdf-syntax-ns#", "rdf"),
    ("http://www.w3.org/2000/01/rdf-schema#", "rdfs"),
    ("http://xmlns.com/foaf/0.1/", "foaf"),
)


@dataclass(frozen=True)
class NamespaceTable:
    """Ordered (full IRI prefix, short tag) pairs used to shorten IRIs."""

    entries: tuple[tuple[str, str], ...] = DEFAULT_NAMESPACES

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((str(i), str(t)) for i, t in self.entries))
        iris = [i for i, _ in self.entries]
        tags = [t for _, t in self.entries]
        if len(set(iris)) != len(iris):
            raise ValueError("duplicate namespace IRI")
        if len(set(tags)) != len(tags):
            raise ValueError("duplicate namespace tag")
        for tag in tags:
            if not _TAG_RE.match(tag):
                raise ValueError(f"namespace tag must be alphanumeric: {tag!r}")
        for a in iris:
            for b in iris:
                if a != b and b.startswith(a):
                    raise ValueError(f"namespace {a!r} is a prefix of {b!r}")

    @classmethod
    def from_file(cls, path: str | Path) -> "NamespaceTable":
        """Read ``tag <whitespace> iri`` lines; ``#`` starts a comment line."""
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"bad namespace line: {line!r}")
            tag, iri = parts
            entries.append((iri.strip("<>"), tag.rstrip(":")))
        return cls(tuple(entries))

    @property
    def tags(self) -> dict[str, str]:
        return {t: i for i, t in self.entries}

    def shorten(self, iri: str) -> tuple[str, str] | None:
        best = None
        for full, tag in self.entries:
            if iri.startswith(full) and (best is None or len(full) > len(best[0])):
                best = (full, tag)
        if best is None:
            return None
        return best[1], iri[len(best[0]):]

    def expand(self, tag: str, local: str) -> str:
        return self.tags[tag] + local


# --------------------------------------------------------------------------
# lexer


class Tok(NamedTuple):
    kind: str
    value: str
    start: int
    end: int


KEYWORDS = frozenset(
    "SELECT DISTINCT REDUCED WHERE ASK FILTER OPTIONAL UNION ORDER BY ASC DESC "
    "LIMIT OFFSET AS".split()
)
AGGREGATES = frozenset("COUNT SUM MIN MAX AVG SAMPLE".split())
FUNCTIONS = AGGREGATES | frozenset(
    "STR LANG LANGMATCHES DATATYPE BOUND IRI URI ABS CEIL FLOOR ROUND CONCAT "
    "STRLEN UCASE LCASE CONTAINS STRSTARTS STRENDS YEAR MONTH DAY NOW RAND "
    "ISIRI ISURI ISBLANK ISLITERAL ISNUMERIC REGEX SAMETERM".split()
)

PUNCT_TOKENS = {
    "{": "brack_open",
    "}": "brack_close",
    ".": "sep_dot",
    ";": "sep_semi",
    ",": "sep_comma",
    "(": "attr_open",
    ")": "attr_close",
    "*": "sym_star",
}
OP_TOKENS = {
    "=": "math_eq",
    "!=": "math_neq",
    "<": "math_lt",
    ">": "math_gt",
    "<=": "math_leq",
    ">=": "math_geq",
    "&&": "logic_and",
    "||": "logic_or",
    "!": "logic_not",
    "+": "math_plus",
    "-": "math_minus",
    "/": "math_div",
}
_DECODE_SYMBOLS = {v: k for k, v in {**PUNCT_TOKENS, **OP_TOKENS}.items()}

_IRI_RE = re.compile(r'<([^<>"{}|^`\\\x00-\x20]*)>')
_IRI_START_RE = re.compile(r"<[A-Za-z][A-Za-z0-9+.\-]*:")
_VAR_RE = re.compile(r"[?$]([A-Za-z0-9_·-￿]+)")
_LANG_RE = re.compile(r"@[A-Za-z]+(?:-[A-Za-z0-9]+)*")
_NUM_RE = re.compile(r"\d+\.\d*[eE][+-]?\d+|\.?\d+[eE][+-]?\d+|\d*\.\d+|\d+")
_PNAME_RE = re.compile(
    r"(?:[A-Za-z](?:[\w.\-]*[\w\-])?)?:"
    r"(?:(?:[\w:%\-]|\\.)(?:(?:[\w.:%\-]|\\.)*(?:[\w:%\-]|\\.))?)?"
)
_WORD_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_OPERAND_KINDS = {"IRI", "VAR", "STRING", "NUMBER", "PNAME", "LANGTAG"}


def _scan_string(text: str, i: int) -> int:
    """Return the index just past the string literal starting at ``i``."""
    q = text[i]
    if text.startswith(q * 3, i):
        j = text.find(q * 3, i + 3)
        while j != -1 and _escaped(text, j):
            j = text.find(q * 3, j + 1)
        if j == -1:
            raise UnterminatedLiteral(f"unterminated long string at {i}")
        return j + 3
    j = i + 1
    while j < len(text):
        c = text[j]
        if c == "\\":
            j += 2
            continue
        if c == q:
            return j + 1
        if c in "\r\n":
            break
        j += 1
    raise UnterminatedLiteral(f"unterminated string literal at {i}")


def _escaped(text: str, j: int) -> bool:
    n = 0
    while j - n - 1 >= 0 and text[j - n - 1] == "\\":
        n += 1
    return n % 2 == 1


def lex(text: str, strict: bool = True) -> list[Tok]:
    """Split SPARQL text into tokens, comments included as COMMENT tokens.

    With ``strict=False`` unknown characters become OTHER tokens instead of
    raising, which is what comment stripping and prefix inlining need.
    """
    toks: list[Tok] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        prev = toks[-1].kind if toks else None
        if c == "#":
            j = i
            while j < n and text[j] not in "\r\n":
                j += 1
            toks.append(Tok("COMMENT", text[i:j], i, j))
            i = j
            continue
        if c in "\"'":
            j = _scan_string(text, i)
            toks.append(Tok("STRING", text[i:j], i, j))
            i = j
            continue
        if c == "<":
            m = _IRI_RE.match(text, i)
            if m:
                toks.append(Tok("IRI", m.group(1), i, m.end()))
                i = m.end()
                continue
            if _IRI_START_RE.match(text, i):
                raise UnterminatedLiteral(f"unterminated IRI reference at {i}")
        if c in "?$":
            m = _VAR_RE.match(text, i)
            if m:
                toks.append(Tok("VAR", m.group(1), i, m.end()))
                i = m.end()
                continue
        if c == "@" and prev == "STRING":
            m = _LANG_RE.match(text, i)
            if m:
                toks.append(Tok("LANGTAG", m.group(0)[1:], i, m.end()))
                i = m.end()
                continue
        if text.startswith("^^", i):
            toks.append(Tok("DTYPE", "^^", i, i + 2))
            i += 2
            continue
        signed = c in "+-" and prev not in _OPERAND_KINDS and not (
            prev == "PUNCT" and toks[-1].value == ")"
        )
        m = _NUM_RE.match(text, i + 1 if signed else i)
        if m and (signed or c.isdigit() or c == "."):
            toks.append(Tok("NUMBER", text[i:m.end()], i, m.end()))
            i = m.end()
            continue
        m = _PNAME_RE.match(text, i)
        if m and ":" in m.group(0):
            toks.append(Tok("PNAME", m.group(0), i, m.end()))
            i = m.end()
            continue
        m = _WORD_RE.match(text, i)
        if m:
            toks.append(Tok("WORD", m.group(0), i, m.end()))
            i = m.end()
            continue
        two = text[i:i + 2]
        if two in ("&&", "||", "!=", "<=", ">="):
            toks.append(Tok("OP", two, i, i + 2))
            i += 2
            continue
        if c in PUNCT_TOKENS:
            toks.append(Tok("PUNCT", c, i, i + 1))
            i += 1
            continue
        if c in OP_TOKENS:
            toks.append(Tok("OP", c, i, i + 1))
            i += 1
            continue
        if strict:
            raise CodecError(f"unexpected character {c!r} at {i}")
        toks.append(Tok("OTHER", c, i, i + 1))
        i += 1
    return toks


# --------------------------------------------------------------------------
# cleaning


@dataclass
class RawQuery:
    text: str
    source_id: str | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("empty query text")


def strip_comments(raw: RawQuery | str) -> str:
    """Remove ``#`` comments that sit outside IRI refs and string literals."""
    text = raw.text if isinstance(raw, RawQuery) else raw
    out, last = [], 0
    for tok in lex(text, strict=False):
        if tok.kind == "COMMENT":
            out.append(text[last:tok.start])
            last = tok.end
    out.append(text[last:])
    return "".join(out)


def _unescape_local(local: str) -> str:
    return re.sub(r"\\(.)", r"\1", local)


def inline_prefixes(text: str) -> str:
    """Drop PREFIX declarations and expand prefixed names into full IRIs."""
    toks = lex(text, strict=False)
    prefixes: dict[str, str] = {}
    out, last, k = [], 0, 0
    while k < len(toks):
        tok = toks[k]
        if (
            tok.kind == "WORD"
            and tok.value.upper() == "PREFIX"
            and k + 2 < len(toks)
            and toks[k + 1].kind == "PNAME"
            and toks[k + 1].value.endswith(":")
            and toks[k + 2].kind == "IRI"
        ):
            prefixes[toks[k + 1].value[:-1]] = toks[k + 2].value
            end = toks[k + 2].end
            while end < len(text) and text[end].isspace():
                end += 1
            out.append(text[last:tok.start])
            last = end
            k += 3
            continue
        if tok.kind == "PNAME":
            label, local = tok.value.split(":", 1)
            if label not in prefixes:
                raise UnknownPrefix(f"undeclared prefix {label!r} at {tok.start}")
            out.append(text[last:tok.start])
            out.append(f"<{prefixes[label]}{_unescape_local(local)}>")
            last = tok.end
        k += 1
    out.append(text[last:])
    return "".join(out)


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


# --------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    accepted: bool
    error: str | None = None
    position: int | None = None
    unknown_links: list[str] = field(default_factory=list)


class _SyntaxError(Exception):
    def __init__(self, msg: str, pos: int):
        super().__init__(msg)
        self.pos = pos


_FUSABLE = FUNCTIONS | {"ASC", "DESC"}
_REL_OPS = {"=", "!=", "<", ">", "<=", ">="}


class _Parser:
    """Recursive-descent recognizer for the supported SELECT/ASK subset."""

    def __init__(self, toks: list[Tok], text_len: int):
        self.toks = toks
        self.i = 0
        self.eof = text_len

    # helpers
    def peek(self, off: int = 0) -> Tok | None:
        j = self.i + off
        return self.toks[j] if j < len(self.toks) else None

    def fail(self, msg: str):
        tok = self.peek()
        raise _SyntaxError(msg, tok.start if tok else self.eof)

    def is_kw(self, word: str, off: int = 0) -> bool:
        tok = self.peek(off)
        return tok is not None and tok.kind == "WORD" and tok.value.upper() == word

    def is_punct(self, p: str, off: int = 0) -> bool:
        tok = self.peek(off)
        return tok is not None and tok.kind in ("PUNCT", "OP") and tok.value == p

    def take(self) -> Tok:
        tok = self.peek()
        if tok is None:
            self.fail("unexpected end of query")
        self.i += 1
        return tok

    def expect(self, p: str):
        if not self.is_punct(p):
            self.fail(f"expected {p!r}")
        self.i += 1

    # grammar
    def query(self):
        if self.is_kw("SELECT"):
            self.select()
        elif self.is_kw("ASK"):
            self.i += 1
            if self.is_kw("WHERE"):
                self.i += 1
            self.group()
        else:
            self.fail("expected SELECT or ASK")
        if self.peek() is not None:
            self.fail("trailing tokens after query")

    def select(self):
        self.i += 1
        if self.is_kw("DISTINCT") or self.is_kw("REDUCED"):
            self.i += 1
        if self.is_punct("*"):
            self.i += 1
        else:
            n = 0
            while True:
                tok = self.peek()
                if tok is None:
                    break
                if tok.kind == "VAR":
                    self.i += 1
                elif self.is_call():
                    self.call()
                elif self.is_punct("("):
                    self.i += 1
                    self.expr()
                    if not self.is_kw("AS"):
                        self.fail("expected AS")
                    self.i += 1
                    if self.take().kind != "VAR":
                        self.i -= 1
                        self.fail("expected variable after AS")
                    self.expect(")")
                else:
                    break
                n += 1
            if n == 0:
                self.fail("empty projection")
        if self.is_kw("WHERE"):
            self.i += 1
        self.group()
        self.modifiers()

    def modifiers(self):
        if self.is_kw("ORDER"):
            self.i += 1
            if not self.is_kw("BY"):
                self.fail("expected BY")
            self.i += 1
            n = 0
            while True:
                tok = self.peek()
                if tok is None:
                    break
                if self.is_kw("ASC") or self.is_kw("DESC"):
                    self.i += 1
                    self.expect("(")
                    self.expr()
                    self.expect(")")
                elif tok.kind == "VAR":
                    self.i += 1
                elif self.is_call():
                    self.call()
                elif self.is_punct("("):
                    self.i += 1
                    self.expr()
                    self.expect(")")
                else:
                    break
                n += 1
            if n == 0:
                self.fail("empty ORDER BY")
        seen = set()
        while self.is_kw("LIMIT") or self.is_kw("OFFSET"):
            word = self.take().value.upper()
            if word in seen:
                self.i -= 1
                self.fail(f"duplicate {word}")
            seen.add(word)
            tok = self.peek()
            if tok is None or tok.kind != "NUMBER" or not tok.value.isdigit():
                self.fail(f"{word} needs a non-negative integer")
            self.i += 1

    def group(self):
        self.expect("{")
        while True:
            tok = self.peek()
            if tok is None:
                self.fail("unbalanced group: missing '}'")
            if self.is_punct("}"):
                self.i += 1
                return
            if self.is_punct("{"):
                self.group()
                while self.is_kw("UNION"):
                    self.i += 1
                    self.group()
            elif self.is_kw("OPTIONAL"):
                self.i += 1
                self.group()
            elif self.is_kw("FILTER"):
                self.i += 1
                if self.is_punct("("):
                    self.i += 1
                    self.expr()
                    self.expect(")")
                elif self.is_call():
                    self.call()
                else:
                    self.fail("expected FILTER constraint")
            elif self.is_punct("."):
                self.i += 1
            elif self.is_term_start():
                self.triples()
            else:
                self.fail(f"unsupported construct {tok.value!r}")

    def is_term_start(self) -> bool:
        tok = self.peek()
        if tok is None:
            return False
        if tok.kind in ("VAR", "IRI", "STRING", "NUMBER"):
            return True
        return tok.kind == "WORD" and tok.value.lower() in ("true", "false")

    def term(self):
        tok = self.peek()
        if tok is None:
            self.fail("expected RDF term")
        if tok.kind in ("VAR", "IRI", "NUMBER"):
            self.i += 1
        elif tok.kind == "STRING":
            self.literal()
        elif tok.kind == "WORD" and tok.value.lower() in ("true", "false"):
            self.i += 1
        elif tok.kind == "PNAME":
            self.fail(f"unexpanded prefixed name {tok.value!r}")
        else:
            self.fail(f"expected RDF term, got {tok.value!r}")

    def literal(self):
        self.i += 1
        tok = self.peek()
        if tok is not None and tok.kind == "LANGTAG":
            self.i += 1
        elif tok is not None and tok.kind == "DTYPE":
            self.i += 1
            nxt = self.peek()
            if nxt is None or nxt.kind != "IRI":
                self.fail("expected datatype IRI")
            self.i += 1

    def triples(self):
        self.term()
        while True:
            tok = self.peek()
            if tok is not None and (tok.kind in ("VAR", "IRI") or (tok.kind == "WORD" and tok.value == "a")):
                self.i += 1
            else:
                self.fail("expected predicate")
            self.term()
            while self.is_punct(","):
                self.i += 1
                self.term()
            if not self.is_punct(";"):
                break
            while self.is_punct(";"):
                self.i += 1
            if self.is_punct(".") or self.is_punct("}"):
                break
        if self.is_punct("."):
            self.i += 1

    def is_call(self) -> bool:
        tok = self.peek()
        return (
            tok is not None
            and tok.kind == "WORD"
            and tok.value.upper() in FUNCTIONS
            and self.is_punct("(", 1)
        )

    def call(self):
        name = self.take().value.upper()
        self.expect("(")
        if name in AGGREGATES and self.is_kw("DISTINCT"):
            self.i += 1
        if name == "COUNT" and self.is_punct("*"):
            self.i += 1
        elif not self.is_punct(")"):
            self.expr()
            while self.is_punct(","):
                self.i += 1
                self.expr()
        self.expect(")")

    def expr(self):
        self.and_expr()
        while self.is_punct("||"):
            self.i += 1
            self.and_expr()

    def and_expr(self):
        self.rel_expr()
        while self.is_punct("&&"):
            self.i += 1
            self.rel_expr()

    def rel_expr(self):
        self.add_expr()
        tok = self.peek()
        if tok is not None and tok.kind == "OP" and tok.value in _REL_OPS:
            self.i += 1
            self.add_expr()

    def add_expr(self):
        self.mul_expr()
        while self.is_punct("+") or self.is_punct("-"):
            self.i += 1
            self.mul_expr()

    def mul_expr(self):
        self.unary()
        while self.is_punct("*") or self.is_punct("/"):
            self.i += 1
            self.unary()

    def unary(self):
        if self.is_punct("!") or self.is_punct("+") or self.is_punct("-"):
            self.i += 1
        self.primary()

    def primary(self):
        if self.is_punct("("):
            self.i += 1
            self.expr()
            self.expect(")")
        elif self.is_call():
            self.call()
        else:
            self.term()


def _host_allowed(iri: str, allowlist: Iterable[str]) -> bool:
    try:
        host = urlsplit(iri).hostname
    except ValueError:
        return False
    if not host:
        return False
    return any(host == a or host.endswith("." + a) for a in allowlist)


def validate_query(text: str, allowlist: Iterable[str] | None = None) -> ValidationReport:
    """Check ``text`` against the supported grammar subset.

    ``allowlist`` is a collection of hosts; IRIs on any other host count as
    unknown links and reject the query. ``None`` disables the host check.
    """
    try:
        toks = lex(text)
    except CodecError as exc:
        m = re.search(r"at (\d+)", str(exc))
        return ValidationReport(False, str(exc), int(m.group(1)) if m else None)
    toks = [t for t in toks if t.kind != "COMMENT"]
    try:
        _Parser(toks, len(text)).query()
    except _SyntaxError as exc:
        return ValidationReport(False, str(exc), exc.pos)
    if allowlist is not None:
        allow = [a.strip().lower() for a in allowlist if a.strip()]
        bad = [t.value for t in toks if t.kind == "IRI" and not _host_allowed(t.value, allow)]
        if bad:
            pos = next(t.start for t in toks if t.kind == "IRI" and t.value == bad[0])
            return ValidationReport(False, f"unknown link <{bad[0]}>", pos, bad)
    return ValidationReport(True)


# --------------------------------------------------------------------------
# encoding


@dataclass
class EncodedQuery:
    tokens: list[str]
    original: str | None = None

    @classmethod
    def from_text(cls, text: str, original: str | None = None) -> "EncodedQuery":
        return cls(text.split(), original)

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def check(self, ns: NamespaceTable) -> None:
        """Raise MalformedToken unless bracket balance and token shapes hold."""
        depth = 0
        for tok in self.tokens:
            if tok == "brack_open":
                depth += 1
            elif tok == "brack_close":
                depth -= 1
                if depth < 0:
                    raise MalformedToken("brack_close without matching brack_open")
            elif tok.startswith("var_") and not _ENC_VAR_RE.match(tok):
                raise MalformedToken(f"bad variable token {tok!r}")
            elif tok.startswith("<") and tok.endswith(">"):
                _decode_iri(tok[1:-1], ns)
        if depth:
            raise MalformedToken("unbalanced brack_open")


_ENC_VAR_RE = re.compile(r"^var_([A-Za-z0-9_·-￿]+)$")
_SCHEME_RE = re.compile(r"^[A-Za-z][A-Za-z0-9+.\-]*:")
_FUSED_RE = re.compile(r"^([a-z]+)\((.+)\)$")


def _encode_iri(iri: str, ns: NamespaceTable) -> str:
    short = ns.shorten(iri)
    if short is not None:
        return f"<{short[0]}_{short[1]}>"
    if not _SCHEME_RE.match(iri):
        raise EncodingUnsupported(f"relative IRI <{iri}> cannot be encoded")
    return f"<{iri}>"


def _decode_iri(inner: str, ns: NamespaceTable) -> str:
    if _SCHEME_RE.match(inner):
        return inner
    tag, sep, local = inner.partition("_")
    if sep and tag in ns.tags:
        return ns.expand(tag, local)
    raise MalformedToken(f"unknown IRI token <{inner}>")


def _atomic(tok: Tok, ns: NamespaceTable) -> str | None:
    if tok.kind == "VAR":
        return "var_" + tok.value
    if tok.kind == "IRI":
        return _encode_iri(tok.value, ns)
    if tok.kind == "NUMBER":
        return tok.value
    if tok.kind == "PUNCT" and tok.value == "*":
        return "*"
    if tok.kind == "WORD" and tok.value.lower() in ("true", "false"):
        return tok.value.lower()
    return None


def _string_body(raw: str) -> str:
    q = raw[0]
    body = raw[3:-3] if raw.startswith(q * 3) and len(raw) >= 6 else raw[1:-1]
    if q == "'":
        body = re.sub(r'(?<!\\)"', r'\\"', body)
    return body


def encode(text: str, ns: NamespaceTable | None = None) -> EncodedQuery:
    """Rewrite validated SPARQL into the word-token form."""
    ns = ns or NamespaceTable()
    report = validate_query(text)
    if not report.accepted:
        raise EncodingUnsupported(f"{report.error} (at {report.position})")
    toks = [t for t in lex(text) if t.kind != "COMMENT"]
    out: list[str] = []
    k = 0
    while k < len(toks):
        tok = toks[k]
        # single-argument calls fuse into one token: count(var_uri)
        if (
            tok.kind == "WORD"
            and tok.value.upper() in _FUSABLE
            and k + 3 < len(toks)
            and toks[k + 1].value == "("
            and toks[k + 3].kind == "PUNCT"
            and toks[k + 3].value == ")"
        ):
            arg = _atomic(toks[k + 2], ns)
            if arg is not None:
                out.append(f"{tok.value.lower()}({arg})")
                k += 4
                continue
        if tok.kind == "VAR":
            out.append("var_" + tok.value)
        elif tok.kind == "IRI":
            out.append(_encode_iri(tok.value, ns))
        elif tok.kind == "STRING":
            words = _string_body(tok.value).split()
            if "str_close" in words:
                raise EncodingUnsupported("string literal contains the str_close marker")
            out += ["str_open", *words, "str_close"]
        elif tok.kind == "LANGTAG":
            out.append("langtag_" + tok.value)
        elif tok.kind == "DTYPE":
            out.append("sep_dtype")
        elif tok.kind == "NUMBER":
            out.append(tok.value)
        elif tok.kind == "WORD":
            out.append(tok.value if tok.value == "a" else tok.value.lower())
        elif tok.kind == "PUNCT":
            out.append(PUNCT_TOKENS[tok.value])
        elif tok.kind == "OP":
            out.append(OP_TOKENS[tok.value])
        else:  # pragma: no cover - validate_query rejects everything else
            raise EncodingUnsupported(f"cannot encode {tok.value!r}")
        k += 1
    return EncodedQuery(out, original=text)


_NUMBER_TOKEN_RE = re.compile(r"^[+-]?(?:" + _NUM_RE.pattern + r")$")
_DECODE_WORDS = {w.lower() for w in KEYWORDS | FUNCTIONS}


def _decode_atom(tok: str, ns: NamespaceTable) -> str:
    m = _ENC_VAR_RE.match(tok)
    if m:
        return "?" + m.group(1)
    if tok.startswith("<") and tok.endswith(">") and len(tok) > 2:
        return f"<{_decode_iri(tok[1:-1], ns)}>"
    if _NUMBER_TOKEN_RE.match(tok) or tok in ("true", "false", "*"):
        return tok
    raise MalformedToken(f"no decoding rule for {tok!r}")


def decode(enc: EncodedQuery | str, ns: NamespaceTable | None = None) -> str:
    """Turn word tokens back into executable SPARQL with uppercase keywords."""
    ns = ns or NamespaceTable()
    tokens = enc.split() if isinstance(enc, str) else list(enc.tokens)
    pieces: list[str] = []
    depth = 0
    k = 0
    while k < len(tokens):
        tok = tokens[k]
        k += 1
        if tok == "str_open":
            words = []
            while k < len(tokens) and tokens[k] != "str_close":
                words.append(tokens[k])
                k += 1
            if k == len(tokens):
                raise MalformedToken("str_open without str_close")
            k += 1
            pieces.append('"' + " ".join(words) + '"')
            continue
        if tok.startswith("langtag_") and len(tok) > 8:
            if not pieces or not pieces[-1].endswith('"'):
                raise MalformedToken("language tag must follow a string")
            pieces[-1] += "@" + tok[8:]
            continue
        if tok == "sep_dtype":
            if not pieces or k == len(tokens):
                raise MalformedToken("dangling datatype marker")
            pieces[-1] += "^^" + _decode_atom(tokens[k], ns)
            k += 1
            continue
        if tok in _DECODE_SYMBOLS:
            if tok == "brack_open":
                depth += 1
            elif tok == "brack_close":
                depth -= 1
                if depth < 0:
                    raise MalformedToken("brack_close without matching brack_open")
            pieces.append(_DECODE_SYMBOLS[tok])
            continue
        if tok in _DECODE_WORDS:
            pieces.append(tok.upper())
            continue
        if tok == "a":
            pieces.append(tok)
            continue
        m = _FUSED_RE.match(tok)
        if m and m.group(1) in _DECODE_WORDS:
            pieces.append(f"{m.group(1).upper()}({_decode_atom(m.group(2), ns)})")
            continue
        pieces.append(_decode_atom(tok, ns))
    if depth:
        raise MalformedToken("unbalanced brack_open")
    return " ".join(pieces)


# --------------------------------------------------------------------------
# corpus helpers


def clean(raw: RawQuery | str) -> str:
    """Comments and prefixes removed, whitespace collapsed."""
    return normalize_whitespace(inline_prefixes(strip_comments(raw)))


def prepare_query(
    raw: RawQuery | str,
    ns: NamespaceTable | None = None,
    allowlist: Iterable[str] | None = None,
) -> EncodedQuery:
    """Full cleaning pipeline for one query; raises QueryRejected on invalid input."""
    text = clean(raw)
    report = validate_query(text, allowlist)
    if not report.accepted:
        raise QueryRejected(report)
    return encode(text, ns)


def dedupe_corpus(stream: Iterable[EncodedQuery]) -> Iterator[EncodedQuery]:
    """Yield the first occurrence of each distinct token sequence."""
    seen: set[bytes] = set()
    for q in stream:
        digest = hashlib.blake2b(q.text.encode("utf-8"), digest_size=16).digest()
        if digest in seen:
            continue
        seen.add(digest)
        yield q


def read_query_log(path: str | Path) -> Iterator[RawQuery]:
    """One query per line; literal ``\\n`` sequences inside a line are newlines."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            yield RawQuery(line.replace("\\n", "\n"), source_id=f"{path}:{lineno}")
