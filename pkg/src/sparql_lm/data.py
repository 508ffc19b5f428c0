"""Parallel question/query corpora, entity covering, synthetic fixtures and run configs."""
from __future__ import annotations

import configparser
import dataclasses
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codec import DEFAULT_NAMESPACES, EncodedQuery, NamespaceTable, encode
from .corruption import CorruptionConfig
from .model import ModelConfig
from .training import OptimizerConfig

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
ENT, ANS = "<ent>", "<ans>"


class DataError(ValueError):
    pass


class Misaligned(DataError):
    pass


class ParseError(DataError):
    def __init__(self, msg: str, line: int):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class ConfigError(DataError):
    pass


@dataclass(frozen=True)
class ParallelExample:
    source: str
    target: str
    split: str = "train"
    covered: bool = False

    def __post_init__(self):
        if not self.source.strip() or not self.target.strip():
            raise ValueError("source and target must be non-empty")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


# --------------------------------------------------------------------------
# loading / saving


def _read_lines(path: Path) -> list[str]:
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    if not text:
        return []
    if text.endswith("\n"):
        text = text[:-1]
    return text.split("\n")


def _flag(value: str, line: int) -> bool:
    if value not in ("0", "1"):
        raise ParseError(f"covered flag must be 0 or 1, got {value!r}", line)
    return value == "1"


def load_parallel(
    path: str | Path,
    format: str = "paired",
    split: str = "train",
    encode_targets: bool = False,
    ns: NamespaceTable | None = None,
) -> list[ParallelExample]:
    """Read a parallel corpus.

    ``paired``: ``path`` is a stem; ``<stem>.en`` and ``<stem>.sparql`` hold
    aligned lines and an optional ``<stem>.covered`` holds 0/1 flags.
    ``tsv``: ``source<TAB>target[<TAB>split[<TAB>covered]]`` per line.
    With ``encode_targets`` the query side is raw SPARQL and is run through
    the codec.
    """
    path = Path(path)
    rows: list[tuple[str, str, str, bool, int]] = []
    if format == "paired":
        src = _read_lines(path.with_name(path.name + ".en"))
        tgt = _read_lines(path.with_name(path.name + ".sparql"))
        if len(src) != len(tgt):
            raise Misaligned(f"{len(src)} questions vs {len(tgt)} queries")
        cov_path = path.with_name(path.name + ".covered")
        cov = [_flag(v, i + 1) for i, v in enumerate(_read_lines(cov_path))] if cov_path.exists() else None
        if cov is not None and len(cov) != len(src):
            raise Misaligned(f"{len(cov)} covered flags vs {len(src)} pairs")
        for i, (s, t) in enumerate(zip(src, tgt)):
            rows.append((s, t, split, cov[i] if cov else False, i + 1))
    elif format == "tsv":
        for i, line in enumerate(_read_lines(path), 1):
            cols = line.split("\t")
            if len(cols) < 2 or len(cols) > 4:
                raise ParseError(f"expected 2-4 tab-separated fields, got {len(cols)}", i)
            sp = cols[2] if len(cols) > 2 else split
            if sp not in SPLITS:
                raise ParseError(f"unknown split {sp!r}", i)
            rows.append((cols[0], cols[1], sp, _flag(cols[3], i) if len(cols) > 3 else False, i))
    else:
        raise ValueError(f"unknown format {format!r}")
    out = []
    for s, t, sp, cov, line in rows:
        if not s.strip() or not t.strip():
            raise ParseError("empty source or target", line)
        if encode_targets:
            try:
                t = encode(t, ns).text
            except ValueError as exc:
                raise ParseError(str(exc), line) from exc
        out.append(ParallelExample(s, t, sp, cov))
    return out


def save_parallel(examples: Sequence[ParallelExample], path: str | Path, format: str = "paired") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for ex in examples:
        if any(c in ex.source + ex.target for c in "\n\t"):
            raise ValueError("newlines and tabs cannot be stored in a line-based corpus")

    def write(p: Path, lines: Iterable[str]):
        with open(p, "w", encoding="utf-8", newline="") as fh:
            fh.writelines(line + "\n" for line in lines)

    if format == "paired":
        write(path.with_name(path.name + ".en"), (e.source for e in examples))
        write(path.with_name(path.name + ".sparql"), (e.target for e in examples))
        if any(e.covered for e in examples):
            write(path.with_name(path.name + ".covered"), ("1" if e.covered else "0" for e in examples))
    elif format == "tsv":
        write(path, (f"{e.source}\t{e.target}\t{e.split}\t{int(e.covered)}" for e in examples))
    else:
        raise ValueError(f"unknown format {format!r}")


# --------------------------------------------------------------------------
# entity covering

_ANS_SPAN = re.compile(r"<ans>.*?</ans>", re.S)


def _resource_re(tags: Sequence[str]) -> re.Pattern:
    return re.compile(r"<(?:%s)_[^<>\s]+>" % "|".join(map(re.escape, tags)))


def cover_query(query: str, resource_tags: Sequence[str] = ("dbr",)) -> tuple[str, list[str]]:
    """Replace resource IRI tokens with ``<ent>``; returns the text and the removed local names."""
    rx = _resource_re(resource_tags)
    found = [m.group(0)[1:-1].split("_", 1)[1] for m in rx.finditer(query)]
    return rx.sub(ENT, query), found


def cover_text(text: str, entities: Sequence[str]) -> str:
    """Replace marked answer spans and mentions of the given entities in NL text."""
    text = _ANS_SPAN.sub(ANS, text)
    labels = sorted({e.replace("_", " ") for e in entities}, key=len, reverse=True)
    for label in labels:
        if label:
            text = re.sub(r"(?<!\w)%s(?!\w)" % re.escape(label), ENT, text, flags=re.I)
    return text


def cover_entities(
    ex: ParallelExample,
    ns: NamespaceTable | None = None,
    query_side: str = "target",
) -> ParallelExample:
    """Entity-covered copy of ``ex``.

    IRI tokens from resource namespaces (those whose IRI ends in
    ``/resource/``) become ``<ent>`` in the query; on the NL side
    ``<ans>...</ans>`` spans become ``<ans>`` and mentions of the removed
    entities become ``<ent>``. Idempotent.
    """
    ns = ns or NamespaceTable()
    tags = [tag for iri, tag in ns.entries if iri.rstrip("/").endswith("/resource")] or ["dbr"]
    query, text = (ex.target, ex.source) if query_side == "target" else (ex.source, ex.target)
    covered_q, ents = cover_query(query, tags)
    if not _ANS_SPAN.search(text):
        log.info("no answer markers in %r, answer covering skipped", text)
    covered_t = cover_text(text, ents)
    if query_side == "target":
        return dataclasses.replace(ex, source=covered_t, target=covered_q, covered=True)
    return dataclasses.replace(ex, source=covered_q, target=covered_t, covered=True)


# --------------------------------------------------------------------------
# synthetic monument-style fixtures

DEFAULT_ENTITIES = (
    "Eiffel_Tower", "Brandenburg_Gate", "Colosseum", "Taj_Mahal", "Statue_of_Liberty",
    "Big_Ben", "Sagrada_Familia", "Mount_Rushmore", "Arc_de_Triomphe", "Golden_Gate_Bridge",
    "Leaning_Tower_of_Pisa", "Acropolis_of_Athens", "Sydney_Opera_House", "Christ_the_Redeemer",
    "Petra", "Stonehenge", "Angkor_Wat", "Chichen_Itza", "Machu_Picchu", "Alhambra",
)

_PROPS = (
    ("location", "location", "where is {e} located", "what is the location of {e}"),
    ("architect", "architect", "who designed {e}", "who is the architect of {e}"),
    ("height", "height", "how tall is {e}", "what is the height of {e}"),
    ("openingDate", "opening date", "when did {e} open", "what is the opening date of {e}"),
    ("country", "country", "which country is {e} in", "in which country is {e}"),
    ("material", "material", "what is {e} made of", "which material was used for {e}"),
)

_D = "http://dbpedia.org/"


def _templates() -> list[tuple[str, str, int]]:
    """(question, SPARQL, number of entities) with ``{e}``/``{f}`` slots."""
    out = []
    for prop, noun, q1, q2 in _PROPS:
        out.append((q1 + " ?", f"SELECT ?x WHERE {{ <{_D}resource/{{e}}> <{_D}ontology/{prop}> ?x }}", 1))
        out.append((q2 + " ?", f"SELECT DISTINCT ?x WHERE {{ <{_D}resource/{{e}}> <{_D}ontology/{prop}> ?x }}", 1))
        out.append((
            f"does {{e}} have a known {noun} ?",
            f"ASK WHERE {{ <{_D}resource/{{e}}> <{_D}ontology/{prop}> ?x }}",
            1,
        ))
        out.append((
            f"how many monuments share the {noun} of {{e}} ?",
            f"SELECT COUNT(?m) WHERE {{ <{_D}resource/{{e}}> <{_D}ontology/{prop}> ?v . "
            f"?m <{_D}ontology/{prop}> ?v }}",
            1,
        ))
        out.append((
            f"do {{e}} and {{f}} have the same {noun} ?",
            f"ASK WHERE {{ <{_D}resource/{{e}}> <{_D}ontology/{prop}> ?v . <{_D}resource/{{f}}> "
            f"<{_D}ontology/{prop}> ?v }}",
            2,
        ))
    out += [
        ("what is {e} ?", f"SELECT ?x WHERE {{ <{_D}resource/{{e}}> <{_D}ontology/abstract> ?x }}", 1),
        ("give me a picture of {e}", f"SELECT ?x WHERE {{ <{_D}resource/{{e}}> <http://xmlns.com/foaf/0.1/depiction> ?x }}", 1),
        ("what is the name of {e} ?", f'SELECT ?x WHERE {{ <{_D}resource/{{e}}> <http://www.w3.org/2000/01/rdf-schema#label> ?x FILTER ( lang(?x) = "en" ) }}', 1),
        ("is {e} a monument ?", f"ASK WHERE {{ <{_D}resource/{{e}}> <http://www.w3.org/1999/02/22-rdf-syntax-ns#type> <{_D}ontology/Monument> }}", 1),
        ("which monuments are in the same place as {e} ?", f"SELECT DISTINCT ?m WHERE {{ <{_D}resource/{{e}}> <{_D}ontology/location> ?p . ?m <{_D}ontology/location> ?p }}", 1),
        ("list ten monuments near {e}", f"SELECT DISTINCT ?m WHERE {{ <{_D}resource/{{e}}> <{_D}ontology/location> ?p . ?m <{_D}ontology/location> ?p }} LIMIT 10", 1),
        ("is {e} taller than {f} ?", f"ASK WHERE {{ <{_D}resource/{{e}}> <{_D}ontology/height> ?a . <{_D}resource/{{f}}> <{_D}ontology/height> ?b FILTER ( ?a > ?b ) }}", 2),
        ("which is older , {e} or {f} ?", f"SELECT ?x WHERE {{ ?x <{_D}ontology/openingDate> ?d FILTER ( ?x = <{_D}resource/{{e}}> || ?x = <{_D}resource/{{f}}> ) }} ORDER BY ASC(?d) LIMIT 1", 2),
    ]
    return out


TEMPLATES = _templates()


def _label(entity: str) -> str:
    return entity.replace("_", " ").lower()


def make_fixture_corpus(
    template_count: int = 38,
    entity_pool: Sequence[str] = DEFAULT_ENTITIES,
    seed: int = 0,
    ns: NamespaceTable | None = None,
    split_ratio: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> tuple[list[EncodedQuery], list[ParallelExample]]:
    """Instantiate ``template_count`` templates with every entity of the pool.

    Two-slot templates pair each entity with the next one in the pool.
    Returns the encoded pre-training corpus (one query per pair, raw SPARQL
    kept as ``original``) and the question/query pairs, shuffled and split
    by ``split_ratio`` under ``seed``.
    """
    if not entity_pool:
        raise ValueError("entity_pool must be non-empty")
    if not 1 <= template_count <= len(TEMPLATES):
        raise ValueError(f"template_count must be in [1, {len(TEMPLATES)}]")
    ns = ns or NamespaceTable()
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(TEMPLATES), size=template_count, replace=False))
    raw_pairs = []
    for t in chosen:
        question, query, slots = TEMPLATES[int(t)]
        for i, e in enumerate(entity_pool):
            f = entity_pool[(i + 1) % len(entity_pool)]
            q = question.replace("{e}", _label(e)).replace("{f}", _label(f))
            s = query.replace("{e}", e).replace("{f}", f)
            raw_pairs.append((q, s))
    order = rng.permutation(len(raw_pairs))
    n = len(order)
    n_train = int(round(split_ratio[0] * n))
    n_valid = int(round(split_ratio[1] * n))
    corpus, pairs = [], []
    for rank, k in enumerate(order):
        q, s = raw_pairs[int(k)]
        enc = EncodedQuery.from_text(encode(s, ns).text, original=s)
        split = "train" if rank < n_train else "valid" if rank < n_train + n_valid else "test"
        corpus.append(enc)
        pairs.append(ParallelExample(q, enc.text, split))
    return corpus, pairs


# --------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    seed: int = 0
    paths: dict[str, str] = field(default_factory=dict)
    namespaces: tuple[tuple[str, str], ...] = DEFAULT_NAMESPACES
    vocab_size: int = 8000
    min_freq: int = 2
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain_opt: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(batch_size=32))
    finetune_opt: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(weight_decay=0.1, batch_size=16))
    objectives: str = "mlm+wso"
    pretrain_max_len: int = 128
    src_max: int = 64
    tgt_max: int = 128
    epochs: int = 150
    beam_width: int = 10
    length_penalty: float = 0.0
    bleu_smoothing: bool = False
    em_normalize: bool = True

    def check(self, vocab_len: int | None = None) -> "RunConfig":
        """Cross-field consistency; raises ConfigError."""
        if vocab_len is not None and vocab_len != self.model.vocab_size:
            raise ConfigError(f"model.vocab_size={self.model.vocab_size} but the vocabulary has {vocab_len} entries")
        if self.model.vocab_size > self.vocab_size:
            raise ConfigError("model.vocab_size exceeds tokenizer.vocab_size")
        longest = max(self.pretrain_max_len, self.src_max, self.tgt_max + 1)
        if longest > self.model.max_positions:
            raise ConfigError(f"max length {longest} exceeds model.max_positions={self.model.max_positions}")
        if self.objectives not in ("mlm", "mlm+wso"):
            raise ConfigError(f"objectives must be mlm or mlm+wso, got {self.objectives!r}")
        if self.beam_width < 1 or self.epochs < 1:
            raise ConfigError("beam_width and epochs must be >= 1")
        return self

    def namespace_table(self) -> NamespaceTable:
        return NamespaceTable(tuple(self.namespaces))


def _coerce(text: str, like):
    if isinstance(like, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(like, int) or like is int:
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(float(x) for x in text.replace(",", " ").split())
    if text.strip().lower() == "none":
        return None
    return text


def _update(obj, section: configparser.SectionProxy, name: str):
    kinds = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in section.items():
        if key not in kinds:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        cur = getattr(obj, key)
        if cur is None:
            changes[key] = None if value.strip().lower() == "none" else (
                float(value) if "." in value or "e" in value.lower() else int(value))
        else:
            changes[key] = _coerce(value, cur)
    try:
        return dataclasses.replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def load_run_config(path: str | Path | None = None, text: str | None = None) -> RunConfig:
    """Read an INI-style run config; every section is optional."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        if text is not None:
            cp.read_string(text)
        elif path is not None:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RunConfig()
    scalar = {f.name for f in dataclasses.fields(RunConfig)} - {
        "paths", "namespaces", "corruption", "model", "pretrain_opt", "finetune_opt"}
    for name in cp.sections():
        sec = cp[name]
        if name == "run":
            for key, value in sec.items():
                if key not in scalar:
                    raise ConfigError(f"[run] unknown key {key!r}")
                setattr(cfg, key, _coerce(value, getattr(cfg, key)))
        elif name == "paths":
            cfg.paths = dict(sec.items())
        elif name == "namespaces":
            cfg.namespaces = tuple((iri, tag) for tag, iri in sec.items())
        elif name in ("corruption", "model", "pretrain_opt", "finetune_opt"):
            setattr(cfg, name, _update(getattr(cfg, name), sec, name))
        else:
            raise ConfigError(f"unknown section [{name}]")
    try:
        cfg.namespace_table()
    except ValueError as exc:
        raise ConfigError(f"[namespaces] {exc}") from exc
    return cfg.check()
