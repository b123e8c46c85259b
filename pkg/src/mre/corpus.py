"""Annotated paragraphs, corpus file I/O, subword tokenization and synthetic data."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .tensor import rng_stream

NA = "NA"
CORPUS_HEADER = "#mre-corpus v1"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class RelationLabel:
    id: int
    name: str
    is_na: bool = False


class LabelSet:
    """Dense label ids with NA fixed at id 0."""

    def __init__(self, names: Iterable[str]):
        rest = sorted({n for n in names if n != NA})
        self.labels = [RelationLabel(0, NA, True)] + [
            RelationLabel(i + 1, n) for i, n in enumerate(rest)
        ]
        self._by_name = {lab.name: lab for lab in self.labels}

    @classmethod
    def from_corpus(cls, corpus: Sequence["AnnotatedParagraph"]) -> "LabelSet":
        return cls(lab for p in corpus for _, _, lab in p.relations)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    @property
    def names(self) -> list[str]:
        return [lab.name for lab in self.labels]

    def id(self, name: str) -> int:
        try:
            return self._by_name[name].id
        except KeyError:
            raise CorpusError(f"unknown relation label {name!r}") from None

    def name(self, idx: int) -> str:
        return self.labels[idx].name


@dataclass
class AnnotatedParagraph:
    tokens: list[str]
    mentions: list[tuple[int, int]]
    relations: list[tuple[int, int, str]] = field(default_factory=list)
    domain: str = ""

    def __post_init__(self):
        self.mentions = [tuple(int(v) for v in m) for m in self.mentions]
        self.relations = [(int(i), int(j), str(lab)) for i, j, lab in self.relations]
        self.validate()

    def validate(self) -> None:
        n, m = len(self.tokens), len(self.mentions)
        for idx, (s, e) in enumerate(self.mentions):
            if not 0 <= s < e <= n:
                raise CorpusError(f"mention {idx} span ({s}, {e}) invalid for {n} tokens")
        seen = set()
        for i, j, _ in self.relations:
            if not (0 <= i < m and 0 <= j < m):
                raise CorpusError(f"relation ({i}, {j}) references a missing mention")
            if i == j:
                raise CorpusError(f"relation ({i}, {j}) pairs a mention with itself")
            if (i, j) in seen:
                raise CorpusError(f"duplicate gold label for pair ({i}, {j})")
            seen.add((i, j))

    def gold(self) -> dict[tuple[int, int], str]:
        return {(i, j): lab for i, j, lab in self.relations}


# ------------------------------------------------------------- tokenization


class SubwordVocab:
    """Greedy longest-match subword vocabulary; unknown material falls back to characters."""

    def __init__(self, entries: Iterable[str]):
        self.entries: dict[str, int] = {}
        for e in entries:
            if e and e not in self.entries:
                self.entries[e] = len(self.entries)
        self.max_len = max((len(e) for e in self.entries), default=1)

    def __contains__(self, piece: str) -> bool:
        return piece in self.entries

    def split_word(self, word: str) -> list[str]:
        pieces, pos = [], 0
        while pos < len(word):
            for end in range(min(len(word), pos + self.max_len), pos, -1):
                if word[pos:end] in self.entries:
                    break
            else:
                # no vocab entry matches here: emit the single character
                end = pos + 1
            pieces.append(word[pos:end])
            pos = end
        return pieces


def tokenize(text: str | Sequence[str], vocab: SubwordVocab) -> list[tuple[str, int]]:
    """Split whitespace words into subwords, keeping each piece's source-word index."""
    words = text.split() if isinstance(text, str) else list(text)
    return [(piece, w) for w, word in enumerate(words) for piece in vocab.split_word(word)]


def detokenize(pieces: Sequence[tuple[str, int]]) -> str:
    words: dict[int, str] = {}
    for piece, w in pieces:
        words[w] = words.get(w, "") + piece
    return " ".join(words[w] for w in sorted(words))


def word_spans_to_subword(
    pieces: Sequence[tuple[str, int]], spans: Sequence[tuple[int, int]]
) -> list[tuple[int, int]]:
    """Map half-open word spans onto half-open subword spans."""
    first: dict[int, int] = {}
    last: dict[int, int] = {}
    for t, (_, w) in enumerate(pieces):
        first.setdefault(w, t)
        last[w] = t + 1
    return [(first[s], last[e - 1]) for s, e in spans]


# ----------------------------------------------------------------- pairing


def enumerate_pairs(p: AnnotatedParagraph, mode: str = "all-ordered") -> list[tuple[int, int]]:
    if mode == "all-ordered":
        m = len(p.mentions)
        return [(i, j) for i in range(m) for j in range(m) if i != j]
    if mode == "gold-only":
        return sorted((i, j) for i, j, _ in p.relations)
    raise ValueError(f"unknown pair mode {mode!r}")


def window_truncate(p: AnnotatedParagraph, radius: int = 5) -> AnnotatedParagraph:
    """Drop tokens outside every relation's window of ``radius`` tokens around its pair."""
    if not p.relations:
        raise CorpusError("window_truncate needs at least one relation")
    n = len(p.tokens)
    keep = [False] * n
    for i, j, _ in p.relations:
        (s1, e1), (s2, e2) = p.mentions[i], p.mentions[j]
        lo, hi = max(0, min(s1, s2) - radius), min(n, max(e1, e2) + radius)
        for t in range(lo, hi):
            keep[t] = True
    new_index, kept = {}, []
    for t in range(n):
        if keep[t]:
            new_index[t] = len(kept)
            kept.append(p.tokens[t])

    used = sorted({i for i, _, _ in p.relations} | {j for _, j, _ in p.relations})
    mention_map, mentions = {}, []
    for idx, (s, e) in enumerate(p.mentions):
        inside = [new_index[t] for t in range(s, e) if keep[t]]
        if len(inside) == e - s:
            mention_map[idx] = len(mentions)
            mentions.append((inside[0], inside[-1] + 1))
    assert all(i in mention_map for i in used), "a related mention fell outside its window"
    relations = [(mention_map[i], mention_map[j], lab) for i, j, lab in p.relations]
    return AnnotatedParagraph(kept, mentions, relations, p.domain)


# ------------------------------------------------------------- synthetic data

FILLER_WORDS = (
    "the", "of", "and", "in", "said", "was", "to", "on", "with", "from",
    "that", "by", "for", "at", "as", "after", "before", "near", "while", "then",
)
# type-specific subword pieces; no piece is a prefix of another so greedy matching is exact
ENTITY_PIECES = {
    "PER": ("jo", "han", "mar", "ek", "li", "sa"),
    "ORG": ("corp", "tek", "bnk", "unz", "grp", "dyn"),
    "LOC": ("vil", "burg", "tun", "ria", "por", "dal"),
}
ENTITY_TYPES = tuple(ENTITY_PIECES)
DOMAINS = ("bc", "cts", "wl")


@dataclass(frozen=True)
class SyntheticSpec:
    paragraphs: int = 1000
    mentions: int = 4
    labels: int = 3
    seed: int = 7
    min_words: int = 8
    max_words: int = 14
    near: int = 3

    def validate(self) -> None:
        if self.labels < 1:
            raise CorpusError("synthetic corpus needs at least one non-NA label")
        if self.mentions < 2:
            raise CorpusError("synthetic paragraphs need at least two mentions")
        if self.paragraphs < 0 or self.near < 1:
            raise CorpusError("paragraph count and near radius must be nonnegative/positive")
        if self.min_words < self.mentions or self.max_words < self.min_words:
            raise CorpusError("word bounds cannot hold the requested mentions")


def synthetic_vocab() -> SubwordVocab:
    pieces = [pc for t in ENTITY_TYPES for pc in ENTITY_PIECES[t]]
    return SubwordVocab(list(FILLER_WORDS) + pieces)


def mention_type(tokens: Sequence[str], span: tuple[int, int]) -> int:
    for t, name in enumerate(ENTITY_TYPES):
        if tokens[span[0]] in ENTITY_PIECES[name]:
            return t
    raise CorpusError(f"mention at {span} does not start with an entity piece")


def synthetic_label(
    subj_type: int, obj_type: int, offset: int, near: int, n_labels: int
) -> str:
    """Gold label of a synthetic pair.

    ``offset`` is object start minus subject start in subword tokens, clipped
    to [-(near + 1), near + 1]. An object before its subject is NA. With more
    than one relation label, a far object (clipped offset near + 1) gets the
    last label and a near one gets a label picked by the subject's type; with a
    single label every forward pair is R1. ``obj_type`` is accepted for
    signature symmetry and deliberately unused: labels stay a sum of
    per-mention effects, which a linear pair classifier can represent.
    """
    clipped = max(-(near + 1), min(offset, near + 1))
    if clipped < 0:
        return NA
    if n_labels == 1:
        return "R1"
    if clipped > near:
        return f"R{n_labels}"
    return f"R{1 + subj_type % (n_labels - 1)}"


def gen_synthetic(spec: SyntheticSpec) -> list[AnnotatedParagraph]:
    spec.validate()
    vocab = synthetic_vocab()
    out = []
    for idx in range(spec.paragraphs):
        rng = rng_stream(spec.seed, f"paragraph/{idx}")
        n_words = int(rng.integers(spec.min_words, spec.max_words + 1))
        slots = sorted(rng.choice(n_words, size=spec.mentions, replace=False).tolist())
        words, spans = [], []
        for w in range(n_words):
            if w in slots:
                etype = ENTITY_TYPES[int(rng.integers(len(ENTITY_TYPES)))]
                pieces = ENTITY_PIECES[etype]
                n_pieces = int(rng.integers(1, 3))
                words.append("".join(pieces[int(rng.integers(len(pieces)))] for _ in range(n_pieces)))
                spans.append((w, w + 1))
            else:
                words.append(FILLER_WORDS[int(rng.integers(len(FILLER_WORDS)))])
        pieces = tokenize(words, vocab)
        tokens = [pc for pc, _ in pieces]
        mentions = word_spans_to_subword(pieces, spans)
        relations = []
        for a in range(spec.mentions):
            for b in range(a + 1, spec.mentions):
                i, j = (a, b) if rng.random() < 0.5 else (b, a)
                offset = mentions[j][0] - mentions[i][0]
                label = synthetic_label(
                    mention_type(tokens, mentions[i]),
                    mention_type(tokens, mentions[j]),
                    offset,
                    spec.near,
                    spec.labels,
                )
                relations.append((i, j, label))
        out.append(AnnotatedParagraph(tokens, mentions, relations, DOMAINS[idx % len(DOMAINS)]))
    return out


# ------------------------------------------------------------------ file I/O


def format_record(p: AnnotatedParagraph) -> str:
    return json.dumps(
        {
            "tokens": p.tokens,
            "mentions": [list(m) for m in p.mentions],
            "relations": [[i, j, lab] for i, j, lab in p.relations],
            "domain": p.domain,
        },
        ensure_ascii=False,
        separators=(",", ":"),
    )


def write_records(corpus: Iterable[AnnotatedParagraph], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CORPUS_HEADER + "\n")
        for p in corpus:
            fh.write(format_record(p) + "\n")


def _field(rec: dict, name: str, kind, lineno: int):
    if name not in rec:
        raise CorpusError(f"line {lineno}: missing field {name!r}")
    if not isinstance(rec[name], kind):
        raise CorpusError(f"line {lineno}: field {name!r} has the wrong type")
    return rec[name]


def parse_record(line: str, lineno: int) -> AnnotatedParagraph:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"line {lineno}: malformed record ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise CorpusError(f"line {lineno}: record is not an object")
    tokens = _field(rec, "tokens", list, lineno)
    mentions = _field(rec, "mentions", list, lineno)
    relations = _field(rec, "relations", list, lineno)
    domain = _field(rec, "domain", str, lineno)
    if not all(isinstance(t, str) for t in tokens):
        raise CorpusError(f"line {lineno}: field 'tokens' must hold strings")
    for m in mentions:
        if not (isinstance(m, list) and len(m) == 2 and all(type(v) is int for v in m)):
            raise CorpusError(f"line {lineno}: field 'mentions' entries must be [start, end]")
    for r in relations:
        if not (
            isinstance(r, list) and len(r) == 3
            and type(r[0]) is int and type(r[1]) is int and isinstance(r[2], str)
        ):
            raise CorpusError(f"line {lineno}: field 'relations' entries must be [i, j, label]")
    try:
        return AnnotatedParagraph(tokens, mentions, relations, domain)
    except CorpusError as exc:
        raise CorpusError(f"line {lineno}: {exc}") from None


def read_records(path: str | Path) -> list[AnnotatedParagraph]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if lineno == 1 and line.startswith("#"):
                if line != CORPUS_HEADER:
                    raise CorpusError(f"line 1: unsupported header {line!r}")
                continue
            if not line.strip():
                continue
            out.append(parse_record(line, lineno))
    return out
