import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mre.corpus import (
    CORPUS_HEADER,
    ENTITY_PIECES,
    ENTITY_TYPES,
    AnnotatedParagraph,
    CorpusError,
    LabelSet,
    SubwordVocab,
    SyntheticSpec,
    detokenize,
    enumerate_pairs,
    gen_synthetic,
    read_records,
    tokenize,
    window_truncate,
    write_records,
)


def greedy_oracle(word, entries):
    """Independent longest-prefix segmentation."""
    out = []
    rest = word
    while rest:
        best = rest[0]
        for e in entries:
            if rest.startswith(e) and len(e) > len(best):
                best = e
        out.append(best)
        rest = rest[len(best):]
    return out


def test_baghdad():
    assert tokenize("Baghdad", SubwordVocab(["Bag", "hdad"])) == [("Bag", 0), ("hdad", 0)]


def test_in_vocab_word_single_token():
    assert tokenize("police", SubwordVocab(["police", "pol"])) == [("police", 0)]


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.text("abcd", min_size=1, max_size=3), min_size=1, max_size=8),
    st.text("abcde", min_size=1, max_size=12),
)
def test_tokenizer_matches_oracle(entries, word):
    vocab = SubwordVocab(entries)
    assert [p for p, _ in tokenize([word], vocab)] == greedy_oracle(word, set(entries))


def test_detokenize_roundtrip():
    vocab = SubwordVocab(["ab", "c"])
    text = "abc cab ab"
    assert detokenize(tokenize(text, vocab)) == text


def test_labelset_na_first():
    ls = LabelSet(["R2", "NA", "R1", "R2"])
    assert ls.names == ["NA", "R1", "R2"]
    assert ls.id("NA") == 0 and ls.name(2) == "R2"
    with pytest.raises(CorpusError):
        ls.id("R9")


def test_paragraph_validation():
    with pytest.raises(CorpusError):
        AnnotatedParagraph(["a"], [(0, 2)])
    with pytest.raises(CorpusError):
        AnnotatedParagraph(["a", "b"], [(0, 1)], [(0, 1, "R1")])
    with pytest.raises(CorpusError):
        AnnotatedParagraph(["a", "b"], [(0, 1), (1, 2)], [(0, 1, "R1"), (0, 1, "R2")])


def test_enumerate_pairs():
    p3 = AnnotatedParagraph(list("abc"), [(0, 1), (1, 2), (2, 3)])
    assert enumerate_pairs(p3) == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]
    p2 = AnnotatedParagraph(list("ab"), [(0, 1), (1, 2)], [(0, 1, "R1")])
    assert enumerate_pairs(p2, "gold-only") == [(0, 1)]
    p5 = AnnotatedParagraph(list("abcde"), [(i, i + 1) for i in range(5)])
    assert len(enumerate_pairs(p5)) == 20


def _indexed(n):
    return [f"w{i}" for i in range(n)]


def test_window_single_relation():
    p = AnnotatedParagraph(_indexed(20), [(10, 11), (12, 13)], [(0, 1, "R1")])
    out = window_truncate(p, 5)
    assert out.tokens == [f"w{i}" for i in range(5, 18)]
    assert out.mentions == [(5, 6), (7, 8)]


def test_window_large_radius_identity():
    p = AnnotatedParagraph(_indexed(8), [(1, 2), (5, 7)], [(0, 1, "R1")])
    assert window_truncate(p, 100) == p


@settings(max_examples=100, deadline=None)
@given(st.integers(20, 60), st.integers(0, 6), st.data())
def test_window_union_oracle(n, radius, data):
    starts = data.draw(st.lists(st.integers(0, n - 2), min_size=2, max_size=5, unique=True))
    spans = [(s, s + 1) for s in sorted(starts)]
    m = len(spans)
    rel = [(0, m - 1, "R1")]
    if m > 2:
        rel.append((1, 2, "R2"))
    p = AnnotatedParagraph(_indexed(n), spans, rel)
    covered = set()
    for i, j, _ in rel:
        lo = min(spans[i][0], spans[j][0]) - radius
        hi = max(spans[i][1], spans[j][1]) + radius
        covered |= {t for t in range(lo, hi) if 0 <= t < n}
    out = window_truncate(p, radius)
    assert out.tokens == [f"w{t}" for t in sorted(covered)]
    for i, j, lab in out.relations:
        assert lab in {"R1", "R2"}
        assert out.tokens[out.mentions[i][0]] in p.tokens


def test_window_two_ranges_gap_removed():
    p = AnnotatedParagraph(_indexed(40), [(1, 2), (3, 4), (35, 36), (37, 38)], [(0, 1, "R1"), (2, 3, "R2")])
    out = window_truncate(p, 2)
    assert out.tokens == [f"w{i}" for i in [*range(0, 6), *range(33, 40)]]
    assert out.relations == [(0, 1, "R1"), (2, 3, "R2")]


# --------------------------------------------------------------- synthetic


def oracle_type(token):
    for t, etype in enumerate(ENTITY_TYPES):
        if any(token.startswith(piece) for piece in ENTITY_PIECES[etype]):
            return t
    raise AssertionError(token)


def oracle_label(p, i, j, spec):
    """Recompute the gold label from the emitted tokens and spans alone."""
    offset = p.mentions[j][0] - p.mentions[i][0]
    if offset < 0:
        return "NA"
    if spec.labels == 1:
        return "R1"
    if offset > spec.near:
        return f"R{spec.labels}"
    subj_type = oracle_type(p.tokens[p.mentions[i][0]])
    return f"R{1 + subj_type % (spec.labels - 1)}"


@pytest.mark.parametrize("labels", [1, 2, 3, 5])
def test_synthetic_labels_match_oracle(labels):
    spec = SyntheticSpec(paragraphs=60, labels=labels, seed=3)
    for p in gen_synthetic(spec):
        for i, j, lab in p.relations:
            assert lab == oracle_label(p, i, j, spec)


def test_synthetic_deterministic():
    spec = SyntheticSpec(paragraphs=25)
    a, b = gen_synthetic(spec), gen_synthetic(spec)
    assert a == b
    assert gen_synthetic(SyntheticSpec(paragraphs=25, seed=8)) != a


def test_synthetic_two_mentions_one_pair_each():
    corpus = gen_synthetic(SyntheticSpec(paragraphs=30, mentions=2))
    assert sum(len(enumerate_pairs(p, "gold-only")) for p in corpus) == 30


def test_synthetic_label_mix_includes_na():
    labs = {lab for p in gen_synthetic(SyntheticSpec(paragraphs=50)) for _, _, lab in p.relations}
    assert labs == {"NA", "R1", "R2", "R3"}


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        gen_synthetic(SyntheticSpec(mentions=20, max_words=10))


# -------------------------------------------------------------------- I/O


def test_write_read_roundtrip(tmp_path):
    corpus = gen_synthetic(SyntheticSpec(paragraphs=12))
    path = tmp_path / "c.jsonl"
    write_records(corpus, path)
    assert path.read_text().splitlines()[0] == CORPUS_HEADER
    assert read_records(path) == corpus


def test_empty_file(tmp_path):
    path = tmp_path / "e.jsonl"
    path.write_text("")
    assert read_records(path) == []
    write_records([], path)
    assert read_records(path) == []


def test_truncated_line_named(tmp_path):
    corpus = gen_synthetic(SyntheticSpec(paragraphs=3))
    path = tmp_path / "t.jsonl"
    write_records(corpus, path)
    lines = path.read_text().splitlines()
    lines[2] = lines[2][: len(lines[2]) // 2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusError, match="line 3"):
        read_records(path)


def test_bad_field_named(tmp_path):
    path = tmp_path / "b.jsonl"
    rec = {"tokens": ["a"], "mentions": "oops", "relations": [], "domain": "bc"}
    path.write_text(CORPUS_HEADER + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(CorpusError, match="mentions"):
        read_records(path)
