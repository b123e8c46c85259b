import numpy as np
import pytest

from mre.config import ModelConfig
from mre.corpus import AnnotatedParagraph
from mre.encoder import Model

VOCAB = [f"t{i}" for i in range(40)]
LABELS = ["NA", "R1", "R2", "R3"]


def tiny_model(**overrides) -> Model:
    cfg = ModelConfig(layers=2, heads=2, d_model=8, d_ff=12, k=2, **overrides)
    return Model.create(cfg, VOCAB, LABELS)


def random_paragraph(rng: np.random.Generator, n: int, m: int, labelled: bool = True) -> AnnotatedParagraph:
    """n tokens with m disjoint mentions of width 1-2 and every ordered pair labelled."""
    starts = sorted(rng.choice(np.arange(0, n - 1, 2), size=m, replace=False).tolist())
    spans = [(s, s + int(rng.integers(1, 3))) for s in starts]
    tokens = [VOCAB[int(t)] for t in rng.integers(0, len(VOCAB), size=n)]
    rel = []
    if labelled:
        rel = [(i, j, LABELS[int(rng.integers(len(LABELS)))]) for i in range(m) for j in range(m) if i != j]
    return AnnotatedParagraph(tokens, spans, rel, "bc")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
