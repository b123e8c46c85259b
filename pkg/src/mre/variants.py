"""Comparison systems and pass modes over one shared forward/backward interface.

Every ``run_*`` function returns a :class:`PassResult`: per-pair logits and a
``backward`` callable that turns d(loss)/d(logits) into parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .attention import EntityMask
from .corpus import AnnotatedParagraph
from .encoder import (
    Model,
    backprop_layers,
    encode_backward,
    encode_tokens,
    indicator_matrix,
    pool_backward,
    pool_mention,
    run_layers,
    zero_grads,
)
from .heads import RelationPrediction, head_backward, head_forward
from .tensor import flop_scope, softmax_rows

Pairs = Sequence[tuple[int, int]]


@dataclass(frozen=True)
class VariantSpec:
    variant: str
    pass_mode: str = "one-pass"
    target_pair: tuple[int, int] | None = None


@dataclass
class PassResult:
    pairs: list[tuple[int, int]]
    logits: np.ndarray  # pairs x labels
    backward: Callable[[np.ndarray], dict[str, np.ndarray]]

    def predictions(self) -> list[RelationPrediction]:
        return [RelationPrediction(pr, softmax_rows(row)) for pr, row in zip(self.pairs, self.logits)]


def _ids(model: Model, p: AnnotatedParagraph):
    return model.token_ids(p.tokens)


def _score_pairs(model: Model, hidden: np.ndarray, spans, pairs: Pairs):
    """Head over pooled mentions of one hidden-state matrix, one pair at a time."""
    head = model.config.head
    pooled = {m: pool_mention(hidden, spans[m]) for m in sorted({m for pr in pairs for m in pr})}
    rows, caches = [], []
    for i, j in pairs:
        logits, c = head_forward(model.params, head, pooled[i], pooled[j])
        rows.append(logits)
        caches.append(c)
    return rows, caches


def _unscore(model: Model, dlogits_rows, caches, spans, pairs: Pairs, shape, grads) -> np.ndarray:
    dH = np.zeros(shape)
    for dl, c, (i, j) in zip(dlogits_rows, caches, pairs):
        doi, doj = head_backward(dl, c, model.params, model.config.head, grads)
        pool_backward(dH, spans[i], doi)
        pool_backward(dH, spans[j], doj)
    return dH


def _stack(rows, n_labels: int) -> np.ndarray:
    return np.array(rows).reshape(len(rows), n_labels)


def _shared_pass(model: Model, p: AnnotatedParagraph, pairs: Pairs, mask, indicators) -> PassResult:
    """Encode once, then score every pair from the same hidden states."""
    pairs = list(pairs)
    out, enc_cache = encode_tokens(model, _ids(model, p), mask, indicators)
    rows, caches = _score_pairs(model, out.hidden, p.mentions, pairs)

    def backward(dlogits):
        grads = zero_grads(model)
        dH = _unscore(model, dlogits, caches, p.mentions, pairs, out.hidden.shape, grads)
        encode_backward(dH, enc_cache, model, grads)
        return grads

    return PassResult(pairs, _stack(rows, model.config.n_labels), backward)


def _per_pair_pass(model: Model, p: AnnotatedParagraph, pairs: Pairs, make_inputs) -> PassResult:
    """Re-encode the paragraph for every pair; ``make_inputs(i, j)`` -> (mask, indicators)."""
    pairs = list(pairs)
    ids = _ids(model, p)
    rows, runs = [], []
    for i, j in pairs:
        mask, indicators = make_inputs(i, j)
        out, enc_cache = encode_tokens(model, ids, mask, indicators)
        r, c = _score_pairs(model, out.hidden, p.mentions, [(i, j)])
        rows.extend(r)
        runs.append((out.hidden.shape, enc_cache, c))

    def backward(dlogits):
        grads = zero_grads(model)
        for dl, pair, (shape, enc_cache, c) in zip(dlogits, pairs, runs):
            dH = _unscore(model, [dl], c, p.mentions, [pair], shape, grads)
            encode_backward(dH, enc_cache, model, grads)
        return grads

    return PassResult(pairs, _stack(rows, model.config.n_labels), backward)


# ------------------------------------------------------------------ systems


def run_entity_aware(model: Model, p: AnnotatedParagraph, pairs: Pairs, mode: str = "one-pass") -> PassResult:
    n = len(p.tokens)
    if mode == "one-pass":
        return _shared_pass(model, p, pairs, EntityMask.from_spans(n, p.mentions), None)
    # single-relation pass: only the two target mentions are visible as entities
    return _per_pair_pass(
        model, p, pairs,
        lambda i, j: (EntityMask.from_spans(n, [p.mentions[i], p.mentions[j]]), None),
    )


def run_plain_sp(model: Model, p: AnnotatedParagraph, pairs: Pairs, mode: str = "one-pass") -> PassResult:
    if mode == "one-pass":
        return _shared_pass(model, p, pairs, None, None)
    return _per_pair_pass(model, p, pairs, lambda i, j: (None, None))


def run_indicator_input(model: Model, p: AnnotatedParagraph, pairs: Pairs, mode: str = "one-pass") -> PassResult:
    n = len(p.tokens)
    if mode == "one-pass":
        return _shared_pass(model, p, pairs, None, indicator_matrix(n, p.mentions))
    return _per_pair_pass(
        model, p, pairs,
        lambda i, j: (None, indicator_matrix(n, subj=p.mentions[i], obj=p.mentions[j])),
    )


def entity_offsets(n: int, span: tuple[int, int], k: int) -> np.ndarray:
    """Clipped distance from a mention to each token, as a table row index.

    Tokens inside the span sit at distance 0; others are measured from the
    nearest span edge, entity position minus token position.
    """
    pos = np.arange(n)
    s, e = span
    d = np.where(pos < s, s - pos, np.where(pos >= e, (e - 1) - pos, 0))
    return np.clip(d, -k, k) + k


def posemb_injection(model: Model, n: int, subj, obj) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    k = model.config.k
    ts, to = entity_offsets(n, subj, k), entity_offsets(n, obj, k)
    return model.params["posemb.subj"][ts] + model.params["posemb.obj"][to], ts, to


def run_posemb_final(model: Model, p: AnnotatedParagraph, pairs: Pairs, mode: str = "per-pair") -> PassResult:
    """Shared lower layers, then per pair: add target-entity position embeddings and rerun the last layer."""
    pairs = list(pairs)
    last = model.config.layers - 1
    n = len(p.tokens)
    out, enc_cache = encode_tokens(model, _ids(model, p), None, None, layers=range(last))
    lower = out.hidden
    rows, runs = [], []
    for i, j in pairs:
        inj, ts, to = posemb_injection(model, n, p.mentions[i], p.mentions[j])
        with flop_scope("encoder"):
            top, caches, _ = run_layers(model, lower + inj, None, range(last, last + 1))
        r, c = _score_pairs(model, top, p.mentions, [(i, j)])
        rows.extend(r)
        runs.append((caches, c, ts, to))

    def backward(dlogits):
        grads = zero_grads(model)
        d_lower = np.zeros_like(lower)
        for dl, pair, (caches, c, ts, to) in zip(dlogits, pairs, runs):
            dtop = _unscore(model, [dl], c, p.mentions, [pair], lower.shape, grads)
            with flop_scope("encoder"):
                dx = backprop_layers(dtop, caches, model, grads)
            np.add.at(grads["posemb.subj"], ts, dx)
            np.add.at(grads["posemb.obj"], to, dx)
            d_lower += dx
        encode_backward(d_lower, enc_cache, model, grads)
        return grads

    return PassResult(pairs, _stack(rows, model.config.n_labels), backward)


def run_sentence_vector(model: Model, p: AnnotatedParagraph, pairs: Pairs, mode: str = "one-pass") -> PassResult:
    """Pair-blind baseline: the head sees only the mean of all final hidden states."""
    pairs = list(pairs)
    out, enc_cache = encode_tokens(model, _ids(model, p), None, None)
    sent = out.hidden.mean(axis=0)
    logits, cache = head_forward(model.params, model.config.head, sent, sent)
    rows = [logits for _ in pairs]

    def backward(dlogits):
        grads = zero_grads(model)
        total = np.sum(dlogits, axis=0) if len(pairs) else np.zeros(model.config.n_labels)
        ds1, ds2 = head_backward(total, cache, model.params, model.config.head, grads)
        dH = np.broadcast_to((ds1 + ds2) / out.hidden.shape[0], out.hidden.shape).copy()
        encode_backward(dH, enc_cache, model, grads)
        return grads

    return PassResult(pairs, _stack(rows, model.config.n_labels), backward)


RUNNERS = {
    "entity-aware": run_entity_aware,
    "plain-sp": run_plain_sp,
    "indicator-input": run_indicator_input,
    "posemb-final": run_posemb_final,
    "sentence-vector": run_sentence_vector,
}


def run(model: Model, p: AnnotatedParagraph, pairs: Pairs, mode: str | None = None) -> PassResult:
    """Dispatch on the model's variant; ``mode`` defaults to the configured pass mode."""
    cfg = model.config
    return RUNNERS[cfg.variant](model, p, pairs, mode or cfg.pass_mode)


def predict(model: Model, p: AnnotatedParagraph, pairs: Pairs, mode: str | None = None) -> list[RelationPrediction]:
    return run(model, p, pairs, mode).predictions()
