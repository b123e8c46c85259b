"""Pair classifiers over pooled mention vectors and the training loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .encoder import HEAD_TENSORS, EncoderOutput, pool_mention
from .tensor import flop_scope, gelu, gelu_grad, matmul, softmax_rows


class HeadError(ValueError):
    pass


@dataclass(frozen=True)
class PairRepresentation:
    o_i: np.ndarray
    o_j: np.ndarray

    @property
    def concat(self) -> np.ndarray:
        return np.concatenate([self.o_i, self.o_j])


@dataclass(frozen=True)
class RelationPrediction:
    pair: tuple[int, int]
    distribution: np.ndarray

    @property
    def label(self) -> int:
        # np.argmax returns the first maximum, i.e. the lowest label id on ties
        return int(np.argmax(self.distribution))


def _check_head(params: Mapping[str, np.ndarray], head_type: str) -> None:
    if head_type not in HEAD_TENSORS:
        raise HeadError(f"unknown head type {head_type!r}")
    missing = [n for n in HEAD_TENSORS[head_type] if n not in params]
    if missing:
        raise HeadError(f"{head_type} head needs {', '.join(missing)}")


def head_forward(params, head_type: str, o_i: np.ndarray, o_j: np.ndarray):
    """Unnormalized label scores for one ordered pair."""
    x = np.concatenate([o_i, o_j])[None, :]
    with flop_scope("head"):
        if head_type == "linear":
            return (matmul(x, params["head.W"]) + params["head.b"])[0], (x, None)
        if head_type == "mlp":
            u = matmul(x, params["head.W1"]) + params["head.c"]
            return (matmul(gelu(u), params["head.V"]) + params["head.b"])[0], (x, u)
        # biaffine: o_i^T U[:, l, :] o_j for each label l, plus the linear part
        U = params["head.U"]
        d, nl, _ = U.shape
        left = matmul(o_i[None, :], U.reshape(d, nl * d)).reshape(nl, d)
        bil = matmul(left, o_j[:, None])[:, 0]
        return bil + (matmul(x, params["head.W"]) + params["head.b"])[0], (x, left)


def head_backward(dlogits, cache, params, head_type: str, grads):
    """Accumulate head grads; returns (do_i, do_j)."""
    x, extra = cache
    g = dlogits[None, :]
    d = x.shape[1] // 2
    with flop_scope("head"):
        if head_type == "linear":
            grads["head.W"] += matmul(x.T, g)
            grads["head.b"] += dlogits
            dx = matmul(g, params["head.W"].T)[0]
        elif head_type == "mlp":
            u = extra
            grads["head.V"] += matmul(gelu(u).T, g)
            grads["head.b"] += dlogits
            du = matmul(g, params["head.V"].T) * gelu_grad(u)
            grads["head.W1"] += matmul(x.T, du)
            grads["head.c"] += du[0]
            dx = matmul(du, params["head.W1"].T)[0]
        else:
            left = extra
            o_i, o_j = x[0, :d], x[0, d:]
            U = params["head.U"]
            nl = U.shape[1]
            grads["head.W"] += matmul(x.T, g)
            grads["head.b"] += dlogits
            dx = matmul(g, params["head.W"].T)[0].copy()
            # bil_l = sum_ab o_i[a] U[a,l,b] o_j[b]
            dx[d:] += matmul(dlogits[None, :], left)[0]
            w = np.outer(dlogits, o_j).reshape(1, nl * d)
            grads["head.U"] += matmul(o_i[:, None], w).reshape(U.shape)
            dx[:d] += matmul(U.reshape(d, nl * d), w.T)[:, 0]
    return dx[:d], dx[d:]


def predict_pair(rep: PairRepresentation, params, head_type: str) -> RelationPrediction:
    _check_head(params, head_type)
    logits, _ = head_forward(params, head_type, rep.o_i, rep.o_j)
    return RelationPrediction((-1, -1), softmax_rows(logits))


def predict_all(
    out: EncoderOutput, spans: Sequence[tuple[int, int]], pairs, params, head_type: str
) -> list[RelationPrediction]:
    """Score every pair from one shared encoding; pairs are independent of each other."""
    _check_head(params, head_type)
    preds = []
    for i, j in pairs:
        rep = PairRepresentation(pool_mention(out, spans[i]), pool_mention(out, spans[j]))
        pred = predict_pair(rep, params, head_type)
        preds.append(RelationPrediction((i, j), pred.distribution))
    return preds


def cross_entropy_loss(logits: np.ndarray, gold: Sequence[int]) -> tuple[float, np.ndarray]:
    """Mean NLL over the rows of ``logits`` (pairs x labels) and its gradient."""
    gold = np.asarray(gold, dtype=np.int64)
    if logits.shape[0] != len(gold):
        raise HeadError(f"{logits.shape[0]} predictions but {len(gold)} gold labels")
    n, nl = logits.shape
    if n == 0:
        return 0.0, np.zeros_like(logits)
    if gold.min() < 0 or gold.max() >= nl:
        raise HeadError(f"gold label id out of range 0..{nl - 1}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(n), gold] - log_z
    loss = float(-logp.mean())
    grad = softmax_rows(logits)
    grad[np.arange(n), gold] -= 1.0
    return loss, grad / n


def nll_of(preds: Sequence[RelationPrediction], gold: Sequence[int]) -> float:
    """Mean NLL computed from already-normalized distributions."""
    if len(preds) != len(gold):
        raise HeadError("lengths differ")
    return -sum(math.log(p.distribution[g]) for p, g in zip(preds, gold)) / max(len(preds), 1)
