"""Adam training loop and the finite-difference gradient-check harness."""

from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import ModelConfig, TrainSpec
from .corpus import AnnotatedParagraph, LabelSet, enumerate_pairs
from .encoder import Model
from .heads import cross_entropy_loss
from .tensor import finite_diff_grad, rng_stream
from .variants import run

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Model):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def training_pairs(p: AnnotatedParagraph, labels: LabelSet) -> tuple[list, list[int]]:
    gold = p.gold()
    pairs = enumerate_pairs(p, "gold-only")
    return pairs, [labels.id(gold[pr]) for pr in pairs]


def paragraph_loss_and_grads(model: Model, p, pairs, gold, weight: float, mode=None):
    """Loss (mean over the paragraph's pairs) and grads of ``weight * loss``."""
    result = run(model, p, pairs, mode)
    loss, dlogits = cross_entropy_loss(result.logits, gold)
    return loss, result.backward(dlogits * weight)


def batch_loss_and_grads(model: Model, batch, labels: LabelSet, threads: int = 1):
    """Mean pair loss over a batch of paragraphs; reduction runs in batch order."""
    items = [(p, *training_pairs(p, labels)) for p in batch]
    items = [it for it in items if it[1]]
    total = sum(len(pairs) for _, pairs, _ in items)
    if total == 0:
        return 0.0, None

    def work(item):
        p, pairs, gold = item
        return paragraph_loss_and_grads(model, p, pairs, gold, len(pairs) / total)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(it) for it in items]
    grads = results[0][1]
    for _, g in results[1:]:
        for name in grads:
            grads[name] += g[name]
    loss = sum(l * len(it[1]) for (l, _), it in zip(results, items)) / total
    return loss, grads


@dataclass
class TrainResult:
    model: Model
    step_losses: list[float]
    epoch_losses: list[float]


def build_model(corpus: Sequence[AnnotatedParagraph], cfg: ModelConfig, labels: LabelSet | None = None) -> Model:
    labels = labels or LabelSet.from_corpus(corpus)
    tokens = [t for p in corpus for t in p.tokens]
    return Model.create(cfg, tokens, labels.names)


def train(
    corpus: Sequence[AnnotatedParagraph],
    cfg: ModelConfig,
    spec: TrainSpec,
    model: Model | None = None,
    on_epoch: Callable[[int, Model, float], None] | None = None,
) -> TrainResult:
    if not corpus:
        raise ValueError("training corpus is empty")
    model = model or build_model(corpus, cfg)
    labels = LabelSet(model.labels)
    opt = Adam(spec.lr, spec.beta1, spec.beta2, spec.adam_eps)
    shuffle = rng_stream(spec.seed, "train/shuffle")
    step_losses, epoch_losses = [], []
    last_good = copy.deepcopy(model)
    for epoch in range(spec.epochs):
        order = shuffle.permutation(len(corpus))
        seen = []
        for start in range(0, len(order), spec.batch_size):
            batch = [corpus[i] for i in order[start:start + spec.batch_size]]
            loss, grads = batch_loss_and_grads(model, batch, labels, spec.threads)
            if grads is None:
                continue
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}", last_good)
            clip_global_norm(grads, spec.clip_norm)
            opt.step(model.params, grads)
            step_losses.append(loss)
            seen.append(loss)
        epoch_loss = float(np.mean(seen)) if seen else 0.0
        epoch_losses.append(epoch_loss)
        log.info("epoch %d loss %.6f", epoch + 1, epoch_loss)
        if all(np.isfinite(v).all() for v in model.params.values()):
            last_good = copy.deepcopy(model)
        if on_epoch and spec.eval_every and (epoch + 1) % spec.eval_every == 0:
            on_epoch(epoch + 1, model, epoch_loss)
    return TrainResult(model, step_losses, epoch_losses)


# ------------------------------------------------------------ gradient check

REL_ERR_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_ERR_FLOOR) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor); entries below ``floor`` are compared absolutely."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def failures(self) -> list[str]:
        return [n for n, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = [f"{name}\t{err:.3e}\t{'ok' if err < self.tolerance else 'FAIL'}" for name, err in self.errors.items()]
        out.append(f"overall\t{max(self.errors.values(), default=0.0):.3e}\t{'PASS' if self.passed else 'FAIL'}")
        return out


def toy_paragraph(model: Model, seed: int, n_tokens: int = 12) -> AnnotatedParagraph:
    """Random paragraph with a multi-token mention, overlapping spans and all ordered pairs labelled."""
    rng = rng_stream(seed, "gradcheck/paragraph")
    n = min(n_tokens, model.config.max_len)
    tokens = [model.vocab[int(t)] for t in rng.integers(1, len(model.vocab), size=n)]
    mentions = [(1, 3), (5, 6), (n - 3, n - 1)]
    if n >= 8:
        mentions.append((2, 4))  # overlaps (1, 3)
    pairs = [(i, j) for i in range(len(mentions)) for j in range(len(mentions)) if i != j]
    labels = model.labels
    rel = [(i, j, labels[int(rng.integers(len(labels)))]) for i, j in pairs]
    return AnnotatedParagraph(tokens, mentions, rel, "toy")


def grad_check(
    cfg: ModelConfig,
    seed: int = 0,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    n_tokens: int = 12,
    grad_hook: Callable[[dict[str, np.ndarray]], None] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of every parameter tensor with central differences.

    ``grad_hook`` may mutate the analytic gradients before comparison (used to
    test that the harness reports corruption).
    """
    vocab = [f"t{i}" for i in range(cfg.vocab_size - 1)]
    labels = ["NA"] + [f"R{i}" for i in range(1, cfg.n_labels)]
    model = Model.create(cfg.replace(seed=seed), vocab, labels)
    # move layer-norm and bias terms off their trivial init so their grads are exercised
    rng = rng_stream(seed, "gradcheck/perturb")
    for name, val in model.params.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("g", "b", "bo", "b1", "b2", "c"):
            val += rng.normal(0.0, 0.1, size=val.shape)
    p = toy_paragraph(model, seed, n_tokens)
    label_set = LabelSet(labels)
    pairs, gold = training_pairs(p, label_set)

    def loss_fn() -> float:
        return cross_entropy_loss(run(model, p, pairs).logits, gold)[0]

    _, analytic = paragraph_loss_and_grads(model, p, pairs, gold, 1.0)
    if grad_hook:
        grad_hook(analytic)
    ids = model.token_ids(p.tokens)
    errors = {}
    for name, value in model.params.items():
        numeric = np.zeros_like(value)
        rows = None
        if name == "embed.tok":
            rows = np.unique(ids)
        elif name == "embed.pos":
            rows = np.arange(len(ids))
        if rows is None:
            numeric = _fd_inplace(loss_fn, value, eps)
        else:
            # rows never looked up cannot influence the loss
            for r in rows:
                numeric[r] = _fd_inplace(loss_fn, value[r], eps)
        errors[name] = relative_error(analytic[name], numeric)
    return GradCheckReport(errors, tolerance)


def _fd_inplace(loss_fn, view: np.ndarray, eps: float) -> np.ndarray:
    """finite_diff_grad over a live parameter view (perturbs and restores in place)."""
    def f(x):
        view[...] = x
        return loss_fn()

    orig = view.copy()
    try:
        return finite_diff_grad(f, orig, eps)
    finally:
        view[...] = orig
