"""One-pass vs multi-pass throughput benchmark and analytic FLOP tallies."""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import AnnotatedParagraph, LabelSet, enumerate_pairs
from .encoder import Model, init_params
from .tensor import count_flops, rng_stream
from .train import training_pairs
from .variants import run

BENCH_MODES = ("one-pass", "per-pair", "posemb-final")
MIN_TIMED_SECONDS = 0.02


@dataclass
class BenchRow:
    mode: str
    pairs: int
    seconds: float  # median wall time for the whole workload
    relations_per_second: float
    encoder_flops: int
    head_flops: int
    train_epoch_seconds: float | None = None

    def line(self) -> str:
        epoch = "" if self.train_epoch_seconds is None else f"{self.train_epoch_seconds:.4f}"
        return (
            f"{self.mode},{self.pairs},{self.seconds:.6f},{self.relations_per_second:.2f},"
            f"{self.encoder_flops},{self.head_flops},{epoch}"
        )


BENCH_HEADER = "mode,pairs,seconds,relations_per_second,encoder_flops,head_flops,train_epoch_seconds"


def hardware_descriptor(threads: int) -> dict[str, str]:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": str(os.cpu_count()),
        "threads": str(threads),
    }


def with_variant(model: Model, variant: str, pass_mode: str) -> Model:
    """Same weights where tensors coincide; tensors new to ``variant`` come from the seeded init."""
    cfg = model.config.replace(variant=variant, pass_mode=pass_mode)
    fresh = init_params(cfg)
    params = {n: model.params[n] if n in model.params else v for n, v in fresh.items()}
    return Model(cfg, params, model.vocab, model.labels)


def mode_model(model: Model, mode: str) -> Model:
    if mode == "posemb-final":
        return with_variant(model, "posemb-final", "per-pair")
    if mode not in ("one-pass", "per-pair"):
        raise ValueError(f"unknown bench mode {mode!r}")
    variant = model.config.variant if model.config.variant != "posemb-final" else "entity-aware"
    return with_variant(model, variant, mode)


def bench_workload(
    model: Model, paragraphs: int = 8, n_tokens: int = 64, mentions: int = 5, seed: int = 0
) -> list[AnnotatedParagraph]:
    """Paragraphs of exactly ``n_tokens`` with one annotated direction per mention pair."""
    rng = rng_stream(seed, "bench/workload")
    out = []
    width = n_tokens // mentions
    for _ in range(paragraphs):
        tokens = [model.vocab[int(t)] for t in rng.integers(1, len(model.vocab), size=n_tokens)]
        spans = []
        for m in range(mentions):
            start = m * width + int(rng.integers(0, max(1, width - 2)))
            spans.append((start, start + int(rng.integers(1, 3))))
        rel = [
            (a, b, model.labels[int(rng.integers(len(model.labels)))])
            for a in range(mentions) for b in range(a + 1, mentions)
        ]
        out.append(AnnotatedParagraph(tokens, spans, rel, "bench"))
    return out


def flop_tally(model: Model, p: AnnotatedParagraph, pairs, mode: str) -> dict[str, int]:
    """Exact matmul FLOPs for one forward pass over ``pairs``, split encoder/head."""
    m = mode_model(model, mode)
    with count_flops() as tally:
        run(m, p, pairs)
    return {"encoder": tally["encoder"], "head": tally["head"]}


def _time_workload(fn, repetitions: int, warmup: int) -> float:
    """Median seconds per call; batches calls when one call is below timer resolution."""
    for _ in range(warmup):
        fn()
    resolution = time.get_clock_info("perf_counter").resolution
    inner = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        dt = time.perf_counter() - t0
        if dt >= max(MIN_TIMED_SECONDS, 1000 * resolution) or inner >= 1 << 16:
            break
        inner *= 2
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) / inner)
    return statistics.median(samples)


def _inference(m: Model, corpus: Sequence[AnnotatedParagraph]):
    jobs = [(p, enumerate_pairs(p, "gold-only")) for p in corpus]

    def fn():
        for p, pairs in jobs:
            run(m, p, pairs)

    return fn, sum(len(pr) for _, pr in jobs)


def _train_epoch(m: Model, corpus: Sequence[AnnotatedParagraph]):
    labels = LabelSet(m.labels)
    jobs = [(p, *training_pairs(p, labels)) for p in corpus]

    def fn():
        from .heads import cross_entropy_loss

        for p, pairs, gold in jobs:
            res = run(m, p, pairs)
            _, d = cross_entropy_loss(res.logits, gold)
            res.backward(d)

    return fn


def bench_throughput(
    corpus: Sequence[AnnotatedParagraph],
    model: Model,
    modes: Sequence[str] = BENCH_MODES,
    repetitions: int = 5,
    warmup: int = 1,
    threads: int = 1,
    train_time: bool = True,
) -> list[BenchRow]:
    from threadpoolctl import threadpool_limits

    rows = []
    with threadpool_limits(limits=threads):
        for mode in modes:
            m = mode_model(model, mode)
            fn, n_pairs = _inference(m, corpus)
            secs = _time_workload(fn, repetitions, warmup)
            enc = head = 0
            for p in corpus:
                tally = flop_tally(model, p, enumerate_pairs(p, "gold-only"), mode)
                enc += tally["encoder"]
                head += tally["head"]
            epoch = None
            if train_time and mode in ("one-pass", "per-pair"):
                epoch = _time_workload(_train_epoch(m, corpus), max(1, repetitions // 2), 0)
            rows.append(BenchRow(mode, n_pairs, secs, n_pairs / secs, enc, head, epoch))
    return rows
