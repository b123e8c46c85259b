"""Micro/macro F1 scoring with NA excluded from credit, and per-domain reports."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import AnnotatedParagraph, LabelSet, enumerate_pairs
from .encoder import Model
from .variants import predict

NA_ID = 0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class Scores:
    n: int
    tp: int
    fp: int
    fn: int
    correct: int
    macro_f1: float
    per_label_f1: dict[int, float]

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def micro_f1(self) -> float:
        return _f1(self.precision, self.recall)

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0


def score(gold: Sequence[int], pred: Sequence[int], n_labels: int, na: int = NA_ID) -> Scores:
    """Score label ids pairwise.

    Micro counts: a non-NA prediction equal to gold is a TP; any other non-NA
    prediction is a FP; a non-NA gold not predicted exactly is a FN. NA on NA
    earns nothing. Macro F1 averages per-label F1 over non-NA labels that occur
    in gold or predictions.
    """
    if len(gold) != len(pred):
        raise ValueError("gold and predictions differ in length")
    g = np.asarray(gold, dtype=np.int64)
    p = np.asarray(pred, dtype=np.int64)
    if len(g) and (g.min() < 0 or g.max() >= n_labels or p.min() < 0 or p.max() >= n_labels):
        raise ValueError("label id out of range")
    hit = g == p
    tp = int(np.sum(hit & (p != na)))
    fp = int(np.sum(~hit & (p != na)))
    fn = int(np.sum(~hit & (g != na)))
    per_label = {}
    for lab in range(n_labels):
        if lab == na or not (np.any(g == lab) or np.any(p == lab)):
            continue
        ltp = int(np.sum((g == lab) & (p == lab)))
        lp = ltp / int(np.sum(p == lab)) if np.any(p == lab) else 0.0
        lr = ltp / int(np.sum(g == lab)) if np.any(g == lab) else 0.0
        per_label[lab] = _f1(lp, lr)
    macro = float(np.mean(list(per_label.values()))) if per_label else 0.0
    return Scores(len(g), tp, fp, fn, int(hit.sum()), macro, per_label)


def domain_average(values: Sequence[float]) -> float:
    """Unweighted mean over domains (the 'avg' column convention)."""
    return sum(values) / len(values)


@dataclass
class EvalReport:
    labels: list[str]
    overall: Scores
    domains: dict[str, Scores]
    confusion: np.ndarray  # gold x predicted counts
    mode: str = ""
    relations_per_second: float | None = None
    records: list[tuple] = field(default_factory=list, repr=False)

    @property
    def avg_micro_f1(self) -> float:
        return domain_average([s.micro_f1 for s in self.domains.values()])

    @property
    def avg_macro_f1(self) -> float:
        return domain_average([s.macro_f1 for s in self.domains.values()])

    def metric_rows(self) -> list[tuple[str, str, float]]:
        rows = []
        for name, s in [*sorted(self.domains.items()), ("all", self.overall)]:
            rows += [
                ("micro_f1", name, s.micro_f1),
                ("macro_f1", name, s.macro_f1),
                ("precision", name, s.precision),
                ("recall", name, s.recall),
                ("accuracy", name, s.accuracy),
                ("pairs", name, float(s.n)),
            ]
        if self.domains:
            rows += [("micro_f1", "avg", self.avg_micro_f1), ("macro_f1", "avg", self.avg_macro_f1)]
        for gi, gname in enumerate(self.labels):
            for pi, pname in enumerate(self.labels):
                rows.append((f"confusion[{gname}->{pname}]", "all", float(self.confusion[gi, pi])))
        return rows

    def to_lines(self) -> str:
        """Machine-readable ``metric,domain,value``; timing is left out so reruns compare equal."""
        return "".join(f"{m},{d},{v!r}\n" for m, d, v in self.metric_rows())

    def to_table(self) -> str:
        names = [*sorted(self.domains), "all"] + (["avg"] if self.domains else [])
        out = [f"{'domain':<8}{'pairs':>7}{'P':>9}{'R':>9}{'microF1':>9}{'macroF1':>9}{'acc':>9}"]
        for name in names:
            if name == "avg":
                out.append(f"{'avg':<8}{'':>7}{'':>9}{'':>9}{self.avg_micro_f1:>9.4f}{self.avg_macro_f1:>9.4f}{'':>9}")
                continue
            s = self.overall if name == "all" else self.domains[name]
            out.append(
                f"{name:<8}{s.n:>7}{s.precision:>9.4f}{s.recall:>9.4f}"
                f"{s.micro_f1:>9.4f}{s.macro_f1:>9.4f}{s.accuracy:>9.4f}"
            )
        if self.relations_per_second is not None:
            out.append(f"mode={self.mode} relations/s={self.relations_per_second:.1f}")
        return "\n".join(out) + "\n"

    def prediction_dump(self) -> str:
        """One line per pair: paragraph, i, j, gold, predicted, distribution (9 significant digits)."""
        lines = []
        for pid, i, j, g, p, dist in self.records:
            probs = " ".join(f"{x:.9g}" for x in dist)
            lines.append(f"{pid}\t{i}\t{j}\t{self.labels[g]}\t{self.labels[p]}\t{probs}")
        return "\n".join(lines) + ("\n" if lines else "")


def evaluate(
    corpus: Sequence[AnnotatedParagraph], model: Model, mode: str | None = None, pairs: str = "gold-only"
) -> EvalReport:
    labels = LabelSet(model.labels)
    if labels.names != model.labels:
        raise ValueError("checkpoint label order is not canonical")
    by_domain: dict[str, tuple[list, list]] = {}
    records = []
    n_pairs = 0
    start = time.perf_counter()
    for pid, p in enumerate(corpus):
        gold_map = p.gold()
        todo = enumerate_pairs(p, pairs)
        if not todo:
            continue
        preds = predict(model, p, todo, mode)
        g_ids = [labels.id(gold_map.get(pr, "NA")) for pr in todo]
        p_ids = [pr.label for pr in preds]
        dg, dp = by_domain.setdefault(p.domain, ([], []))
        dg.extend(g_ids)
        dp.extend(p_ids)
        n_pairs += len(todo)
        for (i, j), g, pr in zip(todo, g_ids, preds):
            records.append((pid, i, j, g, pr.label, pr.distribution))
    elapsed = time.perf_counter() - start
    all_g = [x for dg, _ in by_domain.values() for x in dg]
    all_p = [x for _, dp in by_domain.values() for x in dp]
    nl = len(labels)
    confusion = np.zeros((nl, nl), dtype=np.int64)
    np.add.at(confusion, (np.asarray(all_g, dtype=np.int64), np.asarray(all_p, dtype=np.int64)), 1)
    return EvalReport(
        labels=labels.names,
        overall=score(all_g, all_p, nl),
        domains={d: score(g, p, nl) for d, (g, p) in sorted(by_domain.items())},
        confusion=confusion,
        mode=mode or model.config.pass_mode,
        relations_per_second=n_pairs / elapsed if elapsed > 0 else None,
        records=records,
    )


def majority_ceiling(corpus: Sequence[AnnotatedParagraph]) -> float:
    """Best pair accuracy any pair-blind predictor can reach: per-paragraph majority gold label."""
    hits = total = 0
    for p in corpus:
        labs = [lab for _, _, lab in p.relations]
        if labs:
            hits += max(labs.count(x) for x in set(labs))
            total += len(labs)
    return hits / total if total else 0.0
