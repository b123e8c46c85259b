"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` to see only the gate.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from mre.attention import EntityMask, build_bias_tensors, render_bias_grid, RelativeBiasTable
from mre.bench import bench_throughput, bench_workload, flop_tally
from mre.checkpoint import to_bytes
from mre.cli import main as cli_main
from mre.config import ModelConfig, TrainSpec
from mre.corpus import AnnotatedParagraph, SyntheticSpec, enumerate_pairs, gen_synthetic
from mre.encoder import Model, encode_tokens, reference_encode_vanilla
from mre.evaluate import domain_average, evaluate, majority_ceiling
from mre.train import build_model, grad_check, train
from mre.variants import predict

from oracles import oracle_bias_vectors, oracle_grid_text

GOLDEN = Path(__file__).parent / "golden"
HELD_OUT = SyntheticSpec(paragraphs=300, seed=8)


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[acceptance {n:>2}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def _vocab_model(cfg=None, n=64):
    """Toy model over a 64-word vocabulary and the four labels NA, R1..R3."""
    toks = [f"w{i}" for i in range(n)]
    rel = [(0, 1, "R1"), (1, 2, "R2"), (2, 0, "R3"), (1, 0, "NA")]
    return build_model([AnnotatedParagraph(toks, [(0, 1), (2, 3), (4, 5)], rel, "x")], cfg or ModelConfig())


def _rand_paragraph(rng, vocab, n, m):
    starts = sorted(rng.choice(np.arange(0, n - 1, 2), size=m, replace=False).tolist())
    spans = [(s, s + int(rng.integers(1, 3))) for s in starts]
    toks = [vocab[int(t)] for t in rng.integers(1, len(vocab), size=n)]
    return AnnotatedParagraph(toks, spans, [], "x")


# --------------------------------------------------------------------- 1


def test_01_gradient_fidelity(capsys):
    start = time.perf_counter()
    rep = grad_check(ModelConfig(), seed=0, n_tokens=12)
    secs = time.perf_counter() - start
    worst = max(rep.errors.values())
    bias_ok = "rel.wK" in rep.errors and "rel.wV" in rep.errors
    ok = rep.passed and secs < 60 and bias_ok
    report(capsys, 1, ok, f"{len(rep.errors)} tensors incl. rel.wK/rel.wV, max rel err {worst:.2e} (< 1e-4), {secs:.1f} s (< 60 s)")


# --------------------------------------------------------------------- 2


def test_02_vanilla_reduction(capsys):
    model = _vocab_model()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(5):
        ids = rng.integers(0, len(model.vocab), size=int(rng.integers(5, 40)))
        out, _ = encode_tokens(model, ids, EntityMask.empty(len(ids)))
        ref = reference_encode_vanilla(model, ids)
        for got, want in zip(out.layer_states, ref):
            worst = max(worst, float(np.max(np.abs(got - want))))
    report(capsys, 2, worst <= 1e-12, f"max |entity-aware(empty mask) - vanilla| over all layers = {worst:.1e} (<= 1e-12)")


# --------------------------------------------------------------------- 3


def test_03_plain_sp_pass_identity(capsys):
    model = _vocab_model(ModelConfig(variant="plain-sp"))
    rng = np.random.default_rng(3)
    worst, n_pairs, max_m = 0.0, 0, 0
    for _ in range(20):
        m = int(rng.integers(2, 7))
        max_m = max(max_m, m)
        p = _rand_paragraph(rng, model.vocab, int(rng.integers(14, 40)), m)
        pairs = enumerate_pairs(p)
        a = np.array([x.distribution for x in predict(model, p, pairs, "one-pass")])
        b = np.array([x.distribution for x in predict(model, p, pairs, "per-pair")])
        worst = max(worst, float(np.max(np.abs(a - b))))
        n_pairs += len(pairs)
    report(capsys, 3, worst <= 1e-9 and max_m == 6, f"20 paragraphs, M up to {max_m}, {n_pairs} pairs, max diff {worst:.1e} (<= 1e-9)")


# --------------------------------------------------------------------- 4


def test_04_golden_grids(capsys, tmp_path):
    index = json.loads((GOLDEN / "masks.json").read_text())
    index.append(dict(file="inspect_n4_m1_k1.txt", n=4, k=1, spans=[[1, 2]], layers=1, heads=1))
    bad, both = [], 0
    rng = np.random.default_rng(4)
    for case in index:
        spans = [tuple(s) for s in case["spans"]]
        golden = (GOLDEN / case["file"]).read_text()
        out = tmp_path / case["file"]
        args = ["inspect-attention", "--length", str(case["n"]), "--k", str(case["k"]),
                "--mentions", ",".join(f"{s}:{e}" for s, e in spans),
                "--layers", str(case["layers"]), "--heads", str(case["heads"]), "--out", str(out)]
        oracle = oracle_grid_text(case["n"], spans, case["k"], case["layers"], case["heads"])
        mask = EntityMask.from_spans(case["n"], spans)
        tab = RelativeBiasTable(case["k"], rng.normal(size=(2 * case["k"] + 1, 3)), rng.normal(size=(2 * case["k"] + 1, 3)))
        aK, aV = build_bias_tensors(mask, case["n"], tab)
        oK, oV = oracle_bias_vectors(case["n"], spans, tab.wK, tab.wV, case["k"])
        if cli_main(args) != 0 or out.read_text() != golden or golden != oracle or not (
            np.array_equal(aK, oK) and np.array_equal(aV, oV)
        ):
            bad.append(case["file"])
        inside = mask.in_mention
        both += int(any(inside[i] and inside[i + 1] for i in range(case["n"] - 1)))
    ok = not bad and len(index) >= 11 and both >= 1
    report(capsys, 4, ok, f"{len(index)} golden grids (including {both} with entity-entity cells) match the cell oracle; mismatches: {bad or 'none'}")


# --------------------------------------------------------------------- 5


def test_05_clipping_saturation(capsys):
    rng = np.random.default_rng(5)
    ok = True
    for k in (1, 2, 4, 6):
        tab = RelativeBiasTable(k, rng.normal(size=(2 * k + 1, 4)), rng.normal(size=(2 * k + 1, 4)))
        n = 2 * k + 12
        grids = []
        for dist in (k, k + 5):
            aK, aV = build_bias_tensors(EntityMask.from_spans(n, [(0, 1), (dist, dist + 1)]), n, tab)
            grids.append((aK[0, dist], aV[0, dist], aK[dist, 0], aV[dist, 0]))
        ok &= all(np.array_equal(x, y) for x, y in zip(*grids))
        idx_k = render_bias_grid(EntityMask.from_spans(n, [(0, 1)]), k).splitlines()[0].split()[4:]
        ok &= idx_k[k] == idx_k[k + 5] == "R:0"
    report(capsys, 5, ok, "entity-pair bias vectors at distance k and k+5 identical for k in 1, 2, 4, 6")


# --------------------------------------------------------------------- 6 / 8


@pytest.fixture(scope="module")
def synthetic():
    return gen_synthetic(SyntheticSpec()), gen_synthetic(HELD_OUT)


_RUNS = {}


def trained(corpus, variant="entity-aware", head="linear"):
    key = (variant, head)
    if key not in _RUNS:
        start = time.perf_counter()
        res = train(corpus, ModelConfig(variant=variant, head=head), TrainSpec())
        _RUNS[key] = (res.model, time.perf_counter() - start)
    return _RUNS[key]


def test_06_learnability_separation(capsys, synthetic):
    train_set, held = synthetic
    ea, ea_secs = trained(train_set)
    sv, sv_secs = trained(train_set, "sentence-vector")
    ea_acc = evaluate(held, ea).overall.accuracy
    sv_acc = evaluate(held, sv).overall.accuracy
    sv_train = evaluate(train_set, sv).overall.accuracy
    ceil_held, ceil_train = majority_ceiling(held), majority_ceiling(train_set)
    ok = ea_acc >= 0.95 and ea_secs < 300 and sv_acc <= ceil_held + 0.05 and sv_train <= ceil_train + 0.05
    report(
        capsys, 6, ok,
        f"entity-aware held-out acc {ea_acc:.4f} (>= 0.95) after 30 epochs in {ea_secs:.0f} s (< 300 s); "
        f"sentence-vector held-out {sv_acc:.4f} vs ceiling {ceil_held:.4f}, train {sv_train:.4f} vs ceiling {ceil_train:.4f} (<= ceiling + 0.05)",
    )


def test_08_head_parity(capsys, synthetic):
    train_set, held = synthetic
    accs = {}
    for head in ("linear", "mlp", "biaffine"):
        model, _ = trained(train_set, head=head)
        accs[head] = evaluate(held, model).overall.accuracy

    # biaffine with U = 0 against a linear head sharing every other tensor
    bia = build_model(train_set[:20], ModelConfig(head="biaffine"))
    bia.params["head.U"][:] = 0.0
    lin_cfg = bia.config.replace(head="linear")
    lin = Model(lin_cfg, {n: bia.params[n] for n in bia.params if n != "head.U"}, bia.vocab, bia.labels)
    exact = True
    for p in held[:30]:
        pairs = enumerate_pairs(p)
        a = [x.distribution for x in predict(bia, p, pairs)]
        b = [x.distribution for x in predict(lin, p, pairs)]
        exact &= all(np.array_equal(x, y) for x, y in zip(a, b))
    order = " > ".join(f"{h} {accs[h]:.4f}" for h in sorted(accs, key=accs.get, reverse=True))
    ok = all(v >= 0.90 for v in accs.values()) and exact
    report(capsys, 8, ok, f"held-out acc (>= 0.90 each): {order}; biaffine(U=0) == linear bitwise: {exact}")


# --------------------------------------------------------------------- 7


def test_07_throughput(capsys):
    model = _vocab_model()
    work = bench_workload(model, paragraphs=8, n_tokens=64, mentions=5)
    rows = {r.mode: r for r in bench_throughput(work, model, repetitions=7, train_time=True)}
    one, per, pe = (rows[m].relations_per_second for m in ("one-pass", "per-pair", "posemb-final"))
    speed_ok = one >= 2 * per and per < pe < one

    enc = {"one-pass": [], "per-pair": []}
    for mentions in (2, 3, 4, 5):
        p = bench_workload(model, paragraphs=1, n_tokens=64, mentions=mentions)[0]
        pairs = enumerate_pairs(p, "gold-only")
        for mode in enc:
            enc[mode].append((len(pairs), flop_tally(model, p, pairs, mode)["encoder"]))
    const = len({f for _, f in enc["one-pass"]}) == 1
    unit = enc["per-pair"][0][1] // enc["per-pair"][0][0]
    linear = all(f == m * unit for m, f in enc["per-pair"])
    train_ratio = rows["per-pair"].train_epoch_seconds / rows["one-pass"].train_epoch_seconds
    report(
        capsys, 7, speed_ok and const and linear,
        f"rel/s one-pass {one:.0f}, posemb-final {pe:.0f}, per-pair {per:.0f} (speedup {one / per:.1f}x >= 2x, "
        f"posemb strictly between: {per < pe < one}); training epoch {train_ratio:.1f}x faster one-pass; "
        f"encoder FLOPs one-pass constant in M: {const}, per-pair linear in M: {linear}",
    )


# --------------------------------------------------------------------- 9


def test_09_determinism(capsys, tmp_path):
    corpus = gen_synthetic(SyntheticSpec(paragraphs=60, seed=9))
    spec = TrainSpec(epochs=2, threads=1)
    runs = []
    for _ in range(2):
        model = train(corpus, ModelConfig(), spec).model
        rep = evaluate(corpus, model)
        runs.append((to_bytes(model), rep.to_lines(), rep.prediction_dump()))
    lib_ok = runs[0] == runs[1]

    data = tmp_path / "c.jsonl"
    cli_main(["gen-data", "--out", str(data), "--paragraphs", "40"])
    files = []
    for tag in ("a", "b"):
        ck = tmp_path / f"{tag}.ckpt"
        met = tmp_path / f"{tag}.metrics"
        cli_main(["train", "--corpus", str(data), "--epochs", "2", "--out", str(ck)])
        cli_main(["eval", "--checkpoint", str(ck), "--corpus", str(data), "--metrics", str(met)])
        files.append((ck.read_bytes(), met.read_bytes()))
    cli_ok = files[0] == files[1] and len(files[0][0]) > 0
    report(capsys, 9, lib_ok and cli_ok, f"two seeded single-thread runs: checkpoints and eval reports bitwise identical (library {lib_ok}, CLI {cli_ok})")


# --------------------------------------------------------------------- 10


def test_10_scorer_average(capsys):
    avg = domain_average([63.48, 56.12, 55.17])
    report(capsys, 10, abs(avg - 58.26) <= 0.01, f"domain_average(63.48, 56.12, 55.17) = {avg:.4f} (58.26 +/- 0.01)")
