"""``mre`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .attention import EntityMask, render_bias_grid
from .config import HEAD_TYPES, PASS_MODES, VARIANTS, ConfigError, ModelConfig, TrainSpec, read_kv_file
from .corpus import CorpusError, SyntheticSpec, gen_synthetic, read_records, window_truncate, write_records

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("mre")


class UsageError(Exception):
    pass


class RunFailure(Exception):
    pass


def _default_seed(fallback: int = 0) -> int:
    """Seed when no --seed flag is given: $MRE_SEED, else ``fallback``."""
    raw = os.environ.get("MRE_SEED")
    if raw is None:
        return fallback
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"MRE_SEED must be an integer, got {raw!r}") from None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _write_manifest(path: Path, command: str, started: str, **fields) -> None:
    doc = {"command": command, "tool_version": __version__, **fields, "started": started, "finished": _now()}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _corpus(path: str) -> tuple[Path, list]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"corpus not found: {path}")
    try:
        return p, read_records(p)
    except CorpusError as exc:
        raise RunFailure(str(exc)) from None


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _kv(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    try:
        return read_kv_file(_existing(path, "config file"))
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _split_config(values: dict[str, str]) -> tuple[dict[str, str], dict[str, str]]:
    """Route keys of a combined key=value file to ModelConfig or TrainSpec."""
    model_keys = set(ModelConfig.__dataclass_fields__)
    train_keys = set(TrainSpec.__dataclass_fields__)
    m, t = {}, {}
    for key, value in values.items():
        if key.startswith("train."):
            t[key[6:]] = value
        elif key in model_keys:
            m[key] = value
        elif key in train_keys:
            t[key] = value
        else:
            raise UsageError(f"unknown config key {key!r}")
    return m, t


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed(SyntheticSpec.seed)
    spec = SyntheticSpec(paragraphs=args.paragraphs, mentions=args.mentions, labels=args.labels, seed=seed)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_records(gen_synthetic(spec), args.out)
    print(f"wrote {args.paragraphs} paragraphs to {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    _, corpus = _corpus(args.corpus)
    try:
        out = [window_truncate(p, args.radius) for p in corpus]
    except (AssertionError, ValueError) as exc:
        raise RunFailure(f"window truncation failed: {exc}") from None
    write_records(out, args.out)
    print(f"wrote {len(out)} paragraphs to {args.out}")
    return EXIT_OK


def resolve_train_config(args) -> tuple[ModelConfig, TrainSpec]:
    """Defaults < --config file < flags."""
    m_vals, t_vals = _split_config(_kv(args.config))
    for flag, key in (("variant", "variant"), ("mode", "pass_mode"), ("head", "head"), ("k", "k")):
        val = getattr(args, flag)
        if val is not None:
            m_vals[key] = str(val)
    for key in ("epochs", "batch_size", "lr", "threads"):
        val = getattr(args, key)
        if val is not None:
            t_vals[key] = str(val)
    seed = args.seed if args.seed is not None else (None if "seed" in t_vals else _default_seed())
    if seed is not None:
        t_vals["seed"] = str(seed)
    m_vals.setdefault("seed", t_vals["seed"] if "seed" in t_vals else "0")
    try:
        cfg = ModelConfig.from_mapping(m_vals)
        spec = TrainSpec.from_mapping(t_vals)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    return cfg, spec


def cmd_train(args) -> int:
    from .checkpoint import save
    from .train import TrainingDiverged, train

    started = _now()
    if args.from_manifest:
        doc = json.loads(_existing(args.from_manifest, "manifest").read_text(encoding="utf-8"))
        try:
            cfg = ModelConfig.from_mapping(doc["model_config"])
            spec = TrainSpec.from_mapping(doc["train_spec"])
        except (KeyError, ConfigError) as exc:
            raise UsageError(f"bad manifest: {exc}") from None
        corpus_arg = args.corpus or doc["corpus"]
        corpus_path, corpus = _corpus(corpus_arg)
        if _sha256(corpus_path) != doc["corpus_sha256"]:
            raise RunFailure("corpus hash differs from the manifest")
    else:
        if not args.corpus:
            raise UsageError("--corpus is required")
        cfg, spec = resolve_train_config(args)
        corpus_path, corpus = _corpus(args.corpus)
    if not corpus:
        raise RunFailure("training corpus is empty")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        result = train(corpus, cfg, spec)
    except TrainingDiverged as exc:
        save(exc.last_good, out)
        raise RunFailure(f"{exc}; last good checkpoint written to {out}") from None
    save(result.model, out)
    curve = out.with_suffix(".loss.csv")
    curve.write_text(
        "step,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(result.step_losses)), encoding="utf-8"
    )
    final = result.model.config
    _write_manifest(
        out.with_suffix(".manifest.json"),
        "train",
        started,
        model_config=dict(ln.split("=", 1) for ln in cfg.to_lines()),
        resolved_model_config=dict(ln.split("=", 1) for ln in final.to_lines()),
        config_sha256=final.digest(),
        train_spec=dict(ln.split("=", 1) for ln in spec.to_lines()),
        seed=spec.seed,
        threads=spec.threads,
        corpus=str(corpus_path),
        corpus_sha256=_sha256(corpus_path),
        checkpoint=str(out),
        checkpoint_sha256=_sha256(out),
        epoch_losses=result.epoch_losses,
    )
    print(f"trained {len(result.epoch_losses)} epochs; final loss {result.epoch_losses[-1] if result.epoch_losses else float('nan'):.6f}")
    print(f"checkpoint {out}")
    return EXIT_OK


def _load_checkpoint(path: str):
    from .checkpoint import CheckpointError, load

    p = _existing(path, "checkpoint")
    try:
        return p, load(p)
    except (CheckpointError, ConfigError, ValueError) as exc:
        raise RunFailure(f"refusing to use checkpoint {path}: {exc}") from None


def cmd_eval(args) -> int:
    from .evaluate import evaluate

    started = _now()
    ckpt_path, model = _load_checkpoint(args.checkpoint)
    if args.config:
        m_vals, _ = _split_config(_kv(args.config))
        try:
            want = ModelConfig.from_mapping(m_vals, base=model.config)
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
        if want.digest() != model.config.digest():
            raise RunFailure("config hash mismatch between --config and checkpoint; refusing to run")
    corpus_path, corpus = _corpus(args.corpus)
    unknown = sorted({lab for p in corpus for _, _, lab in p.relations} - set(model.labels))
    if unknown:
        raise RunFailure(f"corpus labels not in checkpoint: {', '.join(unknown)}")
    mode = args.mode
    if mode is not None:
        try:
            model.config.replace(pass_mode=mode)
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
    report = evaluate(corpus, model, mode)
    sys.stdout.write(report.to_table())
    if args.metrics:
        Path(args.metrics).write_text(report.to_lines(), encoding="utf-8")
    if args.predictions:
        Path(args.predictions).write_text(report.prediction_dump(), encoding="utf-8")
    manifest = Path(args.manifest) if args.manifest else (
        Path(args.metrics).with_suffix(".manifest.json") if args.metrics else None
    )
    if manifest:
        _write_manifest(
            manifest,
            "eval",
            started,
            checkpoint=str(ckpt_path),
            checkpoint_sha256=_sha256(ckpt_path),
            config_sha256=model.config.digest(),
            seed=model.config.seed,
            mode=report.mode,
            corpus=str(corpus_path),
            corpus_sha256=_sha256(corpus_path),
            relations_per_second=report.relations_per_second,
        )
    return EXIT_OK


def _modes(raw: str) -> list[str]:
    from .bench import BENCH_MODES

    modes = [m.strip() for m in raw.split(",") if m.strip()]
    bad = [m for m in modes if m not in BENCH_MODES]
    if bad or not modes:
        raise UsageError(f"unknown bench mode(s) {bad}; choose from {', '.join(BENCH_MODES)}")
    return modes


def cmd_bench(args) -> int:
    from .bench import BENCH_HEADER, bench_throughput, bench_workload, hardware_descriptor
    from .train import build_model

    started = _now()
    modes = _modes(args.modes)
    if args.repetitions < 1 or args.threads < 1:
        raise UsageError("--repetitions and --threads must be >= 1")
    corpus_path = None
    if args.checkpoint:
        _, model = _load_checkpoint(args.checkpoint)
    else:
        seed = args.seed if args.seed is not None else _default_seed()
        vocab_src = [[f"w{i}" for i in range(64)]]
        from .corpus import AnnotatedParagraph

        fake = [AnnotatedParagraph(vocab_src[0], [(0, 1), (2, 3)], [(0, 1, "R1"), (1, 0, "NA")], "bench")]
        model = build_model(fake, ModelConfig(seed=seed))
    if args.corpus:
        corpus_path, corpus = _corpus(args.corpus)
    else:
        corpus = bench_workload(model, paragraphs=args.paragraphs, n_tokens=args.length, mentions=args.mentions)
    rows = bench_throughput(corpus, model, modes, repetitions=args.repetitions, threads=args.threads,
                            train_time=not args.no_train)
    hw = hardware_descriptor(args.threads)
    print("# " + " ".join(f"{k}={v}" for k, v in hw.items()))
    print(BENCH_HEADER)
    for r in rows:
        print(r.line())
    if args.manifest:
        _write_manifest(
            Path(args.manifest),
            "bench",
            started,
            config_sha256=model.config.digest(),
            seed=model.config.seed,
            threads=args.threads,
            hardware=hw,
            corpus=str(corpus_path) if corpus_path else None,
            corpus_sha256=_sha256(corpus_path) if corpus_path else None,
            rows=[r.line() for r in rows],
        )
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .train import grad_check

    m_vals, _ = _split_config(_kv(args.config))
    if args.variant:
        m_vals["variant"] = args.variant
    if args.mode:
        m_vals["pass_mode"] = args.mode
    if args.head:
        m_vals["head"] = args.head
    try:
        cfg = ModelConfig.from_mapping(m_vals)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    seed = args.seed if args.seed is not None else _default_seed()
    report = grad_check(cfg, seed=seed, eps=args.eps, tolerance=args.tolerance, n_tokens=args.length)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_FAIL


def _parse_mentions(raw: str, n: int) -> list[tuple[int, int]]:
    spans = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            s, e = (int(x) for x in part.split(":"))
        except ValueError:
            raise UsageError(f"bad mention {part!r}; expected start:end") from None
        if not 0 <= s < e <= n:
            raise UsageError(f"mention {part} outside 0..{n}")
        spans.append((s, e))
    return spans


def cmd_inspect_attention(args) -> int:
    k, layers, heads = args.k, args.layers, args.heads
    if args.checkpoint:
        _, model = _load_checkpoint(args.checkpoint)
        cfg = model.config
        k = k if k is not None else cfg.k
        layers = layers if layers is not None else cfg.layers
        heads = heads if heads is not None else cfg.heads
    k = 4 if k is None else k
    layers = 1 if layers is None else layers
    heads = 1 if heads is None else heads
    if k < 1 or layers < 1 or heads < 1:
        raise UsageError("--k, --layers and --heads must be >= 1")
    if args.corpus:
        _, corpus = _corpus(args.corpus)
        if not 0 <= args.paragraph < len(corpus):
            raise UsageError(f"--paragraph {args.paragraph} out of range (corpus has {len(corpus)})")
        p = corpus[args.paragraph]
        n, spans = len(p.tokens), p.mentions
    else:
        if args.length is None:
            raise UsageError("give --corpus or --length")
        if args.length < 1:
            raise UsageError("--length must be >= 1")
        n = args.length
        spans = _parse_mentions(args.mentions or "", n)
    text = render_bias_grid(EntityMask.from_spans(n, spans), k, layers, heads)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mre", description="One-pass multiple-relation extraction toolkit.")
    parser.add_argument("--version", action="version", version=f"mre {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen-data", help="write a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--paragraphs", type=int, default=SyntheticSpec.paragraphs)
    g.add_argument("--mentions", type=int, default=SyntheticSpec.mentions)
    g.add_argument("--labels", type=int, default=SyntheticSpec.labels, help="non-NA relation labels")
    g.add_argument("--seed", type=int, default=None, help="default: $MRE_SEED or 7")
    g.set_defaults(func=cmd_gen_data)

    pp = sub.add_parser("preprocess", help="window-truncate paragraphs around their mentions")
    pp.add_argument("--corpus", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--radius", type=int, default=5)
    pp.set_defaults(func=cmd_preprocess)

    t = sub.add_parser(
        "train",
        help="train a model",
        description=f"Train a model. Variants: {', '.join(VARIANTS)}. Pass modes: {', '.join(PASS_MODES)}.",
    )
    t.add_argument("--corpus")
    t.add_argument("--config", help="key=value file; flags override it")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--mode", choices=PASS_MODES)
    t.add_argument("--head", choices=HEAD_TYPES)
    t.add_argument("--k", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--threads", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--from-manifest", help="rerun exactly the configuration recorded in a train manifest")
    t.add_argument("--out", required=True, help="checkpoint path; manifest and loss curve go alongside")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--mode", choices=PASS_MODES)
    e.add_argument("--config", help="refuse to run unless the checkpoint matches this config")
    e.add_argument("--metrics", help="write metric,domain,value lines here")
    e.add_argument("--predictions", help="write the per-pair prediction dump here")
    e.add_argument("--manifest")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="one-pass vs multi-pass throughput")
    b.add_argument("--checkpoint")
    b.add_argument("--corpus")
    b.add_argument("--modes", default="one-pass,per-pair,posemb-final")
    b.add_argument("--repetitions", type=int, default=5)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--paragraphs", type=int, default=8)
    b.add_argument("--length", type=int, default=64)
    b.add_argument("--mentions", type=int, default=5)
    b.add_argument("--seed", type=int)
    b.add_argument("--no-train", action="store_true", help="skip training-epoch timing")
    b.add_argument("--manifest")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    c.add_argument("--config")
    c.add_argument("--variant", choices=VARIANTS)
    c.add_argument("--mode", choices=PASS_MODES)
    c.add_argument("--head", choices=HEAD_TYPES)
    c.add_argument("--seed", type=int)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--length", type=int, default=12)
    c.set_defaults(func=cmd_grad_check)

    a = sub.add_parser("inspect-attention", help="print which bias vector each attention cell receives")
    a.add_argument("--length", type=int)
    a.add_argument("--mentions", help="comma-separated start:end token spans")
    a.add_argument("--corpus")
    a.add_argument("--paragraph", type=int, default=0)
    a.add_argument("--checkpoint")
    a.add_argument("--k", type=int)
    a.add_argument("--layers", type=int)
    a.add_argument("--heads", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_inspect_attention)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"mre: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RunFailure as exc:
        print(f"mre: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        print(f"mre: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
