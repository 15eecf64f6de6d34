"""Command line: gen-data, train, eval, generate, inspect.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .config import RunConfig
from .corpus import (
    MODES,
    SyntheticConfig,
    Utterance,
    generate_synthetic,
    load_corpus,
    save_corpus,
    serialize_history,
    split_corpus,
)
from .errors import ConfigError, DataError, NumericalError
from .estimator import TopicRefineGenerator
from .metrics import DEFAULT_BUCKETS, evaluate_records
from .net import load_checkpoint
from .pipeline import ThreePassOutput, generation_records, normalize_variant, strip_eos
from .vocab import tokenize

log = logging.getLogger("topicrefine")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------- helpers


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _checkpoints(run: Path) -> list[Path]:
    return sorted(run.glob("checkpoint-*.manifest.json"))


def _stem(manifest: Path) -> Path:
    return manifest.with_name(manifest.name[: -len(".manifest.json")])


def _latest_checkpoint(run: Path) -> Path:
    found = _checkpoints(run)
    if not found:
        raise UsageError(f"no checkpoint in {run}")
    return _stem(found[-1])


def _parse_edges(text: str | None):
    if not text:
        return DEFAULT_BUCKETS
    return tuple(math.inf if t.strip() in ("inf", "∞") else float(t) for t in text.split(","))


def _load_split(cfg: RunConfig, split: str):
    if not cfg.corpus or not Path(cfg.corpus).is_file():
        raise UsageError(f"corpus file not found: {cfg.corpus!r}")
    corpus = load_corpus(cfg.corpus, pretokenized=cfg.pretokenized)
    train, test = split_corpus(corpus, cfg.test_fraction, cfg.seed)
    return {"train": train, "test": test, "all": corpus}[split]


# ---------------------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    cfg = SyntheticConfig(
        n_dialogues=args.dialogues, turns=args.turns, vocab_size=args.vocab_size,
        n_topics=args.topics, stickiness=args.stickiness, seed=args.seed, mode=args.mode,
    )
    corpus = generate_synthetic(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out)
    print(json.dumps(corpus.stats()))
    return EXIT_OK


# ---------------------------------------------------------------------------- train

_TRAIN_FLAGS = {
    "steps": "steps", "batch_size": "batch_size", "lr": "lr", "warmup": "warmup_steps",
    "weight_decay": "weight_decay", "d_model": "d_model", "layers": "n_layers",
    "heads": "n_heads", "d_ff": "d_ff", "max_context": "max_context",
    "max_decode": "max_decode", "max_positions": "max_positions", "ablation": "ablation",
    "classifier": "classifier", "refine_context": "refine_context",
    "refine_r1_source": "refine_r1_source", "mode": "mode", "test_fraction": "test_fraction",
    "seed": "seed", "dtype": "dtype", "checkpoint_every": "checkpoint_every",
    "threshold": "threshold", "min_count": "min_count", "variant": "variant",
}


def _run_config_from_args(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.corpus:
        cfg.corpus = args.corpus
    for flag, name in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, name, value)
    if args.no_roles:
        cfg.use_roles = False
    if args.pretokenized:
        cfg.pretokenized = True
    cfg.ablation = cfg.ablation.replace("-", "_")
    if cfg.ablation == "stage_one":
        cfg.ablation = "stage_one_only"
    cfg.classifier = cfg.classifier.replace("-", "_")
    cfg.variant = cfg.variant.replace("-", "_")
    if cfg.classifier == "separate_bert" and cfg.variant == "stage_two_gpt":
        cfg.variant = "stage_two_bert"
    return cfg


def cmd_train(args) -> int:
    cfg = _run_config_from_args(args)
    if not cfg.corpus or not Path(cfg.corpus).is_file():
        raise UsageError(f"corpus file not found: {cfg.corpus!r}")
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    if not args.resume:
        cfg.save(run / "config.json")
    train = _load_split(cfg, "train")

    est = TopicRefineGenerator(**cfg.estimator_params())
    log_path = run / "train_log.jsonl"
    start = 0
    if args.resume:
        _, manifest = load_checkpoint(args.resume)
        start = int(manifest["meta"]["step"])
        kept = [r for r in _read_jsonl(log_path) if r["step"] <= start] if log_path.exists() \
            else []
        _write_jsonl(log_path, kept)
    else:
        log_path.write_text("")

    fh = open(log_path, "a", encoding="utf-8")

    def on_step(out):
        fh.write(json.dumps(out.to_log()) + "\n")
        if cfg.checkpoint_every and out.step % cfg.checkpoint_every == 0:
            fh.flush()
            est.save_state(run / f"checkpoint-{out.step:07d}")

    try:
        if args.resume:
            est.resume(train, args.resume, callback=on_step)
        else:
            est.fit(train, callback=on_step)
    finally:
        fh.close()
    est.vocab_.save(run / "vocab.json")
    est.save_state(run / f"checkpoint-{est.opt_.step:07d}")
    last = est.history_[-1].to_log() if est.history_ else {"step": est.opt_.step}
    print(json.dumps(last))
    return EXIT_OK


# ---------------------------------------------------------------------------- eval


def _oracle_outputs(samples):
    outs = []
    for s in samples:
        gold = sorted(s.gold_topics)
        outs.append(ThreePassOutput(list(s.response_ids), None, gold, list(s.response_ids)))
    return outs


def cmd_eval(args) -> int:
    edges = _parse_edges(args.buckets)
    if args.rescore:
        gen_path = Path(args.rescore)
        run = Path(args.run) if args.run else gen_path.parent
        vocab_data = json.loads((run / "vocab.json").read_text())
        topics = [vocab_data["topics"][str(i)] for i in range(len(vocab_data["topics"]))]
        rows = _read_jsonl(gen_path)
        cfg = RunConfig.load(run / "config.json")
        mode = json.loads((run / "report.json").read_text())["mode"] \
            if (run / "report.json").exists() else (cfg.mode or _corpus_mode(cfg))
        variant = rows[0]["variant"] if rows else cfg.variant
        report = evaluate_records(rows, topics, mode, variant, bucket_edges=edges)
        out = Path(args.out) if args.out else gen_path.parent
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "report.txt").write_text(report.to_text())
        print(report.to_text(), end="")
        return EXIT_OK

    if not args.run:
        raise UsageError("eval needs --run (or --rescore)")
    run = Path(args.run)
    cfg = RunConfig.load(run / "config.json")
    stem = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(run)
    est = TopicRefineGenerator.from_checkpoint(stem)
    variant = normalize_variant(args.variant or cfg.variant)
    corpus = _load_split(cfg, args.split)
    samples = est.samples(corpus)
    if not samples:
        raise DataError(f"the {args.split} split has no system turns to evaluate")
    if args.oracle_gold:
        outputs = _oracle_outputs(samples)
        variant_name = "oracle_gold"
    else:
        outputs = est.predict_three_pass(samples, variant=variant)
        variant_name = variant
    rows = generation_records(samples, outputs, est.vocab_, variant_name)
    report = evaluate_records(rows, est.vocab_.topics, corpus.mode, variant_name,
                              bucket_edges=edges)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "generations.jsonl", rows)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def _corpus_mode(cfg: RunConfig) -> str:
    return load_corpus(cfg.corpus, pretokenized=cfg.pretokenized).mode


# ---------------------------------------------------------------------------- generate


def _parse_turn_line(line: str, topic_index: dict) -> Utterance:
    """``A: some words || topic one; topic two``"""
    body, _, topic_part = line.partition("||")
    speaker, sep, text = body.partition(":")
    speaker = speaker.strip()
    if not sep or speaker not in ("A", "B"):
        raise DataError(f"expected 'A: text' or 'B: text', got {line!r}")
    ids = set()
    for t in filter(None, (x.strip() for x in topic_part.split(";"))):
        if t not in topic_index:
            raise DataError(f"unknown topic {t!r}")
        ids.add(topic_index[t])
    return Utterance(tuple(tokenize(text)), speaker, frozenset(ids))


def _read_history(args, vocab) -> tuple[list[Utterance], list[tuple[str, ...]]]:
    topic_index = {s: i for i, s in enumerate(vocab.topics)}
    if args.history:
        data = json.loads(Path(args.history).read_text(encoding="utf-8"))
        turns = data["turns"] if isinstance(data, dict) else data
        profile = [tuple(tokenize(s)) for s in (data.get("profile") or [])] \
            if isinstance(data, dict) else []
        utts = []
        for t in turns:
            bad = [i for i in t.get("topics", []) if not 0 <= i < len(vocab.topics)]
            if bad:
                raise DataError(f"unknown topic index {bad[0]}")
            utts.append(Utterance(tuple(tokenize(t["text"])), t["speaker"],
                                  frozenset(t.get("topics", []))))
        return utts, profile
    lines = [ln for ln in sys.stdin.read().splitlines() if ln.strip()]
    return [_parse_turn_line(ln, topic_index) for ln in lines], []


def cmd_generate(args) -> int:
    run = Path(args.run)
    cfg = RunConfig.load(run / "config.json")
    stem = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(run)
    est = TopicRefineGenerator.from_checkpoint(stem)
    vocab = est.vocab_
    utts, profile = _read_history(args, vocab)
    if not utts:
        raise DataError("empty history")
    history = serialize_history(utts, vocab, cfg.max_context, profile, cfg.use_roles)
    out = est.predict_three_pass([history], variant=args.variant or cfg.variant)[0]
    result = {
        "coarse": " ".join(vocab.decode(strip_eos(out.coarse_ids, vocab))),
        "topics": [vocab.topics[t] for t in out.predicted_topics],
        "refined": None if out.refined_ids is None
        else " ".join(vocab.decode(strip_eos(out.refined_ids, vocab))),
    }
    if args.json:
        print(json.dumps(result, ensure_ascii=False))
    else:
        print(f"coarse:  {result['coarse']}")
        print(f"topics:  {'; '.join(result['topics'])}")
        if result["refined"] is not None:
            print(f"refined: {result['refined']}")
    return EXIT_OK


# ---------------------------------------------------------------------------- inspect


def cmd_inspect(args) -> int:
    path = Path(args.checkpoint)
    stem = _stem(path) if path.name.endswith(".manifest.json") else path
    manifest = json.loads(stem.with_name(stem.name + ".manifest.json").read_text())
    params = [e for e in manifest["tensors"] if not e["name"].startswith("__opt_")]
    n = sum(math.prod(e["shape"]) for e in params)
    print(f"step: {manifest['meta'].get('step')}")
    print(f"mode: {manifest['meta'].get('mode')}")
    print(f"parameters: {n} in {len(params)} tensors")
    model = manifest["config"]["model"]
    print("model: " + ", ".join(f"{k}={model[k]}" for k in sorted(model)))
    if args.tensors:
        for e in params:
            print(f"  {e['name']:<24} {str(tuple(e['shape'])):<14} {e['dtype']}")
    return EXIT_OK


# ---------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topicrefine", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic corpus")
    g.add_argument("--dialogues", type=int, default=32)
    g.add_argument("--turns", type=int, default=4)
    g.add_argument("--vocab-size", type=int, default=64)
    g.add_argument("--topics", type=int, default=8)
    g.add_argument("--stickiness", type=float, default=0.7)
    g.add_argument("--mode", choices=MODES, default="multi-label")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", default="corpus.json")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the joint model")
    t.add_argument("--corpus")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--config", help="RunConfig JSON; flags override it")
    t.add_argument("--resume", help="checkpoint stem to continue from")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--d-model", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--d-ff", type=int)
    t.add_argument("--max-context", type=int)
    t.add_argument("--max-decode", type=int)
    t.add_argument("--max-positions", type=int)
    t.add_argument("--ablation", choices=["full", "gpt2dh", "stage-one"])
    t.add_argument("--classifier", choices=["shared-gpt", "separate-bert"])
    t.add_argument("--refine-context", choices=["full", "response_only"])
    t.add_argument("--refine-r1-source", choices=["argmax_teacher_forced", "gold"])
    t.add_argument("--variant", choices=["stage-one", "stage-two-gpt", "stage-two-bert"])
    t.add_argument("--mode", choices=MODES, help="refuse corpora of another mode")
    t.add_argument("--test-fraction", type=float)
    t.add_argument("--threshold", type=float)
    t.add_argument("--min-count", type=int)
    t.add_argument("--no-roles", action="store_true")
    t.add_argument("--pretokenized", action="store_true")
    t.add_argument("--dtype", choices=["float64", "float32"])
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="three-pass generation and metrics")
    e.add_argument("--run")
    e.add_argument("--checkpoint")
    e.add_argument("--variant", choices=["stage-one", "stage-two-gpt", "stage-two-bert"])
    e.add_argument("--split", choices=["test", "train", "all"], default="test")
    e.add_argument("--oracle-gold", action="store_true",
                   help="score gold responses against themselves")
    e.add_argument("--rescore", help="recompute the report from a generations.jsonl")
    e.add_argument("--buckets", help="comma-separated gold-length edges, e.g. 0,10,20,inf")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    gen = sub.add_parser("generate", help="respond to one dialogue history")
    gen.add_argument("--run", required=True)
    gen.add_argument("--checkpoint")
    gen.add_argument("--history", help="JSON file; otherwise read 'A: text || topic' lines")
    gen.add_argument("--variant", choices=["stage-one", "stage-two-gpt", "stage-two-bert"])
    gen.add_argument("--json", action="store_true")
    gen.set_defaults(func=cmd_generate)

    i = sub.add_parser("inspect", help="summarize a checkpoint")
    i.add_argument("checkpoint")
    i.add_argument("--tensors", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(json.dumps(exc.diagnostics, indent=1), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
