"""Operator entry points: build-kg, synth, train, eval, chat, inspect.

Exit codes: 0 success, 1 data/validation error, 2 usage, 3 checkpoint or
graph mismatch, 4 empty evaluation corpus, 5 training aborted on a
non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import corpus as corpus_mod
from . import evalrun, kgstore, trainer
from .model import KgBinding

DATA_DIR_ENV = "MEDIALOG_DATA_DIR"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISMATCH = 3
EXIT_EMPTY = 4
EXIT_ABORTED = 5


def _resolve(value: str | None, default_name: str, kind: str) -> Path:
    if value is not None:
        return Path(value)
    base = os.environ.get(DATA_DIR_ENV)
    if base:
        return Path(base) / default_name
    raise SystemExit_with(EXIT_USAGE, f"missing --{kind} and {DATA_DIR_ENV} is not set")


class SystemExit_with(SystemExit):
    def __init__(self, code: int, message: str):
        print(f"error: {message}", file=sys.stderr)
        super().__init__(code)


def _load_kg(path: Path) -> kgstore.KnowledgeGraph:
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return kgstore.KnowledgeGraph.from_json(text)
    import io

    triplets = kgstore.load_triplets(io.StringIO(text))
    return kgstore.build_global_graph(triplets)


def _load_corpus(path: Path) -> list[corpus_mod.DialogueSession]:
    with open(path, encoding="utf-8") as fh:
        return corpus_mod.load_corpus(fh)


def _read_config(path: Path) -> dict:
    """JSON document, or flat key=value lines with dotted model.* keys."""
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return json.loads(text)
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target = out
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = value
    return out


def cmd_build_kg(args) -> int:
    triplets_path = _resolve(args.triplets, "triplets.tsv", "triplets")
    out_path = _resolve(args.out, "kg.json", "out")
    with open(triplets_path, encoding="utf-8") as fh:
        triplets = kgstore.load_triplets(fh)
    kg = kgstore.build_global_graph(triplets)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(kg.to_json(), encoding="utf-8")
    print(f"entities: {len(kg)}")
    print(f"edges: {len(kg.edges)}")
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    kg = _load_kg(_resolve(args.kg, "kg.json", "kg"))
    sessions = corpus_mod.synth_corpus(
        kg, args.seed, sessions=args.sessions, turns_per_session=args.turns,
        symptom_rate=args.symptom_rate,
    )
    out_path = _resolve(args.out, "corpus.jsonl", "out")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        corpus_mod.serialize_corpus(sessions, fh)
    print(f"wrote {len(sessions)} sessions to {out_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _read_config(_resolve(args.config, "train.json", "config"))
    model_params = config.pop("model", {})
    run = trainer.RunConfig(**config.get("run", config if "run" not in config else {}))
    sessions = _load_corpus(_resolve(args.corpus, "corpus.jsonl", "corpus"))
    kg = _load_kg(_resolve(args.kg, "kg.json", "kg"))
    out_dir = _resolve(args.out, "run", "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    result = trainer.train(sessions, kg, run, model_params=model_params, out_dir=out_dir)
    with open(out_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for entry in result.metrics_log:
            fh.write(json.dumps(entry) + "\n")
    if result.aborted:
        print("training aborted on non-finite loss; last good checkpoint retained",
              file=sys.stderr)
        return EXIT_ABORTED
    print(f"final checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _load_bundle(args):
    path = _resolve(args.checkpoint, "checkpoint-final.pt", "checkpoint")
    bundle = ckpt.load(path)
    kg = _load_kg(_resolve(args.kg, "kg.json", "kg"))
    ckpt.check_graph_compatibility(bundle, kg)
    return bundle, KgBinding(kg, bundle.vocab)


def cmd_eval(args) -> int:
    try:
        bundle, binding = _load_bundle(args)
    except ckpt.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    sessions = _load_corpus(_resolve(args.corpus, "corpus.jsonl", "corpus"))
    if not sessions:
        print("error: evaluation corpus is empty", file=sys.stderr)
        return EXIT_EMPTY
    report = evalrun.evaluate_model(bundle.model, binding, sessions)
    print(json.dumps(report.to_dict(), indent=2))
    if args.per_session_csv:
        _write_per_session_csv(Path(args.per_session_csv), bundle, binding, sessions)
    return EXIT_OK


def _write_per_session_csv(path, bundle, binding, sessions) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["session_id", "b2", "r2"])
        for session in sessions:
            hyps, refs = evalrun.generate_responses(bundle.model, binding, [session])
            from . import evalkit

            writer.writerow([
                session.session_id,
                f"{evalkit.bleu2(hyps, refs):.6f}",
                f"{evalkit.rouge2(hyps, refs):.6f}",
            ])


def cmd_chat(args) -> int:
    try:
        bundle, binding = _load_bundle(args)
    except ckpt.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    model, vocab = bundle.model, bundle.vocab
    carried_summary = None
    carried_state = None
    prev_r: list[int] = []
    print("patient> ", end="", flush=True)
    for line in sys.stdin:
        text = line.strip()
        if text == "/quit":
            return EXIT_OK
        if text == "/reset":
            carried_summary, carried_state, prev_r = None, None, []
            print("(reset)")
            print("patient> ", end="", flush=True)
            continue
        if not text:
            print("patient> ", end="", flush=True)
            continue
        import torch

        with torch.no_grad():
            u_ids = vocab.encode(corpus_mod.tokenize(text))
            ctx = model.context_encode(prev_r, u_ids, carried_summary, carried_state)
            inf = model.infer_turn(ctx, binding)
        state_tokens = [t for t in vocab.decode(inf.state_ids) if t != corpus_mod.NULL_TOKEN]
        kw_tokens = [t for t in vocab.decode(inf.keyword_ids) if t != corpus_mod.NULL_TOKEN]
        response = " ".join(vocab.decode(inf.response_ids))
        print(f"state    | {' '.join(state_tokens) or '(empty)'}")
        print(f"action   | {corpus_mod.ACTION_CATEGORIES[inf.category]}: "
              f"{' '.join(kw_tokens) or '(none)'}")
        for path in sorted(inf.trace, key=lambda p: -p.weight)[:3]:
            print(f"reasoning| {path.render()}")
        print(f"doctor   | {response}")
        carried_summary = inf.carried_summary
        carried_state = inf.carried_state
        prev_r = inf.response_ids
        print("patient> ", end="", flush=True)
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = _resolve(args.checkpoint, "checkpoint-final.pt", "checkpoint")
    try:
        bundle = ckpt.load(path)
    except ckpt.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    doc = {
        "step": bundle.step,
        "model_config": bundle.config.to_dict(),
        "run_config": bundle.run_config,
        "relations": bundle.relation_names,
        "vocab_size": len(bundle.vocab),
        "parameters": sum(p.numel() for p in bundle.model.parameters()),
    }
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medialog",
        description="Latent state/action dialogue engine with graph reasoning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-kg", help="build a knowledge graph from a triplet TSV")
    p.add_argument("--triplets")
    p.add_argument("--out")
    p.set_defaults(func=cmd_build_kg)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--kg")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--sessions", type=int, required=True)
    p.add_argument("--turns", type=int, default=3)
    p.add_argument("--symptom-rate", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--corpus")
    p.add_argument("--kg")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--kg")
    p.add_argument("--per-session-csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("chat", help="interactive consultation loop")
    p.add_argument("--checkpoint")
    p.add_argument("--kg")
    p.set_defaults(func=cmd_chat)

    p = sub.add_parser("inspect", help="print checkpoint metadata")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit_with as exc:
        return exc.code
    except (kgstore.TripletParseError, kgstore.GraphValidationError,
            corpus_mod.CorpusFormatError, corpus_mod.SynthesisError,
            ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
