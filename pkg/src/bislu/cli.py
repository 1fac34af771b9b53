"""``bislu`` command line: synth, train, eval, predict, gradcheck, defaults."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import compute as C
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, format_config, load_config
from .data import GRAMMARS, SPLIT_FILES, CorpusError, LabelSets, load_splits, parse_corpus, synth_corpus, write_corpus
from .gradcheck import COMPONENTS, run_gradcheck
from .training import TrainConfig, evaluate_model, train

log = logging.getLogger("bislu")

CHECKPOINT_FILE = "model.ckpt"
REPORT_FILE = "report.jsonl"
LOAD_REPORT_FILE = "load_report.json"


class CommandError(Exception):
    """Expected failure; reported as one line on stderr with exit status 1."""


def cmd_synth(args) -> int:
    splits = synth_corpus(args.seed, args.train, args.val, args.test, args.grammar)
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for split, fname in SPLIT_FILES.items():
            write_corpus(out / fname, getattr(splits, split))
    except OSError as exc:
        raise CommandError(f"cannot write corpus to {out}: {exc}") from exc
    print(f"wrote {len(splits.train)}/{len(splits.validation)}/{len(splits.test)} utterances to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    splits, load_report = load_splits(args.data_dir)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / LOAD_REPORT_FILE).write_text(json.dumps(load_report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    report, model, vocab = train(splits, cfg)
    report.write(out / REPORT_FILE)
    save_checkpoint(out / CHECKPOINT_FILE, model, vocab, cfg,
                    {"epoch": report.best_epoch, "validation": report.best_validation})
    print(f"best epoch {report.best_epoch}: " +
          " ".join(f"{k}={report.best_validation[k]:.4f}" for k in
                   ("intent_accuracy", "slot_f1", "sentence_accuracy")))
    print(f"checkpoint written to {out / CHECKPOINT_FILE}")
    return 0


def label_diff(model_labels: LabelSets, data_labels: LabelSets) -> str | None:
    parts = []
    for kind, have, need in (("intents", model_labels.intents, data_labels.intents),
                             ("slots", model_labels.slots, data_labels.slots)):
        missing = sorted(set(need) - set(have))
        if missing:
            parts.append(f"{kind} in data but not in checkpoint: {missing}")
    return "; ".join(parts) or None


def _read_split(path: Path, split: str):
    if path.is_dir():
        if split not in SPLIT_FILES:
            raise CommandError(f"unknown split {split!r}; choose from {sorted(SPLIT_FILES)}")
        path = path / SPLIT_FILES[split]
    return parse_corpus(path)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    corpus = _read_split(Path(args.data), args.split)
    diff = label_diff(ckpt.labels, LabelSets.from_corpus(corpus))
    if diff:
        raise CommandError(f"incompatible label inventory: {diff}")
    pred = ckpt.config.prediction
    if args.threshold is not None:
        pred = dataclasses.replace(pred, threshold=args.threshold)
    if args.no_fallback:
        pred = dataclasses.replace(pred, fallback_argmax=False)
    result = evaluate_model(ckpt.model, ckpt.vocab, corpus, pred)
    if args.json:
        print(json.dumps(result.as_dict(), sort_keys=True))
    else:
        print(result.render())
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    pred = ckpt.config.prediction
    if args.threshold is not None:
        pred = dataclasses.replace(pred, threshold=args.threshold)
    stream = open(args.input, encoding="utf-8") if args.input else sys.stdin
    with stream:
        for lineno, line in enumerate(stream, 1):
            words = line.split()
            if not words:
                log.warning("line %d is empty; skipped", lineno)
                continue
            (out,) = ckpt.model.predict([words], ckpt.vocab, pred)
            record = {
                "text": " ".join(words),
                "intents": list(out["intents"]),
                "intent_probs": out["intent_probs"],
                "slots": [{"start": s.start, "end": s.end, "label": s.label, "score": s.score,
                           "text": " ".join(words[s.start - 1:s.end])} for s in out["slots"]],
            }
            print(json.dumps(record, sort_keys=True), flush=True)
    return 0


def cmd_gradcheck(args) -> int:
    names = COMPONENTS if args.component == "all" else (args.component,)
    ok = True
    for name in names:
        res = run_gradcheck(name, args.trials, args.seed)
        print(res.render(), f"[{res.seconds:.1f}s]")
        ok &= res.passed
    return 0 if ok else 1


def cmd_defaults(args) -> int:
    sys.stdout.write(format_config(TrainConfig()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bislu", description="Joint multi-intent detection and span slot filling.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--train", type=int, default=500)
    s.add_argument("--val", type=int, default=100)
    s.add_argument("--test", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grammar", default="compact", choices=sorted(GRAMMARS))
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train and keep the best validation checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a corpus split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="corpus directory or a single corpus file")
    s.add_argument("--split", default="test")
    s.add_argument("--threshold", type=float, default=None)
    s.add_argument("--no-fallback", action="store_true", help="allow empty intent sets")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="decode whitespace-tokenized lines from stdin")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--threshold", type=float, default=None)
    s.add_argument("--input", default=None, help="read from this file instead of stdin")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--component", required=True, choices=COMPONENTS + ("all",))
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("defaults", help="print the default config file")
    s.set_defaults(func=cmd_defaults)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, CorpusError, CheckpointError, C.NonFiniteError,
            FileNotFoundError, ValueError) as exc:
        print(f"bislu {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
