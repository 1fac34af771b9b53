"""Intent accuracy, slot F1 and sentence-level semantic frame accuracy."""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from .data import AnnotatedUtterance, Span


@dataclass(frozen=True)
class EvalResult:
    intent_accuracy: float
    slot_precision: float
    slot_recall: float
    slot_f1: float
    sentence_accuracy: float
    tp: int
    fp: int
    fn: int
    utterances: int

    def as_dict(self) -> dict:
        return asdict(self)

    def render(self) -> str:
        rows = [("intent_acc", self.intent_accuracy), ("slot_p", self.slot_precision),
                ("slot_r", self.slot_recall), ("slot_f1", self.slot_f1),
                ("sent_acc", self.sentence_accuracy)]
        lines = [f"{name:<12}{value:>8.4f}" for name, value in rows]
        lines.append(f"{'spans':<12}tp={self.tp} fp={self.fp} fn={self.fn}")
        lines.append(f"{'utterances':<12}{self.utterances:>8d}")
        return "\n".join(lines)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def evaluate(preds: Sequence[tuple[Iterable[str], Iterable[Span]]],
             golds: Sequence[AnnotatedUtterance]) -> EvalResult:
    """Score ``(intent set, slot spans)`` predictions against gold utterances.

    Intent accuracy needs the exact intent set.  Slot scores are micro-averaged
    exact matches on ``(start, end, label)``, matched as multisets.  A sentence is
    correct when both the intent set and the full span multiset are exact.
    """
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} gold utterances")
    tp = fp = fn = intent_ok = sent_ok = 0
    for (p_intents, p_spans), gold in zip(preds, golds):
        p_spans = Counter((int(s), int(e), str(l)) for s, e, l in p_spans)
        g_spans = Counter(gold.spans)
        hit = sum((p_spans & g_spans).values())
        tp += hit
        fp += sum(p_spans.values()) - hit
        fn += sum(g_spans.values()) - hit
        i_ok = set(p_intents) == set(gold.intents)
        intent_ok += i_ok
        sent_ok += i_ok and p_spans == g_spans
    n = len(golds)
    precision, recall = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    return EvalResult(
        intent_accuracy=_ratio(intent_ok, n),
        slot_precision=precision,
        slot_recall=recall,
        slot_f1=_ratio(2 * precision * recall, precision + recall),
        sentence_accuracy=_ratio(sent_ok, n),
        tp=tp, fp=fp, fn=fn, utterances=n,
    )
