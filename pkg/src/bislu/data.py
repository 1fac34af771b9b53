"""Multi-intent SLU corpora: the MixATIS-style text format, BIO/span conversion,
and a seeded template grammar for desk-scale experiments."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

NON_SLOT = "O"
INTENT_SEP = "#"

Span = tuple[int, int, str]


class CorpusError(ValueError):
    """Malformed corpus content; message carries the offending line number."""


@dataclass(frozen=True)
class AnnotatedUtterance:
    """Words, an ordered tuple of distinct intents, and 1-based inclusive spans."""

    words: tuple[str, ...]
    intents: tuple[str, ...]
    spans: tuple[Span, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        object.__setattr__(self, "intents", tuple(self.intents))
        object.__setattr__(self, "spans", tuple(sorted((int(s), int(e), str(l)) for s, e, l in self.spans)))
        if not self.words:
            raise CorpusError("utterance has no words")
        if not self.intents or len(set(self.intents)) != len(self.intents):
            raise CorpusError(f"intent list must be non-empty and unique: {self.intents}")
        check_spans(self.spans, len(self.words))

    @property
    def n(self) -> int:
        return len(self.words)

    @property
    def intent_set(self) -> frozenset[str]:
        return frozenset(self.intents)

    @property
    def text(self) -> str:
        return " ".join(self.words)


def check_spans(spans: Sequence[Span], n: int) -> None:
    last_end = 0
    for start, end, label in sorted(spans):
        if not 1 <= start <= end <= n:
            raise CorpusError(f"span ({start}, {end}, {label}) outside [1, {n}]")
        if start <= last_end:
            raise CorpusError(f"overlapping span ({start}, {end}, {label})")
        if label == NON_SLOT:
            raise CorpusError("span cannot carry the non-slot label")
        last_end = end


@dataclass(frozen=True)
class LabelSets:
    """Intent labels, and slot labels with the non-slot class appended last."""

    intents: tuple[str, ...]
    slots: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.intents)) != len(self.intents):
            raise ValueError("duplicate intent labels")
        if NON_SLOT in self.slots or len(set(self.slots)) != len(self.slots):
            raise ValueError("slot labels must be unique and exclude the non-slot label")

    @property
    def num_intents(self) -> int:
        return len(self.intents)

    @property
    def num_slot_classes(self) -> int:
        return len(self.slots) + 1

    @property
    def non_slot_index(self) -> int:
        return len(self.slots)

    def slot_classes(self) -> tuple[str, ...]:
        return self.slots + (NON_SLOT,)

    def intent_index(self, label: str) -> int:
        return self.intents.index(label)

    def slot_index(self, label: str) -> int:
        return self.slots.index(label) if label != NON_SLOT else self.non_slot_index

    @classmethod
    def from_corpus(cls, corpus: Iterable[AnnotatedUtterance]) -> "LabelSets":
        intents, slots = set(), set()
        for u in corpus:
            intents.update(u.intents)
            slots.update(label for _, _, label in u.spans)
        return cls(tuple(sorted(intents)), tuple(sorted(slots)))

    def check_covers(self, corpus: Iterable[AnnotatedUtterance], split: str = "corpus") -> None:
        other = LabelSets.from_corpus(corpus)
        unknown_i = sorted(set(other.intents) - set(self.intents))
        unknown_s = sorted(set(other.slots) - set(self.slots))
        if unknown_i or unknown_s:
            raise CorpusError(f"{split} has labels unseen in training: intents={unknown_i} slots={unknown_s}")


@dataclass
class ParseReport:
    utterances: int = 0
    repaired_inside_tags: int = 0
    multi_intent: int = 0

    def as_dict(self) -> dict:
        return {"utterances": self.utterances, "repaired_inside_tags": self.repaired_inside_tags,
                "multi_intent": self.multi_intent}


@dataclass
class DatasetSplits:
    train: list[AnnotatedUtterance]
    validation: list[AnnotatedUtterance]
    test: list[AnnotatedUtterance]
    labels: LabelSets = field(init=False)

    def __post_init__(self):
        self.labels = LabelSets.from_corpus(self.train)
        self.labels.check_covers(self.validation, "validation")
        self.labels.check_covers(self.test, "test")


# -- BIO <-> spans ---------------------------------------------------------------
def bio_to_spans(tags: Sequence[str], report: ParseReport | None = None) -> list[Span]:
    """Decode BIO tags; an ``I-X`` that does not continue an ``X`` span opens one."""
    spans: list[Span] = []
    cur: list | None = None
    for i, tag in enumerate(tags, start=1):
        if tag == NON_SLOT:
            cur = None
            continue
        prefix, _, label = tag.partition("-")
        if prefix not in ("B", "I") or not label:
            raise CorpusError(f"bad BIO tag {tag!r}")
        if prefix == "I" and cur is not None and cur[2] == label:
            cur[1] = i
            continue
        if prefix == "I" and report is not None:
            report.repaired_inside_tags += 1
        cur = [i, i, label]
        spans.append(cur)  # type: ignore[arg-type]
    return [tuple(s) for s in spans]  # type: ignore[misc]


def spans_to_bio(u: AnnotatedUtterance) -> list[str]:
    check_spans(u.spans, u.n)
    tags = [NON_SLOT] * u.n
    for start, end, label in u.spans:
        tags[start - 1] = f"B-{label}"
        for i in range(start, end):
            tags[i] = f"I-{label}"
    return tags


# -- file format -------------------------------------------------------------------
def parse_text(text: str, report: ParseReport | None = None, source: str = "<text>") -> list[AnnotatedUtterance]:
    """Parse blocks of ``token TAG`` lines closed by one ``intent1#intent2`` line."""
    out: list[AnnotatedUtterance] = []
    block: list[tuple[int, list[str]]] = []
    lines = text.splitlines()

    def flush(lineno: int):
        if not block:
            return
        *tokens, (intent_no, intent_fields) = block
        if len(intent_fields) != 1:
            raise CorpusError(f"{source}:{intent_no}: block must end with a single intent line")
        if not tokens:
            raise CorpusError(f"{source}:{intent_no}: block has zero tokens")
        for no, fields in tokens:
            if len(fields) != 2:
                raise CorpusError(f"{source}:{no}: expected 'token TAG', got {' '.join(fields)!r}")
        intents = [x for x in intent_fields[0].split(INTENT_SEP) if x]
        try:
            spans = bio_to_spans([f[1] for _, f in tokens], report)
            u = AnnotatedUtterance(tuple(f[0] for _, f in tokens), tuple(dict.fromkeys(intents)), tuple(spans))
        except CorpusError as e:
            raise CorpusError(f"{source}:{tokens[0][0]}: {e}") from None
        out.append(u)
        if report is not None:
            report.utterances += 1
            report.multi_intent += len(u.intents) > 1
        block.clear()

    for lineno, line in enumerate(lines, start=1):
        fields = line.split()
        if not fields:
            flush(lineno)
            continue
        block.append((lineno, fields))
    flush(len(lines) + 1)
    return out


def parse_corpus(path, report: ParseReport | None = None) -> list[AnnotatedUtterance]:
    path = Path(path)
    corpus = parse_text(path.read_text(encoding="utf-8"), report, source=str(path))
    if report is not None and report.repaired_inside_tags:
        log.warning("%s: repaired %d ill-formed I- tags", path, report.repaired_inside_tags)
    return corpus


def format_corpus(corpus: Iterable[AnnotatedUtterance]) -> str:
    blocks = []
    for u in corpus:
        lines = [f"{w} {t}" for w, t in zip(u.words, spans_to_bio(u))]
        lines.append(INTENT_SEP.join(u.intents))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def write_corpus(path, corpus: Iterable[AnnotatedUtterance]) -> None:
    Path(path).write_text(format_corpus(corpus), encoding="utf-8")


SPLIT_FILES = {"train": "train.txt", "validation": "dev.txt", "test": "test.txt"}


def load_splits(data_dir) -> tuple[DatasetSplits, dict]:
    data_dir = Path(data_dir)
    reports, parts = {}, {}
    for split, fname in SPLIT_FILES.items():
        rep = ParseReport()
        parts[split] = parse_corpus(data_dir / fname, rep)
        reports[split] = rep.as_dict()
    return DatasetSplits(parts["train"], parts["validation"], parts["test"]), reports


# -- synthetic corpus ------------------------------------------------------------------
INTENT_COUNT_PROPORTIONS = (0.3, 0.5, 0.2)

SLOT_VALUES: dict[str, list[str]] = {
    "city": ["atlanta", "boston", "denver", "dallas", "washington", "new york",
             "san francisco", "pittsburgh", "baltimore", "seattle"],
    "state_code": ["dc", "ga", "ma", "co"],
    "airline_name": ["delta", "united", "american airlines", "us air", "continental"],
    "cost_relative": ["cheapest", "lowest", "most expensive"],
    "round_trip": ["round trip", "one way"],
    "depart_date.day_name": ["monday", "tuesday", "wednesday", "friday", "sunday"],
    "depart_time.period_of_day": ["morning", "afternoon", "evening"],
    "aircraft_code": ["737", "m80", "dc10", "767"],
    "fare_basis_code": ["qx", "fn", "yn", "h"],
    "meal": ["breakfast", "dinner", "lunch", "snacks"],
}

# {slot} or {slot:values-key}
VARIED_TEMPLATES: dict[str, list[str]] = {
    "atis_flight": [
        "show me flights from {fromloc.city_name:city} to {toloc.city_name:city}",
        "i want to fly from {fromloc.city_name:city} to {toloc.city_name:city} on {depart_date.day_name}",
        "list {depart_time.period_of_day} flights to {toloc.city_name:city}",
    ],
    "atis_airfare": [
        "show the {cost_relative} {round_trip} tickets from {fromloc.city_name:city} to {toloc.city_name:city}",
        "what is the fare from {fromloc.city_name:city} to {toloc.city_name:city} {toloc.state_code:state_code}",
        "how much is a {round_trip} ticket to {toloc.city_name:city}",
    ],
    "atis_airline": [
        "which airlines fly from {fromloc.city_name:city} to {toloc.city_name:city}",
        "what airlines go to {toloc.city_name:city}",
    ],
    "atis_ground_service": [
        "what ground transportation is available in {city_name:city}",
        "is there a limousine service in {city_name:city}",
    ],
    "atis_abbreviation": [
        "what does fare code {fare_basis_code} mean",
        "explain restriction {fare_basis_code}",
    ],
    "atis_aircraft": [
        "what type of aircraft is {aircraft_code}",
        "what kind of plane does {airline_name} use",
    ],
    "atis_meal": [
        "what {meal} is served on {airline_name} flights",
    ],
    "atis_quantity": [
        "how many flights does {airline_name} have to {toloc.city_name:city}",
    ],
}

# One carrier phrase per intent: small enough to learn from 50 utterances.
COMPACT_TEMPLATES = {intent: forms[:1] for intent, forms in VARIED_TEMPLATES.items()}
GRAMMARS = {"compact": COMPACT_TEMPLATES, "varied": VARIED_TEMPLATES}


def _render(template: str, gen: np.random.Generator) -> tuple[list[str], list[Span]]:
    words: list[str] = []
    spans: list[Span] = []
    for piece in template.split():
        if piece.startswith("{") and piece.endswith("}"):
            slot, _, key = piece[1:-1].partition(":")
            values = SLOT_VALUES[key or slot]
            value = values[gen.integers(len(values))].split()
            spans.append((len(words) + 1, len(words) + len(value), slot))
            words.extend(value)
        else:
            words.append(piece)
    return words, spans


def _compose(templates: dict[str, list[str]], template_ids: Sequence[tuple[str, int]],
             gen) -> AnnotatedUtterance:
    words: list[str] = []
    spans: list[Span] = []
    for k, (intent, t) in enumerate(template_ids):
        if k:
            words.append("and")
        w, s = _render(templates[intent][t], gen)
        spans.extend((a + len(words), b + len(words), lab) for a, b, lab in s)
        words.extend(w)
    return AnnotatedUtterance(tuple(words), tuple(i for i, _ in template_ids), tuple(spans))


def stratified_counts(n: int, proportions: Sequence[float]) -> list[int]:
    """Largest-remainder allocation of ``n`` items to ``proportions``."""
    raw = np.asarray(proportions) * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def synth_corpus(seed: int, n_train: int, n_val: int, n_test: int,
                 grammar: str = "compact") -> DatasetSplits:
    """Seeded multi-intent corpus with 1/2/3-intent utterances in 0.3/0.5/0.2 proportion.

    Utterances are unique across all three splits.  The training split is built
    first and visits every template early so that its label inventory covers the
    grammar (given at least ~10 training utterances).  ``grammar`` names an entry
    of ``GRAMMARS``.
    """
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("split sizes must be >= 1")
    if grammar not in GRAMMARS:
        raise ValueError(f"unknown grammar {grammar!r}; choose from {sorted(GRAMMARS)}")
    templates = GRAMMARS[grammar]
    gen = np.random.default_rng(seed)
    all_templates = [(i, t) for i in templates for t in range(len(templates[i]))]
    uncovered = list(all_templates)
    gen.shuffle(uncovered)
    seen: set[tuple[str, ...]] = set()
    splits = []
    for size in (n_train, n_val, n_test):
        counts = stratified_counts(size, INTENT_COUNT_PROPORTIONS)
        k_seq = np.repeat([1, 2, 3], counts)
        gen.shuffle(k_seq)
        out = []
        for k in k_seq:
            for _attempt in range(1000):
                chosen: list[tuple[str, int]] = []
                while uncovered and len(chosen) < k and not splits:
                    if any(uncovered[-1][0] == c[0] for c in chosen):
                        break
                    chosen.append(uncovered.pop())
                forced = list(chosen)
                intents_left = [i for i in templates if all(i != c[0] for c in chosen)]
                extra = gen.choice(len(intents_left), size=int(k) - len(chosen), replace=False)
                for j in extra:
                    intent = intents_left[j]
                    chosen.append((intent, int(gen.integers(len(templates[intent])))))
                u = _compose(templates, chosen, gen)
                if u.words not in seen:
                    seen.add(u.words)
                    out.append(u)
                    break
                uncovered.extend(reversed(forced))
            else:
                raise RuntimeError("grammar exhausted; request fewer utterances")
        splits.append(out)
    return DatasetSplits(*splits)
