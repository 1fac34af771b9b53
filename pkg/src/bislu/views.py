"""Multi-viewed mini-batches and the anchor / positive / candidate index sets
used by the utterance and span contrastive losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import compute as C
from .compute import RngState, Tensor
from .data import NON_SLOT, AnnotatedUtterance
from .model import BiSLU, ModelActivations
from .encoder import Vocab


@dataclass
class ContrastiveBatch:
    """Index structure over B*V utterance rows (view-major: row = view * B + b).

    ``span_pos[a]`` / ``span_cand[a]`` are P and A for span anchor ``span_anchors[a]``;
    ``utt_pos[i][m]`` is P_m(i) and ``utt_cand[i]`` is A(i).
    """

    utterance_reprs: Tensor
    utterance_intents: list[frozenset]
    utterance_owner: list[int]
    span_reprs: Tensor
    span_labels: list[str]
    span_owner: list[int]
    span_anchors: list[int]
    span_pos: list[list[int]]
    span_cand: list[list[int]]
    utt_pos: list[dict[str, list[int]]]
    utt_cand: list[list[int]]
    intent_labels: list[str]


def sample_nonslot_spans(u: AnnotatedUtterance, count: int, gen: np.random.Generator,
                         max_span_len: int | None = None) -> list[tuple[int, int]]:
    gold = {(s, e) for s, e, _ in u.spans}
    pool = [(i, j) for i in range(1, u.n + 1) for j in range(i, u.n + 1)
            if (i, j) not in gold and (max_span_len is None or j - i < max_span_len)]
    if count <= 0 or not pool:
        return []
    pick = gen.choice(len(pool), size=min(count, len(pool)), replace=False)
    return [pool[k] for k in sorted(pick)]


def index_sets(utt_intents: Sequence[frozenset], span_labels: Sequence[str]):
    """P / A sets over both pools; A(x) is every other row of x's pool."""
    N = len(utt_intents)
    utt_cand = [[k for k in range(N) if k != i] for i in range(N)]
    utt_pos = [{m: [k for k in utt_cand[i] if m in utt_intents[k]] for m in sorted(utt_intents[i])}
               for i in range(N)]
    S = len(span_labels)
    anchors = [a for a in range(S) if span_labels[a] != NON_SLOT]
    span_cand = [[k for k in range(S) if k != a] for a in anchors]
    span_pos = [[k for k in cand if span_labels[k] == span_labels[a]] for a, cand in zip(anchors, span_cand)]
    return utt_pos, utt_cand, anchors, span_pos, span_cand


def build_views(batch: Sequence[AnnotatedUtterance], V: int, model: BiSLU, vocab: Vocab, rng: RngState,
                nonslot_negatives: int = 2) -> tuple[ContrastiveBatch, ModelActivations]:
    """Run the batch through the model ``V`` times in training mode and collect
    [CLS] rows and gold (plus sampled non-slot) span features for every view.

    Returns the contrastive batch together with the activations of the B*V forward,
    which the supervised losses reuse.
    """
    if V < 1:
        raise ValueError(f"need at least one view, got V={V}")
    if not batch:
        raise ValueError("empty batch")
    B = len(batch)
    rows = [u.words for u in batch] * V
    view_ids = [v for v in range(V) for _ in range(B)]
    acts = model.forward(rows, vocab, training=True, rng=rng, view_ids=view_ids)

    gen = rng.generator()
    per_utt: list[list[tuple[int, int, str]]] = []
    for u in batch:
        negs = sample_nonslot_spans(u, nonslot_negatives, gen, model.cfg.max_span_len)
        per_utt.append(list(u.spans) + [(i, j, NON_SLOT) for i, j in negs])

    idx_row, idx_i, idx_j, span_labels, span_owner = [], [], [], [], []
    for v in range(V):
        for b, spans in enumerate(per_utt):
            for start, end, label in spans:
                idx_row.append(v * B + b)
                idx_i.append(start - 1)
                idx_j.append(end - 1)
                span_labels.append(label)
                span_owner.append(v * B + b)
    index = (np.array(idx_row, dtype=np.int64), np.array(idx_i, dtype=np.int64), np.array(idx_j, dtype=np.int64))
    span_reprs = C.getitem(acts.z, index)

    utt_intents = [u.intent_set for u in batch] * V
    utt_pos, utt_cand, anchors, span_pos, span_cand = index_sets(utt_intents, span_labels)
    cb = ContrastiveBatch(
        utterance_reprs=acts.c0,
        utterance_intents=utt_intents,
        utterance_owner=list(range(B)) * V,
        span_reprs=span_reprs,
        span_labels=span_labels,
        span_owner=span_owner,
        span_anchors=anchors,
        span_pos=span_pos,
        span_cand=span_cand,
        utt_pos=utt_pos,
        utt_cand=utt_cand,
        intent_labels=sorted(set().union(*utt_intents)),
    )
    return cb, acts
