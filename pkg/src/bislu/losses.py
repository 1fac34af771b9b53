"""The five training objectives and their weighted sum.

The bottom of the module holds scalar brute-force versions of the two
contrastive losses.  They use only ``math`` and build their own positive and
candidate sets from labels, so they can serve as oracles for the tensor code.
"""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import compute as C
from .compute import Tensor
from .data import NON_SLOT, AnnotatedUtterance, LabelSets
from .views import ContrastiveBatch

COMPONENTS = ("id", "sf", "id_scl", "sf_scl", "sd")


@dataclass
class ContrastiveConfig:
    tau: float = 0.1
    penalty_fn: str = "constant"
    penalty_exponent: float = 1.0
    views: int = 3
    nonslot_negatives: int = 2
    normalize: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.penalty_fn not in ("constant", "exp", "pow"):
            raise ValueError(f"penalty_fn must be constant, exp or pow, got {self.penalty_fn!r}")
        if self.views < 1:
            raise ValueError("views must be >= 1")


@dataclass
class LossWeights:
    """Mixture weights for (id, sf, id_scl, sf_scl, sd); must lie on the simplex."""

    lambda1: float = 0.3
    lambda2: float = 0.3
    lambda3: float = 0.15
    lambda4: float = 0.15
    lambda5: float = 0.1

    def __post_init__(self):
        w = astuple(self)
        if any(not 0.0 <= x <= 1.0 for x in w) or abs(sum(w) - 1.0) > 1e-6:
            raise ValueError(f"loss weights must be in [0, 1] and sum to 1, got {w}")

    @classmethod
    def normalized(cls, *weights: float) -> "LossWeights":
        total = float(sum(weights))
        if total <= 0 or any(x < 0 for x in weights):
            raise ValueError(f"cannot normalize weights {weights}")
        return cls(*(x / total for x in weights))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(COMPONENTS, astuple(self)))


def label_penalties(cfg: ContrastiveConfig, labels: Sequence[str],
                    train: Sequence[AnnotatedUtterance] | None = None) -> dict[str, float]:
    """lambda_m per intent label.

    ``constant`` gives 1.  ``exp`` gives exp(-gamma * f_m) and ``pow`` gives
    f_m ** -gamma, where f_m is the fraction of training utterances carrying m,
    so rarer labels weigh more.
    """
    if cfg.penalty_fn == "constant":
        return {m: 1.0 for m in labels}
    if not train:
        raise ValueError(f"penalty_fn={cfg.penalty_fn!r} needs training-set label frequencies")
    n = len(train)
    freq = {m: max(sum(m in u.intent_set for u in train), 1) / n for m in labels}
    if cfg.penalty_fn == "exp":
        return {m: math.exp(-cfg.penalty_exponent * f) for m, f in freq.items()}
    return {m: f ** -cfg.penalty_exponent for m, f in freq.items()}


# -- supervised losses -----------------------------------------------------------
def intent_targets(batch: Sequence[AnnotatedUtterance], labels: LabelSets) -> np.ndarray:
    y = np.zeros((len(batch), labels.num_intents))
    for b, u in enumerate(batch):
        for m in u.intents:
            y[b, labels.intent_index(m)] = 1.0
    return y


def intent_loss(probs: Tensor, gold: np.ndarray) -> Tensor:
    """Per-label binary cross-entropy on clamped probabilities, averaged over labels and batch."""
    p = C.clamp(probs, C.PROB_EPS, 1.0 - C.PROB_EPS)
    y = np.asarray(gold, dtype=p.dtype)
    ll = C.log(p) * y + C.log(1.0 - p) * (1.0 - y)
    return -C.mean(ll)


def slot_targets(batch: Sequence[AnnotatedUtterance], labels: LabelSets, n_max: int) -> np.ndarray:
    t = np.full((len(batch), n_max, n_max), labels.non_slot_index, dtype=np.int64)
    for b, u in enumerate(batch):
        for start, end, label in u.spans:
            t[b, start - 1, end - 1] = labels.slot_index(label)
    return t


def slot_loss(r: Tensor, targets: np.ndarray, mask: np.ndarray,
              keep_nonslot: float | None = None, gen: np.random.Generator | None = None,
              non_slot_index: int | None = None) -> Tensor:
    """Span cross-entropy, averaged over each utterance's valid spans, then over the batch.

    With ``keep_nonslot`` in (0, 1) only that fraction of non-slot spans is kept
    (needs ``gen`` and ``non_slot_index``).
    """
    mask = mask.copy()
    if keep_nonslot is not None:
        drop = (targets == non_slot_index) & (gen.random(mask.shape) >= keep_nonslot)
        mask &= ~drop
    n_cls = r.shape[-1]
    if np.any((targets >= n_cls) & mask):
        raise ValueError("slot target outside the class range")
    onehot = np.eye(n_cls, dtype=r.dtype)[targets] * mask[..., None]
    counts = mask.sum(axis=(1, 2)).astype(r.dtype)
    weights = onehot / (np.maximum(counts, 1)[:, None, None, None] * len(counts))
    return -(C.log_softmax(r, axis=-1) * weights).sum()


# -- contrastive losses -----------------------------------------------------------
def _supcon_from_weights(reps: Tensor, pos_weight: np.ndarray, cand: np.ndarray, tau: float,
                         normalize: bool) -> Tensor:
    """-sum_{i,p} w[i,p] * log( f(i,p) / sum_{k in A(i)} f(i,k) ),  f = exp(dot / tau)."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if normalize:
        reps = reps / C.sqrt((reps * reps).sum(axis=-1, keepdims=True) + 1e-12)
    sim = C.matmul(reps, reps.transpose(1, 0)) * (1.0 / tau)
    bias = np.where(cand, 0.0, C.MASK_VALUE).astype(sim.dtype)
    logp = C.log_softmax(sim + bias, axis=-1)
    return -(logp * pos_weight.astype(sim.dtype)).sum()


def slot_scl_loss(cb: ContrastiveBatch, cfg: ContrastiveConfig) -> Tensor:
    S = len(cb.span_labels)
    w = np.zeros((S, S))
    cand = np.zeros((S, S), dtype=bool)
    for a, pos, cnd in zip(cb.span_anchors, cb.span_pos, cb.span_cand):
        cand[a, cnd] = True
        if pos:
            w[a, pos] = 1.0 / len(pos)
    return _supcon_from_weights(cb.span_reprs, w, cand, cfg.tau, cfg.normalize)


def intent_scl_loss(cb: ContrastiveBatch, cfg: ContrastiveConfig,
                    penalties: Mapping[str, float] | None = None) -> Tensor:
    N = len(cb.utterance_intents)
    labels = cb.intent_labels
    penalties = penalties or {m: 1.0 for m in labels}
    w = np.zeros((N, N))
    cand = np.zeros((N, N), dtype=bool)
    for i in range(N):
        cand[i, cb.utt_cand[i]] = True
        for m, pos in cb.utt_pos[i].items():
            if pos:
                w[i, pos] += penalties.get(m, 1.0) / (len(labels) * len(pos))
    return _supcon_from_weights(cb.utterance_reprs, w, cand, cfg.tau, cfg.normalize)


def self_distillation_loss(h_S: Tensor, h_T: Tensor, detach_teacher: bool = True,
                           reverse: bool = False) -> Tensor:
    """Per-label Bernoulli KL(p_S || p_T), summed over labels, averaged over the batch.

    ``reverse`` swaps the direction to KL(p_T || p_S).
    """
    p_s = C.clamp(C.sigmoid(h_S), C.PROB_EPS, 1.0 - C.PROB_EPS)
    p_t = C.clamp(C.sigmoid(h_T.detach() if detach_teacher else h_T), C.PROB_EPS, 1.0 - C.PROB_EPS)
    if reverse:
        p_s, p_t = p_t, p_s
    kl = p_s * (C.log(p_s) - C.log(p_t)) + (1.0 - p_s) * (C.log(1.0 - p_s) - C.log(1.0 - p_t))
    per_utt = kl.sum(axis=-1)
    return per_utt.mean()


def joint_loss(components: Mapping[str, Tensor | None], w: LossWeights) -> Tensor:
    """Weighted sum over ``COMPONENTS``; zero-weight terms are skipped and may be absent."""
    total = None
    for name, lam in w.as_dict().items():
        if lam == 0.0:
            continue
        term = components.get(name)
        if term is None:
            raise ValueError(f"loss component {name!r} has weight {lam} but was not computed")
        total = term * lam if total is None else total + term * lam
    if total is None:
        raise ValueError("all loss weights are zero")
    return total


# -- scalar brute-force references --------------------------------------------------
def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def slot_scl_reference(vectors: Sequence[Sequence[float]], labels: Sequence[str], tau: float) -> float:
    """L = sum_anchor -1/|P| sum_p log( exp(z.zp/tau) / sum_{k != anchor} exp(z.zk/tau) )."""
    total = 0.0
    for a, za in enumerate(vectors):
        if labels[a] == NON_SLOT:
            continue
        positives = [p for p in range(len(vectors)) if p != a and labels[p] == labels[a]]
        if not positives:
            continue
        denom = sum(math.exp(_dot(za, vectors[k]) / tau) for k in range(len(vectors)) if k != a)
        acc = 0.0
        for p in positives:
            acc += math.log(math.exp(_dot(za, vectors[p]) / tau) / denom)
        total += -acc / len(positives)
    return total


def intent_scl_reference(vectors: Sequence[Sequence[float]], label_sets: Sequence[set],
                         tau: float, penalties: Mapping[str, float] | None = None) -> float:
    """Multi-label SupCon: sum_m 1/|M| sum_i -lambda_m/|P_m(i)| sum_p L_pair(i, p)."""
    M = sorted(set().union(*label_sets))
    total = 0.0
    for m in M:
        lam = 1.0 if penalties is None else penalties[m]
        for i, ci in enumerate(vectors):
            if m not in label_sets[i]:
                continue
            positives = [p for p in range(len(vectors)) if p != i and m in label_sets[p]]
            if not positives:
                continue
            denom = sum(math.exp(_dot(vectors[k], ci) / tau) for k in range(len(vectors)) if k != i)
            pair_sum = sum(math.log(math.exp(_dot(ci, vectors[p]) / tau) / denom) for p in positives)
            total += (1.0 / len(M)) * (-lam / len(positives)) * pair_sum
    return total
