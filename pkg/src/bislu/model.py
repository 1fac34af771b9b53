"""The bidirectional joint model: intermediate intents feed the span classifier,
whose summed span logits feed the final intent head."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import compute as C
from .compute import RngState, Tensor
from .data import LabelSets, Span
from .encoder import EncodedBatch, Encoder, EncoderConfig, Vocab
from .nn import Linear, Module, parameter, xavier_uniform


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    k: int = 300
    s: int = 200
    max_span_len: int | None = None
    remove_intermediate: bool = False
    use_intermediate_as_final: bool = False
    detach_intermediate: bool = False

    def __post_init__(self):
        if self.remove_intermediate and self.use_intermediate_as_final:
            raise ValueError("remove_intermediate and use_intermediate_as_final are exclusive")


@dataclass
class PredictionConfig:
    threshold: float = 0.5
    max_span_len: int | None = None
    fallback_argmax: bool = True

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"intent threshold must be in (0, 1), got {self.threshold}")


@dataclass(frozen=True)
class SlotPrediction:
    start: int
    end: int
    label: str
    score: float

    def span(self) -> Span:
        return (self.start, self.end, self.label)


@dataclass
class ModelActivations:
    """One batched forward pass; the leading axis of every tensor is the batch.

    ``z`` and ``r`` are dense [B, n, n, .] grids of which only cells flagged in
    ``span_mask`` (start <= end < length, within the span cap) are meaningful.
    ``h_S`` is None when the intermediate head is removed.
    """

    c0: Tensor
    c: Tensor
    lengths: np.ndarray
    span_mask: np.ndarray
    h_S: Tensor | None
    p: Tensor | None
    v: Tensor
    g_start: Tensor
    g_end: Tensor
    z: Tensor
    r: Tensor
    h: Tensor | None
    x: Tensor | None
    h_T: Tensor
    p_final: Tensor


def span_mask(lengths: Sequence[int], n_max: int, max_span_len: int | None = None) -> np.ndarray:
    i, j = np.meshgrid(np.arange(n_max), np.arange(n_max), indexing="ij")
    base = j >= i
    if max_span_len is not None:
        base &= (j - i) < max_span_len
    lengths = np.asarray(lengths)
    inside = j[None] < lengths[:, None, None]
    return base[None] & inside


class FFN(Module):
    """One GELU hidden layer of width ``d_out``."""

    def __init__(self, gen, d_in: int, d_out: int):
        self.fc1 = Linear(gen, d_in, d_out)
        self.fc2 = Linear(gen, d_out, d_out)

    def __call__(self, x):
        return self.fc2(C.gelu(self.fc1(x)))


class Biaffine(Module):
    """z_ij = g_i^T U g_j + W [g_i ; g_j] + b with U: k x s x k, W: s x 2k."""

    def __init__(self, gen, k: int, s: int):
        self.k, self.s = k, s
        self.U = parameter(xavier_uniform(gen, k * k, s, (k, s, k)))
        self.W = parameter(xavier_uniform(gen, 2 * k, s, (s, 2 * k)))
        self.b = parameter(np.zeros(s))

    def __call__(self, g_start: Tensor, g_end: Tensor) -> Tensor:
        B, n, k = g_start.shape
        s = self.s
        left = C.matmul(g_start, self.U.reshape(k, s * k)).reshape(B, n * s, k)
        bil = C.matmul(left, g_end.transpose(0, 2, 1)).reshape(B, n, s, n).transpose(0, 1, 3, 2)
        Wt = self.W.transpose(1, 0)
        lin_start = C.matmul(g_start, Wt[:k]).reshape(B, n, 1, s)
        lin_end = C.matmul(g_end, Wt[k:]).reshape(B, 1, n, s)
        return bil + lin_start + lin_end + self.b


class BiSLU(Module):
    def __init__(self, cfg: ModelConfig, labels: LabelSets, vocab_size: int, rng: RngState):
        self.cfg = cfg
        self.labels = labels
        d, l, n_cls = cfg.encoder.d, labels.num_intents, labels.num_slot_classes
        self.encoder = Encoder(cfg.encoder, vocab_size, rng)
        gen = rng.generator()
        self.intent_mid = None if cfg.remove_intermediate else Linear(gen, d, l)
        width = d if cfg.remove_intermediate else l + d
        self.ffn_start = FFN(gen, width, cfg.k)
        self.ffn_end = FFN(gen, width, cfg.k)
        self.biaffine = Biaffine(gen, cfg.k, cfg.s)
        self.slot_head = Linear(gen, cfg.s, n_cls)
        self.intent_final = Linear(gen, d + n_cls, l)

    # -- the forward pieces ----------------------------------------------------
    def intermediate_intents(self, c0: Tensor) -> tuple[Tensor, Tensor]:
        h_S = self.intent_mid(c0)
        return h_S, C.sigmoid(h_S)

    def word_representations(self, p: Tensor | None, c: Tensor) -> Tensor:
        if p is None:
            return c
        if self.cfg.detach_intermediate:
            p = p.detach()
        B, n, _ = c.shape
        l = p.shape[-1]
        return C.concat([C.broadcast_to(p.reshape(B, 1, l), (B, n, l)), c], axis=-1)

    def span_features(self, v: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        g_start, g_end = self.ffn_start(v), self.ffn_end(v)
        return g_start, g_end, self.biaffine(g_start, g_end)

    def slot_logits(self, z: Tensor) -> Tensor:
        return self.slot_head(z)

    @staticmethod
    def soft_slot_vector(r: Tensor, mask: np.ndarray) -> Tensor:
        summed = (r * mask[..., None].astype(r.dtype)).sum(axis=(1, 2))
        return C.softmax(summed, axis=-1)

    def final_intents(self, c0: Tensor, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        x = C.concat([c0, h], axis=-1)
        h_T = self.intent_final(x)
        return x, h_T, C.sigmoid(h_T)

    # -- composition -------------------------------------------------------------
    def forward_encoded(self, enc: EncodedBatch) -> ModelActivations:
        c0, c = enc.c0, enc.c
        h_S = p = None
        if self.intent_mid is not None:
            h_S, p = self.intermediate_intents(c0)
        v = self.word_representations(p, c)
        g_start, g_end, z = self.span_features(v)
        r = self.slot_logits(z)
        mask = span_mask(enc.lengths, c.shape[1], self.cfg.max_span_len)
        if self.cfg.use_intermediate_as_final:
            h = x = None
            h_T, p_final = h_S, p
        else:
            h = self.soft_slot_vector(r, mask)
            x, h_T, p_final = self.final_intents(c0, h)
        return ModelActivations(c0, c, enc.lengths, mask, h_S, p, v, g_start, g_end, z, r, h, x, h_T, p_final)

    def forward(self, utterances: Sequence[Sequence[str]], vocab: Vocab, training: bool = False,
                rng: RngState | None = None, view_ids: Sequence[int] | None = None) -> ModelActivations:
        self.train(training)
        enc = self.encoder.encode_batch(utterances, vocab, training=training, rng=rng, view_ids=view_ids)
        return self.forward_encoded(enc)

    __call__ = forward

    def predict(self, utterances: Sequence[Sequence[str]], vocab: Vocab,
                cfg: PredictionConfig | None = None, batch_size: int = 64) -> list[dict]:
        """Eval-mode decoding: one dict per utterance with intents, slots and probabilities."""
        cfg = cfg or PredictionConfig()
        out = []
        with C.no_grad():
            for lo in range(0, len(utterances), batch_size):
                chunk = utterances[lo:lo + batch_size]
                acts = self.forward(chunk, vocab, training=False)
                for b, words in enumerate(chunk):
                    n = len(words)
                    p_final = acts.p_final.data[b]
                    slots = decode_slots(acts.r.data[b, :n, :n], self.labels, cfg, self.cfg.max_span_len)
                    out.append({
                        "intents": decode_intents(p_final, self.labels, cfg),
                        "intent_probs": {lab: float(p_final[m]) for m, lab in enumerate(self.labels.intents)},
                        "slots": slots,
                    })
        return out


# -- decoding ----------------------------------------------------------------------
def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decode_slots(r: np.ndarray, labels: LabelSets, cfg: PredictionConfig | None = None,
                 model_cap: int | None = None) -> list[SlotPrediction]:
    """Greedy non-overlapping span selection from an [n, n, c+1] logit grid.

    Candidates are ranked by max class probability, ties broken by shorter
    span then smaller start.  Output is sorted by start.
    """
    cfg = cfg or PredictionConfig()
    caps = [c for c in (cfg.max_span_len, model_cap) if c is not None]
    cap = min(caps) if caps else None
    n = r.shape[0]
    q = _softmax_np(np.asarray(r, dtype=np.float64))
    best = q.argmax(axis=-1)
    score = q.max(axis=-1)
    cands = []
    for i in range(n):
        for j in range(i, n if cap is None else min(n, i + cap)):
            t = best[i, j]
            if t != labels.non_slot_index:
                cands.append((-score[i, j], j - i, i, j, t))
    cands.sort()
    taken = np.zeros(n, dtype=bool)
    kept = []
    for neg_score, _, i, j, t in cands:
        if taken[i:j + 1].any():
            continue
        taken[i:j + 1] = True
        kept.append(SlotPrediction(i + 1, j + 1, labels.slots[t], float(-neg_score)))
    return sorted(kept, key=lambda sp: sp.start)


def decode_intents(p_final: np.ndarray, labels: LabelSets, cfg: PredictionConfig | None = None) -> tuple[str, ...]:
    cfg = cfg or PredictionConfig()
    p_final = np.asarray(p_final)
    chosen = [m for m in range(len(p_final)) if p_final[m] > cfg.threshold]
    if not chosen and cfg.fallback_argmax:
        chosen = [int(np.argmax(p_final))]
    return tuple(labels.intents[m] for m in chosen)
