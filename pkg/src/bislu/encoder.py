"""Tokenization and a small pre-norm transformer that yields c0 and per-word rows."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import compute as C
from .compute import RngState, Tensor
from .nn import LayerNorm, Linear, Module, parameter, xavier_uniform

CLS, PAD, UNK = "[CLS]", "[PAD]", "[UNK]"
SPECIALS = (CLS, PAD, UNK)


class SequenceTooLong(ValueError):
    """The utterance does not fit ``max_seq_len``; inputs are never truncated silently."""


@dataclass
class Vocab:
    tokens: list[str]
    pieces: dict[str, tuple[str, ...]] = field(default_factory=dict)
    lowercase: bool = True

    def __post_init__(self):
        if tuple(self.tokens[:3]) != SPECIALS:
            raise ValueError(f"vocab must start with {SPECIALS}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocab tokens")
        for word, parts in self.pieces.items():
            if not parts:
                raise ValueError(f"piece table maps {word!r} to no pieces")

    cls_id, pad_id, unk_id = 0, 1, 2

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def norm(self, word: str) -> str:
        return word.lower() if self.lowercase else word

    def piece_ids(self, word: str) -> list[int]:
        """Ids of the pieces ``word`` splits into (one id unless the piece table says otherwise)."""
        w = self.norm(word)
        if w in self.pieces:
            return [self.index.get(p, self.unk_id) for p in self.pieces[w]]
        return [self.index.get(w, self.unk_id)]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path, pieces: Mapping[str, Sequence[str]] | None = None, lowercase: bool = True) -> "Vocab":
        tokens = Path(path).read_text(encoding="utf-8").split("\n")[:-1]
        return cls(tokens, {k: tuple(v) for k, v in (pieces or {}).items()}, lowercase)


def build_vocab(corpus: Iterable, min_freq: int = 1, lowercase: bool = True,
                pieces: Mapping[str, Sequence[str]] | None = None) -> Vocab:
    """Frequency-desc, then lexicographic ordering after the three specials.

    Words listed in ``pieces`` contribute their pieces instead of themselves.
    """
    pieces = {(k.lower() if lowercase else k): tuple(v) for k, v in (pieces or {}).items()}
    counts: Counter[str] = Counter()
    n_utts = 0
    for u in corpus:
        n_utts += 1
        for w in u.words:
            w = w.lower() if lowercase else w
            counts.update(pieces.get(w, (w,)))
    if n_utts == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIALS) + kept, pieces, lowercase)


@dataclass
class EncoderConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    dropout_rate: float = 0.1
    max_seq_len: int = 100
    view_dropout_rates: tuple[float, ...] | None = None
    pos_init_std: float = 0.02
    # learned per-head attention bias for offsets in [-rel_window, rel_window]; 0 disables it
    rel_window: int = 8
    # training-time probability of replacing a word's pieces with [UNK]
    word_unk_rate: float = 0.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if self.rel_window < 0:
            raise ValueError("rel_window must be >= 0")
        if self.view_dropout_rates is not None:
            self.view_dropout_rates = tuple(float(r) for r in self.view_dropout_rates)


@dataclass
class EncodedUtterance:
    c0: Tensor
    c: Tensor
    view_id: int = 0


@dataclass
class EncodedBatch:
    """Padded batch: ``c0`` is [B, d], ``c`` is [B, n_max, d]; rows past ``lengths[b]`` are zero."""

    c0: Tensor
    c: Tensor
    lengths: np.ndarray
    pieces: Tensor | None = None


class Block(Module):
    def __init__(self, gen, cfg: EncoderConfig):
        d = cfg.d
        self.heads = cfg.heads
        self.ln1, self.ln2 = LayerNorm(d), LayerNorm(d)
        # a key bias only shifts each score row by a constant, which softmax ignores
        self.q, self.k = Linear(gen, d, d), Linear(gen, d, d, bias=False)
        self.v, self.o = Linear(gen, d, d), Linear(gen, d, d)
        self.ff1, self.ff2 = Linear(gen, d, cfg.ffn_dim), Linear(gen, cfg.ffn_dim, d)
        self.rel_window = cfg.rel_window
        if cfg.rel_window:
            self.rel_bias = parameter(np.zeros((cfg.heads, 2 * cfg.rel_window + 1)))

    def __call__(self, x: Tensor, mask_bias: np.ndarray, rate, rng) -> Tensor:
        B, T, d = x.shape
        H, dh = self.heads, d // self.heads
        h = self.ln1(x)

        def split(t):
            return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        scores = C.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + mask_bias
        if self.rel_window:
            offsets = np.arange(T)[None, :] - np.arange(T)[:, None]
            bucket = np.clip(offsets, -self.rel_window, self.rel_window) + self.rel_window
            scores = scores + C.getitem(self.rel_bias, (slice(None), bucket))
        att = C.matmul(C.softmax(scores, axis=-1), v).transpose(0, 2, 1, 3).reshape(B, T, d)
        x = x + C.dropout(self.o(att), rate, rng, self.training)
        f = self.ff2(C.gelu(self.ff1(self.ln2(x))))
        return x + C.dropout(f, rate, rng, self.training)


class Encoder(Module):
    """Token + learned position embeddings, pre-norm blocks with relative attention bias, final layer norm.

    A word that splits into several pieces gets the sum of its piece rows from
    the last layer.  Row 0 of the piece sequence is [CLS] and becomes ``c0``.
    """

    def __init__(self, cfg: EncoderConfig, vocab_size: int, rng: RngState):
        gen = rng.generator()
        self.cfg = cfg
        self.tok_emb = parameter(xavier_uniform(gen, vocab_size, cfg.d, (vocab_size, cfg.d)))
        self.pos_emb = parameter(gen.normal(0.0, cfg.pos_init_std, (cfg.max_seq_len + 1, cfg.d)))
        self.blocks = [Block(gen, cfg) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(cfg.d)

    def _dropout_rate(self, n_rows: int, view_ids: Sequence[int] | None):
        rates = self.cfg.view_dropout_rates
        if rates is None or view_ids is None:
            return self.cfg.dropout_rate
        return np.array([rates[v % len(rates)] for v in view_ids]).reshape(n_rows, 1, 1)

    def encode_batch(self, utterances: Sequence[Sequence[str]], vocab: Vocab, training: bool = False,
                     rng: RngState | None = None, view_ids: Sequence[int] | None = None,
                     keep_pieces: bool = False) -> EncodedBatch:
        B = len(utterances)
        word_pieces = [[vocab.piece_ids(w) for w in words] for words in utterances]
        for words, wp in zip(utterances, word_pieces):
            n_pieces = sum(len(p) for p in wp)
            if len(words) > self.cfg.max_seq_len or n_pieces > self.cfg.max_seq_len:
                raise SequenceTooLong(f"{len(words)} words / {n_pieces} pieces exceed max_seq_len="
                                      f"{self.cfg.max_seq_len}: {' '.join(words)[:60]!r}")
            if not words:
                raise ValueError("empty utterance")
        T = 1 + max(sum(len(p) for p in wp) for wp in word_pieces)
        n_max = max(len(words) for words in utterances)
        ids = np.full((B, T), vocab.pad_id, dtype=np.int64)
        pool = np.zeros((B, n_max, T), dtype=C.default_dtype())
        mask_bias = np.zeros((B, 1, 1, T), dtype=C.default_dtype())
        for b, wp in enumerate(word_pieces):
            ids[b, 0] = vocab.cls_id
            t = 1
            for i, pids in enumerate(wp):
                for pid in pids:
                    ids[b, t] = pid
                    pool[b, i, t] = 1.0
                    t += 1
            mask_bias[b, 0, 0, t:] = C.MASK_VALUE
        if training and self.cfg.word_unk_rate > 0:
            drop = rng.generator().random(ids.shape) < self.cfg.word_unk_rate
            ids = np.where(drop & (ids != vocab.cls_id) & (ids != vocab.pad_id), vocab.unk_id, ids)
        x = C.getitem(self.tok_emb, ids) + C.getitem(self.pos_emb, slice(0, T))
        rate = self._dropout_rate(B, view_ids) if training else 0.0
        x = C.dropout(x, rate, rng, training)
        for block in self.blocks:
            x = block(x, mask_bias, rate, rng)
        hidden = self.ln_f(x)
        c = C.matmul(pool, hidden)
        c0 = C.getitem(hidden, (slice(None), 0))
        lengths = np.array([len(w) for w in utterances])
        return EncodedBatch(c0, c, lengths, hidden if keep_pieces else None)

    def encode(self, words: Sequence[str], vocab: Vocab, mode: str = "eval",
               rng: RngState | None = None) -> EncodedUtterance:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        out = self.encode_batch([words], vocab, training=mode == "train", rng=rng)
        return EncodedUtterance(out.c0[0], out.c[0], 0)

    def encode_views(self, words: Sequence[str], vocab: Vocab, V: int, rng: RngState) -> list[EncodedUtterance]:
        """``V`` training-mode encodings of one utterance with independent dropout masks."""
        if V < 1:
            raise ValueError(f"need at least one view, got V={V}")
        out = self.encode_batch([words] * V, vocab, training=True, rng=rng, view_ids=list(range(V)))
        return [EncodedUtterance(out.c0[v], out.c[v], v) for v in range(V)]
