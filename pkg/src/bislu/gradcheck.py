"""Randomized finite-difference checks of every loss term and the two big layers.

Each trial draws a tiny float64 model and a tiny random batch, then compares
backprop gradients with central differences.  Dropout stays on: every function
evaluation replays the same ``RngState`` so the masks are identical.

Self-distillation trains the student against a detached teacher.  The function
checked for ``sd`` and ``joint`` therefore freezes the teacher logits at their
value for the unperturbed parameters, which is exactly the function whose
gradient the detached backward pass computes.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import compute as C
from .compute import RngState, Tensor
from .data import AnnotatedUtterance, LabelSets
from .encoder import EncoderConfig, build_vocab
from .losses import (ContrastiveConfig, LossWeights, intent_loss, intent_scl_loss, intent_targets, joint_loss,
                     self_distillation_loss, slot_loss, slot_scl_loss, slot_targets)
from .model import BiSLU, Biaffine, ModelConfig
from .views import build_views

COMPONENTS = ("id", "sf", "id_scl", "sf_scl", "sd", "joint", "encoder", "biaffine")
TOLERANCE = 1e-4

_WORDS = ("show", "fly", "from", "to", "boston", "denver", "cheap", "fare", "and", "meal")
_INTENTS = ("x", "y", "z")
_SLOTS = ("a", "b")


@dataclass
class GradcheckResult:
    component: str
    trials: int
    max_error: float
    worst: tuple | None
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE

    def render(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = f"{status} {self.component}: max rel error {self.max_error:.3e} over {self.trials} trials"
        if self.worst is not None:
            name, idx, a, n = self.worst
            line += f" (worst {name}[{idx}] analytic {a:.6e} numeric {n:.6e})"
        return line


def random_batch(gen: np.random.Generator, size: int = 3) -> list[AnnotatedUtterance]:
    out = []
    for _ in range(size):
        n = int(gen.integers(3, 7))
        words = tuple(_WORDS[i] for i in gen.integers(len(_WORDS), size=n))
        spans, pos = [], 1
        while pos <= n:
            if gen.random() < 0.4:
                end = min(n, pos + int(gen.integers(0, 2)))
                spans.append((pos, end, _SLOTS[gen.integers(len(_SLOTS))]))
                pos = end + 1
            else:
                pos += 1
        k = int(gen.integers(1, len(_INTENTS) + 1))
        intents = tuple(sorted(gen.choice(_INTENTS, size=k, replace=False).tolist()))
        out.append(AnnotatedUtterance(words, intents, tuple(spans)))
    # one shared slot label and one shared intent guarantee non-empty positive sets
    out[0] = AnnotatedUtterance(out[0].words, tuple(sorted(set(out[0].intents) | {"x"})), ((1, 1, "a"),))
    out[1] = AnnotatedUtterance(out[1].words, tuple(sorted(set(out[1].intents) | {"x"})), ((2, 2, "a"),))
    return out


def tiny_model(seed: int, vocab_size: int) -> BiSLU:
    enc = EncoderConfig(d=8, layers=1, heads=2, ffn_dim=12, dropout_rate=0.1, max_seq_len=12, rel_window=3)
    model = BiSLU(ModelConfig(enc, k=6, s=4), LabelSets(_INTENTS, _SLOTS), vocab_size, RngState(seed))
    # summing span logits saturates the soft slot vector; a small slot head keeps its
    # gradients well above the central-difference noise floor
    model.slot_head.weight.data *= 0.05
    for name, p in model.named_parameters():
        p.name = name
    return model


def _trial_function(component: str, seed: int) -> tuple[Callable[[], Tensor], list[Tensor]]:
    gen = np.random.default_rng(seed)
    batch = random_batch(gen)
    vocab = build_vocab(batch)
    model = tiny_model(seed, len(vocab))
    labels = model.labels
    ccfg = ContrastiveConfig(tau=0.5, views=2)
    weights = LossWeights(0.3, 0.3, 0.15, 0.15, 0.1)
    params = model.parameters()

    if component == "encoder":
        enc = model.encoder
        probe = gen.normal(size=(len(batch), max(u.n for u in batch), enc.cfg.d))
        probe0 = gen.normal(size=(len(batch), enc.cfg.d))

        def f():
            out = enc.encode_batch([u.words for u in batch], vocab, training=True, rng=RngState(seed, 1))
            return (out.c * probe).sum() + (out.c0 * probe0).sum()
        return f, enc.parameters()

    if component == "biaffine":
        k, s, n = 5, 3, 4
        layer = Biaffine(gen, k, s)
        layer.b.data[:] = gen.normal(size=s)
        gs = Tensor(gen.normal(size=(2, n, k)), requires_grad=True, name="g_start")
        ge = Tensor(gen.normal(size=(2, n, k)), requires_grad=True, name="g_end")
        for name, p in layer.named_parameters():
            p.name = name
        probe = gen.normal(size=(2, n, n, s))
        return (lambda: (layer(gs, ge) * probe).sum()), layer.parameters() + [gs, ge]

    def activations():
        return build_views(batch, ccfg.views, model, vocab, RngState(seed, 1), ccfg.nonslot_negatives)

    with C.no_grad():
        teacher = Tensor(activations()[1].h_T.data.copy())
    rows = list(batch) * ccfg.views

    def components():
        cb, acts = activations()
        return {
            "id": lambda: intent_loss(acts.p_final, intent_targets(rows, labels)),
            "sf": lambda: slot_loss(acts.r, slot_targets(rows, labels, acts.r.shape[1]), acts.span_mask),
            "id_scl": lambda: intent_scl_loss(cb, ccfg),
            "sf_scl": lambda: slot_scl_loss(cb, ccfg),
            "sd": lambda: self_distillation_loss(acts.h_S, teacher),
        }

    if component == "joint":
        return (lambda: joint_loss({k: v() for k, v in components().items()}, weights)), params
    return (lambda: components()[component]()), params


def run_gradcheck(component: str, trials: int = 20, seed: int = 0, max_entries: int | None = 4,
                  epsilon: float = 1e-5) -> GradcheckResult:
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}; choose from {', '.join(COMPONENTS)}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    t0 = time.perf_counter()
    worst_err, worst = 0.0, None
    with C.precision(np.float64):
        for t in range(trials):
            f, params = _trial_function(component, seed * 10_007 + t)
            err, at = C.finite_diff_check(f, params, epsilon, max_entries, np.random.default_rng(t), return_worst=True)
            if worst is None or err > worst_err:
                worst_err, worst = err, at
    return GradcheckResult(component, trials, worst_err, worst, time.perf_counter() - t0)

