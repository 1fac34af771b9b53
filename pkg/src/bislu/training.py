"""AdamW, the epoch loop with validation-based checkpoint selection, and grid search."""
from __future__ import annotations

import copy
import dataclasses
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import compute as C
from .compute import RngState, Tensor
from .data import AnnotatedUtterance, DatasetSplits
from .encoder import Vocab, build_vocab
from .losses import (COMPONENTS, ContrastiveConfig, LossWeights, intent_loss, intent_scl_loss, intent_targets,
                     joint_loss, label_penalties, self_distillation_loss, slot_loss, slot_scl_loss, slot_targets)
from .metrics import EvalResult, evaluate
from .model import BiSLU, ModelConfig, PredictionConfig
from .views import build_views

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 30
    weight_decay: float = 1e-2
    adam_eps: float = 1e-8
    betas: tuple[float, float] = (0.9, 0.999)
    clip_norm: float | None = 1.0
    warmup_steps: int = 0
    seed: int = 0
    min_freq: int = 1
    distill_detach: bool = True
    distill_reverse: bool = False
    keep_nonslot: float | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("need lr > 0, epochs >= 1, batch_size >= 1")
        self.betas = tuple(self.betas)
        w = self.loss_weights
        if self.model.remove_intermediate and w.lambda5 > 0:
            raise ValueError("self-distillation needs the intermediate intent head")


# -- optimizer ---------------------------------------------------------------------
@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


class AdamW:
    """Adam with bias correction and decoupled weight decay (p <- p - lr*wd*p)."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-2,
                 clip_norm: float | None = None, warmup_steps: int = 0):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.clip_norm, self.warmup_steps = clip_norm, warmup_steps
        self.state = OptimizerState([np.zeros_like(p.data) for p in self.params],
                                    [np.zeros_like(p.data) for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params))

    def step(self) -> None:
        for name, p in zip(self.names, self.params):
            if not np.all(np.isfinite(p.grad)):
                raise C.NonFiniteError(f"non-finite gradient in parameter {name}")
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / (norm + 1e-6)
        st = self.state
        st.step += 1
        b1, b2 = self.betas
        lr = self.lr
        if self.warmup_steps:
            lr *= min(1.0, st.step / self.warmup_steps)
        bc1, bc2 = 1 - b1 ** st.step, 1 - b2 ** st.step
        for p, m, v in zip(self.params, st.m, st.v):
            g = p.grad * scale if scale != 1.0 else p.grad
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            denom = np.sqrt(v) / math.sqrt(bc2) + self.eps
            p.data -= (lr / bc1) * m / denom


def adamw_step(params: Sequence[Tensor], state: OptimizerState, cfg: TrainConfig) -> None:
    """One functional AdamW update using the gradients stored on ``params``."""
    opt = AdamW([(f"p{i}", p) for i, p in enumerate(params)], cfg.lr, cfg.betas, cfg.adam_eps,
                cfg.weight_decay, cfg.clip_norm, cfg.warmup_steps)
    opt.state = state
    opt.step()


# -- reports -----------------------------------------------------------------------
@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_validation: dict = field(default_factory=dict)

    def records(self, include_timing: bool = True) -> list[dict]:
        if include_timing:
            return [dict(r) for r in self.epochs]
        return [{k: v for k, v in r.items() if k != "seconds"} for r in self.epochs]

    def to_jsonl(self, include_timing: bool = True) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records(include_timing))

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


def _selection_key(res: EvalResult) -> tuple:
    return (res.sentence_accuracy, res.intent_accuracy, res.slot_f1)


def evaluate_model(model: BiSLU, vocab: Vocab, corpus: Sequence[AnnotatedUtterance],
                   pred_cfg: PredictionConfig | None = None) -> EvalResult:
    preds = model.predict([u.words for u in corpus], vocab, pred_cfg)
    return evaluate([(p["intents"], [s.span() for s in p["slots"]]) for p in preds], corpus)


# -- training ------------------------------------------------------------------------
def batch_losses(model: BiSLU, vocab: Vocab, batch: Sequence[AnnotatedUtterance], cfg: TrainConfig,
                 rng: RngState, penalties: Mapping[str, float] | None = None) -> dict[str, Tensor]:
    """All loss components with non-zero weight for one mini-batch (training mode)."""
    w = cfg.loss_weights
    labels = model.labels
    views = cfg.contrastive.views if (w.lambda3 > 0 or w.lambda4 > 0) else 1
    if views > 1 or w.lambda3 > 0 or w.lambda4 > 0:
        cb, acts = build_views(batch, views, model, vocab, rng, cfg.contrastive.nonslot_negatives)
    else:
        cb = None
        acts = model.forward([u.words for u in batch], vocab, training=True, rng=rng)
    rows = list(batch) * views
    out: dict[str, Tensor] = {}
    if w.lambda1 > 0:
        out["id"] = intent_loss(acts.p_final, intent_targets(rows, labels))
    if w.lambda2 > 0:
        gen = rng.generator() if cfg.keep_nonslot is not None else None
        out["sf"] = slot_loss(acts.r, slot_targets(rows, labels, acts.r.shape[1]), acts.span_mask,
                              cfg.keep_nonslot, gen, labels.non_slot_index)
    if w.lambda3 > 0:
        out["id_scl"] = intent_scl_loss(cb, cfg.contrastive, penalties)
    if w.lambda4 > 0:
        out["sf_scl"] = slot_scl_loss(cb, cfg.contrastive)
    if w.lambda5 > 0:
        out["sd"] = self_distillation_loss(acts.h_S, acts.h_T, cfg.distill_detach, cfg.distill_reverse)
    return out


def build_model(cfg: TrainConfig, splits: DatasetSplits, vocab: Vocab) -> BiSLU:
    return BiSLU(cfg.model, splits.labels, len(vocab), RngState(cfg.seed, 0))


def train(splits: DatasetSplits, cfg: TrainConfig, vocab: Vocab | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[TrainReport, BiSLU, Vocab]:
    """Train for ``cfg.epochs``; the returned model holds the epoch with the best
    validation sentence accuracy (ties go to the later epoch)."""
    vocab = vocab or build_vocab(splits.train, cfg.min_freq)
    model = build_model(cfg, splits, vocab)
    opt = AdamW(list(model.named_parameters()), cfg.lr, cfg.betas, cfg.adam_eps, cfg.weight_decay,
                cfg.clip_norm, cfg.warmup_steps)
    base = RngState(cfg.seed)
    shuffle_gen = base.fork(1).generator()
    step_rng = base.fork(2)
    penalties = None
    if cfg.loss_weights.lambda3 > 0:
        penalties = label_penalties(cfg.contrastive, splits.labels.intents, splits.train)
    report = TrainReport()
    best_key, best_state = None, None
    train_set = splits.train
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_gen.permutation(len(train_set))
        sums = {name: 0.0 for name in COMPONENTS + ("joint",)}
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[lo:lo + cfg.batch_size]]
            comps = batch_losses(model, vocab, batch, cfg, step_rng, penalties)
            for name, value in comps.items():
                if not np.isfinite(value.data):
                    raise C.NonFiniteError(f"epoch {epoch}: loss component {name!r} is non-finite")
            loss = joint_loss(comps, cfg.loss_weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for name, value in comps.items():
                sums[name] += float(value.data)
            sums["joint"] += float(loss.data)
            n_batches += 1
        val = evaluate_model(model, vocab, splits.validation, cfg.prediction)
        record = {
            "epoch": epoch,
            "train_loss": {k: v / n_batches for k, v in sums.items() if k == "joint" or k in comps},
            "validation": {"intent_accuracy": val.intent_accuracy, "slot_f1": val.slot_f1,
                           "sentence_accuracy": val.sentence_accuracy},
            "seconds": round(time.perf_counter() - t0, 3),
        }
        report.epochs.append(record)
        key = _selection_key(val)
        if best_key is None or key >= best_key:
            best_key, best_state = key, copy.deepcopy(model.state_dict())
            report.best_epoch, report.best_validation = epoch, val.as_dict()
        log.info("epoch %d loss %.4f val sent %.3f intent %.3f slot_f1 %.3f", epoch,
                 record["train_loss"]["joint"], val.sentence_accuracy, val.intent_accuracy, val.slot_f1)
        if on_epoch:
            on_epoch(record)
    model.load_state_dict(best_state)
    model.eval()
    return report, model, vocab


# -- grid search ------------------------------------------------------------------------
GRID_KEYS = ("lr", "batch_size", "loss_weights", "threshold", "views", "seed", "epochs")


def apply_overrides(cfg: TrainConfig, overrides: Mapping[str, Any]) -> TrainConfig:
    cfg = copy.deepcopy(cfg)
    for key, value in overrides.items():
        if key in ("lr", "batch_size", "seed", "epochs"):
            setattr(cfg, key, value)
        elif key == "loss_weights":
            cfg.loss_weights = LossWeights.normalized(*value)
        elif key == "threshold":
            cfg.prediction = dataclasses.replace(cfg.prediction, threshold=value)
        elif key == "views":
            cfg.contrastive = dataclasses.replace(cfg.contrastive, views=value)
        else:
            raise KeyError(f"unknown grid key {key!r}; expected one of {GRID_KEYS}")
    return cfg


def grid_search(splits: DatasetSplits, base: TrainConfig, grids: Mapping[str, Sequence[Any]],
                vocab: Vocab | None = None) -> tuple[TrainConfig, list[dict]]:
    """Cartesian sweep; picks the point with the best validation sentence accuracy.

    Each returned record holds the overrides, the best validation metrics and
    the full per-epoch report.  Loss-weight grid points are renormalized to the simplex.
    """
    if not grids or any(len(v) == 0 for v in grids.values()):
        raise ValueError("grid search needs at least one value per grid key")
    keys = list(grids)
    results, best, best_key = [], None, None
    for values in itertools.product(*(grids[k] for k in keys)):
        overrides = dict(zip(keys, values))
        cfg = apply_overrides(base, overrides)
        report, _, _ = train(splits, cfg, vocab)
        val = report.best_validation
        key = (val["sentence_accuracy"], val["intent_accuracy"], val["slot_f1"])
        results.append({"overrides": {k: list(v) if isinstance(v, tuple) else v for k, v in overrides.items()},
                        "best_epoch": report.best_epoch, "validation": val,
                        "epochs": report.records(include_timing=False)})
        if best_key is None or key > best_key:
            best_key, best = key, cfg
    return best, results
