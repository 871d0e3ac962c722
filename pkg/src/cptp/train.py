"""Minibatch training with Adam, global-norm clipping and early stopping."""

from __future__ import annotations

import csv
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data import Batch, CaseRecord, Vocabulary, make_batches
from .metrics import DEFAULT_TABLE, EvalReport, ScoreTable, evaluate
from .objective import LossConfig, loss_tensor, total_term

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    clip: float = 5.0
    seed: int = 0
    optimizer: str = "adam"
    loss: LossConfig = field(default_factory=LossConfig)
    normalize: bool = True  # divide the batch loss by its instance count
    init_head_bias: bool = True  # start the output bias at the median training target

    def __post_init__(self):
        if self.lr < 0 or self.eps <= 0 or self.clip <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("training hyperparameters must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Adam:
    def __init__(self, params: Sequence[dc.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: Sequence[dc.Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for p, g in zip(self.params, grads):
            p.value -= self.lr * g


def make_optimizer(model, config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(model.parameters(), config.lr)
    return Adam(model.parameters(), config.lr, config.betas, config.eps)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def batch_loss(model, batch: Batch, loss_config: LossConfig) -> dc.Tensor:
    """Sum of per-instance losses over a batch (not normalized)."""
    pred = model.forward(batch.tokens, batch.mask, batch.charges)
    return dc.sum_all(loss_tensor(pred, batch.terms, loss_config))


def _param_norms(model) -> dict[str, float]:
    return {p.name: float(np.linalg.norm(p.value)) for p in model.parameters()}


def train_epoch(model, batches: Sequence[Batch], config: TrainConfig, optimizer=None) -> float:
    """One pass over ``batches``; returns mean per-instance loss."""
    optimizer = optimizer or make_optimizer(model, config)
    params = model.parameters()
    total, count = 0.0, 0
    for bid, batch in enumerate(batches):
        try:
            with dc.Graph() as g:
                summed = batch_loss(model, batch, config.loss)
                loss = dc.mul(summed, 1.0 / len(batch)) if config.normalize else summed
        except dc.NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite forward in batch {bid}: {exc}; "
                                   f"parameter norms {_param_norms(model)}") from exc
        if not np.isfinite(loss.value):
            raise TrainingDiverged(f"NaN loss in batch {bid}; parameter norms {_param_norms(model)}")
        grads = [gr.copy() for gr in dc.backward(g, loss, params)]
        clip_global_norm(grads, config.clip)
        optimizer.step(grads)
        total += summed.item()
        count += len(batch)
    return total / max(count, 1)


# ----------------------------------------------------------------- prediction


def model_unit(model) -> str:
    """``charge`` for per-charge predictors, ``case`` for direct total-term ones."""
    cfg = model.config
    if getattr(cfg, "kind", None) in ("cnn", "rnn", "rcnn") and not cfg.charge_aware:
        return "case"
    return "charge"


@dataclass
class Prediction:
    case_id: str
    charge: str
    gold: float
    pred: float


def predict_records(model, records: Sequence[CaseRecord], vocab: Vocabulary, batch_size: int = 64) -> list[Prediction]:
    """Forward pass over every instance, returned in record order."""
    unit = model_unit(model)
    order = {r.case_id: i for i, r in enumerate(records)}
    out = []
    for b in make_batches(records, vocab, batch_size, unit=unit):
        y = model.forward(b.tokens, b.mask, b.charges).value
        out += [Prediction(cid, ch, float(t), float(p))
                for cid, ch, t, p in zip(b.case_ids, b.charge_labels, b.terms, y)]
    if unit == "charge":
        pos = {(r.case_id, c): j for r in records for j, c in enumerate(r.charges)}
        out.sort(key=lambda p: (order[p.case_id], pos[(p.case_id, p.charge)]))
    else:
        out.sort(key=lambda p: order[p.case_id])
    return out


def total_predictions(preds: Sequence[Prediction], records: Sequence[CaseRecord], cap: float = 240.0) -> list[Prediction]:
    """Combine per-charge predictions into one total-term prediction per case."""
    grouped: dict[str, list[float]] = defaultdict(list)
    for p in preds:
        grouped[p.case_id].append(p.pred)
    return [Prediction(r.case_id, "", float(r.total_gold), total_term(grouped[r.case_id], cap))
            for r in records]


def evaluate_model(model, records, vocab, level: str = "charge", table: ScoreTable = DEFAULT_TABLE,
                   ps=(0.1, 0.2), batch_size: int = 64) -> EvalReport:
    preds = predict_records(model, records, vocab, batch_size)
    if level == "total" and model_unit(model) == "charge":
        preds = total_predictions(preds, records)
    elif level == "charge" and model_unit(model) == "case":
        raise ValueError("a total-term model cannot be evaluated at charge level")
    return evaluate([(p.gold, p.pred) for p in preds], table, ps, level=level)


# ----------------------------------------------------------------- fit


@dataclass
class EpochLog:
    epoch: int
    loss: float
    report: EvalReport
    seconds: float
    selected: bool = False


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)

    @property
    def best(self) -> EpochLog:
        return next(e for e in self.epochs if e.selected)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "S", "EM", "acc01", "acc02", "seconds", "selected"])
            for e in self.epochs:
                r = e.report
                w.writerow([e.epoch, f"{e.loss:.6f}", f"{r.S:.2f}", f"{r.EM:.2f}",
                            f"{r.acc.get(0.1, float('nan')):.2f}", f"{r.acc.get(0.2, float('nan')):.2f}",
                            f"{e.seconds:.3f}", int(e.selected)])


def fit(model, train: Sequence[CaseRecord], valid: Sequence[CaseRecord], vocab: Vocabulary,
        config: TrainConfig = TrainConfig(), table: ScoreTable = DEFAULT_TABLE):
    """Train until validation S stops improving for ``patience`` epochs.

    The parameters of the best epoch are restored into ``model`` before it
    is returned together with the log.
    """
    if not train or not valid:
        raise ValueError("fit needs nonempty train and validation splits")
    unit = model_unit(model)
    level = "total" if unit == "case" else "charge"
    if config.init_head_bias:
        targets = [t for r in train for t in (r.terms if unit == "charge" else [r.total_gold])]
        model.head_b.value[:] = float(np.median(targets))
    optimizer = make_optimizer(model, config)
    params = model.parameters()
    history = TrainLog()
    best_s, best_vals, stale = -np.inf, None, 0
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        batches = make_batches(train, vocab, config.batch_size, shuffle_seed=config.seed * 1000 + epoch, unit=unit)
        loss = train_epoch(model, batches, config, optimizer)
        report = evaluate_model(model, valid, vocab, level, table)
        entry = EpochLog(epoch, loss, report, time.perf_counter() - start)
        history.epochs.append(entry)
        log.info("epoch %d loss %.4f valid S %.2f", epoch, loss, report.S)
        if report.S > best_s:
            best_s, stale = report.S, 0
            best_vals = [p.value.copy() for p in params]
            best_epoch = entry
        else:
            stale += 1
            if stale >= config.patience:
                break
    for p, v in zip(params, best_vals):
        p.value[...] = v
    best_epoch.selected = True
    return model, history
