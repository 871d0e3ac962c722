"""Desk-scale experiment protocols: charge-conditioning and total-term orderings."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import CaseRecord, SynthSpec, build_vocab, gen_synthetic, make_batches
from .model import BaselineConfig, BaselineModel, DgnConfig, DgnModel
from .train import TrainConfig, evaluate_model, fit, make_optimizer, train_epoch

log = logging.getLogger(__name__)


@dataclass
class Corpus:
    train: list[CaseRecord]
    valid: list[CaseRecord]
    test: list[CaseRecord]


def multi_charge_corpus(seed: int, n_train: int = 2000, n_valid: int = 250, n_test: int = 250) -> Corpus:
    """Cases with two or three interleaved charges each."""
    spec = SynthSpec(seed=seed, charges_per_case={2: 0.6, 3: 0.4})
    recs = [c.record for c in gen_synthetic(spec, n_train + n_valid + n_test)]
    return Corpus(recs[:n_train], recs[n_train:n_train + n_valid], recs[n_train + n_valid:])


@dataclass
class ModelDims:
    embed_dim: int = 32
    charge_dim: int = 16
    hidden_dim: int = 32
    depth: int = 2
    filters: int = 16


@dataclass
class OrderingResult:
    seed: int
    valid_S: dict[str, float] = field(default_factory=dict)
    total_S: dict[str, float] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    @property
    def margin_over_blind(self) -> float:
        return self.valid_S["dgn"] - self.valid_S["dgn_blind"]

    @property
    def margin_over_rnn(self) -> float:
        return self.valid_S["dgn"] - self.valid_S["rnn_charge"]

    @property
    def total_margin(self) -> float:
        return self.total_S["dgn"] - self.total_S["rnn_total"]


def ordering_trial(seed: int, dims: ModelDims = ModelDims(), epochs: int = 15, patience: int = 4,
                   corpus: Corpus | None = None) -> OrderingResult:
    """Train DGN, its charge-blind ablation, and RNN baselines on one corpus.

    Charge-level numbers are best-epoch validation S. Total-level numbers are
    test-split S: DGN via the combination rule, the RNN trained on totals.
    """
    corpus = corpus or multi_charge_corpus(seed)
    vocab = build_vocab(corpus.train, extra_charges=[c for r in corpus.valid + corpus.test for c in r.charges])
    tc = TrainConfig(max_epochs=epochs, patience=patience, seed=seed)
    common = dict(vocab_size=len(vocab), charge_count=len(vocab.charges), embed_dim=dims.embed_dim,
                  charge_dim=dims.charge_dim, hidden_dim=dims.hidden_dim, seed=seed)
    models = {
        "dgn": DgnModel(DgnConfig(depth=dims.depth, filters=dims.filters, **common)),
        "dgn_blind": DgnModel(DgnConfig(depth=dims.depth, filters=dims.filters, charge_blind=True, **common)),
        "rnn_charge": BaselineModel(BaselineConfig(kind="rnn", charge_aware=True, **common)),
        "rnn_total": BaselineModel(BaselineConfig(kind="rnn", **common)),
    }
    result = OrderingResult(seed)
    for name, model in models.items():
        start = time.perf_counter()
        model, history = fit(model, corpus.train, corpus.valid, vocab, tc)
        result.seconds[name] = time.perf_counter() - start
        result.valid_S[name] = history.best.report.S
        if name in ("dgn", "rnn_total"):
            result.total_S[name] = evaluate_model(model, corpus.test, vocab, "total").S
        log.info("seed %d %s: valid S %.2f (%.0fs)", seed, name, result.valid_S[name], result.seconds[name])
    return result


@dataclass
class OverfitResult:
    epochs: int
    train_acc02: float
    seconds: float


def overfit_trial(n_cases: int = 200, dims: ModelDims = ModelDims(), max_epochs: int = 200, target: float = 95.0,
                  lr: float = 3e-3, seed: int = 0) -> OverfitResult:
    """Train on a small corpus until training Acc@0.2 reaches ``target`` percent."""
    recs = [c.record for c in gen_synthetic(SynthSpec(seed=seed), n_cases)]
    vocab = build_vocab(recs)
    model = DgnModel(DgnConfig(vocab_size=len(vocab), charge_count=len(vocab.charges), embed_dim=dims.embed_dim,
                               charge_dim=dims.charge_dim, hidden_dim=dims.hidden_dim, depth=dims.depth,
                               filters=dims.filters, seed=seed))
    tc = TrainConfig(lr=lr, seed=seed)
    model.head_b.value[:] = float(np.median([t for r in recs for t in r.terms]))
    optimizer = make_optimizer(model, tc)
    start, acc = time.perf_counter(), 0.0
    for epoch in range(1, max_epochs + 1):
        train_epoch(model, make_batches(recs, vocab, tc.batch_size, shuffle_seed=seed * 1000 + epoch), tc, optimizer)
        acc = evaluate_model(model, recs, vocab).acc[0.2]
        log.info("overfit epoch %d train Acc@0.2 %.2f", epoch, acc)
        if acc >= target:
            break
    return OverfitResult(epoch, acc, time.perf_counter() - start)
