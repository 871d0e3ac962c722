"""Log-delta Huber objective and the total-term combination rule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, DomainError, Tensor

LOSS_KINDS = ("lhl", "hl", "mse", "mae")


@dataclass(frozen=True)
class LossConfig:
    a: float = 1.0
    kind: str = "lhl"

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"Huber threshold must be positive, got {self.a}")
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")


@dataclass(frozen=True)
class TermCap:
    cap: float = 240.0

    def __post_init__(self):
        if not self.cap > 0:
            raise ValueError("cap must be positive")


def log_delta(y, y_hat):
    """|ln(y+1) - ln(y_hat+1)|, scalar or array."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if np.any(y < 0) or np.any(y_hat < 0):
        raise DomainError("terms must be nonnegative")
    out = np.abs(np.log1p(y) - np.log1p(y_hat))
    return float(out) if out.ndim == 0 else out


def huber(delta, config: LossConfig = LossConfig()):
    d = np.asarray(delta, dtype=np.float64)
    a = config.a
    out = np.where(d < a, 0.5 * d * d, a * (d - 0.5 * a))
    return float(out) if out.ndim == 0 else out


def case_loss(gold: Sequence[float], predictions: Sequence[float], config: LossConfig = LossConfig()) -> float:
    """Sum over a case's charges of huber(log_delta(y_j, y_hat_j))."""
    if len(gold) != len(predictions):
        raise ContractError(f"{len(predictions)} predictions for {len(gold)} charges")
    return float(sum(huber(log_delta(y, p), config) for y, p in zip(gold, predictions)))


def total_term(predictions: Sequence[float], cap: float = 240.0) -> float:
    """min(cap, (max + sum) / 2) over per-charge predictions."""
    if len(predictions) == 0:
        raise ContractError("total_term needs at least one prediction")
    if any(p < 0 for p in predictions):
        raise DomainError("predictions must be nonnegative")
    return min(float(cap), (max(predictions) + math.fsum(predictions)) / 2.0)


def loss_tensor(pred: Tensor, gold, config: LossConfig = LossConfig()) -> Tensor:
    """Per-instance loss vector for a batch of predictions ``pred[B]``.

    ``lhl`` is Huber on the log delta. ``hl``, ``mse`` and ``mae`` work on
    raw months.
    """
    gold_t = Tensor(np.asarray(gold, dtype=np.float64).reshape(pred.shape))
    if config.kind == "lhl":
        diff = dc.absolute(dc.sub(dc.log1p(gold_t), dc.log1p(pred)))
        return dc.huber(diff, config.a)
    diff = dc.sub(gold_t, pred)
    if config.kind == "hl":
        return dc.huber(dc.absolute(diff), config.a)
    if config.kind == "mse":
        return dc.mul(diff, diff)
    return dc.absolute(diff)
