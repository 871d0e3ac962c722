"""S score, exact match, Acc@p and their aggregation into reports."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .diffcore import ContractError
from .objective import log_delta


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreTable:
    """Bucketed score on the log delta: the first threshold >= delta wins."""

    buckets: tuple[tuple[float, float], ...] = (
        (0.2, 1.0), (0.4, 0.8), (0.6, 0.6), (0.8, 0.4), (1.0, 0.2))
    fallback: float = 0.0

    def __post_init__(self):
        if not self.buckets:
            raise ConfigurationError("score table needs at least one bucket")
        thresholds = [t for t, _ in self.buckets]
        scores = [s for _, s in self.buckets] + [self.fallback]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ConfigurationError("thresholds must be strictly increasing")
        if any(b >= a for a, b in zip(scores, scores[1:])):
            raise ConfigurationError("scores must be strictly decreasing")
        if any(not 0.0 <= s <= 1.0 for s in scores):
            raise ConfigurationError("scores must lie in [0, 1]")

    @classmethod
    def load(cls, path: str | Path) -> "ScoreTable":
        """Read ``threshold,score`` lines; blank lines and ``#`` comments are skipped."""
        buckets = []
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                t, s = (float(x) for x in line.split(","))
            except ValueError as exc:
                raise ConfigurationError(f"bad score table line: {raw!r}") from exc
            buckets.append((t, s))
        return cls(tuple(buckets))


DEFAULT_TABLE = ScoreTable()


def s_score(y: float, y_hat: float, table: ScoreTable = DEFAULT_TABLE) -> float:
    delta = log_delta(y, y_hat)
    for threshold, score in table.buckets:
        if delta <= threshold:
            return score
    return table.fallback


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def exact_match(y: float, y_hat: float) -> bool:
    return round_half_up(y_hat) == y


def acc_at_p(y: float, y_hat: float, p: float) -> bool:
    if p < 0:
        raise ValueError("p must be nonnegative")
    return y * (1 - p) <= y_hat <= y * (1 + p)


@dataclass
class EvalReport:
    S: float
    EM: float
    acc: dict[float, float]
    n: int
    level: str = "charge"

    def lines(self) -> list[str]:
        out = [f"S={self.S:.2f}", f"EM={self.EM:.2f}"]
        out += [f"Acc@{p:g}={v:.2f}" for p, v in self.acc.items()]
        out.append(f"n={self.n}")
        return out

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def csv_rows(self) -> list[tuple]:
        rows = [(self.level, "S", f"{self.S:.2f}", self.n), (self.level, "EM", f"{self.EM:.2f}", self.n)]
        rows += [(self.level, f"Acc@{p:g}", f"{v:.2f}", self.n) for p, v in self.acc.items()]
        return rows

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "metric", "value", "n"])
            w.writerows(self.csv_rows())


def evaluate(
    pairs: Sequence[tuple[float, float]],
    table: ScoreTable = DEFAULT_TABLE,
    ps: Iterable[float] = (0.1, 0.2),
    level: str = "charge",
    groups: Sequence | None = None,
) -> EvalReport:
    """Aggregate ``(gold, predicted)`` pairs into percentages.

    Micro average by default. Passing ``groups`` (one key per pair, e.g. a
    case id) switches to a macro average: metrics are averaged within each
    group first, then across groups.
    """
    if not pairs:
        raise ContractError("evaluate needs at least one pair")
    ps = tuple(ps)

    def summarize(subset):
        n = len(subset)
        s = math.fsum(s_score(y, yh, table) for y, yh in subset) / n
        em = sum(exact_match(y, yh) for y, yh in subset) / n
        acc = {p: sum(acc_at_p(y, yh, p) for y, yh in subset) / n for p in ps}
        return s, em, acc

    if groups is None:
        s, em, acc = summarize(pairs)
    else:
        if len(groups) != len(pairs):
            raise ContractError("groups must align with pairs")
        bucketed: dict = defaultdict(list)
        for key, pair in zip(groups, pairs):
            bucketed[key].append(pair)
        parts = [summarize(v) for v in bucketed.values()]
        k = len(parts)
        s = math.fsum(x[0] for x in parts) / k
        em = math.fsum(x[1] for x in parts) / k
        acc = {p: math.fsum(x[2][p] for x in parts) / k for p in ps}
    return EvalReport(S=100 * s, EM=100 * em, acc={p: 100 * v for p, v in acc.items()},
                      n=len(pairs), level=level)
