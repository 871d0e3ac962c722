"""Case records, judgment parsing, vocabulary, synthetic corpora and batching."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .diffcore import ContractError
from .objective import total_term

MIN_TERM, MAX_TERM = 1, 240
PAD, UNK = 0, 1

Tokenizer = Callable[[str], list[str]]

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and isolate punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


def combined_gold(terms: Sequence[int]) -> int:
    """Gold total term: the combination rule on gold terms, rounded half up."""
    return max(MIN_TERM, int(np.floor(total_term(terms) + 0.5)))


class InvalidRecord(ValueError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass
class CaseRecord:
    case_id: str
    fact: list[str]
    charges: list[str]
    terms: list[int]
    text: str = ""

    def validate(self) -> "CaseRecord":
        if not self.charges:
            raise InvalidRecord("no-charges", self.case_id)
        if len(self.charges) != len(self.terms):
            raise InvalidRecord("misaligned", self.case_id)
        if any(not MIN_TERM <= t <= MAX_TERM for t in self.terms):
            raise InvalidRecord("out-of-range", self.case_id)
        if not self.fact:
            raise InvalidRecord("empty-fact", self.case_id)
        return self

    @property
    def total_gold(self) -> int:
        return combined_gold(self.terms)

    def to_json(self) -> dict:
        return {"id": self.case_id, "fact": self.text or " ".join(self.fact),
                "charges": list(self.charges), "terms": list(self.terms)}


def record_from_json(obj: dict, tokenizer: Tokenizer = tokenize) -> CaseRecord:
    try:
        text = obj["fact"]
        rec = CaseRecord(str(obj["id"]), tokenizer(text), list(obj["charges"]),
                         [int(t) for t in obj["terms"]], text)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidRecord("malformed", repr(exc)) from exc
    return rec.validate()


def load_jsonl(path: str | Path, tokenizer: Tokenizer = tokenize) -> tuple[list[CaseRecord], Counter]:
    """Load a dataset; invalid lines are dropped and counted by reason."""
    records, rejected = [], Counter()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                records.append(record_from_json(json.loads(line), tokenizer))
            except json.JSONDecodeError:
                rejected["malformed"] += 1
            except InvalidRecord as exc:
                rejected[exc.reason] += 1
    return records, rejected


def save_jsonl(records: Iterable[CaseRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


# ----------------------------------------------------------------- extraction

DEFAULT_PATTERNS = (
    r"sentenced to (?P<months>\d+) months? imprisonment for (?P<charge>[a-z][a-z ]*?)\s*[.;]",
)


def compile_patterns(patterns: Sequence[str]) -> list[re.Pattern]:
    compiled = []
    for p in patterns:
        rx = re.compile(p)
        if not {"charge", "months"} <= set(rx.groupindex):
            raise ValueError(f"pattern lacks named groups charge/months: {p!r}")
        compiled.append(rx)
    return compiled


def load_patterns(path: str | Path) -> list[re.Pattern]:
    lines = [ln.rstrip("\n") for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    return compile_patterns([ln for ln in lines if ln.strip()])


def extract_record(text: str, patterns: Sequence[re.Pattern] | None = None) -> list[tuple[str, int]]:
    """(charge, months) fragments in document order.

    Matches from all patterns are merged; overlapping matches keep the one
    that starts first. Raises :class:`InvalidRecord` with reason
    ``out-of-range`` when a sentence falls outside [1, 240] months.
    """
    if not text:
        raise ValueError("empty judgment text")
    patterns = compile_patterns(DEFAULT_PATTERNS) if patterns is None else patterns
    spans = sorted((m.start(), -m.end(), m) for rx in patterns for m in rx.finditer(text))
    fragments, last_end = [], -1
    for start, neg_end, m in spans:
        if start < last_end:
            continue
        last_end = -neg_end
        months = int(m.group("months"))
        if not MIN_TERM <= months <= MAX_TERM:
            raise InvalidRecord("out-of-range", f"{months} months")
        fragments.append((m.group("charge").strip(), months))
    return fragments


# ----------------------------------------------------------------- vocabulary


@dataclass
class Vocabulary:
    tokens: list[str]
    charges: list[str]
    _index: dict[str, int] = field(init=False, repr=False)
    _charge_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {t: i + 2 for i, t in enumerate(self.tokens)}
        self._charge_index = {c: i for i, c in enumerate(self.charges)}

    def __len__(self) -> int:
        return len(self.tokens) + 2

    def index(self, token: str) -> int:
        if token == "<pad>":
            return PAD
        return self._index.get(token, UNK)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, UNK) for t in tokens]

    def charge_index(self, label: str) -> int:
        try:
            return self._charge_index[label]
        except KeyError:
            raise KeyError(f"unknown charge {label!r}") from None

    def mapping(self) -> dict[str, int]:
        return {"<pad>": PAD, "<unk>": UNK, **self._index}

    def save(self, token_path: str | Path, charge_path: str | Path) -> None:
        Path(token_path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")
        Path(charge_path).write_text("".join(c + "\n" for c in self.charges), encoding="utf-8")

    @classmethod
    def load(cls, token_path: str | Path, charge_path: str | Path) -> "Vocabulary":
        def read(p):
            return Path(p).read_text(encoding="utf-8").splitlines()
        return cls(read(token_path), read(charge_path))


def build_vocab(corpus: Sequence[CaseRecord], min_count: int = 1, extra_charges: Iterable[str] = ()) -> Vocabulary:
    """Tokens by (frequency desc, token asc); charges sorted, including ``extra_charges``."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    if not corpus:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    counts = Counter(t for r in corpus for t in r.fact)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    charges = sorted({c for r in corpus for c in r.charges} | set(extra_charges))
    return Vocabulary(kept, charges)


# ----------------------------------------------------------------- synthetic corpus


@dataclass
class SynthSpec:
    """Generator for charge-conditioned cases with interleaved clauses.

    Each charge owns a keyword pair; a clause reads
    ``the defendant <kw0> [modifiers] <kw1> .`` and the gold term is the
    base term times the product of the modifier factors in that clause.
    """

    charges: dict[str, tuple[int, tuple[str, ...]]] = field(default_factory=lambda: {
        "theft": (12, ("stole", "wallet")),
        "fraud": (36, ("deceived", "investors")),
        "robbery": (60, ("threatened", "cashier")),
        "assault": (18, ("punched", "neighbor")),
        "burglary": (30, ("entered", "warehouse")),
        "arson": (48, ("ignited", "barn")),
        "smuggling": (72, ("concealed", "cargo")),
        "bribery": (24, ("paid", "official")),
    })
    modifiers: dict[str, float] = field(default_factory=lambda: {
        "repeatedly": 2.0, "violently": 1.5, "jointly": 1.25,
        "briefly": 0.5, "remorsefully": 0.75, "massively": 3.0,
    })
    distractors: tuple[str, ...] = (
        "the", "witness", "said", "police", "arrived", "later", "records", "show",
        "neighbors", "reported", "noise", "on", "monday", "camera", "footage", "was", "reviewed",
    )
    charges_per_case: dict[int, float] = field(default_factory=lambda: {1: 0.3, 2: 0.45, 3: 0.25})
    modifiers_per_clause: dict[int, float] = field(default_factory=lambda: {0: 0.3, 1: 0.45, 2: 0.25})
    distractor_sentences: tuple[int, int] = (1, 3)
    distractor_length: tuple[int, int] = (3, 6)
    seed: int = 0

    def check(self) -> None:
        owners: dict[str, str] = {}
        for name, (base, kws) in self.charges.items():
            if not MIN_TERM <= base <= MAX_TERM:
                raise ValueError(f"base term of {name} outside [1, 240]")
            for kw in kws:
                if kw in owners:
                    raise ValueError(f"keyword {kw!r} shared by {owners[kw]} and {name}")
                owners[kw] = name
        if any(f <= 0 for f in self.modifiers.values()):
            raise ValueError("modifier factors must be positive")
        if max(self.charges_per_case) > len(self.charges) or min(self.charges_per_case) < 1:
            raise ValueError("charges per case must lie in [1, number of charges]")
        if len(self.modifiers) < max(self.modifiers_per_clause, default=0):
            raise ValueError("not enough modifiers for requested clause size")


@dataclass
class SynthCase:
    record: CaseRecord
    judgment: str


def render_judgment(charges: Sequence[str], terms: Sequence[int]) -> str:
    parts = ["the court finds the defendant guilty ."]
    parts += [f"the defendant is sentenced to {t} months imprisonment for {c} ."
              for c, t in zip(charges, terms)]
    return " ".join(parts)


def _pick(rng: np.random.Generator, dist: dict[int, float]) -> int:
    keys = sorted(dist)
    w = np.array([dist[k] for k in keys], dtype=np.float64)
    return keys[int(rng.choice(len(keys), p=w / w.sum()))]


def gen_synthetic(spec: SynthSpec, count: int, id_prefix: str = "case") -> list[SynthCase]:
    """Deterministic synthetic cases (record plus rendered judgment)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    spec.check()
    rng = np.random.default_rng(spec.seed)
    names = list(spec.charges)
    mod_names = list(spec.modifiers)
    width = len(str(count - 1))
    out = []
    for n in range(count):
        k = _pick(rng, spec.charges_per_case)
        chosen = [names[i] for i in rng.choice(len(names), size=k, replace=False)]
        sentences, terms = [], []
        for name in chosen:
            base, kws = spec.charges[name]
            j = _pick(rng, spec.modifiers_per_clause)
            mods = [mod_names[i] for i in rng.choice(len(mod_names), size=j, replace=False)]
            factor = float(np.prod([spec.modifiers[m] for m in mods])) if mods else 1.0
            terms.append(int(min(MAX_TERM, max(MIN_TERM, np.floor(base * factor + 0.5)))))
            sentences.append(["the", "defendant", kws[0], *mods, *kws[1:], "."])
        lo, hi = spec.distractor_sentences
        for _ in range(int(rng.integers(lo, hi + 1))):
            length = int(rng.integers(spec.distractor_length[0], spec.distractor_length[1] + 1))
            words = [spec.distractors[i] for i in rng.integers(0, len(spec.distractors), size=length)]
            sentences.append(words + ["."])
        order = rng.permutation(len(sentences))
        text = " ".join(" ".join(sentences[i]) for i in order)
        rec = CaseRecord(f"{id_prefix}{n:0{width}d}", tokenize(text), chosen, terms, text).validate()
        out.append(SynthCase(rec, render_judgment(chosen, terms)))
    return out


def split_records(records: Sequence, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> list[list]:
    """Shuffle then cut into consecutive parts sized by ``ratios``."""
    if any(r < 0 for r in ratios) or not sum(ratios) > 0:
        raise ValueError("ratios must be nonnegative with positive sum")
    perm = np.random.default_rng(seed).permutation(len(records))
    total = sum(ratios)
    cuts = np.floor(np.cumsum(ratios)[:-1] / total * len(records) + 0.5).astype(int)
    return [[records[i] for i in part] for part in np.split(perm, cuts)]


# ----------------------------------------------------------------- batching


@dataclass
class Batch:
    tokens: np.ndarray  # [B, T] int
    mask: np.ndarray  # [B, T] bool
    charges: np.ndarray  # [B] int
    terms: np.ndarray  # [B] float
    case_ids: list[str]
    charge_labels: list[str]

    def __len__(self) -> int:
        return len(self.case_ids)


def make_batches(
    records: Sequence[CaseRecord],
    vocab: Vocabulary,
    batch_size: int = 32,
    min_length: int = 5,
    shuffle_seed: int | None = None,
    unit: str = "charge",
) -> list[Batch]:
    """Pad and mask instances into length-bucketed batches.

    ``unit="charge"`` yields one instance per (case, charge) pair with the
    per-charge term as target; ``unit="case"`` yields one instance per case
    with the total term as target. Without a shuffle seed the batches come
    in length order; with one, batch order is permuted deterministically.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if unit not in ("charge", "case"):
        raise ValueError(f"unknown unit {unit!r}")
    instances = []
    for pos, r in enumerate(records):
        ids = vocab.encode(r.fact)
        if unit == "case":
            instances.append((len(ids), pos, 0, ids, 0, float(r.total_gold), r.case_id, ""))
            continue
        for j, (c, t) in enumerate(zip(r.charges, r.terms)):
            instances.append((len(ids), pos, j, ids, vocab.charge_index(c), float(t), r.case_id, c))
    instances.sort(key=lambda x: (x[0], x[1], x[2]))
    batches = []
    for s in range(0, len(instances), batch_size):
        chunk = instances[s:s + batch_size]
        width = max(min_length, max(x[0] for x in chunk))
        tokens = np.full((len(chunk), width), PAD, dtype=np.int64)
        mask = np.zeros((len(chunk), width), dtype=bool)
        for row, inst in enumerate(chunk):
            tokens[row, :inst[0]] = inst[3]
            mask[row, :inst[0]] = True
        batches.append(Batch(tokens, mask,
                             np.array([x[4] for x in chunk], dtype=np.int64),
                             np.array([x[5] for x in chunk], dtype=np.float64),
                             [x[6] for x in chunk], [x[7] for x in chunk]))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(batches))
        batches = [batches[i] for i in order]
    return batches
