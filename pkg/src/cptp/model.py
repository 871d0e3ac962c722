"""Deep Gating Network encoder, baseline encoders and checkpoint I/O.

All forward functions are batched: token matrices are ``[B, T]`` with a
boolean mask of real positions, hidden states are ``[B, T, D]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Tensor


class VocabularyError(IndexError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class DgnConfig:
    vocab_size: int
    charge_count: int
    embed_dim: int = 64
    charge_dim: int = 32
    hidden_dim: int = 64
    depth: int = 3
    filter_widths: tuple[int, ...] = (1, 2, 3, 4, 5)
    filters: int = 32
    charge_blind: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "filter_widths", tuple(self.filter_widths))
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        dims = (self.vocab_size, self.charge_count, self.embed_dim, self.charge_dim,
                self.hidden_dim, self.filters)
        if min(dims) < 1:
            raise ValueError("all dimensions must be >= 1")
        w = self.filter_widths
        if not w or w[0] < 1 or any(b <= a for a, b in zip(w, w[1:])):
            raise ValueError("filter widths must be strictly increasing positive integers")


@dataclass(frozen=True)
class BaselineConfig:
    """CNN, RNN or RCNN document encoder with the same ReLU head.

    ``charge_aware`` appends the charge embedding to the pooled document
    vector so the encoder can be trained on per-charge targets.
    """

    vocab_size: int
    charge_count: int
    kind: str = "rnn"
    embed_dim: int = 64
    charge_dim: int = 32
    hidden_dim: int = 64
    filter_widths: tuple[int, ...] = (1, 2, 3, 4, 5)
    filters: int = 32
    charge_aware: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "filter_widths", tuple(self.filter_widths))
        if self.kind not in ("cnn", "rnn", "rcnn"):
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if min(self.vocab_size, self.charge_count, self.embed_dim, self.charge_dim,
               self.hidden_dim, self.filters) < 1:
            raise ValueError("all dimensions must be >= 1")


def _glorot(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class LstmParams:
    w_in: Tensor
    w_rec: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, d_in: int, hid: int, prefix: str) -> "LstmParams":
        b = np.zeros(4 * hid)
        b[hid:2 * hid] = 1.0
        return cls(Tensor(_glorot(rng, (d_in, 4 * hid)), True, f"{prefix}.w_in"),
                   Tensor(_glorot(rng, (hid, 4 * hid)), True, f"{prefix}.w_rec"),
                   Tensor(b, True, f"{prefix}.bias"))

    def tensors(self) -> list[Tensor]:
        return [self.w_in, self.w_rec, self.bias]


@dataclass
class GateBlock:
    fwd: LstmParams
    bwd: LstmParams
    gate_w: Tensor  # [2d, 2d + d_c]
    gate_b: Tensor  # [2d]

    def tensors(self) -> list[Tensor]:
        return self.fwd.tensors() + self.bwd.tensors() + [self.gate_w, self.gate_b]


@dataclass
class ConvFilters:
    weights: list[Tensor]  # per width: [F, width * D]
    biases: list[Tensor]  # per width: [F]
    widths: tuple[int, ...]

    @classmethod
    def init(cls, rng, widths: Sequence[int], n_filters: int, dim: int) -> "ConvFilters":
        ws = [Tensor(_glorot(rng, (n_filters, w * dim)), True, f"conv{w}.w") for w in widths]
        bs = [Tensor(np.zeros(n_filters), True, f"conv{w}.b") for w in widths]
        return cls(ws, bs, tuple(widths))

    def tensors(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]


# ----------------------------------------------------------------- layers


def embed_lookup(tokens, table: Tensor) -> Tensor:
    idx = np.asarray(tokens, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise VocabularyError(f"token index outside vocabulary of size {table.shape[0]}")
    return dc.gather(table, idx)


def bilstm_layer(h_in: Tensor, fwd: LstmParams, bwd: LstmParams, mask=None) -> Tensor:
    """Per-position concatenation of left-to-right and right-to-left states."""
    if h_in.shape[1] < 1:
        raise DimensionError("bilstm_layer needs at least one position")
    left = dc.lstm_scan(h_in, mask, fwd.w_in, fwd.w_rec, fwd.bias, reverse=False)
    right = dc.lstm_scan(h_in, mask, bwd.w_in, bwd.w_rec, bwd.bias, reverse=True)
    return dc.concat([left, right], axis=-1)


def gate_layer(h_tilde: Tensor, charge_emb: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """h = sigmoid(W [h_tilde; c] + b) * h_tilde at every position.

    ``charge_emb`` is ``[B, d_c]``, one row per instance.
    """
    steps = h_tilde.shape[1]
    joined = dc.concat([h_tilde, dc.repeat_time(charge_emb, steps)], axis=-1)
    gate = dc.sigmoid(dc.add_bias(dc.matmul(joined, dc.transpose(w)), b))
    return dc.mul(gate, h_tilde)


def conv_encode(h: Tensor, filters: ConvFilters, mask=None) -> Tensor:
    """Max-over-time pooled convolutions, concatenated in width order.

    Windows touching a padded position are excluded from the max.
    """
    bsz, steps, _ = h.shape
    m = np.ones((bsz, steps), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    pooled = []
    for width, w, b in zip(filters.widths, filters.weights, filters.biases):
        if steps < width:
            raise DimensionError(f"sequence length {steps} below filter width {width}; pad first")
        n_win = steps - width + 1
        win_mask = np.ones((bsz, n_win), dtype=bool)
        for o in range(width):
            win_mask &= m[:, o:o + n_win]
        feats = dc.add_bias(dc.matmul(dc.unfold(h, width), dc.transpose(w)), b)
        pooled.append(dc.max_over_time(feats, win_mask))
    return dc.concat(pooled, axis=-1)


def _head(z: Tensor, w_o: Tensor, b_o: Tensor) -> Tensor:
    out = dc.relu(dc.add_bias(dc.matmul(z, dc.transpose(w_o)), b_o))
    return dc.reshape(out, (out.shape[0],))


# ----------------------------------------------------------------- models


class DgnModel:
    """Embeddings, ``depth`` (bi-LSTM, charge gate) blocks, CNN, ReLU head."""

    kind = "dgn"

    def __init__(self, config: DgnConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, dw, dcg = config.hidden_dim, config.embed_dim, config.charge_dim
        self.word_emb = Tensor(rng.normal(0, 0.1, (config.vocab_size, dw)), True, "word_emb")
        self.charge_emb = Tensor(rng.normal(0, 0.1, (config.charge_count, dcg)), True, "charge_emb")
        self.blocks = []
        for l in range(config.depth):
            d_in = dw if l == 0 else 2 * d
            self.blocks.append(GateBlock(
                LstmParams.init(rng, d_in, d, f"block{l}.fwd"),
                LstmParams.init(rng, d_in, d, f"block{l}.bwd"),
                Tensor(_glorot(rng, (2 * d, 2 * d + dcg)), True, f"block{l}.gate_w"),
                Tensor(np.zeros(2 * d), True, f"block{l}.gate_b")))
        self.conv = ConvFilters.init(rng, config.filter_widths, config.filters, 2 * d)
        n_out = config.filters * len(config.filter_widths)
        self.head_w = Tensor(_glorot(rng, (1, n_out)), True, "head_w")
        self.head_b = Tensor(np.zeros(1), True, "head_b")

    def parameters(self) -> list[Tensor]:
        out = [self.word_emb, self.charge_emb]
        for blk in self.blocks:
            out += blk.tensors()
        return out + self.conv.tensors() + [self.head_w, self.head_b]

    def gate_charge(self, charge_ids) -> Tensor:
        c = embed_lookup(np.asarray(charge_ids, dtype=np.int64), self.charge_emb)
        if self.config.charge_blind:
            c = dc.mul(c, 0.0)
        return c

    def encode(self, tokens, charge_ids, mask=None) -> Tensor:
        return dgn_encode(tokens, charge_ids, self, mask)

    def forward(self, tokens, mask, charge_ids) -> Tensor:
        z = conv_encode(self.encode(tokens, charge_ids, mask), self.conv, mask)
        return _head(z, self.head_w, self.head_b)


def dgn_encode(tokens, charge_ids, model: DgnModel, mask=None) -> Tensor:
    charge_ids = np.asarray(charge_ids, dtype=np.int64).reshape(-1)
    if charge_ids.size and (charge_ids.min() < 0 or charge_ids.max() >= model.config.charge_count):
        raise VocabularyError("charge id outside charge inventory")
    h = embed_lookup(tokens, model.word_emb)
    c = model.gate_charge(charge_ids)
    for blk in model.blocks:
        h = gate_layer(bilstm_layer(h, blk.fwd, blk.bwd, mask), c, blk.gate_w, blk.gate_b)
    return h


class BaselineModel:
    kind = "baseline"

    def __init__(self, config: BaselineConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, dw = config.hidden_dim, config.embed_dim
        self.word_emb = Tensor(rng.normal(0, 0.1, (config.vocab_size, dw)), True, "word_emb")
        self.charge_emb = (Tensor(rng.normal(0, 0.1, (config.charge_count, config.charge_dim)), True, "charge_emb")
                           if config.charge_aware else None)
        self.lstm = None
        if config.kind in ("rnn", "rcnn"):
            self.lstm = (LstmParams.init(rng, dw, d, "fwd"), LstmParams.init(rng, dw, d, "bwd"))
        self.conv = None
        if config.kind in ("cnn", "rcnn"):
            dim = dw if config.kind == "cnn" else 2 * d
            self.conv = ConvFilters.init(rng, config.filter_widths, config.filters, dim)
        n_out = 2 * d if config.kind == "rnn" else config.filters * len(config.filter_widths)
        if config.charge_aware:
            n_out += config.charge_dim
        self.head_w = Tensor(_glorot(rng, (1, n_out)), True, "head_w")
        self.head_b = Tensor(np.zeros(1), True, "head_b")

    def parameters(self) -> list[Tensor]:
        out = [self.word_emb]
        if self.charge_emb is not None:
            out.append(self.charge_emb)
        if self.lstm is not None:
            out += self.lstm[0].tensors() + self.lstm[1].tensors()
        if self.conv is not None:
            out += self.conv.tensors()
        return out + [self.head_w, self.head_b]

    def represent(self, tokens, mask=None, charge_ids=None) -> Tensor:
        kind = self.config.kind
        h = embed_lookup(tokens, self.word_emb)
        if kind == "cnn":
            z = conv_encode(h, self.conv, mask)
        else:
            states = bilstm_layer(h, *self.lstm, mask)
            if kind == "rcnn":
                z = conv_encode(states, self.conv, mask)
            else:
                d = self.config.hidden_dim
                # masked steps carry state, so the last column holds the final
                # left-to-right state and column 0 the final right-to-left one
                last = dc.select_time(states, states.shape[1] - 1)
                first = dc.select_time(states, 0)
                z = dc.concat([dc.slice_last(last, 0, d), dc.slice_last(first, d, 2 * d)], axis=-1)
        if self.charge_emb is not None:
            z = dc.concat([z, embed_lookup(np.asarray(charge_ids).reshape(-1), self.charge_emb)], axis=-1)
        return z

    def forward(self, tokens, mask, charge_ids=None) -> Tensor:
        return _head(self.represent(tokens, mask, charge_ids), self.head_w, self.head_b)


def _batchify(tokens, mask):
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
    mask = np.ones(tokens.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(tokens.shape)
    return tokens, mask, single


def predict_charge_term(tokens, charge_id, model: DgnModel, mask=None):
    """ReLU(W_o z + b_o) in months. 1-D tokens give a float, 2-D an array."""
    tokens, mask, single = _batchify(tokens, mask)
    charges = np.broadcast_to(np.asarray(charge_id, dtype=np.int64), (tokens.shape[0],))
    y = model.forward(tokens, mask, charges).value
    return float(y[0]) if single else y


def baseline_predict_total(tokens, model: BaselineModel, mask=None, charge_id=None):
    tokens, mask, single = _batchify(tokens, mask)
    charges = None
    if charge_id is not None:
        charges = np.broadcast_to(np.asarray(charge_id, dtype=np.int64), (tokens.shape[0],))
    y = model.forward(tokens, mask, charges).value
    return float(y[0]) if single else y


# ----------------------------------------------------------------- checkpoints

_MAGIC = b"CPTPCKPT"
_VERSION = 1


def _config_payload(model) -> dict:
    return {"kind": model.kind, "config": asdict(model.config)}


def build_model(kind: str, config: dict):
    if kind == "dgn":
        return DgnModel(DgnConfig(**config))
    if kind == "baseline":
        return BaselineModel(BaselineConfig(**config))
    raise CheckpointError(f"unknown model kind {kind!r}")


def save_checkpoint(model, path: str | Path) -> None:
    """Version tag, JSON config, then float64 little-endian arrays in declaration order."""
    header = json.dumps(_config_payload(model), sort_keys=True).encode("utf-8")
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = (p.name or "").encode("utf-8")
            fh.write(struct.pack("<II", len(name), p.value.ndim))
            fh.write(name)
            fh.write(struct.pack(f"<{p.value.ndim}I", *p.shape))
            fh.write(p.value.astype("<f8").tobytes())


def load_checkpoint(path: str | Path, expected_config=None):
    """Rebuild a model from disk; raises :class:`CheckpointError` on any mismatch."""
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    cfg = header["config"]
    if "filter_widths" in cfg:
        cfg["filter_widths"] = tuple(cfg["filter_widths"])
    model = build_model(header["kind"], cfg)
    if expected_config is not None and expected_config != model.config:
        raise CheckpointError(f"config mismatch: file has {model.config}, expected {expected_config}")
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params = model.parameters()
    if count != len(params):
        raise CheckpointError(f"checkpoint holds {count} arrays, model declares {len(params)}")
    for p in params:
        nlen, ndim = struct.unpack_from("<II", raw, pos)
        pos += 8
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        if name != (p.name or "") or tuple(shape) != p.shape:
            raise CheckpointError(f"array {name}{shape} does not match {p.name}{p.shape}")
        size = int(np.prod(shape)) * 8
        p.value[...] = np.frombuffer(raw[pos:pos + size], dtype="<f8").reshape(shape)
        pos += size
    return model
