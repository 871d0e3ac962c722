"""Command-line entry point: ``python -m cptp <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from . import data as D
from .metrics import DEFAULT_TABLE, ScoreTable, evaluate
from .model import BaselineConfig, BaselineModel, DgnConfig, DgnModel, load_checkpoint, save_checkpoint
from .objective import LOSS_KINDS, LossConfig, total_term
from .train import TrainConfig, evaluate_model, fit, predict_records

log = logging.getLogger("cptp")

SUBCOMMANDS = ("gen-data", "extract", "train", "eval", "predict", "total", "sweep-depth", "compare-loss")

# per-component seed offsets derived from the single --seed flag
DATA_SEED, INIT_SEED, SHUFFLE_SEED = 0, 1, 2


@dataclass
class CommandPlan:
    subcommand: str
    options: dict
    inputs: list[Path] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("depths must be integers >= 1")
    return vals


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="training split (JSON Lines)")
    p.add_argument("--valid", help="validation split for early stopping (default: 10%% held out of --data)")
    p.add_argument("--test", help="held-out split for reporting (harness commands)")
    p.add_argument("--arch", choices=["dgn", "dgn-blind", "cnn", "rnn", "rcnn"], default="dgn",
                   help="encoder; baselines predict the total term directly")
    p.add_argument("--depth", type=_positive_int, default=3, help="number of gating blocks L")
    p.add_argument("--filters", type=_positive_int, default=32, help="filters per width")
    p.add_argument("--embed-dim", type=_positive_int, default=64)
    p.add_argument("--hidden-dim", type=_positive_int, default=64, help="LSTM units per direction")
    p.add_argument("--charge-dim", type=_positive_int, default=32)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--lr", type=_positive_float, default=1e-3)
    p.add_argument("--epochs", type=_positive_int, default=30)
    p.add_argument("--patience", type=_positive_int, default=5)
    p.add_argument("--loss", choices=LOSS_KINDS, default="lhl")
    p.add_argument("--score-table", help="CSV of threshold,score lines replacing the default S buckets")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cptp", description="Charge-based prison term prediction.")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic corpus and its judgment renderings")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cases", type=_positive_int, default=1000)
    p.add_argument("--min-charges", type=_positive_int, default=1)
    p.add_argument("--max-charges", type=_positive_int, default=3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("extract", help="parse judgment texts into a dataset")
    p.add_argument("--data", required=True, help="JSON Lines with id, fact and judgment fields")
    p.add_argument("--out", required=True, help="dataset JSON Lines to write")
    p.add_argument("--patterns", help="file with one regex per line (named groups charge, months)")

    p = sub.add_parser("train", help="fit a model and write a checkpoint")
    _model_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("eval", help="score a model, or a prediction CSV when --model is absent")
    p.add_argument("--model")
    p.add_argument("--data", required=True)
    p.add_argument("--level", choices=["charge", "total"], default="charge")
    p.add_argument("--p", type=float, action="append", help="Acc@p tolerance (repeatable)")
    p.add_argument("--score-table")
    p.add_argument("--out", help="optional CSV report path")

    p = sub.add_parser("predict", help="write per-(case, charge) predictions")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("total", help="combine a prediction CSV into total terms")
    p.add_argument("--data", required=True, help="prediction CSV from predict")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep-depth", help="train and evaluate once per depth")
    _model_flags(p)
    p.add_argument("--depths", type=_int_list, default=[1, 2, 3, 4])
    p.add_argument("--out", required=True, help="CSV path")

    p = sub.add_parser("compare-loss", help="train and evaluate once per loss, relative to lhl")
    _model_flags(p)
    p.add_argument("--losses", default=",".join(LOSS_KINDS))
    p.add_argument("--out", required=True, help="CSV path")
    return parser


def parse_args(argv: list[str] | None = None) -> CommandPlan:
    parser = build_parser()
    ns = parser.parse_args(argv)
    opts = vars(ns)
    cmd = opts.pop("subcommand")
    inputs = [Path(opts[k]) for k in ("data", "valid", "test", "model", "patterns", "score_table")
              if opts.get(k)]
    for path in inputs:
        if not path.exists():
            parser.error(f"input not found: {path}")
    if cmd == "gen-data" and opts["min_charges"] > opts["max_charges"]:
        parser.error("--min-charges exceeds --max-charges")
    if cmd == "compare-loss":
        losses = [x.strip() for x in opts["losses"].split(",") if x.strip()]
        if not losses or any(x not in LOSS_KINDS for x in losses):
            parser.error(f"--losses must be drawn from {','.join(LOSS_KINDS)}")
        if "lhl" not in losses:
            losses.insert(0, "lhl")
        opts["losses"] = losses
    if cmd == "eval" and not opts.get("p"):
        opts["p"] = [0.1, 0.2]
    out = Path(opts["out"]) if opts.get("out") else None
    if out is not None:
        probe = out.absolute().parent
        if cmd == "gen-data":  # the directory is created on demand
            probe = out.absolute()
            while not probe.exists() and probe != probe.parent:
                probe = probe.parent
        if not probe.is_dir() or not os.access(probe, os.W_OK):
            parser.error(f"output location not writable: {out}")
    return CommandPlan(cmd, opts, inputs, [out] if out else [])


# ----------------------------------------------------------------- helpers


@contextmanager
def artifact(path: str | Path):
    """Write to ``<path>.partial`` and rename on success; failures keep the suffix."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    yield tmp
    os.replace(tmp, path)


def _table(opts) -> ScoreTable:
    return ScoreTable.load(opts["score_table"]) if opts.get("score_table") else DEFAULT_TABLE


def _load(path) -> list[D.CaseRecord]:
    records, rejected = D.load_jsonl(path)
    for reason, n in sorted(rejected.items()):
        log.warning("%s: dropped %d records (%s)", path, n, reason)
    if not records:
        raise ValueError(f"no valid records in {path}")
    return records


def _sidecars(ckpt: Path) -> tuple[Path, Path]:
    return ckpt.with_name(ckpt.name + ".vocab"), ckpt.with_name(ckpt.name + ".charges")


def _new_model(opts, vocab: D.Vocabulary, depth: int | None = None):
    common = dict(vocab_size=len(vocab), charge_count=len(vocab.charges), embed_dim=opts["embed_dim"],
                  charge_dim=opts["charge_dim"], hidden_dim=opts["hidden_dim"], filters=opts["filters"],
                  seed=opts["seed"] + INIT_SEED)
    arch = opts["arch"]
    if arch in ("dgn", "dgn-blind"):
        return DgnModel(DgnConfig(depth=depth or opts["depth"], charge_blind=arch == "dgn-blind", **common))
    return BaselineModel(BaselineConfig(kind=arch, **common))


def _train_config(opts, loss: str | None = None) -> TrainConfig:
    return TrainConfig(lr=opts["lr"], batch_size=opts["batch_size"], max_epochs=opts["epochs"],
                       patience=opts["patience"], seed=opts["seed"] + SHUFFLE_SEED,
                       loss=LossConfig(kind=loss or opts["loss"]))


def _fit(opts, depth=None, loss=None):
    train = _load(opts["data"])
    if opts.get("valid"):
        valid = _load(opts["valid"])
    else:
        train, valid = D.split_records(train, (0.9, 0.1), seed=opts["seed"] + DATA_SEED)
        if not train or not valid:
            raise ValueError("need at least two training cases to hold out a validation split")
    vocab = D.build_vocab(train, extra_charges=[c for r in valid for c in r.charges])
    model = _new_model(opts, vocab, depth)
    model, history = fit(model, train, valid, vocab, _train_config(opts, loss), _table(opts))
    return model, vocab, history, valid


def _report_split(opts, valid):
    return _load(opts["test"]) if opts.get("test") else valid


def _level(model) -> str:
    return "total" if isinstance(model, BaselineModel) else "charge"


def _write_csv(path, header, rows) -> None:
    with artifact(path) as tmp, open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ----------------------------------------------------------------- subcommands


def _gen_data(o) -> None:
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    dist = {k: 1.0 for k in range(o["min_charges"], o["max_charges"] + 1)}
    spec = D.SynthSpec(seed=o["seed"] + DATA_SEED, charges_per_case=dist)
    cases = D.gen_synthetic(spec, o["cases"])
    parts = D.split_records(cases, (0.8, 0.1, 0.1), seed=o["seed"] + DATA_SEED)
    for name, part in zip(("train", "valid", "test"), parts):
        part = sorted(part, key=lambda c: c.record.case_id)
        with artifact(out / f"{name}.jsonl") as tmp:
            D.save_jsonl([c.record for c in part], tmp)
    with artifact(out / "judgments.jsonl") as tmp, open(tmp, "w", encoding="utf-8") as fh:
        for c in cases:
            fh.write(json.dumps({"id": c.record.case_id, "fact": c.record.text, "judgment": c.judgment}) + "\n")
    print(f"wrote {len(cases)} cases to {out}")


def _extract(o) -> None:
    patterns = D.load_patterns(o["patterns"]) if o.get("patterns") else None
    kept, rejected = [], []
    with open(o["data"], encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            cid = str(row.get("id", ""))
            try:
                frags = D.extract_record(row["judgment"], patterns)
                if not frags:
                    raise D.InvalidRecord("no-match")
                rec = D.CaseRecord(cid, D.tokenize(row["fact"]), [c for c, _ in frags],
                                   [m for _, m in frags], row["fact"]).validate()
            except D.InvalidRecord as exc:
                rejected.append((cid, exc.reason))
                continue
            kept.append(rec)
    with artifact(o["out"]) as tmp:
        D.save_jsonl(kept, tmp)
    _write_csv(Path(o["out"] + ".rejections.csv"), ["id", "reason"], rejected)
    print(f"extracted {len(kept)} cases, rejected {len(rejected)}")


def _train(o) -> None:
    model, vocab, history, _ = _fit(o)
    out = Path(o["out"])
    with artifact(out) as tmp:
        save_checkpoint(model, tmp)
    tok_path, ch_path = _sidecars(out)
    vocab.save(tok_path, ch_path)
    with artifact(out.with_name(out.name + ".log.csv")) as tmp:
        history.write_csv(tmp)
    best = history.best
    print(f"selected epoch {best.epoch}: valid S={best.report.S:.2f}")


def _load_model(path):
    model = load_checkpoint(path)
    vocab = D.Vocabulary.load(*_sidecars(Path(path)))
    return model, vocab


def _eval(o) -> None:
    table = _table(o)
    if o.get("model"):
        model, vocab = _load_model(o["model"])
        report = evaluate_model(model, _load(o["data"]), vocab, o["level"], table, o["p"])
    else:
        with open(o["data"], newline="") as fh:
            rows = list(csv.DictReader(fh))
        pairs = [(float(r["gold_months"]), float(r["pred_months"])) for r in rows]
        report = evaluate(pairs, table, o["p"], level=o["level"])
    sys.stdout.write(report.to_text())
    if o.get("out"):
        with artifact(o["out"]) as tmp:
            report.write_csv(tmp)


def _predict(o) -> None:
    model, vocab = _load_model(o["model"])
    preds = predict_records(model, _load(o["data"]), vocab)
    _write_csv(o["out"], ["case_id", "charge", "gold_months", "pred_months"],
               [(p.case_id, p.charge, f"{p.gold:g}", f"{p.pred:.4f}") for p in preds])


def _total(o) -> None:
    grouped: OrderedDict[str, list[tuple[float, float]]] = OrderedDict()
    with open(o["data"], newline="") as fh:
        for r in csv.DictReader(fh):
            grouped.setdefault(r["case_id"], []).append((float(r["gold_months"]), float(r["pred_months"])))
    rows = []
    for cid, items in grouped.items():
        gold = D.combined_gold([g for g, _ in items])
        rows.append((cid, gold, f"{total_term([p for _, p in items]):.4f}"))
    _write_csv(o["out"], ["case_id", "gold_months", "pred_months"], rows)


def _sweep_depth(o) -> None:
    if o["arch"] not in ("dgn", "dgn-blind"):
        raise ValueError("sweep-depth needs a gated architecture")
    start = time.perf_counter()
    rows = []
    for depth in o["depths"]:
        model, vocab, _, valid = _fit(o, depth=depth)
        report = evaluate_model(model, _report_split(o, valid), vocab, "charge", _table(o))
        elapsed = time.perf_counter() - start
        rows.append((depth, f"{report.S:.2f}", f"{report.acc[0.2]:.2f}", f"{elapsed:.2f}"))
        print(f"depth={depth} S={report.S:.2f} Acc@0.2={report.acc[0.2]:.2f}")
    _write_csv(o["out"], ["depth", "S", "acc02", "elapsed_seconds"], rows)


def _compare_loss(o) -> None:
    results = OrderedDict()
    for loss in o["losses"]:
        model, vocab, _, valid = _fit(o, loss=loss)
        r = evaluate_model(model, _report_split(o, valid), vocab, _level(model), _table(o))
        results[loss] = (r.S, r.EM, r.acc[0.1], r.acc[0.2])
        print(f"loss={loss} S={r.S:.2f} EM={r.EM:.2f}")
    unit = results["lhl"]

    def rel(v, u):
        return f"{v / u:.4f}" if u else "nan"

    rows = [(name, *(f"{v:.2f}" for v in vals), *(rel(v, u) for v, u in zip(vals, unit)))
            for name, vals in results.items()]
    _write_csv(o["out"], ["loss", "S", "EM", "acc01", "acc02", "S_rel", "EM_rel", "acc01_rel", "acc02_rel"], rows)


_HANDLERS = {
    "gen-data": _gen_data, "extract": _extract, "train": _train, "eval": _eval,
    "predict": _predict, "total": _total, "sweep-depth": _sweep_depth, "compare-loss": _compare_loss,
}


def run(plan: CommandPlan) -> int:
    try:
        _HANDLERS[plan.subcommand](plan.options)
    except Exception as exc:  # any stage failure maps to exit status 1
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    return run(parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
