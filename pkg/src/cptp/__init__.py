"""Charge-based prison term prediction with a Deep Gating Network."""

from .data import CaseRecord, SynthSpec, Vocabulary, build_vocab, extract_record, gen_synthetic, make_batches, tokenize
from .metrics import EvalReport, ScoreTable, acc_at_p, evaluate, exact_match, s_score
from .model import (BaselineConfig, BaselineModel, DgnConfig, DgnModel, baseline_predict_total, load_checkpoint,
                    predict_charge_term, save_checkpoint)
from .objective import LossConfig, case_loss, huber, log_delta, total_term
from .train import TrainConfig, TrainLog, evaluate_model, fit, predict_records, train_epoch

__version__ = "0.1.0"
