from .data import Dataset, load_dataset, make_dataset, read_logits_csv, write_dataset, write_logits_csv
from .loop import NumericError, TrainResult, evaluate, predict_logits, train
from .metrics import MetricsReport, evaluate_logits, format_auc_table, micro_auc, roc_auc, threshold_metrics
from .optim import PUBLISHED_TRAIN, AdamWState, TrainConfig, adamw_step, clip_gradients, cosine_lr, ema_update
from .synth import SyntheticSpec, default_spec, synth_dataset, synth_teacher_logits

__all__ = [
    "Dataset", "load_dataset", "make_dataset", "read_logits_csv", "write_dataset", "write_logits_csv",
    "NumericError", "TrainResult", "evaluate", "predict_logits", "train",
    "MetricsReport", "evaluate_logits", "format_auc_table", "micro_auc", "roc_auc", "threshold_metrics",
    "PUBLISHED_TRAIN", "AdamWState", "TrainConfig", "adamw_step", "clip_gradients", "cosine_lr", "ema_update",
    "SyntheticSpec", "default_spec", "synth_dataset", "synth_teacher_logits",
]
