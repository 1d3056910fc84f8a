"""The training loop: shuffled mini-batches, blended loss, clip, AdamW, EMA, cosine schedule."""

from __future__ import annotations

import contextlib
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..checkpoint import Checkpoint
from ..distillation import LossConfig, TeacherAdapterSpec, bcewl, dynamic_weights, teacher_probabilities, total_loss
from ..engine import Tape, Tensor
from ..model import Model
from .data import Dataset
from .metrics import MetricsReport, evaluate_logits
from .optim import AdamWState, TrainConfig, adamw_step, clip_gradients, cosine_lr, ema_update

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainResult:
    model: Model
    ema: list
    opt: AdamWState
    history: list = field(default_factory=list)
    epoch: int = 0
    steps: int = 0

    def checkpoint(self, use_ema: bool = False) -> Checkpoint:
        names = list(self.model.named_parameters())
        params = self.ema if use_ema else [p.values for p in self.model.parameters()]
        return Checkpoint(
            config=self.model.cfg,
            params={k: np.array(v, copy=True) for k, v in zip(names, params)},
            ema={k: np.array(v, copy=True) for k, v in zip(names, self.ema)},
            adam_m={k: m.copy() for k, m in zip(names, self.opt.m)},
            adam_v={k: v.copy() for k, v in zip(names, self.opt.v)},
            adam_step=self.opt.step,
            epoch=self.epoch,
            seed=self.model.seed,
        )


@contextlib.contextmanager
def swapped_weights(model: Model, arrays):
    """Temporarily load ``arrays`` (e.g. the EMA shadow) into the model."""
    params = model.parameters()
    saved = [p.values.copy() for p in params]
    try:
        for p, a in zip(params, arrays):
            p.values[...] = a
        yield model
    finally:
        for p, s in zip(params, saved):
            p.values[...] = s


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model.forward(images[i:i + batch_size]).values.astype(np.float64))
    if not out:
        return np.zeros((0, model.cfg.num_labels))
    return np.concatenate(out)


def evaluate(model: Model, data: Dataset, batch_size: int = 64) -> MetricsReport:
    logits = predict_logits(model, data.images, batch_size)
    loss = bcewl(Tensor(logits), data.labels.astype(np.float64)).item() if len(data) else None
    return evaluate_logits(logits, data.labels, loss)


def _metrics_entry(report: MetricsReport) -> dict:
    return {
        "auc_macro": report.auc_macro,
        "auc_micro": report.auc_micro,
        "auc_per_label": report.auc_per_label,
        "acc": report.acc,
        "acc_micro": report.acc_micro,
        "f1": report.f1,
        "val_loss": report.loss,
    }


def train(
    model: Model,
    data: Dataset,
    cfg: TrainConfig,
    val_data: Optional[Dataset] = None,
    teacher_adapted: Optional[np.ndarray] = None,
    adapter: Optional[TeacherAdapterSpec] = None,
    log_path=None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train in place and return the final state plus the per-epoch metric log.

    Validation metrics are computed on the EMA weights (top-level keys) and on
    the raw weights (under ``"raw"``). ``teacher_adapted`` holds 14-way adapted
    teacher logits aligned with ``data``; it is required when ``cfg.alpha > 0``.
    """
    loss_cfg = LossConfig(cfg.alpha, cfg.tau)
    if cfg.alpha > 0:
        if teacher_adapted is None:
            raise ValueError("alpha > 0 requires teacher logits")
        teacher_p = teacher_probabilities(teacher_adapted)
        contributing = (adapter or TeacherAdapterSpec.default()).contributing
    else:
        teacher_p = contributing = None
    val = val_data if val_data is not None else data
    n = len(data)
    if n == 0:
        raise ValueError("empty training set")

    params = model.parameters()
    opt = AdamWState([p.values for p in params])
    ema = [p.values.copy() for p in params]
    result = TrainResult(model, ema, opt)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = -(-n // cfg.batch_size)
    labels = data.labels.astype(model.dtype)
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.total_epochs):
            order = rng.permutation(n)
            losses = []
            lr = cosine_lr(epoch, cfg)
            for b in range(steps_per_epoch):
                if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                    break
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                lr = cosine_lr(epoch + b / steps_per_epoch, cfg)
                where = f"epoch {epoch + 1}, batch {b}: samples {[data.ids[i] for i in idx]}"
                try:
                    with Tape() as tape:
                        logits = model.forward(data.images[idx])
                        if teacher_p is not None:
                            p_t = teacher_p[idx]
                            w = dynamic_weights(p_t, contributing)
                            loss = total_loss(logits, labels[idx], p_t, w, loss_cfg)
                        else:
                            loss = total_loss(logits, labels[idx], None, None, loss_cfg)
                except FloatingPointError as exc:
                    raise NumericError(f"{exc} at {where}") from exc
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(f"non-finite loss at {where}")
                tape.backward(loss)
                grads = [p.grad for p in params]
                clip_gradients(grads, cfg.clip_norm)
                if not adamw_step([p.values for p in params], grads, opt, lr, cfg.weight_decay):
                    log.warning("rejected step with non-finite gradients at epoch %d batch %d", epoch + 1, b)
                ema_update(ema, [p.values for p in params], cfg.ema_decay)
                model.zero_grad()
                losses.append(value)
                result.steps += 1
            result.epoch = epoch + 1

            with swapped_weights(model, ema):
                ema_report = evaluate(model, val, cfg.eval_batch_size)
            raw_report = evaluate(model, val, cfg.eval_batch_size)
            entry = {
                "epoch": epoch + 1,
                "lr": lr,
                "loss": float(np.mean(losses)) if losses else None,
                **_metrics_entry(ema_report),
                "raw": _metrics_entry(raw_report),
                "steps": result.steps,
            }
            result.history.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if on_epoch is not None:
                on_epoch(entry)
            log.info("epoch %d loss %.4f val auc %s", epoch + 1, entry["loss"] or float("nan"), entry["auc_macro"])
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    return result
