"""Label construction, BCE-with-logits, teacher adaptation and the blended KD objective."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from . import engine as E
from .engine import Tensor
from .engine.ops import stable_sigmoid, stable_softplus

log = logging.getLogger(__name__)

LABELS = ("NF", "ECM", "CM", "LO", "LL", "ED", "CON", "PNA", "ATL", "PTX", "PE", "PO", "FX", "SD")
CHEXPERT_COLUMNS = (
    "No Finding", "Enlarged Cardiomediastinum", "Cardiomegaly", "Lung Opacity", "Lung Lesion",
    "Edema", "Consolidation", "Pneumonia", "Atelectasis", "Pneumothorax", "Pleural Effusion",
    "Pleural Other", "Fracture", "Support Devices",
)
NUM_LABELS = 14
NUM_TEACHER = 18
SYNTHESIZE_NF = "SYNTHESIZE_NF"
ZERO = "ZERO"
LOGIT_CLAMP = 30.0


class LabelError(ValueError):
    pass


def _parse_symbol(v):
    if v is None:
        return None
    if isinstance(v, str):
        s = v.strip()
        if s == "":
            return None
        try:
            v = float(s)
        except ValueError:
            return s
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def u1_map(row: Sequence, row_id=None) -> np.ndarray:
    """U-1 protocol: 1 and -1 (uncertain) become positive, 0 and blank negative."""
    if len(row) != NUM_LABELS:
        raise LabelError(f"row {row_id}: expected {NUM_LABELS} entries, got {len(row)}")
    out = np.zeros(NUM_LABELS, dtype=np.int8)
    for j, raw in enumerate(row):
        v = _parse_symbol(raw)
        if v is None or v == 0:
            continue
        if v == 1 or v == -1:
            out[j] = 1
            continue
        raise LabelError(f"row {row_id}: unknown label symbol {raw!r} in column {LABELS[j]}")
    return out


def _const(y, like: Tensor) -> np.ndarray:
    arr = y.values if isinstance(y, Tensor) else np.asarray(y)
    return arr.astype(like.dtype, copy=False)


def _check_finite(o: Tensor, what: str) -> None:
    if not np.all(np.isfinite(o.values)):
        raise FloatingPointError(f"non-finite {what}")


def bcewl(o: Tensor, y) -> Tensor:
    """Binary cross-entropy on logits: class-summed, batch-averaged.

    Uses ``softplus(o) - o*y`` (== ``max(o,0) - o*y + log1p(exp(-|o|))``) so
    neither tail overflows. Soft targets in ``[0, 1]`` are allowed.
    """
    yv = _const(y, o)
    if yv.shape != o.shape:
        raise ValueError(f"logit shape {o.shape} != target shape {yv.shape}")
    _check_finite(o, "logits passed to bcewl")
    B = o.shape[0]
    elem = E.sub(E.softplus(o), E.mul(o, Tensor(yv, dtype=o.dtype)))
    return E.scale(E.sum_(elem), 1.0 / B)


# ---------------------------------------------------------------------------
# teacher adapter


@dataclass(frozen=True)
class TeacherAdapterSpec:
    """Student index -> teacher index, ``SYNTHESIZE_NF`` or ``ZERO``."""

    index_map: tuple

    def __post_init__(self):
        m = self.index_map
        if len(m) != NUM_LABELS:
            raise ValueError(f"adapter map must cover {NUM_LABELS} student labels, got {len(m)}")
        nf = [k for k, v in enumerate(m) if v == SYNTHESIZE_NF]
        if len(nf) != 1:
            raise ValueError(f"exactly one student index must map to {SYNTHESIZE_NF}, found {len(nf)}")
        used = [v for v in m if not isinstance(v, str)]
        for v in m:
            if isinstance(v, str) and v not in (SYNTHESIZE_NF, ZERO):
                raise ValueError(f"unknown adapter sentinel {v!r}")
        for v in used:
            if not isinstance(v, int) or not 0 <= v < NUM_TEACHER:
                raise ValueError(f"teacher index {v!r} out of range 0..{NUM_TEACHER - 1}")
        if len(set(used)) != len(used):
            raise ValueError("a teacher index is referenced more than once")

    @classmethod
    def from_dict(cls, doc: dict) -> "TeacherAdapterSpec":
        if set(doc) != {"map"}:
            raise ValueError("adapter document must contain exactly the key 'map'")
        raw = doc["map"]
        keys = sorted(raw, key=lambda s: int(s))
        if [int(k) for k in keys] != list(range(NUM_LABELS)):
            raise ValueError(f"adapter map keys must be exactly '0'..'{NUM_LABELS - 1}'")
        entries = []
        for k in keys:
            v = raw[k]
            if isinstance(v, bool) or not isinstance(v, (int, str)):
                raise ValueError(f"adapter entry {k}: expected int or sentinel, got {v!r}")
            entries.append(v)
        return cls(tuple(entries))

    @classmethod
    def from_json(cls, path) -> "TeacherAdapterSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> "TeacherAdapterSpec":
        text = resources.files("mxa.resources").joinpath("teacher_map_chex.json").read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {"map": {str(k): v for k, v in enumerate(self.index_map)}}

    @property
    def nf_index(self) -> int:
        return self.index_map.index(SYNTHESIZE_NF)

    @property
    def contributing(self) -> np.ndarray:
        """False for ZERO-mapped labels, which carry no teacher signal."""
        return np.array([v != ZERO for v in self.index_map])


def no_finding_logit(o_t: np.ndarray) -> np.ndarray:
    """``logit(prod_i (1 - sigmoid(o_i)))`` computed in log space, clamped to +-30."""
    o_t = np.asarray(o_t, dtype=np.float64)
    log_p = -stable_softplus(o_t).sum(axis=-1)
    with np.errstate(divide="ignore"):
        logit = log_p - np.log(-np.expm1(log_p))
    saturated = log_p >= 0
    if np.any(saturated) or np.any(np.abs(logit) > LOGIT_CLAMP):
        if np.any(saturated):
            log.warning("No-Finding probability is numerically 1; clamping its logit to +%g", LOGIT_CLAMP)
        logit = np.where(saturated, LOGIT_CLAMP, np.clip(logit, -LOGIT_CLAMP, LOGIT_CLAMP))
    return logit


def adapt_teacher(o_t, spec: TeacherAdapterSpec) -> np.ndarray:
    """Turn ``B x 18`` teacher logits into ``B x 14`` student-aligned logits."""
    o = np.asarray(o_t.values if isinstance(o_t, Tensor) else o_t, dtype=np.float64)
    if o.ndim != 2 or o.shape[1] != NUM_TEACHER:
        raise ValueError(f"teacher logits must be B x {NUM_TEACHER}, got {o.shape}")
    if not np.all(np.isfinite(o)):
        raise FloatingPointError("non-finite teacher logits")
    out = np.zeros((o.shape[0], NUM_LABELS), dtype=np.float64)
    for k, v in enumerate(spec.index_map):
        if v == SYNTHESIZE_NF:
            out[:, k] = no_finding_logit(o)
        elif v != ZERO:
            out[:, k] = o[:, v]
    return out


def dynamic_weights(p_t, contributing: Optional[np.ndarray] = None) -> np.ndarray:
    """``w_j = 1 - mean_i p_ij``; non-contributing labels get weight 0."""
    p = np.asarray(p_t.values if isinstance(p_t, Tensor) else p_t, dtype=np.float64)
    w = 1.0 - p.mean(axis=0)
    w = np.clip(w, 0.0, 1.0)
    if contributing is not None:
        w = np.where(contributing, w, 0.0)
    return w


def kd_soft_loss(o_s: Tensor, p_t, w) -> Tensor:
    """``(1/C) sum_j w_j * BCE(o_s[:, j], p_t[:, j])`` with BCE averaged over the batch."""
    p = _const(p_t, o_s)
    wv = np.asarray(w, dtype=o_s.dtype)
    if p.shape != o_s.shape or wv.shape != (o_s.shape[1],):
        raise ValueError(f"kd_soft_loss shapes: logits {o_s.shape}, targets {p.shape}, weights {wv.shape}")
    B, C = o_s.shape
    elem = E.sub(E.softplus(o_s), E.mul(o_s, Tensor(p, dtype=o_s.dtype)))
    per_label = E.mean(elem, axis=0)
    weighted = E.mul(per_label, Tensor(wv, dtype=o_s.dtype))
    return E.scale(E.sum_(weighted), 1.0 / C)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    temperature: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def _temper(p: np.ndarray, tau: float) -> np.ndarray:
    if tau == 1.0:
        return p
    q = np.clip(p, 1e-12, 1 - 1e-12)
    return stable_sigmoid((np.log(q) - np.log1p(-q)) / tau)


def total_loss(o_s: Tensor, Y, p_t, w, cfg: LossConfig) -> Tensor:
    """``(1 - alpha) * bcewl(o_s, Y) + alpha * kd_soft_loss``.

    The temperature divides both student logits and teacher logits inside the
    KD term only. Endpoint alphas skip the unused term entirely.
    """
    a = cfg.alpha
    if a == 0.0:
        return bcewl(o_s, Y)
    if p_t is None or w is None:
        raise ValueError("alpha > 0 requires teacher probabilities and weights")
    tau = cfg.temperature
    o_kd = o_s if tau == 1.0 else E.scale(o_s, 1.0 / tau)
    p = _temper(np.asarray(p_t.values if isinstance(p_t, Tensor) else p_t, dtype=np.float64), tau)
    kd = kd_soft_loss(o_kd, p, w)
    if a == 1.0:
        return kd
    return E.add(E.scale(bcewl(o_s, Y), 1.0 - a), E.scale(kd, a))


def teacher_probabilities(adapted: np.ndarray) -> np.ndarray:
    return stable_sigmoid(np.asarray(adapted, dtype=np.float64))

