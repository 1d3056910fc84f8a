"""Synthetic chest-film stand-ins with planted, label-specific signals."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from ..distillation import LABELS, NUM_LABELS, NUM_TEACHER, TeacherAdapterSpec, u1_map


@dataclass(frozen=True)
class Signal:
    """``rect`` adds ``intensity`` inside a box (pixel coords); ``brightness`` shifts the whole image."""

    kind: str
    intensity: float
    x: int = 0
    y: int = 0
    w: int = 0
    h: int = 0

    def __post_init__(self):
        if self.kind not in ("rect", "brightness"):
            raise ValueError(f"unknown signal kind {self.kind!r}")
        if self.kind == "rect" and (self.w <= 0 or self.h <= 0):
            raise ValueError("rect signals need positive width and height")


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings.

    ``cooccurrence[j][j]`` is the base rate of label j; an off-diagonal entry
    ``cooccurrence[i][j]`` is the probability that a positive label i also
    switches label j on.
    """

    image_size: int
    signals: tuple
    cooccurrence: tuple
    noise_sigma: float = 0.1
    background: float = 0.25
    uncertain_fraction: float = 0.15
    blank_fraction: float = 0.5

    def __post_init__(self):
        if len(self.signals) != NUM_LABELS:
            raise ValueError(f"need {NUM_LABELS} signal descriptors, got {len(self.signals)}")
        co = np.asarray(self.cooccurrence, dtype=np.float64)
        if co.shape != (NUM_LABELS, NUM_LABELS):
            raise ValueError(f"co-occurrence matrix must be {NUM_LABELS}x{NUM_LABELS}, got {co.shape}")
        if np.any(co < 0) or np.any(co > 1) or not np.all(np.isfinite(co)):
            raise ValueError("co-occurrence entries must be probabilities in [0, 1]")
        for s in self.signals:
            if s.kind == "rect" and (s.x < 0 or s.y < 0 or s.x + s.w > self.image_size or s.y + s.h > self.image_size):
                raise ValueError(f"rectangle {s} leaves the {self.image_size}px image")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for name in ("uncertain_fraction", "blank_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def marginals(self) -> np.ndarray:
        return np.diag(np.asarray(self.cooccurrence, dtype=np.float64)).copy()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["signals"] = [asdict(s) for s in self.signals]
        d["cooccurrence"] = [list(r) for r in self.cooccurrence]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        d = dict(d)
        d["signals"] = tuple(Signal(**s) for s in d["signals"])
        d["cooccurrence"] = tuple(tuple(float(v) for v in r) for r in d["cooccurrence"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


DEFAULT_RATES = {
    "NF": 0.3, "ECM": 0.3, "CM": 0.3, "LO": 0.4, "LL": 0.25, "ED": 0.3, "CON": 0.3,
    "PNA": 0.25, "ATL": 0.3, "PTX": 0.2, "PE": 0.35, "PO": 0.15, "FX": 0.05, "SD": 0.4,
}
# label-specific cells on a 4x4 layout of the image; LO is the one global label
_CELLS = {
    "NF": (0, 0), "ECM": (0, 1), "CM": (0, 2), "LL": (0, 3), "ED": (1, 0), "CON": (1, 1),
    "PNA": (1, 2), "ATL": (1, 3), "PTX": (2, 0), "PE": (2, 1), "PO": (2, 2), "FX": (2, 3),
    "SD": (3, 1),
}


def default_spec(image_size: int = 64, noise_sigma: float = 0.1, rect_intensity: float = 0.35,
                 brightness: float = 0.12, rect_frac: float = 0.1875) -> SyntheticSpec:
    """Thirteen localized labels on distinct cells plus one global-brightness label."""
    cell = image_size // 4
    side = max(1, int(round(rect_frac * image_size)))
    signals = []
    for name in LABELS:
        if name == "LO":
            signals.append(Signal("brightness", brightness))
            continue
        r, c = _CELLS[name]
        off = (cell - side) // 2
        signals.append(Signal("rect", rect_intensity, x=c * cell + off, y=r * cell + off, w=side, h=side))
    co = np.diag([DEFAULT_RATES[n] for n in LABELS])
    return SyntheticSpec(image_size, tuple(signals), tuple(tuple(r) for r in co.tolist()), noise_sigma)


def sample_labels(spec: SyntheticSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    co = np.asarray(spec.cooccurrence, dtype=np.float64)
    base = rng.random((n, NUM_LABELS)) < np.diag(co)
    forced = rng.random((n, NUM_LABELS, NUM_LABELS)) < co[None]
    off = ~np.eye(NUM_LABELS, dtype=bool)
    implied = (base[:, :, None] & forced & off[None]).any(axis=1)
    return (base | implied).astype(np.int8)


def render(spec: SyntheticSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Float images in [0, 1], quantized to 8-bit levels, shape ``n x 1 x S x S``."""
    n, S = labels.shape[0], spec.image_size
    img = np.full((n, S, S), spec.background, dtype=np.float64)
    for j, sig in enumerate(spec.signals):
        on = labels[:, j].astype(bool)
        if not on.any():
            continue
        if sig.kind == "brightness":
            img[on] += sig.intensity
        else:
            img[on, sig.y:sig.y + sig.h, sig.x:sig.x + sig.w] += sig.intensity
    if spec.noise_sigma > 0:
        img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return (np.round(img * 255) / 255).astype(np.float32)[:, None]


def emit_raw_rows(spec: SyntheticSpec, labels: np.ndarray, rng: np.random.Generator) -> list:
    """CheXpert-style symbols: positives as 1.0 or -1.0 (uncertain), negatives as 0.0 or blank."""
    rows = []
    u = rng.random(labels.shape)
    for i in range(labels.shape[0]):
        row = []
        for j in range(NUM_LABELS):
            if labels[i, j]:
                row.append("-1.0" if u[i, j] < spec.uncertain_fraction else "1.0")
            else:
                row.append("" if u[i, j] < spec.blank_fraction else "0.0")
        rows.append(row)
    return rows


def synth_dataset(spec: SyntheticSpec, n: int, seed: int):
    """Return ``(images, raw_rows, labels)``; labels are the U-1 view of the raw rows."""
    rng = np.random.default_rng(seed)
    labels = sample_labels(spec, n, rng)
    images = render(spec, labels, rng)
    rows = emit_raw_rows(spec, labels, rng)
    u1 = np.array([u1_map(r, i) for i, r in enumerate(rows)], dtype=np.int8).reshape(n, NUM_LABELS)
    return images, rows, u1


def synth_teacher_logits(labels: np.ndarray, adapter: TeacherAdapterSpec, seed: int,
                         margin: float = 2.0, noise: float = 1.0) -> np.ndarray:
    """18-way teacher logits derived from ground truth: ``margin * (2y - 1) + noise``.

    Teacher slots with no student counterpart get ``-margin + noise``.
    """
    rng = np.random.default_rng(seed)
    n = labels.shape[0]
    out = -margin + noise * rng.normal(size=(n, NUM_TEACHER))
    for k, v in enumerate(adapter.index_map):
        if isinstance(v, int):
            out[:, v] = margin * (2.0 * labels[:, k] - 1.0) + noise * rng.normal(size=n)
    return out
