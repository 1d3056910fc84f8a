"""On-disk formats: 8-bit PGM images, CheXpert-schema label CSVs, teacher logit CSVs."""

from __future__ import annotations

import csv
from collections import Counter
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..distillation import CHEXPERT_COLUMNS, NUM_LABELS, NUM_TEACHER, u1_map


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 with maxval 255; float input in [0, 1] is rounded to 8 bits."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


_TOKEN = re.compile(rb"(#[^\n]*\n)|(\S+)")


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 file into a uint8 ``H x W`` array."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = _TOKEN.search(data, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PGM header")
        pos = m.end()
        if m.group(2):
            tokens.append(m.group(2))
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).copy()


@dataclass
class Dataset:
    ids: list
    images: np.ndarray  # n x 1 x S x S float32 in [0, 1]
    raw_rows: list
    labels: np.ndarray  # n x 14 int8, U-1 mapped

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset([self.ids[i] for i in idx], self.images[idx], [self.raw_rows[i] for i in idx], self.labels[idx])


def make_dataset(images: np.ndarray, raw_rows: list, ids: Optional[list] = None) -> Dataset:
    n = images.shape[0]
    ids = ids if ids is not None else [f"images/{i:06d}.pgm" for i in range(n)]
    labels = np.array([u1_map(r, sid) for sid, r in zip(ids, raw_rows)], dtype=np.int8).reshape(n, NUM_LABELS)
    return Dataset(list(ids), images.astype(np.float32), list(raw_rows), labels)


def write_labels_csv(path, ids, raw_rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Path", *CHEXPERT_COLUMNS])
        for sid, row in zip(ids, raw_rows):
            w.writerow([sid, *row])


def read_labels_csv(path) -> tuple:
    """Return ``(paths, raw_rows)``; extra CheXpert columns (Sex, Age, ...) are ignored."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("Path", *CHEXPERT_COLUMNS) if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        ids, rows = [], []
        for rec in reader:
            ids.append(rec["Path"])
            rows.append([rec[c] for c in CHEXPERT_COLUMNS])
    return ids, rows


def write_dataset(out_dir, dataset: Dataset) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for sid, img in zip(dataset.ids, dataset.images):
        write_pgm(out / sid, img)
    write_labels_csv(out / "labels.csv", dataset.ids, dataset.raw_rows)


def load_dataset(data_dir, image_size: Optional[int] = None) -> Dataset:
    root = Path(data_dir)
    ids, rows = read_labels_csv(root / "labels.csv")
    imgs = []
    for sid in ids:
        arr = read_pgm(root / sid)
        if image_size is not None and arr.shape != (image_size, image_size):
            raise ValueError(f"{sid}: image is {arr.shape[0]}x{arr.shape[1]}, model expects {image_size}x{image_size}")
        imgs.append(arr)
    if imgs:
        images = (np.stack(imgs).astype(np.float32) / 255.0)[:, None]
    else:
        s = image_size or 0
        images = np.zeros((0, 1, s, s), dtype=np.float32)
    return make_dataset(images, rows, ids)


def write_logits_csv(path, ids, logits: np.ndarray, prefix: str = "o", footer: Optional[list] = None) -> None:
    logits = np.asarray(logits, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", *(f"{prefix}{j}" for j in range(logits.shape[1]))])
        for sid, row in zip(ids, logits):
            w.writerow([sid, *(repr(float(v)) for v in row)])
        if footer is not None:
            fh.write(",".join(str(v) for v in footer) + "\n")


def read_logits_csv(path, width: int = NUM_TEACHER, prefix: str = "o") -> tuple:
    """Return ``(ids, B x width array)``; lines starting with ``#`` are skipped."""
    ids, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader, None)
        expected = ["sample_id", *(f"{prefix}{j}" for j in range(width))]
        if header != expected:
            raise ValueError(f"{path}: expected header {','.join(expected)}")
        for rec in reader:
            if not rec:
                continue
            if len(rec) != width + 1:
                raise ValueError(f"{path}: row for {rec[0]!r} has {len(rec) - 1} values, expected {width}")
            ids.append(rec[0])
            rows.append([float(v) for v in rec[1:]])
    dup = {s for s, c in Counter(ids).items() if c > 1}
    if dup:
        raise ValueError(f"{path}: duplicate sample ids {sorted(dup)[:5]}")
    return ids, np.asarray(rows, dtype=np.float64).reshape(len(ids), width)


def align_logits(ids, logit_ids, logits: np.ndarray) -> np.ndarray:
    """Reorder cached logits to match dataset sample ids."""
    index = {s: i for i, s in enumerate(logit_ids)}
    missing = [s for s in ids if s not in index]
    if missing:
        raise ValueError(f"teacher logits missing for {len(missing)} samples, e.g. {missing[:3]}")
    return logits[[index[s] for s in ids]]


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
