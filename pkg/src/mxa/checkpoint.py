"""Checkpoint archive: MXAT tensor blobs plus a JSON manifest inside a zip file."""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .engine.serialize import tensor_from_bytes, tensor_to_bytes
from .model import Model, ModelConfig

FORMAT = "mxa-checkpoint"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # canonical path -> array
    ema: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_step: int = 0
    epoch: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, **kw) -> "Checkpoint":
        params = {k: p.values.copy() for k, p in model.named_parameters().items()}
        return cls(config=model.cfg, params=params, seed=model.seed, **kw)

    def to_model(self, use_ema: bool = False, dtype=np.float32) -> Model:
        model = Model(self.config, self.seed, dtype)
        source = self.ema if use_ema and self.ema else self.params
        named = model.named_parameters()
        if set(named) != set(source):
            raise ValueError("checkpoint parameters do not match the configured architecture")
        for k, p in named.items():
            if p.shape != source[k].shape:
                raise ValueError(f"{k}: checkpoint shape {source[k].shape} != model shape {p.shape}")
            p.values[...] = source[k]
        return model


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    groups = {"params": ckpt.params, "ema": ckpt.ema, "adam_m": ckpt.adam_m, "adam_v": ckpt.adam_v}
    entries = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for group, tensors in groups.items():
            for key, arr in tensors.items():
                name = f"tensors/{group}/{key}.mxat"
                zf.writestr(name, tensor_to_bytes(arr))
                entries.append({"group": group, "key": key, "shape": list(np.shape(arr)), "file": name})
        manifest = {
            "format": FORMAT,
            "version": 1,
            "config": ckpt.config.to_dict(),
            "epoch": ckpt.epoch,
            "seed": ckpt.seed,
            "adam_step": ckpt.adam_step,
            "extra": ckpt.extra,
            "tensors": entries,
        }
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT:
            raise ValueError(f"{path}: not an MXA checkpoint")
        groups: dict = {"params": {}, "ema": {}, "adam_m": {}, "adam_v": {}}
        for e in manifest["tensors"]:
            arr = tensor_from_bytes(zf.read(e["file"]))
            if list(arr.shape) != e["shape"]:
                raise ValueError(f"{e['file']}: shape {arr.shape} disagrees with manifest {e['shape']}")
            groups[e["group"]][e["key"]] = arr
    return Checkpoint(
        config=ModelConfig.from_dict(manifest["config"]),
        params=groups["params"],
        ema=groups["ema"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        adam_step=manifest["adam_step"],
        epoch=manifest["epoch"],
        seed=manifest["seed"],
        extra=manifest.get("extra", {}),
    )
