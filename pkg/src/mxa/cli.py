"""Command-line entry point: ``mxa {gradcheck,synth,train,eval,adapt-teacher,attn-maps}``."""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .checks import SCOPES, all_passed, run_scope
from .distillation import LABELS, NUM_LABELS, NUM_TEACHER, TeacherAdapterSpec, adapt_teacher, dynamic_weights, \
    teacher_probabilities
from .model import Model, attention_scores, preset
from .mxa_block import write_roi_csv
from .training.data import align_logits, load_dataset, make_dataset, read_logits_csv, read_pgm, write_dataset, \
    write_json, write_logits_csv, write_pgm
from .training.loop import evaluate, train
from .training.metrics import format_auc_table
from .training.optim import TrainConfig
from .training.synth import SyntheticSpec, default_spec, synth_dataset, synth_teacher_logits

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("mxa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _resource(name: str) -> str:
    return resources.files("mxa.resources").joinpath(name).read_text()


def git_blob_hash(data: bytes) -> str:
    """Content hash in the same form ``git hash-object`` prints."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def load_run_config(path) -> tuple:
    """Validate a run config against the bundled schema and materialize every default."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
    schema = json.loads(_resource("run_config.schema.json"))
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"{path}: {where}: {exc.message}") from None
    model_doc = dict(doc["model"])
    name = model_doc.pop("preset", "M5-nano")
    model_cfg = preset(name, **model_doc)
    train_cfg = TrainConfig.from_dict(doc["train"])
    return model_cfg, train_cfg, doc.get("teacher_map")


def _load_adapter(path) -> TeacherAdapterSpec:
    return TeacherAdapterSpec.default() if path is None else TeacherAdapterSpec.from_json(path)


def _load_teacher(path, ids, adapter: TeacherAdapterSpec) -> np.ndarray:
    """Adapted 14-way teacher logits aligned to ``ids``; raw 18-way files are adapted on the fly."""
    with open(path) as fh:
        header = next((line for line in fh if not line.startswith("#")), "")
    if header.startswith("sample_id,a0"):
        logit_ids, logits = read_logits_csv(path, NUM_LABELS, prefix="a")
    else:
        logit_ids, raw = read_logits_csv(path, NUM_TEACHER, prefix="o")
        logits = adapt_teacher(raw, adapter)
    return align_logits(ids, logit_ids, logits)


def cmd_gradcheck(args) -> int:
    ok = True
    for seed in range(args.seeds):
        results = run_scope(args.scope, seed, log=print)
        ok &= all_passed(results)
    print(f"gradcheck --scope {args.scope}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_synth(args) -> int:
    spec = SyntheticSpec.from_json(args.spec) if args.spec else default_spec(args.image_size)
    images, rows, labels = synth_dataset(spec, args.n, args.seed)
    ds = make_dataset(images, rows)
    write_dataset(args.out, ds)
    write_json(Path(args.out) / "spec.json", spec.to_dict())
    if args.teacher_logits:
        logits = synth_teacher_logits(labels, TeacherAdapterSpec.default(), args.seed + 1,
                                      margin=args.teacher_margin, noise=args.teacher_noise)
        write_logits_csv(Path(args.out) / "teacher_logits.csv", ds.ids, logits)
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    model_cfg, train_cfg, map_path = load_run_config(args.config)
    if train_cfg.alpha > 0 and not args.teacher_logits:
        raise UsageError(f"alpha={train_cfg.alpha} needs --teacher-logits; refusing to start")
    adapter = _load_adapter(map_path)
    data = load_dataset(args.data, model_cfg.image_size)
    val = load_dataset(args.val_data, model_cfg.image_size) if args.val_data else None
    teacher = _load_teacher(args.teacher_logits, data.ids, adapter) if args.teacher_logits else None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                "teacher_map": adapter.to_dict()["map"]}
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode()
    layout = {"checkpoint": "checkpoint.mxa", "ema_checkpoint": "checkpoint_ema.mxa",
              "metrics": "metrics.jsonl", "manifest": "manifest.json"}
    write_json(out / layout["manifest"], {
        "config": resolved,
        "seed": train_cfg.seed,
        "config_hash": git_blob_hash(canonical),
        "data": str(args.data),
        "val_data": str(args.val_data) if args.val_data else None,
        "teacher_logits": str(args.teacher_logits) if args.teacher_logits else None,
        "layout": layout,
    })

    model = Model(model_cfg, train_cfg.seed)
    result = train(model, data, train_cfg, val_data=val, teacher_adapted=teacher, adapter=adapter,
                   log_path=out / layout["metrics"])
    save_checkpoint(out / layout["checkpoint"], result.checkpoint(use_ema=False))
    save_checkpoint(out / layout["ema_checkpoint"], result.checkpoint(use_ema=True))
    last = result.history[-1] if result.history else {}
    print(f"trained {result.steps} steps; final val macro-AUC {last.get('auc_macro')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.to_model(use_ema=args.ema)
    data = load_dataset(args.data, ckpt.config.image_size)
    if data.labels.shape[1] != ckpt.config.num_labels:
        raise UsageError(f"data has {data.labels.shape[1]} labels, checkpoint predicts {ckpt.config.num_labels}")
    report = evaluate(model, data)
    print(format_auc_table(report, LABELS))
    doc = report.to_dict()
    print(json.dumps(doc))
    if args.json:
        write_json(args.json, doc)
    return EXIT_OK


def cmd_adapt_teacher(args) -> int:
    adapter = _load_adapter(args.map)
    ids, raw = read_logits_csv(args.logits, NUM_TEACHER, prefix="o")
    adapted = adapt_teacher(raw, adapter)
    w = dynamic_weights(teacher_probabilities(adapted), adapter.contributing)
    write_logits_csv(args.out, ids, adapted, prefix="a", footer=["#weights", *(repr(float(v)) for v in w)])
    print(f"adapted {len(ids)} rows -> {args.out}")
    return EXIT_OK


def _heatmap(m: np.ndarray, image_size: int) -> np.ndarray:
    factor = image_size // m.shape[0] if image_size % m.shape[0] == 0 else 1
    return np.kron(m, np.ones((factor, factor)))


def cmd_attn_maps(args) -> int:
    ckpt_a = load_checkpoint(args.checkpoint_a)
    model_a = ckpt_a.to_model(use_ema=args.ema)
    size = ckpt_a.config.image_size
    img = read_pgm(args.image)
    if img.shape != (size, size):
        raise UsageError(f"{args.image} is {img.shape[0]}x{img.shape[1]}, checkpoint expects {size}x{size}")
    x = (img.astype(np.float32) / 255.0)[None, None]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rec: dict = {}
    model_a.forward(x, record=rec)
    maps_a = attention_scores(model_a, x)
    for i, m in enumerate(maps_a):
        write_pgm(out / f"a_stage{i}.pgm", _heatmap(m[0], size))
    if rec.get("boxes"):
        names = [f"stages.{i}.blocks.{j}" for i, d in enumerate(ckpt_a.config.depths) for j in range(d)]
        write_roi_csv(out / "roi_a.csv", names, np.concatenate(rec["boxes"]))

    if args.checkpoint_b:
        ckpt_b = load_checkpoint(args.checkpoint_b)
        if ckpt_b.config.image_size != size or ckpt_b.config.grid_sides != ckpt_a.config.grid_sides:
            raise UsageError("checkpoints A and B disagree on input size or stage grids")
        model_b = ckpt_b.to_model(use_ema=args.ema)
        maps_b = attention_scores(model_b, x)
        for i, (ma, mb) in enumerate(zip(maps_a, maps_b)):
            write_pgm(out / f"b_stage{i}.pgm", _heatmap(mb[0], size))
            # signed difference in [-1, 1] mapped so that 128 means no change
            delta = np.clip(np.round(128 + 127.5 * (mb[0] - ma[0])), 0, 255).astype(np.uint8)
            write_pgm(out / f"delta_stage{i}.pgm", _heatmap(delta, size).astype(np.uint8))
    print(f"wrote attention maps to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="mxa", description=__doc__, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks", formatter_class=fmt)
    g.add_argument("--scope", choices=SCOPES, default="ops", help="what to check")
    g.add_argument("--seeds", type=int, default=5, help="number of random seeds")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="generate a synthetic labelled dataset", formatter_class=fmt)
    s.add_argument("--spec", default=None, help="synthetic spec JSON (default: built-in localized spec)")
    s.add_argument("--n", type=int, required=True, help="number of samples")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--image-size", type=int, default=64, help="image side for the built-in spec")
    s.add_argument("--teacher-logits", action="store_true", help="also write noisy 18-way teacher logits")
    s.add_argument("--teacher-margin", type=float, default=2.0, help="teacher logit margin")
    s.add_argument("--teacher-noise", type=float, default=1.0, help="teacher logit noise sigma")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model", formatter_class=fmt)
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--data", required=True, help="training dataset directory")
    t.add_argument("--teacher-logits", default=None, help="teacher logits CSV (18-way raw or 14-way adapted)")
    t.add_argument("--val-data", default=None, help="validation dataset directory (default: training set)")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--ema", action="store_true", help="use the EMA shadow weights stored in the checkpoint")
    e.add_argument("--json", default=None, help="also write the metrics JSON to this file")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("adapt-teacher", help="map 18-way teacher logits to the 14 student labels",
                       formatter_class=fmt)
    a.add_argument("--logits", required=True, help="teacher logits CSV with columns sample_id,o0..o17")
    a.add_argument("--map", default=None, help="adapter map JSON (default: bundled map)")
    a.add_argument("--out", required=True, help="output CSV")
    a.set_defaults(func=cmd_adapt_teacher)

    m = sub.add_parser("attn-maps", help="export attention heatmaps as PGM", formatter_class=fmt)
    m.add_argument("--checkpoint-a", required=True, help="first checkpoint")
    m.add_argument("--checkpoint-b", default=None, help="second checkpoint for the delta map")
    m.add_argument("--image", required=True, help="input PGM image")
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--ema", action="store_true", help="use the EMA shadow weights")
    m.set_defaults(func=cmd_attn_maps)
    return p


def _thread_limit():
    raw = os.environ.get("MXA_THREADS")
    if raw is None or raw == "":
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MXA_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("MXA_THREADS must be >= 0")
    # 0 selects the sequential deterministic mode
    return threadpool_limits(limits=max(n, 1))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"mxa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"mxa: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"mxa: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"mxa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
