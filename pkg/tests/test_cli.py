import json
import math

import numpy as np
import pytest

from mxa.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, build_parser, git_blob_hash, main
from mxa.distillation import LABELS, NUM_TEACHER
from mxa.training.data import read_logits_csv, read_pgm, write_logits_csv

TINY = {"model": {"preset": "M5-nano-8x8"},
        "train": {"total_epochs": 1, "warmup_epochs": 0, "batch_size": 4, "seed": 0},
        "teacher_map": None}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert main(["synth", "--n", "8", "--seed", "0", "--image-size", "8", "--out", str(root / "data")]) == EXIT_OK
    cfg = write_config(root / "cfg.json", TINY)
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "out")]) == EXIT_OK
    return root


class TestHelp:
    def test_defaults_listed(self):
        text = build_parser()._subparsers._group_actions[0].choices["synth"].format_help()
        assert "(default: 64)" in text and "(default: 0)" in text

    def test_help_exits_zero(self):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0


class TestSynth:
    def test_zero_samples_header_only(self, tmp_path):
        assert main(["synth", "--n", "0", "--out", str(tmp_path)]) == EXIT_OK
        lines = (tmp_path / "labels.csv").read_text().splitlines()
        assert len(lines) == 1 and lines[0].startswith("Path,No Finding")

    def test_same_seed_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            main(["synth", "--n", "4", "--seed", "3", "--image-size", "16", "--teacher-logits",
                  "--out", str(tmp_path / name)])
        for rel in ("labels.csv", "spec.json", "teacher_logits.csv", "images/000003.pgm"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

    def test_negative_n(self, tmp_path):
        assert main(["synth", "--n", "-1", "--out", str(tmp_path)]) == EXIT_USAGE


class TestTrain:
    def test_outputs(self, tiny_run):
        out = tiny_run / "out"
        for name in ("manifest.json", "checkpoint.mxa", "checkpoint_ema.mxa", "metrics.jsonl"):
            assert (out / name).exists(), name
        manifest = json.loads((out / "manifest.json").read_text())
        canonical = json.dumps(manifest["config"], sort_keys=True, separators=(",", ":")).encode()
        assert manifest["config_hash"] == git_blob_hash(canonical)
        assert manifest["seed"] == 0

    def test_alpha_without_teacher_refused(self, tmp_path, tiny_run, capsys):
        doc = json.loads(json.dumps(TINY))
        doc["train"]["alpha"] = 0.5
        cfg = write_config(tmp_path / "kd.json", doc)
        code = main(["train", "--config", str(cfg), "--data", str(tiny_run / "data"), "--out", str(tmp_path / "o")])
        assert code == EXIT_USAGE
        assert "teacher" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_unknown_config_key(self, tmp_path, tiny_run, capsys):
        doc = json.loads(json.dumps(TINY))
        doc["train"]["dropout"] = 0.1
        cfg = write_config(tmp_path / "bad.json", doc)
        code = main(["train", "--config", str(cfg), "--data", str(tiny_run / "data"), "--out", str(tmp_path / "o")])
        assert code == EXIT_USAGE
        assert "dropout" in capsys.readouterr().err

    def test_bundled_configs_validate(self):
        from pathlib import Path

        from mxa.cli import load_run_config

        for path in sorted(Path(__file__).resolve().parent.parent.joinpath("configs").glob("*.json")):
            model_cfg, train_cfg, _ = load_run_config(path)
            assert model_cfg.image_size == 64

    def test_kd_with_raw_teacher_logits(self, tmp_path):
        data = tmp_path / "d"
        main(["synth", "--n", "8", "--image-size", "8", "--teacher-logits", "--out", str(data)])
        doc = json.loads(json.dumps(TINY))
        doc["train"]["alpha"] = 0.5
        cfg = write_config(tmp_path / "kd.json", doc)
        code = main(["train", "--config", str(cfg), "--data", str(data),
                     "--teacher-logits", str(data / "teacher_logits.csv"), "--out", str(tmp_path / "o")])
        assert code == EXIT_OK

    def test_missing_data_is_io_error(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", TINY)
        code = main(["train", "--config", str(cfg), "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
        assert code == EXIT_IO


class TestEval:
    def test_nan_for_label_without_positives(self, tiny_run, tmp_path, capsys):
        data = tiny_run / "data"
        # rewrite labels so that Fracture has no positive
        lines = (data / "labels.csv").read_text().splitlines()
        col = lines[0].split(",").index("Fracture")
        fixed = [lines[0]]
        for line in lines[1:]:
            cells = line.split(",")
            cells[col] = "0.0"
            fixed.append(",".join(cells))
        edited = tmp_path / "data"
        (edited / "images").mkdir(parents=True)
        for img in (data / "images").iterdir():
            (edited / "images" / img.name).write_bytes(img.read_bytes())
        (edited / "labels.csv").write_text("\n".join(fixed) + "\n")

        code = main(["eval", "--checkpoint", str(tiny_run / "out" / "checkpoint.mxa"), "--data", str(edited),
                     "--json", str(tmp_path / "m.json")])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        fx_line = next(line for line in out.splitlines() if line.startswith("FX"))
        assert "NaN" in fx_line
        doc = json.loads((tmp_path / "m.json").read_text())
        assert doc["auc_per_label"][LABELS.index("FX")] is None

    def test_missing_checkpoint(self, tiny_run, tmp_path):
        code = main(["eval", "--checkpoint", str(tmp_path / "none.mxa"), "--data", str(tiny_run / "data")])
        assert code == EXIT_IO


class TestAdaptTeacher:
    def test_all_zero_row(self, tmp_path):
        write_logits_csv(tmp_path / "t.csv", ["s0", "s1"], np.zeros((2, NUM_TEACHER)))
        assert main(["adapt-teacher", "--logits", str(tmp_path / "t.csv"), "--out", str(tmp_path / "a.csv")]) == 0
        ids, adapted = read_logits_csv(tmp_path / "a.csv", 14, prefix="a")
        assert ids == ["s0", "s1"]
        assert adapted[0, 0] == pytest.approx(-math.log(262143.0), abs=1e-9)
        assert np.all(adapted[:, 1:] == 0.0)
        footer = (tmp_path / "a.csv").read_text().splitlines()[-1].split(",")
        assert footer[0] == "#weights" and len(footer) == 15

    def test_duplicate_ids_rejected(self, tmp_path, capsys):
        write_logits_csv(tmp_path / "t.csv", ["s0", "s0"], np.zeros((2, NUM_TEACHER)))
        code = main(["adapt-teacher", "--logits", str(tmp_path / "t.csv"), "--out", str(tmp_path / "a.csv")])
        assert code == EXIT_USAGE
        assert "duplicate" in capsys.readouterr().err

    def test_bad_map(self, tmp_path):
        write_logits_csv(tmp_path / "t.csv", ["s0"], np.zeros((1, NUM_TEACHER)))
        (tmp_path / "m.json").write_text(json.dumps({"map": {"0": "NF"}}))
        code = main(["adapt-teacher", "--logits", str(tmp_path / "t.csv"), "--map", str(tmp_path / "m.json"),
                     "--out", str(tmp_path / "a.csv")])
        assert code == EXIT_USAGE


class TestAttnMaps:
    def test_identical_checkpoints_give_flat_delta(self, tiny_run, tmp_path):
        ck = str(tiny_run / "out" / "checkpoint.mxa")
        image = tiny_run / "data" / "images" / "000000.pgm"
        code = main(["attn-maps", "--checkpoint-a", ck, "--checkpoint-b", ck, "--image", str(image),
                     "--out", str(tmp_path)])
        assert code == EXIT_OK
        for i in range(3):
            delta = read_pgm(tmp_path / f"delta_stage{i}.pgm")
            assert delta.shape == (8, 8) and np.all(delta == 128)
            assert read_pgm(tmp_path / f"a_stage{i}.pgm").max() == 255
        rows = (tmp_path / "roi_a.csv").read_text().splitlines()
        assert rows[1].startswith("stages.0.blocks.0,")

    def test_wrong_image_size(self, tiny_run, tmp_path):
        from mxa.training.data import write_pgm

        write_pgm(tmp_path / "big.pgm", np.zeros((16, 16), dtype=np.uint8))
        code = main(["attn-maps", "--checkpoint-a", str(tiny_run / "out" / "checkpoint.mxa"),
                     "--image", str(tmp_path / "big.pgm"), "--out", str(tmp_path / "o")])
        assert code == EXIT_USAGE


class TestMisc:
    def test_gradcheck_ops(self, capsys):
        assert main(["gradcheck", "--scope", "ops", "--seeds", "1"]) == EXIT_OK
        assert "PASS" in capsys.readouterr().out

    def test_thread_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("MXA_THREADS", "0")
        assert main(["synth", "--n", "1", "--image-size", "16", "--out", str(tmp_path)]) == EXIT_OK
        monkeypatch.setenv("MXA_THREADS", "many")
        assert main(["synth", "--n", "1", "--image-size", "16", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_git_blob_hash(self):
        # `printf hello | git hash-object --stdin`
        assert git_blob_hash(b"hello") == "b6fc4c620b67d95f953a5c1c1230aaab5db5a1b0"
