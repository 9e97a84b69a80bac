import hashlib
import json

import numpy as np
import pytest
import torch

from zerocon.cli import KEYS, RunManifest, main
from zerocon.data import ShapeLabel, load_png, make_toy_dataset, render, save_png
from zerocon.denoiser.codec import encode_latent
from zerocon.eval import CSV_COLUMNS
from zerocon.formats import format_config, read_tensor
from zerocon.textdir import SentenceBank

TINY_TRAIN = [
    "--train-steps", "2", "--dataset-size", "48", "--train-heldout", "8",
    "--train-batch-size", "8", "--joint-steps", "2", "--schedule-substeps", "5",
]  # fmt: skip


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def red_circle(tmp_path):
    path = tmp_path / "in.png"
    save_png(path, render(ShapeLabel("red", "circle", "white"), (15.0, 17.5))[0])
    return path


class TestUsage:
    def test_help_lists_every_key(self, capsys):
        assert main(["edit", "--help"]) == 0
        out = capsys.readouterr().out
        for k in KEYS:
            line = next(l for l in out.splitlines() if l.strip().startswith(k.name + " "))
            assert k.type_name in line and "default:" in line

    def test_top_level_help(self, capsys):
        assert main(["--help"]) == 0
        out = capsys.readouterr().out
        assert "train-toy" in out and "lambda_c" in out

    def test_no_command(self, capsys):
        assert main([]) == 2

    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.txt").write_text("lambda_c = 1\nwarp_factor = 9\ncolour = red\n", encoding="utf-8")
        assert main(["report", "--runs", "x.csv", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path)]) == 2
        assert "unknown config keys: colour, warp_factor" in capsys.readouterr().err

    def test_bad_value(self, tmp_path, capsys):
        assert main(["report", "--runs", "x.csv", "--lambda-c", "abc", "--out", str(tmp_path)]) == 2
        assert "lambda_c" in capsys.readouterr().err

    def test_invalid_guidance(self, tmp_path, red_circle, toy_dir, capsys):
        code = main(["edit", "--image", str(red_circle), "--edit-from", "red", "--edit-to", "blue",
                     "--tau", "0", "--checkpoint", str(toy_dir), "--out", str(tmp_path / "o")])  # fmt: skip
        assert code == 2 and "tau" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["report", "--runs", "x.csv", "--config", str(tmp_path / "nope.txt"), "--out", str(tmp_path)]) == 2

    def test_http_backend_needs_endpoint(self, tmp_path, red_circle, capsys):
        assert main(["caption", "--image", str(red_circle), "--caption-backend", "http", "--out", str(tmp_path)]) == 2
        assert "backend.endpoint" in capsys.readouterr().err


class TestTrainToy:
    def test_missing_dataset(self, tmp_path, capsys):
        missing = tmp_path / "no_such_dataset"
        assert main(["train-toy", "--dataset", str(missing), "--out", str(tmp_path / "o")]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_deterministic_checkpoints(self, tmp_path, capsys):
        for d in ("a", "b"):
            assert main(["train-toy", *TINY_TRAIN, "--seed", "3", "--out", str(tmp_path / d)]) == 0
        for name in ("denoiser.zckp", "joint.zckp", "losses.json", "manifest.json"):
            assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name)
        m = RunManifest.load(tmp_path / "a" / "manifest.json")
        assert m.command == "train-toy" and m.seed == 3 and m.outputs["denoiser"] == "denoiser.zckp"

    def test_dataset_directory(self, tmp_path, capsys):
        make_toy_dataset(48, seed=1).save(tmp_path / "ds")
        args = ["train-toy", *TINY_TRAIN, "--dataset", str(tmp_path / "ds"), "--out", str(tmp_path / "o")]
        assert main(args) == 0
        assert RunManifest.load(tmp_path / "o" / "manifest.json").inputs["dataset"] == str(tmp_path / "ds")


class TestCaptionAndDirection:
    def test_caption(self, tmp_path, red_circle, capsys):
        assert main(["caption", "--image", str(red_circle), "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "caption.txt").read_text() == "a red circle on a white background\n"

    def test_caption_failure_is_runtime_error(self, tmp_path, capsys):
        save_png(tmp_path / "noise.png", np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8))
        assert main(["caption", "--image", str(tmp_path / "noise.png"), "--out", str(tmp_path / "o")]) == 1
        assert "error in caption" in capsys.readouterr().err

    def test_missing_image(self, tmp_path, capsys):
        assert main(["caption", "--image", str(tmp_path / "none.png"), "--out", str(tmp_path)]) == 2

    def test_identical_bank_gives_zero_delta(self, tmp_path, toy_dir, capsys):
        SentenceBank(["a red circle", "a photo"], ["a red circle", "a photo"]).save(tmp_path / "bank.tsv")
        args = ["direction", "--bank", str(tmp_path / "bank.tsv"), "--checkpoint", str(toy_dir), "--out", str(tmp_path / "o")]
        assert main(args) == 0
        delta = read_tensor(tmp_path / "o" / "delta.zct")
        assert delta.shape == (16, 16) and torch.count_nonzero(delta) == 0

    def test_generated_bank(self, tmp_path, toy_dir, capsys):
        args = ["direction", "--source", "a red circle", "--target", "a blue circle", "--bank-size", "3",
                "--checkpoint", str(toy_dir), "--out", str(tmp_path / "o")]  # fmt: skip
        assert main(args) == 0
        assert len(SentenceBank.load(tmp_path / "o" / "bank.tsv")) == 3

    def test_direction_usage(self, tmp_path, toy_dir, capsys):
        assert main(["direction", "--source", "a", "--checkpoint", str(toy_dir), "--out", str(tmp_path)]) == 2


def _invert_reconstruct(tmp_path, image, toy_dir, substeps):
    common = ["--checkpoint", str(toy_dir), "--schedule-substeps", str(substeps)]
    assert main(["invert", "--image", str(image), *common, "--out", str(tmp_path / "inv")]) == 0
    prompt = (tmp_path / "inv" / "prompt.txt").read_text().strip()
    latent = tmp_path / "inv" / "x_T.zct"
    assert main(["reconstruct", "--latent", str(latent), "--prompt", prompt, *common, "--out", str(tmp_path / "rec")]) == 0
    return prompt, tmp_path / "rec"


class TestInvertReconstructEdit:
    def test_round_trip(self, tmp_path, red_circle, toy_dir, round_trip_pin, capsys):
        prompt, rec = _invert_reconstruct(tmp_path, red_circle, toy_dir, 50)
        assert prompt == "a red circle on a white background"
        x0 = encode_latent(load_png(red_circle))
        err = float((read_tensor(rec / "x0.zct") - x0).norm() / x0.norm())
        assert err <= round_trip_pin

    def test_degenerate_edit_matches_reconstruct(self, tmp_path, red_circle, toy_dir, capsys):
        _, rec = _invert_reconstruct(tmp_path, red_circle, toy_dir, 10)
        args = ["edit", "--image", str(red_circle), "--edit-from", "red", "--edit-to", "blue", "--zero-delta",
                "--lambda-c", "0", "--lambda-e", "0", "--schedule-substeps", "10",
                "--checkpoint", str(toy_dir), "--out", str(tmp_path / "ed")]  # fmt: skip
        assert main(args) == 0
        assert np.array_equal(load_png(tmp_path / "ed" / "edited.png"), load_png(rec / "reconstruction.png"))

    def test_absent_phrase(self, tmp_path, red_circle, toy_dir, capsys):
        args = ["edit", "--image", str(red_circle), "--edit-from", "dog", "--edit-to", "cat",
                "--checkpoint", str(toy_dir), "--out", str(tmp_path / "o")]  # fmt: skip
        assert main(args) == 2
        err = capsys.readouterr().err
        assert "a red circle on a white background" in err and "target-prompt" in err

    def test_edit_outputs_and_inputs_untouched(self, tmp_path, red_circle, toy_dir, capsys):
        before = sha(red_circle)
        args = ["edit", "--image", str(red_circle), "--edit-from", "red", "--edit-to", "blue", "--schedule-substeps", "10",
                "--seed", "5", "--checkpoint", str(toy_dir), "--out", str(tmp_path / "o")]  # fmt: skip
        assert main(args) == 0
        out = tmp_path / "o"
        assert sha(red_circle) == before
        for name in ("edited.png", "losses.csv", "delta.zct", "prompts.json", "bank.tsv", "manifest.json", "config.txt", "timing.json"):
            assert (out / name).is_file(), name
        assert json.loads((out / "prompts.json").read_text())["target"] == "a blue circle on a white background"
        assert len((out / "losses.csv").read_text().splitlines()) == 11
        m = RunManifest.load(out / "manifest.json")
        assert m.guidance["patch_seed"] != 0 and m.schedule["substeps"] == 10
        assert RunManifest.from_json(m.to_json()) == m

    def test_rerun_from_manifest(self, tmp_path, red_circle, toy_dir, capsys):
        args = ["edit", "--image", str(red_circle), "--edit-from", "circle", "--edit-to", "square",
                "--schedule-substeps", "10", "--seed", "2", "--checkpoint", str(toy_dir), "--out", str(tmp_path / "a")]  # fmt: skip
        assert main(args) == 0
        m = RunManifest.load(tmp_path / "a" / "manifest.json")
        (tmp_path / "cfg.txt").write_text(format_config(m.config), encoding="utf-8")
        again = ["edit", "--image", m.inputs["image"], "--edit-from", "circle", "--edit-to", "square",
                 "--config", str(tmp_path / "cfg.txt"), "--seed", str(m.seed), "--out", str(tmp_path / "b")]  # fmt: skip
        assert main(again) == 0
        for name in ("edited.png", "losses.csv", "delta.zct"):
            assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name)


class TestReport:
    def test_eight_rows_from_forty_runs(self, tmp_path, capsys):
        lines = [",".join(CSV_COLUMNS)]
        for v in ("full", "no_cut", "no_guidance", "word_swap"):
            for t in ("red2blue", "circle2square"):
                for s in range(5):
                    lines.append(f"{v},{t},{s},{0.1 * s:.6f},{0.01 * s:.6f}")
        (tmp_path / "runs.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        assert main(["report", "--runs", str(tmp_path / "runs.csv"), "--config-hash", "abc", "--out", str(tmp_path / "o")]) == 0
        summary = (tmp_path / "o" / "summary.csv").read_text().splitlines()
        assert len(summary) == 9
        assert summary[1].startswith("full,red2blue,0.200000,0.020000,5,abc")

    def test_missing_runs(self, tmp_path, capsys):
        assert main(["report", "--runs", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 2


class TestEval:
    def test_small_sweep(self, tmp_path, toy_dir, capsys):
        args = ["eval", "--eval-tasks", "red2blue", "--eval-variants", "full,no_guidance,lr_x2", "--eval-seeds", "0",
                "--schedule-substeps", "5", "--bank-size", "2", "--checkpoint", str(toy_dir), "--out", str(tmp_path / "o")]  # fmt: skip
        assert main(args) == 0
        rows = (tmp_path / "o" / "runs.csv").read_text().splitlines()
        assert [r.split(",")[0] for r in rows[1:]] == ["full", "no_guidance", "lr_x2"]
        assert "missing" not in rows[1]

    def test_unknown_variant(self, tmp_path, toy_dir, capsys):
        args = ["eval", "--eval-variants", "bogus", "--checkpoint", str(toy_dir), "--out", str(tmp_path)]
        assert main(args) == 2
