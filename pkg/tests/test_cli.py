"""CLI surface: commands, config handling, exit codes, output files."""

import json
import re

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from scorescribe import autodiff as ad
from scorescribe import verify
from scorescribe.cli import main
from scorescribe.data import synth_generate

TINY_ARGS = [
    "--set", "block_channels=2,4",
    "--set", "lstm_hidden=4",
    "--set", "lstm_layers=1",
    "--set", "synth_count=4",
    "--set", "synth_classes=3",
    "--set", "synth_max_label=2",
    "--set", "max_epochs=1",
    "--set", "min_epochs=1",
]


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    result = CliRunner().invoke(main, ["train", "--synth", "--seed", "5", "--out-dir", str(out), *TINY_ARGS])
    assert result.exit_code == 0, result.output
    return out


class TestTrain:
    def test_synth_writes_outputs(self, trained_dir):
        for name in ("best.ckpt", "last.ckpt", "losses.tsv", "losses.png", "vocab.txt", "split.txt"):
            assert (trained_dir / name).exists(), name

    def test_summary_mentions_seed(self, trained_dir, tmp_path):
        result = CliRunner().invoke(
            main, ["train", "--synth", "--seed", "5", "--out-dir", str(tmp_path), *TINY_ARGS]
        )
        assert result.exit_code == 0
        assert "seed: 5" in result.output

    def test_missing_dataset_root_is_config_error(self, tmp_path):
        result = CliRunner().invoke(main, ["train", "--out-dir", str(tmp_path)])
        assert result.exit_code == 2
        assert "dataset_root" in result.output

    def test_nonexistent_dataset_is_data_error(self, tmp_path):
        result = CliRunner().invoke(
            main, ["train", "--dataset", str(tmp_path / "nope"), "--out-dir", str(tmp_path)]
        )
        assert result.exit_code == 3

    def test_unknown_config_key_rejected(self, tmp_path):
        result = CliRunner().invoke(
            main, ["train", "--synth", "--set", "learning_rate=0.1", "--out-dir", str(tmp_path)]
        )
        assert result.exit_code == 2
        assert "unknown config key" in result.output

    def test_bad_value_rejected(self, tmp_path):
        result = CliRunner().invoke(
            main, ["train", "--synth", "--set", "max_epochs=fast", "--out-dir", str(tmp_path)]
        )
        assert result.exit_code == 2

    def test_config_file_then_set_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment\nsynth = true\nsynth_count = 4\nsynth_classes = 3\n"
                       "synth_max_label = 2\nblock_channels = 2,4\nlstm_hidden = 4\n"
                       "lstm_layers = 1\nmax_epochs = 5\nmin_epochs = 1\n")
        out = tmp_path / "out"
        result = CliRunner().invoke(
            main,
            ["train", "--config", str(cfg), "--set", "max_epochs=1", "--seed", "3", "--out-dir", str(out)],
        )
        assert result.exit_code == 0, result.output
        assert len((out / "losses.tsv").read_text().splitlines()) == 1  # override won

    def test_missing_config_file(self, tmp_path):
        result = CliRunner().invoke(main, ["train", "--config", str(tmp_path / "no.cfg")])
        assert result.exit_code == 2


class TestEvaluate:
    def test_synth_report(self, trained_dir, tmp_path):
        result = CliRunner().invoke(
            main,
            ["evaluate", "--checkpoint", str(trained_dir / "best.ckpt"), "--synth",
             "--seed", "5", "--out-dir", str(tmp_path), *TINY_ARGS],
        )
        assert result.exit_code == 0, result.output
        assert re.fullmatch(r"\d+\.\d\d/\d+\.\d", result.output.strip())
        for name in ("report.json", "report.txt", "report.png"):
            assert (tmp_path / name).exists()
        payload = json.loads((tmp_path / "report.json").read_text())
        assert payload["tags"]["seed"] == 5
        assert len(payload["records"]) == 4

    def test_distorted_synth_is_data_error(self, trained_dir, tmp_path):
        result = CliRunner().invoke(
            main,
            ["evaluate", "--checkpoint", str(trained_dir / "best.ckpt"), "--synth",
             "--condition", "distorted", "--out-dir", str(tmp_path), *TINY_ARGS],
        )
        assert result.exit_code == 3

    def test_vocab_mismatch_is_data_error(self, trained_dir, tmp_path):
        result = CliRunner().invoke(
            main,
            ["evaluate", "--checkpoint", str(trained_dir / "best.ckpt"), "--synth",
             "--out-dir", str(tmp_path), "--set", "synth_classes=5"],
        )
        assert result.exit_code == 3

    def test_missing_checkpoint(self, tmp_path):
        result = CliRunner().invoke(
            main, ["evaluate", "--checkpoint", str(tmp_path / "none.ckpt"), "--synth"]
        )
        assert result.exit_code == 3


class TestTranscribe:
    def test_decodes_synth_image(self, trained_dir, tmp_path):
        sample = synth_generate(5, 4, 3, 2)[0]
        png = tmp_path / "staff.png"
        gray = (255 - sample.image[0] * 255).astype(np.uint8)
        Image.fromarray(gray, "L").save(png)
        result = CliRunner().invoke(
            main, ["transcribe", "--checkpoint", str(trained_dir / "best.ckpt"), str(png)]
        )
        assert result.exit_code == 0, result.output
        line = result.output.rstrip("\n")
        for token in filter(None, line.split("\t")):
            assert token.startswith("sym")

    def test_blank_prediction_prints_empty_line(self, tmp_path):
        # checkpoint engineered to predict blank on every frame: the CLI
        # must emit exactly one empty line
        from scorescribe.autodiff import Tensor
        from scorescribe.data import synth_vocab
        from scorescribe.model import ArchConfig, TranscriptionModel
        from scorescribe.training import checkpoint_save, snapshot_model

        vocab = synth_vocab(3)
        cfg = ArchConfig(num_classes=vocab.num_classes, input_height=128,
                         block_channels=(2, 4), lstm_hidden=4, lstm_layers=1)
        model = TranscriptionModel(cfg, seed=0)
        model.forward(Tensor(np.zeros((1, 1, 128, 64), np.float32)), None, "train")
        model.head_weight.data[:] = 0.0
        model.head_bias.data[:] = -20.0
        model.head_bias.data[vocab.blank_id] = 20.0
        ckpt_path = tmp_path / "blank.ckpt"
        checkpoint_save(snapshot_model(model, vocab), ckpt_path)

        page = tmp_path / "page.png"
        Image.new("L", (256, 128), color=255).save(page)
        result = CliRunner().invoke(main, ["transcribe", "--checkpoint", str(ckpt_path), str(page)])
        assert result.exit_code == 0, result.output
        assert result.output == "\n"

    def test_corrupt_image_is_data_error(self, trained_dir, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"junk")
        result = CliRunner().invoke(
            main, ["transcribe", "--checkpoint", str(trained_dir / "best.ckpt"), str(bad)]
        )
        assert result.exit_code == 3

    def test_checkpoint_magic_enforced(self, tmp_path):
        fake = tmp_path / "fake.ckpt"
        fake.write_bytes(b"what" + b"\x00" * 32)
        img = tmp_path / "img.png"
        Image.new("L", (64, 32), color=255).save(img)
        result = CliRunner().invoke(main, ["transcribe", "--checkpoint", str(fake), str(img)])
        assert result.exit_code == 3


def make_corpus(root, n=6, distorted=True):
    tokens = ["clef-G2", "note-C4_quarter", "note-D4_half", "rest-quarter"]
    for i in range(n):
        d = root / f"inc{i:02d}"
        d.mkdir(parents=True)
        arr = np.full((32, 64), 255, dtype=np.uint8)
        arr[8 + 2 * i : 12 + 2 * i, :] = 0
        Image.fromarray(arr, "L").save(d / f"inc{i:02d}.png")
        if distorted:
            Image.fromarray(arr, "L").save(d / f"inc{i:02d}_distorted.png")
        line = " ".join(tokens[: 2 + (i % 3)])
        (d / f"inc{i:02d}.semantic").write_text(line + "\n")
        (d / f"inc{i:02d}.agnostic").write_text(line.replace("-", ".") + "\n")


DATASET_ARGS = [
    "--set", "block_channels=2,4",
    "--set", "lstm_hidden=4",
    "--set", "lstm_layers=1",
    "--set", "max_epochs=1",
    "--set", "min_epochs=1",
]


@pytest.fixture(scope="module")
def corpus_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    make_corpus(root)
    out = tmp_path_factory.mktemp("dataset_out")
    result = CliRunner().invoke(
        main,
        ["train", "--dataset", str(root), "--encoding", "semantic", "--condition", "clean",
         "--seed", "3", "--out-dir", str(out), *DATASET_ARGS],
    )
    assert result.exit_code == 0, result.output
    return {"root": root, "out": out}


class TestDatasetMode:
    def test_train_writes_vocab_and_split(self, corpus_run):
        out = corpus_run["out"]
        assert (out / "best.ckpt").exists()
        vocab_lines = (out / "vocab.txt").read_text().splitlines()
        assert vocab_lines == sorted(vocab_lines)
        split_text = (out / "split.txt").read_text()
        assert split_text.startswith("seed\t3\n")
        assert "[test]" in split_text

    def test_evaluate_on_test_split(self, corpus_run, tmp_path):
        result = CliRunner().invoke(
            main,
            ["evaluate", "--checkpoint", str(corpus_run["out"] / "best.ckpt"),
             "--dataset", str(corpus_run["root"]), "--encoding", "semantic",
             "--condition", "clean", "--seed", "3", "--out-dir", str(tmp_path)],
        )
        assert result.exit_code == 0, result.output
        assert re.fullmatch(r"\d+\.\d\d/\d+\.\d", result.output.strip())
        payload = json.loads((tmp_path / "report.json").read_text())
        assert payload["tags"]["eval_condition"] == "clean"
        assert payload["tags"]["train_condition"] == "clean"

    def test_evaluate_distorted_condition(self, corpus_run, tmp_path):
        result = CliRunner().invoke(
            main,
            ["evaluate", "--checkpoint", str(corpus_run["out"] / "best.ckpt"),
             "--dataset", str(corpus_run["root"]), "--encoding", "semantic",
             "--condition", "distorted", "--seed", "3", "--out-dir", str(tmp_path)],
        )
        assert result.exit_code == 0, result.output

    def test_evaluate_distorted_without_distorted_images(self, corpus_run, tmp_path):
        bare = tmp_path / "bare"
        make_corpus(bare, distorted=False)
        result = CliRunner().invoke(
            main,
            ["evaluate", "--checkpoint", str(corpus_run["out"] / "best.ckpt"),
             "--dataset", str(bare), "--encoding", "semantic",
             "--condition", "distorted", "--seed", "3", "--out-dir", str(tmp_path / "o")],
        )
        assert result.exit_code == 3
        assert "no distorted" in result.output

    def test_evaluate_encoding_mismatch(self, corpus_run, tmp_path):
        result = CliRunner().invoke(
            main,
            ["evaluate", "--checkpoint", str(corpus_run["out"] / "best.ckpt"),
             "--dataset", str(corpus_run["root"]), "--encoding", "agnostic",
             "--condition", "clean", "--seed", "3", "--out-dir", str(tmp_path)],
        )
        assert result.exit_code == 3
        assert "encoding" in result.output

    def test_transcribe_incipit(self, corpus_run):
        png = corpus_run["root"] / "inc00" / "inc00.png"
        result = CliRunner().invoke(
            main, ["transcribe", "--checkpoint", str(corpus_run["out"] / "best.ckpt"), str(png)]
        )
        assert result.exit_code == 0, result.output


class TestSelfcheck:
    def test_passes_on_healthy_build_within_budget(self):
        import time

        started = time.time()
        result = CliRunner().invoke(main, ["selfcheck"])
        elapsed = time.time() - started
        assert result.exit_code == 0, result.output
        assert "[ok] conv2d gradient" in result.output
        assert "all" in result.output and "passed" in result.output
        assert elapsed < 300.0

    def test_numeric_failure_exit_code(self, monkeypatch, tmp_path):
        import scorescribe.cli as cli_mod
        from scorescribe.training import NumericError

        def exploding_train(*args, **kwargs):
            raise NumericError("non-finite training loss at epoch 1")

        monkeypatch.setattr(cli_mod, "train", exploding_train)
        result = CliRunner().invoke(
            main, ["train", "--synth", "--out-dir", str(tmp_path), *TINY_ARGS]
        )
        assert result.exit_code == 4
        assert "non-finite" in result.output

    def test_injected_conv_backward_sign_error_fails(self, monkeypatch):
        original = ad.conv2d

        def broken_conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)):
            out = original(x, w, b, stride=stride, padding=padding)
            real = out._backward_fn
            if real is not None:
                out._backward_fn = lambda g: tuple(None if p is None else -p for p in real(g))
            return out

        monkeypatch.setattr(ad, "conv2d", broken_conv2d)
        check = verify.check_conv2d_grad()
        assert not check.passed

        result = CliRunner().invoke(main, ["selfcheck", "--ctc-instances", "5"])
        assert result.exit_code == 5
        assert "[FAIL] conv2d gradient" in result.output
