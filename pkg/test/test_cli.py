# BSD 3-Clause License
#
# Copyright (c) 2022, the medvqa authors. All rights reserved.
# See the LICENSE file for the full license text.

import csv
import json
import os

import pytest

import src.cli as cli
import src.settings as settings
from src.errors import ConfigError, UsageError


@pytest.fixture
def write_config(tmp_path, rad_root, dual_checkpoint, word_vectors_file, tiny_options):
    """Returns: a function writing a config file for a small experiment."""
    def write(root=rad_root, dialect="rad", **vqa):
        values = {
            "data": {"dialect": dialect, "vqa_root": root},
            "assets": {"word_embeddings": word_vectors_file},
            "vqa": dict(tiny_options, backbone="tiny_vit", checkpoint_in=dual_checkpoint,
                        epochs=1, batch_size=4, repetitions=1, **vqa),
        }
        path = tmp_path / "config.json"
        path.write_text(json.dumps(values))
        return str(path)
    return write


@pytest.fixture
def out(tmp_path):
    return str(tmp_path / "output")


def read_rows(path, delimiter=","):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.reader(f, delimiter=delimiter))


class TestParse:
    def test_train(self, write_config, out):
        invocation, config = cli.parse_and_validate(
            ["train", "-c", write_config(), "-o", out, "--seed", "7", "--deterministic"])
        assert invocation.subcommand == "train"
        assert invocation.output_dir == out
        assert config.get("vqa.seed_base") == 7
        assert config.get("runtime.seed") == 7
        assert config.get("runtime.deterministic") is True

    def test_overrides(self, write_config):
        invocation, config = cli.parse_and_validate(
            ["analyze", "-c", write_config(), "-s", "vqa.epochs=3", "--top-k", "2"])
        assert config.get("vqa.epochs") == 3
        assert invocation.top_k == 2
        assert invocation.overrides == ["vqa.epochs=3"]

    def test_checkpoints(self, write_config):
        invocation, _ = cli.parse_and_validate(
            ["dump-examples", "-c", write_config(), "--checkpoint", "a.pt",
             "--checkpoint", "b.pt", "--failures-only"])
        assert invocation.checkpoints == ["a.pt", "b.pt"]
        assert invocation.failures_only

    @pytest.mark.parametrize("argv", [[], ["bogus"], ["analyze", "--bogus"],
                                      ["analyze", "--top-k", "many"]])
    def test_usage_errors(self, argv):
        with pytest.raises(UsageError):
            cli.parse_and_validate(argv)

    def test_bad_value_names_key(self, write_config):
        with pytest.raises(ConfigError) as e:
            cli.parse_and_validate(["train", "-c", write_config(), "-s", "vqa.epochs=abc"])
        assert e.value.key == "vqa.epochs"

    def test_missing_dataset(self, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text("{}")
        with pytest.raises(ConfigError) as e:
            cli.parse_and_validate(["analyze", "-c", str(path)])
        assert e.value.key == "data.vqa_root"

    def test_excluded_backbone(self, write_config):
        with pytest.raises(ConfigError) as e:
            cli.parse_and_validate(["train", "-c", write_config(),
                                    "-s", "vqa.backbone=maml_stub_excluded"])
        assert e.value.key == "vqa"

    def test_context_window_names_key(self, tmp_path, caption_manifest, bpe_assets,
                                      dual_checkpoint):
        path = tmp_path / "pretrain.json"
        path.write_text(json.dumps({
            "data": {"caption_manifest": caption_manifest},
            "assets": {"tokenizer_vocab": bpe_assets[0], "tokenizer_merges": bpe_assets[1]},
            "pretrain": {"backbone": "tiny_vit", "checkpoint_in": dual_checkpoint},
        }))
        cli.parse_and_validate(["pretrain", "-c", str(path)])
        with pytest.raises(ConfigError) as e:
            cli.parse_and_validate(["pretrain", "-c", str(path), "-s", "pretrain.context_window=100"])
        assert e.value.key == "pretrain.context_window"

    def test_exit_code(self, write_config):
        assert cli.main(["train", "-c", write_config(), "-s", "vqa.epochs=abc"]) == cli.EXIT_USAGE
        assert cli.main(["frobnicate"]) == cli.EXIT_USAGE

    def test_weights_needed_without_checkpoint(self, write_config, monkeypatch):
        monkeypatch.delenv(settings.ASSET_DIR_VAR, raising=False)
        with pytest.raises(ConfigError) as e:
            cli.parse_and_validate(["train", "-c", write_config(), "-s", "vqa.checkpoint_in=null"])
        assert e.value.key == "assets.weights_dir"

    def test_weights_dir_given(self, write_config, tmp_path):
        (tmp_path / "weights").mkdir()
        _, config = cli.parse_and_validate(["train", "-c", write_config(),
                                            "-s", "vqa.checkpoint_in=null",
                                            "-s", "assets.weights_dir={}".format(tmp_path / "weights")])
        assert "assets.weights_dir" in cli.required_settings("train", config)
        assert "assets.weights_dir" not in cli.required_settings("analyze", config)

    def test_missing_asset(self, write_config, tmp_path):
        with pytest.raises(ConfigError) as e:
            cli.parse_and_validate(["train", "-c", write_config(), "-s",
                                    "assets.word_embeddings={}".format(tmp_path / "absent.txt")])
        assert e.value.key == "assets.word_embeddings"

    def test_config_is_a_directory(self, tmp_path, capsys):
        assert cli.main(["analyze", "-c", str(tmp_path)]) == cli.EXIT_USAGE
        assert "configuration error" in capsys.readouterr().err


class TestRunDirectories:
    def test_allocation(self, tmp_path):
        first = cli.allocate_run_dir(str(tmp_path), "train")
        second = cli.allocate_run_dir(str(tmp_path), "train")
        third = cli.allocate_run_dir(str(tmp_path), "train")
        assert [os.path.basename(d) for d in (first, second, third)] == \
            ["train", "train-1", "train-2"]

    def test_labels(self):
        assert cli._checkpoint_labels_(["a/run_0/final.pt", "b/run_0/final.pt"]) == \
            ["run_0_final", "run_0_final_"]

    def test_output_is_a_file(self, write_config, tmp_path, capsys):
        blocker = tmp_path / "output"
        blocker.write_text("")
        assert cli.main(["analyze", "-c", write_config(), "-o", str(blocker)]) == cli.EXIT_FAILURE
        assert "error:" in capsys.readouterr().err


class TestCommands:
    def test_analyze(self, write_config, slake_root, out):
        config = write_config(slake_root, "slake")
        assert cli.main(["analyze", "-c", config, "-o", out]) == cli.EXIT_OK
        run_dir = os.path.join(out, "analyze")
        assert read_rows(os.path.join(run_dir, "question_types.tsv"), "\t") == [
            ["split", "question_type", "count"],
            ["train", "Abnormality", "2"], ["train", "Organ", "1"], ["train", "Plane", "1"],
            ["test", "Abnormality", "1"], ["test", "Organ", "1"],
        ]
        with open(os.path.join(run_dir, "splits.json")) as f:
            splits = json.load(f)
        assert splits["disjoint"] is True
        assert splits["test_images_in_train"] == 0.0
        assert (splits["train_questions"], splits["test_questions"]) == (4, 2)
        for name in ("manifest.json", cli.LOG_FILE):
            assert os.path.isfile(os.path.join(run_dir, name))

        assert cli.main(["analyze", "-c", config, "-o", out, "--top-k", "1"]) == cli.EXIT_OK
        rows = read_rows(os.path.join(out, "analyze-1", "question_types.tsv"), "\t")
        assert rows[1:] == [["train", "Abnormality", "2"], ["test", "Abnormality", "1"]]

    def test_plot_types(self, write_config, out):
        assert cli.main(["plot-types", "-c", write_config(), "-o", out]) == cli.EXIT_OK
        rows = read_rows(os.path.join(out, "plot-types", "question_types.tsv"), "\t")
        assert rows[1] == ["train", "ORGAN", "3"]

    def test_train_evaluate_dump(self, write_config, out):
        config = write_config()
        assert cli.main(["train", "-c", config, "-o", out]) == cli.EXIT_OK
        assert os.path.isfile(os.path.join(out, "train", "run_0", "final.pt"))
        with open(os.path.join(out, "train", "metrics.json")) as f:
            assert json.load(f)["run_count"] == 1

        assert cli.main(["evaluate", "-c", config, "-o", out]) == cli.EXIT_OK
        with open(os.path.join(out, "evaluate", "metrics.json")) as f:
            metrics = json.load(f)
        assert list(metrics) == ["run_0_final"]
        assert (metrics["run_0_final"]["n_open"], metrics["run_0_final"]["n_closed"]) == (2, 2)
        assert os.path.isfile(os.path.join(out, "evaluate", "metrics.txt"))

        final = os.path.join(out, "train", "run_0", "final.pt")
        assert cli.main(["dump-examples", "-c", config, "-o", out, "--failures-only",
                         "--checkpoint", final, "--checkpoint", final]) == cli.EXIT_OK
        run_dir = os.path.join(out, "dump-examples")
        rows = read_rows(os.path.join(run_dir, "run_0_final.csv"))
        assert rows[0] == ["image_id", "question", "gold_answer", "predicted_answer", "correct"]
        assert len(rows) > 1
        assert all(r[4] == "0" for r in rows[1:])
        assert ["synpic4.jpg", "What organ is shown?", "kidney"] in [r[:3] for r in rows[1:]]
        assert read_rows(os.path.join(run_dir, "common_failures.csv")) == rows

    def test_evaluate_without_train_run(self, write_config, out):
        assert cli.main(["evaluate", "-c", write_config(), "-o", out]) == cli.EXIT_FAILURE

    def test_runtime_failure(self, write_config, out, tmp_path, capsys):
        garbage = tmp_path / "garbage.pt"
        garbage.write_bytes(b"not a checkpoint")
        code = cli.main(["evaluate", "-c", write_config(), "-o", out,
                         "--checkpoint", str(garbage)])
        assert code == cli.EXIT_FAILURE
        assert "error:" in capsys.readouterr().err
        with open(os.path.join(out, "evaluate", cli.LOG_FILE)) as f:
            assert "garbage.pt" in f.read()
