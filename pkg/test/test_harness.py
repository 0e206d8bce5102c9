# BSD 3-Clause License
#
# Copyright (c) 2022, the medvqa authors. All rights reserved.
# See the LICENSE file for the full license text.

import json
import os
import random
from collections import OrderedDict

import pytest
import torch

import src.backbones as backbones
import src.contrastive as contrastive
import src.exporter as exporter
import src.harness as harness
import src.ingest as ingest
import src.reproducibility as reproducibility
import src.settings as settings
from src.errors import AlignmentError, ConfigInvalid, CorruptCheckpoint, DecodeFailure, \
    RunFailure, VocabularyMismatch, WeightsMissing, WriteFailure
from src.harness import ExperimentConfig, MetricsReport, PredictionDump, PredictionRow
from src.records import AnswerVocabulary, DatasetSplit, QuestionTypeHistogram, VqaRecord
from src.vqa_model import ModelOptions

OVERFIT_QUESTIONS = [
    ("Is there a fracture?", "yes", "closed"),
    ("What organ is shown?", "lung", "open"),
    ("Which plane is this?", "axial", "open"),
    ("Is this abnormal?", "no", "closed"),
]


@pytest.fixture
def config(dual_checkpoint, word_vectors_file, tiny_options):
    return ExperimentConfig(profile="mevf", epochs=2, batch_size=4, backbone="tiny_vit",
                            checkpoint_in=dual_checkpoint, repetitions=2,
                            options=ModelOptions(**tiny_options),
                            word_embeddings=word_vectors_file)


@pytest.fixture
def rad(rad_root):
    return ingest.load_vqa_dataset(rad_root, "rad")


def record(i, answer_type, question_type=None):
    return VqaRecord("img{}".format(i), "img{}".format(i), "Question {}?".format(i), "yes",
                     answer_type, question_type)


def dump_for(records, correct):
    return PredictionDump(PredictionRow(r.image_id, r.question, r.answer,
                                        r.answer if c else "other", c)
                          for r, c in zip(records, correct))


class TestExperimentConfig:
    def test_profile_resolution(self):
        config = ExperimentConfig(profile="qcr", backbone="vit_b32").validate()
        assert (config.epochs, config.batch_size, config.learning_rate) == (200, 16, 1e-3)

    def test_mevf_resolution(self):
        config = ExperimentConfig(profile="mevf", backbone="vit_b32").validate()
        assert (config.epochs, config.batch_size, config.learning_rate) == (20, 32, 2e-3)

    def test_explicit_values_kept(self):
        config = ExperimentConfig(profile="qcr", epochs=5, backbone="vit_b32").validate()
        assert (config.epochs, config.batch_size) == (5, 16)

    def test_excluded_backbone(self):
        with pytest.raises(ConfigInvalid):
            ExperimentConfig(backbone=harness.EXCLUDED_BACKBONE).validate()

    def test_unknown_backbone(self):
        with pytest.raises(ConfigInvalid):
            ExperimentConfig(backbone="densenet").validate()

    @pytest.mark.parametrize("values", [
        dict(epochs=0), dict(batch_size=0), dict(learning_rate=0.0), dict(repetitions=0),
        dict(dataset="pathvqa"), dict(profile="fast"),
        dict(options=ModelOptions(cdae_size=20)), dict(options=ModelOptions(dropout=1.0)),
        dict(options=ModelOptions(visual_positions="spatial")),
    ])
    def test_invalid(self, values):
        with pytest.raises(ConfigInvalid):
            ExperimentConfig(**values).validate()

    def test_from_settings(self):
        config = ExperimentConfig.from_settings(settings.import_config())
        assert config.profile == "mevf"
        assert config.epochs == 20
        assert config.dataset == "rad"
        assert config.options.cdae_dim == 256


class TestAccuracy:
    def test_open_and_closed(self):
        records = [record(i, "open") for i in range(4)] + [record(i, "closed") for i in range(4, 8)]
        dump = dump_for(records, [True, True, False, False, True, True, True, False])
        report = harness.compute_accuracy(dump, records)
        assert report.open_accuracy == pytest.approx(0.5)
        assert report.closed_accuracy == pytest.approx(0.75)
        assert report.overall_accuracy == pytest.approx(0.625)
        assert (report.n_open, report.n_closed) == (4, 4)

    def test_no_open_questions(self):
        records = [record(i, "closed") for i in range(3)]
        report = harness.compute_accuracy(dump_for(records, [True, False, True]), records)
        assert report.open_accuracy is None
        assert report.overall_accuracy == report.closed_accuracy

    def test_overall_is_weighted_mean(self):
        rng = random.Random(0)
        for _ in range(1000):
            n = rng.randint(1, 20)
            records = [record(i, rng.choice(("open", "closed"))) for i in range(n)]
            report = harness.compute_accuracy(
                dump_for(records, [rng.random() < 0.5 for _ in range(n)]), records)
            parts = [(a, c) for a, c in ((report.open_accuracy, report.n_open),
                                         (report.closed_accuracy, report.n_closed)) if c]
            expected = sum(a * c for a, c in parts) / sum(c for _, c in parts)
            assert report.overall_accuracy == pytest.approx(expected, abs=1e-12)

    def test_per_question_type(self):
        records = [record(0, "open", "ORGAN"), record(1, "open", "ORGAN"), record(2, "closed", "PRES")]
        report = harness.compute_accuracy(dump_for(records, [True, False, False]), records)
        assert report.per_question_type == {"ORGAN": 0.5, "PRES": 0.0}

    def test_order_independent(self):
        rng = random.Random(3)
        records = [record(i, rng.choice(("open", "closed")), rng.choice(("ORGAN", "PRES")))
                   for i in range(12)]
        dump = dump_for(records, [rng.random() < 0.5 for _ in records])
        order = list(range(12))
        rng.shuffle(order)
        shuffled = harness.compute_accuracy(PredictionDump(dump.rows[i] for i in order),
                                            [records[i] for i in order])
        assert shuffled == harness.compute_accuracy(dump, records)

    def test_alignment(self):
        records = [record(i, "open") for i in range(3)]
        with pytest.raises(AlignmentError):
            harness.compute_accuracy(dump_for(records[:2], [True, True]), records)
        with pytest.raises(AlignmentError):
            harness.compute_accuracy(dump_for(records[::-1], [True] * 3), records)

    def test_normalized_comparison(self):
        row = harness.make_row(record(0, "closed"), " Yes. ")
        assert row.correct

    def test_mean_report(self):
        a = MetricsReport(0.5, None, 0.5, 2, 0, {"A": 1.0})
        b = MetricsReport(1.0, 0.5, 0.75, 2, 2, {"A": 0.0, "B": 1.0})
        mean = harness.mean_report([a, b])
        assert mean.open_accuracy == pytest.approx(0.75)
        assert mean.closed_accuracy == pytest.approx(0.5)
        assert mean.overall_accuracy == pytest.approx(0.625)
        assert mean.per_question_type == {"A": 0.5, "B": 1.0}
        assert harness.mean_report([a]) == a


class TestPredictionDumps:
    def test_common_failures(self):
        records = [record(i, "open") for i in range(4)]
        first = dump_for(records, [False, False, True, False])
        second = dump_for(records[::-1], [True, True, False, True])
        common = harness.common_failures([first, second])
        assert [r.image_id for r in common] == ["img1"]
        assert len(harness.common_failures([])) == 0

    def test_csv_round_trip(self, tmp_path):
        records = [record(i, "open") for i in range(3)]
        dump = dump_for(records, [True, False, True])
        path = str(tmp_path / "dump.csv")
        exporter.PredictionCsvExporter(dump).export(path)
        assert harness.load_prediction_dump(path) == dump

    def test_comparison_table(self):
        table = harness.comparison_table([
            ("rn50", MetricsReport(0.5, None, 0.5, 2, 0)),
            ("vit_b32", MetricsReport(0.25, 1.0, 0.625, 4, 4)),
        ])
        lines = table.splitlines()
        assert lines[0].split() == ["Visual", "encoder", "Open", "Closed", "Overall"]
        assert set(lines[1]) == {"-"}
        assert lines[2].split() == ["rn50", "50.00", "n/a", "50.00"]
        assert lines[3].split() == ["vit_b32", "25.00", "100.00", "62.50"]


class TestTraining:
    def test_outputs(self, config, rad, tmp_path):
        out = str(tmp_path / "run")
        result = harness.train_vqa(config, rad[0], out)
        for name in ("manifest.json", "best.pt", "final.pt", "loss_log.csv"):
            assert os.path.isfile(os.path.join(out, name))
        assert [e.epoch for e in result.loss_log] == [1, 2]
        assert result.final.epoch == 2
        assert result.best.loss == min(e.vqa_loss for e in result.loss_log)
        with open(os.path.join(out, "manifest.json")) as f:
            manifest = json.load(f)
        assert manifest["config"]["epochs"] == 2
        assert manifest["seed"] == 0
        assert manifest["answers"] == 6

    def test_manifest_records_profile_schedule(self, config, rad, tmp_path):
        config.epochs, config.batch_size, config.learning_rate = None, None, None
        out = str(tmp_path / "run")
        result = harness.train_vqa(config, rad[0], out)
        assert len(result.loss_log) == 20
        with open(os.path.join(out, "manifest.json")) as f:
            recorded = json.load(f)["config"]
        assert (recorded["epochs"], recorded["batch_size"], recorded["learning_rate"]) == \
            (20, 32, 2e-3)

    def test_dataset_items(self, config, rad, tmp_path):
        result = harness.train_vqa(config, rad[0], str(tmp_path))
        record = rad[1].records[0]
        item = harness.VqaDataset([record], result.model)[0]
        resolution, low_size = result.model.spec.resolution, result.model.options.cdae_size
        assert torch.equal(item["image_full"],
                           ingest.load_and_preprocess_image(record.image_path, resolution))
        assert torch.equal(item["image_low"],
                           ingest.load_low_resolution_image(record.image_path, low_size))
        full, low = harness._pixels_(record.image_path, resolution, low_size)
        assert full.dtype == low.dtype == torch.uint8

    def test_needs_visual_weights(self, config, rad, tmp_path):
        config.checkpoint_in = None
        with pytest.raises(WeightsMissing):
            harness.train_vqa(config, rad[0], str(tmp_path))

    def test_checkpoint_for_other_backbone(self, config, rad, tmp_path):
        path = str(tmp_path / "resnet.pt")
        contrastive.save_checkpoint(contrastive.DualEncoder(backbones.get("tiny_resnet")),
                                    path)
        config.checkpoint_in = path
        with pytest.raises(CorruptCheckpoint):
            harness.train_vqa(config, rad[0], str(tmp_path / "run"))

    def test_evaluate(self, config, rad, tmp_path):
        train, test = rad
        result = harness.train_vqa(config, train, str(tmp_path))
        report, dump = harness.evaluate(result.final.path, test)
        assert (report.n_open, report.n_closed) == (2, 2)
        assert len(dump) == 4
        # "kidney" never occurs in training
        assert not dump.rows[3].correct
        assert all(r.predicted_answer in result.model.vocabulary for r in dump)

    def test_vocabulary_mismatch(self, config, rad, tmp_path):
        result = harness.train_vqa(config, rad[0], str(tmp_path))
        with pytest.raises(VocabularyMismatch):
            harness.evaluate(result.model, rad[1], AnswerVocabulary(["yes"]))

    def test_dump_failures_only(self, config, rad, tmp_path):
        result = harness.train_vqa(config, rad[0], str(tmp_path))
        out = str(tmp_path / "failures.csv")
        dump = harness.dump_qualitative(result.model, rad[1].records, out, failures_only=True)
        assert len(dump) >= 1
        assert all(not r.correct for r in dump)
        assert harness.load_prediction_dump(out) == dump

    def test_repeat_and_average(self, config, rad, tmp_path):
        out = str(tmp_path / "train")
        aggregate = harness.repeat_and_average(config, *rad, out)
        assert aggregate.run_count == 2
        for i in range(2):
            with open(os.path.join(out, "run_{}".format(i), "manifest.json")) as f:
                assert json.load(f)["seed"] == i
            assert os.path.isfile(os.path.join(out, "run_{}".format(i), "predictions.csv"))
        assert aggregate.mean_report.overall_accuracy == pytest.approx(
            sum(r.overall_accuracy for r in aggregate.per_run) / 2)
        with open(os.path.join(out, "metrics.json")) as f:
            assert json.load(f)["run_count"] == 2
        with open(os.path.join(out, "metrics.txt")) as f:
            assert "tiny_vit (2 runs)" in f.read()

    def test_run_failure(self, config, rad, tmp_path):
        missing = str(tmp_path / "missing.jpg")
        test = DatasetSplit("test", [VqaRecord("missing.jpg", missing, "Is there a fracture?",
                                               "yes", "closed")])
        with pytest.raises(RunFailure) as e:
            harness.repeat_and_average(config, rad[0], test, str(tmp_path / "train"))
        assert e.value.run_index == 0
        assert isinstance(e.value.cause, DecodeFailure)

    def test_overfits_small_set(self, config, rad_root, tmp_path):
        images = [os.path.join(rad_root, "images", "synpic{}.jpg".format(i)) for i in range(1, 5)]
        split = DatasetSplit("train", [VqaRecord(os.path.basename(p), p, q, a, at)
                                       for p in images for q, a, at in OVERFIT_QUESTIONS])
        config.profile, config.epochs, config.batch_size, config.learning_rate = "qcr", None, None, None
        config.deterministic = True
        config.options.question_hidden = 32
        config.options.joint_dim = 16
        result = harness.train_vqa(config, split, str(tmp_path / "run"))
        assert len(result.loss_log) == 200
        report, _ = harness.evaluate(result.model, split)
        assert report.overall_accuracy == 1.0

    def test_pipeline_is_deterministic(self, config, rad, caption_manifest, bpe_assets, tmp_path):
        corpus = ingest.load_image_caption_corpus(caption_manifest)
        tokenizer = ingest.CaptionTokenizer(*bpe_assets)
        config.deterministic = True
        outcomes = []
        for i in range(2):
            reproducibility.seed_everything(11)
            dual = contrastive.DualEncoder(backbones.get("tiny_vit"))
            pretrain = contrastive.PretrainConfig(epochs=1, batch_size=4, backbone="tiny_vit",
                                                  context_window=8, seed=3, deterministic=True)
            pretrained = contrastive.run_pretraining(pretrain, corpus, dual, tokenizer,
                                                     str(tmp_path / "pretrain{}".format(i)))
            config.checkpoint_in = pretrained.final.path
            result = harness.train_vqa(config, rad[0], str(tmp_path / "train{}".format(i)))
            report, dump = harness.evaluate(result.final.path, rad[1])
            outcomes.append((pretrained.loss_log, result.loss_log, report, dump))
        assert outcomes[0] == outcomes[1]


class TestExporters:
    def test_loss_log_without_entries(self, tmp_path):
        path = tmp_path / "loss_log.csv"
        exporter.LossLogCsvExporter([]).export(str(path))
        assert path.read_text() == "epoch\n"

    def test_histogram_tsv(self, tmp_path):
        path = tmp_path / "types.tsv"
        hist = QuestionTypeHistogram(OrderedDict([("ORGAN", 3), ("PRES", 1)]), 4)
        exporter.HistogramTsvExporter({"train": hist}).export(str(path))
        assert path.read_text().splitlines() == ["split\tquestion_type\tcount",
                                                 "train\tORGAN\t3", "train\tPRES\t1"]

    def test_metrics_json_mapping(self, tmp_path):
        path = tmp_path / "metrics.json"
        exporter.MetricsJsonExporter({"rn50": MetricsReport(0.5, 1.0, 0.75, 2, 2)}).export(str(path))
        assert json.loads(path.read_text())["rn50"]["closed_accuracy"] == 1.0

    def test_manifest(self, tmp_path):
        path = tmp_path / "manifest.json"
        exporter.RunManifestExporter({"epochs": 3}).export(str(path), seed=4)
        manifest = json.loads(path.read_text())
        assert manifest["config"] == {"epochs": 3}
        assert manifest["seed"] == 4
        assert "torch" in manifest["environment"]

    def test_write_failure(self, tmp_path):
        with pytest.raises(WriteFailure):
            exporter.write_json(str(tmp_path), {})
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(WriteFailure):
            exporter.generate(str(blocker / "out.csv"), [])
