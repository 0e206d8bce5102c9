# BSD 3-Clause License
#
# Copyright (c) 2022, the medvqa authors. All rights reserved.
# See the LICENSE file for the full license text.

"""harness.py: VQA training, evaluation, repeated runs and prediction dumps"""

import csv
import functools
import logging
import os
import statistics
import typing as t
from dataclasses import dataclass, field, asdict, fields

import torch
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

import src.backbones as backbones
import src.contrastive as contrastive
import src.exporter as exporter
import src.ingest as ingest
import src.reproducibility as reproducibility
import src.settings as settings
from src.checkpoint import CheckpointHandle
from src.errors import AlignmentError, ConfigInvalid, CorruptCheckpoint, EmptySplit, \
    MissingFile, RunFailure, VocabularyMismatch, WeightsMissing
from src.records import AnswerVocabulary, DatasetSplit, VqaRecord, normalize_answer
from src.vqa_model import ModelOptions, VqaModel, WordDictionary, load_word_vectors, \
    answer_from_logits, vqa_loss

EXCLUDED_BACKBONE = "maml_stub_excluded"
"""Names the meta-learned baseline encoder, which is not implemented."""

DATASETS = ("rad", "slake")


@dataclass
class ExperimentConfig:
    """
    One VQA experiment. epochs, batch_size and learning_rate left as None
    are filled from the profile by :meth:`resolve`.
    """

    profile: str = "mevf"
    epochs: t.Optional[int] = None
    batch_size: t.Optional[int] = None
    learning_rate: t.Optional[float] = None
    backbone: str = "rn50"
    checkpoint_in: t.Optional[str] = None
    dataset: str = "rad"
    repetitions: int = 10
    seed_base: int = 0
    deterministic: bool = False
    options: ModelOptions = field(default_factory=ModelOptions)
    weights_dir: t.Optional[str] = None
    word_embeddings: t.Optional[str] = None
    device: str = "cpu"
    num_workers: int = 0

    def resolve(self) -> "ExperimentConfig":
        if self.profile not in settings.PROFILES:
            raise ConfigInvalid("Unknown profile {!r}; expected one of {}"
                                .format(self.profile, ", ".join(settings.PROFILES)))
        for name, value in settings.PROFILES[self.profile].items():
            if getattr(self, name) is None:
                setattr(self, name, value)
        return self

    def validate(self) -> "ExperimentConfig":
        """
        Resolve profile defaults and check every value.

        Raises:
          ConfigInvalid: naming the offending value.
        """
        self.resolve()
        if self.backbone == EXCLUDED_BACKBONE:
            raise ConfigInvalid("The meta-learned baseline encoder is not available; "
                                "choose one of {}".format(", ".join(backbones.names())))
        backbones.get(self.backbone)
        if self.epochs < 1:
            raise ConfigInvalid("epochs must be at least 1, got {}".format(self.epochs))
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be at least 1, got {}".format(self.batch_size))
        if not self.learning_rate > 0:
            raise ConfigInvalid("learning_rate must be positive, got {}".format(self.learning_rate))
        if self.repetitions < 1:
            raise ConfigInvalid("repetitions must be at least 1, got {}".format(self.repetitions))
        if self.dataset not in DATASETS:
            raise ConfigInvalid("dataset must be one of {}, got {!r}".format(DATASETS, self.dataset))
        o = self.options
        if o.visual_positions not in ("grid", "pooled"):
            raise ConfigInvalid("visual_positions must be grid or pooled")
        if min(o.glimpses, o.question_max_tokens, o.question_hidden, o.joint_dim) < 1:
            raise ConfigInvalid("glimpses, question_max_tokens, question_hidden and joint_dim "
                                "must be positive")
        if o.noise_sigma < 0 or not 0 <= o.dropout < 1:
            raise ConfigInvalid("noise_sigma must be non-negative and dropout in [0, 1)")
        if o.cdae_size % 16 or o.cdae_dim % 16:
            raise ConfigInvalid("cdae_size and cdae_dim must be multiples of 16")
        return self

    def to_dict(self) -> t.Dict[str, t.Any]:
        return asdict(self)

    @classmethod
    def from_settings(cls, config: settings.RootConfig) -> "ExperimentConfig":
        """Build from the ``vqa``, ``assets`` and ``runtime`` sections of a RootConfig."""
        v, a, r = config.section("vqa"), config.section("assets"), config.section("runtime")
        option_names = {f.name for f in fields(ModelOptions)}
        return cls(
            profile=v["profile"], epochs=v["epochs"], batch_size=v["batch_size"],
            learning_rate=v["learning_rate"], backbone=v["backbone"],
            checkpoint_in=v["checkpoint_in"], dataset=v["dataset"] or config.get("data.dialect"),
            repetitions=v["repetitions"], seed_base=v["seed_base"],
            deterministic=r["deterministic"],
            options=ModelOptions(**{k: v[k] for k in option_names}),
            weights_dir=a["weights_dir"], word_embeddings=a["word_embeddings"],
            device=r["device"], num_workers=r["num_workers"],
        )


@dataclass
class MetricsReport:
    """
    Accuracy overall and per answer type. A partition without records has
    accuracy None.
    """

    open_accuracy: t.Optional[float]
    closed_accuracy: t.Optional[float]
    overall_accuracy: t.Optional[float]
    n_open: float
    n_closed: float
    per_question_type: t.Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> t.Dict[str, t.Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: t.Mapping[str, t.Any]) -> "MetricsReport":
        return cls(**d)


@dataclass
class RunAggregate:
    per_run: t.List[MetricsReport]
    mean_report: MetricsReport
    run_count: int

    def to_dict(self) -> t.Dict[str, t.Any]:
        return {"run_count": self.run_count, "mean": self.mean_report.to_dict(),
                "runs": [r.to_dict() for r in self.per_run]}


class PredictionRow(t.NamedTuple):
    image_id: str
    question: str
    gold_answer: str
    predicted_answer: str
    correct: bool


class PredictionDump:
    """Predicted answers for a list of records, in record order."""

    def __init__(self, rows: t.Iterable[PredictionRow] = ()):
        self.rows = list(rows)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> t.Iterator[PredictionRow]:
        return iter(self.rows)

    def __eq__(self, other) -> bool:
        return isinstance(other, PredictionDump) and self.rows == other.rows

    def failures(self) -> "PredictionDump":
        return PredictionDump(r for r in self.rows if not r.correct)


def make_row(record: VqaRecord, predicted: str) -> PredictionRow:
    return PredictionRow(record.image_id, record.question, record.answer, predicted,
                         normalize_answer(predicted) == normalize_answer(record.answer))


# Data

IMAGE_CACHE_SIZE = 1024
"""Number of decoded images kept in memory, as uint8 pixels."""


@functools.lru_cache(maxsize=IMAGE_CACHE_SIZE)
def _pixels_(path: str, resolution: int, low_size: int) -> t.Tuple[torch.Tensor, torch.Tensor]:
    return ingest.load_image_pixels(path, resolution), ingest.load_low_resolution_pixels(path, low_size)


class VqaDataset(Dataset):
    """
    Model inputs for VQA records: the backbone-resolution image, the
    low-resolution autoencoder image, padded question word indices and a
    one-hot answer target (all zeros for answers outside the vocabulary).
    """

    def __init__(self, records: t.Sequence[VqaRecord], model: VqaModel):
        self.records = list(records)
        self.resolution = model.spec.resolution
        self.low_size = model.options.cdae_size
        self.vocabulary = model.vocabulary
        self.ids, self.lengths = model.encode_questions([r.question for r in self.records])

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> t.Dict[str, torch.Tensor]:
        record = self.records[index]
        full, low = _pixels_(record.image_path, self.resolution, self.low_size)
        target = torch.zeros(len(self.vocabulary))
        answer = self.vocabulary.index(record.answer)
        if answer is not None:
            target[answer] = 1.0
        return {"image_full": ingest.normalize_pixels(full), "image_low": ingest.to_unit_range(low),
                "ids": self.ids[index], "length": self.lengths[index], "target": target}


# Training

class EpochLoss(t.NamedTuple):
    epoch: int
    cls_loss: float
    rec_loss: float
    vqa_loss: float


@dataclass
class TrainResult:
    final: CheckpointHandle
    best: CheckpointHandle
    loss_log: t.List[EpochLoss]
    model: VqaModel


def load_visual_encoder(model: VqaModel, config: ExperimentConfig):
    """
    Give the model's image tower either the fine-tuned weights of a
    dual-encoder checkpoint or the backbone's general-domain weights.

    Raises:
      WeightsMissing: neither source is configured or available.
      CorruptCheckpoint: the checkpoint is for another backbone.
    """
    if config.checkpoint_in is not None:
        dual = contrastive.load_checkpoint(config.checkpoint_in)
        if dual.spec.name != model.spec.name:
            raise CorruptCheckpoint("{} holds backbone {}, experiment uses {}"
                                    .format(config.checkpoint_in, dual.spec.name, model.spec.name))
        model.load_visual_weights(dual.image_tower.state_dict(), config.checkpoint_in)
    elif config.weights_dir is not None:
        tower = backbones.create_image_tower(model.spec, config.weights_dir)
        model.load_visual_weights(tower.state_dict(), "general-domain weights in {}"
                                  .format(config.weights_dir))
    else:
        raise WeightsMissing("No visual encoder checkpoint or general-domain weights configured")


def _to_(batch: t.Dict[str, torch.Tensor], device: torch.device) -> t.Dict[str, torch.Tensor]:
    return {k: v.to(device) for k, v in batch.items()}


def train_vqa(config: ExperimentConfig, train: DatasetSplit, output_dir: str,
              seed: t.Optional[int] = None,
              word_vectors: t.Optional[t.Tuple[int, t.Mapping[str, t.Any]]] = None) -> TrainResult:
    """
    Train a VQA model on a split with Adam, minimising the sum of the answer
    classification and image reconstruction losses.

    Writes ``final.pt`` (after the last epoch), ``best.pt`` (lowest
    training loss), ``loss_log.csv`` and ``manifest.json`` to output_dir.

    Args:
      config: the experiment.
      train: the training split; it defines the answer vocabulary.
      output_dir: where artifacts are written.
      seed: seed of this run; config.seed_base when omitted.
      word_vectors: preloaded (width, table) word vectors; read from
        config.word_embeddings when omitted.

    Raises:
      ConfigInvalid, WeightsMissing, EmptySplit, EmbeddingAssetMissing
    """
    config.validate()
    if not len(train):
        raise EmptySplit("Cannot train on an empty split")
    seed = config.seed_base if seed is None else seed
    reproducibility.seed_everything(seed)
    reproducibility.deterministic_mode(config.deterministic)

    vocabulary = ingest.build_answer_vocabulary(train)
    questions = [r.question for r in train]
    if word_vectors is None:
        if config.word_embeddings is None:
            raise MissingFile("No word vector file configured")
        words = {w for q in questions for w in WordDictionary.tokenize(q)}
        word_vectors = load_word_vectors(config.word_embeddings, words)
    word_dim, vectors = word_vectors
    dictionary = WordDictionary.build(questions, vectors)

    spec = backbones.get(config.backbone)
    model = VqaModel(spec, dictionary, vocabulary, word_dim, config.options)
    model.question_encoder.init_word_vectors(dictionary, vectors)
    load_visual_encoder(model, config)

    device = torch.device(config.device)
    model.to(device)

    batch_size = min(config.batch_size, len(train))
    loader = DataLoader(VqaDataset(train.records, model), batch_size=batch_size, shuffle=True,
                        num_workers=config.num_workers,
                        generator=reproducibility.make_generator(seed))
    noise = reproducibility.make_generator(seed)
    optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad],
                                 lr=config.learning_rate)

    os.makedirs(output_dir, exist_ok=True)
    exporter.RunManifestExporter(config.to_dict()).export(
        os.path.join(output_dir, "manifest.json"), seed=seed, train_records=len(train),
        answers=len(vocabulary), visual_source=model.visual_source)
    logging.info("Training %s on %s records, %s answers: %s epochs, batch %s, lr %s",
                 spec.name, len(train), len(vocabulary), config.epochs, batch_size,
                 config.learning_rate)

    log, best = [], None
    for epoch in range(1, config.epochs + 1):
        model.train()
        sums, count = [0.0, 0.0, 0.0], 0
        for batch in tqdm(loader, desc="Epoch {}/{}".format(epoch, config.epochs),
                          disable=None, leave=False):
            batch = _to_(batch, device)
            optimizer.zero_grad()
            out = model(batch["image_full"], batch["image_low"], batch["ids"], batch["length"],
                        generator=noise)
            report = vqa_loss(out.logits, batch["target"], out.reconstruction.reconstruction,
                              out.reconstruction.original)
            report.vqa_loss.backward()
            optimizer.step()
            n = batch["target"].shape[0]
            for i, v in enumerate((report.cls_loss, report.rec_loss, report.vqa_loss)):
                sums[i] += v.item() * n
            count += n

        entry = EpochLoss(epoch, *(s / count for s in sums))
        log.append(entry)
        logging.info("Epoch %s/%s: loss %.4f (classification %.4f, reconstruction %.4f)",
                     epoch, config.epochs, entry.vqa_loss, entry.cls_loss, entry.rec_loss)
        if best is None or entry.vqa_loss < best.loss:
            best = model.save(os.path.join(output_dir, "best.pt"), config.to_dict(),
                              epoch, entry.vqa_loss)

    final = model.save(os.path.join(output_dir, "final.pt"), config.to_dict(),
                       config.epochs, log[-1].vqa_loss)
    exporter.LossLogCsvExporter(log).export(os.path.join(output_dir, "loss_log.csv"))
    return TrainResult(final, best, log, model)


# Evaluation

def _as_model_(model_or_path: t.Union[VqaModel, str]) -> VqaModel:
    if isinstance(model_or_path, VqaModel):
        return model_or_path
    return VqaModel.load(model_or_path)


def predict_records(model: VqaModel, records: t.Sequence[VqaRecord],
                    batch_size: int = 32) -> t.List[str]:
    """Predicted answers for records, in order, with the model in evaluation mode."""
    if not records:
        return []
    device = next(model.parameters()).device
    loader = DataLoader(VqaDataset(records, model), batch_size=batch_size)
    answers = []
    model.eval()
    with torch.no_grad():
        for batch in tqdm(loader, desc="Predicting", disable=None, leave=False):
            batch = _to_(batch, device)
            out = model(batch["image_full"], batch["image_low"], batch["ids"], batch["length"])
            answers.extend(answer_from_logits(l, model.vocabulary) for l in out.logits)
    return answers


def _rate_(flags: t.List[bool]) -> t.Optional[float]:
    return sum(flags) / len(flags) if flags else None


def compute_accuracy(dump: PredictionDump, records: t.Sequence[VqaRecord]) -> MetricsReport:
    """
    Accuracy overall, per answer type and per question type.

    Raises:
      AlignmentError: dump rows and records do not correspond one to one.
    """
    if len(dump) != len(records):
        raise AlignmentError("{} predictions for {} records".format(len(dump), len(records)))
    by_type = {"open": [], "closed": []}
    by_question_type = {}
    for i, (row, record) in enumerate(zip(dump, records)):
        if row.image_id != record.image_id or row.question != record.question:
            raise AlignmentError("Prediction {} is for ({}, {!r}), record is ({}, {!r})"
                                 .format(i, row.image_id, row.question, record.image_id,
                                         record.question))
        by_type[record.answer_type].append(row.correct)
        if record.question_type:
            by_question_type.setdefault(record.question_type, []).append(row.correct)

    return MetricsReport(
        open_accuracy=_rate_(by_type["open"]),
        closed_accuracy=_rate_(by_type["closed"]),
        overall_accuracy=_rate_(by_type["open"] + by_type["closed"]),
        n_open=len(by_type["open"]),
        n_closed=len(by_type["closed"]),
        per_question_type={k: _rate_(v) for k, v in sorted(by_question_type.items())},
    )


def evaluate(model_or_path: t.Union[VqaModel, str], test: DatasetSplit,
             vocabulary: t.Optional[AnswerVocabulary] = None,
             batch_size: int = 32) -> t.Tuple[MetricsReport, PredictionDump]:
    """
    Predict every test record once and score the predictions. Gold answers
    outside the model's vocabulary can never be predicted and count as
    incorrect.

    Raises:
      VocabularyMismatch: vocabulary differs from the model's own.
    """
    model = _as_model_(model_or_path)
    if vocabulary is not None and vocabulary != model.vocabulary:
        raise VocabularyMismatch("Given vocabulary of {} answers differs from the model's {}"
                                 .format(len(vocabulary), len(model.vocabulary)))
    unseen = sum(1 for r in test if r.answer not in model.vocabulary)
    if unseen:
        logging.info("%s of %s test answers are outside the answer vocabulary.", unseen, len(test))
    predictions = predict_records(model, test.records, batch_size)
    dump = PredictionDump(make_row(r, p) for r, p in zip(test.records, predictions))
    return compute_accuracy(dump, test.records), dump


def _mean_(values: t.List[t.Optional[float]]) -> t.Optional[float]:
    present = [v for v in values if v is not None]
    return statistics.fmean(present) if present else None


def mean_report(reports: t.Sequence[MetricsReport]) -> MetricsReport:
    """Field-wise arithmetic mean of reports; None values are left out."""
    if len(reports) == 1:
        return MetricsReport.from_dict(reports[0].to_dict())
    types = sorted({k for r in reports for k in r.per_question_type})
    return MetricsReport(
        open_accuracy=_mean_([r.open_accuracy for r in reports]),
        closed_accuracy=_mean_([r.closed_accuracy for r in reports]),
        overall_accuracy=_mean_([r.overall_accuracy for r in reports]),
        n_open=_mean_([r.n_open for r in reports]),
        n_closed=_mean_([r.n_closed for r in reports]),
        per_question_type={k: _mean_([r.per_question_type.get(k) for r in reports]) for k in types},
    )


def repeat_and_average(config: ExperimentConfig, train: DatasetSplit, test: DatasetSplit,
                       output_dir: str) -> RunAggregate:
    """
    Train and evaluate config.repetitions times, run i seeded with
    config.seed_base + i and written to ``output_dir/run_<i>``, then average
    the reports. Each run is evaluated with its final-epoch model.

    Raises:
      RunFailure: a run failed; carries the run index and the cause.
    """
    config.validate()
    words = {w for r in train for w in WordDictionary.tokenize(r.question)}
    word_vectors = load_word_vectors(config.word_embeddings, words) \
        if config.word_embeddings is not None else None

    reports = []
    for i in range(config.repetitions):
        run_dir = os.path.join(output_dir, "run_{}".format(i))
        logging.info("Run %s/%s, seed %s", i + 1, config.repetitions, config.seed_base + i)
        try:
            result = train_vqa(config, train, run_dir, config.seed_base + i, word_vectors)
            report, dump = evaluate(result.model, test)
            exporter.MetricsJsonExporter(report).export(os.path.join(run_dir, "metrics.json"))
            exporter.PredictionCsvExporter(dump).export(os.path.join(run_dir, "predictions.csv"))
        except Exception as e:
            logging.error("Run %s failed: %s", i, e)
            raise RunFailure(i, e) from e
        reports.append(report)

    aggregate = RunAggregate(reports, mean_report(reports), len(reports))
    exporter.MetricsJsonExporter(aggregate).export(os.path.join(output_dir, "metrics.json"))
    table = comparison_table([("{} ({} runs)".format(config.backbone, aggregate.run_count),
                               aggregate)])
    with open(os.path.join(output_dir, "metrics.txt"), "w") as f:
        f.write(table)
    return aggregate


def comparison_table(labelled: t.Sequence[t.Tuple[str, t.Union[MetricsReport, RunAggregate]]],
                     title: str = "Visual encoder") -> str:
    """An aligned open/closed/overall accuracy table, one row per label."""
    rows = [(label, r.mean_report if isinstance(r, RunAggregate) else r) for label, r in labelled]
    return exporter.MetricsTableExporter(rows, title).export()


# Prediction dumps

def dump_qualitative(model_or_path: t.Union[VqaModel, str], samples: t.Sequence[VqaRecord],
                     out: str, failures_only: bool = False) -> PredictionDump:
    """
    Predict samples and write the rows to a CSV file; with failures_only,
    only the incorrectly answered rows.

    Raises:
      WriteFailure: the file could not be written.
    """
    model = _as_model_(model_or_path)
    samples = list(samples)
    dump = PredictionDump(make_row(r, p) for r, p in zip(samples, predict_records(model, samples)))
    if failures_only:
        dump = dump.failures()
    exporter.PredictionCsvExporter(dump).export(out)
    return dump


def load_prediction_dump(path: str) -> PredictionDump:
    with open(path, newline="", encoding="utf-8") as f:
        return PredictionDump(
            PredictionRow(r["image_id"], r["question"], r["gold_answer"], r["predicted_answer"],
                          r["correct"].strip().lower() in ("1", "true"))
            for r in csv.DictReader(f))


def common_failures(dumps: t.Sequence[PredictionDump]) -> PredictionDump:
    """
    The rows every dump answered incorrectly, in the first dump's order.
    Rows are matched by image id and question.
    """
    if not dumps:
        return PredictionDump()
    failed = [{(r.image_id, r.question) for r in d if not r.correct} for d in dumps]
    shared = set.intersection(*failed)
    return PredictionDump(r for r in dumps[0] if (r.image_id, r.question) in shared)
