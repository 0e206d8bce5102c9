# BSD 3-Clause License
#
# Copyright (c) 2022, the medvqa authors. All rights reserved.
# See the LICENSE file for the full license text.

"""contrastive.py: contrastive fine-tuning of paired image and text encoders"""

import logging
import math
import os
import typing as t
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

import src.backbones as backbones
import src.checkpoint as checkpoint
import src.exporter as exporter
import src.reproducibility as reproducibility
from src.errors import ConfigInvalid, CorruptCheckpoint, EmptyCorpus, NonSquare, \
    ResolutionMismatch, ShapeMismatch, TokenOutOfRange
from src.ingest import CONTEXT_WINDOW, CaptionTokenizer, load_and_preprocess_image
from src.records import ImageCaptionRecord

LOGIT_SCALE_INIT = math.log(1 / 0.07)
"""Initial log temperature of the similarity logits."""

MAX_LOGIT_SCALE = 100.0
"""Upper bound of the (exponentiated) temperature."""

CHECKPOINT_KIND = "dual_encoder"


@dataclass
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-5
    backbone: str = "rn50"
    context_window: int = CONTEXT_WINDOW
    logit_scale_init: float = LOGIT_SCALE_INIT
    max_logit_scale: float = MAX_LOGIT_SCALE
    freeze_logit_scale: bool = False
    seed: int = 0
    deterministic: bool = False
    device: str = "cpu"
    num_workers: int = 0

    def validate(self) -> "PretrainConfig":
        """
        Raises:
          ConfigInvalid: a schedule value is out of range or the backbone is
            unknown.
        """
        if self.epochs < 1:
            raise ConfigInvalid("epochs must be at least 1, got {}".format(self.epochs))
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be at least 1, got {}".format(self.batch_size))
        if not self.learning_rate > 0:
            raise ConfigInvalid("learning_rate must be positive, got {}".format(self.learning_rate))
        if self.context_window < 1:
            raise ConfigInvalid("context_window must be at least 1, got {}".format(self.context_window))
        if not self.max_logit_scale > 0:
            raise ConfigInvalid("max_logit_scale must be positive")
        spec = backbones.get(self.backbone)
        if self.context_window > spec.max_positions:
            raise ConfigInvalid("context_window {} exceeds the {} text positions of {}"
                                .format(self.context_window, spec.max_positions, spec.name),
                                "context_window")
        return self

    @classmethod
    def from_settings(cls, config) -> "PretrainConfig":
        """Build from the ``pretrain`` and ``runtime`` sections of a RootConfig."""
        p, r = config.section("pretrain"), config.section("runtime")
        return cls(
            epochs=p["epochs"], batch_size=p["batch_size"], learning_rate=p["learning_rate"],
            backbone=p["backbone"], context_window=p["context_window"],
            logit_scale_init=p["logit_scale_init"], max_logit_scale=p["max_logit_scale"],
            freeze_logit_scale=p["freeze_logit_scale"], seed=r["seed"],
            deterministic=r["deterministic"], device=r["device"], num_workers=r["num_workers"],
        )


@dataclass
class EmbeddingBatch:
    """A batch of embeddings [N, D] of one modality, ``image`` or ``text``."""

    vectors: torch.Tensor
    modality: str

    def normalized(self) -> "EmbeddingBatch":
        return EmbeddingBatch(F.normalize(self.vectors, dim=-1), self.modality)

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class SimilarityMatrix:
    """Temperature-scaled cosine similarities, images along rows."""

    logits: torch.Tensor
    logit_scale: torch.Tensor


@dataclass
class ContrastiveLossReport:
    image_to_text: torch.Tensor
    text_to_image: torch.Tensor
    total: torch.Tensor
    """Mean of the two directional cross-entropies."""


class DualEncoder(nn.Module):
    """An image tower and a text tower projecting into a shared space."""

    def __init__(self, spec: backbones.BackboneSpec, image_tower: t.Optional[nn.Module] = None,
                 text_tower: t.Optional[nn.Module] = None,
                 logit_scale_init: float = LOGIT_SCALE_INIT,
                 max_logit_scale: float = MAX_LOGIT_SCALE):
        super().__init__()
        self.spec = spec
        self.image_tower = image_tower if image_tower is not None \
            else backbones.create_image_tower(spec)
        self.text_tower = text_tower if text_tower is not None \
            else backbones.create_text_tower(spec)
        self.logit_scale = nn.Parameter(torch.tensor(float(logit_scale_init)))
        self.max_logit_scale = max_logit_scale

    @classmethod
    def from_pretrained(cls, spec: backbones.BackboneSpec, weights_dir: str,
                        **kwargs) -> "DualEncoder":
        """
        Build a dual encoder from general-domain weights.

        Raises:
          WeightsMissing: weights for either tower are missing.
        """
        return cls(spec, backbones.create_image_tower(spec, weights_dir),
                   backbones.create_text_tower(spec, weights_dir), **kwargs)

    @property
    def vocab_size(self) -> int:
        return self.text_tower.config.vocab_size

    def scale(self) -> torch.Tensor:
        """The effective temperature: exp(logit_scale), capped."""
        return self.logit_scale.exp().clamp(max=self.max_logit_scale)

    def clamp_logit_scale(self):
        with torch.no_grad():
            self.logit_scale.clamp_(max=math.log(self.max_logit_scale))

    def forward(self, images: torch.Tensor, ids: torch.Tensor,
                lengths: torch.Tensor) -> SimilarityMatrix:
        return similarity_logits(encode_images(self, images),
                                 encode_texts(self, ids, lengths), self.scale())


def encode_images(model: DualEncoder, images: torch.Tensor) -> EmbeddingBatch:
    """
    Embed a batch of preprocessed images [N, 3, R, R].

    Raises:
      ResolutionMismatch: the images are not the backbone's resolution.
    """
    r = model.spec.resolution
    if images.ndim != 4 or tuple(images.shape[1:]) != (3, r, r):
        raise ResolutionMismatch("{} expects images of shape [N, 3, {}, {}], got {}"
                                 .format(model.spec.name, r, r, list(images.shape)))
    pooled, _ = backbones.image_features(model.image_tower, images)
    return EmbeddingBatch(pooled, "image")


def encode_texts(model: DualEncoder, ids: torch.Tensor, lengths: torch.Tensor) -> EmbeddingBatch:
    """
    Embed a batch of token sequences [N, L].

    Raises:
      TokenOutOfRange: an id lies outside the text encoder's vocabulary.
    """
    if ids.numel() and (ids.min() < 0 or ids.max() >= model.vocab_size):
        raise TokenOutOfRange("Token ids must lie in [0, {}), found range [{}, {}]"
                              .format(model.vocab_size, int(ids.min()), int(ids.max())))
    return EmbeddingBatch(backbones.text_features(model.text_tower, ids, lengths), "text")


def similarity_logits(images: EmbeddingBatch, texts: EmbeddingBatch,
                      logit_scale: t.Union[float, torch.Tensor]) -> SimilarityMatrix:
    """
    Scaled cosine similarity between every image and every text.

    Raises:
      ShapeMismatch: the two batches differ in embedding width.
    """
    if images.vectors.shape[-1] != texts.vectors.shape[-1]:
        raise ShapeMismatch("Image embeddings have width {}, text embeddings {}"
                            .format(images.vectors.shape[-1], texts.vectors.shape[-1]))
    scale = torch.as_tensor(logit_scale, dtype=images.vectors.dtype, device=images.vectors.device)
    logits = scale * images.normalized().vectors @ texts.normalized().vectors.t()
    return SimilarityMatrix(logits, scale)


def symmetric_contrastive_loss(similarity: SimilarityMatrix) -> ContrastiveLossReport:
    """
    Mean of the image-to-text and text-to-image cross-entropies, the matching
    pair of each row and column lying on the diagonal.

    Raises:
      NonSquare: the similarity matrix is not square.
    """
    logits = similarity.logits
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise NonSquare("Similarity matrix must be square, got {}".format(list(logits.shape)))
    labels = torch.arange(logits.shape[0], device=logits.device)
    i2t = F.cross_entropy(logits, labels)
    t2i = F.cross_entropy(logits.t(), labels)
    return ContrastiveLossReport(i2t, t2i, (i2t + t2i) / 2)


class CaptionDataset(Dataset):
    """Preprocessed images with their tokenized captions."""

    def __init__(self, records: t.Sequence[ImageCaptionRecord], tokenizer: CaptionTokenizer,
                 resolution: int, context_window: int = CONTEXT_WINDOW):
        self.records = list(records)
        self.resolution = resolution
        self.tokens = [tokenizer(r.caption, context_window) for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int):
        tokens = self.tokens[index]
        image = load_and_preprocess_image(self.records[index].image_path, self.resolution)
        return image, torch.tensor(tokens.ids, dtype=torch.long), tokens.length


class EpochLoss(t.NamedTuple):
    epoch: int
    train_loss: float
    val_loss: t.Optional[float]


@dataclass
class PretrainResult:
    final: checkpoint.CheckpointHandle
    best: checkpoint.CheckpointHandle
    loss_log: t.List[EpochLoss]


def save_checkpoint(model: DualEncoder, path: str, config: t.Optional[PretrainConfig] = None,
                    epoch: int = 0, loss: t.Optional[float] = None) -> checkpoint.CheckpointHandle:
    header = {
        "backbone": model.spec.to_dict(),
        "max_logit_scale": model.max_logit_scale,
        "config": asdict(config) if config is not None else None,
    }
    return checkpoint.save(path, CHECKPOINT_KIND, model, header, epoch, loss)


def load_checkpoint(path: str, model: t.Optional[DualEncoder] = None) -> DualEncoder:
    """
    Restore a dual encoder from a checkpoint, either into the given model or
    into a new one built from the checkpoint's backbone spec.

    Raises:
      WeightsMissing: path does not exist.
      CorruptCheckpoint: the checkpoint is unreadable or stores another
        backbone than model.
    """
    payload = checkpoint.load(path, CHECKPOINT_KIND)
    spec = backbones.BackboneSpec.from_dict(payload["header"]["backbone"])
    if model is None:
        model = DualEncoder(spec, max_logit_scale=payload["header"]["max_logit_scale"])
    elif model.spec.name != spec.name:
        raise CorruptCheckpoint("{} holds backbone {}, model is {}"
                                .format(path, spec.name, model.spec.name))
    checkpoint.apply_state(model, payload["state_dict"], path)
    return model


def _batch_loss_(model: DualEncoder, batch, device: torch.device) -> ContrastiveLossReport:
    images, ids, lengths = (x.to(device) for x in batch)
    return symmetric_contrastive_loss(model(images, ids, lengths))


def validation_loss(model: DualEncoder, loader: DataLoader, device: torch.device) -> float:
    """
    Mean symmetric loss over a loader, weighted by batch size.

    Raises:
      EmptyCorpus: the loader yields no batches.
    """
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in loader:
            n = batch[0].shape[0]
            total += _batch_loss_(model, batch, device).total.item() * n
            count += n
    if not count:
        raise EmptyCorpus("Validation loader yielded no batches")
    return total / count


def _validation_loader_(records: t.List[ImageCaptionRecord], tokenizer: CaptionTokenizer,
                        model: DualEncoder, config: PretrainConfig) -> DataLoader:
    # every batch holds exactly batch_size pairs
    batch_size = min(config.batch_size, len(records))
    return DataLoader(CaptionDataset(records, tokenizer, model.spec.resolution, config.context_window),
                      batch_size=batch_size, drop_last=True, num_workers=config.num_workers)


def run_pretraining(config: PretrainConfig, corpus: t.Iterable[ImageCaptionRecord],
                    model: DualEncoder, tokenizer: CaptionTokenizer, output_dir: str,
                    validation: t.Optional[t.Iterable[ImageCaptionRecord]] = None) -> PretrainResult:
    """
    Fine-tune a dual encoder on image-caption pairs with Adam, writing the
    last and the best checkpoint and a per-epoch loss log to output_dir.
    The best checkpoint minimises validation loss, or training loss when no
    validation records are given.

    Raises:
      ConfigInvalid: config is invalid or names another backbone than model.
      EmptyCorpus: corpus has no records.
      CheckpointWriteFailure: a checkpoint could not be written.
    """
    config.validate()
    records = list(corpus)
    if not records:
        raise EmptyCorpus("Cannot fine-tune on an empty corpus")
    if model.spec.name != config.backbone:
        raise ConfigInvalid("Model backbone {} does not match configured backbone {}"
                            .format(model.spec.name, config.backbone))

    reproducibility.seed_everything(config.seed)
    reproducibility.deterministic_mode(config.deterministic)

    batch_size = config.batch_size
    if len(records) < batch_size:
        logging.warning("Corpus has %s records, fewer than batch size %s; using batches of %s.",
                        len(records), batch_size, len(records))
        batch_size = len(records)

    device = torch.device(config.device)
    model.to(device)
    model.max_logit_scale = config.max_logit_scale
    model.logit_scale.requires_grad_(not config.freeze_logit_scale)

    loader = DataLoader(CaptionDataset(records, tokenizer, model.spec.resolution, config.context_window),
                        batch_size=batch_size, shuffle=True, drop_last=True,
                        num_workers=config.num_workers,
                        generator=reproducibility.make_generator(config.seed))
    validation = list(validation) if validation is not None else []
    val_loader = _validation_loader_(validation, tokenizer, model, config) if validation else None

    optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad],
                                 lr=config.learning_rate)
    os.makedirs(output_dir, exist_ok=True)
    log, final, best = [], None, None

    for epoch in range(1, config.epochs + 1):
        model.train()
        total, batches = 0.0, 0
        for batch in tqdm(loader, desc="Epoch {}/{}".format(epoch, config.epochs),
                          disable=None, leave=False):
            optimizer.zero_grad()
            report = _batch_loss_(model, batch, device)
            report.total.backward()
            optimizer.step()
            model.clamp_logit_scale()
            total += report.total.item()
            batches += 1

        train_loss = total / batches
        val_loss = validation_loss(model, val_loader, device) if val_loader is not None else None
        log.append(EpochLoss(epoch, train_loss, val_loss))
        logging.info("Epoch %s/%s: train loss %.4f, validation loss %s",
                     epoch, config.epochs, train_loss,
                     "n/a" if val_loss is None else "{:.4f}".format(val_loss))

        final = save_checkpoint(model, os.path.join(output_dir, "last.pt"), config, epoch, train_loss)
        score = train_loss if val_loss is None else val_loss
        if best is None or score < best.loss:
            best = save_checkpoint(model, os.path.join(output_dir, "best.pt"), config, epoch, score)

    exporter.LossLogCsvExporter(log).export(os.path.join(output_dir, "loss_log.csv"))
    logging.info("Fine-tuning finished; best epoch %s with loss %.4f", best.epoch, best.loss)
    return PretrainResult(final, best, log)
