# BSD 3-Clause License
#
# Copyright (c) 2022, the medvqa authors. All rights reserved.
# See the LICENSE file for the full license text.

"""ingest.py: load captions, VQA splits and images into model-ready form"""

import json
import logging
import os
import typing as t
from collections import Counter, OrderedDict

import torch
from PIL import Image, UnidentifiedImageError
from torchvision.transforms import functional as TF

from src.dataparse import CaptionCorpus, CaptionManifestParser, VqaJsonParser, \
    get_dialect
from src.errors import MissingFile, EmptyCorpus, VocabularyMissing, EmptySplit, \
    MissingLabels, DecodeFailure, SchemaViolation
from src.records import DatasetSplit, AnswerVocabulary, OverlapReport, \
    QuestionTypeHistogram, TokenSequence

CONTEXT_WINDOW = 76
"""Number of caption tokens fed to the text encoder by default."""

PAD_ID = 0
"""Token id filling caption positions past the last real token."""

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
"""Per-channel normalisation constants the backbones were pretrained with."""


def load_image_caption_corpus(manifest_path: str,
                              image_root: t.Optional[str] = None) -> CaptionCorpus:
    """
    Load a tab-separated caption manifest.

    Args:
      manifest_path: the manifest file.
      image_root: directory manifest image paths are relative to; the
        manifest's own directory when omitted.

    Returns:
      the parsed corpus, whose ``missing`` list names the image ids of rows
      whose image file does not exist.

    Raises:
      MissingFile: the manifest does not exist.
      MalformedRow: a row has the wrong number of columns.
      EmptyCorpus: no row yielded a record.
    """
    if not os.path.isfile(manifest_path):
        logging.error("Caption manifest %s not found.", manifest_path)
        raise MissingFile("Caption manifest not found: {}".format(manifest_path))
    if image_root is None:
        image_root = os.path.dirname(os.path.abspath(manifest_path))

    with open(manifest_path, encoding="utf-8") as f:
        corpus = CaptionManifestParser(f, image_root).parse()

    if not corpus.records:
        raise EmptyCorpus("No usable records in {}".format(manifest_path))
    if corpus.missing:
        logging.warning("%s of %s manifest rows reference missing images.",
                        len(corpus.missing), len(corpus.missing) + len(corpus.records))
    logging.info("Loaded %s image-caption pairs from %s", len(corpus), manifest_path)
    return corpus


class CaptionTokenizer:
    """
    Byte-pair-encoding caption tokenizer producing fixed-length id sequences
    without start or end markers.
    """

    def __init__(self, vocab_path: str, merges_path: str):
        """
        Raises:
          VocabularyMissing: either asset file does not exist.
        """
        for path in (vocab_path, merges_path):
            if not os.path.isfile(path):
                logging.error("Tokenizer asset %s not found.", path)
                raise VocabularyMissing("Tokenizer asset not found: {}".format(path))

        from transformers import CLIPTokenizer
        # Truncation happens here, not in the tokenizer.
        self._tokenizer = CLIPTokenizer(vocab_path, merges_path,
                                        model_max_length=int(1e9))

    @property
    def vocab_size(self) -> int:
        return len(self._tokenizer)

    def encode(self, caption: str) -> t.List[int]:
        """The untruncated ids of a caption."""
        if not caption.strip():
            return []
        return self._tokenizer.encode(caption, add_special_tokens=False)

    def __call__(self, caption: str, context_window: int = CONTEXT_WINDOW) -> TokenSequence:
        return tokenize_caption(caption, context_window, self)


def tokenize_caption(caption: str, context_window: int,
                     tokenizer: CaptionTokenizer) -> TokenSequence:
    """
    Tokenize a caption into exactly ``context_window`` ids: longer captions
    are truncated, shorter ones padded with zeros.
    """
    if context_window < 1:
        raise ValueError("context_window must be at least 1, got {}".format(context_window))
    ids = tokenizer.encode(caption)[:context_window]
    length = len(ids)
    return TokenSequence(tuple(ids) + (PAD_ID,) * (context_window - length), length)


def _read_question_file_(path: str) -> t.List[t.Any]:
    if not os.path.isfile(path):
        logging.error("Question file %s not found.", path)
        raise MissingFile("Question file not found: {}".format(path))
    with open(path, encoding="utf-8") as f:
        entries = json.load(f)
    if not isinstance(entries, list):
        raise SchemaViolation(0, "{} must hold a JSON array of records".format(path))
    return entries


def load_split(root: str, dialect: str, name: str,
               filename: t.Optional[str] = None) -> DatasetSplit:
    """
    Load one split of a VQA dataset.

    Args:
      root: dataset directory.
      dialect: ``rad`` or ``slake``.
      name: ``train``, ``validation`` or ``test``.
      filename: question file relative to root, overriding the dialect's
        conventional name.

    Raises:
      UnknownDialect, MissingFile, SchemaViolation
    """
    d = get_dialect(dialect)
    if filename is None:
        filename = {"train": d.train_file, "test": d.test_file,
                    "validation": d.validation_file}[name]
        if filename is None:
            raise MissingFile("Dialect {} has no {} split".format(d.name, name))

    path = os.path.join(root, filename)
    records = VqaJsonParser(_read_question_file_(path),
                            os.path.join(root, d.image_dir), d).parse()
    logging.info("Loaded %s %s records from %s", len(records), name, path)
    return DatasetSplit(name, records)


def load_vqa_dataset(root: str, dialect: str, train_file: t.Optional[str] = None,
                     test_file: t.Optional[str] = None) -> t.Tuple[DatasetSplit, DatasetSplit]:
    """Load the train and test splits of a VQA dataset."""
    get_dialect(dialect)
    return (load_split(root, dialect, "train", train_file),
            load_split(root, dialect, "test", test_file))


def build_answer_vocabulary(train: DatasetSplit) -> AnswerVocabulary:
    """
    Map every distinct training answer to a class index, in order of first
    occurrence.

    Raises:
      EmptySplit: the split has no records.
    """
    if not len(train):
        raise EmptySplit("Cannot build an answer vocabulary from an empty split")
    return AnswerVocabulary(r.answer for r in train)


def verify_split_images(train: DatasetSplit, test: DatasetSplit) -> OverlapReport:
    """Report how many distinct test images also occur in the train split."""
    test_ids = test.image_ids
    shared = test_ids & train.image_ids
    fraction = len(shared) / len(test_ids) if test_ids else 0.0
    return OverlapReport(test_images_in_train=fraction, disjoint=not shared)


def question_type_histogram(split: DatasetSplit, top_k: int = 5) -> QuestionTypeHistogram:
    """
    Count questions per question type and keep the top_k most frequent,
    highest count first, ties ordered by type name.

    Raises:
      MissingLabels: a record has no question type.
    """
    unlabelled = sum(1 for r in split if not r.question_type)
    if unlabelled:
        raise MissingLabels("{} of {} records in split {} lack a question type"
                            .format(unlabelled, len(split), split.name))
    counts = Counter(r.question_type for r in split)
    top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max(top_k, 0)]
    return QuestionTypeHistogram(OrderedDict(top), sum(c for _, c in top))


def _open_image_(path: str, mode: str) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert(mode)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        logging.error("Could not decode image %s: %s", path, e)
        raise DecodeFailure("Could not decode image {}: {}".format(path, e)) from e


def load_image_pixels(path: str, target_resolution: int) -> torch.Tensor:
    """
    Decode an image, convert it to RGB and resize it to a square of side
    target_resolution.

    Returns:
      a uint8 tensor of shape [3, R, R].

    Raises:
      DecodeFailure: the file is missing or not a decodable image.
    """
    img = _open_image_(path, "RGB")
    return TF.pil_to_tensor(img.resize((target_resolution, target_resolution),
                                       Image.Resampling.BICUBIC))


def load_low_resolution_pixels(path: str, size: int) -> torch.Tensor:
    """Decode an image as a grayscale uint8 tensor of shape [1, size, size]."""
    img = _open_image_(path, "L")
    return TF.pil_to_tensor(img.resize((size, size), Image.Resampling.BILINEAR))


def to_unit_range(pixels: torch.Tensor) -> torch.Tensor:
    return TF.convert_image_dtype(pixels, torch.float32)


def normalize_pixels(pixels: torch.Tensor, mean: t.Sequence[float] = CLIP_MEAN,
                     std: t.Sequence[float] = CLIP_STD) -> torch.Tensor:
    """Scale uint8 RGB pixels to [0, 1] and normalise every channel."""
    return TF.normalize(to_unit_range(pixels), mean, std)


def load_and_preprocess_image(path: str, target_resolution: int,
                              mean: t.Sequence[float] = CLIP_MEAN,
                              std: t.Sequence[float] = CLIP_STD) -> torch.Tensor:
    """
    Decode an image, convert it to RGB, resize it to a square of side
    target_resolution and normalise every channel.

    Returns:
      a float tensor of shape [3, R, R].

    Raises:
      DecodeFailure: the file is missing or not a decodable image.
    """
    return normalize_pixels(load_image_pixels(path, target_resolution), mean, std)


def load_low_resolution_image(path: str, size: int) -> torch.Tensor:
    """
    Decode an image as a grayscale square of side size with values in [0, 1],
    the input of the denoising autoencoder.

    Returns:
      a float tensor of shape [1, size, size].
    """
    return to_unit_range(load_low_resolution_pixels(path, size))
