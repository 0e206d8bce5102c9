# BSD 3-Clause License
#
# Copyright (c) 2022, the medvqa authors. All rights reserved.
# See the LICENSE file for the full license text.

"""dataparse.py: Parse caption manifests and VQA question files into records"""

import abc
import logging
import os
import typing as t
from dataclasses import dataclass, field

from src.errors import MalformedRow, SchemaViolation, UnknownDialect
from src.records import ImageCaptionRecord, VqaRecord, normalize_answer, \
    infer_answer_type, ANSWER_TYPES

MANIFEST_DELIMITER = "\t"
"""
Column separator of caption manifests. Rows hold an image id, an image path
relative to the image root, and a caption.
"""


@dataclass(frozen=True)
class Dialect:
    """File layout and field names of one VQA dataset family."""

    name: str
    train_file: str
    test_file: str
    validation_file: t.Optional[str]
    image_dir: str
    image_fields: t.Tuple[str, ...]
    type_fields: t.Tuple[str, ...]
    language: t.Optional[str] = None
    """Only records whose ``q_lang`` equals this are kept, if set."""


DIALECTS = {
    "rad": Dialect(
        name="rad",
        train_file="trainset.json",
        test_file="testset.json",
        validation_file=None,
        image_dir="images",
        image_fields=("image_name", "img_name"),
        type_fields=("question_type", "content_type"),
    ),
    "slake": Dialect(
        name="slake",
        train_file="train.json",
        test_file="test.json",
        validation_file="validate.json",
        image_dir="imgs",
        image_fields=("img_name", "image_name"),
        type_fields=("content_type", "question_type"),
        language="en",
    ),
}
"""Known dialects, by name."""


def get_dialect(name: str) -> Dialect:
    try:
        return DIALECTS[name.lower()]
    except (KeyError, AttributeError):
        raise UnknownDialect("Unknown dataset dialect {!r}; expected one of {}"
                             .format(name, ", ".join(sorted(DIALECTS)))) from None


@dataclass
class CaptionCorpus:
    """Parsed caption records plus the ids of images that could not be found."""

    records: t.List[ImageCaptionRecord] = field(default_factory=list)
    missing: t.List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


class RecordParser(abc.ABC):
    @abc.abstractmethod
    def __init__(self, raw: object):
        """
        Constructs a new RecordParser for parsing the given raw input object.

        Args:
          raw: parser-specific object containing raw input to be parsed.
        """

        self._raw = raw
        """raw: parser-specific object containing raw input to be parsed."""

        self._records = []
        """Records extracted from the raw input, in input order."""

    @abc.abstractmethod
    def parse(self) -> t.Iterable[object]:
        """
        Parses the raw input object and returns an iterable of records.
        """
        self._records = []
        return self._records


class CaptionManifestParser(RecordParser):
    def __init__(self, lines: t.Iterable[str], image_root: str):
        """
        Parses tab-separated caption manifest lines into ImageCaptionRecords.
        Rows whose image file does not exist are reported, not returned.

        Args:
          lines: iterable of raw manifest lines.
          image_root: directory the manifest's image paths are relative to.
        """
        super().__init__(lines)
        self.image_root = image_root

    def parse(self) -> CaptionCorpus:
        """
        Raises:
          MalformedRow: a row does not have exactly three columns, or its
            caption is empty.
        """
        super().parse()
        missing = []

        for i, l in enumerate(self._raw):
            l = l.rstrip("\r\n")
            if not l.strip():
                logging.debug("Row %s: blank manifest line skipped.", i)
                continue

            cols = l.split(MANIFEST_DELIMITER)
            if len(cols) != 3:
                logging.error("Row %s: expected 3 columns, found %s.", i, len(cols))
                raise MalformedRow(i, "expected 3 tab-separated columns, found {}".format(len(cols)))

            image_id, rel_path, caption = (c.strip() for c in cols)
            if not caption:
                raise MalformedRow(i, "empty caption")

            path = os.path.join(self.image_root, rel_path)
            if not os.path.isfile(path):
                logging.warning("Row %s: image %s not found at %s, record skipped.", i, image_id, path)
                missing.append(image_id)
                continue

            self._records.append(ImageCaptionRecord(image_id, path, caption))

        return CaptionCorpus(self._records, missing)


class VqaJsonParser(RecordParser):
    def __init__(self, entries: t.Iterable[t.Mapping[str, t.Any]], image_root: str,
                 dialect: Dialect):
        """
        Parses the decoded records of a VQA question file into VqaRecords.

        Args:
          entries: JSON objects from one question file.
          image_root: directory holding the dataset's images.
          dialect: the dataset family the entries come from.
        """
        super().__init__(entries)
        self.image_root = image_root
        self.dialect = dialect

    @staticmethod
    def _first_(entry: t.Mapping[str, t.Any], names: t.Iterable[str]) -> t.Any:
        for n in names:
            if entry.get(n) not in (None, ""):
                return entry[n]
        return None

    def parse(self) -> t.List[VqaRecord]:
        """
        Raises:
          SchemaViolation: a record is not an object or lacks its image,
            question or answer (or, for language-filtered dialects, its
            language tag).
        """
        super().parse()
        dropped = 0

        for i, entry in enumerate(self._raw):
            if not isinstance(entry, dict):
                raise SchemaViolation(i, "expected an object, found {}".format(type(entry).__name__))

            image_name = self._first_(entry, self.dialect.image_fields)
            if image_name is None:
                raise SchemaViolation(i, "missing image field ({})"
                                      .format(" or ".join(self.dialect.image_fields)))
            for name in ("question", "answer"):
                if entry.get(name) is None or not str(entry[name]).strip():
                    raise SchemaViolation(i, "missing field {!r}".format(name))

            language = entry.get("q_lang")
            if self.dialect.language is not None:
                if language is None:
                    raise SchemaViolation(i, "missing field 'q_lang'")
                if str(language).lower() != self.dialect.language:
                    dropped += 1
                    continue

            answer = normalize_answer(entry["answer"])
            answer_type = str(entry.get("answer_type") or "").strip().lower()
            if answer_type not in ANSWER_TYPES:
                answer_type = infer_answer_type(answer)

            question_type = self._first_(entry, self.dialect.type_fields)

            self._records.append(VqaRecord(
                image_id=str(image_name),
                image_path=os.path.join(self.image_root, str(image_name)),
                question=str(entry["question"]).strip(),
                answer=answer,
                answer_type=answer_type,
                question_type=None if question_type is None else str(question_type),
                language=None if language is None else str(language).lower(),
            ))

        if dropped:
            logging.info("Skipped %s records not in language %r.", dropped, self.dialect.language)
        return self._records
