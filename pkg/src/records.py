# BSD 3-Clause License
#
# Copyright (c) 2022, the medvqa authors. All rights reserved.
# See the LICENSE file for the full license text.

"""records.py: records describing image-caption pairs and VQA datasets."""

import re
import typing as t
from collections import OrderedDict
from dataclasses import dataclass, field

ANSWER_TYPES = ("open", "closed")
"""Question categories accuracy is reported for."""

CLOSED_ANSWERS = frozenset({"yes", "no"})
"""Normalised answers that make a question closed when no type is given."""

SPLIT_NAMES = ("train", "validation", "test")

_WHITESPACE_ = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    """
    Canonical form of an answer string: lowercased, surrounding whitespace
    removed, internal whitespace collapsed and trailing periods stripped.
    """
    text = _WHITESPACE_.sub(" ", str(text).lower()).strip()
    return text.rstrip(".").strip()


def infer_answer_type(answer: str) -> str:
    """Closed for yes/no answers, open for everything else."""
    return "closed" if normalize_answer(answer) in CLOSED_ANSWERS else "open"


@dataclass(frozen=True)
class ImageCaptionRecord:
    """One image and its caption from a caption corpus."""

    image_id: str
    image_path: str
    caption: str


@dataclass(frozen=True)
class VqaRecord:
    """
    One question about one image, with its gold answer.

    The answer is stored normalised; answer_type is ``open`` or ``closed``.
    question_type is the dataset's category label and may be missing.
    """

    image_id: str
    image_path: str
    question: str
    answer: str
    answer_type: str
    question_type: t.Optional[str] = None
    language: t.Optional[str] = None

    def __post_init__(self):
        if self.answer_type not in ANSWER_TYPES:
            raise ValueError("answer_type must be one of {}, not {!r}"
                             .format(ANSWER_TYPES, self.answer_type))
        if not self.question.strip():
            raise ValueError("question is empty")


@dataclass
class DatasetSplit:
    """A named, ordered list of VQA records."""

    name: str
    records: t.List[VqaRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> t.Iterator[VqaRecord]:
        return iter(self.records)

    def __getitem__(self, index):
        return self.records[index]

    @property
    def image_ids(self) -> t.Set[str]:
        """The distinct images questions in this split are asked about."""
        return {r.image_id for r in self.records}

    def subset(self, indices: t.Iterable[int]) -> "DatasetSplit":
        return DatasetSplit(self.name, [self.records[i] for i in indices])


class AnswerVocabulary:
    """
    A bijection between the distinct normalised training answers and class
    indices 0..V-1, ordered by first appearance.
    """

    def __init__(self, answers: t.Iterable[str] = ()):
        self._index_to_answer = []
        self._answer_to_index = {}
        for answer in answers:
            self.add(answer)

    def add(self, answer: str) -> int:
        """Add an answer if it is new; return its index either way."""
        answer = normalize_answer(answer)
        if answer not in self._answer_to_index:
            self._answer_to_index[answer] = len(self._index_to_answer)
            self._index_to_answer.append(answer)
        return self._answer_to_index[answer]

    def index(self, answer: str) -> t.Optional[int]:
        """The class index of an answer, or None if it is out of vocabulary."""
        return self._answer_to_index.get(normalize_answer(answer))

    def answer(self, index: int) -> str:
        return self._index_to_answer[index]

    def __len__(self) -> int:
        return len(self._index_to_answer)

    def __contains__(self, answer: str) -> bool:
        return normalize_answer(answer) in self._answer_to_index

    def __eq__(self, other) -> bool:
        return isinstance(other, AnswerVocabulary) and \
            self._index_to_answer == other._index_to_answer

    def __repr__(self) -> str:
        return "<AnswerVocabulary of {} answers>".format(len(self))

    def to_list(self) -> t.List[str]:
        return list(self._index_to_answer)

    @classmethod
    def from_list(cls, answers: t.List[str]) -> "AnswerVocabulary":
        return cls(answers)


@dataclass
class QuestionTypeHistogram:
    """Question counts per question type, most frequent first."""

    counts: "OrderedDict[str, int]"
    total: int

    def items(self) -> t.List[t.Tuple[str, int]]:
        return list(self.counts.items())


@dataclass(frozen=True)
class OverlapReport:
    """How the images of a test split relate to those of a train split."""

    test_images_in_train: float
    """Fraction of distinct test images also present in the train split."""

    disjoint: bool
    """True iff no test image appears in the train split."""


@dataclass(frozen=True)
class TokenSequence:
    """
    Fixed-length caption token ids. Positions at or beyond ``length`` hold
    the padding id 0.
    """

    ids: t.Tuple[int, ...]
    length: int

    def __len__(self) -> int:
        return len(self.ids)
