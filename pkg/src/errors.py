# BSD 3-Clause License
#
# Copyright (c) 2022, the medvqa authors. All rights reserved.
# See the LICENSE file for the full license text.

"""errors.py: the exceptions raised throughout the toolkit.

Every error derives from :obj:`MedVqaError` and from the builtin exception
closest in meaning, so callers may catch either the toolkit-specific class or
the usual builtin (``except LookupError`` keeps working for a missing asset).
"""

import typing as t


class MedVqaError(Exception):
    """Base class of all errors raised by this package."""


# Data ingestion

class MissingFile(MedVqaError, FileNotFoundError):
    """A required input file does not exist."""


class MalformedRow(MedVqaError, ValueError):
    """A delimited input row has the wrong shape."""

    def __init__(self, row_index: int, reason: str):
        """
        Args:
          row_index: zero-based index of the offending row.
          reason: what is wrong with the row.
        """
        super().__init__("Row {}: {}".format(row_index, reason))
        self.row_index = row_index


class EmptyCorpus(MedVqaError, ValueError):
    """No usable records were found in an input corpus."""


class VocabularyMissing(MedVqaError, FileNotFoundError):
    """The byte-pair-encoding vocabulary asset could not be found."""


class UnknownDialect(MedVqaError, LookupError):
    """A VQA dataset dialect name is not recognised."""


class SchemaViolation(MedVqaError, ValueError):
    """A structured dataset record lacks a mandatory field."""

    def __init__(self, record_index: int, reason: str):
        super().__init__("Record {}: {}".format(record_index, reason))
        self.record_index = record_index


class EmptySplit(MedVqaError, ValueError):
    """An operation requiring records received an empty split."""


class MissingLabels(MedVqaError, ValueError):
    """Some records lack the question-type label an operation needs."""


class DecodeFailure(MedVqaError, OSError):
    """An image file could not be decoded."""


# Models

class ResolutionMismatch(MedVqaError, ValueError):
    """An image batch does not have the backbone's input resolution."""


class WeightsMissing(MedVqaError, FileNotFoundError):
    """Pretrained or checkpointed weights needed by a model are unavailable."""


class TokenOutOfRange(MedVqaError, IndexError):
    """A token id lies outside the text encoder's vocabulary."""


class ShapeMismatch(MedVqaError, ValueError):
    """Tensor operands have incompatible shapes."""


class NonSquare(MedVqaError, ValueError):
    """A similarity matrix is not square."""


class NonFinite(MedVqaError, ValueError):
    """A tensor operand contains NaN or infinite values."""


class EmptyVocabulary(MedVqaError, ValueError):
    """Prediction was requested against an empty answer vocabulary."""


class EmbeddingAssetMissing(MedVqaError, FileNotFoundError):
    """The word-embedding asset could not be found."""


class CheckpointWriteFailure(MedVqaError, OSError):
    """A checkpoint could not be written."""


class CorruptCheckpoint(MedVqaError, ValueError):
    """A checkpoint file is unreadable or does not fit the target model."""


# Harness and command line

class ConfigInvalid(MedVqaError, ValueError):
    """A training configuration violates one of its invariants."""

    def __init__(self, message: str, setting: t.Optional[str] = None):
        """
        Args:
          message: what is wrong.
          setting: name of the offending field, if a single one is to blame.
        """
        super().__init__(message)
        self.setting = setting


class VocabularyMismatch(MedVqaError, ValueError):
    """A vocabulary differs from the one embedded in a checkpoint."""


class AlignmentError(MedVqaError, ValueError):
    """Prediction rows do not line up with the records they describe."""


class WriteFailure(MedVqaError, OSError):
    """An output artifact could not be written."""


class UsageError(MedVqaError, ValueError):
    """The command line is malformed."""


class ConfigError(MedVqaError, ValueError):
    """A configuration value is missing, unknown or of the wrong type."""

    def __init__(self, key: str, reason: str):
        """
        Args:
          key: dotted name of the offending setting, e.g. ``vqa.epochs``.
          reason: what is wrong with it.
        """
        super().__init__('Setting "{}": {}'.format(key, reason))
        self.key = key


class RunFailure(MedVqaError, RuntimeError):
    """One repetition of a repeated experiment failed."""

    def __init__(self, run_index: int, cause: BaseException):
        super().__init__("Run {} failed: {}".format(run_index, cause))
        self.run_index = run_index
        self.cause = cause
