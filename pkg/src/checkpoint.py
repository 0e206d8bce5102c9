# BSD 3-Clause License
#
# Copyright (c) 2022, the medvqa authors. All rights reserved.
# See the LICENSE file for the full license text.

"""checkpoint.py: versioned, self-describing model checkpoint files.

A checkpoint is a mapping holding a format tag, the kind of model it stores
(``dual_encoder`` or ``vqa``), a header describing how to rebuild the model
(backbone spec, configuration echo, vocabularies) and the model's parameter
state.
"""

import logging
import os
import typing as t
from dataclasses import dataclass

import torch
import torch.nn as nn

from src.errors import CheckpointWriteFailure, CorruptCheckpoint, WeightsMissing

FORMAT_TAG = "medvqa-checkpoint/1"
"""Written into every checkpoint; files with another tag are rejected."""

KINDS = ("dual_encoder", "vqa")


@dataclass(frozen=True)
class CheckpointHandle:
    """Where a checkpoint was written and what it holds."""

    path: str
    kind: str
    epoch: int
    loss: t.Optional[float] = None


def save(path: str, kind: str, module: nn.Module, header: t.Mapping[str, t.Any],
         epoch: int = 0, loss: t.Optional[float] = None) -> CheckpointHandle:
    """
    Write a module's state and a rebuild header to path, replacing any file
    already there only once the new one is complete.

    Raises:
      CheckpointWriteFailure: the file could not be written.
    """
    assert kind in KINDS, "unknown checkpoint kind {}".format(kind)
    payload = {
        "format": FORMAT_TAG,
        "kind": kind,
        "epoch": epoch,
        "loss": loss,
        "header": dict(header),
        "state_dict": {k: v.detach().cpu() for k, v in module.state_dict().items()},
    }
    tmp = path + ".partial"
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except (OSError, RuntimeError) as e:
        logging.error("Could not write checkpoint %s: %s", path, e)
        try:
            if os.path.exists(tmp):
                os.remove(tmp)
        except OSError:
            logging.warning("Could not remove partial checkpoint %s", tmp)
        raise CheckpointWriteFailure("Could not write checkpoint {}: {}".format(path, e)) from e
    logging.debug("Wrote %s checkpoint %s (epoch %s)", kind, path, epoch)
    return CheckpointHandle(path, kind, epoch, loss)


def load(path: str, kind: str) -> t.Dict[str, t.Any]:
    """
    Read a checkpoint of the given kind.

    Returns:
      the checkpoint mapping, with keys ``header`` and ``state_dict``.

    Raises:
      WeightsMissing: path does not exist.
      CorruptCheckpoint: the file is unreadable, untagged or of another kind.
    """
    if not os.path.isfile(path):
        logging.error("Checkpoint %s not found.", path)
        raise WeightsMissing("Checkpoint not found: {}".format(path))
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        logging.error("Could not read checkpoint %s: %s", path, e)
        raise CorruptCheckpoint("Could not read checkpoint {}: {}".format(path, e)) from e

    if not isinstance(payload, dict) or payload.get("format") != FORMAT_TAG:
        raise CorruptCheckpoint("{} is not a {} file".format(path, FORMAT_TAG))
    if payload.get("kind") != kind:
        raise CorruptCheckpoint("{} holds a {} model, expected {}"
                                .format(path, payload.get("kind"), kind))
    return payload


def apply_state(module: nn.Module, state_dict: t.Mapping[str, torch.Tensor], source: str = ""):
    """
    Load a state dict into module, requiring an exact match of names and
    shapes.

    Raises:
      CorruptCheckpoint: parameters are missing, unexpected or misshapen.
    """
    try:
        module.load_state_dict(state_dict, strict=True)
    except RuntimeError as e:
        logging.error("Checkpoint %s does not fit %s", source, type(module).__name__)
        raise CorruptCheckpoint("Checkpoint {} does not fit {}: {}"
                                .format(source, type(module).__name__, e)) from e
