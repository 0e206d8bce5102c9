# BSD 3-Clause License
#
# Copyright (c) 2022, the medvqa authors. All rights reserved.
# See the LICENSE file for the full license text.

"""reproducibility.py: seeding, deterministic algorithms and run fingerprints"""

import logging
import os
import platform
import random
import sys
import typing as t

import numpy as np
import torch

CUBLAS_WORKSPACE = ":4096:8"
"""cuBLAS workspace setting required for deterministic GPU matrix products."""


def seed_everything(seed: int):
    """Seed the python, numpy and torch random number generators."""
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    logging.debug("Seeded all generators with %s", seed)


def make_generator(seed: int) -> torch.Generator:
    """A fresh CPU generator seeded with seed."""
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def deterministic_mode(enabled: bool):
    """
    Switch torch between deterministic and default algorithm selection.
    Operations without a deterministic implementation raise while enabled.
    """
    if enabled:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", CUBLAS_WORKSPACE)
    torch.use_deterministic_algorithms(enabled)
    torch.backends.cudnn.deterministic = enabled
    torch.backends.cudnn.benchmark = not enabled
    logging.debug("Deterministic algorithms %s", "enabled" if enabled else "disabled")


def _version_(module: str) -> t.Optional[str]:
    try:
        return __import__(module).__version__
    except ImportError:
        return None


def environment_fingerprint() -> t.Dict[str, t.Any]:
    """Versions and platform facts that influence numerical results."""
    return {
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "torch": torch.__version__,
        "torchvision": _version_("torchvision"),
        "timm": _version_("timm"),
        "transformers": _version_("transformers"),
        "numpy": np.__version__,
        "cuda_available": torch.cuda.is_available(),
        "cuda": torch.version.cuda,
        "deterministic": torch.are_deterministic_algorithms_enabled(),
    }
