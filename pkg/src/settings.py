# BSD 3-Clause License
#
# Copyright (c) 2022, the medvqa authors. All rights reserved.
# See the LICENSE file for the full license text.

"""settings.py: layered toolkit configuration.

The user can change these settings in bin/config.json, in a file given with
``--config``, or with ``--set section.key=value`` command line overrides.
Default settings are stored in src/default_config.json.

data.dialect:
    VQA dataset dialect, ``rad`` or ``slake``. rad by default.

data.vqa_root:
    Directory holding the dialect's question files and image directory.

data.train_file, data.test_file:
    Question files relative to data.vqa_root. When null, the dialect's
    conventional file names are used.

data.caption_manifest, data.caption_val_manifest:
    Tab-separated image-caption manifests for contrastive fine-tuning.
    The validation manifest is optional.

data.caption_image_root:
    Directory image paths in the manifests are relative to. Defaults to the
    directory holding the manifest.

pretrain.backbone:
    Registered backbone name: vit_b32, rn50 or rn50x4.

pretrain.epochs, pretrain.batch_size, pretrain.learning_rate:
    Contrastive fine-tuning schedule. 50 epochs, batch 64, 1e-5 by default.

pretrain.context_window:
    Number of caption tokens fed to the text encoder. 76 by default.

pretrain.logit_scale_init, pretrain.max_logit_scale:
    Initial value of the learnable log temperature (ln 1/0.07 by default) and
    the cap applied to its exponential (100 by default).

pretrain.freeze_logit_scale:
    Keep the temperature fixed during fine-tuning. False by default.

pretrain.checkpoint_in:
    Optional dual-encoder checkpoint to continue from instead of the
    general-domain weights.

vqa.profile:
    Training profile, ``mevf`` or ``qcr``. Supplies epochs, batch_size and
    learning_rate whenever those are null.

vqa.backbone, vqa.checkpoint_in:
    Visual backbone and the dual-encoder checkpoint its weights come from.
    When checkpoint_in is null the general-domain weights in assets.weights_dir
    are used.

vqa.dataset:
    Dataset the experiment runs on. Null means data.dialect.

vqa.repetitions, vqa.seed_base:
    Number of seeded repetitions averaged by ``train`` and the seed of the
    first one.

vqa.question_max_tokens, vqa.question_hidden:
    Question truncation length (12) and recurrent hidden size (1024).

vqa.glimpses, vqa.joint_dim:
    Bilinear attention glimpses (2) and joint dimension (1024).

vqa.cdae_size, vqa.cdae_dim, vqa.noise_sigma:
    Autoencoder input side length (128), code size (256) and training noise
    standard deviation (0.1).

vqa.visual_positions:
    ``grid`` attends over the backbone's spatial positions, ``pooled`` uses
    the single pooled visual feature.

vqa.finetune_visual:
    Update the visual backbone while training the answer classifier.

vqa.dropout:
    Dropout inside the fusion and classifier layers.

assets.tokenizer_vocab, assets.tokenizer_merges:
    Byte-pair-encoding vocabulary (json) and merges (text) files.

assets.word_embeddings:
    Whitespace-separated word vector text file used by the question encoder.

assets.weights_dir:
    Directory holding general-domain backbone weights, one subdirectory per
    backbone name.

runtime.seed, runtime.deterministic:
    Seed for contrastive fine-tuning and deterministic-algorithm mode.

runtime.device, runtime.num_workers, runtime.log_level:
    Torch device, data loader workers and console log level.
"""

import copy
import json
import logging
import os
import typing as t
from os.path import dirname, normpath, join, isabs, exists

from src.errors import ConfigError

_dir_ = dirname(__file__)

# Default settings are stored here.
_DEFAULT_LOC_ = normpath(join(_dir_, "../src/default_config.json"))

# User settings are located here, and will override default settings.
_CONFIG_LOC_ = normpath(join(_dir_, "../bin/config.json"))

ASSET_DIR_VAR = "MEDVQA_ASSET_DIR"
"""Environment variable that relative asset paths resolve against."""

PROFILES = {
    "mevf": {"epochs": 20, "batch_size": 32, "learning_rate": 2e-3},
    "qcr": {"epochs": 200, "batch_size": 16, "learning_rate": 1e-3},
}
"""Training profiles and the schedule values they supply."""

# Types of the settings, so string values can be converted correctly.
# A trailing "?" means the setting may be null; "enum:" lists the accepted
# values. "path" and "asset" settings are resolved to absolute paths; path
# settings are checked for existence on import, asset settings only by the
# commands that use them.
_types_ = {
    "data.dialect": "enum:rad|slake",
    "data.vqa_root": "path?",
    "data.train_file": "str?",
    "data.test_file": "str?",
    "data.caption_manifest": "path?",
    "data.caption_val_manifest": "path?",
    "data.caption_image_root": "path?",
    "pretrain.backbone": "str",
    "pretrain.epochs": "int",
    "pretrain.batch_size": "int",
    "pretrain.learning_rate": "float",
    "pretrain.context_window": "int",
    "pretrain.logit_scale_init": "float",
    "pretrain.max_logit_scale": "float",
    "pretrain.freeze_logit_scale": "bool",
    "pretrain.checkpoint_in": "path?",
    "vqa.profile": "enum:mevf|qcr",
    "vqa.epochs": "int?",
    "vqa.batch_size": "int?",
    "vqa.learning_rate": "float?",
    "vqa.backbone": "str",
    "vqa.checkpoint_in": "path?",
    "vqa.dataset": "enum?:rad|slake",
    "vqa.repetitions": "int",
    "vqa.seed_base": "int",
    "vqa.question_max_tokens": "int",
    "vqa.question_hidden": "int",
    "vqa.glimpses": "int",
    "vqa.joint_dim": "int",
    "vqa.cdae_size": "int",
    "vqa.cdae_dim": "int",
    "vqa.noise_sigma": "float",
    "vqa.visual_positions": "enum:grid|pooled",
    "vqa.finetune_visual": "bool",
    "vqa.dropout": "float",
    "assets.tokenizer_vocab": "asset",
    "assets.tokenizer_merges": "asset",
    "assets.word_embeddings": "asset",
    "assets.weights_dir": "asset",
    "runtime.seed": "int",
    "runtime.deterministic": "bool",
    "runtime.device": "str",
    "runtime.num_workers": "int",
    "runtime.log_level": "enum:debug|info|warning|error",
}

_TRUE_ = {"1", "yes", "true", "on"}
_FALSE_ = {"0", "no", "false", "off"}
_NULL_ = {"null", "none", ""}


def _split_type_(key: str) -> t.Tuple[str, bool, t.List[str]]:
    """Return the base type, nullability and enum choices of a setting."""
    spec = _types_[key]
    choices = []
    if spec.startswith("enum"):
        head, _, tail = spec.partition(":")
        choices = tail.split("|")
        spec = head
    nullable = spec.endswith("?")
    return spec.rstrip("?"), nullable, choices


def convert(key: str, value: t.Any) -> t.Any:
    """
    Convert a raw value (a string from the command line or a value decoded from
    a JSON file) to the type of the named setting.

    Raises:
        ConfigError: the key is unknown or the value cannot be converted.
    """
    if key not in _types_:
        raise ConfigError(key, "unrecognised setting")
    base, nullable, choices = _split_type_(key)

    if value is None or (isinstance(value, str) and value.strip().lower() in _NULL_):
        if nullable:
            return None
        raise ConfigError(key, "a value is required")

    try:
        if base == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if base == "float":
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if base == "bool":
            if isinstance(value, bool):
                return value
            val = str(value).strip().lower()
            if val in _TRUE_:
                return True
            if val in _FALSE_:
                return False
            raise ValueError(value)
    except (TypeError, ValueError):
        raise ConfigError(key, 'cannot interpret "{}" as {}'.format(value, base)) from None

    val = str(value).strip()
    if base == "enum":
        val = val.lower()
        if val not in choices:
            raise ConfigError(key, '"{}" is not one of {}'.format(value, ", ".join(choices)))
    return val


class RootConfig:
    """
    The resolved configuration: sections ``data``, ``pretrain``, ``vqa``,
    ``assets`` and ``runtime``, each a mapping from setting name to value.
    """

    SECTIONS = ("data", "pretrain", "vqa", "assets", "runtime")

    def __init__(self, values: t.Mapping[str, t.Mapping[str, t.Any]], base_dir: str = _dir_):
        """
        Args:
            values: nested section mapping, as decoded from a config file.
            base_dir: directory relative paths are resolved against.
        """
        self._values = {s: {} for s in self.SECTIONS}
        self.base_dir = base_dir
        self._stack = []
        self.merge(values)

    def merge(self, values: t.Mapping[str, t.Mapping[str, t.Any]]):
        """Overlay a nested section mapping onto this configuration."""
        for section, entries in values.items():
            if section not in self.SECTIONS or not isinstance(entries, dict):
                raise ConfigError(section, "unrecognised section")
            for name, value in entries.items():
                self.set("{}.{}".format(section, name), value)

    def set(self, key: str, value: t.Any):
        """Assign a converted value to the setting with the given dotted key."""
        section, _, name = key.partition(".")
        self._values[section][name] = convert(key, value)

    def get(self, key: str) -> t.Any:
        section, _, name = key.partition(".")
        if key not in _types_:
            raise ConfigError(key, "unrecognised setting")
        return self._values[section].get(name)

    def section(self, name: str) -> t.Dict[str, t.Any]:
        """Return a copy of one section."""
        return dict(self._values[name])

    def to_dict(self) -> t.Dict[str, t.Dict[str, t.Any]]:
        return copy.deepcopy(self._values)

    def save(self):
        """Push the current setting configuration to the stack."""
        self._stack.append(copy.deepcopy(self._values))

    def restore(self):
        """Restore the setting configuration from the top of the stack."""
        self._values = self._stack.pop()

    def resolve(self) -> "RootConfig":
        """
        Fill profile-dependent schedule values, default the experiment dataset to
        the data dialect, resolve relative paths and check that every configured
        path exists.

        Raises:
            ConfigError: naming the first offending key.
        """
        vqa = self._values["vqa"]
        for name, value in PROFILES[vqa["profile"]].items():
            if vqa.get(name) is None:
                vqa[name] = value
        if vqa.get("dataset") is None:
            vqa["dataset"] = self._values["data"]["dialect"]

        asset_dir = os.environ.get(ASSET_DIR_VAR) or self.base_dir
        for key, spec in _types_.items():
            base, _, _ = _split_type_(key)
            if base not in ("path", "asset"):
                continue
            value = self.get(key)
            if value is None:
                continue
            value = os.path.expanduser(value)
            if not isabs(value):
                value = normpath(join(asset_dir if base == "asset" else self.base_dir, value))
            self.set(key, value)

        self.check_paths()
        return self

    def check_paths(self, keys: t.Optional[t.Iterable[str]] = None):
        """
        Raise a ConfigError for the first path or asset setting among keys
        (all path settings by default) that is configured but does not exist.
        """
        if keys is None:
            keys = [k for k in _types_ if _split_type_(k)[0] == "path"]
        for key in keys:
            value = self.get(key)
            if value is not None and not exists(value):
                logging.error('Configured path for "%s" does not exist: %s', key, value)
                raise ConfigError(key, "path does not exist: {}".format(value))


def set_from_string(config: RootConfig, setting: str, value: str):
    """
    Assign to the named setting the given value, first converting that value
    to the type appropriate for that setting. ``setting`` may also be a
    ``key=value`` string, in which case value must be None.
    """
    if value is None:
        setting, sep, value = setting.partition("=")
        if not sep:
            raise ConfigError(setting, "override must have the form key=value")
    config.set(setting.strip().lower(), value)


def _read_json_(filepath: str) -> t.Dict[str, t.Any]:
    try:
        with open(filepath) as f:
            values = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(filepath, "not valid JSON: {}".format(e)) from None
    except OSError as e:
        raise ConfigError(filepath, "cannot be read: {}".format(e.strerror or e)) from None
    if not isinstance(values, dict):
        raise ConfigError(filepath, "top level must be an object")
    return values


def import_config(filepath: t.Optional[str] = None,
                  overrides: t.Iterable[str] = ()) -> RootConfig:
    """
    Build a configuration from the shipped defaults, the given configuration
    file (bin/config.json when omitted and present) and ``key=value`` override
    strings, then resolve it.

    Raises:
        ConfigError: the file is missing or malformed, or a value is invalid.
    """
    config = RootConfig(_read_json_(_DEFAULT_LOC_))

    if filepath is None and exists(_CONFIG_LOC_):
        filepath = _CONFIG_LOC_
    if filepath is not None:
        if not exists(filepath):
            raise ConfigError("--config", "file does not exist: {}".format(filepath))
        config.base_dir = dirname(os.path.abspath(filepath))
        config.merge(_read_json_(filepath))
        logging.debug("Read configuration from %s", filepath)

    for override in overrides:
        set_from_string(config, override, None)

    return config.resolve()
