# BSD 3-Clause License
#
# Copyright (c) 2022, the medvqa authors. All rights reserved.
# See the LICENSE file for the full license text.

"""backbones.py: registry and construction of image and text encoder towers.

Image towers are timm models whose classification head is sized to the joint
embedding width; text towers are transformer encoders with a final linear
projection into the same space. A backbone's general-domain weights live in
``<weights_dir>/<name>/``: ``visual.pth`` holds the image tower state and
``text/`` is a saved text-model directory.
"""

import logging
import os
import typing as t
from dataclasses import dataclass, field, asdict

import timm
import torch
import torch.nn as nn

from src.errors import ConfigInvalid, WeightsMissing

VISUAL_WEIGHTS = "visual.pth"
TEXT_WEIGHTS = "text"


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture of one image/text encoder pair."""

    name: str
    timm_name: str
    """Name of the timm model building the image tower."""

    resolution: int
    """Side length of the square images the image tower accepts."""

    embed_dim: int
    """Width of the joint image-text embedding space."""

    text_width: int
    text_heads: int
    text_layers: int = 12
    vocab_size: int = 49408
    max_positions: int = 77
    timm_kwargs: t.Dict[str, t.Any] = field(default_factory=dict)
    """Extra architecture arguments passed to timm.create_model."""

    def to_dict(self) -> t.Dict[str, t.Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: t.Mapping[str, t.Any]) -> "BackboneSpec":
        return cls(**d)

    def text_config(self):
        from transformers import CLIPTextConfig
        return CLIPTextConfig(
            vocab_size=self.vocab_size,
            hidden_size=self.text_width,
            intermediate_size=4 * self.text_width,
            num_hidden_layers=self.text_layers,
            num_attention_heads=self.text_heads,
            max_position_embeddings=self.max_positions,
            projection_dim=self.embed_dim,
            hidden_act="quick_gelu",
        )


_registry_ = {}


def register(spec: BackboneSpec):
    """Make a backbone available by name, replacing any earlier spec."""
    _registry_[spec.name] = spec


def names() -> t.List[str]:
    return sorted(_registry_)


def get(name: str) -> BackboneSpec:
    """
    Raises:
      ConfigInvalid: no backbone of that name is registered.
    """
    try:
        return _registry_[name]
    except KeyError:
        raise ConfigInvalid("Unknown backbone {!r}; expected one of {}"
                            .format(name, ", ".join(names()))) from None


register(BackboneSpec("vit_b32", "vit_base_patch32_clip_224", resolution=224,
                      embed_dim=512, text_width=512, text_heads=8))
register(BackboneSpec("rn50", "resnet50_clip", resolution=224,
                      embed_dim=1024, text_width=512, text_heads=8))
register(BackboneSpec("rn50x4", "resnet50x4_clip", resolution=288,
                      embed_dim=640, text_width=640, text_heads=10))


def weights_path(weights_dir: str, spec: BackboneSpec, part: str) -> str:
    return os.path.join(weights_dir, spec.name, part)


def create_image_tower(spec: BackboneSpec, weights_dir: t.Optional[str] = None) -> nn.Module:
    """
    Build the image tower, loading general-domain weights from weights_dir
    when given.

    Raises:
      WeightsMissing: weights_dir is given but holds no image tower weights.
    """
    kwargs = dict(spec.timm_kwargs, num_classes=spec.embed_dim)
    if weights_dir is None:
        return timm.create_model(spec.timm_name, pretrained=False, **kwargs)

    path = weights_path(weights_dir, spec, VISUAL_WEIGHTS)
    if not os.path.isfile(path):
        logging.error("Image tower weights for %s not found at %s", spec.name, path)
        raise WeightsMissing("Image tower weights not found: {}".format(path))
    logging.info("Loading %s image tower weights from %s", spec.name, path)
    return timm.create_model(spec.timm_name, pretrained=True,
                             pretrained_cfg_overlay=dict(file=path), **kwargs)


def create_text_tower(spec: BackboneSpec, weights_dir: t.Optional[str] = None) -> nn.Module:
    """
    Build the text tower, loading general-domain weights from weights_dir
    when given.

    Raises:
      WeightsMissing: weights_dir is given but holds no text tower weights.
    """
    from transformers import CLIPTextModelWithProjection
    if weights_dir is None:
        return CLIPTextModelWithProjection(spec.text_config())

    path = weights_path(weights_dir, spec, TEXT_WEIGHTS)
    if not os.path.isdir(path):
        logging.error("Text tower weights for %s not found at %s", spec.name, path)
        raise WeightsMissing("Text tower weights not found: {}".format(path))
    logging.info("Loading %s text tower weights from %s", spec.name, path)
    return CLIPTextModelWithProjection.from_pretrained(path)


def image_features(tower: nn.Module, images: torch.Tensor) -> t.Tuple[torch.Tensor, torch.Tensor]:
    """
    Run an image tower once and return both its pooled embedding [N, D] and
    its positionwise features [N, K, C].

    Convolutional towers yield one position per cell of the final feature
    map; transformer towers yield one per patch token.
    """
    feats = tower.forward_features(images)
    pooled = tower.forward_head(feats)
    if feats.ndim == 4:
        positions = feats.flatten(2).transpose(1, 2)
    else:
        positions = feats[:, getattr(tower, "num_prefix_tokens", 0):]
    return pooled, positions


def image_feature_dims(tower: nn.Module, resolution: int) -> t.Tuple[int, int, int]:
    """
    Return the pooled width, the number of positions and the position width
    of an image tower at the given input resolution.
    """
    # Running the tower once is the only reliable way to find these.
    training = tower.training
    if training:
        tower.eval()
    with torch.no_grad():
        pooled, positions = image_features(tower, torch.zeros(1, 3, resolution, resolution))
    tower.train(training)
    return pooled.shape[-1], positions.shape[1], positions.shape[2]


def text_features(tower: nn.Module, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """
    Encode token id sequences into projected text embeddings [N, D], pooled
    at the last real token of each sequence.
    """
    last = (lengths.long() - 1).clamp(min=0)
    positions = torch.arange(ids.shape[1], device=ids.device)
    mask = (positions.unsqueeze(0) <= last.unsqueeze(1)).long()
    hidden = tower.text_model(input_ids=ids, attention_mask=mask).last_hidden_state
    pooled = hidden[torch.arange(ids.shape[0], device=ids.device), last]
    return tower.text_projection(pooled)
