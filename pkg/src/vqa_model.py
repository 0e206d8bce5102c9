# BSD 3-Clause License
#
# Copyright (c) 2022, the medvqa authors. All rights reserved.
# See the LICENSE file for the full license text.

"""vqa_model.py: answer classification from an image and a question.

The model concatenates a pretrained image tower's embedding with the code of a
convolutional denoising autoencoder, encodes the question with an LSTM over
word vectors, fuses both with bilinear attention and scores every answer of
the training vocabulary. Training minimises the sum of a multi-label binary
cross-entropy over answers and the autoencoder's reconstruction error.
"""

import logging
import os
import re
import typing as t
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence

import src.backbones as backbones
import src.checkpoint as checkpoint
import src.reproducibility as reproducibility
from src.errors import CorruptCheckpoint, EmbeddingAssetMissing, EmptyVocabulary, \
    NonFinite, ShapeMismatch, WeightsMissing
from src.records import AnswerVocabulary

PAD_INDEX = 0
OOV_INDEX = 1
"""Word indices reserved for padding and for words without a vector."""

OOV_SEED = 0
"""Seed of the single vector shared by all out-of-vocabulary words."""

CHECKPOINT_KIND = "vqa"


@dataclass
class ModelOptions:
    question_max_tokens: int = 12
    question_hidden: int = 1024
    glimpses: int = 2
    joint_dim: int = 1024
    cdae_size: int = 128
    cdae_dim: int = 256
    noise_sigma: float = 0.1
    visual_positions: str = "grid"
    finetune_visual: bool = True
    dropout: float = 0.2


# Images

@dataclass
class ReconstructionPair:
    original: torch.Tensor
    noised_input: torch.Tensor
    reconstruction: torch.Tensor


class DenoisingAutoencoder(nn.Module):
    """
    Three stride-2 convolutions encode a single-channel square image; the code
    is the final feature map average-pooled to 2x2 and flattened. Mirrored
    transposed convolutions reconstruct the image from that feature map.
    """

    def __init__(self, size: int = 128, dim: int = 256):
        super().__init__()
        if size % 16 or dim % 16:
            raise ValueError("autoencoder size and dim must be multiples of 16, "
                             "got {} and {}".format(size, dim))
        self.size = size
        self.dim = dim
        c1, c2, c3 = dim // 16, dim // 8, dim // 4
        self.encoder = nn.Sequential(
            nn.Conv2d(1, c1, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.pool = nn.AvgPool2d(size // 16)
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(c3, c2, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c1, 1, 4, stride=2, padding=1),
        )

    def forward(self, image: torch.Tensor, noise_sigma: float = 0.0,
                generator: t.Optional[torch.Generator] = None) -> t.Tuple[torch.Tensor, ReconstructionPair]:
        """
        Encode and reconstruct a batch [N, 1, S, S]. Gaussian noise of
        standard deviation noise_sigma is added to the input in training
        mode only.

        Returns:
          the codes [N, dim] and the reconstruction pair.
        """
        if image.ndim != 4 or tuple(image.shape[1:]) != (1, self.size, self.size):
            raise ShapeMismatch("Autoencoder expects images of shape [N, 1, {0}, {0}], got {1}"
                                .format(self.size, list(image.shape)))
        if noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative, got {}".format(noise_sigma))

        noised = image
        if self.training and noise_sigma > 0:
            noise = torch.randn(image.shape, generator=generator, dtype=image.dtype)
            noised = image + noise.to(image.device) * noise_sigma

        features = self.encoder(noised)
        code = self.pool(features).flatten(1)
        return code, ReconstructionPair(image, noised, self.decoder(features))


def cdae_forward(cdae: DenoisingAutoencoder, image: torch.Tensor, mode: str,
                 noise_sigma: float, generator: t.Optional[torch.Generator] = None):
    """
    Run the autoencoder in ``train`` or ``eval`` mode regardless of the
    module's current mode, which is restored afterwards.
    """
    assert mode in ("train", "eval"), "mode must be train or eval"
    training = cdae.training
    cdae.train(mode == "train")
    try:
        return cdae(image, noise_sigma, generator)
    finally:
        cdae.train(training)


@dataclass
class VisualFeature:
    """Image tower embedding and autoencoder code, batched along dim 0."""

    clip_part: torch.Tensor
    cdae_part: torch.Tensor

    @property
    def combined(self) -> torch.Tensor:
        return torch.cat([self.clip_part, self.cdae_part], dim=-1)


# Questions

class WordDictionary:
    """
    Question words with a pretrained vector, indexed from 2; index 0 pads and
    index 1 stands for every other word.
    """

    def __init__(self, words: t.Iterable[str] = ()):
        self.words = ["<pad>", "<oov>"]
        self.index = {}
        for w in words:
            if w not in self.index and w not in ("<pad>", "<oov>"):
                self.index[w] = len(self.words)
                self.words.append(w)

    def __len__(self) -> int:
        return len(self.words)

    @staticmethod
    def tokenize(text: str) -> t.List[str]:
        text = re.sub(r"[^\w\s']", " ", text.lower()).replace("'s", " 's")
        return text.split()

    def encode(self, text: str, max_tokens: int) -> t.List[int]:
        """Word indices of the first max_tokens words of text."""
        return [self.index.get(w, OOV_INDEX) for w in self.tokenize(text)[:max_tokens]]

    def to_list(self) -> t.List[str]:
        return self.words[2:]

    @classmethod
    def build(cls, questions: t.Iterable[str], vectors: t.Mapping[str, t.Any]) -> "WordDictionary":
        """Collect the question words that have a vector, in order of appearance."""
        words, missing = [], set()
        for q in questions:
            for w in cls.tokenize(q):
                if w in vectors:
                    words.append(w)
                else:
                    missing.add(w)
        if missing:
            logging.info("%s question words have no vector and share the fallback vector.",
                         len(missing))
        return cls(words)


def load_word_vectors(path: str, words: t.Optional[t.Collection[str]] = None) \
        -> t.Tuple[int, t.Dict[str, np.ndarray]]:
    """
    Read a word-vector text file, one word and its values per line separated
    by any whitespace. A leading "<count> <dim>" header line is skipped.

    Args:
      path: the vector file.
      words: keep only these words, if given.

    Returns:
      the vector width and the word to vector table.

    Raises:
      EmbeddingAssetMissing: path does not exist.
    """
    if not os.path.isfile(path):
        logging.error("Word vector file %s not found.", path)
        raise EmbeddingAssetMissing("Word vector file not found: {}".format(path))
    vectors, dim = {}, None
    with open(path, encoding="utf-8") as f:
        for i, l in enumerate(f):
            parts = l.split()
            if len(parts) < 2:
                continue
            # "<count> <dim>" header line
            if i == 0 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if dim is not None and (len(parts) - 1 != dim
                                    or (words is not None and parts[0] not in words)):
                continue
            try:
                values = np.asarray(parts[1:], dtype=np.float32)
            except ValueError:
                logging.warning("Skipping unreadable word vector line %d in %s.", i + 1, path)
                continue
            if dim is None:
                dim = len(values)
                if words is not None and parts[0] not in words:
                    continue
            vectors[parts[0]] = values
    if dim is None:
        raise EmbeddingAssetMissing("No word vectors found in {}".format(path))
    logging.debug("Read %s word vectors of width %s from %s", len(vectors), dim, path)
    return dim, vectors


@dataclass
class QuestionEncoding:
    hidden: torch.Tensor
    token_count: t.Union[int, torch.Tensor]


class QuestionEncoder(nn.Module):
    """An LSTM over word vectors; the question is its final hidden state."""

    def __init__(self, num_words: int, word_dim: int, hidden: int):
        super().__init__()
        self.embedding = nn.Embedding(num_words, word_dim, padding_idx=PAD_INDEX)
        self.lstm = nn.LSTM(word_dim, hidden, batch_first=True)
        self.hidden = hidden

    def init_word_vectors(self, dictionary: WordDictionary, vectors: t.Mapping[str, np.ndarray]):
        """Copy pretrained vectors into the embedding and draw the fallback vector."""
        weight = self.embedding.weight
        with torch.no_grad():
            weight.zero_()
            fallback = torch.randn(weight.shape[1], generator=reproducibility.make_generator(OOV_SEED))
            weight[OOV_INDEX] = fallback * 0.1
            for w, i in dictionary.index.items():
                weight[i] = torch.from_numpy(vectors[w])

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> QuestionEncoding:
        """
        Args:
          ids: word indices [N, T], padded with zeros.
          lengths: real word counts [N].
        """
        emb = self.embedding(ids)
        packed = pack_padded_sequence(emb, lengths.clamp(min=1).cpu(), batch_first=True,
                                      enforce_sorted=False)
        _, (h, _) = self.lstm(packed)
        return QuestionEncoding(h[-1], lengths)


def pad_questions(encoded: t.Sequence[t.Sequence[int]], max_tokens: int) -> t.Tuple[torch.Tensor, torch.Tensor]:
    """Stack word index lists into a zero-padded [N, max_tokens] tensor and their lengths."""
    ids = torch.full((len(encoded), max_tokens), PAD_INDEX, dtype=torch.long)
    for i, e in enumerate(encoded):
        ids[i, :len(e)] = torch.tensor(e, dtype=torch.long)
    return ids, torch.tensor([len(e) for e in encoded], dtype=torch.long)


def encode_question(question: str, dictionary: WordDictionary, encoder: QuestionEncoder,
                    max_tokens: int) -> QuestionEncoding:
    """Encode one question; hidden has shape [H]."""
    if max_tokens < 1:
        raise ValueError("max_tokens must be at least 1, got {}".format(max_tokens))
    ids, lengths = pad_questions([dictionary.encode(question, max_tokens)], max_tokens)
    enc = encoder(ids.to(encoder.embedding.weight.device), lengths)
    return QuestionEncoding(enc.hidden[0], int(lengths[0]))


# Fusion

class FCNet(nn.Module):
    """Linear layers, each preceded by dropout and followed by an activation."""

    def __init__(self, dims: t.Sequence[int], act: str = "ReLU", dropout: float = 0.0):
        super().__init__()
        layers = []
        for in_dim, out_dim in zip(dims[:-1], dims[1:]):
            if dropout > 0:
                layers.append(nn.Dropout(dropout))
            layers.append(nn.Linear(in_dim, out_dim))
            if act:
                layers.append(getattr(nn, act)())
        self.main = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.main(x)


class BilinearConnect(nn.Module):
    """
    Low-rank bilinear interaction between visual positions and question
    positions. With h_out set, forward yields h_out attention logit maps;
    forward_with_weights pools the joint representation under given weights.
    """

    def __init__(self, v_dim: int, q_dim: int, h_dim: int, h_out: t.Optional[int],
                 dropout: float = 0.0, k: int = 1):
        super().__init__()
        self.k = k
        self.h_out = h_out
        self.v_net = FCNet([v_dim, h_dim * k], dropout=dropout)
        self.q_net = FCNet([q_dim, h_dim * k], dropout=dropout)
        self.dropout = nn.Dropout(dropout)
        if k > 1:
            self.p_net = nn.AvgPool1d(k, stride=k)
        if h_out is not None:
            self.h_mat = nn.Parameter(torch.Tensor(1, h_out, 1, h_dim * k).normal_())
            self.h_bias = nn.Parameter(torch.Tensor(1, h_out, 1, 1).normal_())

    def forward(self, v: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        """Attention logits [N, h_out, K, Q] for v [N, K, Dv] and q [N, Q, Dq]."""
        v_ = self.dropout(self.v_net(v))
        q_ = self.q_net(q)
        return torch.einsum("xhyk,bvk,bqk->bhvq", self.h_mat, v_, q_) + self.h_bias

    def forward_with_weights(self, v: torch.Tensor, q: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        """Joint representation [N, h_dim] under attention weights w [N, K, Q]."""
        v_ = self.v_net(v)
        q_ = self.q_net(q)
        logits = torch.einsum("bvk,bvq,bqk->bk", v_, w, q_)
        if self.k > 1:
            logits = self.p_net(logits.unsqueeze(1)).squeeze(1) * self.k
        return logits


class BilinearAttention(nn.Module):
    def __init__(self, v_dim: int, q_dim: int, h_dim: int, glimpses: int, dropout: float = 0.0):
        super().__init__()
        self.glimpses = glimpses
        self.logits = BilinearConnect(v_dim, q_dim, h_dim, glimpses, dropout, k=3)

    def forward(self, v: torch.Tensor, q: torch.Tensor) -> t.Tuple[torch.Tensor, torch.Tensor]:
        """Attention maps [N, G, K, Q], normalised over all K x Q pairs, and their logits."""
        logits = self.logits(v, q)
        n, g, k, nq = logits.shape
        p = F.softmax(logits.reshape(n, g, k * nq), dim=2)
        return p.reshape(n, g, k, nq), logits


class BanFusion(nn.Module):
    """
    Bilinear attention fusion of visual positions with a question vector.
    Each glimpse pools the visual positions under its attention map and adds a
    projection of the result to the running question representation.
    """

    def __init__(self, v_dim: int, q_dim: int, joint_dim: int, glimpses: int, dropout: float = 0.0):
        super().__init__()
        self.glimpses = glimpses
        self.v_dim, self.q_dim = v_dim, q_dim
        self.v_att = BilinearAttention(v_dim, q_dim, joint_dim, glimpses, dropout)
        self.b_net = nn.ModuleList([BilinearConnect(v_dim, q_dim, joint_dim, None, dropout, k=1)
                                    for _ in range(glimpses)])
        self.q_prj = nn.ModuleList([FCNet([joint_dim, q_dim], act="", dropout=dropout)
                                    for _ in range(glimpses)])

    def forward(self, v: torch.Tensor, q: torch.Tensor) -> t.Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
          v: visual positions [N, K, Dv].
          q: question vectors [N, Dq].

        Returns:
          fused vectors [N, Dq] and attention weights [N, G, K].
        """
        if v.ndim != 3 or v.shape[2] != self.v_dim or v.shape[1] < 1:
            raise ShapeMismatch("Fusion expects visual positions [N, K>=1, {}], got {}"
                                .format(self.v_dim, list(v.shape)))
        if q.ndim != 2 or q.shape[1] != self.q_dim or q.shape[0] != v.shape[0]:
            raise ShapeMismatch("Fusion expects questions [{}, {}], got {}"
                                .format(v.shape[0], self.q_dim, list(q.shape)))
        q_emb = q.unsqueeze(1)
        att, _ = self.v_att(v, q_emb)
        for g in range(self.glimpses):
            b_emb = self.b_net[g].forward_with_weights(v, q_emb, att[:, g])
            q_emb = self.q_prj[g](b_emb.unsqueeze(1)) + q_emb
        return q_emb.sum(1), att[..., 0]


def ban_fuse(fusion: BanFusion, visual: torch.Tensor, question: QuestionEncoding,
             glimpses: int) -> t.Tuple[torch.Tensor, torch.Tensor]:
    """
    Fuse one example's visual positions [K, Dv] with its question encoding.

    Returns:
      the fused vector [Dq] and the attention map [G, K].
    """
    if glimpses != fusion.glimpses:
        raise ShapeMismatch("Fusion was built with {} glimpses, {} requested"
                            .format(fusion.glimpses, glimpses))
    fused, att = fusion(visual.unsqueeze(0), question.hidden.unsqueeze(0))
    return fused[0], att[0]


class AnswerClassifier(nn.Module):
    """Two-layer feed-forward answer scorer."""

    def __init__(self, in_dim: int, hid_dim: int, out_dim: int, dropout: float = 0.0):
        super().__init__()
        self.main = nn.Sequential(
            nn.Linear(in_dim, hid_dim),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(hid_dim, out_dim),
        )

    @property
    def num_answers(self) -> int:
        return self.main[-1].out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.main(x)


def classify_answer(classifier: AnswerClassifier, fused: torch.Tensor,
                    vocabulary_size: int) -> torch.Tensor:
    """Raw answer scores [V] (or [N, V] for a batch) for fused vectors."""
    if classifier.num_answers != vocabulary_size or vocabulary_size < 1:
        raise ShapeMismatch("Classifier scores {} answers, vocabulary has {}"
                            .format(classifier.num_answers, vocabulary_size))
    if fused.shape[-1] != classifier.main[0].in_features:
        raise ShapeMismatch("Classifier expects inputs of width {}, got {}"
                            .format(classifier.main[0].in_features, fused.shape[-1]))
    return classifier(fused)


# Loss

@dataclass
class LossReport:
    cls_loss: torch.Tensor
    rec_loss: torch.Tensor
    vqa_loss: torch.Tensor


def vqa_loss(logits: torch.Tensor, target: torch.Tensor, reconstruction: torch.Tensor,
             original: torch.Tensor) -> LossReport:
    """
    Classification loss (binary cross-entropy summed over answers, averaged
    over the batch) plus reconstruction loss (mean squared error).

    Raises:
      ShapeMismatch: logits and target, or reconstruction and original,
        differ in shape.
      NonFinite: an input holds NaN or infinity.
    """
    if logits.shape != target.shape:
        raise ShapeMismatch("Logits {} and target {} differ in shape"
                            .format(list(logits.shape), list(target.shape)))
    if reconstruction.shape != original.shape:
        raise ShapeMismatch("Reconstruction {} and original {} differ in shape"
                            .format(list(reconstruction.shape), list(original.shape)))
    for name, x in (("logits", logits), ("target", target),
                    ("reconstruction", reconstruction), ("original", original)):
        if not torch.isfinite(x).all():
            raise NonFinite("{} contains NaN or infinite values".format(name))

    if logits.ndim == 1:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    cls = F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype)) * logits.shape[1]
    rec = F.mse_loss(reconstruction, original)
    return LossReport(cls, rec, cls + rec)


# Model

@dataclass
class VqaOutput:
    logits: torch.Tensor
    attention: torch.Tensor
    visual: VisualFeature
    reconstruction: ReconstructionPair


class VqaModel(nn.Module):
    def __init__(self, spec: backbones.BackboneSpec, dictionary: WordDictionary,
                 vocabulary: AnswerVocabulary, word_dim: int,
                 options: t.Optional[ModelOptions] = None):
        """
        Args:
          spec: backbone of the image tower.
          dictionary: question words with pretrained vectors.
          vocabulary: the answers the classifier scores.
          word_dim: width of the word vectors.
          options: architecture and training switches.
        """
        super().__init__()
        self.spec = spec
        self.dictionary = dictionary
        self.vocabulary = vocabulary
        self.word_dim = word_dim
        self.options = options = options or ModelOptions()
        if options.visual_positions not in ("grid", "pooled"):
            raise ValueError("visual_positions must be grid or pooled")
        self.visual_source = None
        """Where the image tower weights came from; None until loaded."""

        self.image_tower = backbones.create_image_tower(spec)
        pooled_dim, _, position_dim = backbones.image_feature_dims(self.image_tower, spec.resolution)
        self.image_tower.requires_grad_(options.finetune_visual)
        self.cdae = DenoisingAutoencoder(options.cdae_size, options.cdae_dim)
        self.question_encoder = QuestionEncoder(len(dictionary), word_dim, options.question_hidden)

        v_dim = (position_dim if options.visual_positions == "grid" else pooled_dim) + options.cdae_dim
        self.fusion = BanFusion(v_dim, options.question_hidden, options.joint_dim,
                                options.glimpses, options.dropout)
        self.classifier = AnswerClassifier(options.question_hidden, 2 * options.question_hidden,
                                           max(len(vocabulary), 1), options.dropout)

    def train(self, mode: bool = True):
        super().train(mode)
        if not self.options.finetune_visual:
            self.image_tower.eval()
        return self

    def load_visual_weights(self, state_dict: t.Mapping[str, torch.Tensor], source: str):
        """Load image tower weights, recording where they came from."""
        checkpoint.apply_state(self.image_tower, state_dict, source)
        self.visual_source = source
        logging.info("Visual encoder weights loaded from %s", source)

    def encode_questions(self, questions: t.Sequence[str]) -> t.Tuple[torch.Tensor, torch.Tensor]:
        m = self.options.question_max_tokens
        return pad_questions([self.dictionary.encode(q, m) for q in questions], m)

    def visual_positions(self, visual: VisualFeature, positions: torch.Tensor) -> torch.Tensor:
        """The positions the fusion attends over: [N, K, Dv]."""
        if self.options.visual_positions == "pooled":
            return visual.combined.unsqueeze(1)
        cdae = visual.cdae_part.unsqueeze(1).expand(-1, positions.shape[1], -1)
        return torch.cat([positions, cdae], dim=-1)

    def forward(self, image_full: torch.Tensor, image_low: torch.Tensor, ids: torch.Tensor,
                lengths: torch.Tensor, generator: t.Optional[torch.Generator] = None) -> VqaOutput:
        visual, positions, pair = self._visual_(image_full, image_low, generator)
        question = self.question_encoder(ids, lengths)
        fused, att = self.fusion(self.visual_positions(visual, positions), question.hidden)
        return VqaOutput(self.classifier(fused), att, visual, pair)

    def _visual_(self, image_full, image_low, generator=None):
        if self.visual_source is None:
            raise WeightsMissing("No visual encoder weights have been loaded")
        r = self.spec.resolution
        if image_full.ndim != 4 or tuple(image_full.shape[1:]) != (3, r, r):
            raise ShapeMismatch("Image tower expects images [N, 3, {0}, {0}], got {1}"
                                .format(r, list(image_full.shape)))
        with torch.set_grad_enabled(torch.is_grad_enabled() and self.options.finetune_visual):
            pooled, positions = backbones.image_features(self.image_tower, image_full)
        code, pair = self.cdae(image_low, self.options.noise_sigma, generator)
        return VisualFeature(pooled, code), positions, pair

    def save(self, path: str, config: t.Optional[t.Mapping[str, t.Any]] = None,
             epoch: int = 0, loss: t.Optional[float] = None) -> checkpoint.CheckpointHandle:
        header = {
            "backbone": self.spec.to_dict(),
            "options": asdict(self.options),
            "words": self.dictionary.to_list(),
            "answers": self.vocabulary.to_list(),
            "word_dim": self.word_dim,
            "visual_source": self.visual_source,
            "config": dict(config) if config is not None else None,
        }
        return checkpoint.save(path, CHECKPOINT_KIND, self, header, epoch, loss)

    @classmethod
    def load(cls, path: str) -> "VqaModel":
        """
        Rebuild a model, its dictionary and its answer vocabulary from a
        checkpoint.

        Raises:
          WeightsMissing, CorruptCheckpoint
        """
        payload = checkpoint.load(path, CHECKPOINT_KIND)
        header = payload["header"]
        try:
            model = cls(backbones.BackboneSpec.from_dict(header["backbone"]),
                        WordDictionary(header["words"]),
                        AnswerVocabulary.from_list(header["answers"]),
                        header["word_dim"], ModelOptions(**header["options"]))
        except (KeyError, TypeError) as e:
            raise CorruptCheckpoint("{} has an incomplete header: {}".format(path, e)) from e
        checkpoint.apply_state(model, payload["state_dict"], path)
        model.visual_source = header.get("visual_source") or path
        return model


def composite_visual_features(model: VqaModel, image_full: torch.Tensor, image_low: torch.Tensor,
                              mode: str = "eval") -> VisualFeature:
    """
    The image tower embedding of image_full concatenated with the
    autoencoder code of image_low.

    Raises:
      WeightsMissing: the model's image tower has no loaded weights.
    """
    assert mode in ("train", "eval"), "mode must be train or eval"
    training = model.training
    model.train(mode == "train")
    try:
        visual, _, _ = model._visual_(image_full, image_low)
    finally:
        model.train(training)
    return visual


def answer_from_logits(logits: torch.Tensor, vocabulary: AnswerVocabulary) -> str:
    """The answer with the highest score; the lowest index wins ties."""
    if not len(vocabulary):
        raise EmptyVocabulary("Cannot predict with an empty answer vocabulary")
    if logits.shape[-1] != len(vocabulary):
        raise ShapeMismatch("{} scores for {} answers".format(logits.shape[-1], len(vocabulary)))
    return vocabulary.answer(int(torch.argmax(logits)))


def predict(model: VqaModel, image_full: torch.Tensor, image_low: torch.Tensor, question: str,
            vocabulary: t.Optional[AnswerVocabulary] = None) -> str:
    """
    Answer one question about one image ([3, R, R] and [1, S, S]) with the
    model in evaluation mode.
    """
    vocabulary = model.vocabulary if vocabulary is None else vocabulary
    if not len(vocabulary):
        raise EmptyVocabulary("Cannot predict with an empty answer vocabulary")
    device = next(model.parameters()).device
    ids, lengths = model.encode_questions([question])
    model.eval()
    with torch.no_grad():
        out = model(image_full.unsqueeze(0).to(device), image_low.unsqueeze(0).to(device),
                    ids.to(device), lengths)
    return answer_from_logits(out.logits[0], vocabulary)
