# BSD 3-Clause License
#
# Copyright (c) 2022, the medvqa authors. All rights reserved.
# See the LICENSE file for the full license text.

import json
import sys
from os.path import dirname, join, abspath

import numpy as np
import pytest
from PIL import Image

src_path = join(dirname(abspath(__file__)), "..")
sys.path.insert(0, src_path)

import src.backbones as backbones
import src.contrastive as contrastive
import src.reproducibility as reproducibility

# Small towers built through the same timm code paths as the real backbones.
TINY_VIT = backbones.BackboneSpec(
    "tiny_vit", "vit_base_patch32_clip_224", resolution=32, embed_dim=16,
    text_width=32, text_heads=2, text_layers=1, vocab_size=1024,
    timm_kwargs=dict(img_size=32, patch_size=16, embed_dim=32, depth=1, num_heads=2))
TINY_RESNET = backbones.BackboneSpec(
    "tiny_resnet", "resnet10t", resolution=64, embed_dim=16,
    text_width=32, text_heads=2, text_layers=1, vocab_size=1024)
backbones.register(TINY_VIT)
backbones.register(TINY_RESNET)

WORDS = ["is", "there", "a", "the", "what", "organ", "in", "image", "this", "shown",
         "fracture", "lung", "liver", "brain", "abnormal", "which", "plane"]
WORD_DIM = 8

TINY_OPTIONS = dict(question_max_tokens=6, question_hidden=16, glimpses=2, joint_dim=8,
                    cdae_size=16, cdae_dim=32, noise_sigma=0.1, dropout=0.0)

# (image, question, answer, answer_type, question_type)
RAD_TRAIN = [
    ("synpic1.jpg", "Is there a fracture?", "yes", "CLOSED", "PRES"),
    ("synpic1.jpg", "What organ is shown?", "Lung", "OPEN", "ORGAN"),
    ("synpic2.jpg", "Is there a fracture?", "no", "CLOSED", "PRES"),
    ("synpic2.jpg", "Which plane is this?", "axial", "OPEN", "PLANE"),
    ("synpic3.jpg", "What organ is shown?", "liver.", "OPEN", "ORGAN"),
    ("synpic3.jpg", "Is this abnormal?", "Yes", "CLOSED", "ABN"),
    ("synpic4.jpg", "What organ is shown?", "brain", "OPEN", "ORGAN"),
    ("synpic4.jpg", "Is this abnormal?", "no", "CLOSED", "ABN"),
]
RAD_TEST = [
    ("synpic1.jpg", "Is this abnormal?", "no", "CLOSED", "ABN"),
    ("synpic2.jpg", "What organ is shown?", "lung", "OPEN", "ORGAN"),
    ("synpic3.jpg", "Is there a fracture?", "yes", "CLOSED", "PRES"),
    ("synpic4.jpg", "What organ is shown?", "kidney", "OPEN", "ORGAN"),
]

SLAKE_TRAIN = [
    ("xmlab1/source.jpg", "What organ is shown in this image?", "Lung", "OPEN", "Organ", "en"),
    ("xmlab1/source.jpg", "Is the lung abnormal?", "Yes", "CLOSED", "Abnormality", "en"),
    ("xmlab1/source.jpg", "图中是什么器官?", "肺", "OPEN", "Organ", "zh"),
    ("xmlab2/source.jpg", "Which plane is this image in?", "Transverse Plane", "OPEN", "Plane", "en"),
    ("xmlab2/source.jpg", "Is the liver abnormal?", "No", "CLOSED", "Abnormality", "en"),
]
SLAKE_TEST = [
    ("xmlab3/source.jpg", "What organ is shown in this image?", "Liver", "OPEN", "Organ", "en"),
    ("xmlab3/source.jpg", "Is the liver abnormal?", "No", "CLOSED", "Abnormality", "en"),
]
SLAKE_VALIDATE = [
    ("xmlab4/source.jpg", "Which plane is this image in?", "Coronal Plane", "OPEN", "Plane", "en"),
]


def make_image(path, value, size=40):
    """Write an RGB image whose pixels vary with value."""
    rng = np.random.default_rng(value)
    pixels = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(str(path), format="PNG")
    return path


def bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) \
        + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(2 ** 8):
        if b not in bs:
            bs.append(b)
            cs.append(2 ** 8 + n)
            n += 1
    return [chr(c) for c in cs]


BPE_MERGES = [("t", "h"), ("th", "e</w>"), ("i", "s</w>")]


@pytest.fixture(autouse=True)
def default_algorithms():
    yield
    reproducibility.deterministic_mode(False)


@pytest.fixture(scope="session")
def bpe_assets(tmp_path_factory):
    """Returns: paths of a small byte-level BPE vocabulary and merges file."""
    d = tmp_path_factory.mktemp("bpe")
    chars = bytes_to_unicode()
    tokens = chars + [c + "</w>" for c in chars] + ["".join(m) for m in BPE_MERGES] \
        + ["<|startoftext|>", "<|endoftext|>"]
    vocab, merges = d / "vocab.json", d / "merges.txt"
    vocab.write_text(json.dumps({tok: i for i, tok in enumerate(tokens)}), encoding="utf-8")
    merges.write_text("#version: 0.2\n" + "\n".join(" ".join(m) for m in BPE_MERGES) + "\n",
                      encoding="utf-8")
    return str(vocab), str(merges)


@pytest.fixture(scope="session")
def word_vectors_file(tmp_path_factory):
    """Returns: a word vector text file covering the fixture questions."""
    path = tmp_path_factory.mktemp("glove") / "vectors.txt"
    rng = np.random.default_rng(7)
    lines = ["{} {}".format(w, " ".join("{:.5f}".format(x) for x in rng.normal(size=WORD_DIM)))
             for w in WORDS]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def _write_rad_(root, entries, filename):
    rows = [{"qid": i, "image_name": img, "question": q, "answer": a, "answer_type": at,
             "question_type": qt, "phrase_type": "freeform"}
            for i, (img, q, a, at, qt) in enumerate(entries)]
    (root / filename).write_text(json.dumps(rows), encoding="utf-8")


def _write_slake_(root, entries, filename):
    rows = [{"qid": i, "img_name": img, "question": q, "answer": a, "answer_type": at,
             "content_type": ct, "q_lang": lang}
            for i, (img, q, a, at, ct, lang) in enumerate(entries)]
    (root / filename).write_text(json.dumps(rows, ensure_ascii=False), encoding="utf-8")


@pytest.fixture
def rad_root(tmp_path):
    """Returns: a rad-style dataset root whose test images all occur in train."""
    root = tmp_path / "rad"
    for i, name in enumerate(sorted({e[0] for e in RAD_TRAIN})):
        make_image(root / "images" / name, i)
    _write_rad_(root, RAD_TRAIN, "trainset.json")
    _write_rad_(root, RAD_TEST, "testset.json")
    return str(root)


@pytest.fixture
def slake_root(tmp_path):
    """Returns: a slake-style dataset root with disjoint train and test images."""
    root = tmp_path / "slake"
    names = sorted({e[0] for e in SLAKE_TRAIN + SLAKE_TEST + SLAKE_VALIDATE})
    for i, name in enumerate(names):
        make_image(root / "imgs" / name, 10 + i)
    _write_slake_(root, SLAKE_TRAIN, "train.json")
    _write_slake_(root, SLAKE_TEST, "test.json")
    _write_slake_(root, SLAKE_VALIDATE, "validate.json")
    return str(root)


@pytest.fixture
def caption_manifest(tmp_path):
    """Returns: a caption manifest of four pairs; its image directory is alongside."""
    root = tmp_path / "captions"
    captions = ["chest x ray showing the lung", "axial ct of the liver",
                "mri of the brain", "this is a fracture"]
    rows = []
    for i, caption in enumerate(captions):
        make_image(root / "images" / "roco{}.png".format(i), 20 + i)
        rows.append("ROCO_{0}\timages/roco{0}.png\t{1}".format(i, caption))
    path = root / "manifest.tsv"
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return str(path)


@pytest.fixture
def tiny_options():
    """Returns: keyword arguments of a small VQA model."""
    return dict(TINY_OPTIONS)


@pytest.fixture
def dual_checkpoint(tmp_path):
    """Returns: the path of an untrained tiny_vit dual-encoder checkpoint."""
    reproducibility.seed_everything(1)
    path = str(tmp_path / "dual" / "tiny_vit.pt")
    contrastive.save_checkpoint(contrastive.DualEncoder(TINY_VIT), path)
    return path
