"""Synthetic paired image/caption data, tokenisation and CIFAR-10 ingestion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorfile
from .errors import ConfigError, FormatError, MissingFileError
from .numkit import RngStream, asfloat

MAX_LEN = 16
UNK = "<unk>"
TEMPLATE = "a photo of a {}"

CIFAR10_CLASSES = [
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
]
ADJECTIVES = [
    "small", "large", "bright", "dark", "old", "new", "plain", "little",
    "big", "nice", "simple", "quiet",
]
_FILLER_SYNONYMS = {
    "a": ["the", "one"],
    "photo": ["picture", "image", "snapshot"],
    "of": ["with"],
}
CIFAR_RECORD = 3073


@dataclass
class Vocab:
    tokens: list[str]
    unk_id: int = 0
    synonyms: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary tokens must be unique")
        if not 0 <= self.unk_id < len(self.tokens):
            raise ConfigError("unk_id out of range")
        for key, syns in self.synonyms.items():
            if key in syns:
                raise ConfigError(f"synonym list of {self.tokens[key]!r} contains itself")
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self._index

    def id(self, word: str) -> int:
        return self._index.get(word, self.unk_id)

    def to_json(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "unk_id": self.unk_id,
            "synonyms": {str(k): v for k, v in sorted(self.synonyms.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        return cls(
            tokens=list(obj["tokens"]),
            unk_id=int(obj["unk_id"]),
            synonyms={int(k): [int(i) for i in v] for k, v in obj["synonyms"].items()},
        )


def build_vocab(class_names, adjectives=ADJECTIVES) -> Vocab:
    """Vocabulary over the caption templates with a built-in synonym table.

    Class names map to the other class names plus the neutral adjectives;
    adjectives map to the other adjectives; template words get a couple of
    near-synonyms.
    """
    words = [UNK]
    for w in ["a", "photo", "of", *sum(_FILLER_SYNONYMS.values(), [])]:
        if w not in words:
            words.append(w)
    for w in [*class_names, *adjectives]:
        if w not in words:
            words.append(w)
    index = {w: i for i, w in enumerate(words)}
    classes = list(dict.fromkeys(class_names))
    synonyms: dict[int, list[int]] = {}
    for c in classes:
        synonyms[index[c]] = [index[o] for o in classes if o != c] + [
            index[a] for a in adjectives if a != c
        ]
    for a in adjectives:
        if a in classes:
            continue
        synonyms[index[a]] = [index[o] for o in adjectives if o != a]
    for w, alts in _FILLER_SYNONYMS.items():
        synonyms[index[w]] = [index[x] for x in alts]
    return Vocab(words, 0, synonyms)


def tokenize(text: str, vocab: Vocab, max_len: int = MAX_LEN) -> tuple[int, ...]:
    words = text.lower().split()
    if not words:
        raise ConfigError("cannot tokenize an empty string")
    return tuple(vocab.id(w) for w in words[:max_len])


def detokenize(seq, vocab: Vocab) -> str:
    return " ".join(vocab.tokens[i] for i in seq)


@dataclass
class PairedDataset:
    images: np.ndarray                      # N x C x H x W in [0, 1]
    captions: list[list[tuple[int, ...]]]   # per image, >= 1 token sequence
    labels: np.ndarray                      # N, ints in [0, K)
    class_names: list[str]
    vocab: Vocab

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels) or len(self.captions) != len(self.labels):
            raise ConfigError("images, captions and labels must have equal length")
        if any(len(c) == 0 for c in self.captions):
            raise ConfigError("every image needs at least one caption")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ConfigError("label out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return len(self.class_names)

    def subset(self, idx) -> "PairedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return PairedDataset(
            self.images[idx], [self.captions[i] for i in idx], self.labels[idx],
            list(self.class_names), self.vocab,
        )

    def caption_strings(self) -> list[list[str]]:
        return [[detokenize(c, self.vocab) for c in caps] for caps in self.captions]


def gen_dataset(
    num_classes: int,
    per_class: int,
    shape=(3, 8, 8),
    noise_sigma: float = 0.1,
    seed: RngStream | int = 0,
    class_names=None,
    vocab: Vocab | None = None,
    captions_per_image: int = 2,
    contrast: float = 1.0,
) -> PairedDataset:
    """Class-structured synthetic images with template captions.

    Each class has a prototype drawn uniformly from a band of width
    ``contrast`` centred on 0.5 (the whole of [0, 1] at contrast 1); samples
    are prototype + N(0, noise_sigma) clamped to [0, 1]. The first caption of
    every image is the bare template, later ones append 1-3 adjectives.
    """
    if num_classes < 2 or per_class < 1 or noise_sigma < 0 or captions_per_image < 1:
        raise ConfigError("need num_classes >= 2, per_class >= 1, noise_sigma >= 0")
    if not 0 < contrast <= 1:
        raise ConfigError("contrast must lie in (0, 1]")
    if class_names is None:
        class_names = (CIFAR10_CLASSES if num_classes <= 10 else
                       [f"class{k}" for k in range(num_classes)])[:num_classes]
    class_names = list(class_names)
    if len(class_names) != num_classes:
        raise ConfigError("class_names length must equal num_classes")
    vocab = vocab or build_vocab(class_names)
    missing = [c for c in class_names if c not in vocab]
    if missing:
        raise ConfigError(f"vocabulary lacks class names {missing}")
    adjectives = [a for a in ADJECTIVES if a in vocab]

    stream = seed if isinstance(seed, RngStream) else RngStream(int(seed))
    rng = stream.generator()
    shape = tuple(int(s) for s in shape)
    protos = rng.uniform(0.0, 1.0, size=(num_classes, *shape))
    if contrast != 1:
        protos = 0.5 + contrast * (protos - 0.5)
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.normal(0.0, 1.0, size=(len(labels), *shape)) * noise_sigma
    images = np.clip(protos[labels] + noise, 0.0, 1.0)

    captions = []
    for y in labels:
        base = TEMPLATE.format(class_names[y])
        caps = [tokenize(base, vocab)]
        for _ in range(captions_per_image - 1):
            n = int(rng.integers(1, 4)) if adjectives else 0
            extra = [adjectives[int(j)] for j in rng.integers(0, len(adjectives), size=n)]
            caps.append(tokenize(" ".join([base, *extra]), vocab))
        captions.append(caps)
    return PairedDataset(asfloat(images), captions, labels, class_names, vocab)


def load_cifar10(path, class_names=CIFAR10_CLASSES, vocab: Vocab | None = None) -> PairedDataset:
    """Read a CIFAR-10 binary batch (label byte + 3072 plane-major pixels)."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such CIFAR file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    recs = raw.reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} > 9")
    images = asfloat(recs[:, 1:].reshape(-1, 3, 32, 32)) / 255
    vocab = vocab or build_vocab(list(class_names))
    captions = [[tokenize(TEMPLATE.format(class_names[y]), vocab)] for y in labels]
    return PairedDataset(images, captions, labels, list(class_names), vocab)


def write_cifar10(path, data: PairedDataset) -> None:
    if data.images.shape[1:] != (3, 32, 32):
        raise FormatError("CIFAR-10 records hold 3x32x32 images")
    pixels = np.rint(np.asarray(data.images, dtype=np.float64) * 255).astype(np.uint8)
    recs = np.concatenate([data.labels.astype(np.uint8)[:, None], pixels.reshape(len(data), -1)], axis=1)
    recs.tofile(path)


def save_dataset(prefix, data: PairedDataset) -> None:
    """Write ``<prefix>.fgak`` (images, labels) and ``<prefix>.json`` (text side)."""
    prefix = Path(prefix)
    tensorfile.save(prefix.with_suffix(".fgak"), {
        "images": data.images,
        "labels": data.labels.astype(np.float64),
    })
    side = {
        "class_names": data.class_names,
        "captions": data.caption_strings(),
        "vocab": data.vocab.to_json(),
    }
    prefix.with_suffix(".json").write_text(json.dumps(side, indent=1, sort_keys=True))


def load_dataset(prefix) -> PairedDataset:
    prefix = Path(prefix)
    side_path = prefix.with_suffix(".json")
    if not side_path.exists():
        raise MissingFileError(f"no such dataset sidecar: {side_path}")
    tensors = tensorfile.load(prefix.with_suffix(".fgak"))
    side = json.loads(side_path.read_text())
    vocab = Vocab.from_json(side["vocab"])
    captions = [[tokenize(c, vocab) for c in caps] for caps in side["captions"]]
    return PairedDataset(
        tensors["images"], captions, tensors["labels"].astype(np.int64),
        side["class_names"], vocab,
    )


def split_dataset(data: PairedDataset, test_per_class: int):
    """Hold out the last ``test_per_class`` images of every class."""
    train_idx, test_idx = [], []
    for c in range(data.num_classes):
        members = np.flatnonzero(data.labels == c)
        if len(members) <= test_per_class:
            raise ConfigError(f"class {c} has too few images to hold out {test_per_class}")
        train_idx.extend(members[:-test_per_class])
        test_idx.extend(members[-test_per_class:])
    return data.subset(sorted(train_idx)), data.subset(sorted(test_idx))
