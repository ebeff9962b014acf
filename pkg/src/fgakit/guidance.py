"""Guiding-vector matrices and guiding-label sets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorfile
from .errors import ConfigError, ConstructionError, MissingFileError
from .synthdata import TEMPLATE, tokenize


@dataclass
class GuidanceSet:
    W: np.ndarray                 # m x d guiding vectors
    labels: list[list[int]]       # per example, indices into W to move away from
    source: str = "custom"
    names: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def m(self):
        return len(self.W)

    def validate(self, untargeted=True):
        for i, labs in enumerate(self.labels):
            if not labs:
                raise ConstructionError(f"example {i} has no guiding labels")
            if min(labs) < 0 or max(labs) >= self.m:
                raise ConstructionError(f"example {i}: guiding label out of range [0, {self.m})")
            if untargeted and len(set(labs)) > self.m - 1:
                raise ConstructionError(
                    f"example {i}: {len(set(labs))} guided vectors leave no free vector among {self.m}")
        return self

    def with_labels(self, labels) -> "GuidanceSet":
        return GuidanceSet(self.W, [list(map(int, l)) for l in labels], self.source,
                           list(self.names), list(self.warnings)).validate()


def class_mean_guidance(enc, data, batch_size=256) -> GuidanceSet:
    """One guiding vector per class: the mean embedding of its images."""
    embs = np.concatenate([enc.forward(data.images[i:i + batch_size])
                           for i in range(0, len(data), batch_size)]) if len(data) else None
    rows = []
    for c, name in enumerate(data.class_names):
        members = np.flatnonzero(data.labels == c)
        if len(members) == 0:
            raise ConstructionError(f"class {c} ({name!r}) has no images")
        rows.append(embs[members].mean(axis=0))
    W = np.stack(rows)
    labels = [[int(y)] for y in data.labels]
    return GuidanceSet(W, labels, "class-mean", list(data.class_names)).validate()


def prompt_guidance(txt_enc, class_names, vocab, template=TEMPLATE, labels=None) -> GuidanceSet:
    """Guiding vectors from a prompt template instantiated per class name."""
    if template.count("{}") != 1:
        raise ConfigError("template must contain exactly one '{}' placeholder")
    texts = [template.format(c) for c in class_names]
    W = txt_enc.forward([tokenize(t, vocab) for t in texts])
    warnings = []
    if len(set(class_names)) != len(class_names):
        warnings.append("duplicate class names produce duplicate guiding vectors")
    labs = [[int(y)] for y in labels] if labels is not None else []
    g = GuidanceSet(W, labs, "prompt", texts, warnings)
    return g.validate() if labs else g


def dataset_text_guidance(txt_enc, data) -> GuidanceSet:
    """All distinct dataset captions as guiding vectors; each image guided by its own."""
    index: dict[tuple, int] = {}
    labels = []
    for caps in data.captions:
        own = []
        for c in caps:
            key = tuple(c)
            if key not in index:
                index[key] = len(index)
            own.append(index[key])
        labels.append(sorted(set(own)))
    seqs = list(index)
    W = txt_enc.forward(seqs)
    names = [" ".join(data.vocab.tokens[i] for i in s) for s in seqs]
    return GuidanceSet(W, labels, "dataset-texts", names).validate()


def _cosine_rows(emb, W):
    emb = np.asarray(emb, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    wn = np.linalg.norm(W, axis=1)
    return (W @ emb) / np.maximum(wn * np.linalg.norm(emb), 1e-30)


def topk_match_labels(img_emb, W, k: int) -> list[int]:
    """Indices of the k rows of W most cosine-similar to img_emb (ties -> lower index)."""
    W = W.W if isinstance(W, GuidanceSet) else np.asarray(W)
    m = len(W)
    if not 1 <= k <= m - 1:
        raise ConfigError(f"k={k} outside [1, {m - 1}]")
    sims = _cosine_rows(img_emb, W)
    order = np.argsort(-sims, kind="stable")
    return [int(i) for i in order[:k]]


def topk_guidance(img_enc, base: GuidanceSet, images, k=5, union=False) -> GuidanceSet:
    """Relabel ``base`` with each image's top-k most similar guiding vectors.

    With ``union`` the existing labels of ``base`` are kept and the top-k
    matches appended (duplicates dropped, order preserved).
    """
    embs = img_enc.forward(images)
    labels = [topk_match_labels(e, base.W, k) for e in embs]
    if union:
        if len(base.labels) != len(labels):
            raise ConfigError("union needs one base label list per image")
        labels = [list(dict.fromkeys([*own, *top])) for own, top in zip(base.labels, labels)]
    return GuidanceSet(base.W, labels, "topk+own" if union else "topk", list(base.names)).validate()


def save_guidance(prefix, G: GuidanceSet) -> None:
    """``<prefix>.fgak`` holds W; ``<prefix>.json`` the labels and provenance."""
    prefix = Path(prefix)
    tensorfile.save(prefix.with_suffix(".fgak"), {"W": np.asarray(G.W)})
    side = {"labels": G.labels, "source": G.source, "names": G.names, "warnings": G.warnings}
    prefix.with_suffix(".json").write_text(json.dumps(side, indent=1, sort_keys=True))


def load_guidance(prefix) -> GuidanceSet:
    prefix = Path(prefix)
    side_path = prefix.with_suffix(".json")
    if not side_path.exists():
        raise MissingFileError(f"no such guidance sidecar: {side_path}")
    W = tensorfile.load(prefix.with_suffix(".fgak"))["W"]
    side = json.loads(side_path.read_text())
    return GuidanceSet(W, side["labels"], side["source"], side["names"], side["warnings"]).validate()
