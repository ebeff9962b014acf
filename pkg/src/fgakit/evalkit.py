"""Metrics and experiment protocols.

All rankings use cosine similarity with ties broken toward the lower index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


def _unit(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-30)


def cosine_matrix(a, b):
    return _unit(a) @ _unit(b).T


def rank_desc(scores):
    """Indices sorting each row by descending score, stable on ties."""
    return np.argsort(-np.asarray(scores), axis=-1, kind="stable")


def topk_hits(scores, labels, k):
    order = rank_desc(scores)[:, :min(k, scores.shape[1])]
    return (order == np.asarray(labels)[:, None]).any(axis=1)


def zeroshot_predict(img_emb, W):
    return rank_desc(cosine_matrix(img_emb, W))[:, 0]


def zeroshot_scores(img_emb, W, labels):
    sims = cosine_matrix(img_emb, W)
    return {"top1": float(topk_hits(sims, labels, 1).mean()),
            "top5": float(topk_hits(sims, labels, 5).mean())}


def zeroshot_eval(img_enc, images, labels, W):
    """Top-1/top-5 zero-shot accuracy against prompt guiding vectors ``W``."""
    return zeroshot_scores(img_enc.forward(images), W, labels)


# --- retrieval -------------------------------------------------------------


@dataclass
class TextCorpus:
    """Distinct caption strings and which images each one belongs to."""

    texts: list                 # distinct token tuples
    match: np.ndarray           # N_img x N_text bool
    instance_ids: list          # per image, corpus index of each of its captions

    @classmethod
    def from_captions(cls, captions, groups=None) -> "TextCorpus":
        """Build the corpus from per-image caption lists.

        With ``groups`` (e.g. class labels) a caption matches every image in
        the group of any image that owns it, not only its owners.
        """
        index: dict[tuple, int] = {}
        inst = []
        for caps in captions:
            ids = []
            for c in caps:
                key = tuple(c)
                if key not in index:
                    index[key] = len(index)
                ids.append(index[key])
            inst.append(ids)
        match = np.zeros((len(captions), len(index)), dtype=bool)
        for i, ids in enumerate(inst):
            match[i, ids] = True
        if groups is not None:
            groups = np.asarray(groups)
            for g in np.unique(groups):
                rows = groups == g
                match[rows] = match[rows].any(axis=0)
        return cls(list(index), match, inst)


def retrieval_hits(sim, corpus: TextCorpus, k):
    """Per-query success at k.

    Returns (tr, ir): ``tr[i]`` for image query i over the text corpus, and
    ``ir`` per caption instance (flattened in image order) over the images.
    """
    n_img, n_txt = sim.shape
    if k > n_txt or k > n_img:
        raise ConfigError(f"k={k} exceeds corpus size ({n_img} images, {n_txt} texts)")
    top_t = rank_desc(sim)[:, :k]
    tr = np.take_along_axis(corpus.match, top_t, axis=1).any(axis=1)
    top_i = rank_desc(sim.T)[:, :k]
    ir_text = np.take_along_axis(corpus.match.T, top_i, axis=1).any(axis=1)
    ir = np.array([ir_text[u] for ids in corpus.instance_ids for u in ids], dtype=bool)
    return tr, ir


def retrieval_recalls(img_emb, txt_emb, corpus: TextCorpus, ks=(1, 5, 10)):
    sim = cosine_matrix(img_emb, txt_emb)
    out = {}
    for k in ks:
        tr, ir = retrieval_hits(sim, corpus, k)
        out[f"TR@{k}"] = float(tr.mean())
        out[f"IR@{k}"] = float(ir.mean())
    return out


def retrieval_eval(img_enc, txt_enc, images, captions, ks=(1, 5, 10), groups=None):
    corpus = TextCorpus.from_captions(captions, groups)
    return retrieval_recalls(img_enc.forward(images), txt_enc.forward(corpus.texts), corpus, ks)


# --- attack metrics --------------------------------------------------------


def attack_success_rate(clean_success, adv_success):
    """Fraction of clean successes that fail after the attack (None if none succeed)."""
    clean = np.asarray(clean_success, dtype=bool)
    adv = np.asarray(adv_success, dtype=bool)
    if clean.shape != adv.shape:
        raise ConfigError("clean and adversarial results cover different examples")
    n = int(clean.sum())
    if n == 0:
        return None
    return float((clean & ~adv).sum() / n)


def runner_up(img_emb, W, labels):
    """Most similar guiding vector excluding the true class."""
    sims = cosine_matrix(img_emb, W)
    sims[np.arange(len(sims)), np.asarray(labels)] = -np.inf
    return rank_desc(sims)[:, 0]


def proximity_confusion(clean_emb, adv_emb, W, labels):
    """Rows: clean runner-up class; columns: adversarial prediction.

    Returns (m x m count matrix, fraction of examples on the diagonal).
    """
    m = len(W)
    if m < 2:
        raise ConfigError("proximity confusion needs at least 2 guiding vectors")
    rows = runner_up(clean_emb, W, labels)
    cols = zeroshot_predict(adv_emb, W)
    mat = np.zeros((m, m), dtype=np.int64)
    np.add.at(mat, (rows, cols), 1)
    diag = float(np.trace(mat) / max(len(rows), 1))
    return mat, diag


def transfer_matrix(sources, targets, craft, success):
    """Cross-model attack success rates.

    ``craft(source)`` returns an adversarial artifact; ``success(target, artifact)``
    returns per-example success on ``target`` (``artifact=None`` means clean).
    Cell (s, t) is the ASR on target t of examples crafted on source s.
    """
    clean = [success(t, None) for t in targets]
    mat = np.full((len(sources), len(targets)), np.nan)
    for i, s in enumerate(sources):
        art = craft(s)
        for j, t in enumerate(targets):
            asr = attack_success_rate(clean[j], success(t, art))
            mat[i, j] = np.nan if asr is None else asr
    return mat


DEFAULT_EPS_GRID = (0.5, 1, 2, 4, 8, 16)     # on the 0-255 scale
DEFAULT_STEP_GRID = (1, 3, 7, 10)


def ablation_sweep(run, eps_list=DEFAULT_EPS_GRID, step_list=DEFAULT_STEP_GRID):
    """Evaluate ``run(epsilon, steps) -> metrics`` over the full grid.

    ``eps_list`` is on the 0-255 pixel scale and converted before calling.
    """
    if not len(eps_list) or not len(step_list):
        raise ConfigError("ablation grids must be non-empty")
    grid = []
    for steps in step_list:
        for e in eps_list:
            grid.append({"epsilon_255": float(e), "steps": int(steps),
                         "metrics": run(float(e) / 255, int(steps))})
    return grid
