"""Greedy token-substitution text attack and the text-then-image FGA-T pipeline."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import imgattack, losses
from .errors import ConfigError
from .evalkit import cosine_matrix


@dataclass
class TextAttackConfig:
    budget: int = 1
    candidate_source: str = "synonyms"      # "synonyms" or "knn"
    knn_k: int = 8
    objective: str = "cosine"               # "cosine" or "fused"
    seed: int = 0

    def __post_init__(self):
        if self.budget < 0:
            raise ConfigError("text budget must be >= 0")
        if self.candidate_source not in ("synonyms", "knn"):
            raise ConfigError(f"unknown candidate source {self.candidate_source!r}")
        if self.candidate_source == "knn" and self.knn_k < 1:
            raise ConfigError("knn_k must be >= 1")
        if self.objective not in ("cosine", "fused"):
            raise ConfigError(f"unknown text objective {self.objective!r}")

    def to_json(self):
        return asdict(self)


def candidate_fn(vocab, cfg: TextAttackConfig, txt_enc=None):
    """token id -> ordered list of replacement ids."""
    if cfg.candidate_source == "synonyms":
        return lambda tok: [c for c in vocab.synonyms.get(int(tok), []) if c != tok]
    if txt_enc is None:
        raise ConfigError("knn candidates need the text encoder's token table")
    sims = cosine_matrix(txt_enc.table, txt_enc.table)
    np.fill_diagonal(sims, -np.inf)
    sims[:, vocab.unk_id] = -np.inf
    order = np.argsort(-sims, axis=1, kind="stable")[:, :cfg.knn_k]
    return lambda tok: [int(c) for c in order[int(tok)]]


def cosine_text_objective(txt_enc, e_v):
    """Batched -cos(E_t(t'), e_v) over a list of sequences."""
    e_v = np.asarray(e_v, dtype=np.float64)

    def objective(seqs):
        return -cosine_matrix(txt_enc.forward(list(seqs)), e_v[None])[:, 0]

    return objective


def fused_text_objective(txt_enc, head, e_v, clean_seq):
    """Batched ||fused(e_v, E_t(t')) - fused(e_v, E_t(t))||."""
    e_v = np.asarray(e_v)
    f_clean = head.forward_fused(e_v[None], txt_enc.forward([clean_seq]))[0]

    def objective(seqs):
        seqs = list(seqs)
        e_t = txt_enc.forward(seqs)
        f = head.forward_fused(np.repeat(e_v[None], len(seqs), axis=0), e_t)
        return np.linalg.norm(np.asarray(f, np.float64) - f_clean, axis=1)

    return objective


def _replace(seq, pos, tok):
    out = list(seq)
    out[pos] = int(tok)
    return tuple(out)


def token_importance(seq, objective, unk_id=0):
    """Positions ranked by objective gain when the token becomes unk (ties by position)."""
    seq = tuple(seq)
    if not seq:
        raise ConfigError("cannot rank an empty sequence")
    vals = objective([seq] + [_replace(seq, i, unk_id) for i in range(len(seq))])
    gains = np.asarray(vals[1:], dtype=np.float64) - float(vals[0])
    return [int(i) for i in np.argsort(-gains, kind="stable")]


def greedy_substitute(seq, objective, candidates, budget=1, unk_id=0):
    """Greedy substitution maximising ``objective``.

    Positions are visited in importance order; at each, the best candidate is
    kept only if it strictly improves the current value. Stops after
    ``budget`` substitutions. Returns (new sequence, info dict).
    """
    seq = tuple(int(t) for t in seq)
    info = {"changed": [], "no_candidates": False, "clean_value": None, "value": None}
    current = float(objective([seq])[0])
    info["clean_value"] = info["value"] = current
    if budget <= 0:
        return seq, info
    any_candidates = False
    for pos in token_importance(seq, objective, unk_id):
        if len(info["changed"]) >= budget:
            break
        cands = [c for c in candidates(seq[pos]) if c != seq[pos]]
        if not cands:
            continue
        any_candidates = True
        trial = [_replace(seq, pos, c) for c in cands]
        vals = np.asarray(objective(trial), dtype=np.float64)
        best = int(np.argmax(vals))          # first maximiser on ties
        if vals[best] > current:
            seq, current = trial[best], float(vals[best])
            info["changed"].append(pos)
    info["no_candidates"] = not any_candidates
    info["value"] = current
    return seq, info


def attack_texts(txt_enc, vocab, img_emb, texts, cfg: TextAttackConfig):
    """Per-image adversarial versions of every matched text (cosine objective)."""
    cands = candidate_fn(vocab, cfg, txt_enc)
    out = []
    for e_v, caps in zip(img_emb, texts):
        obj = cosine_text_objective(txt_enc, e_v)
        out.append([greedy_substitute(t, obj, cands, cfg.budget, vocab.unk_id)[0] for t in caps])
    return out


def set_guidance(texts, adv_texts):
    """Union text set T for one minibatch and each image's own-text multiset."""
    index: dict[tuple, int] = {}
    own = []
    for caps, advs in zip(texts, adv_texts):
        ids = []
        for t in list(caps) + list(advs):
            key = tuple(t)
            if key not in index:
                index[key] = len(index)
            ids.append(index[key])
        own.append(ids)
    return list(index), own


def fga_t(img_model, txt_enc, vocab, images, texts, img_cfg, txt_cfg: TextAttackConfig,
          temperature=1.0, example_ids=None):
    """Text attack first, then the set-level image attack on one minibatch.

    ``img_cfg.scales`` and ``img_cfg.momentum`` switch on the augmented and
    momentum variants. Returns (adversarial images, adversarial texts, trace).
    """
    images = np.asarray(images)
    if any(len(c) == 0 for c in texts):
        raise ConfigError("every image needs at least one matched text")
    e_v = img_model.forward(images)
    adv_texts = attack_texts(txt_enc, vocab, e_v, texts, txt_cfg)
    union, own = set_guidance(texts, adv_texts)
    W = txt_enc.forward(union)
    emb_obj = losses.gui_objective(W, own, temperature)
    adv, trace = imgattack.pgd_attack(losses.image_objective(img_model, emb_obj), images,
                                      img_cfg, example_ids)
    return adv, adv_texts, trace


def fga_t_fused(img_enc, txt_enc, head, vocab, images, texts, labels, img_cfg,
                txt_cfg: TextAttackConfig, temperature=1.0, example_ids=None):
    """After-fusion variant: attack each text on the fused embedding, then run
    FGA on the text-conditioned image encoder with the head weights as guides."""
    from .models import FusedImageModel

    images = np.asarray(images)
    cands = candidate_fn(vocab, txt_cfg, txt_enc)
    e_v = img_enc.forward(images)
    adv_texts = []
    for ev, t in zip(e_v, texts):
        obj = fused_text_objective(txt_enc, head, ev, t)
        adv_texts.append(greedy_substitute(t, obj, cands, txt_cfg.budget, vocab.unk_id)[0])
    model = FusedImageModel(img_enc, head, txt_enc.forward(adv_texts))
    emb_obj = losses.gui_objective(head.head_w.T, [[int(y)] for y in labels], temperature)
    adv, trace = imgattack.pgd_attack(losses.image_objective(model, emb_obj), images,
                                      img_cfg, example_ids)
    return adv, adv_texts, trace
