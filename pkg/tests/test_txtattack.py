import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgakit import models, synthdata, txtattack
from fgakit.errors import ConfigError
from fgakit.imgattack import AttackConfig, fga
from fgakit.guidance import GuidanceSet


def table_objective(values):
    """Objective summing a per-(position, token) score table: easy to brute force."""
    def objective(seqs):
        return np.array([sum(values[i][t] for i, t in enumerate(s)) for s in seqs], dtype=float)
    return objective


def test_config_validation():
    with pytest.raises(ConfigError):
        txtattack.TextAttackConfig(budget=-1)
    with pytest.raises(ConfigError):
        txtattack.TextAttackConfig(candidate_source="lm")
    with pytest.raises(ConfigError):
        txtattack.TextAttackConfig(objective="other")


def test_token_importance_examples():
    assert txtattack.token_importance((3,), table_objective([[0, 0, 0, 1]])) == [0]
    vals = [[5, 0, 2], [0, 1, 9]]
    obj = table_objective(vals)
    # gains: pos0 -> 5 - 2 = 3, pos1 -> 0 - 9 = -9
    assert txtattack.token_importance((2, 2), obj) == [0, 1]
    with pytest.raises(ConfigError):
        txtattack.token_importance((), obj)


def test_zero_embedding_token_has_zero_importance():
    # mean pooling over a token whose embedding row equals the unk row leaves the output unchanged
    txt = models.TextEncoder(5, dim=3, token_dim=3, hidden=(4,), seed=0)
    txt.table[2] = txt.table[0]
    e_v = np.ones(3)
    obj = txtattack.cosine_text_objective(txt, e_v)
    seq = (1, 2, 3)
    base = obj([seq])[0]
    assert obj([(1, 0, 3)])[0] == pytest.approx(base)


def test_two_token_orthogonal_importance_matches_direct():
    txt = models.TextEncoder(4, dim=2, token_dim=2, hidden=(), normalize=False, seed=0)
    txt.table[:] = [[0, 0], [1, 0], [0, 1], [0, 0]]
    txt.mlp.weights[0][:] = np.eye(2)
    obj = txtattack.cosine_text_objective(txt, np.array([1.0, 0.2]))
    seq = (1, 2)
    direct = [obj([(0, 2)])[0] - obj([seq])[0], obj([(1, 0)])[0] - obj([seq])[0]]
    assert txtattack.token_importance(seq, obj) == list(np.argsort(-np.array(direct), kind="stable"))


def test_budget_zero_and_self_synonym():
    obj = table_objective([[0, 1, 2], [0, 1, 2]])
    seq, info = txtattack.greedy_substitute((0, 0), obj, lambda t: [1, 2], budget=0)
    assert seq == (0, 0) and info["changed"] == []
    seq, info = txtattack.greedy_substitute((2, 2), obj, lambda t: [t], budget=2)
    assert seq == (2, 2) and info["no_candidates"]
    seq, _ = txtattack.greedy_substitute((1, 1), obj, lambda t: [t, 0], budget=2)
    assert seq == (1, 1)


def test_two_candidate_hand_case():
    vals = [[0, 3, 5, 1], [0, 0, 0, 0]]
    seq, info = txtattack.greedy_substitute((1, 0), table_objective(vals), lambda t: [2, 3], budget=1)
    assert seq == (2, 0) and info["value"] == 5


def brute_force(seq, objective, vocab_size):
    best = objective([seq])[0]
    for cand in itertools.product(range(1, vocab_size), repeat=len(seq)):
        best = max(best, objective([cand])[0])
    return best


@settings(max_examples=60)
@given(st.integers(1, 2), st.integers(0, 10 ** 6))
def test_greedy_matches_brute_force_on_short_texts(n, seed):
    # separable objective: greedy with full budget and exhaustive candidates is optimal
    rng = np.random.default_rng(seed)
    V = 5
    vals = rng.normal(size=(n, V)).tolist()
    obj = table_objective(vals)
    seq = tuple(int(t) for t in rng.integers(1, V, size=n))
    cands = lambda t: [c for c in range(1, V) if c != t]
    out, info = txtattack.greedy_substitute(seq, obj, cands, budget=n)
    assert info["value"] == pytest.approx(brute_force(seq, obj, V))


@settings(max_examples=60)
@given(st.integers(1, 6), st.integers(0, 4), st.integers(0, 10 ** 6))
def test_greedy_monotone_and_within_budget(n, budget, seed):
    rng = np.random.default_rng(seed)
    V = 6
    obj = table_objective(rng.normal(size=(n, V)).tolist())
    seq = tuple(int(t) for t in rng.integers(1, V, size=n))
    out, info = txtattack.greedy_substitute(seq, obj, lambda t: [c for c in range(1, V)], budget=budget)
    assert obj([out])[0] >= obj([seq])[0]
    assert sum(a != b for a, b in zip(out, seq)) <= budget


def test_candidate_sources():
    vocab = synthdata.build_vocab(["cat", "dog"])
    syn = txtattack.candidate_fn(vocab, txtattack.TextAttackConfig())
    assert syn(vocab.id("cat"))[0] == vocab.id("dog")
    txt = models.TextEncoder(len(vocab), dim=3, token_dim=4, hidden=(3,), seed=0)
    knn = txtattack.candidate_fn(vocab, txtattack.TextAttackConfig(candidate_source="knn", knn_k=3), txt)
    c = knn(vocab.id("cat"))
    assert len(c) == 3 and vocab.id("cat") not in c and vocab.unk_id not in c
    with pytest.raises(ConfigError):
        txtattack.candidate_fn(vocab, txtattack.TextAttackConfig(candidate_source="knn"))


def test_set_guidance_union_and_multiset():
    texts = [[(1, 2), (3,)], [(1, 2)]]
    adv = [[(1, 2), (4,)], [(5, 2)]]
    union, own = txtattack.set_guidance(texts, adv)
    assert union == [(1, 2), (3,), (4,), (5, 2)]
    assert own == [[0, 1, 0, 2], [0, 3]]


def test_fga_t_identity_at_zero_budget(toy):
    data, img, txt = toy
    cfg = AttackConfig(epsilon=0)
    adv, adv_texts, _ = txtattack.fga_t(img, txt, data.vocab, data.images[:5], data.captions[:5],
                                        cfg, txtattack.TextAttackConfig(budget=0))
    assert np.array_equal(adv, data.images[:5])
    assert adv_texts == [list(c) for c in data.captions[:5]]


def test_fga_t_reduces_to_fga_for_single_pair(toy):
    data, img, txt = toy
    v = data.images[:1]
    texts = [data.captions[0][:1]]
    cfg = AttackConfig(epsilon=4 / 255, steps=3)
    adv, adv_texts, _ = txtattack.fga_t(img, txt, data.vocab, v, texts, cfg, txtattack.TextAttackConfig())
    t, t_adv = texts[0][0], adv_texts[0][0]
    union = [t] if t_adv == t else [t, t_adv]
    W = txt.forward(union)
    labels = [[0, 0]] if t_adv == t else [[0, 1]]
    ref, _ = fga(img, v, GuidanceSet(W, labels), cfg)
    assert np.array_equal(adv, ref)


def test_text_attack_lowers_cosine(toy):
    data, img, txt = toy
    e_v = img.forward(data.images[:8])
    adv = txtattack.attack_texts(txt, data.vocab, e_v, data.captions[:8], txtattack.TextAttackConfig())
    for ev, caps, advs in zip(e_v, data.captions[:8], adv):
        obj = txtattack.cosine_text_objective(txt, ev)
        assert np.all(obj(advs) >= obj(caps))


def test_fga_t_fused_runs_and_respects_budget(toy):
    data, img, txt = toy
    head = models.FusionHead(img.dim, txt.dim, fused_dim=8, hidden=(8,), num_classes=2, seed=0)
    texts = [c[0] for c in data.captions[:4]]
    cfg = AttackConfig(epsilon=2 / 255, steps=2)
    adv, adv_texts, trace = txtattack.fga_t_fused(img, txt, head, data.vocab, data.images[:4], texts,
                                                 [1, 1, 1, 1], cfg, txtattack.TextAttackConfig())
    assert np.abs(adv - data.images[:4]).max() <= 2 / 255 + 1e-6
    assert all(sum(a != b for a, b in zip(t, u)) <= 1 for t, u in zip(texts, adv_texts))
