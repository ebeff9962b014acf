import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fgakit import imgattack, losses, numkit
from fgakit.errors import AttackError, ConfigError
from fgakit.guidance import GuidanceSet, class_mean_guidance, prompt_guidance
from fgakit.imgattack import AttackConfig, MomentumState, PatchSpec
from helpers import LinearEncoder

SHAPE = (1, 4, 4)


def linear_setup(seed=0, B=3, d=4):
    rng = np.random.default_rng(seed)
    enc = LinearEncoder(rng.normal(size=(16, d)), SHAPE)
    v = rng.uniform(0.2, 0.8, size=(B,) + SHAPE)
    return rng, enc, v


# --- directions and projections ------------------------------------------


def test_steepest_dir_examples():
    assert np.array_equal(imgattack.steepest_dir(np.array([0.2, -0.3, 0.0]), "inf"), [1, -1, 0])
    assert np.allclose(imgattack.steepest_dir(np.array([3.0, 4.0]), 2), [0.6, 0.8])
    d = imgattack.steepest_dir(np.array([0.1, -0.5, 0.3, 0.05]), 1, 50)
    assert np.allclose(d, [1 / 3, -1 / 3, 1 / 3, 0])
    assert not np.any(imgattack.steepest_dir(np.zeros(3), 2))
    assert not np.any(imgattack.steepest_dir(np.zeros(3), 1))


vecs = arrays(np.float64, st.integers(1, 4), elements=st.floats(-5, 5))


@settings(max_examples=60)
@given(vecs, st.sampled_from([2, "inf"]), st.integers(0, 10 ** 6))
def test_steepest_dir_beats_random_directions(g, p, seed):
    d = imgattack.steepest_dir(g, p)
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(10_000, len(g)))
    u /= np.linalg.norm(u, axis=1, ord=2 if p == 2 else np.inf, keepdims=True)
    assert (u @ g).max() <= d @ g + 1e-9


def test_l1_direction_respects_sparsity_pattern():
    rng = np.random.default_rng(0)
    g = rng.normal(size=20)
    d = imgattack.steepest_dir(g, 1, 90)
    active = d != 0
    assert np.abs(d).sum() == pytest.approx(1)
    assert np.all(np.abs(g[active]) >= np.abs(g[~active]).max())
    # nearest rank of q=90 over 20 entries is the 18th smallest: 3 survive
    assert active.sum() == 3
    assert np.allclose(d[active], np.sign(g[active]) / 3)


def test_project_examples():
    assert np.allclose(imgattack.project(np.array([0.5, -0.05]), 0.1, "inf"), [0.1, -0.05])
    assert np.allclose(imgattack.project(np.array([6.0, 8.0]), 5, 2), [3, 4])
    assert np.allclose(imgattack.project(np.array([2.0, 1.0]), 1, 1), [1, 0])
    assert np.array_equal(imgattack.project(np.array([0.2, 0.1]), 1, 1), [0.2, 0.1])
    assert not np.any(imgattack.project(np.array([2.0, 1.0]), 0, 1))


def l1_qp_oracle(x, eps):
    """Nearest l1-ball point by bisection on the soft-threshold level."""
    a = np.abs(x)
    if a.sum() <= eps:
        return x
    lo, hi = 0.0, a.max()
    for _ in range(200):
        mid = (lo + hi) / 2
        if np.maximum(a - mid, 0).sum() > eps:
            lo = mid
        else:
            hi = mid
    return np.sign(x) * np.maximum(a - hi, 0)


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-3, 3)), st.floats(0.01, 4))
def test_project_l1_matches_bisection_oracle(x, eps):
    assert np.allclose(imgattack.project(x, eps, 1), l1_qp_oracle(x, eps), atol=1e-9)


@settings(max_examples=100)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-3, 3)), st.floats(0, 4),
       st.sampled_from([1, 2, "inf"]))
def test_project_idempotent_and_inside(x, eps, p):
    once = imgattack.project(x, eps, p)
    assert numkit.lp_norm(once, p) <= eps + 1e-9
    assert np.allclose(imgattack.project(once, eps, p), once, atol=1e-12)


def test_batch_project_per_example():
    x = np.array([[[3.0, 4.0]], [[0.3, 0.4]]])
    out = imgattack.batch_project(x, 1.0, 2)
    assert np.allclose(out, [[[0.6, 0.8]], [[0.3, 0.4]]])


# --- momentum ---------------------------------------------------------------


def test_momentum_hand_trace():
    g = np.array([2.0, -2.0])
    st_ = MomentumState.zeros_like(g)
    first = imgattack.momentum_transform(g, st_, 1.0)
    assert np.allclose(first, [1, -1])
    second = imgattack.momentum_transform(g, st_, 1.0)
    assert np.allclose(second, [2, -2])
    st0 = MomentumState.zeros_like(g)
    for _ in range(3):
        assert np.allclose(imgattack.momentum_transform(g, st0, 0.0), [1, -1])


def test_momentum_zero_gradient_passthrough():
    st_ = MomentumState.zeros_like(np.zeros(3))
    assert not np.any(imgattack.momentum_transform(np.zeros(3), st_, 1.0))
    with pytest.raises(ConfigError):
        imgattack.momentum_transform(np.zeros(2), st_, 1.0)


def test_momentum_is_per_example():
    g = np.array([[1.0, -1.0], [4.0, 4.0]])
    st_ = MomentumState.zeros_like(g)
    assert np.allclose(imgattack.momentum_transform(g, st_, 1.0), [[1, -1], [1, 1]])


# --- pgd ---------------------------------------------------------------------


def test_config_validation():
    for bad in (dict(epsilon=-1), dict(steps=0), dict(alpha=0), dict(q_percentile=101),
                dict(norm="3"), dict(momentum_mu=-1), dict(scales=())):
        with pytest.raises(ConfigError):
            AttackConfig(**bad)
    cfg = AttackConfig(epsilon=0.1, steps=4)
    assert cfg.step_size == pytest.approx(2.5 * 0.1 / 4)
    assert AttackConfig(scales=(0.5,)).scale_set == (1.0, 0.5)
    assert AttackConfig(scales=(0.5,), include_identity_scale=False).scale_set == (0.5,)


def test_zero_budget_identity():
    rng, enc, v = linear_setup()
    obj = losses.image_objective(enc, losses.gui_objective(rng.normal(size=(3, 4)), [[0]] * 3))
    for p in ("inf", "2", "1"):
        adv, trace = imgattack.pgd_attack(obj, v, AttackConfig(norm=p, epsilon=0, random_start=True))
        assert np.array_equal(adv, v)
        assert trace.losses.shape == (10, 3) and trace.iterations == 10


def test_fgsm_reduction():
    rng, enc, v = linear_setup(1)
    W = rng.normal(size=(3, 4))
    obj = losses.image_objective(enc, losses.gui_objective(W, [[0], [1], [2]]))
    eps = 0.05
    adv, _ = imgattack.pgd_attack(obj, v, AttackConfig(epsilon=eps, steps=1, alpha=0.2))
    _, g = obj(v)
    assert np.allclose(adv, np.clip(v + eps * np.sign(g), 0, 1))


def test_trace_and_budget_all_norms():
    rng, enc, v = linear_setup(2)
    obj = losses.image_objective(enc, losses.gui_objective(rng.normal(size=(3, 4)), [[0]] * 3))
    for p, eps in (("inf", 0.03), ("2", 0.2), ("1", 1.0)):
        cfg = AttackConfig(norm=p, epsilon=eps, steps=7, momentum=True, scales=(0.5, 1.5))
        adv, trace = imgattack.pgd_attack(obj, v, cfg)
        assert len(trace.losses) == 7
        assert trace.norms[p].max() <= eps + 1e-6
        assert adv.min() >= 0 and adv.max() <= 1
        assert set(trace.summary()) == {"iterations", "mean_initial_loss", "mean_final_loss", "max_norms"}


def test_fga_reduces_dot_with_guided_vector():
    rng = np.random.default_rng(3)
    enc = LinearEncoder(rng.normal(size=(16, 2)), SHAPE)
    v = rng.uniform(0.3, 0.7, size=(4,) + SHAPE)
    G = GuidanceSet(np.eye(2), [[0]] * 4)
    adv, _ = imgattack.fga(enc, v, G, AttackConfig(epsilon=0.05, steps=5))
    assert np.all(enc.forward(adv)[:, 0] < enc.forward(v)[:, 0])


def test_fda_moves_away_from_clean():
    rng, enc, v = linear_setup(4)
    adv, _ = imgattack.fda(enc, v, AttackConfig(epsilon=0.05, steps=5))
    e0 = enc.forward(v)
    assert np.all((enc.forward(adv) * e0).sum(1) < (e0 * e0).sum(1))


def test_nonfinite_raises_with_iteration():
    calls = {"n": 0}

    def obj(x):
        calls["n"] += 1
        g = np.ones_like(x)
        return (np.array([np.nan]) if calls["n"] == 3 else np.zeros(len(x))), g

    with pytest.raises(AttackError, match="iteration 2"):
        imgattack.pgd_attack(obj, np.full((1,) + SHAPE, 0.5), AttackConfig())


def test_random_start_keyed_by_example_id():
    rng, enc, v = linear_setup(5, B=4)
    obj = lambda x: (np.zeros(len(x)), np.zeros_like(x))
    cfg = AttackConfig(epsilon=0.05, steps=1, random_start=True, seed=3)
    full, _ = imgattack.pgd_attack(obj, v, cfg, example_ids=[10, 11, 12, 13])
    part, _ = imgattack.pgd_attack(obj, v[2:], cfg, example_ids=[12, 13])
    assert np.array_equal(full[2:], part)
    assert not np.array_equal(full, v)


def test_final_loss_not_below_initial_on_trained_model(default_run):
    _, train, test, img, _ = default_run
    G = class_mean_guidance(img, train).with_labels([[int(y)] for y in test.labels])
    _, trace = imgattack.fga(img, test.images, G, AttackConfig())
    assert np.mean(trace.final_loss >= trace.losses[0]) >= 0.95


def test_pgd_bit_identical_repeat(default_run):
    _, train, test, img, _ = default_run
    G = class_mean_guidance(img, train).with_labels([[int(y)] for y in test.labels])
    cfg = AttackConfig(momentum=True, scales=imgattack.DEFAULT_SCALES, random_start=True, seed=2)
    a, _ = imgattack.fga(img, test.images[:20], G.with_labels(G.labels[:20]), cfg)
    b, _ = imgattack.fga(img, test.images[:20], G.with_labels(G.labels[:20]), cfg)
    assert a.tobytes() == b.tobytes()


# --- patches ------------------------------------------------------------------


def test_patch_spec():
    p = PatchSpec.square(8, 8, 2, 3, 2)
    assert p.mask.sum() == 4 and p.mask[2:4, 3:5].all() and p.area_fraction == 4 / 64
    with pytest.raises(ConfigError):
        PatchSpec.square(8, 8, 7, 7, 2)
    with pytest.raises(ConfigError):
        PatchSpec(np.full((2, 2), 2))
    assert imgattack.patch_side(32, 32, 0.02) == 5
    assert imgattack.patch_side(4, 4, 0.02) == 1
    m = imgattack.random_masks(3, 16, 16, 0.02, seed=1)
    assert m.shape == (3, 16, 16) and all(x.sum() == 4 for x in m)
    assert np.array_equal(imgattack.random_masks(1, 16, 16, 0.02, seed=1, example_ids=[2])[0], m[2])


def test_patch_purity_and_empty_mask():
    rng, enc, v = linear_setup(6)
    obj = losses.image_objective(enc, losses.gui_objective(rng.normal(size=(3, 4)), [[0]] * 3))
    masks = imgattack.random_masks(3, 4, 4, 0.25, seed=0)
    adv, trace = imgattack.patch_attack(obj, v, masks, steps=10)
    outside = ~np.broadcast_to(masks[:, None].astype(bool), v.shape)
    assert np.array_equal(adv[outside], v[outside])
    assert not np.array_equal(adv, v)
    same, tr = imgattack.patch_attack(obj, v, np.zeros((4, 4)), steps=5)
    assert np.array_equal(same, v) and tr.iterations == 0


def test_full_mask_patch_is_clamped_sign_ascent():
    rng, enc, v = linear_setup(7, B=1)
    W = rng.normal(size=(3, 4))
    obj = losses.image_objective(enc, losses.gui_objective(W, [[0]]))
    adv, _ = imgattack.patch_attack(obj, v, np.ones((4, 4)), steps=200, alpha=8 / 255)
    # a linear encoder has a constant gradient sign per pixel only while the
    # softmax weights do not flip it; every pixel must end in [0, 1]
    assert adv.min() >= 0 and adv.max() <= 1
    assert np.mean((adv == 0) | (adv == 1)) > 0.5


def test_raw_gradient_patch_variant():
    rng, enc, v = linear_setup(8, B=1)
    obj = lambda x: (np.zeros(len(x)), np.full_like(x, 0.01))
    adv, _ = imgattack.patch_attack(obj, v, np.ones((4, 4)), steps=3, raw_gradient=True)
    assert np.allclose(adv, np.clip(v + 0.03, 0, 1))


def test_targeted_patch_pulls_toward_target(default_run):
    _, _, test, img, txt = default_run
    W = prompt_guidance(txt, test.class_names, test.vocab).W
    v = test.images[:30]
    targets = (test.labels[:30] + 1) % len(W)
    masks = imgattack.random_masks(30, *v.shape[-2:], 0.02, seed=0)
    adv, _ = imgattack.fga_targeted_patch(img, v, W, targets, masks)
    def cos(x):
        e = img.forward(x)
        return (e * W[targets]).sum(1) / np.linalg.norm(e, axis=1) / np.linalg.norm(W[targets], axis=1)
    assert np.all(cos(adv) > cos(v))


def test_fga_targeted_increases_target_logprob():
    rng, enc, v = linear_setup(9)
    W = rng.normal(size=(3, 4))
    targets = [2, 0, 1]
    adv, trace = imgattack.fga_targeted(enc, v, W, targets, AttackConfig(epsilon=0.05, steps=5))
    assert np.all(trace.final_loss > trace.losses[0])
