"""Experiment orchestration shared by the CLI and the acceptance checks.

Work over examples is split into fixed-size chunks (``attack.batch_size``)
that may run on a thread pool; chunk boundaries never depend on the thread
count, so results are identical for any ``threads`` value.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import evalkit, guidance, imgattack, models, synthdata, txtattack
from .config import AttackSection, RunConfig
from .errors import ConfigError
from .numkit import RngStream

log = logging.getLogger(__name__)

# sub-stream ids hanging off the master seed
STREAM_DATA, STREAM_MODEL_A, STREAM_MODEL_B, STREAM_ATTACK, STREAM_MASKS = 1, 2, 3, 4, 5


def derive_seed(master: int, stream: int) -> int:
    return int(RngStream(int(master), stream).generator().integers(0, 2 ** 31 - 1))


def _bounds(n, chunk):
    return [(s, min(s + chunk, n)) for s in range(0, n, chunk)]


def chunked_map(fn, n, chunk, threads=1):
    """``[fn(start, stop) for each chunk]`` in chunk order."""
    bounds = _bounds(n, chunk)
    if threads <= 1 or len(bounds) <= 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))


# --- data and models -------------------------------------------------------


def build_dataset(cfg: RunConfig) -> synthdata.PairedDataset:
    d = cfg.data
    if d.source == "cifar10":
        data = synthdata.load_cifar10(d.cifar_path)
        if d.cifar_limit is not None:
            data = data.subset(np.arange(min(d.cifar_limit, len(data))))
        return data
    return synthdata.gen_dataset(
        d.num_classes, d.per_class, tuple(d.shape), d.noise_sigma,
        seed=derive_seed(cfg.seed, STREAM_DATA), captions_per_image=d.captions_per_image,
        contrast=d.contrast,
    )


def load_or_build_dataset(cfg: RunConfig):
    if cfg.inputs.dataset:
        return synthdata.load_dataset(cfg.inputs.dataset)
    return build_dataset(cfg)


def split(cfg: RunConfig, data):
    return synthdata.split_dataset(data, cfg.data.test_per_class)


def train_models(cfg: RunConfig, train_data, which="a"):
    """Train one image/text encoder pair; ``which`` picks the architecture and seed."""
    m, t = cfg.model, cfg.train
    stream = STREAM_MODEL_A if which == "a" else STREAM_MODEL_B
    seed = derive_seed(cfg.seed, stream)
    hidden = m.image_hidden if which == "a" else m.image_hidden_b
    img = models.ImageEncoder(train_data.images.shape[1:], dim=m.dim, hidden=hidden,
                              normalize=m.normalize, seed=seed)
    txt = models.TextEncoder(len(train_data.vocab), dim=m.dim, token_dim=m.token_dim,
                             hidden=m.text_hidden, normalize=m.normalize, seed=seed)
    history = []
    models.train_itc(img, txt, train_data, epochs=t.epochs, lr=t.lr, temperature=t.temperature,
                     batch_size=t.batch_size, seed=seed, history=history)
    return img, txt, history


# --- guidance and attacks --------------------------------------------------


def build_guidance(kind, img, txt, data, acfg: AttackSection, reference=None):
    """Guidance for attacking ``data``; ``reference`` supplies class means if given."""
    if kind == "captions":
        return guidance.dataset_text_guidance(txt, data)
    if kind == "class_mean":
        G = guidance.class_mean_guidance(img, reference if reference is not None else data)
        return G.with_labels([[int(y)] for y in data.labels])
    if kind == "prompt":
        G = guidance.prompt_guidance(txt, data.class_names, data.vocab)
        return G.with_labels([[int(y)] for y in data.labels])
    if kind in ("topk", "topk_union"):
        base = guidance.dataset_text_guidance(txt, data)
        k = min(acfg.topk, base.m - 1)
        return guidance.topk_guidance(img, base, data.images, k, union=kind == "topk_union")
    raise ConfigError(f"unknown guidance kind {kind!r}")


def _sub(G, idx):
    return guidance.GuidanceSet(G.W, [G.labels[i] for i in idx], G.source, G.names)


def run_attack(cfg: RunConfig, img, txt, data, method=None, reference=None, threads=None):
    """Attack every example of ``data`` with ``method`` (default: config's).

    Returns a dict with ``images``, ``texts`` (per-image caption lists, possibly
    adversarial), ``targets`` (targeted methods) and per-example loss traces.
    """
    acfg = cfg.attack
    method = method or acfg.method
    threads = cfg.threads if threads is None else threads
    seed = derive_seed(cfg.seed, STREAM_ATTACK)
    icfg = acfg.image_config(seed, method)
    n = len(data)
    h, w = data.images.shape[-2:]
    K = data.num_classes
    targets = (data.labels + acfg.target_offset) % K
    G = None
    if method in ("fga", "fga_patch"):
        G = build_guidance(acfg.guidance, img, txt, data, acfg, reference)
    W_prompt = None
    if method in ("fga_targeted", "fga_targeted_patch"):
        W_prompt = guidance.prompt_guidance(txt, data.class_names, data.vocab).W
    mask_seed = derive_seed(cfg.seed, STREAM_MASKS)
    # minibatches are seeded random subsets, as a shuffled loader would give;
    # set-level guidance needs classes mixed within a batch
    order = RngStream(seed, 1).generator().permutation(n)

    def work(a, b):
        idx = order[a:b]
        v = data.images[idx]
        ids = [int(i) for i in idx]
        texts = None
        if method == "fga":
            adv, tr = imgattack.fga(img, v, _sub(G, idx), icfg, acfg.temperature, ids)
        elif method == "fda":
            adv, tr = imgattack.fda(img, v, icfg, ids)
        elif method in ("fga_t", "fga_t_aug", "mfga_t_aug"):
            adv, texts, tr = txtattack.fga_t(img, txt, data.vocab, v, [data.captions[i] for i in idx], icfg,
                                             acfg.text_config(seed), acfg.temperature, ids)
        elif method == "fga_targeted":
            adv, tr = imgattack.fga_targeted(img, v, W_prompt, targets[idx], icfg,
                                             acfg.temperature, ids)
        else:
            masks = imgattack.random_masks(len(idx), h, w, acfg.patch_area, mask_seed, ids)
            if method == "fga_patch":
                adv, tr = imgattack.fga_patch(img, v, _sub(G, idx), masks, acfg.patch_steps,
                                              acfg.patch_alpha, acfg.temperature)
            else:
                adv, tr = imgattack.fga_targeted_patch(img, v, W_prompt, targets[idx], masks,
                                                       acfg.patch_steps, acfg.patch_alpha,
                                                       acfg.temperature)
        return adv, texts, tr

    parts = chunked_map(work, n, acfg.batch_size, threads)
    adv = data.images.copy()
    first, final = np.zeros(n), np.zeros(n)
    texts = [list(c) for c in data.captions]
    for (a, b), (x, t, tr) in zip(_bounds(n, acfg.batch_size), parts):
        idx = order[a:b]
        adv[idx] = x
        first[idx] = tr.losses[0]
        final[idx] = tr.final_loss
        if t is not None:
            for i, caps in zip(idx, t):
                texts[i] = list(caps)
    return {
        "method": method,
        "images": adv,
        "texts": texts,
        "targets": targets if method in ("fga_targeted", "fga_targeted_patch") else None,
        "initial_loss": first,
        "final_loss": final,
        "zero_budget": method not in ("fga_patch", "fga_targeted_patch") and acfg.epsilon == 0,
        "image_config": icfg.to_json(),
    }


# --- metrics ---------------------------------------------------------------


def retrieval_hits(img, txt, images, captions, labels, k=1):
    corpus = evalkit.TextCorpus.from_captions(captions, labels)
    sim = evalkit.cosine_matrix(img.forward(images), txt.forward(corpus.texts))
    return evalkit.retrieval_hits(sim, corpus, k)


def retrieval(img, txt, images, captions, labels, ks=(1, 5, 10)):
    corpus = evalkit.TextCorpus.from_captions(captions, labels)
    ks = [k for k in ks if k <= min(len(images), len(corpus.texts))]
    return evalkit.retrieval_recalls(img.forward(images), txt.forward(corpus.texts), corpus, ks)


def centroid_accuracy(img, reference, images, labels):
    """Top-1 accuracy of the nearest class-mean classifier built on ``reference``."""
    W = guidance.class_mean_guidance(img, reference).W
    return float((evalkit.zeroshot_predict(img.forward(images), W) == labels).mean())


def evaluate(cfg: RunConfig, img, txt, data, adv_images=None, adv_texts=None):
    """Clean metrics, plus post-attack metrics and ASR when an attack is given."""
    ks = tuple(cfg.eval.ks)
    W = guidance.prompt_guidance(txt, data.class_names, data.vocab).W
    out = {"clean": {"zeroshot": evalkit.zeroshot_scores(img.forward(data.images), W, data.labels),
                     "retrieval": retrieval(img, txt, data.images, data.captions, data.labels, ks)}}
    if adv_images is None:
        return out
    texts = adv_texts if adv_texts is not None else data.captions
    out["adversarial"] = {
        "zeroshot": evalkit.zeroshot_scores(img.forward(adv_images), W, data.labels),
        "retrieval": retrieval(img, txt, adv_images, texts, data.labels, ks),
    }
    c_tr, c_ir = retrieval_hits(img, txt, data.images, data.captions, data.labels)
    a_tr, a_ir = retrieval_hits(img, txt, adv_images, texts, data.labels)
    c_zs = evalkit.zeroshot_predict(img.forward(data.images), W) == data.labels
    a_zs = evalkit.zeroshot_predict(img.forward(adv_images), W) == data.labels
    out["asr"] = {"TR@1": evalkit.attack_success_rate(c_tr, a_tr),
                  "IR@1": evalkit.attack_success_rate(c_ir, a_ir),
                  "top1": evalkit.attack_success_rate(c_zs, a_zs)}
    return out


# --- experiment protocols --------------------------------------------------


def with_attack(cfg: RunConfig, **changes) -> RunConfig:
    return cfg.model_copy(update={"attack": cfg.attack.model_copy(update=changes)})


def setup(cfg: RunConfig, pair=False):
    data = load_or_build_dataset(cfg)
    train, test = split(cfg, data)
    a = train_models(cfg, train, "a")
    b = train_models(cfg, train, "b") if pair else None
    return train, test, a, b


def fga_vs_fda(cfg: RunConfig):
    """Nearest-centroid accuracy after class-mean FGA versus FDA at equal budget."""
    train, test, (img, txt, _), _ = setup(cfg)
    fga = run_attack(with_attack(cfg, guidance="class_mean"), img, txt, test, "fga", reference=train)
    fda = run_attack(cfg, img, txt, test, "fda")
    acc = lambda x: centroid_accuracy(img, train, x, test.labels)
    return {"clean_top1": acc(test.images), "fga_top1": acc(fga["images"]),
            "fda_top1": acc(fda["images"])}


def fgat_vs_fga(cfg: RunConfig):
    """Post-attack R@1 of FGA (caption guidance) and FGA-T on one seed."""
    _, test, (img, txt, _), _ = setup(cfg)
    out = {}
    for method in ("fga", "fga_t"):
        res = run_attack(cfg, img, txt, test, method)
        out[method] = retrieval(img, txt, res["images"], res["texts"], test.labels, (1,))
    out["clean"] = retrieval(img, txt, test.images, test.captions, test.labels, (1,))
    return out


def transfer(cfg: RunConfig, methods=None):
    """Source/target ASR (TR@1 and IR@1) for models A and B, per method."""
    _, test, a, b = setup(cfg, pair=True)
    pairs = {"A": a[:2], "B": b[:2]}
    methods = list(methods or cfg.transfer.methods)
    out = {"models": ["A", "B"], "methods": {}}
    for method in methods:
        crafted = {name: run_attack(cfg, m[0], m[1], test, method) for name, m in pairs.items()}
        cell = {}
        for direction, idx in (("TR@1", 0), ("IR@1", 1)):

            def success(target, art, idx=idx):
                t_img, t_txt = pairs[target]
                if art is None:
                    return retrieval_hits(t_img, t_txt, test.images, test.captions, test.labels)[idx]
                return retrieval_hits(t_img, t_txt, art["images"], art["texts"], test.labels)[idx]

            mat = evalkit.transfer_matrix(["A", "B"], ["A", "B"], lambda s: crafted[s], success)
            cell[direction] = mat.tolist()
        cross = {d: [cell[d][0][1], cell[d][1][0]] for d in ("TR@1", "IR@1")}
        cell["mean_cross"] = {d: float(np.nanmean(v)) for d, v in cross.items()}
        cell["mean_cross"]["both"] = float(np.nanmean(cross["TR@1"] + cross["IR@1"]))
        out["methods"][method] = cell
    return out


def proximity(cfg: RunConfig):
    """Untargeted FGA against prompt guidance and the runner-up confusion matrix."""
    c = with_attack(cfg, guidance="prompt")
    _, test, (img, txt, _), _ = setup(c)
    res = run_attack(c, img, txt, test, "fga")
    W = guidance.prompt_guidance(txt, test.class_names, test.vocab).W
    mat, diag = evalkit.proximity_confusion(img.forward(test.images), img.forward(res["images"]),
                                            W, test.labels)
    m = len(W)
    return {"matrix": mat.tolist(), "diagonal_mass": diag, "null": 1 / (m - 1), "gate": 3 / (m - 1)}


def ablation(cfg: RunConfig):
    """R@1 over the epsilon grid at one step and the step grid at a small epsilon."""
    _, test, (img, txt, _), _ = setup(cfg)
    ab = cfg.ablate

    def run(eps, steps):
        res = run_attack(with_attack(cfg, epsilon=eps, steps=steps), img, txt, test, ab.method)
        return retrieval(img, txt, res["images"], res["texts"], test.labels, (1,))

    eps_grid = evalkit.ablation_sweep(run, ab.eps_255, [1])
    step_grid = evalkit.ablation_sweep(run, [ab.step_sweep_eps_255], ab.steps)
    clean = retrieval(img, txt, test.images, test.captions, test.labels, (1,))
    return {"clean": clean, "epsilon_sweep": eps_grid, "step_sweep": step_grid}


def targeted_patch(cfg: RunConfig):
    """Share of examples whose cosine to the target prompt rises under the patch attack."""
    _, test, (img, txt, _), _ = setup(cfg)
    res = run_attack(cfg, img, txt, test, "fga_targeted_patch")
    W = guidance.prompt_guidance(txt, test.class_names, test.vocab).W
    rows = np.arange(len(test))
    before = evalkit.cosine_matrix(img.forward(test.images), W)[rows, res["targets"]]
    after = evalkit.cosine_matrix(img.forward(res["images"]), W)[rows, res["targets"]]
    hit = after > before
    return {"fraction_improved": float(hit.mean()), "n": int(len(hit)),
            "target_top1": float((evalkit.zeroshot_predict(img.forward(res["images"]), W)
                                  == res["targets"]).mean())}
