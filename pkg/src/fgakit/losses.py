"""Attack objectives on embeddings, all written as quantities to maximise.

Single-vector functions (``loss_*``) give the textbook values; the
``*_objective`` factories return batched closures ``emb -> (loss[B], grad[B, d])``
that the attack engine differentiates through the encoders.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .numkit import log_softmax, resize, resize_to, resize_to_vjp, softmax


def _vec(x):
    return np.asarray(x, dtype=np.result_type(np.asarray(x).dtype, np.float32))


def _same_dims(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch {a.shape} vs {b.shape}")


def _check_labels(labels, m):
    labels = [int(y) for y in labels]
    if not labels:
        raise ConfigError("guiding labels must be non-empty")
    if min(labels) < 0 or max(labels) >= m:
        raise ConfigError(f"guiding label out of range [0, {m})")
    return labels


def _W(G):
    return np.asarray(getattr(G, "W", G))


def loss_dev(e_adv, e_clean) -> float:
    """Feature deviation: negative dot product with the clean embedding."""
    a, b = _vec(e_adv), _vec(e_clean)
    _same_dims(a, b)
    return float(-np.dot(a, b))


def grad_dev_embedding(e_adv, e_clean):
    a, b = _vec(e_adv), _vec(e_clean)
    _same_dims(a, b)
    return -b


def loss_gui(e_adv, G, labels, temperature=1.0) -> float:
    """Mean negative log-softmax of e·W at the guiding labels."""
    W = _W(G)
    labels = _check_labels(labels, len(W))
    logp = log_softmax(W @ _vec(e_adv) / temperature)
    return float(-np.mean(logp[labels]))


def loss_gui_terms(e_adv, G, labels, temperature=1.0) -> np.ndarray:
    """Per-label breakdown of :func:`loss_gui`."""
    W = _W(G)
    labels = _check_labels(labels, len(W))
    return -log_softmax(W @ _vec(e_adv) / temperature)[labels]


def grad_gui_embedding(e_adv, G, labels, temperature=1.0):
    """Closed-form gradient: repel each guided vector with weight 1/n,
    attract every vector with its softmax weight."""
    W = _W(G)
    labels = _check_labels(labels, len(W))
    p = softmax(W @ _vec(e_adv) / temperature)
    repel = -W[labels].sum(axis=0) / len(labels)
    return (repel + p @ W) / temperature


def loss_gui_targeted(e_adv, G, target, temperature=1.0) -> float:
    """Log-softmax at the target vector (maximised to pull toward it)."""
    W = _W(G)
    if not 0 <= int(target) < len(W):
        raise ConfigError(f"target {target} out of range [0, {len(W)})")
    return float(log_softmax(W @ _vec(e_adv) / temperature)[int(target)])


def grad_gui_targeted_embedding(e_adv, G, target, temperature=1.0):
    W = _W(G)
    if not 0 <= int(target) < len(W):
        raise ConfigError(f"target {target} out of range [0, {len(W)})")
    p = softmax(W @ _vec(e_adv) / temperature)
    return (W[int(target)] - p @ W) / temperature


def loss_set_gui(e_adv, G_batch, own, temperature=1.0) -> float:
    """Set-level guidance loss.

    ``G_batch`` holds the embeddings of every text in the minibatch union
    (clean and adversarial); ``own`` lists this image's clean and adversarial
    texts as indices into it, duplicates kept.
    """
    if len(own) == 0:
        raise ConfigError("own text set is empty")
    return loss_gui(e_adv, G_batch, own, temperature)


def cosine_deviation(e_t_adv, e_v) -> float:
    a, b = np.asarray(e_t_adv, dtype=np.float64), np.asarray(e_v, dtype=np.float64)
    _same_dims(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericError("cosine of a zero-norm vector")
    return float(-np.dot(a, b) / (na * nb))


def fused_deviation(f_adv, f_clean) -> float:
    a, b = np.asarray(f_adv, dtype=np.float64), np.asarray(f_clean, dtype=np.float64)
    _same_dims(a, b)
    return float(np.linalg.norm(a - b))


# --- batched objectives ---------------------------------------------------


def label_weights(labels_per_example, m, dtype=np.float64):
    """Row b holds 1/n_b at each of example b's labels (duplicates add up)."""
    A = np.zeros((len(labels_per_example), m), dtype=dtype)
    for b, labs in enumerate(labels_per_example):
        labs = _check_labels(labs, m)
        np.add.at(A[b], labs, 1.0 / len(labs))
    return A


def gui_objective(W, labels_per_example, temperature=1.0):
    W = np.asarray(W)
    A = label_weights(labels_per_example, len(W), W.dtype)

    def objective(emb):
        logits = emb @ W.T / temperature
        logp = log_softmax(logits, axis=1)
        loss = -(A * logp).sum(axis=1)
        grad = (np.exp(logp) - A) @ W / temperature
        return loss, grad

    return objective


def targeted_objective(W, targets, temperature=1.0):
    W = np.asarray(W)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.min() < 0 or targets.max() >= len(W):
        raise ConfigError("target out of range")
    onehot = np.eye(len(W), dtype=W.dtype)[targets]

    def objective(emb):
        logp = log_softmax(emb @ W.T / temperature, axis=1)
        loss = (onehot * logp).sum(axis=1)
        grad = (onehot - np.exp(logp)) @ W / temperature
        return loss, grad

    return objective


def dev_objective(e_clean):
    e_clean = np.asarray(e_clean)

    def objective(emb):
        return -(emb * e_clean).sum(axis=1), -e_clean

    return objective


def image_objective(model, emb_objective):
    """Lift an embedding objective to images through ``model.forward_vjp``."""

    def objective(v):
        return model.forward_vjp(v, emb_objective)

    return objective


def augment(v, s):
    """Rescale by ``s`` and resample back to the original size."""
    h, w = v.shape[-2:]
    return resize_to(resize(v, s), h, w)


def loss_aug(v_adv, scales, objective):
    """Sum ``objective`` over rescaled copies; returns (loss[B], grad[B, ...])."""
    scales = list(scales)
    if not scales:
        raise ConfigError("scale set must be non-empty")
    h, w = v_adv.shape[-2:]
    total_loss, total_grad = None, None
    for s in scales:
        if s == 1:
            loss, grad = objective(v_adv)
        else:
            small = resize(v_adv, s)
            sh, sw = small.shape[-2:]
            loss, g = objective(resize_to(small, h, w))
            grad = resize_to_vjp(resize_to_vjp(g, sh, sw), h, w)
        if total_loss is None:
            total_loss, total_grad = loss, grad
        else:
            total_loss = total_loss + loss
            total_grad = total_grad + grad
    return total_loss, total_grad


def augmented_objective(objective, scales):
    scales = list(scales)
    if not scales:
        raise ConfigError("scale set must be non-empty")

    def aug(v):
        return loss_aug(v, scales, objective)

    return aug
