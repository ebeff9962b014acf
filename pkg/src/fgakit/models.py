"""Tiny MLP encoders with hand-written backward passes.

These stand in for the image, text and fusion encoders of a vision-language
model. Every module exposes ``forward`` and a vector-Jacobian product back to
its input, plus parameter gradients used by the two trainers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorfile
from .errors import ConfigError, DimensionError, FormatError, MissingFileError, TrainingError
from .numkit import RngStream, asfloat, float_dtype, log_softmax, softmax

NORM_EPS = 1e-12


class MLP:
    """Dense layers with tanh between them (and optionally after the last)."""

    def __init__(self, sizes, rng: np.random.Generator, final_tanh=False, dtype=None):
        dtype = dtype or float_dtype()
        self.sizes = [int(s) for s in sizes]
        self.final_tanh = final_tanh
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(asfloat(rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out)), dtype))
            self.biases.append(np.zeros(n_out, dtype=dtype))

    @property
    def dtype(self):
        return self.weights[0].dtype

    def _act(self, i):
        return i < len(self.weights) - 1 or self.final_tanh

    def forward(self, x, cache=False):
        acts = [x]
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if self._act(i):
                h = np.tanh(h)
            acts.append(h)
        return (h, acts) if cache else h

    def backward(self, acts, grad_out, need_params=True):
        """Backprop ``grad_out`` through cached activations.

        Returns (grad wrt input, [(dW, db), ...] or None).
        """
        g = grad_out
        grads = []
        for i in reversed(range(len(self.weights))):
            if self._act(i):
                g = g * (1.0 - acts[i + 1] ** 2)
            if need_params:
                grads.append((acts[i].T @ g, g.sum(axis=0)))
            g = g @ self.weights[i].T
        grads.reverse()
        return g, (grads if need_params else None)

    def params(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def load_params(self, tensors):
        for i in range(len(self.weights)):
            for name, store in ((f"W{i}", self.weights), (f"b{i}", self.biases)):
                t = tensors[name]
                if t.shape != store[i].shape:
                    raise FormatError(f"{name}: shape {t.shape} != expected {store[i].shape}")
                store[i] = np.array(t, dtype=store[i].dtype)

    def sgd(self, grads, lr):
        for i, (dw, db) in enumerate(grads):
            self.weights[i] -= lr * dw
            self.biases[i] -= lr * db


def l2_normalize(x):
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.maximum(n, NORM_EPS), n


def l2_normalize_vjp(y, norm, g):
    # d(x/|x|) = (I - y y^T) / |x|
    return (g - y * (y * g).sum(axis=-1, keepdims=True)) / np.maximum(norm, NORM_EPS)


class ImageEncoder:
    """MLP over flattened, centred pixels."""

    kind = "image"

    def __init__(self, input_shape, dim=32, hidden=(128, 128), normalize=True, seed=0):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.normalize = bool(normalize)
        self.seed = int(seed)
        rng = RngStream(self.seed, 11).generator()
        self.mlp = MLP([int(np.prod(self.input_shape)), *self.hidden, self.dim], rng)

    def config(self):
        return {"kind": self.kind, "input_shape": list(self.input_shape), "dim": self.dim,
                "hidden": list(self.hidden), "normalize": self.normalize, "seed": self.seed}

    def _flat(self, v):
        v = np.asarray(v, dtype=self.mlp.dtype)
        if v.ndim != 4 or v.shape[1:] != self.input_shape:
            raise DimensionError(f"expected B x {self.input_shape} images, got {v.shape}")
        return v.reshape(len(v), -1) - 0.5

    def _forward(self, v):
        raw, acts = self.mlp.forward(self._flat(v), cache=True)
        if self.normalize:
            emb, norm = l2_normalize(raw)
        else:
            emb, norm = raw, None
        return emb, (acts, emb, norm)

    def forward(self, v):
        return self._forward(v)[0]

    __call__ = forward

    def _backward(self, cache, grad_emb, need_params):
        acts, emb, norm = cache
        grad_emb = np.asarray(grad_emb, dtype=self.mlp.dtype)
        if grad_emb.shape != emb.shape:
            raise DimensionError(f"grad shape {grad_emb.shape} != embedding shape {emb.shape}")
        g = l2_normalize_vjp(emb, norm, grad_emb) if self.normalize else grad_emb
        return self.mlp.backward(acts, g, need_params)

    def vjp(self, v, grad_emb):
        """Gradient w.r.t. the input images given dL/d(embedding)."""
        _, cache = self._forward(v)
        gx, _ = self._backward(cache, grad_emb, need_params=False)
        return gx.reshape(np.shape(v))

    def forward_vjp(self, v, emb_loss):
        """One pass: embeddings -> emb_loss -> input gradient."""
        emb, cache = self._forward(v)
        loss, grad_emb = emb_loss(emb)
        gx, _ = self._backward(cache, grad_emb, need_params=False)
        return loss, gx.reshape(np.shape(v))

    def params(self):
        return self.mlp.params()


class TextEncoder:
    """Token embedding table, mean pooling, then an MLP."""

    kind = "text"

    def __init__(self, vocab_size, dim=32, token_dim=32, hidden=(64,), normalize=True, seed=0):
        self.vocab_size = int(vocab_size)
        self.dim = int(dim)
        self.token_dim = int(token_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.normalize = bool(normalize)
        self.seed = int(seed)
        rng = RngStream(self.seed, 12).generator()
        dtype = float_dtype()
        self.table = asfloat(rng.normal(0.0, 1.0, (self.vocab_size, self.token_dim)), dtype)
        self.mlp = MLP([self.token_dim, *self.hidden, self.dim], rng, dtype=dtype)

    def config(self):
        return {"kind": self.kind, "vocab_size": self.vocab_size, "dim": self.dim,
                "token_dim": self.token_dim, "hidden": list(self.hidden),
                "normalize": self.normalize, "seed": self.seed}

    def _pool_matrix(self, seqs):
        pool = np.zeros((len(seqs), self.vocab_size), dtype=self.table.dtype)
        for i, s in enumerate(seqs):
            if len(s) == 0:
                raise DimensionError("empty token sequence")
            ids = np.asarray(s, dtype=np.int64)
            if ids.min() < 0 or ids.max() >= self.vocab_size:
                raise DimensionError("token id out of vocabulary range")
            np.add.at(pool[i], ids, 1.0 / len(ids))
        return pool

    def _forward(self, seqs):
        pool = self._pool_matrix(seqs)
        pooled = pool @ self.table
        raw, acts = self.mlp.forward(pooled, cache=True)
        if self.normalize:
            emb, norm = l2_normalize(raw)
        else:
            emb, norm = raw, None
        return emb, (pool, acts, emb, norm)

    def forward(self, seqs):
        return self._forward(seqs)[0]

    __call__ = forward

    def _backward(self, cache, grad_emb):
        pool, acts, emb, norm = cache
        g = l2_normalize_vjp(emb, norm, grad_emb) if self.normalize else grad_emb
        g_pooled, grads = self.mlp.backward(acts, g)
        return pool.T @ g_pooled, grads

    def params(self):
        return {"table": self.table, **self.mlp.params()}


class FusionHead:
    """Projector MLP over [image emb, text emb] followed by a linear classifier.

    The projector output is the fused embedding; the columns of ``head_w`` are
    the class weight vectors used as guiding vectors after fusion.
    """

    kind = "fusion"

    def __init__(self, image_dim, text_dim, fused_dim=32, hidden=(64,), num_classes=2, seed=0):
        if num_classes < 2:
            raise ConfigError("fusion head needs at least 2 classes")
        self.image_dim = int(image_dim)
        self.text_dim = int(text_dim)
        self.fused_dim = int(fused_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        rng = RngStream(self.seed, 13).generator()
        dtype = float_dtype()
        self.mlp = MLP([self.image_dim + self.text_dim, *self.hidden, self.fused_dim], rng,
                       final_tanh=True, dtype=dtype)
        self.head_w = asfloat(rng.normal(0.0, 1.0 / np.sqrt(self.fused_dim),
                                         (self.fused_dim, self.num_classes)), dtype)
        self.head_b = np.zeros(self.num_classes, dtype=dtype)

    def config(self):
        return {"kind": self.kind, "image_dim": self.image_dim, "text_dim": self.text_dim,
                "fused_dim": self.fused_dim, "hidden": list(self.hidden),
                "num_classes": self.num_classes, "seed": self.seed}

    def _concat(self, e_v, e_t):
        e_v = np.asarray(e_v, dtype=self.mlp.dtype)
        e_t = np.asarray(e_t, dtype=self.mlp.dtype)
        if e_v.shape[-1] != self.image_dim or e_t.shape[-1] != self.text_dim or len(e_v) != len(e_t):
            raise DimensionError(f"fusion inputs {e_v.shape} / {e_t.shape} do not match head dims")
        return np.concatenate([e_v, e_t], axis=1)

    def forward_fused(self, e_v, e_t):
        return self.mlp.forward(self._concat(e_v, e_t))

    def fused_logits(self, fused):
        return np.asarray(fused, dtype=self.mlp.dtype) @ self.head_w + self.head_b

    def logits(self, e_v, e_t):
        return self.fused_logits(self.forward_fused(e_v, e_t))

    def params(self):
        return {**self.mlp.params(), "head_w": self.head_w, "head_b": self.head_b}


class FusedImageModel:
    """Image encoder conditioned on fixed text embeddings: v -> fused(E_v(v), e_t)."""

    def __init__(self, img_enc: ImageEncoder, head: FusionHead, text_emb):
        self.img_enc = img_enc
        self.head = head
        self.text_emb = np.asarray(text_emb)

    def _text_for(self, v):
        if len(self.text_emb) != len(v):
            raise DimensionError("one text embedding per image is required")
        return self.text_emb

    def forward(self, v):
        return self.head.forward_fused(self.img_enc.forward(v), self._text_for(v))

    __call__ = forward

    def forward_vjp(self, v, emb_loss):
        e_v, img_cache = self.img_enc._forward(v)
        fused, acts = self.head.mlp.forward(self.head._concat(e_v, self._text_for(v)), cache=True)
        loss, grad_fused = emb_loss(fused)
        g_cat, _ = self.head.mlp.backward(acts, grad_fused, need_params=False)
        gx, _ = self.img_enc._backward(img_cache, g_cat[:, :self.head.image_dim], need_params=False)
        return loss, gx.reshape(np.shape(v))

    def vjp(self, v, grad_fused):
        return vjp_fused_image(self.img_enc, self.head, v, self._text_for(v), grad_fused)


def vjp_fused_image(img_enc: ImageEncoder, head: FusionHead, v, e_t, grad_fused):
    """Gradient of a fused-embedding loss w.r.t. the input images."""
    e_v, img_cache = img_enc._forward(v)
    _, acts = head.mlp.forward(head._concat(e_v, e_t), cache=True)
    grad_fused = np.asarray(grad_fused, dtype=head.mlp.dtype)
    if grad_fused.shape != acts[-1].shape:
        raise DimensionError("grad shape does not match fused embeddings")
    g_cat, _ = head.mlp.backward(acts, grad_fused, need_params=False)
    gx, _ = img_enc._backward(img_cache, g_cat[:, :head.image_dim], need_params=False)
    return gx.reshape(np.shape(v))


# --- training -------------------------------------------------------------


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def itc_loss_and_grads(e_v, e_t, temperature):
    """Symmetric InfoNCE over an aligned batch; returns (loss, dL/de_v, dL/de_t)."""
    b = len(e_v)
    logits = (e_v @ e_t.T) / temperature
    idx = np.arange(b)
    lr_ = log_softmax(logits, axis=1)
    lc_ = log_softmax(logits, axis=0)
    loss = -0.5 * (lr_[idx, idx].mean() + lc_[idx, idx].mean())
    eye = np.eye(b, dtype=logits.dtype)
    d = 0.5 * ((softmax(logits, axis=1) - eye) + (softmax(logits, axis=0) - eye)) / b
    d /= temperature
    return float(loss), d @ e_t, d.T @ e_v


def train_itc(img_enc: ImageEncoder, txt_enc: TextEncoder, data, epochs=20, lr=0.5,
              temperature=0.1, batch_size=64, seed=0, history=None):
    """Contrastive (ITC) training with plain minibatch gradient descent.

    Each epoch pairs every image with one of its captions (drawn from the
    seeded stream) and walks shuffled minibatches. Encoders are updated in
    place and returned. Per-batch losses are appended to ``history`` if given.
    """
    if len(data) == 0:
        raise TrainingError("cannot train on an empty dataset")
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    rng = RngStream(int(seed), 21).generator()
    for epoch in range(int(epochs)):
        pick = [caps[int(rng.integers(len(caps)))] for caps in data.captions]
        for step, idx in enumerate(_batches(len(data), batch_size, rng)):
            if len(idx) < 2:
                continue
            e_v, vcache = img_enc._forward(data.images[idx])
            e_t, tcache = txt_enc._forward([pick[i] for i in idx])
            loss, g_v, g_t = itc_loss_and_grads(e_v, e_t, temperature)
            if not np.isfinite(loss):
                raise TrainingError("non-finite ITC loss", epoch, step)
            _, v_grads = img_enc._backward(vcache, g_v, need_params=True)
            g_table, t_grads = txt_enc._backward(tcache, g_t)
            img_enc.mlp.sgd(v_grads, lr)
            txt_enc.mlp.sgd(t_grads, lr)
            txt_enc.table -= lr * g_table
            if history is not None:
                history.append((epoch, loss))
    return img_enc, txt_enc


def make_pair_task(data, seed=0):
    """Binary matching task: (image, own caption) -> 1, (image, other-class caption) -> 0."""
    rng = RngStream(int(seed), 31).generator()
    img_idx, texts, labels = [], [], []
    by_class = {c: np.flatnonzero(data.labels == c) for c in range(data.num_classes)}
    for i, caps in enumerate(data.captions):
        img_idx.append(i)
        texts.append(caps[int(rng.integers(len(caps)))])
        labels.append(1)
        others = [c for c in range(data.num_classes) if c != data.labels[i] and len(by_class[c])]
        c = others[int(rng.integers(len(others)))]
        j = by_class[c][int(rng.integers(len(by_class[c])))]
        img_idx.append(i)
        texts.append(data.captions[j][0])
        labels.append(0)
    return np.asarray(img_idx), texts, np.asarray(labels)


def train_fusion(head: FusionHead, img_enc: ImageEncoder, txt_enc: TextEncoder, images, texts,
                 labels, epochs=30, lr=0.2, batch_size=64, seed=0, history=None):
    """Cross-entropy training of the fusion head on frozen encoder outputs."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise TrainingError("cannot train on an empty task")
    e_v_all = img_enc.forward(images)
    e_t_all = txt_enc.forward(texts)
    rng = RngStream(int(seed), 22).generator()
    for epoch in range(int(epochs)):
        for step, idx in enumerate(_batches(len(labels), batch_size, rng)):
            fused, acts = head.mlp.forward(head._concat(e_v_all[idx], e_t_all[idx]), cache=True)
            logits = fused @ head.head_w + head.head_b
            logp = log_softmax(logits, axis=1)
            loss = float(-logp[np.arange(len(idx)), labels[idx]].mean())
            if not np.isfinite(loss):
                raise TrainingError("non-finite fusion loss", epoch, step)
            d = softmax(logits, axis=1)
            d[np.arange(len(idx)), labels[idx]] -= 1.0
            d /= len(idx)
            g_fused = d @ head.head_w.T
            head.head_w -= lr * (fused.T @ d)
            head.head_b -= lr * d.sum(axis=0)
            _, grads = head.mlp.backward(acts, g_fused)
            head.mlp.sgd(grads, lr)
            if history is not None:
                history.append((epoch, loss))
    return head


# --- checkpoints ----------------------------------------------------------

_KINDS = {"image": ImageEncoder, "text": TextEncoder, "fusion": FusionHead}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def to_checkpoint(models: dict, metadata=None) -> Checkpoint:
    """Bundle named models ({"image": enc, ...}) into one checkpoint."""
    tensors, configs = {}, {}
    for prefix, model in models.items():
        configs[prefix] = model.config()
        for name, t in model.params().items():
            tensors[f"{prefix}.{name}"] = t
    meta = {"models": configs, **(metadata or {})}
    return Checkpoint(tensors, meta)


def from_checkpoint(ckpt: Checkpoint) -> dict:
    out = {}
    for prefix, cfg in ckpt.metadata["models"].items():
        cfg = dict(cfg)
        kind = cfg.pop("kind")
        if kind not in _KINDS:
            raise FormatError(f"unknown model kind {kind!r}")
        if "input_shape" in cfg:
            cfg["input_shape"] = tuple(cfg["input_shape"])
        model = _KINDS[kind](**cfg)
        own = {k[len(prefix) + 1:]: v for k, v in ckpt.tensors.items() if k.startswith(prefix + ".")}
        _load_params(model, own)
        out[prefix] = model
    return out


def _load_params(model, tensors):
    expected = model.params()
    missing = set(expected) - set(tensors)
    if missing:
        raise FormatError(f"checkpoint missing tensors {sorted(missing)}")
    model.mlp.load_params(tensors)
    if isinstance(model, TextEncoder):
        if tensors["table"].shape != model.table.shape:
            raise FormatError("token table shape mismatch")
        model.table = np.array(tensors["table"], dtype=model.table.dtype)
    if isinstance(model, FusionHead):
        for name in ("head_w", "head_b"):
            if tensors[name].shape != getattr(model, name).shape:
                raise FormatError(f"{name} shape mismatch")
            setattr(model, name, np.array(tensors[name], dtype=model.head_w.dtype))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``path`` (tensor file) and ``path + '.json'`` (metadata)."""
    path = Path(path)
    tensorfile.save(path, ckpt.tensors)
    Path(str(path) + ".json").write_text(json.dumps(ckpt.metadata, indent=1, sort_keys=True))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    meta_path = Path(str(path) + ".json")
    if not meta_path.exists():
        raise MissingFileError(f"no checkpoint metadata at {meta_path}")
    tensors = tensorfile.load(path)
    return Checkpoint(tensors, json.loads(meta_path.read_text()))
