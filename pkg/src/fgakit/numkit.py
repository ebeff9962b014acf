"""Small deterministic numeric kernel on top of numpy.

Arrays are plain ``numpy.ndarray``. The working float type is float32 unless
64-bit mode is switched on (the gradient checks run in 64-bit mode).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

_FLOAT = np.float32


def float_dtype():
    return _FLOAT


def set_float64(enabled: bool) -> None:
    global _FLOAT
    _FLOAT = np.float64 if enabled else np.float32


@contextlib.contextmanager
def float64_mode():
    """Temporarily switch the working dtype to float64."""
    previous = _FLOAT
    set_float64(True)
    try:
        yield
    finally:
        set_float64(previous is np.float64)


def asfloat(x, dtype=None) -> np.ndarray:
    return np.asarray(x, dtype=dtype or _FLOAT)


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def softmax(logits, axis=-1):
    """Max-subtracted softmax along ``axis``."""
    z = np.asarray(logits)
    if z.size == 0 or z.shape[axis] == 0:
        raise DimensionError("softmax of an empty tensor")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits)
    if z.size == 0 or z.shape[axis] == 0:
        raise DimensionError("log_softmax of an empty tensor")
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def parse_norm(p):
    """Normalise a norm spec (1, 2, 'inf', np.inf) to 1, 2 or np.inf."""
    if isinstance(p, str):
        key = p.strip().lower()
        if key in ("inf", "linf", "infinity"):
            return np.inf
        if key in ("1", "l1"):
            return 1
        if key in ("2", "l2"):
            return 2
        raise ConfigError(f"unknown norm {p!r}")
    if p == np.inf:
        return np.inf
    if p in (1, 2):
        return int(p)
    raise ConfigError(f"unsupported norm {p!r}; expected 1, 2 or inf")


def lp_norm(v, p) -> float:
    p = parse_norm(p)
    a = np.abs(np.asarray(v, dtype=np.float64)).ravel()
    check_finite(a, "lp_norm input")
    if a.size == 0:
        return 0.0
    if p == 1:
        return float(a.sum())
    if p == 2:
        return float(np.sqrt(np.dot(a, a)))
    return float(a.max())


def batch_lp_norm(x, p) -> np.ndarray:
    """Per-example norms over all non-batch axes."""
    p = parse_norm(p)
    a = np.abs(np.asarray(x, dtype=np.float64)).reshape(len(x), -1)
    if p == 1:
        return a.sum(axis=1)
    if p == 2:
        return np.sqrt((a * a).sum(axis=1))
    return a.max(axis=1) if a.shape[1] else np.zeros(len(x))


def nearest_rank_index(q, n: int) -> int:
    """0-based index of the nearest-rank q-th percentile among n sorted items."""
    if not 0 <= q <= 100:
        raise ConfigError(f"percentile {q} outside [0, 100]")
    rank = math.ceil(Fraction(q) * n / 100)
    return min(max(rank, 1), n) - 1


def percentile_abs(g, q) -> float:
    a = np.abs(np.asarray(g)).ravel()
    if a.size == 0:
        raise DimensionError("percentile of an empty tensor")
    idx = nearest_rank_index(q, a.size)
    return float(np.partition(a, idx)[idx])


def clamp(t, lo, hi):
    """Elementwise min(max(t, lo), hi); ``lo``/``hi`` may be arrays."""
    lo_a, hi_a = np.asarray(lo), np.asarray(hi)
    if np.any(lo_a > hi_a):
        raise ConfigError("clamp with lo > hi")
    return np.minimum(np.maximum(t, lo), hi)


def _scaled_size(n: int, s: float) -> int:
    return int(math.floor(s * n + 0.5))


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # bilinear, align_corners=False, source coordinates clamped at 0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w1 = src - i0 if i0 < n_in - 1 else 0.0
        m[i, i0] += 1.0 - w1
        m[i, i1] += w1
    return m.astype(dtype)


def resize_to(img, out_h: int, out_w: int):
    """Bilinear resize of the last two axes to (out_h, out_w)."""
    img = np.asarray(img)
    h, w = img.shape[-2:]
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"degenerate resize target {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return img.copy()
    my = _interp_matrix(h, out_h, img.dtype)
    mx = _interp_matrix(w, out_w, img.dtype)
    out = my @ img @ mx.T
    return np.clip(out, 0.0, 1.0) if img.size and img.min() >= 0 and img.max() <= 1 else out


def resize_to_vjp(grad_out, in_h: int, in_w: int):
    """Adjoint of :func:`resize_to` for an upstream gradient."""
    grad_out = np.asarray(grad_out)
    out_h, out_w = grad_out.shape[-2:]
    if (out_h, out_w) == (in_h, in_w):
        return grad_out.copy()
    my = _interp_matrix(in_h, out_h, grad_out.dtype)
    mx = _interp_matrix(in_w, out_w, grad_out.dtype)
    return my.T @ grad_out @ mx


def resize(img, s: float):
    """Bilinear rescale of an image batch by factor ``s`` (0 < s <= 4)."""
    if not 0 < s <= 4:
        raise DimensionError(f"scale {s} outside (0, 4]")
    img = np.asarray(img)
    h, w = img.shape[-2:]
    if s == 1:
        return img.copy()
    oh, ow = _scaled_size(h, s), _scaled_size(w, s)
    if oh < 1 or ow < 1:
        raise DimensionError(f"scale {s} maps {h}x{w} to degenerate {oh}x{ow}")
    return resize_to(img, oh, ow)


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (master_seed, stream_id).

    Backed by numpy's Philox generator so draws depend only on the key, never
    on call scheduling or thread count.
    """

    master_seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array(
            [self.master_seed & 0xFFFFFFFFFFFFFFFF, self.stream_id & 0xFFFFFFFFFFFFFFFF],
            dtype=np.uint64,
        )
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, stream_id: int) -> "RngStream":
        # mixes the parent stream id so nested splits do not collide
        mixed = (self.stream_id * 0x9E3779B97F4A7C15 + stream_id + 1) & 0xFFFFFFFFFFFFFFFF
        return RngStream(self.master_seed, mixed)
