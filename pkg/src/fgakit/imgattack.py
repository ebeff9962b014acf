"""Iterative image attacks: multi-norm PGD, momentum, patches, targeted mode."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .errors import AttackError, ConfigError
from .numkit import RngStream, batch_lp_norm, nearest_rank_index, parse_norm

log = logging.getLogger(__name__)

DEFAULT_SCALES = (0.5, 0.75, 1.25, 1.5)


@dataclass
class AttackConfig:
    norm: str = "inf"
    epsilon: float = 2 / 255
    steps: int = 10
    alpha: float | None = None          # None -> 2.5 * epsilon / steps
    momentum: bool = False
    momentum_mu: float = 1.0
    q_percentile: float = 90.0
    scales: tuple | None = None          # None disables scale augmentation
    include_identity_scale: bool = True  # also score the unscaled image
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        parse_norm(self.norm)
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if not 0 <= self.q_percentile <= 100:
            raise ConfigError("q_percentile must lie in [0, 100]")
        if self.momentum_mu < 0:
            raise ConfigError("momentum_mu must be >= 0")
        if self.scales is not None:
            self.scales = tuple(float(s) for s in self.scales)
            if not self.scales:
                raise ConfigError("scales must be non-empty when given")

    @property
    def p(self):
        return parse_norm(self.norm)

    @property
    def scale_set(self):
        if self.scales is None:
            return None
        if self.include_identity_scale and 1.0 not in self.scales:
            return (1.0,) + self.scales
        return self.scales

    @property
    def step_size(self) -> float:
        return self.alpha if self.alpha is not None else 2.5 * self.epsilon / self.steps

    def to_json(self):
        d = asdict(self)
        d["scales"] = list(self.scales) if self.scales is not None else None
        return d


@dataclass
class PatchSpec:
    mask: np.ndarray                     # H x W of {0, 1}
    location: tuple | str = "random"

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if self.mask.ndim != 2 or not np.isin(self.mask, (0, 1)).all():
            raise ConfigError("patch mask must be a binary H x W matrix")

    @property
    def area_fraction(self) -> float:
        return float(self.mask.mean())

    @classmethod
    def square(cls, h, w, row, col, side):
        if side < 1 or row < 0 or col < 0 or row + side > h or col + side > w:
            raise ConfigError(f"square patch ({row}, {col}, {side}) does not fit {h}x{w}")
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[row:row + side, col:col + side] = 1
        return cls(mask, (row, col, side))

    @classmethod
    def random_square(cls, h, w, area_fraction, rng: np.random.Generator):
        side = patch_side(h, w, area_fraction)
        row = int(rng.integers(0, h - side + 1))
        col = int(rng.integers(0, w - side + 1))
        return cls.square(h, w, row, col, side)


def patch_side(h, w, area_fraction):
    return max(1, min(h, w, int(math.floor(math.sqrt(area_fraction * h * w) + 0.5))))


@dataclass
class AttackTrace:
    losses: np.ndarray             # steps x B, loss at the iterate each step starts from
    final_loss: np.ndarray         # B, loss at the returned example
    perturbation: np.ndarray       # B x C x H x W
    norms: dict = field(default_factory=dict)   # "1"/"2"/"inf" -> B
    iterations: int = 0

    def summary(self):
        return {
            "iterations": self.iterations,
            "mean_initial_loss": float(np.mean(self.losses[0])) if len(self.losses) else None,
            "mean_final_loss": float(np.mean(self.final_loss)),
            "max_norms": {k: float(np.max(v)) if len(v) else 0.0 for k, v in self.norms.items()},
        }


def _norms(delta):
    return {"1": batch_lp_norm(delta, 1), "2": batch_lp_norm(delta, 2),
            "inf": batch_lp_norm(delta, np.inf)}


def steepest_dir(g, p, q_percentile=90.0):
    """Unit p-norm ascent direction for one gradient tensor."""
    p = parse_norm(p)
    g = np.asarray(g)
    if p == np.inf:
        return np.sign(g)
    if p == 2:
        n = np.sqrt(np.sum(g.astype(np.float64) ** 2))
        return g / n if n > 0 else np.zeros_like(g)
    a = np.abs(g).ravel()
    thresh = np.partition(a, nearest_rank_index(q_percentile, a.size))[nearest_rank_index(q_percentile, a.size)]
    e = np.where(np.abs(g) >= thresh, np.sign(g), 0).astype(g.dtype)
    n = np.abs(e).sum()
    return e / n if n > 0 else e


def batch_steepest_dir(g, p, q_percentile=90.0):
    p = parse_norm(p)
    if p == np.inf:
        return np.sign(g)
    return np.stack([steepest_dir(gi, p, q_percentile) for gi in g]) if len(g) else g


def project_l1(delta, eps):
    """Euclidean projection onto the l1 ball (sort and threshold)."""
    x = np.asarray(delta)
    a = np.abs(x).ravel().astype(np.float64)
    if a.sum() <= eps:
        return x.copy()
    if eps <= 0:
        return np.zeros_like(x)
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, a.size + 1)
    cond = u * k > css - eps
    cond[0] = True          # holds exactly for k = 1; rounding can hide it when eps is tiny
    rho = np.nonzero(cond)[0][-1]
    theta = (css[rho] - eps) / (rho + 1.0)
    w = np.maximum(a - theta, 0.0)
    # rounding can leave the sum a hair above eps
    s = w.sum()
    if s > eps:
        w *= eps / s
    return (np.sign(x).ravel() * w).reshape(x.shape).astype(x.dtype)


def project(delta, epsilon, p):
    """Nearest point of the epsilon p-ball; unchanged if already inside."""
    p = parse_norm(p)
    delta = np.asarray(delta)
    if p == np.inf:
        return np.clip(delta, -epsilon, epsilon)
    if p == 2:
        n = float(np.sqrt(np.sum(delta.astype(np.float64) ** 2)))
        if n <= epsilon:
            return delta.copy()
        out = delta * (epsilon / n)
        # keep strictly inside after float rounding
        n2 = float(np.sqrt(np.sum(out.astype(np.float64) ** 2)))
        if n2 > epsilon:
            out = out * np.nextafter(epsilon / n2, 0)
        return out.astype(delta.dtype)
    return project_l1(delta, epsilon)


def batch_project(delta, epsilon, p):
    p = parse_norm(p)
    if p == np.inf:
        return np.clip(delta, -epsilon, epsilon)
    return np.stack([project(d, epsilon, p) for d in delta]) if len(delta) else delta


@dataclass
class MomentumState:
    g_m: np.ndarray

    @classmethod
    def zeros_like(cls, x):
        return cls(np.zeros_like(x))


def momentum_transform(g, state: MomentumState, mu):
    """g <- g / mean|g|; g <- g + mu * g_m; g_m <- g (per example along axis 0 if batched)."""
    g = np.asarray(g)
    if g.shape != state.g_m.shape:
        raise ConfigError("momentum state shape does not match gradient")
    if g.ndim > 1:
        scale = np.abs(g).reshape(len(g), -1).mean(axis=1).reshape((-1,) + (1,) * (g.ndim - 1))
    else:
        scale = np.abs(g).mean()
    safe = np.where(scale > 0, scale, 1)
    g = g / safe
    g = g + mu * state.g_m
    state.g_m = g
    return g


def _finite_or_raise(loss, grad, it):
    if not np.all(np.isfinite(loss)):
        raise AttackError("non-finite loss", it)
    if not np.all(np.isfinite(grad)):
        raise AttackError("non-finite gradient", it)


def _random_start(shape, eps, p, rng):
    # uniform in the p-ball (exact for inf and 2; for 1 via exponential spacing)
    n = int(np.prod(shape))
    if p == np.inf:
        return rng.uniform(-eps, eps, size=shape)
    if p == 2:
        d = rng.normal(size=n)
        d /= max(np.linalg.norm(d), 1e-30)
        return (d * eps * rng.uniform() ** (1.0 / n)).reshape(shape)
    e = rng.exponential(size=n + 1)
    d = e[:n] / e.sum() * rng.choice([-1.0, 1.0], size=n)
    return (d * eps).reshape(shape)


def pgd_attack(objective, v, cfg: AttackConfig, example_ids=None):
    """Projected steepest ascent on ``objective`` (images -> (loss[B], grad)).

    Returns (adversarial images, AttackTrace). ``example_ids`` key the per
    example random streams so results do not depend on batching.
    """
    v = np.asarray(v)
    p = cfg.p
    eps = float(cfg.epsilon)
    alpha = cfg.step_size
    if example_ids is None:
        example_ids = range(len(v))
    if cfg.scales is not None:
        objective = losses.augmented_objective(objective, cfg.scale_set)

    delta = np.zeros_like(v)
    if cfg.random_start and eps > 0:
        for b, ex in enumerate(example_ids):
            rng = RngStream(cfg.seed, 1000003 + int(ex)).generator()
            delta[b] = _random_start(v.shape[1:], eps, p, rng).astype(v.dtype)
        delta = np.clip(v + delta, 0, 1) - v
    lo, hi = -v, 1 - v
    state = MomentumState.zeros_like(v)
    history = []
    for it in range(cfg.steps):
        loss, g = objective(v + delta)
        _finite_or_raise(loss, g, it)
        history.append(np.asarray(loss, dtype=np.float64))
        if cfg.momentum:
            g = momentum_transform(g, state, cfg.momentum_mu)
        step = batch_steepest_dir(g, p, cfg.q_percentile)
        delta = batch_project(delta + alpha * step, eps, p)
        delta = np.minimum(np.maximum(delta, lo), hi).astype(v.dtype)
    adv = v + delta
    final_loss, _ = objective(adv)
    trace = AttackTrace(np.stack(history), np.asarray(final_loss, dtype=np.float64),
                        delta, _norms(delta), cfg.steps)
    return adv, trace


def patch_attack(objective, v, masks, steps=100, alpha=8 / 255, raw_gradient=False):
    """Unbounded perturbation inside binary masks (1 = patch pixel).

    ``masks`` is a single H x W mask or one per example. The patch is started
    from the original pixels and updated with ``alpha * sign(grad)`` (or the
    raw gradient) then clamped to [0, 1]; pixels outside the mask are never
    touched.
    """
    v = np.asarray(v)
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = np.broadcast_to(masks, (len(v),) + masks.shape)
    m = masks[:, None, :, :].astype(bool)
    m = np.broadcast_to(m, v.shape)
    if not m.any():
        if steps >= 1:
            log.warning("patch attack with an empty mask; returning the input unchanged")
        final_loss, _ = objective(v)
        return v.copy(), AttackTrace(np.zeros((0, len(v))), np.asarray(final_loss, np.float64),
                                     np.zeros_like(v), _norms(np.zeros_like(v)), 0)
    patch = v.copy()
    history = []
    for it in range(steps):
        x = np.where(m, patch, v)
        loss, g = objective(x)
        _finite_or_raise(loss, g, it)
        history.append(np.asarray(loss, dtype=np.float64))
        upd = g if raw_gradient else alpha * np.sign(g)
        patch = np.where(m, np.clip(patch + upd, 0.0, 1.0), patch).astype(v.dtype)
    adv = np.where(m, patch, v)
    final_loss, _ = objective(adv)
    delta = adv - v
    return adv, AttackTrace(np.stack(history) if history else np.zeros((0, len(v))),
                            np.asarray(final_loss, np.float64), delta, _norms(delta), steps)


def random_masks(n, h, w, area_fraction=0.02, seed=0, example_ids=None):
    ids = range(n) if example_ids is None else example_ids
    return np.stack([PatchSpec.random_square(h, w, area_fraction,
                                             RngStream(seed, 2000003 + int(i)).generator()).mask
                     for i in ids])


def fga(model, v, guidance, cfg: AttackConfig, temperature=1.0, example_ids=None):
    """Untargeted feature-guidance attack: PGD on the guidance loss."""
    emb_obj = losses.gui_objective(guidance.W, guidance.labels, temperature)
    return pgd_attack(losses.image_objective(model, emb_obj), v, cfg, example_ids)


def fda(model, v, cfg: AttackConfig, example_ids=None):
    """Feature-deviation baseline: push embeddings away from their clean values."""
    clean = model.forward(v)
    return pgd_attack(losses.image_objective(model, losses.dev_objective(clean)), v, cfg, example_ids)


def fga_targeted(model, v, W, targets, cfg: AttackConfig, temperature=1.0, example_ids=None):
    emb_obj = losses.targeted_objective(W, targets, temperature)
    return pgd_attack(losses.image_objective(model, emb_obj), v, cfg, example_ids)


def fga_targeted_patch(model, v, W, targets, masks, steps=100, alpha=8 / 255,
                       temperature=1.0, raw_gradient=False):
    """Targeted patch attack pulling embeddings toward ``W[target]``."""
    emb_obj = losses.targeted_objective(W, targets, temperature)
    return patch_attack(losses.image_objective(model, emb_obj), v, masks, steps, alpha, raw_gradient)


def fga_patch(model, v, guidance, masks, steps=100, alpha=8 / 255, temperature=1.0):
    emb_obj = losses.gui_objective(guidance.W, guidance.labels, temperature)
    return patch_attack(losses.image_objective(model, emb_obj), v, masks, steps, alpha)
