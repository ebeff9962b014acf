"""Shared test helpers."""

import numpy as np

# filled by the acceptance tests, printed by the terminal summary hook
ACCEPTANCE_LINES = []


def record(n, ok, detail=""):
    ACCEPTANCE_LINES.append(f"CRITERION {n:>2} {'PASS' if ok else 'FAIL'}  {detail}")


class LinearEncoder:
    """E(x) = A·flat(x); the simplest model with the encoder interface."""

    def __init__(self, A, shape):
        self.A = np.asarray(A)
        self.shape = tuple(shape)

    def forward(self, v):
        return np.asarray(v).reshape(len(v), -1) @ self.A

    def forward_vjp(self, v, emb_loss):
        loss, g = emb_loss(self.forward(v))
        return loss, (g @ self.A.T).reshape(np.shape(v))


def central_diff(f, x, idx, h=1e-5):
    """Central finite difference of scalar f at x along coordinates ``idx``."""
    x = np.array(x, dtype=np.float64)
    out = []
    for i in idx:
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        out.append((f(xp) - f(xm)) / (2 * h))
    return np.array(out)


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30))
