"""Central finite differences, used as the oracle for every backward pass."""

import numpy as np

H = 1e-5


def numeric_grad(f, x, h=H):
    """d f / d x for scalar ``f`` by central differences; ``x`` is mutated and restored."""
    g = np.zeros_like(x, dtype=float)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    """||a - b|| / max(||a|| + ||b||, 1e-12)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))
