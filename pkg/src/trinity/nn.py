"""Forward/backward kernels for the few layer kinds the model needs, plus Adam.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``. Batches are row-major: an affine layer computes
``y = x @ W + b`` with ``W`` of shape ``(fan_in, fan_out)``. All arithmetic
is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ContractError, NumericError

ELU_ALPHA = 1.0
PROB_CLIP = 1e-7

LAYER_KINDS = ("affine", "elu", "sigmoid", "softmax", "embedding_lookup",
               "elementwise_mul", "concat", "reduce_mean_per_field")


def check_finite(x, layer):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values produced by layer '{layer}'", layer=layer)
    return x


def _need(cache, layer):
    if cache is None:
        raise ContractError(f"backward for '{layer}' called without a forward cache")
    return cache


# -- affine ------------------------------------------------------------------

def affine_forward(x, W, b, name="affine"):
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ContractError(f"{name}: input {x.shape} incompatible with weight {W.shape} "
                            f"and bias {b.shape}")
    out = x @ W + b
    return check_finite(out, name), (x, W)


def affine_backward(dout, cache):
    x, W = _need(cache, "affine")
    return dout @ W.T, x.T @ dout, dout.sum(axis=0)


# -- activations -------------------------------------------------------------

def elu_forward(x, name="elu"):
    out = np.where(x > 0, x, ELU_ALPHA * np.expm1(np.minimum(x, 0.0)))
    return check_finite(out, name), (x, out)


def elu_backward(dout, cache):
    x, out = _need(cache, "elu")
    return dout * np.where(x > 0, 1.0, out + ELU_ALPHA)


def sigmoid_forward(x, name="sigmoid"):
    out = expit(x)
    return check_finite(out, name), out


def sigmoid_backward(dout, cache):
    out = _need(cache, "sigmoid")
    return dout * out * (1.0 - out)


def softmax_forward(x, name="softmax"):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return check_finite(out, name), out


def softmax_backward(dout, cache):
    out = _need(cache, "softmax")
    return out * (dout - (dout * out).sum(axis=-1, keepdims=True))


# -- structural ----------------------------------------------------------------

def embedding_forward(ids, table, name="embedding_lookup"):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"{name}: id out of range [0, {table.shape[0]})")
    return table[ids], (ids, table.shape)


def embedding_backward(dout, cache):
    """Scatter-add upstream rows into a dense table gradient."""
    ids, shape = _need(cache, "embedding_lookup")
    flat_ids = ids.ravel()
    d = dout.reshape(flat_ids.size, shape[1])
    grad = np.empty(shape)
    for k in range(shape[1]):
        grad[:, k] = np.bincount(flat_ids, weights=d[:, k], minlength=shape[0])
    return grad


def mul_forward(a, b, name="elementwise_mul"):
    return check_finite(a * b, name), (a, b)


def mul_backward(dout, cache):
    a, b = _need(cache, "elementwise_mul")
    da, db = dout * b, dout * a
    # undo broadcasting
    return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def concat_forward(parts, axis=-1):
    sizes = [p.shape[axis] for p in parts]
    return np.concatenate(parts, axis=axis), (sizes, axis)


def concat_backward(dout, cache):
    sizes, axis = _need(cache, "concat")
    return np.split(dout, np.cumsum(sizes)[:-1], axis=axis)


def reduce_mean_per_field_forward(x):
    """(n, fields, dim) -> (n, fields): squeeze each field to its mean."""
    return x.mean(axis=-1), x.shape


def reduce_mean_per_field_backward(dout, cache):
    shape = _need(cache, "reduce_mean_per_field")
    return np.broadcast_to(dout[..., None] / shape[-1], shape).copy()


LAYERS = {
    "affine": (affine_forward, affine_backward),
    "elu": (elu_forward, elu_backward),
    "sigmoid": (sigmoid_forward, sigmoid_backward),
    "softmax": (softmax_forward, softmax_backward),
    "embedding_lookup": (embedding_forward, embedding_backward),
    "elementwise_mul": (mul_forward, mul_backward),
    "concat": (concat_forward, concat_backward),
    "reduce_mean_per_field": (reduce_mean_per_field_forward, reduce_mean_per_field_backward),
}


# -- losses --------------------------------------------------------------------

def loss_bce(p, y):
    """Mean binary cross-entropy and its gradient w.r.t. ``p``.

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]``; through a sigmoid the gradient
    w.r.t. the logit reduces to ``(p - y) / n``.
    """
    p = np.clip(np.asarray(p, dtype=float), PROB_CLIP, 1.0 - PROB_CLIP)
    y = np.asarray(y, dtype=float)
    n = p.size
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    dp = (p - y) / (p * (1.0 - p)) / n
    return float(loss), dp


def loss_softmax_ce(probs, y):
    """Mean categorical cross-entropy of row-wise probabilities against class ids.

    Returns the loss and the gradient w.r.t. the pre-softmax logits.
    """
    probs = np.asarray(probs, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    n = probs.shape[0]
    picked = np.clip(probs[np.arange(n), y], PROB_CLIP, 1.0)
    loss = -np.mean(np.log(picked))
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    return float(loss), dlogits / n


# -- init ------------------------------------------------------------------------

def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# -- Adam ------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state

    def copy(self):
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.t,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, in place. Returns ``(params, state)``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape:
            raise ContractError(f"gradient for '{k}' has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
