"""Deterministic tensor kernels with reverse-mode gradients.

Tensors are ``(n, c, h, w)`` numpy arrays, row-major with ``w`` (time) fastest.
Each kernel comes as a pure ``*_forward`` / ``*_backward`` pair; the thin
wrappers (``conv2d``, ``batchnorm2d``, ...) additionally record their backward
step on a :class:`Tape` when one is given.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp

from silentwear.errors import GraphNotRecorded, LabelOutOfRange, ShapeMismatch


class Padding(str, Enum):
    VALID = "valid"
    SAME_TIME = "same_time"


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class Gradients:
    params: Dict[str, np.ndarray]
    input: np.ndarray


class Tape:
    """Execution record of a sequential forward pass."""

    def __init__(self):
        self._steps: List[Callable[[np.ndarray], np.ndarray]] = []
        self._grads: Dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._steps)

    def push(self, step: Callable[[np.ndarray], np.ndarray]) -> None:
        self._steps.append(step)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        if name in self._grads:
            self._grads[name] = self._grads[name] + grad
        else:
            self._grads[name] = grad

    def backward(self, grad_output: np.ndarray) -> Gradients:
        """Run the recorded steps in reverse; returns parameter and input grads."""
        if not self._steps:
            raise GraphNotRecorded("no forward pass was recorded on this tape")
        self._grads = {}
        g = grad_output
        for step in reversed(self._steps):
            g = step(g)
        return Gradients(params=dict(self._grads), input=g)


def _check4(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeMismatch(f"{what} must be 4-D (n, c, h, w), got shape {x.shape}")


def same_time_pad(kw: int) -> Tuple[int, int]:
    """Zero padding on the time axis keeping ``w``; the extra pad goes right."""
    left = (kw - 1) // 2
    return left, kw - 1 - left


# conv2d

def conv2d_forward(x, weight, bias, padding=Padding.VALID):
    _check4(x, "input")
    _check4(weight, "weight")
    k, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, weight expects {c}")
    if bias.shape != (k,):
        raise ShapeMismatch(f"bias shape {bias.shape}, expected ({k},)")

    left = 0
    if Padding(padding) is Padding.SAME_TIME:
        left, right = same_time_pad(kw)
        xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (left, right)))
    else:
        xp = x
    if kh > xp.shape[2] or kw > xp.shape[3]:
        raise ShapeMismatch(f"kernel {(kh, kw)} does not fit input {xp.shape[2:]}")

    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (n, c, ho, wo, kh, kw)
    y = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))  # (n, ho, wo, k)
    y = y.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    cache = (x.shape, xp.shape, win, weight, left)
    return np.ascontiguousarray(y, dtype=x.dtype), cache


def conv2d_backward(dy, cache):
    x_shape, xp_shape, win, weight, left = cache
    _, _, kh, kw = weight.shape
    ho, wo = dy.shape[2], dy.shape[3]

    db = dy.sum(axis=(0, 2, 3))
    dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))  # (k, c, kh, kw)
    dxp = np.zeros(xp_shape, dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(dy, weight[:, :, i, j], axes=([1], [0]))
            dxp[:, :, i:i + ho, j:j + wo] += contrib.transpose(0, 3, 1, 2)
    dx = dxp[:, :, :, left:left + x_shape[3]]
    return np.ascontiguousarray(dx), dw.astype(weight.dtype), db


def conv2d(x, weight, bias, padding=Padding.VALID, tape=None, key="conv"):
    y, cache = conv2d_forward(x, weight, bias, padding)
    if tape is not None:
        def step(dy):
            dx, dw, db = conv2d_backward(dy, cache)
            tape.accumulate(f"{key}.weight", dw)
            tape.accumulate(f"{key}.bias", db)
            return dx
        tape.push(step)
    return y


# batchnorm2d

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray


def batchnorm2d_forward(x, gamma, beta, running: RunningStats, mode=Mode.EVAL,
                        eps=1e-5, momentum=0.1):
    """Returns ``(y, updated running stats, cache)``; inputs are not mutated."""
    _check4(x, "input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"gamma/beta must have shape ({c},)")

    if Mode(mode) is Mode.TRAIN:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        unbiased = var * m / (m - 1) if m > 1 else var
        running = RunningStats(
            mean=((1 - momentum) * running.mean + momentum * mu).astype(running.mean.dtype),
            var=((1 - momentum) * running.var + momentum * unbiased).astype(running.var.dtype),
        )
        train = True
    else:
        mu, var = running.mean, running.var
        train = False

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, gamma, inv_std, train)
    return y.astype(x.dtype, copy=False), running, cache


def batchnorm2d_backward(dy, cache):
    xhat, gamma, inv_std, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if train:
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
    else:
        dx = dxhat * inv_std[None, :, None, None]
    return dx.astype(dy.dtype, copy=False), dgamma, dbeta


def batchnorm2d(x, gamma, beta, running, mode=Mode.EVAL, eps=1e-5, momentum=0.1,
                tape=None, key="bn"):
    y, running, cache = batchnorm2d_forward(x, gamma, beta, running, mode, eps, momentum)
    if tape is not None:
        def step(dy):
            dx, dgamma, dbeta = batchnorm2d_backward(dy, cache)
            tape.accumulate(f"{key}.gamma", dgamma)
            tape.accumulate(f"{key}.beta", dbeta)
            return dx
        tape.push(step)
    return y, running


# relu

def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def relu(x, tape=None):
    y, mask = relu_forward(x)
    if tape is not None:
        tape.push(lambda dy: relu_backward(dy, mask))
    return y


# maxpool2d

def maxpool2d_forward(x, kernel):
    _check4(x, "input")
    kh, kw = kernel
    n, c, h, w = x.shape
    if kh > h or kw > w or kh < 1 or kw < 1:
        raise ShapeMismatch(f"pool kernel {kernel} does not fit input {(h, w)}")
    if kh == 1 and kw == 1:
        return x, None
    ho, wo = h // kh, w // kw
    blocks = (
        x[:, :, :ho * kh, :wo * kw]
        .reshape(n, c, ho, kh, wo, kw)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, kh * kw)
    )
    # first maximum wins, so ties route to the lowest index
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), (x.shape, idx, kh, kw)


def maxpool2d_backward(dy, cache):
    if cache is None:
        return dy
    x_shape, idx, kh, kw = cache
    n, c, ho, wo = dy.shape
    dblocks = np.zeros((n, c, ho, wo, kh * kw), dtype=dy.dtype)
    np.put_along_axis(dblocks, idx[..., None], dy[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :, :ho * kh, :wo * kw] = (
        dblocks.reshape(n, c, ho, wo, kh, kw)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho * kh, wo * kw)
    )
    return dx


def maxpool2d(x, kernel, tape=None):
    y, cache = maxpool2d_forward(x, kernel)
    if tape is not None:
        tape.push(lambda dy: maxpool2d_backward(dy, cache))
    return y


# adaptive average pool

def adaptive_avg_pool_forward(x):
    _check4(x, "input")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeMismatch(f"empty spatial extent {x.shape[2:]}")
    return x.mean(axis=(2, 3), keepdims=True).astype(x.dtype, copy=False), x.shape


def adaptive_avg_pool_backward(dy, x_shape):
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(dy / (h * w), x_shape).copy()


def adaptive_avg_pool(x, tape=None):
    y, shape = adaptive_avg_pool_forward(x)
    if tape is not None:
        tape.push(lambda dy: adaptive_avg_pool_backward(dy, shape))
    return y


def flatten(x, tape=None):
    shape = x.shape
    y = x.reshape(shape[0], -1)
    if tape is not None:
        tape.push(lambda dy: dy.reshape(shape))
    return y


# dense

def dense_forward(x, weight, bias):
    """``y = x @ W + b`` with ``W`` of shape ``(F, K)``; row ``f`` of ``W`` feeds from ``x[f]``."""
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if weight.ndim != 2 or x2.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeMismatch(
            f"dense: x {x.shape}, W {weight.shape}, b {bias.shape} do not agree"
        )
    y = x2 @ weight + bias
    return (y[0] if single else y), (x2, weight, single)


def dense_backward(dy, cache):
    x2, weight, single = cache
    dy2 = np.atleast_2d(dy)
    dx = dy2 @ weight.T
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    return (dx[0] if single else dx), dw, db


def dense(x, weight, bias, tape=None, key="dense"):
    y, cache = dense_forward(x, weight, bias)
    if tape is not None:
        def step(dy):
            dx, dw, db = dense_backward(dy, cache)
            tape.accumulate(f"{key}.weight", dw)
            tape.accumulate(f"{key}.bias", db)
            return dx
        tape.push(step)
    return y


# loss

def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    return np.exp(z - logsumexp(z, axis=axis, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient ``(softmax - onehot) / n``.

    A 1-D ``logits`` vector with a scalar label gives a scalar loss and a 1-D
    gradient.
    """
    single = np.ndim(logits) == 1
    z = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = z.shape
    if y.shape != (n,):
        raise ShapeMismatch(f"{n} logit rows but {y.shape[0]} labels")
    if np.any(y < 0) or np.any(y >= c):
        raise LabelOutOfRange(f"labels must lie in [0, {c}), got {y.min()}..{y.max()}")

    zf = z.astype(np.float64)
    logp = zf - logsumexp(zf, axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(-logp[rows, y].mean())
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad = (grad / n).astype(z.dtype, copy=False)
    return loss, (grad[0] if single else grad)


# optimizer

@dataclass
class AdamState:
    """Adam moments and hyperparameters; weight decay is coupled L2."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays and a new state."""
    unknown = set(grads) - set(params)
    if unknown:
        raise ShapeMismatch(f"gradients for unknown parameters: {sorted(unknown)}")

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, dict(state.m), dict(state.v)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            p.dtype, copy=False
        )
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    return new_params, replace(state, t=t, m=new_m, v=new_v)
