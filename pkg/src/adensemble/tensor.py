"""Layer primitives with hand-written forward and backward passes.

Tensors are plain ``numpy`` arrays in NHWC layout. Production code runs in
float32; every primitive preserves the floating dtype of its input so the
same code can be exercised in float64 by the gradient checker.

Each ``*_forward``-style function returns ``(output, cache)`` and the
matching ``*_backward`` consumes that cache. Caches are tuples and should be
treated as opaque.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateBatchError, GradientError, LabelError, ShapeError

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99
CE_CLAMP = 1e-12

# upper bound on the im2col buffer, in elements, before conv2d chunks the batch
_COLS_BUDGET = 1 << 24


def as_float(x) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float32)
    return x


# --------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, H: int, W: int) -> np.ndarray:
    """Gather 3x3 patches of a padded NHWC batch into (N*H*W, 9*C) rows.

    Column order is (ky, kx, c), matching ``w.reshape(9*C, Cout)``.
    """
    N, C = xp.shape[0], xp.shape[3]
    cols = np.empty((N, H, W, 3, 3, C), dtype=xp.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky, kx, :] = xp[:, ky:ky + H, kx:kx + W, :]
    return cols.reshape(N * H * W, 9 * C)


def _batch_chunks(N: int, per_sample: int):
    step = max(1, _COLS_BUDGET // max(per_sample, 1))
    for start in range(0, N, step):
        yield slice(start, min(N, start + step))


def conv2d(x, w, b):
    """3x3 convolution, stride 1, zero "same" padding.

    Parameters
    ----------
    x : array (N, H, W, Cin)
    w : array (3, 3, Cin, Cout)
    b : array (Cout,)

    Returns
    -------
    y : array (N, H, W, Cout)
    cache : opaque
    """
    x = as_float(x)
    w = np.asarray(w, dtype=x.dtype)
    b = np.asarray(b, dtype=x.dtype)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got shape {x.shape}")
    if w.ndim != 4 or w.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d kernel must be (3, 3, Cin, Cout), got {w.shape}")
    N, H, W, C = x.shape
    if w.shape[2] != C:
        raise ShapeError(
            f"conv2d channel mismatch: input has {C} channels, kernel expects {w.shape[2]}")
    Cout = w.shape[3]
    if b.shape != (Cout,):
        raise ShapeError(f"conv2d bias must be ({Cout},), got {b.shape}")

    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    w2 = w.reshape(9 * C, Cout)
    y = np.empty((N, H, W, Cout), dtype=x.dtype)
    for sl in _batch_chunks(N, H * W * 9 * C):
        n = sl.stop - sl.start
        cols = _im2col(xp[sl], H, W)
        y[sl] = (cols @ w2).reshape(n, H, W, Cout)
    y += b
    return y, (xp, w)


def conv2d_backward(cache, dy):
    """Returns ``(dx, dw, db)`` for :func:`conv2d`."""
    xp, w = cache
    N, Hp, Wp, C = xp.shape
    H, W = Hp - 2, Wp - 2
    Cout = w.shape[3]
    dy = np.asarray(dy, dtype=xp.dtype)
    if dy.shape != (N, H, W, Cout):
        raise ShapeError(f"conv2d_backward: dy shape {dy.shape} != {(N, H, W, Cout)}")

    w2 = w.reshape(9 * C, Cout)
    dw = np.zeros((9 * C, Cout), dtype=xp.dtype)
    dxp = np.zeros_like(xp)
    for sl in _batch_chunks(N, H * W * 9 * C):
        n = sl.stop - sl.start
        dy2 = dy[sl].reshape(n * H * W, Cout)
        cols = _im2col(xp[sl], H, W)
        dw += cols.T @ dy2
        dcols = (dy2 @ w2.T).reshape(n, H, W, 3, 3, C)
        part = dxp[sl]
        for ky in range(3):
            for kx in range(3):
                part[:, ky:ky + H, kx:kx + W, :] += dcols[:, :, :, ky, kx, :]
    db = dy.sum(axis=(0, 1, 2))
    return dxp[:, 1:-1, 1:-1, :], dw.reshape(w.shape), db


# --------------------------------------------------------------------------
# pooling


def pool2d(x, mode: str = "max"):
    """2x2 pooling with stride 2; odd trailing rows/columns are dropped."""
    x = as_float(x)
    if x.ndim != 4:
        raise ShapeError(f"pool2d expects NHWC input, got shape {x.shape}")
    N, H, W, C = x.shape
    if H < 2 or W < 2:
        raise ShapeError(f"pool2d needs H, W >= 2, got {H}x{W}")
    if mode not in ("max", "avg"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    H2, W2 = H // 2, W // 2
    # windows as (N, H2, W2, C, 4) in row-major scan order
    win = (x[:, :2 * H2, :2 * W2, :]
           .reshape(N, H2, 2, W2, 2, C)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(N, H2, W2, C, 4))
    if mode == "max":
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    else:
        idx = None
        y = win.mean(axis=-1, dtype=x.dtype)
    return y, (x.shape, mode, idx)


def pool2d_backward(cache, dy):
    shape, mode, idx = cache
    N, H, W, C = shape
    H2, W2 = H // 2, W // 2
    dy = np.asarray(dy)
    if mode == "max":
        dwin = np.zeros((N, H2, W2, C, 4), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    else:
        dwin = np.repeat((dy * 0.25)[..., None], 4, axis=-1)
    dx = np.zeros(shape, dtype=dy.dtype)
    dx[:, :2 * H2, :2 * W2, :] = (dwin.reshape(N, H2, W2, C, 2, 2)
                                  .transpose(0, 1, 4, 2, 5, 3)
                                  .reshape(N, 2 * H2, 2 * W2, C))
    return dx


# --------------------------------------------------------------------------
# batch normalization


def batchnorm(x, gamma, beta, moving_mean, moving_var, mode: str = "train",
              eps: float = BN_EPSILON, momentum: float = BN_MOMENTUM):
    """Per-channel batch normalization over every axis but the last.

    Returns ``(y, cache, (new_moving_mean, new_moving_var))``. In infer mode the
    moving statistics are returned unchanged.
    """
    x = as_float(x)
    C = x.shape[-1]
    for name, v in (("gamma", gamma), ("beta", beta),
                    ("moving_mean", moving_mean), ("moving_var", moving_var)):
        if np.shape(v) != (C,):
            raise ShapeError(f"batchnorm {name} must have shape ({C},), got {np.shape(v)}")
    gamma = np.asarray(gamma, dtype=x.dtype)
    beta = np.asarray(beta, dtype=x.dtype)
    axes = tuple(range(x.ndim - 1))

    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatchError("batchnorm in train mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_mean = (momentum * moving_mean + (1 - momentum) * mean).astype(np.asarray(moving_mean).dtype)
        new_var = (momentum * moving_var + (1 - momentum) * var).astype(np.asarray(moving_var).dtype)
    elif mode == "infer":
        mean = np.asarray(moving_mean, dtype=x.dtype)
        var = np.asarray(moving_var, dtype=x.dtype)
        new_mean, new_var = moving_mean, moving_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean) * inv_std
    y = gamma * xhat + beta
    return y, (xhat, inv_std, gamma, mode), (new_mean, new_var)


def batchnorm_backward(cache, dy):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, mode = cache
    axes = tuple(range(xhat.ndim - 1))
    dy = np.asarray(dy, dtype=xhat.dtype)
    dbeta = dy.sum(axis=axes)
    dgamma = (dy * xhat).sum(axis=axes)
    if mode == "infer":
        return dy * gamma * inv_std, dgamma, dbeta
    m = xhat.size // xhat.shape[-1]
    dxhat = dy * gamma
    dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# dense, activations, reshapes


def dense(x, w, b):
    x = as_float(x)
    w = np.asarray(w, dtype=x.dtype)
    b = np.asarray(b, dtype=x.dtype)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense bias must be ({w.shape[1]},), got {b.shape}")
    return x @ w + b, (x, w)


def dense_backward(cache, dy):
    x, w = cache
    dy = np.asarray(dy, dtype=x.dtype)
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def relu(x):
    x = as_float(x)
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), mask


def relu_backward(cache, dy):
    return np.where(cache, dy, 0).astype(np.asarray(dy).dtype)


def flatten(x):
    x = as_float(x)
    return x.reshape(x.shape[0], -1), x.shape


def unflatten(cache, dy):
    return np.asarray(dy).reshape(cache)


flatten_backward = unflatten


def softmax(scores):
    s = as_float(scores)
    if s.ndim != 2 or s.shape[1] < 2:
        raise ShapeError(f"softmax expects (N, c>=2) scores, got {s.shape}")
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs, onehot):
    """Mean categorical cross-entropy and the fused gradient w.r.t. the logits.

    Returns ``(loss, dscores)`` with ``dscores = (probs - onehot) / N``.
    """
    p = as_float(probs)
    y = np.asarray(onehot, dtype=p.dtype)
    if p.shape != y.shape or p.ndim != 2:
        raise ShapeError(f"cross_entropy: probs {p.shape} vs labels {y.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise LabelError("cross_entropy: label rows must be one-hot")
    N = p.shape[0]
    true_p = np.maximum(p[y == 1], CE_CLAMP)
    loss = float(-np.log(true_p.astype(np.float64)).sum() / N)
    return loss, (p - y) / N


# --------------------------------------------------------------------------
# gradient checking


def gradcheck(forward: Callable, inputs: Sequence[np.ndarray], backward: Callable,
              *, seed: int = 0, step: float = 1e-3, dtype=np.float64) -> float:
    """Compare an analytic backward pass against central differences.

    ``forward(*inputs)`` must return ``(y, cache)`` and ``backward(cache, dy)``
    must return one gradient per input (a bare array for single-input layers).
    The scalar probe is ``sum(y * r)`` for a fixed random ``r``.

    Returns the max over every input element of
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    rng = np.random.default_rng(seed)
    inputs = [np.array(a, dtype=dtype) for a in inputs]
    y, cache = forward(*inputs)
    r = rng.standard_normal(np.shape(y)).astype(dtype)
    grads = backward(cache, r)
    if not isinstance(grads, tuple):
        grads = (grads,)
    if len(grads) < len(inputs):
        raise GradientError(f"backward returned {len(grads)} gradients for {len(inputs)} inputs")

    r64 = r.astype(np.float64)

    def probe():
        out, _ = forward(*inputs)
        return float((np.asarray(out, dtype=np.float64) * r64).sum())

    worst = 0.0
    for a, g in zip(inputs, grads):
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise GradientError("analytic gradient contains non-finite values")
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = probe()
            flat[i] = orig - step
            down = probe()
            flat[i] = orig
            # the step actually taken after rounding to the working dtype
            h = float(np.asarray(orig + step, dtype) - np.asarray(orig - step, dtype))
            numeric = (up - down) / h
            worst = max(worst, abs(gflat[i] - numeric) / max(1.0, abs(numeric)))
    return worst
