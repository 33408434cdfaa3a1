"""Dtype-generic NumPy building blocks with hand-written backward passes.

Conventions:
  * images / feature maps are channels-last: (B, H, W, C)
  * linear weights are (out_features, in_features): y = x @ w.T + b
  * conv weights are (kh, kw, c_in, c_out); transposed-conv weights are
    (kh, kw, c_out, c_in) where c_out is the upsampled (larger-grid) side
  * all ops keep the dtype of their inputs, so the same code runs the
    float32 production path and the float64 gradient-check path
"""

from __future__ import annotations

import numpy as np

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def rng_for(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def gelu(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * (x * x2)))
    return 0.5 * x * (1.0 + t)


def gelu_fwd(x: np.ndarray):
    """gelu(x) plus the tanh term, cached so backward avoids recomputing it."""
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * (x * x2)))
    return 0.5 * x * (1.0 + t), t


def gelu_grad(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    x2 = x * x
    if t is None:
        t = np.tanh(_GELU_C * (x + _GELU_A * (x * x2)))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(dprobs: np.ndarray, probs: np.ndarray, axis: int = -1) -> np.ndarray:
    inner = np.sum(dprobs * probs, axis=axis, keepdims=True)
    return probs * (dprobs - inner)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w.T + b


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    dx = dy @ w
    flat_x = x.reshape(-1, x.shape[-1])
    flat_dy = dy.reshape(-1, dy.shape[-1])
    dw = flat_dy.T @ flat_x
    db = flat_dy.sum(axis=0)
    return dx, dw, db


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = xhat * gain + bias
    return y, (xhat, inv_std, gain)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv_std, gain = cache
    d = xhat.shape[-1]
    dxhat = dy * gain
    dgain = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbias = dy.reshape(-1, d).sum(axis=0)
    dx = (
        inv_std
        / d
        * (d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    )
    return dx, dgain, dbias


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Extract (kh, kw) patches: (B, H, W, C) -> (B, Ho, Wo, kh*kw*C)."""
    b, h, w, c = x.shape
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(w, kw, stride, pad)
    xp = _pad_hw(x, pad)
    cols = np.empty((b, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    return cols.reshape(b, ho, wo, kh * kw * c)


def col2im(cols: np.ndarray, out_hw: tuple[int, int], kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back to (B, H, W, C)."""
    b, ho, wo, k = cols.shape
    c = k // (kh * kw)
    h, w = out_hw
    cols6 = cols.reshape(b, ho, wo, kh, kw, c)
    xp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += cols6[:, :, :, i, j, :]
    if pad == 0:
        return xp
    return xp[:, pad : pad + h, pad : pad + w, :]


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int):
    """Strided convolution. Returns (y, cols) with cols cached for backward."""
    kh, kw, c_in, c_out = w.shape
    cols = im2col(x, kh, kw, stride, pad)
    y = cols @ w.reshape(kh * kw * c_in, c_out) + b
    return y, cols


def conv2d_backward(dy: np.ndarray, cols: np.ndarray, x_shape, w: np.ndarray, stride: int, pad: int):
    kh, kw, c_in, c_out = w.shape
    wm = w.reshape(kh * kw * c_in, c_out)
    flat_dy = dy.reshape(-1, c_out)
    dw = (cols.reshape(-1, kh * kw * c_in).T @ flat_dy).reshape(w.shape)
    db = flat_dy.sum(axis=0)
    dcols = dy @ wm.T
    dx = col2im(dcols, (x_shape[1], x_shape[2]), kh, kw, stride, pad)
    return dx, dw, db


def conv2d_transpose(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Transposed (fractionally strided) convolution, the adjoint of conv2d.

    x: (B, Hs, Ws, c_in) small grid; w: (kh, kw, c_out, c_in);
    output: (B, (Hs-1)*stride + kh - 2*pad, ..., c_out).
    """
    b_, hs, ws, c_in = x.shape
    kh, kw, c_out, _ = w.shape
    h = (hs - 1) * stride + kh - 2 * pad
    wdt = (ws - 1) * stride + kw - 2 * pad
    wm = w.reshape(kh * kw * c_out, c_in)
    cols = x @ wm.T  # (B, Hs, Ws, kh*kw*c_out)
    y = col2im(cols, (h, wdt), kh, kw, stride, pad)
    return y + b


def conv2d_transpose_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    kh, kw, c_out, c_in = w.shape
    wm = w.reshape(kh * kw * c_out, c_in)
    dyp = im2col(dy, kh, kw, stride, pad)  # (B, Hs, Ws, kh*kw*c_out)
    dx = dyp @ wm
    dw = (dyp.reshape(-1, kh * kw * c_out).T @ x.reshape(-1, c_in)).reshape(w.shape)
    db = dy.reshape(-1, c_out).sum(axis=0)
    return dx, dw, db


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for key in sorted(grads):
        g = grads[key]
        total += float(np.sum(g.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global norm of at most ``max_norm``."""
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for key in grads:
            grads[key] *= np.asarray(scale, dtype=grads[key].dtype)
    return norm


class SgdMomentum:
    """Classic momentum SGD over a dict of parameter tensors.

    v <- momentum * v + g; p <- p - lr * v. momentum=0 is plain SGD.
    Velocity buffers are created lazily per key, in the parameter's dtype.
    """

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for key in sorted(grads):
            g = grads[key]
            if self.momentum != 0.0:
                v = self.velocity.get(key)
                if v is None:
                    v = np.zeros_like(params[key])
                    self.velocity[key] = v
                v *= self.momentum
                v += g
                g = v
            params[key] -= np.asarray(lr, dtype=params[key].dtype) * g
