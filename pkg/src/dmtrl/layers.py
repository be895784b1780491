"""Differentiable neural primitives with explicit forward and backward passes.

Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` consumes the upstream gradient plus that cache.  Convolution
uses valid padding and stride 1; the kernel runs through a patch-matrix
expansion so it shares the matrix-multiply path with the fully connected
layer (a direct-loop reference is kept for oracle testing).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "fc_forward", "fc_backward",
    "conv2d_forward", "conv2d_backward", "conv2d_reference",
    "maxpool2_forward", "maxpool2_backward",
    "relu_forward", "relu_backward",
    "tanh_forward", "tanh_backward",
    "hinge_loss", "softmax_ce_loss",
]


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x @ w + b for a batch of row vectors."""
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"input width {x.shape[1]} != weight rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ValueError(f"bias shape {b.shape} != ({w.shape[1]},)")
    return x @ w + b, (x, w)


def fc_backward(grad_out: np.ndarray, cache, need_grad_x: bool = True):
    x, w = cache
    grad_x = grad_out @ w.T if need_grad_x else None
    grad_w = x.T @ grad_out
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def _patches(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """All valid h x w windows, flattened in (dy, dx, channel) order.

    Output shape: (B, Ho, Wo, h*w*C), matching k.reshape(h*w*C, M).
    """
    win = sliding_window_view(x, (h, w), axis=(1, 2))  # B,Ho,Wo,C,h,w
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        x.shape[0], win.shape[1], win.shape[2], -1
    )


def conv2d_forward(x: np.ndarray, k: np.ndarray, b: np.ndarray):
    """Valid cross-correlation of a B x Hi x Wi x C batch with an
    H x W x C x M kernel stack, stride 1."""
    if x.ndim != 4 or k.ndim != 4:
        raise ValueError("conv2d expects 4-way input and kernel")
    hk, wk, cin, m = k.shape
    if x.shape[3] != cin:
        raise ValueError(f"channel mismatch: input {x.shape[3]}, kernel {cin}")
    if x.shape[1] < hk or x.shape[2] < wk:
        raise ValueError(f"kernel {hk}x{wk} larger than input {x.shape[1]}x{x.shape[2]}")
    if b.shape != (m,):
        raise ValueError(f"bias shape {b.shape} != ({m},)")
    p = _patches(x, hk, wk)
    out = p @ k.reshape(-1, m) + b
    return out, (x.shape, p, k)


def conv2d_backward(grad_out: np.ndarray, cache, need_grad_x: bool = True):
    x_shape, p, k = cache
    hk, wk, cin, m = k.shape
    b_, ho, wo, _ = grad_out.shape
    gf = grad_out.reshape(-1, m)
    grad_b = gf.sum(axis=0)
    grad_k = (p.reshape(-1, hk * wk * cin).T @ gf).reshape(k.shape)
    if not need_grad_x:
        return None, grad_k, grad_b
    # input gradient as a full correlation: pad the upstream gradient by the
    # kernel extent and correlate with the spatially flipped kernel
    gpad = np.zeros((b_, ho + 2 * (hk - 1), wo + 2 * (wk - 1), m))
    gpad[:, hk - 1 : hk - 1 + ho, wk - 1 : wk - 1 + wo, :] = grad_out
    kflip = np.ascontiguousarray(k[::-1, ::-1, :, :].transpose(0, 1, 3, 2))
    grad_x = _patches(gpad, hk, wk) @ kflip.reshape(-1, cin)
    return grad_x, grad_k, grad_b


def conv2d_reference(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Quadruple-loop convolution kept as an independent oracle."""
    bsz, hi, wi, _ = x.shape
    hk, wk, _, m = k.shape
    ho, wo = hi - hk + 1, wi - wk + 1
    out = np.zeros((bsz, ho, wo, m))
    for n in range(bsz):
        for i in range(ho):
            for j in range(wo):
                window = x[n, i:i + hk, j:j + wk, :]
                for f in range(m):
                    out[n, i, j, f] = np.sum(window * k[:, :, :, f]) + b[f]
    return out


def maxpool2_forward(x: np.ndarray):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""
    bsz, hi, wi, c = x.shape
    ho, wo = hi // 2, wi // 2
    win = x[:, : 2 * ho, : 2 * wo, :].reshape(bsz, ho, 2, wo, 2, c)
    win = win.transpose(0, 1, 3, 2, 4, 5).reshape(bsz, ho, wo, 4, c)
    arg = win.argmax(axis=3)  # first max wins in (r0c0, r0c1, r1c0, r1c1) order
    out = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, (x.shape, arg)


def maxpool2_backward(grad_out: np.ndarray, cache):
    x_shape, arg = cache
    bsz, ho, wo, c = grad_out.shape
    scat = np.zeros((bsz, ho, wo, 4, c))
    np.put_along_axis(scat, arg[:, :, :, None, :], grad_out[:, :, :, None, :], axis=3)
    scat = scat.reshape(bsz, ho, wo, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    grad_x = np.zeros(x_shape)
    grad_x[:, : 2 * ho, : 2 * wo, :] = scat.reshape(bsz, 2 * ho, 2 * wo, c)
    return grad_x


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), (x,)


def relu_backward(grad_out: np.ndarray, cache):
    (x,) = cache
    return grad_out * (x > 0.0)


def tanh_forward(x: np.ndarray):
    y = np.tanh(x)
    return y, (y,)


def tanh_backward(grad_out: np.ndarray, cache):
    (y,) = cache
    return grad_out * (1.0 - y * y)


def hinge_loss(y_hat, y):
    """max(0, 1 - y_hat * y) per element for labels y in {-1, +1}.

    Returns (loss, d loss / d y_hat); the subgradient at the kink is 0.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("hinge labels must be -1 or +1")
    margin = y_hat * y
    loss = np.maximum(0.0, 1.0 - margin)
    grad = np.where(margin < 1.0, -y, 0.0)
    return loss, grad


def softmax_ce_loss(logits: np.ndarray, labels):
    """Cross entropy of softmax(logits) against integer class labels.

    Accepts a single logit vector with a scalar label or a batch (B x C with
    B labels).  Stabilised by max subtraction.  Returns per-sample losses and
    the gradient with respect to the logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    c = z.shape[1]
    if np.any(lab < 0) or np.any(lab >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    rows = np.arange(z.shape[0])
    loss = -log_p[rows, lab]
    grad = np.exp(log_p)
    grad[rows, lab] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad
