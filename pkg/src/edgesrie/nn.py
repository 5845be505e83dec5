"""Minimal dense-tensor network engine: forward ops, analytic gradients,
L2 loss, and AdamW.

Tensors are numpy arrays of shape (n, c, h, w), float32 in production.
Every op also accepts float64 inputs and then computes entirely in float64;
that shadow mode exists for finite-difference gradient checking.

Convolution is the cross-correlation convention (no kernel flip), stride 1,
zero padding 1 for 3x3 kernels and 0 for 1x1, so spatial extents are
preserved. Each output element is a single dot product over the patch axis
ordered (input channel, kernel row, kernel column); the reduction order is
fixed and does not depend on any worker-thread setting, so repeated calls
are bit-identical.

There is no autograd graph: the network topology is fixed, so backward
passes are composed explicitly by the model module.
"""

from __future__ import annotations

import numpy as np

from .errors import OddSpatialDims, ShapeMismatch

LEAKY_SLOPE = 0.1


def _check4(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeMismatch(f"{what} must be 4-D (n,c,h,w), got {x.shape}")


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    """Patches of x as (n, h*w, c*kh*kw), patch axis ordered (c, dy, dx)."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c * kh * kw)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-size convolution, weight (out_c, in_c, kh, kw), bias (out_c,)."""
    _check4(x, "conv input")
    oc, ic, kh, kw = w.shape
    if x.shape[1] != ic:
        raise ShapeMismatch(f"conv input has {x.shape[1]} channels, weight wants {ic}")
    n, _, h, wd = x.shape
    col = _im2col(x, kh, kw, kh // 2)
    flat = w.reshape(oc, ic * kh * kw)
    y = col @ flat.T + b
    return y.transpose(0, 2, 1).reshape(n, oc, h, wd)


def conv2d_backward(x, w, grad_out):
    """Gradients of conv2d_forward: returns (grad_x, grad_w, grad_b)."""
    _check4(grad_out, "conv grad")
    oc, ic, kh, kw = w.shape
    n, _, h, wd = x.shape
    if grad_out.shape != (n, oc, h, wd):
        raise ShapeMismatch(f"conv grad shape {grad_out.shape} != {(n, oc, h, wd)}")
    pad = kh // 2
    go = grad_out.reshape(n, oc, h * wd)
    col = _im2col(x, kh, kw, pad)
    grad_w = np.matmul(go, col).sum(axis=0).reshape(oc, ic, kh, kw)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_col = np.matmul(go.transpose(0, 2, 1), w.reshape(oc, -1))
    gcol = grad_col.reshape(n, h, wd, ic, kh, kw)
    gx = np.zeros((n, ic, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            gx[:, :, dy : dy + h, dx : dx + wd] += gcol[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return gx, grad_w, grad_b


def maxpool2_forward(x: np.ndarray):
    """2x2 max pooling, stride 2. Returns (pooled, argmax) where argmax
    indexes the window position in row-major order (ties take the first)."""
    _check4(x, "pool input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise OddSpatialDims(f"maxpool needs even extents, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2_backward(x: np.ndarray, idx: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if grad_out.shape != idx.shape:
        raise ShapeMismatch(f"pool grad shape {grad_out.shape} != {idx.shape}")
    gwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(gwin, idx[..., None], grad_out[..., None], axis=-1)
    gwin = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return gwin.reshape(n, c, h, w)


def upconv2x2_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-2 transposed convolution with a 2x2 kernel (doubles h and w).

    Windows do not overlap, so out[n, o, 2i+dy, 2j+dx] =
    sum_c x[n, c, i, j] * w[o, c, dy, dx] + b[o].
    """
    _check4(x, "upconv input")
    oc, ic, kh, kw = w.shape
    if (kh, kw) != (2, 2):
        raise ShapeMismatch("upconv kernel must be 2x2")
    if x.shape[1] != ic:
        raise ShapeMismatch(f"upconv input has {x.shape[1]} channels, weight wants {ic}")
    n, _, h, wd = x.shape
    y = np.tensordot(x, w, axes=([1], [1]))  # (n, h, w, oc, 2, 2)
    y = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, oc, 2 * h, 2 * wd)
    return y + b[:, None, None]


def upconv2x2_backward(x, w, grad_out):
    oc, ic, _, _ = w.shape
    n, _, h, wd = x.shape
    if grad_out.shape != (n, oc, 2 * h, 2 * wd):
        raise ShapeMismatch(f"upconv grad shape {grad_out.shape} != {(n, oc, 2 * h, 2 * wd)}")
    go = grad_out.reshape(n, oc, h, 2, wd, 2).transpose(0, 1, 2, 4, 3, 5)  # (n,oc,h,w,2,2)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_w = np.tensordot(go, x, axes=([0, 2, 3], [0, 2, 3]))  # (oc,2,2,ic)
    grad_w = grad_w.transpose(0, 3, 1, 2)
    grad_x = np.tensordot(go, w, axes=([1, 4, 5], [0, 2, 3]))  # (n,h,w,ic)
    return grad_x.transpose(0, 3, 1, 2), grad_w, grad_b


def leaky_relu_forward(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if x.shape != grad_out.shape:
        raise ShapeMismatch(f"leaky grad shape {grad_out.shape} != {x.shape}")
    return grad_out * np.where(x > 0, 1.0, LEAKY_SLOPE).astype(grad_out.dtype)


def concat_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatch(f"concat extents differ: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_backward(a: np.ndarray, b: np.ndarray, grad_out: np.ndarray):
    ca = a.shape[1]
    if grad_out.shape[1] != ca + b.shape[1]:
        raise ShapeMismatch("concat grad channel count mismatch")
    return grad_out[:, :ca], grad_out[:, ca:]


def l2_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared difference and its gradient w.r.t. pred."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return loss, grad


class AdamW:
    """Decoupled-weight-decay Adam over a dict of parameter arrays.

    Weight decay multiplies parameters by (1 - lr*wd) separately from the
    adaptive step; moments are bias-corrected.
    """

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"grad shape {g.shape} != param shape {p.shape} for {name}")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
