"""Dense layer primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects.  Every layer is a pair of
functions: ``<layer>(...)`` returns ``(out, cache)`` and
``<layer>_backward(dout, cache)`` returns the gradients in argument order.
Training runs in float32; gradient checking runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


class StateError(RuntimeError):
    """Raised when a stateful op is used before its state exists."""


def _pair(v) -> tuple[int, int]:
    if np.isscalar(v):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# convolution helpers

def _windows(x, kh, kw, stride, pad):
    sh, sw = stride
    ph, pw = pad
    if sh <= 0 or sw <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if ph < 0 or pw < 0:
        raise ValueError(f"padding must be non-negative, got {pad}")
    if kh > x.shape[2] + 2 * ph or kw > x.shape[3] + 2 * pw:
        raise DimensionError(
            f"kernel ({kh},{kw}) larger than padded input "
            f"({x.shape[2] + 2 * ph},{x.shape[3] + 2 * pw})")
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    return x.shape, win  # win: (N, C, Ho, Wo, kh, kw)


def _col2im(dwin, padded_shape, stride, pad):
    """Scatter-add window gradients ``(N, Ho, Wo, C, kh, kw)`` back onto the input."""
    n, ho, wo, c, kh, kw = dwin.shape
    sh, sw = stride
    ph, pw = pad
    dx = np.zeros(padded_shape, dtype=dwin.dtype)
    if ho * wo <= kh * kw:
        for i in range(ho):
            for j in range(wo):
                dx[:, :, i * sh:i * sh + kh, j * sw:j * sw + kw] += dwin[:, i, j]
    else:
        for a in range(kh):
            for b in range(kw):
                dx[:, :, a:a + sh * (ho - 1) + 1:sh, b:b + sw * (wo - 1) + 1:sw] += \
                    dwin[..., a, b].transpose(0, 3, 1, 2)
    return dx[:, :, ph:padded_shape[2] - ph, pw:padded_shape[3] - pw]


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# layers

def conv2d(x, w, b, stride=1, pad=0):
    """Cross-correlation of ``x`` (N, Cin, H, W) with ``w`` (Cout, Cin, kH, kW)."""
    stride, pad = _pair(stride), _pair(pad)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and kernels")
    n, cin = x.shape[:2]
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError(f"kernel expects {wcin} input channels, got {cin}")
    if b.shape != (cout,):
        raise DimensionError(f"bias shape {b.shape} != ({cout},)")
    padded_shape, win = _windows(x, kh, kw, stride, pad)
    ho, wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    out = cols @ w.reshape(cout, -1).T
    out += b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    cache = (cols, w, padded_shape, stride, pad, (n, ho, wo))
    return out, cache


def conv2d_backward(dout, cache, need_input_grad=True):
    cols, w, padded_shape, stride, pad, (n, ho, wo) = cache
    cout, cin, kh, kw = w.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    db = dmat.sum(axis=0)
    dw = (dmat.T @ cols).reshape(w.shape)
    dx = None
    if need_input_grad:
        dcols = (dmat @ w.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)
        dx = _col2im(dcols, padded_shape, stride, pad)
    return dx, dw, db


def depthwise_conv2d(x, w, b, stride=1, pad=0):
    """Per-channel convolution; ``w`` is (Cin, M, kH, kW), output channel ``c*M + m``."""
    stride, pad = _pair(stride), _pair(pad)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("depthwise_conv2d expects 4-d input and kernels")
    n, c = x.shape[:2]
    wc, m, kh, kw = w.shape
    if wc != c:
        raise DimensionError(f"kernel expects {wc} input channels, got {c}")
    if b.shape != (c * m,):
        raise DimensionError(f"bias shape {b.shape} != ({c * m},)")
    padded_shape, win = _windows(x, kh, kw, stride, pad)
    ho, wo = win.shape[2:4]
    cols = win.transpose(1, 0, 2, 3, 4, 5).reshape(c, n * ho * wo, kh * kw)
    out = cols @ w.reshape(c, m, kh * kw).transpose(0, 2, 1)  # (C, NHW, M)
    out = out.reshape(c, n, ho, wo, m).transpose(1, 0, 4, 2, 3).reshape(n, c * m, ho, wo)
    out = out + b[None, :, None, None]
    cache = (cols, w, padded_shape, stride, pad, (n, ho, wo))
    return out, cache


def depthwise_conv2d_backward(dout, cache, need_input_grad=True):
    cols, w, padded_shape, stride, pad, (n, ho, wo) = cache
    c, m, kh, kw = w.shape
    db = dout.sum(axis=(0, 2, 3))
    do = dout.reshape(n, c, m, ho, wo).transpose(1, 0, 3, 4, 2).reshape(c, n * ho * wo, m)
    dw = np.ascontiguousarray((cols.transpose(0, 2, 1) @ do).transpose(0, 2, 1))
    dw = dw.reshape(w.shape)
    dx = None
    if need_input_grad:
        dcols = do @ w.reshape(c, m, kh * kw)  # (C, NHW, khkw)
        dcols = dcols.reshape(c, n, ho, wo, kh, kw).transpose(1, 2, 3, 0, 4, 5)
        dx = _col2im(dcols, padded_shape, stride, pad)
    return dx, dw, db


@dataclass
class RunningStats:
    """Per-channel moving averages used by batchnorm in eval mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def init(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype))


def batchnorm(x, gamma, beta, running_stats: RunningStats | None, mode="train",
              update_stats=True, eps=BN_EPS):
    """Per-channel batch normalization over the (N, H, W) axes.

    In ``train`` mode the batch statistics (biased variance) are used and, if
    ``update_stats`` is set, folded into ``running_stats`` as
    ``momentum * old + (1 - momentum) * batch``.  ``eval`` mode reads the
    running statistics instead.
    """
    if x.ndim != 4:
        raise DimensionError("batchnorm expects (N, C, H, W) input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("gamma/beta must have one entry per channel")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        if update_stats and running_stats is not None:
            mom = running_stats.momentum
            running_stats.mean[...] = mom * running_stats.mean + (1 - mom) * mean
            running_stats.var[...] = mom * running_stats.var + (1 - mom) * var
    elif mode == "eval":
        if running_stats is None:
            raise StateError("batchnorm eval mode requires running statistics")
        mean, var = running_stats.mean, running_stats.var
        xc = x - mean[None, :, None, None]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (xhat, gamma, inv_std, mode)


def batchnorm_backward(dout, cache):
    xhat, gamma, inv_std, mode = cache
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if mode == "eval":
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    mean_dxhat = dxhat.sum(axis=(0, 2, 3)) / m
    mean_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3)) / m
    dx = (dxhat - mean_dxhat[None, :, None, None]
          - xhat * mean_dxhat_xhat[None, :, None, None]) * inv_std[None, :, None, None]
    return dx, dgamma, dbeta


def relu(x):
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), mask


def relu_backward(dout, mask):
    return dout * mask


def linear(x, w, b):
    """``x @ w.T + b`` for ``x`` (N, D), ``w`` (K, D), ``b`` (K,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"cannot apply weight {w.shape} to input {x.shape}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"bias shape {b.shape} != ({w.shape[0]},)")
    return x @ w.T + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels``; returns ``(loss, probs)``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    return float(loss), np.exp(logp)


def softmax_cross_entropy_backward(probs, labels):
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1
    return d / n


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update applied to ``params`` in place."""
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {grads[name].shape}, "
                                 f"parameter has {p.shape}")
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradcheckReport:
    errors: dict  # name -> max relative error
    tolerance: float
    failures: list = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_error < self.tolerance

    def lines(self) -> list[str]:
        out = []
        for name, err in self.errors.items():
            status = "ok" if err < self.tolerance and name not in self.failures else "FAIL"
            out.append(f"{name:<24s} max_rel_err={err:.3e}  {status}")
        return out


def relative_error(analytic, numeric, floor=1e-8, atol=1e-10):
    """Elementwise ``|a-n| / max(|a|, |n|, floor)``; differences below ``atol`` count as 0.

    ``atol`` absorbs float64 round-off in finite differences of entries whose
    true gradient is zero (e.g. a conv bias feeding batchnorm).
    """
    diff = np.abs(analytic - numeric)
    rel = diff / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel[diff <= atol] = 0.0
    return rel


def gradcheck(network_fn: Callable, params: Mapping[str, np.ndarray], tolerance=1e-4,
              h=1e-5, atol=1e-10) -> GradcheckReport:
    """Compare analytic gradients with central finite differences.

    ``network_fn(params)`` must return ``(loss, grads)`` where ``grads`` maps
    every parameter name to its analytic gradient.  Parameters are perturbed
    in place and restored.
    """
    _, analytic = network_fn(params)
    errors, failures = {}, []
    for name, p in params.items():
        a = np.asarray(analytic[name], dtype=np.float64)
        num = np.zeros(a.shape)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            fp, _ = network_fn(params)
            p[i] = old - h
            fm, _ = network_fn(params)
            p[i] = old
            num[i] = (fp - fm) / (2 * h)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(num))):
            failures.append(name)
            errors[name] = float("inf")
            continue
        rel = relative_error(a, num, atol=atol)
        errors[name] = float(rel.max()) if rel.size else 0.0
        if errors[name] >= tolerance:
            failures.append(name)
    return GradcheckReport(errors, tolerance, failures)
