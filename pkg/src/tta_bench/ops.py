"""Differentiable operators over :class:`~tta_bench.tensor.Tensor`.

Each operator is a forward rule and a backward rule on raw arrays; ``_apply``
handles finiteness checks, op counting and tape recording. Reductions that
feed losses (entropy, batch statistics) accumulate in float64.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    Context,
    DimensionError,
    Node,
    NumericError,
    Tensor,
    active_counters,
    active_tape,
    scratch,
)

BN_EPS = 1e-5
LOG_FLOOR = 1e-12

BN_MODES = ("use-batch-stats", "use-running-stats", "instance-aware")


class _Ctx(Context):
    __slots__ = ("recording",)

    def __init__(self, recording: bool) -> None:
        super().__init__()
        self.recording = recording

    def save(self, **arrays: np.ndarray) -> None:
        if self.recording:
            super().save(**arrays)


def _apply(kind: str, forward: Callable, backward: Callable, inputs: tuple[Tensor, ...], **params) -> Tensor:
    for i, t in enumerate(inputs):
        if not np.isfinite(t.data).all():
            raise NumericError(f"{kind}: operand {i} contains non-finite values")
    counters = active_counters()
    if counters is not None:
        counters.forward[kind] += 1
    tape = active_tape()
    recording = tape is not None and any(t.requires_grad for t in inputs)
    ctx = _Ctx(recording)
    ctx.params = params
    out = forward(ctx, *(t.data for t in inputs))
    result = Tensor.wrap(np.asarray(out), requires_grad=recording)
    if recording:
        tape.record(Node(kind, inputs, result.uid, ctx, backward))
    return result


def _expect_ndim(kind: str, name: str, t: Tensor, ndim: int) -> None:
    if t.data.ndim != ndim:
        raise DimensionError(f"{kind}: operand '{name}' must be {ndim}-D, got shape {t.shape}")


# --- matmul -----------------------------------------------------------------

def _matmul_fwd(ctx, a, b):
    ctx.save(a=a, b=b)
    return a @ b


def _matmul_bwd(ctx, g):
    return g @ ctx["b"].T, ctx["a"].T @ g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _expect_ndim("matmul", "a", a, 2)
    _expect_ndim("matmul", "b", b, 2)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: operand 'b' has {b.shape[0]} rows, expected {a.shape[1]}")
    return _apply("matmul", _matmul_fwd, _matmul_bwd, (a, b))


# --- conv2d -----------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Patches as N x (C*kh*kw) x (Ho*Wo), channel-major so outputs land in NCHW."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def _conv_fwd(ctx, x, w):
    stride, padding = ctx.params["stride"], ctx.params["padding"]
    o, _, kh, kw = w.shape
    n = x.shape[0]
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    ctx.params["x_shape"] = x.shape
    wmat = w.reshape(o, -1)
    if ctx.recording:
        ctx.save(cols=cols, w=w)
        out = np.matmul(wmat, cols)
    else:
        with scratch(cols):
            out = np.matmul(wmat, cols)
    return out.reshape(n, o, ho, wo)


def _conv_bwd(ctx, g):
    stride, padding = ctx.params["stride"], ctx.params["padding"]
    n, c, h, w_ = ctx.params["x_shape"]
    w = ctx["w"]
    cols = ctx["cols"]
    o, _, kh, kw = w.shape
    _, _, ho, wo = g.shape
    g3 = g.reshape(n, o, ho * wo)
    # sum_n g_n @ cols_n^T as one GEMM over the (n, position) axis
    dw = (g3.transpose(1, 0, 2).reshape(o, -1) @ cols.transpose(0, 2, 1).reshape(-1, c * kh * kw)).reshape(w.shape)
    if stride == 1 and kh - 1 - padding >= 0:
        # input gradient is a full correlation of g with the flipped, transposed kernel
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gcols, _, _ = _im2col(g, kh, kw, 1, kh - 1 - padding)
        dx = np.matmul(wt.reshape(c, -1), gcols).reshape(n, c, h, w_)
        return dx, dw
    dcols = np.matmul(w.reshape(o, -1).T, g3).reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * padding, w_ + 2 * padding), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    dx = dxp[:, :, padding:padding + h, padding:padding + w_] if padding else dxp
    return np.ascontiguousarray(dx), dw


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    _expect_ndim("conv2d", "x", x, 4)
    _expect_ndim("conv2d", "w", w, 4)
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: operand 'w' expects {w.shape[1]} input channels, x has {x.shape[1]}")
    if conv_output_size(x.shape[2], w.shape[2], stride, padding) < 1 or conv_output_size(x.shape[3], w.shape[3], stride, padding) < 1:
        raise DimensionError(f"conv2d: kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
    return _apply("conv2d", _conv_fwd, _conv_bwd, (x, w), stride=stride, padding=padding)


def conv2d_naive(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct-loop convolution; the reference the im2col path is checked against."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(wd, kw, stride, padding)
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for b in range(n):
        for k in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, k, i, j] = np.sum(patch.astype(np.float64) * w[k])
    return out


# --- pointwise & pooling ----------------------------------------------------

def _relu_fwd(ctx, x):
    out = np.maximum(x, 0)
    if ctx.recording:
        ctx.save(mask=(x > 0))
    return out


def _relu_bwd(ctx, g):
    return (g * ctx["mask"],)


def relu(x: Tensor) -> Tensor:
    return _apply("relu", _relu_fwd, _relu_bwd, (x,))


def _pool_views(x: np.ndarray, k: int) -> list[np.ndarray]:
    return [x[:, :, i::k, j::k] for i in range(k) for j in range(k)]


def _maxpool_fwd(ctx, x):
    k = ctx.params["size"]
    views = _pool_views(x, k)
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    if ctx.recording:
        # first window position attaining the max receives the gradient
        arg = np.full(out.shape, k * k - 1, dtype=np.int8)
        for pos in range(k * k - 2, -1, -1):
            arg[views[pos] == out] = pos
        ctx.save(arg=arg)
    ctx.params["x_shape"] = x.shape
    return out


def _maxpool_bwd(ctx, g):
    k = ctx.params["size"]
    arg = ctx["arg"]
    dx = np.zeros(ctx.params["x_shape"], dtype=g.dtype)
    for pos, view in enumerate(_pool_views(dx, k)):
        view[...] = np.where(arg == pos, g, 0)
    return (dx,)


def max_pool(x: Tensor, size: int = 2) -> Tensor:
    _expect_ndim("max_pool", "x", x, 4)
    if x.shape[2] % size or x.shape[3] % size:
        raise DimensionError(f"max_pool: spatial extent {x.shape[2:]} not divisible by {size}")
    return _apply("max_pool", _maxpool_fwd, _maxpool_bwd, (x,), size=size)


def _gap_fwd(ctx, x):
    ctx.params["x_shape"] = x.shape
    return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)


def _gap_bwd(ctx, g):
    n, c, h, w = ctx.params["x_shape"]
    return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)


def global_avg_pool(x: Tensor) -> Tensor:
    _expect_ndim("global_avg_pool", "x", x, 4)
    return _apply("global_avg_pool", _gap_fwd, _gap_bwd, (x,))


# --- batch norm ---------------------------------------------------------------

def soft_shrink(x, lam):
    """sign(x) * max(|x| - lam, 0), elementwise; ``lam`` may broadcast."""
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    return (0, 2, 3) if x.ndim == 4 else (0,)


def _bn_shape(x: np.ndarray) -> tuple[int, ...]:
    return (1, -1, 1, 1) if x.ndim == 4 else (1, -1)


def _bn_fwd(ctx, x, gamma, beta):
    p = ctx.params
    mode, eps = p["mode"], p["eps"]
    rm_t, rv_t = p["running_mean"], p["running_var"]
    shp = _bn_shape(x)
    if mode == "use-batch-stats":
        axes = _bn_axes(x)
        m = x.size // x.shape[1]
        mean = x.mean(axis=axes, dtype=np.float64)
        centered = x - mean.astype(x.dtype).reshape(shp)
        var = np.mean(centered * centered, axis=axes, dtype=np.float64)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std.astype(x.dtype).reshape(shp)
        del centered
        if p["momentum"]:
            mom = p["momentum"]
            unbiased = var * m / (m - 1) if m > 1 else var
            rm_t.data[...] = (1 - mom) * rm_t.data + mom * mean
            rv_t.data[...] = (1 - mom) * rv_t.data + mom * unbiased
        ctx.save(xhat=xhat, inv_std=inv_std.astype(x.dtype), gamma=gamma)
    elif mode == "use-running-stats" and not ctx.recording:
        # inference: a single fused per-channel scale and shift
        inv_std = 1.0 / np.sqrt(rv_t.data.astype(np.float64) + eps)
        scale = gamma.astype(np.float64) * inv_std
        shift = beta - rm_t.data.astype(np.float64) * scale
        ctx.params["batch_mode"] = False
        out = x * scale.astype(x.dtype).reshape(shp)
        out += shift.astype(x.dtype).reshape(shp)
        return out
    elif mode == "use-running-stats":
        inv_std = (1.0 / np.sqrt(rv_t.data.astype(np.float64) + eps)).astype(x.dtype)
        xhat = (x - rm_t.data.astype(x.dtype).reshape(shp)) * inv_std.reshape(shp)
        ctx.save(xhat=xhat, inv_std=inv_std, gamma=gamma)
    elif mode == "instance-aware":
        if ctx.recording:
            raise NotImplementedError("instance-aware batch_norm is inference-only")
        xhat = _instance_aware_normalize(x, rm_t.data, rv_t.data, p["alpha"], eps)
    else:
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    ctx.params["batch_mode"] = mode == "use-batch-stats"
    return xhat * gamma.reshape(shp) + beta.reshape(shp)


def _instance_aware_normalize(x, rm, rv, alpha, eps):
    rm = rm.astype(np.float64)
    rv = rv.astype(np.float64)
    if x.ndim != 4 or x.shape[2] * x.shape[3] < 2:
        mu, var = rm[None, :], rv[None, :]
        shp = (1, -1) + (1,) * (x.ndim - 2)
        return ((x - mu.reshape(shp)) / np.sqrt(var.reshape(shp) + eps)).astype(x.dtype)
    length = x.shape[2] * x.shape[3]
    mu_inst = x.mean(axis=(2, 3), dtype=np.float64)
    var_inst = x.var(axis=(2, 3), dtype=np.float64)
    se_mu = np.sqrt(rv / length)
    se_var = np.sqrt(2.0 * rv * rv / (length - 1))
    mu = rm + soft_shrink(mu_inst - rm, alpha * se_mu)
    var = rv + soft_shrink(var_inst - rv, alpha * se_var)
    var = np.maximum(var, 0.0)
    return ((x - mu[:, :, None, None]) / np.sqrt(var[:, :, None, None] + eps)).astype(x.dtype)


def _bn_bwd(ctx, g):
    xhat = ctx["xhat"]
    inv_std = ctx["inv_std"]
    gamma = ctx["gamma"]
    axes = _bn_axes(g)
    shp = _bn_shape(g)
    dgamma = (g * xhat).sum(axis=axes, dtype=np.float64).astype(g.dtype)
    dbeta = g.sum(axis=axes, dtype=np.float64).astype(g.dtype)
    scale = (gamma * inv_std).reshape(shp)
    if ctx.params["batch_mode"]:
        m = g.size // g.shape[1]
        dx = scale / m * (m * g - dbeta.reshape(shp) - xhat * dgamma.reshape(shp))
    else:
        dx = g * scale
    return dx.astype(g.dtype), dgamma, dbeta


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str = "use-running-stats",
    momentum: float = 0.1,
    eps: float = BN_EPS,
    alpha: float = 4.0,
) -> Tensor:
    """Batch normalization over channel axis 1 of a 2-D or 4-D input.

    ``use-batch-stats`` normalizes with the batch moments and, when
    ``momentum`` is non-zero, updates the running buffers in place.
    ``use-running-stats`` only reads them. ``instance-aware`` shrinks
    per-sample moments toward the running ones (inference only).
    """
    if x.data.ndim not in (2, 4):
        raise DimensionError(f"batch_norm: operand 'x' must be 2-D or 4-D, got shape {x.shape}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise DimensionError(f"batch_norm: operand '{name}' must have shape ({c},), got {t.shape}")
    if mode not in BN_MODES:
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    return _apply(
        "batch_norm", _bn_fwd, _bn_bwd, (x, gamma, beta),
        mode=mode, momentum=momentum, eps=eps, alpha=alpha,
        running_mean=running_mean, running_var=running_var,
    )


# --- affine / elementwise -------------------------------------------------------

def _bias_fwd(ctx, x, b):
    return x + b


def _bias_bwd(ctx, g):
    return g, g.sum(axis=0, dtype=np.float64).astype(g.dtype)


def linear_bias_add(x: Tensor, b: Tensor) -> Tensor:
    _expect_ndim("linear_bias_add", "x", x, 2)
    if b.shape != (x.shape[1],):
        raise DimensionError(f"linear_bias_add: operand 'b' must have shape ({x.shape[1]},), got {b.shape}")
    return _apply("linear_bias_add", _bias_fwd, _bias_bwd, (x, b))


def _add_fwd(ctx, a, b):
    return a + b


def _add_bwd(ctx, g):
    return g, g


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"elementwise_add: operand 'b' has shape {b.shape}, expected {a.shape}")
    return _apply("elementwise_add", _add_fwd, _add_bwd, (a, b))


def _mul_fwd(ctx, a, b):
    ctx.save(a=a, b=b)
    return a * b


def _mul_bwd(ctx, g):
    return g * ctx["b"], g * ctx["a"]


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"elementwise_mul: operand 'b' has shape {b.shape}, expected {a.shape}")
    return _apply("elementwise_mul", _mul_fwd, _mul_bwd, (a, b))


def _scale_fwd(ctx, x):
    return x * ctx.params["s"]


def _scale_bwd(ctx, g):
    return (g * ctx.params["s"],)


def scalar_scale(x: Tensor, s: float) -> Tensor:
    if not math.isfinite(s):
        raise NumericError("scalar_scale: non-finite scale")
    return _apply("scalar_scale", _scale_fwd, _scale_bwd, (x,), s=float(s))


def _sum_fwd(ctx, x):
    ctx.params["x_shape"] = x.shape
    return np.array(x.sum(dtype=np.float64), dtype=x.dtype)


def _sum_bwd(ctx, g):
    return (np.full(ctx.params["x_shape"], g, dtype=g.dtype),)


def tensor_sum(x: Tensor) -> Tensor:
    return _apply("sum", _sum_fwd, _sum_bwd, (x,))


def _select_fwd(ctx, x):
    ctx.params["x_shape"] = x.shape
    return x[ctx.params["index"]]


def _select_bwd(ctx, g):
    dx = np.zeros(ctx.params["x_shape"], dtype=g.dtype)
    np.add.at(dx, ctx.params["index"], g)
    return (dx,)


def select_rows(x: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= x.shape[0])):
        raise DimensionError(f"select_rows: index out of range for {x.shape[0]} rows")
    return _apply("select_rows", _select_fwd, _select_bwd, (x,), index=index)


# --- softmax family & losses ----------------------------------------------------

def _log_softmax64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _softmax_fwd(ctx, x):
    p = np.exp(_log_softmax64(x))
    ctx.save(p=p)
    return p.astype(x.dtype)


def _softmax_bwd(ctx, g):
    p = ctx["p"]
    g64 = g.astype(np.float64)
    return ((p * (g64 - (g64 * p).sum(axis=-1, keepdims=True))).astype(g.dtype),)


def softmax(x: Tensor) -> Tensor:
    _expect_ndim("softmax", "x", x, 2)
    return _apply("softmax", _softmax_fwd, _softmax_bwd, (x,))


def _log_softmax_fwd(ctx, x):
    logp = _log_softmax64(x)
    ctx.save(p=np.exp(logp))
    return logp.astype(x.dtype)


def _log_softmax_bwd(ctx, g):
    p = ctx["p"]
    g64 = g.astype(np.float64)
    return ((g64 - p * g64.sum(axis=-1, keepdims=True)).astype(g.dtype),)


def log_softmax(x: Tensor) -> Tensor:
    _expect_ndim("log_softmax", "x", x, 2)
    return _apply("log_softmax", _log_softmax_fwd, _log_softmax_bwd, (x,))


def entropy_per_sample(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax entropy in float64 (no graph)."""
    logp = _log_softmax64(logits)
    return -(np.exp(logp) * logp).sum(axis=-1)


def _entropy_fwd(ctx, z):
    logp = _log_softmax64(z)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=-1)
    ctx.save(p=p, logp=logp, h=h)
    return np.array(h.mean(), dtype=z.dtype)


def _entropy_bwd(ctx, g):
    p, logp, h = ctx["p"], ctx["logp"], ctx["h"]
    b = p.shape[0]
    dz = -p * (logp + h[:, None]) * (g.item() / b)
    return (dz.astype(g.dtype),)


def mean_entropy(logits: Tensor) -> Tensor:
    """(1/B) sum_b H(softmax(logits_b))."""
    _expect_ndim("mean_entropy", "logits", logits, 2)
    if logits.shape[0] < 1 or logits.shape[1] < 2:
        raise DimensionError(f"mean_entropy: need B>=1 and C>=2, got {logits.shape}")
    return _apply("mean_entropy", _entropy_fwd, _entropy_bwd, (logits,))


def _marginal_fwd(ctx, z):
    p = np.exp(_log_softmax64(z))
    pbar = p.mean(axis=0)
    logbar = np.log(np.maximum(pbar, LOG_FLOOR))
    ctx.save(p=p, v=-(logbar + 1.0))
    return np.array(-(pbar * logbar).sum(), dtype=z.dtype)


def _marginal_bwd(ctx, g):
    p, v = ctx["p"], ctx["v"]
    b = p.shape[0]
    dz = p * (v[None, :] - (p * v[None, :]).sum(axis=-1, keepdims=True)) * (g.item() / b)
    return (dz.astype(g.dtype),)


def marginal_entropy(logits: Tensor) -> Tensor:
    """H(mean_b softmax(logits_b)), the diversity term of information maximization."""
    _expect_ndim("marginal_entropy", "logits", logits, 2)
    return _apply("marginal_entropy", _marginal_fwd, _marginal_bwd, (logits,))


def _ce_fwd(ctx, z):
    labels = ctx.params["labels"]
    logp = _log_softmax64(z)
    b = z.shape[0]
    ctx.save(p=np.exp(logp))
    return np.array(-logp[np.arange(b), labels].mean(), dtype=z.dtype)


def _ce_bwd(ctx, g):
    p = ctx["p"].copy()
    labels = ctx.params["labels"]
    b = p.shape[0]
    p[np.arange(b), labels] -= 1.0
    return ((p * (g.item() / b)).astype(g.dtype),)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    _expect_ndim("cross_entropy", "logits", logits, 2)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: labels shape {labels.shape} != ({logits.shape[0]},)")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DimensionError("cross_entropy: label out of range")
    return _apply("cross_entropy", _ce_fwd, _ce_bwd, (logits,), labels=labels)


FORWARD_OPS = {
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "max_pool": max_pool,
    "global_avg_pool": global_avg_pool,
    "batch_norm": batch_norm,
    "linear_bias_add": linear_bias_add,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "elementwise_add": elementwise_add,
    "scalar_scale": scalar_scale,
}


def forward_op(kind: str, inputs, **ctx) -> Tensor:
    try:
        fn = FORWARD_OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **ctx)
