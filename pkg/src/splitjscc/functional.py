"""Differentiable layer operations on NCHW tensors.

Each function takes :class:`~splitjscc.tensor.Tensor` inputs and returns a
Tensor wired into the autodiff graph.  Convolutions use im2col with one batched
matrix product in each direction.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, StateError
from .tensor import DTYPE, Tensor, as_tensor, make_result


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` (N, C, H, W) with ``weight`` (O, C, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise DimensionError(f"conv2d: input has {c} channels but weight expects {ci} (weight shape {weight.shape})")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oh, ow = conv_output_size(h, kh, sh, ph), conv_output_size(w, kw, sw, pw)
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {(kh, kw)}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    # patch matrix (C*kh*kw, N*OH*OW), filled one kernel tap at a time so the
    # whole batch goes through a single matrix product
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw]
    cols = cols.reshape(c * kh * kw, n * oh * ow)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, oh, ow).transpose(1, 0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * oh * ow)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(c, kh, kw, n, oh, ow)
            gxt = np.zeros((c, n) + xp.shape[2:], dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += dcols[:, i, j]
            gx = gxt.transpose(1, 0, 2, 3)[:, :, ph : ph + h, pw : pw + w]
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=1)

    return make_result(out, parents, backward)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first element."""
    if window != stride:
        raise ValueError("only non-overlapping pooling (window == stride) is supported")
    n, c, h, w = x.shape
    k = window
    if h % k or w % k:
        raise DimensionError(f"maxpool2d needs spatial dims divisible by {k}, got {(h, w)}")
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=DTYPE)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_result(out, (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None,
    running_var: np.ndarray | None,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W) or (N,) for 2-D input.

    Train mode normalizes with the population variance of the batch and
    updates ``running_mean``/``running_var`` in place.  Eval mode uses the
    running statistics.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: input has {c} channels, parameters have {gamma.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data

    if training:
        count = xd.size // c
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None and running_var is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * (count / max(count - 1, 1))
    else:
        if running_mean is None or running_var is None:
            raise StateError("batch_norm in eval mode needs initialized running statistics")
        mu, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            m = xd.size // c
            gx = (
                inv_std.reshape(bshape)
                / m
                * (m * dxhat - dxhat.sum(axis=axes).reshape(bshape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape))
            )
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward)


def _gdn_core(x: Tensor, beta: Tensor, gamma: Tensor, inverse: bool) -> Tensor:
    c = x.shape[1]
    if beta.shape != (c,) or gamma.shape != (c, c):
        raise DimensionError(f"gdn: input has {c} channels, beta {beta.shape}, gamma {gamma.shape}")
    xd = x.data
    sq = xd * xd
    norm = np.einsum("ij,nj...->ni...", gamma.data, sq) + beta.data.reshape((1, c) + (1,) * (x.ndim - 2))
    s = np.sqrt(norm)
    out = xd * s if inverse else xd / s

    def backward(g):
        # dL/dnorm for each output channel i
        dnorm = g * xd / (2 * s) if inverse else -g * xd / (2 * s * norm)
        direct = g * s if inverse else g / s
        gx = direct + 2 * xd * np.einsum("ij,ni...->nj...", gamma.data, dnorm)
        red = (0,) + tuple(range(2, x.ndim))
        gbeta = dnorm.sum(axis=red)
        ggamma = np.einsum("nim,njm->ij", dnorm.reshape(dnorm.shape[0], c, -1), sq.reshape(sq.shape[0], c, -1))
        return gx, gbeta, ggamma

    return make_result(out, (x, beta, gamma), backward)


def gdn(x: Tensor, beta: Tensor, gamma: Tensor) -> Tensor:
    """u_i = w_i / sqrt(beta_i + sum_j gamma_ij w_j^2), evaluated per spatial location."""
    return _gdn_core(x, beta, gamma, inverse=False)


def igdn(x: Tensor, beta: Tensor, gamma: Tensor) -> Tensor:
    """w_i = u_i * sqrt(beta_i + sum_j gamma_ij u_j^2); approximate inverse of :func:`gdn`."""
    return _gdn_core(x, beta, gamma, inverse=True)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """x where x >= 0, slope_c * x elsewhere; one slope per channel (axis 1)."""
    c = x.shape[1] if x.ndim > 1 else 1
    if slope.shape != (c,):
        raise DimensionError(f"prelu: input has {c} channels but {slope.shape[0]} slopes")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    neg = xd < 0
    a = slope.data.reshape(bshape)
    out = np.where(neg, a * xd, xd)

    def backward(g):
        gx = np.where(neg, g * a, g)
        red = (0,) + tuple(range(2, x.ndim))
        gs = (g * xd * neg).sum(axis=red)
        return gx, gs

    return make_result(out, (x, slope), backward)


def relu(x: Tensor) -> Tensor:
    return x.relu()


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias for x (N, din) and weight (dout, din)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = (g @ wd, g.T @ xd)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return make_result(out, (x, weight) if bias is None else (x, weight, bias), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate each pixel into a 2x2 block."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return make_result(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label], stabilized by max subtraction."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} and labels {labels.shape} do not match")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return make_result(np.array(loss), (logits,), backward)


def l1_loss(a: Tensor, b) -> Tensor:
    """Mean absolute difference; the subgradient at a == b is 0."""
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"l1_loss: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff)
    return make_result(np.array(np.abs(diff).mean()), (a, b), lambda g: (sign * (g / n), -sign * (g / n)))
