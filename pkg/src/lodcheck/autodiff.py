"""Minimal reverse-mode differentiation over numpy arrays.

Feature maps are NHWC. Every op returns a :class:`Tensor` that remembers its
parents and a closure propagating the output gradient back to them; only
nodes that (transitively) depend on a ``requires_grad`` leaf get gradients.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Propagate ``grad`` (ones for a scalar) to every contributing leaf."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents)
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _result(data, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, parents if req else (), backward if req else None)


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _result(x.data * mask, (x,), backward)


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    return as_strided(xp, (n, ho, wo, k, k, c), (sn, sh * stride, sw * stride, sh, sw, sc), writeable=False)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x`` is NHWC, ``weight`` is ``(out, in, k, k)``."""
    n, h, w, c = x.shape
    cout, cin, k, k2 = weight.shape
    if cin != c or k != k2:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cin} (kernel {k}x{k2})")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    cols = _windows(np.ascontiguousarray(xp), k, stride, ho, wo).reshape(n * ho * wo, k * k * c)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(k * k * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        if weight.requires_grad:
            weight._accumulate((cols.T @ g2).reshape(k, k, cin, cout).transpose(3, 2, 0, 1))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, c)
            dxp = np.zeros(xp.shape, dtype=x.data.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            x._accumulate(dxp[:, padding : padding + h, padding : padding + w, :] if padding else dxp)

    return _result(out.reshape(n, ho, wo, cout), parents, backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation; updates the running buffers in place when training."""
    axes = tuple(range(x.data.ndim - 1))
    if training:
        m = x.data.size // x.shape[-1]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data
            if training:
                m = x.data.size // x.shape[-1]
                dx = inv_std / m * (m * gx - gx.sum(axis=axes) - xhat * (gx * xhat).sum(axis=axes))
            else:
                dx = gx * inv_std
            x._accumulate(dx)

    return _result(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample normalisation over channel groups; independent of batch size."""
    n, h, w, c = x.shape
    if c % groups:
        raise ValueError(f"{c} channels do not split into {groups} groups")
    xg = x.data.reshape(n, h, w, groups, c // groups)
    axes = (1, 2, 4)
    mean = xg.mean(axis=axes, keepdims=True)
    var = xg.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv_std).reshape(n, h, w, c)
    out = xhat * gamma.data + beta.data
    m = h * w * (c // groups)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 1, 2)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            gx = (g * gamma.data).reshape(n, h, w, groups, c // groups)
            xh = xhat.reshape(n, h, w, groups, c // groups)
            dx = inv_std / m * (m * gx - gx.sum(axis=axes, keepdims=True) - xh * (gx * xh).sum(axis=axes, keepdims=True))
            x._accumulate(dx.reshape(n, h, w, c))

    return _result(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward)


def shortcut(x: Tensor, stride: int, out_channels: int) -> Tensor:
    """Parameter-free skip: spatial subsampling plus zero channel padding."""
    n, h, w, c = x.shape
    sub = x.data[:, ::stride, ::stride, :]
    extra = out_channels - c
    out = np.concatenate([sub, np.zeros(sub.shape[:3] + (extra,), dtype=sub.dtype)], axis=3) if extra else sub

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, ::stride, ::stride, :] = g[..., :c]
        x._accumulate(dx)

    return _result(np.ascontiguousarray(out), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, h, w, c = x.shape

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, None, None, :] / (h * w), x.shape))

    return _result(x.data.mean(axis=(1, 2)), (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""

    def backward(g):
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ weight.data)

    return _result(x.data @ weight.data.T + bias.data, (x, weight, bias), backward)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits.data.astype(np.float64))
    loss = -logp[np.arange(b), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        logits._accumulate((p * (float(g) / b)).astype(logits.data.dtype))

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)
