"""Layers with hand-written backward passes.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Param.grad`` during ``backward``.
Images are NHWC throughout.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NEG_INF = -1e9


class Param:
    __slots__ = ("value", "grad", "name")

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name

    @property
    def size(self) -> int:
        return int(self.value.size)


class Module:
    def params(self) -> list[Param]:
        out = []
        for value in vars(self).values():
            if isinstance(value, Param):
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.params())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        out.extend(item.params())
        return out

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        out = []
        for key, value in vars(self).items():
            if isinstance(value, Param):
                out.append((prefix + key, value))
            elif isinstance(value, Module):
                out.extend(value.named_params(f"{prefix}{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{prefix}{key}.{i}."))
        return out

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad[...] = 0


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32, gain: float = 1.0):
        bound = gain * np.sqrt(6.0 / fan_in)  # He-uniform at gain 1
        self.weight = Param(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
        self.bias = Param(np.zeros(fan_out, dtype=dtype))
        self.fan_in, self.fan_out = fan_in, fan_out

    def describe(self) -> str:
        return f"Linear(in={self.fan_in}, out={self.fan_out}, bias=True)"

    def forward(self, x: np.ndarray) -> np.ndarray:
        # 2-D matmuls: numpy loops over leading dims of N-D operands
        self._x = x.reshape(-1, self.fan_in)
        out = self._x @ self.weight.value + self.bias.value
        return out.reshape(x.shape[:-1] + (self.fan_out,))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        g2 = grad.reshape(-1, self.fan_out)
        self.weight.grad += self._x.T @ g2
        self.bias.grad += g2.sum(axis=0)
        return (g2 @ self.weight.value.T).reshape(grad.shape[:-1] + (self.fan_in,))


class ReLU(Module):
    def describe(self) -> str:
        return "ReLU()"

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class Flatten(Module):
    def describe(self) -> str:
        return "Flatten()"

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Conv2d(Module):
    """3x3 (by default) stride-1 unpadded convolution on NHWC input."""

    def __init__(self, in_channels: int, out_channels: int, rng, kernel: int = 3, dtype=np.float32):
        fan_in = in_channels * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)
        self.weight = Param(
            rng.uniform(-bound, bound, (out_channels, in_channels, kernel, kernel)).astype(dtype)
        )
        self.bias = Param(np.zeros(out_channels, dtype=dtype))
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel

    def describe(self) -> str:
        k = self.kernel
        return f"Conv2d({self.in_channels}, {self.out_channels}, kernel=({k}, {k}), stride=(1, 1))"

    def forward(self, x):
        n, h, w, c = x.shape
        k = self.kernel
        ho, wo = h - k + 1, w - k + 1
        # (N, Ho, Wo, C, k, k) matches weight layout (out, C, k, k)
        cols = sliding_window_view(x, (k, k), axis=(1, 2)).reshape(n * ho * wo, c * k * k)
        self._cols = cols
        self._in_shape = x.shape
        wm = self.weight.value.reshape(self.out_channels, -1)
        out = cols @ wm.T + self.bias.value
        return out.reshape(n, ho, wo, self.out_channels)

    def backward(self, grad):
        n, h, w, c = self._in_shape
        k = self.kernel
        ho, wo = h - k + 1, w - k + 1
        gm = grad.reshape(-1, self.out_channels)
        wm = self.weight.value.reshape(self.out_channels, -1)
        self.weight.grad += (gm.T @ self._cols).reshape(self.weight.value.shape)
        self.bias.grad += gm.sum(axis=0)
        dcols = (gm @ wm).reshape(n, ho, wo, c, k, k)
        dx = np.zeros(self._in_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, i:i + ho, j:j + wo, :] += dcols[..., i, j]
        return dx


class MaxPool2d(Module):
    """2x2 stride-2 pooling; odd trailing rows/columns are dropped."""

    def describe(self) -> str:
        return "MaxPool2d(kernel=2, stride=2, padding=0, dilation=1)"

    def forward(self, x):
        n, h, w, c = x.shape
        ho, wo = h // 2, w // 2
        self._in_shape = x.shape
        win = x[:, : 2 * ho, : 2 * wo].reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4)
        win = win.reshape(n, ho, wo, c, 4)
        self._arg = win.argmax(axis=-1)
        return np.take_along_axis(win, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, h, w, c = self._in_shape
        ho, wo = h // 2, w // 2
        win = np.zeros((n, ho, wo, c, 4), dtype=grad.dtype)
        np.put_along_axis(win, self._arg[..., None], grad[..., None], axis=-1)
        win = win.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
        dx = np.zeros(self._in_shape, dtype=grad.dtype)
        dx[:, : 2 * ho, : 2 * wo] = win
        return dx


class Embedding(Module):
    """Lookup table; stateless so one table can serve several inputs."""

    def __init__(self, vocab_size: int, dim: int, rng, dtype=np.float32):
        self.weight = Param(rng.normal(0.0, 1.0, (vocab_size, dim)).astype(dtype))

    def forward(self, ids: np.ndarray) -> np.ndarray:
        return self.weight.value[ids]

    def backward(self, ids: np.ndarray, grad: np.ndarray) -> None:
        np.add.at(self.weight.grad, ids.reshape(-1), grad.reshape(-1, grad.shape[-1]))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.gain = Param(np.ones(dim, dtype=dtype))
        self.bias = Param(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        self._xhat, self._inv = xhat, inv
        return xhat * self.gain.value + self.bias.value

    def backward(self, grad):
        xhat, inv = self._xhat, self._inv
        d = xhat.shape[-1]
        self.gain.grad += (grad * xhat).reshape(-1, d).sum(axis=0)
        self.bias.grad += grad.reshape(-1, d).sum(axis=0)
        dxhat = grad * self.gain.value
        return inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``num_heads`` heads of width ``d_kv``.

    ``mask`` is a boolean array broadcastable to (B, heads, Tq, Tk); False
    entries are excluded.
    """

    def __init__(self, d_model: int, num_heads: int, rng, dtype=np.float32):
        if d_model % num_heads:
            raise ValueError("num_heads must divide d_model")
        self.num_heads = num_heads
        self.d_kv = d_model // num_heads
        # gain sqrt(1/2) turns the He bound into the Glorot bound for square maps
        g = np.sqrt(0.5)
        self.query = Linear(d_model, d_model, rng, dtype, gain=g)
        self.key = Linear(d_model, d_model, rng, dtype, gain=g)
        self.value = Linear(d_model, d_model, rng, dtype, gain=g)
        self.out = Linear(d_model, d_model, rng, dtype, gain=g)

    def _split(self, x):
        b, t, _ = x.shape
        return x.reshape(b, t, self.num_heads, self.d_kv).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, t, dk = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)

    def forward(self, xq, xkv, mask=None):
        q = self._split(self.query.forward(xq))
        k = self._split(self.key.forward(xkv))
        v = self._split(self.value.forward(xkv))
        scale = 1.0 / float(np.sqrt(self.d_kv))
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        if mask is not None:
            scores = np.where(mask, scores, NEG_INF)
        attn = softmax(scores)
        self._q, self._k, self._v, self._attn, self._scale = q, k, v, attn, scale
        return self.out.forward(self._merge(attn @ v))

    def backward(self, grad):
        q, k, v, attn = self._q, self._k, self._v, self._attn
        d_o = self._split(self.out.backward(grad))
        d_attn = d_o @ v.transpose(0, 1, 3, 2)
        d_v = attn.transpose(0, 1, 3, 2) @ d_o
        d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True)) * self._scale
        d_q = d_scores @ k
        d_k = d_scores.transpose(0, 1, 3, 2) @ q
        dxq = self.query.backward(self._merge(d_q))
        dxkv = self.key.backward(self._merge(d_k)) + self.value.backward(self._merge(d_v))
        return dxq, dxkv


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng, dtype=np.float32):
        self.inner = Linear(d_model, d_ff, rng, dtype)
        self.act = ReLU()
        self.outer = Linear(d_ff, d_model, rng, dtype, gain=0.5)

    def forward(self, x):
        return self.outer.forward(self.act.forward(self.inner.forward(x)))

    def backward(self, grad):
        return self.inner.backward(self.act.backward(self.outer.backward(grad)))


def cross_entropy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None):
    """Mean of ``-log softmax(logits)[label]`` and its gradient w.r.t. logits.

    Computed in float64 with max-subtraction; the gradient is cast back to
    the logits dtype.  ``mask`` selects which rows count toward the mean.
    """
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    log_p = z - log_norm
    picked = np.take_along_axis(log_p, labels[..., None], axis=-1)[..., 0]
    if mask is None:
        mask = np.ones(labels.shape, dtype=bool)
    count = max(int(mask.sum()), 1)
    loss = -(picked * mask).sum() / count
    grad = np.exp(log_p)
    np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], axis=-1) - 1.0, axis=-1)
    grad *= (mask / count)[..., None]
    return float(loss), grad.astype(logits.dtype)
