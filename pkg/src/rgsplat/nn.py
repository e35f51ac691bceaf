"""Small neural building blocks on top of the tensor engine.

Modules register parameters by attribute scanning (lists of modules work),
so ``named_parameters`` gives stable dotted names for checkpoints and the
optimizer. All attention blocks are pre-norm with residual connections; the
default head count is 4 and the feed-forward expansion is 2x.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


class Module:
    def named_parameters(self, prefix: str = "") -> dict[str, T.Tensor]:
        out: dict[str, T.Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, T.Tensor) and value.is_param:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, T.Tensor) and item.is_param:
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self) -> list[T.Tensor]:
        return list(self.named_parameters().values())

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.named_parameters().values():
            p.requires_grad = flag


def normal_init(rng: np.random.Generator, shape, std: float) -> T.Tensor:
    return T.parameter(rng.normal(0.0, std, shape))


def orthogonal_init(rng: np.random.Generator, shape) -> np.ndarray:
    """Orthogonal rows/columns for (fan_in, fan_out)-shaped matrices."""
    rows, cols = int(np.prod(shape[:-1])), shape[-1]
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].reshape(shape)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 zero_init: bool = False, std: float | None = None):
        if zero_init:
            w = np.zeros((c_in, c_out))
        else:
            w = rng.normal(0.0, std if std is not None else (1.0 / np.sqrt(c_in)),
                           (c_in, c_out))
        self.w = T.parameter(w)
        self.b = T.parameter(np.zeros(c_out))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        self.gain = T.parameter(np.ones(c))
        self.bias = T.parameter(np.zeros(c))
        self.eps = eps

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Mlp(Module):
    def __init__(self, c: int, rng: np.random.Generator, expansion: int = 2):
        self.fc1 = Linear(c, c * expansion, rng)
        self.fc2 = Linear(c * expansion, c, rng)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class SelfAttention(Module):
    """Dense multi-head self-attention over a flat token matrix [T, C]."""

    def __init__(self, c: int, rng: np.random.Generator, heads: int = 4):
        if c % heads:
            raise ValueError(f"channels {c} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(c, c, rng)
        self.k = Linear(c, c, rng)
        self.v = Linear(c, c, rng)
        self.out = Linear(c, c, rng)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        n, c = x.shape
        h = self.heads
        dh = c // h
        scale = 1.0 / np.sqrt(dh)

        def split(t):  # [n, c] -> [h, n, dh]
            return T.transpose(T.reshape(t, (n, h, dh)), (1, 0, 2))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        att = T.softmax(T.matmul(q, T.transpose(k, (0, 2, 1))) * scale, axis=-1)
        mixed = T.matmul(att, v)  # [h, n, dh]
        merged = T.reshape(T.transpose(mixed, (1, 0, 2)), (n, c))
        return self.out(merged)


class NeighborAttention(Module):
    """Multi-head attention restricted to each token's k spatial neighbors."""

    def __init__(self, c: int, rng: np.random.Generator, heads: int = 4):
        if c % heads:
            raise ValueError(f"channels {c} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(c, c, rng)
        self.k = Linear(c, c, rng)
        self.v = Linear(c, c, rng)
        self.out = Linear(c, c, rng)

    def __call__(self, x: T.Tensor, idx: np.ndarray) -> T.Tensor:
        n, c = x.shape
        k = idx.shape[1]
        h = self.heads
        dh = c // h
        scale = 1.0 / np.sqrt(dh)
        q = T.reshape(self.q(x), (n, 1, h, dh))
        keys = T.reshape(T.take(self.k(x), idx), (n, k, h, dh))
        vals = T.reshape(T.take(self.v(x), idx), (n, k, h, dh))
        qh = T.transpose(q, (0, 2, 1, 3))  # n, h, 1, dh
        kh = T.transpose(keys, (0, 2, 3, 1))  # n, h, dh, k
        vh = T.transpose(vals, (0, 2, 1, 3))  # n, h, k, dh
        att = T.softmax(T.matmul(qh, kh) * scale, axis=-1)  # n, h, 1, k
        mixed = T.matmul(att, vh)  # n, h, 1, dh
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (n, c))
        return self.out(merged)


class KnnBlock(Module):
    """Pre-norm residual block: kNN attention followed by a feed-forward."""

    def __init__(self, c: int, rng: np.random.Generator, heads: int = 4):
        self.ln1 = LayerNorm(c)
        self.attn = NeighborAttention(c, rng, heads)
        self.ln2 = LayerNorm(c)
        self.mlp = Mlp(c, rng)

    def __call__(self, x: T.Tensor, idx: np.ndarray) -> T.Tensor:
        x = x + self.attn(self.ln1(x), idx)
        return x + self.mlp(self.ln2(x))


class GlobalBlock(Module):
    """Pre-norm residual block with global attention over all tokens.

    Small token sets attend directly. Above ``direct_limit`` tokens the
    block needs the (N, h, w) grid layout: it folds 4x4 patches into
    channels (pixel unshuffle), attends over the reduced token set, and
    unfolds back, as the scaling trick for high resolutions. The reduced
    path assumes tokens arrive in view-major, row-major grid order.
    """

    REDUCE = 4

    def __init__(self, c: int, rng: np.random.Generator, heads: int = 4,
                 direct_limit: int = 512):
        self.ln1 = LayerNorm(c)
        self.attn = SelfAttention(c, rng, heads)
        self.ln2 = LayerNorm(c)
        self.mlp = Mlp(c, rng)
        self.down = Linear(c * self.REDUCE**2, c, rng)
        self.up = Linear(c, c * self.REDUCE**2, rng)
        self.direct_limit = direct_limit

    def __call__(self, x: T.Tensor, grid_shape: tuple[int, int, int] | None = None) -> T.Tensor:
        n_tokens, c = x.shape
        if n_tokens <= self.direct_limit or grid_shape is None:
            x = x + self.attn(self.ln1(x))
        else:
            n, h, w = grid_shape
            if n * h * w != n_tokens:
                raise ValueError(f"grid {grid_shape} does not cover {n_tokens} tokens")
            r = self.REDUCE
            pad_h = (-h) % r
            pad_w = (-w) % r
            g = T.reshape(self.ln1(x), (n, h, w, c))
            if pad_h or pad_w:
                g = T.pad2d(g, 0, pad_h, 0, pad_w)
            hp, wp = h + pad_h, w + pad_w
            folded = T.pixel_unshuffle(g, r)  # n, hp/r, wp/r, c*r*r
            tokens = T.reshape(folded, (n * (hp // r) * (wp // r), c * r * r))
            reduced = self.down(tokens)
            mixed = self.attn(reduced)
            lifted = T.reshape(self.up(mixed), (n, hp // r, wp // r, c * r * r))
            back = T.pixel_shuffle(lifted, r)
            if pad_h or pad_w:
                back = back[:, :h, :w, :]
            x = x + T.reshape(back, (n_tokens, c))
        return x + self.mlp(self.ln2(x))


class Conv(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 ksize: int = 3, stride: int = 1, zero_init: bool = False,
                 padding: int | None = None):
        fan_in = ksize * ksize * c_in
        if zero_init:
            w = np.zeros((ksize, ksize, c_in, c_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (ksize, ksize, c_in, c_out))
        self.w = T.parameter(w)
        self.b = T.parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = ksize // 2 if padding is None else padding

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)
