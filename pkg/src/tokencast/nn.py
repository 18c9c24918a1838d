"""Minimal neural-net layers with explicit forward/backward passes.

Layers own their parameter arrays and return ``(output, cache)`` from
``forward``; ``backward(cache, dy)`` returns ``(dx, grads)`` with grads
keyed like :meth:`params`. Nothing here mutates state during forward, so
inference on a built model is safe for concurrent callers; training updates
arrays in place through :class:`Adam`.

Convolutions route their patch gather/scatter through the backend-selected
``im2col``/``col2im`` kernels; the matrix products stay in numpy (BLAS).
"""

from __future__ import annotations

import numpy as np

from tokencast import kernels


def collect_params(named_layers: list[tuple[str, object]]) -> dict[str, np.ndarray]:
    """Flatten layer parameters into a '<layer>.<name>' keyed dict."""
    out: dict[str, np.ndarray] = {}
    for prefix, layer in named_layers:
        for name, arr in layer.params().items():
            out[f"{prefix}.{name}"] = arr
    return out


class Conv2d:
    """2-D convolution with square kernel, zero padding and He init."""

    def __init__(self, cin, cout, k=3, stride=1, pad=1, rng=None, dtype=np.float32, bias_init=0.0):
        self.cin, self.cout, self.k, self.stride, self.pad = cin, cout, k, stride, pad
        scale = np.sqrt(2.0 / (cin * k * k))
        self.w = rng.normal(0.0, scale, (cout, cin * k * k)).astype(dtype)
        self.b = np.full(cout, bias_init, dtype=dtype)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x):
        b, _, h, w = x.shape
        ho = (h + 2 * self.pad - self.k) // self.stride + 1
        wo = (w + 2 * self.pad - self.k) // self.stride + 1
        cols = kernels.im2col(x, self.k, self.stride, self.pad)
        y = cols @ self.w.T + self.b
        y = y.reshape(b, ho, wo, self.cout).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (x.shape, cols)

    def backward(self, cache, dy):
        xshape, cols = cache
        dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, self.cout)
        dw = dy_mat.T @ cols
        db = dy_mat.sum(axis=0)
        dcols = dy_mat @ self.w
        dx = kernels.col2im(dcols, xshape, self.k, self.stride, self.pad)
        return dx, {"w": dw, "b": db}


class LeakyReLU:
    def __init__(self, slope=0.1):
        self.slope = slope

    def params(self):
        return {}

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, self.slope * x), mask

    def backward(self, mask, dy):
        return np.where(mask, dy, self.slope * dy), {}


class Upsample2x:
    """Nearest-neighbour 2x upsampling; backward sums 2x2 blocks."""

    def params(self):
        return {}

    def forward(self, x):
        return x.repeat(2, axis=2).repeat(2, axis=3), x.shape

    def backward(self, xshape, dy):
        b, c, h, w = xshape
        dx = dy.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))
        return dx, {}


class Linear:
    def __init__(self, nin, nout, rng=None, dtype=np.float32, w_scale=None):
        scale = w_scale if w_scale is not None else np.sqrt(1.0 / nin)
        self.w = rng.normal(0.0, scale, (nout, nin)).astype(dtype)
        self.b = np.zeros(nout, dtype=dtype)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x):
        y = x @ self.w.T + self.b
        return y, x

    def backward(self, x, dy):
        lead = x.shape[:-1]
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        dw = dy2.T @ x2
        db = dy2.sum(axis=0)
        dx = (dy2 @ self.w).reshape(*lead, x.shape[-1])
        return dx, {"w": dw, "b": db}


class LayerNorm:
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.g = np.ones(dim, dtype=dtype)
        self.b = np.zeros(dim, dtype=dtype)
        self.eps = eps

    def params(self):
        return {"g": self.g, "b": self.b}

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        return xhat * self.g + self.b, (xhat, inv)

    def backward(self, cache, dy):
        xhat, inv = cache
        dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
        db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        dxhat = dy * self.g
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, {"g": dg, "b": db}


class Embedding:
    def __init__(self, vocab, dim, rng=None, dtype=np.float32, scale=0.02):
        self.table = rng.normal(0.0, scale, (vocab, dim)).astype(dtype)

    def params(self):
        return {"table": self.table}

    def forward(self, idx):
        return self.table[idx], idx

    def backward(self, idx, dy):
        dt = np.zeros_like(self.table)
        np.add.at(dt, idx.reshape(-1), dy.reshape(-1, dy.shape[-1]))
        return None, {"table": dt}


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(u)), x


def gelu_backward(x, dy):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Adam:
    """Plain Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for key, p in self.params.items():
            g = grads[key]
            if g.dtype != p.dtype:
                g = g.astype(p.dtype)
            m, v = self.m[key], self.v[key]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def l2_snapshot(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Deep copy of a parameter dict (divergence-guard restore point)."""
    return {k: v.copy() for k, v in params.items()}


def restore_snapshot(params: dict[str, np.ndarray], snap: dict[str, np.ndarray]) -> None:
    for k, v in params.items():
        v[...] = snap[k]
