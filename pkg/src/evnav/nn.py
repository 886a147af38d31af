"""Small differentiable building blocks with hand-written backward passes.

Everything works on float64 numpy arrays laid out batch-first. Layers own
their parameters and accumulate gradients into matching ``d*`` arrays;
``backward`` methods return the gradient with respect to the layer input.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


def _check_finite(x: np.ndarray, where: str):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values entering {where}")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x):
    return np.maximum(x, 0.0)


class Dense:
    """Affine map ``y = act(x W^T + b)`` with ReLU or identity activation."""

    def __init__(self, n_in: int, n_out: int, activation: str = "linear",
                 rng: np.random.Generator | None = None, name: str = "dense", scale: float | None = None):
        if activation not in ("linear", "relu"):
            raise ValueError(f"unsupported activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        if scale is None:
            scale = np.sqrt((2.0 if activation == "relu" else 1.0) / n_in)
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        self.activation = activation
        self.W = rng.normal(0.0, scale, size=(n_out, n_in))
        self.b = np.zeros(n_out)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)

    def params(self):
        return [(f"{self.name}.W", self.W, self.dW), (f"{self.name}.b", self.b, self.db)]

    def forward(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"{self.name}: expected (B, {self.n_in}), got {x.shape}")
        _check_finite(x, self.name)
        a = x @ self.W.T + self.b
        y = relu(a) if self.activation == "relu" else a
        return y, (x, a)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        x, a = cache
        da = dy * (a > 0) if self.activation == "relu" else dy
        self.dW += da.T @ x
        self.db += da.sum(axis=0)
        return da @ self.W


class MLP:
    """Stack of dense layers: ReLU on hidden layers, linear head."""

    def __init__(self, sizes: list[int], rng: np.random.Generator | None = None, name: str = "mlp",
                 head_scale: float | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
            last = i == len(sizes) - 2
            self.layers.append(Dense(a, b, "linear" if last else "relu", rng, f"{name}.{i}",
                                     scale=head_scale if last else None))

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, caches, dy):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(c, dy)
        return dy


@dataclass
class LstmState:
    h: list[np.ndarray]
    c: list[np.ndarray]


class LSTM:
    """Stacked LSTM (gate order input, forget, cell, output).

    ``forward`` runs a whole window from a zero state and keeps what
    ``backward`` needs for exact backpropagation through time. An optional
    boolean mask of shape ``(B, T)`` freezes the state on masked steps, which
    lets windows of different lengths share one left-padded batch.
    """

    def __init__(self, n_in: int, hidden: int, layers: int = 2, rng: np.random.Generator | None = None,
                 name: str = "lstm"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.n_in, self.hidden, self.n_layers = n_in, hidden, layers
        self.W, self.b, self.dW, self.db = [], [], [], []
        for l in range(layers):
            fan_in = (n_in if l == 0 else hidden) + hidden
            self.W.append(rng.uniform(-1, 1, size=(4 * hidden, fan_in)) / np.sqrt(fan_in))
            self.b.append(np.zeros(4 * hidden))
            self.dW.append(np.zeros_like(self.W[-1]))
            self.db.append(np.zeros_like(self.b[-1]))

    def params(self):
        out = []
        for l in range(self.n_layers):
            out.append((f"{self.name}.W{l}", self.W[l], self.dW[l]))
            out.append((f"{self.name}.b{l}", self.b[l], self.db[l]))
        return out

    def zero_state(self, batch: int) -> LstmState:
        H = self.hidden
        return LstmState([np.zeros((batch, H)) for _ in range(self.n_layers)],
                         [np.zeros((batch, H)) for _ in range(self.n_layers)])

    def _cell(self, l, x, h, c):
        H = self.hidden
        xh = np.concatenate([x, h], axis=1)
        z = xh @ self.W[l].T + self.b[l]
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = sigmoid(z[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        return o * tc, c_new, (xh, i, f, g, o, tc)

    def step(self, x: np.ndarray, state: LstmState | None = None) -> tuple[np.ndarray, LstmState]:
        """One time step for a batch; returns the top hidden state and the new state."""
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.n_in:
            raise ShapeError(f"{self.name}: expected input dim {self.n_in}, got {x.shape[1]}")
        _check_finite(x, self.name)
        state = state if state is not None else self.zero_state(x.shape[0])
        hs, cs = [], []
        inp = x
        for l in range(self.n_layers):
            h, c, _ = self._cell(l, inp, state.h[l], state.c[l])
            hs.append(h)
            cs.append(c)
            inp = h
        return inp, LstmState(hs, cs)

    def forward(self, X: np.ndarray, mask: np.ndarray | None = None):
        if X.ndim != 3 or X.shape[2] != self.n_in:
            raise ShapeError(f"{self.name}: expected (B, T, {self.n_in}), got {X.shape}")
        if X.shape[1] < 1:
            raise ShapeError("window must hold at least one step")
        _check_finite(X, self.name)
        B, T, _ = X.shape
        m = np.ones((B, T)) if mask is None else mask.astype(float)
        seq = [X[:, t, :] for t in range(T)]
        caches = []
        for l in range(self.n_layers):
            h = np.zeros((B, self.hidden))
            c = np.zeros((B, self.hidden))
            out, layer_cache = [], []
            for t in range(T):
                mt = m[:, t:t + 1]
                h_new, c_new, cell = self._cell(l, seq[t], h, c)
                layer_cache.append((c, cell, mt))
                h = mt * h_new + (1 - mt) * h
                c = mt * c_new + (1 - mt) * c
                out.append(h)
            caches.append(layer_cache)
            seq = out
        return np.stack(seq, axis=1), caches

    def backward(self, caches, dH: np.ndarray) -> np.ndarray:
        """``dH`` is the loss gradient w.r.t. every top-layer output, shape (B, T, H)."""
        H = self.hidden
        B, T, _ = dH.shape
        d_above = [dH[:, t, :] for t in range(T)]
        for l in reversed(range(self.n_layers)):
            n_x = self.W[l].shape[1] - H
            dh_carry = np.zeros((B, H))
            dc_carry = np.zeros((B, H))
            d_below = [None] * T
            for t in reversed(range(T)):
                c_prev, (xh, i, f, g, o, tc), mt = caches[l][t]
                dh = d_above[t] + dh_carry
                dh_new = mt * dh
                dc = mt * dc_carry + dh_new * o * (1 - tc * tc)
                dz = np.concatenate([
                    dc * g * i * (1 - i),
                    dc * c_prev * f * (1 - f),
                    dc * i * (1 - g * g),
                    dh_new * tc * o * (1 - o),
                ], axis=1)
                self.dW[l] += dz.T @ xh
                self.db[l] += dz.sum(axis=0)
                dxh = dz @ self.W[l]
                d_below[t] = dxh[:, :n_x]
                dh_carry = dxh[:, n_x:] + (1 - mt) * dh
                dc_carry = dc * f + (1 - mt) * dc_carry
            d_above = d_below
        return np.stack(d_above, axis=1)


def softmax_forward(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(s: np.ndarray, ds: np.ndarray) -> np.ndarray:
    return s * (ds - (ds * s).sum(axis=-1, keepdims=True))


def gaussian_reparam(mu: np.ndarray, logvar: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """``z = mu + exp(logvar / 2) * eps`` for a noise draw ``eps`` supplied by the caller."""
    if mu.shape != logvar.shape or mu.shape != eps.shape:
        raise ShapeError("mu, logvar and eps must share a shape")
    return mu + np.exp(0.5 * logvar) * eps


def gaussian_reparam_backward(logvar, eps, dz):
    """Gradients of the sample w.r.t. ``(mu, logvar)``; the noise gets none."""
    return dz, dz * eps * 0.5 * np.exp(0.5 * logvar)


def kl_diag_gaussian(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """KL(N(mu, diag exp(logvar)) || N(0, I)) summed over the last axis."""
    return -0.5 * np.sum(1.0 + logvar - mu * mu - np.exp(logvar), axis=-1)


def kl_diag_gaussian_backward(mu, logvar):
    return mu, 0.5 * (np.exp(logvar) - 1.0)


class ParamVector:
    """Flat view over named parameter arrays and their gradients.

    Segments alias the layer arrays, so in-place updates through this view
    change the network.
    """

    def __init__(self, segments):
        self.segments = list(segments)
        names = [s[0] for s in self.segments]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        for name, val, grad in self.segments:
            if val.shape != grad.shape:
                raise ShapeError(f"{name}: gradient shape {grad.shape} != value shape {val.shape}")

    @classmethod
    def of(cls, *modules) -> "ParamVector":
        return cls([p for m in modules for p in m.params()])

    def __len__(self):
        return len(self.segments)

    @property
    def names(self) -> list[str]:
        return [s[0] for s in self.segments]

    @property
    def size(self) -> int:
        return sum(v.size for _, v, _ in self.segments)

    def flatten(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0)
        return np.concatenate([v.ravel() for _, v, _ in self.segments])

    def grad_flat(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0)
        return np.concatenate([g.ravel() for _, _, g in self.segments])

    def _scatter(self, vec: np.ndarray, which: int):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ShapeError(f"expected flat vector of length {self.size}, got {vec.shape}")
        i = 0
        for seg in self.segments:
            arr = seg[which]
            arr[...] = vec[i:i + arr.size].reshape(arr.shape)
            i += arr.size

    def unflatten(self, vec: np.ndarray):
        self._scatter(vec, 1)

    def set_grad(self, vec: np.ndarray):
        self._scatter(vec, 2)

    def zero_grad(self):
        for _, _, g in self.segments:
            g.fill(0.0)

    def copy_from(self, other: "ParamVector"):
        if [v.shape for _, v, _ in self.segments] != [v.shape for _, v, _ in other.segments]:
            raise ShapeError("parameter layouts differ")
        for (_, dst, _), (_, src, _) in zip(self.segments, other.segments):
            dst[...] = src

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: v.copy() for name, v, _ in self.segments}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for name, v, _ in self.segments:
            if name not in state:
                raise KeyError(f"checkpoint lacks {name}")
            if state[name].shape != v.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != {v.shape}")
            v[...] = state[name]


class Adam:
    """ADAM with bias correction; moments live with the optimizer, one per ParamVector."""

    def __init__(self, params: ParamVector, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = np.zeros(params.size)
        self.v = np.zeros(params.size)
        self.t = 0

    def step(self, grad: np.ndarray | None = None):
        g = self.params.grad_flat() if grad is None else grad
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        self.params.unflatten(self.params.flatten() - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


def adam_step(params: ParamVector, opt: Adam):
    opt.step()
    return params


_MAGIC = b"EVNAVCKP"
_VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]):
    """Write named float64 arrays: magic, version, segment table, then raw little-endian data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = bytearray(_MAGIC)
    header += struct.pack("<II", _VERSION, len(arrays))
    for name, arr in arrays.items():
        raw = name.encode()
        header += struct.pack("<H", len(raw)) + raw
        header += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    pos = len(_MAGIC)
    version, count = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        table.append((name, shape))
    out = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return out
