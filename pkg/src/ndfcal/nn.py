"""Small dense-network engine: MLP forward/backward, positional encoding, Adam.

Everything is plain numpy. Layers compute ``a_{l+1} = act(a_l @ W_l + b_l)``
with ``W_l`` of shape ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    """Backward was called with a cache from before the last parameter update."""


# Derivatives are written in terms of the activation output ``a`` where
# possible so that the pre-activation need not be cached.
def _softplus(z):
    return np.logaddexp(0.0, z).astype(z.dtype, copy=False)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


ACTIVATIONS = {
    "identity": (lambda z: z, lambda z, a: np.ones_like(a)),
    "relu": (lambda z: np.maximum(z, 0), lambda z, a: (a > 0).astype(a.dtype)),
    "sigmoid": (_sigmoid, lambda z, a: a * (1 - a)),
    "softplus": (_softplus, lambda z, a: _sigmoid(z)),
}
NEEDS_PREACT = {"softplus"}


def activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}")


def positional_encoding(x, n_freqs: int, scale: float = 1.0) -> np.ndarray:
    """``[sin(2^0 x), ..., sin(2^{L-1} x), cos(2^0 x), ..., cos(2^{L-1} x)]``.

    ``x`` is ``(n, 3)`` (or a single 3-vector) in world units; it is first
    multiplied by ``scale``. Output has ``6 * n_freqs`` columns, the three
    coordinates interleaved within each frequency.
    """
    x = np.asarray(x)
    single = x.ndim == 1
    x = np.atleast_2d(x) * scale
    if n_freqs == 0:
        out = np.zeros((len(x), 0), dtype=x.dtype)
    else:
        freqs = (2.0 ** np.arange(n_freqs)).astype(x.dtype)
        px = (x[:, None, :] * freqs[None, :, None]).reshape(len(x), -1)
        out = np.concatenate([np.sin(px), np.cos(px)], axis=1)
    return out[0] if single else out


class Mlp:
    """Fully connected network with one hidden activation and one output activation."""

    def __init__(self, sizes, hidden_activation="relu", output_activation="identity",
                 dtype=np.float64, seed=None):
        if len(sizes) < 2:
            raise ShapeError("need at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        activation(hidden_activation)
        activation(output_activation)
        self.dtype = np.dtype(dtype)
        self.version = 0
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        n_layers = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if i < n_layers - 1:
                limit = np.sqrt(6.0 / fan_in)  # He-uniform
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))  # Glorot-uniform
            self.weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)).astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))

    @property
    def n_layers(self):
        return len(self.weights)

    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def set_params(self, params):
        for i in range(self.n_layers):
            self.weights[i][...] = params[2 * i]
            self.biases[i][...] = params[2 * i + 1]
        self.touch()

    def touch(self):
        """Mark parameters as changed so older caches are rejected."""
        self.version += 1

    def astype(self, dtype) -> "Mlp":
        net = Mlp.__new__(Mlp)
        net.__dict__.update(self.__dict__)
        net.dtype = np.dtype(dtype)
        net.weights = [W.astype(dtype) for W in self.weights]
        net.biases = [b.astype(dtype) for b in self.biases]
        net.version = 0
        return net

    def _act(self, i):
        return self.output_activation if i == self.n_layers - 1 else self.hidden_activation

    def forward(self, X, keep_cache=True):
        X = np.asarray(X, dtype=self.dtype)
        if X.ndim != 2 or X.shape[1] != self.sizes[0]:
            raise ShapeError(f"input width {X.shape[-1] if X.ndim else 0} != {self.sizes[0]}")
        inputs, preacts = [], []
        a = X
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if keep_cache:
                inputs.append(a)
            z = a @ W
            z += b
            name = self._act(i)
            if keep_cache:
                preacts.append(z if name in NEEDS_PREACT else None)
            if name == "relu":
                a = np.maximum(z, 0, out=z)
            else:
                a = activation(name)[0](z)
        cache = {"inputs": inputs, "preacts": preacts, "output": a,
                 "version": self.version} if keep_cache else None
        return a, cache

    def backward(self, cache, dY):
        """Gradients of a scalar loss given ``dY = dL/d(output)``.

        Returns ``(grads, dX)`` with ``grads`` ordered like :meth:`params`.
        """
        if cache is None or cache["version"] != self.version:
            raise StaleCacheError("cache does not match current parameters")
        dA = np.asarray(dY, dtype=self.dtype)
        a = cache["output"]
        if dA.shape != a.shape:
            raise ShapeError(f"gradient shape {dA.shape} != output shape {a.shape}")
        grads = [None] * (2 * self.n_layers)
        for i in reversed(range(self.n_layers)):
            name = self._act(i)
            if name == "identity":
                dZ = dA
            elif name == "relu":
                dZ = dA * (a > 0)
            else:
                dZ = dA * activation(name)[1](cache["preacts"][i], a)
            x = cache["inputs"][i]
            grads[2 * i] = x.T @ dZ
            grads[2 * i + 1] = dZ.sum(axis=0)
            dA = dZ @ self.weights[i].T
            a = x
        return grads, dA

    def config(self) -> dict:
        return {"sizes": self.sizes, "hidden_activation": self.hidden_activation,
                "output_activation": self.output_activation}


class Adam:
    """Adam with bias correction; the learning rate is passed per step."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def step(self, params, grads, lr):
        """Update ``params`` in place."""
        if len(params) != len(self.m):
            raise ShapeError("parameter list does not match optimizer state")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def lr_schedule(lr_start=5e-4, lr_end=5e-6, step=0, total=1):
    """Log-linear decay from ``lr_start`` at step 0 to ``lr_end`` at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr_start * (lr_end / lr_start) ** (step / total)


def save_networks(path, nets: dict, meta: dict, dtype="<f4") -> Path:
    """Checkpoint: 8-byte header length, JSON header, then a weight blob.

    Weights of each named network are written layer by layer (W then b,
    row-major) in the order the header lists them.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"dtype": dtype, "networks": {k: n.config() for k, n in nets.items()},
              "order": list(nets), **meta}
    head = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(p.astype(dtype).tobytes() for k in nets for p in nets[k].params())
    with open(path, "wb") as f:
        f.write(len(head).to_bytes(8, "little"))
        f.write(head)
        f.write(blob)
    return path


def load_networks(path, dtype=np.float64):
    data = Path(path).read_bytes()
    n = int.from_bytes(data[:8], "little")
    header = json.loads(data[8:8 + n])
    flat = np.frombuffer(data[8 + n:], dtype=header["dtype"])
    nets, offset = {}, 0
    for name in header["order"]:
        cfg = header["networks"][name]
        net = Mlp(cfg["sizes"], cfg["hidden_activation"], cfg["output_activation"], dtype=dtype)
        for p in net.params():
            size = p.size
            p[...] = flat[offset:offset + size].reshape(p.shape)
            offset += size
        nets[name] = net
    return nets, header
