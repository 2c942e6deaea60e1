"""Small feed-forward networks with hand-written backprop, Adam, gradient
clipping, a plateau learning-rate rule and the checkpoint file format."""

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointMismatch, FormatError, ShapeMismatch

ACTIVATIONS = ("relu", "silu")


@dataclass
class Mlp:
    """Weights are stored ``(fan_in, fan_out)`` so a layer is ``x @ W + b``."""

    weights: list
    biases: list
    activation: str = "silu"

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def names(self):
        out = []
        for i in range(len(self.weights)):
            out += [f"W{i}", f"b{i}"]
        return out


def init_mlp(sizes, rng, activation="silu", last_scale=1.0):
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    ws, bs = [], []
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = np.sqrt(2.0 / fi) if activation == "relu" else np.sqrt(1.0 / fi)
        if i == len(sizes) - 2:
            std *= last_scale
        ws.append(rng.standard_normal((fi, fo)) * std)
        bs.append(np.zeros(fo))
    return Mlp(ws, bs, activation)


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z / (1.0 + np.exp(-z))


def _act_grad(z, kind):
    if kind == "relu":
        return (z > 0).astype(float)
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def mlp_forward(params, x, return_cache=False):
    """Affine + activation per hidden layer; the last layer is affine only."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.weights[0].shape[0]:
        raise ShapeMismatch(
            f"input dim {x.shape[-1]} != first layer {params.weights[0].shape[0]}")
    inputs, pre = [], []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = z if i == last else _act(z, params.activation)
    if return_cache:
        return h, (inputs, pre)
    return h


def mlp_backward(params, cache, upstream):
    """Reverse-mode gradients.

    Returns ``(grads, dx)`` where ``grads`` follows ``params.arrays()`` order.
    """
    inputs, pre = cache
    g = np.asarray(upstream, dtype=float)
    if g.shape != pre[-1].shape:
        raise ShapeMismatch(f"upstream grad {g.shape} != output {pre[-1].shape}")
    grads = [None] * (2 * len(params.weights))
    for i in range(len(params.weights) - 1, -1, -1):
        if i != len(params.weights) - 1:
            g = g * _act_grad(pre[i], params.activation)
        x = inputs[i]
        grads[2 * i] = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        grads[2 * i + 1] = g.reshape(-1, g.shape[-1]).sum(axis=0)
        g = g @ params.weights[i].T
    return grads, g


def time_embedding(t, dim=32):
    """Sinusoidal features of t in [0, 1]: sin and cos at dim/2 frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    freqs = np.pi * 2.0 ** np.linspace(0.0, 6.0, dim // 2)
    arg = t[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def clip_grad_norm(grads, max_norm):
    """Scale gradients so their global 2-norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm and total > max_norm:
        s = max_norm / total
        return [g * s for g in grads], total
    return list(grads), total


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, clip=1.0):
    """Clipped Adam update with bias correction, applied in place.

    Returns the global gradient norm before clipping.
    """
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    grads, norm = clip_grad_norm(grads, clip)
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return norm


@dataclass
class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` evaluations without
    improvement, never going below ``min_lr``."""

    lr: float
    factor: float = 0.8
    patience: int = 10
    min_lr: float = 5e-6
    threshold: float = 1e-4
    best: float = field(default=np.inf)
    bad: int = 0

    def step(self, metric):
        if not np.isfinite(self.best) or metric < self.best - abs(self.best) * self.threshold:
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad = 0
        return self.lr


# -- checkpoints -------------------------------------------------------------

MAGIC = b"MFLW"
FORMAT_VERSION = 1


def atomic_write(path, data):
    """Write bytes or text via a temp file in the target directory."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(tensors):
    """Serialize ``{name: array}``.

    Layout (little-endian): magic ``MFLW``, u32 version, then per tensor a u32
    name length, UTF-8 name, u32 rank, rank x u64 dims and the float64 data.
    """
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, arr in tensors.items():
        a = np.array(arr, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def decode_checkpoint(buf):
    if buf[:4] != MAGIC:
        raise CheckpointMismatch("bad magic: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {version}")
    pos = 8
    tensors = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(buf):
                raise FormatError("truncated tensor data")
            a = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            tensors[name] = a.astype(float)
    except struct.error as e:
        raise FormatError(f"truncated checkpoint: {e}") from None
    return tensors


def save_checkpoint(path, tensors):
    atomic_write(path, encode_checkpoint(tensors))


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from None
    return decode_checkpoint(buf)
