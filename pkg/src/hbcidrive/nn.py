"""Small numpy network engine for the convolutional Q-network.

Only what the Q-function needs: valid (unpadded) strided convolutions,
fully-connected layers, rectifiers, an Adam / plain SGD update and a binary
checkpoint format. Arrays are ``float32`` unless a network is built with
``dtype=np.float64`` (used for finite-difference checks).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"HBQNET\x00\x01"
FORMAT_VERSION = 1

_KIND_CONV = 0
_KIND_DENSE = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed."""


def conv_output_size(n, kernel, stride):
    """Spatial output size of a valid convolution."""
    out = (n - kernel) // stride + 1
    if out < 1:
        raise ValueError(
            f"kernel {kernel} with stride {stride} does not fit input size {n}")
    return out


class Conv2D:
    kind = _KIND_CONV

    def __init__(self, in_channels, out_channels, kernel, stride, rng=None,
                 dtype=np.float32):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        fan_in = self.in_channels * self.kernel * self.kernel
        rng = np.random.default_rng(0) if rng is None else rng
        self.W = (rng.standard_normal(
            (self.out_channels, self.in_channels, self.kernel, self.kernel))
            * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.b = np.zeros(self.out_channels, dtype=dtype)
        self._cache = None

    @property
    def dims(self):
        return (self.in_channels, self.out_channels, self.kernel, self.stride)

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {c}")
        return (self.out_channels,
                conv_output_size(h, self.kernel, self.stride),
                conv_output_size(w, self.kernel, self.stride))

    def forward(self, x):
        # activations are laid out (C, B, H, W) so each kernel offset is a slice
        C, B, H, W = x.shape
        k, s = self.kernel, self.stride
        oh = conv_output_size(H, k, s)
        ow = conv_output_size(W, k, s)
        cols = np.empty((C, k, k, B, oh, ow), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = x[:, :, i:i + s * (oh - 1) + 1:s,
                                  j:j + s * (ow - 1) + 1:s]
        cols = cols.reshape(C * k * k, B * oh * ow)
        out = self.W.reshape(self.out_channels, -1) @ cols + self.b[:, None]
        self._cache = (x.shape, cols, oh, ow)
        return out.reshape(self.out_channels, B, oh, ow)

    def backward(self, grad, need_input_grad=True):
        x_shape, cols, oh, ow = self._cache
        C, B, H, W = x_shape
        k, s = self.kernel, self.stride
        g2 = grad.reshape(self.out_channels, B * oh * ow)
        dW = (g2 @ cols.T).reshape(self.W.shape)
        db = g2.sum(axis=1)
        if not need_input_grad:
            return None, (dW, db)
        dcols = (self.W.reshape(self.out_channels, -1).T @ g2).reshape(
            C, k, k, B, oh, ow)
        dx = np.zeros(x_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * (oh - 1) + 1:s,
                   j:j + s * (ow - 1) + 1:s] += dcols[:, i, j]
        return dx, (dW, db)


class Dense:
    kind = _KIND_DENSE

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32,
                 gain=2.0):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        rng = np.random.default_rng(0) if rng is None else rng
        self.W = (rng.standard_normal((self.out_features, self.in_features))
                  * np.sqrt(gain / self.in_features)).astype(dtype)
        self.b = np.zeros(self.out_features, dtype=dtype)
        self._cache = None

    @property
    def dims(self):
        return (self.in_features, self.out_features)

    def forward(self, x):
        self._cache = x
        return x @ self.W.T + self.b

    def backward(self, grad, need_input_grad=True):
        x = self._cache
        dW = grad.T @ x
        db = grad.sum(axis=0)
        dx = grad @ self.W if need_input_grad else None
        return dx, (dW, db)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad, pre_activation):
    # tie at zero gets zero gradient
    return grad * (pre_activation > 0)


@dataclass
class Architecture:
    """Layer sizes of a Q-network; ``conv`` holds (filters, kernel, stride)."""

    input_shape: tuple = (3, 64, 64)
    conv: tuple = ((32, 8, 4), (64, 4, 2), (64, 3, 1))
    hidden: int = 512
    n_actions: int = 3


PAPER_ARCH = Architecture()
# 32x32 input cannot take an 8x8/4 first layer followed by 4x4/2 and 3x3/1,
# so the desk preset halves the first kernel and stride (32 -> 15 -> 6 -> 4).
DESK_ARCH = Architecture(input_shape=(3, 32, 32),
                         conv=((16, 4, 2), (32, 4, 2), (32, 3, 1)),
                         hidden=256)


class QNetwork:
    """Conv -> ReLU (x3) -> dense -> ReLU -> linear head, one output per action.

    Parameters
    ----------
    arch : Architecture
        Layer sizes. ``PAPER_ARCH`` and ``DESK_ARCH`` are the two presets.
    seed : int
        Seed for the He-normal weight initialisation (biases start at 0).
    dtype : numpy dtype
        ``np.float32`` for training, ``np.float64`` for gradient checks.
    """

    def __init__(self, arch=PAPER_ARCH, seed=0, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.convs = []
        shape = tuple(arch.input_shape)
        for filters, kernel, stride in arch.conv:
            layer = Conv2D(shape[0], filters, kernel, stride, rng, dtype)
            shape = layer.output_shape(shape)
            self.convs.append(layer)
        self.flat_size = int(np.prod(shape))
        self.dense = Dense(self.flat_size, arch.hidden, rng, dtype)
        self.head = Dense(arch.hidden, arch.n_actions, rng, dtype, gain=1.0)
        self._pre = None

    @property
    def layers(self):
        return [*self.convs, self.dense, self.head]

    @property
    def input_shape(self):
        return tuple(self.arch.input_shape)

    @property
    def n_actions(self):
        return self.arch.n_actions

    def param_names(self):
        names = []
        for i, _ in enumerate(self.convs, start=1):
            names += [f"conv{i}.W", f"conv{i}.b"]
        names += ["dense.W", "dense.b", "head.W", "head.b"]
        return names

    def params(self):
        """Parameter arrays in fixed layer order (views, not copies)."""
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def named_params(self):
        return dict(zip(self.param_names(), self.params()))

    def n_params(self):
        return int(sum(p.size for p in self.params()))

    def forward(self, obs):
        """Q-values for one observation ``(C, H, W)`` or a batch ``(B, C, H, W)``."""
        x = np.asarray(obs, dtype=self.dtype)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ValueError(
                f"observation shape {x.shape[1:]} does not match network "
                f"input {self.input_shape}")
        pre = []
        x = x.transpose(1, 0, 2, 3)
        for conv in self.convs:
            z = conv.forward(x)
            pre.append(z)
            x = relu(z)
        x = x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)
        z = self.dense.forward(x)
        pre.append(z)
        q = self.head.forward(relu(z))
        self._pre = pre
        return q[0] if single else q

    def backward(self, grad_q):
        """Reverse pass for the most recent :meth:`forward` call.

        Returns a dict of gradients keyed like :meth:`param_names`.
        """
        if self._pre is None:
            raise RuntimeError("backward called before forward")
        g = np.asarray(grad_q, dtype=self.dtype)
        if g.ndim == 1:
            g = g[None]
        grads = {}
        g, (dW, db) = self.head.backward(g)
        grads["head.W"], grads["head.b"] = dW, db
        g = relu_backward(g, self._pre[-1])
        g, (dW, db) = self.dense.backward(g)
        grads["dense.W"], grads["dense.b"] = dW, db
        c, b, h, w = self._pre[-2].shape
        g = g.reshape(b, c, h, w).transpose(1, 0, 2, 3)
        for i in range(len(self.convs) - 1, -1, -1):
            g = relu_backward(g, self._pre[i])
            g, (dW, db) = self.convs[i].backward(g, need_input_grad=i > 0)
            grads[f"conv{i + 1}.W"], grads[f"conv{i + 1}.b"] = dW, db
        return {name: grads[name] for name in self.param_names()}

    def copy(self):
        other = QNetwork.__new__(QNetwork)
        other.arch = self.arch
        other.dtype = self.dtype
        other.convs = []
        for conv in self.convs:
            c = Conv2D.__new__(Conv2D)
            c.__dict__.update(conv.__dict__)
            c.W, c.b, c._cache = conv.W.copy(), conv.b.copy(), None
            other.convs.append(c)
        other.flat_size = self.flat_size
        for name in ("dense", "head"):
            src = getattr(self, name)
            d = Dense.__new__(Dense)
            d.__dict__.update(src.__dict__)
            d.W, d.b, d._cache = src.W.copy(), src.b.copy(), None
            setattr(other, name, d)
        other._pre = None
        return other

    def load_params_from(self, other):
        """Copy parameters of ``other`` into this network in place."""
        for dst, src in zip(self.params(), other.params()):
            if dst.shape != src.shape:
                raise ValueError("architectures differ")
            dst[...] = src

    def summary(self):
        lines = [f"{'layer':<8}{'shape':<24}{'params':>10}"]
        shape = self.input_shape
        lines.append(f"{'input':<8}{str(shape):<24}{0:>10}")
        for i, conv in enumerate(self.convs, start=1):
            shape = conv.output_shape(shape)
            n = conv.W.size + conv.b.size
            lines.append(f"{'conv' + str(i):<8}{str(shape):<24}{n:>10}")
        for name in ("dense", "head"):
            layer = getattr(self, name)
            n = layer.W.size + layer.b.size
            lines.append(f"{name:<8}{str((layer.out_features,)):<24}{n:>10}")
        lines.append(f"{'total':<8}{'':<24}{self.n_params():>10}")
        return "\n".join(lines) + "\n"


def forward(net, obs):
    return net.forward(obs)


def backward(net, obs, grad_q):
    """Gradients of ``sum(grad_q * Q(obs))`` w.r.t. every parameter."""
    net.forward(obs)
    return net.backward(grad_q)


@dataclass
class OptimizerState:
    """Update rule state. ``rule`` is ``"adam"`` or ``"sgd"``."""

    lr: float = 1e-4
    rule: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("step size must be positive")
        if self.rule not in ("adam", "sgd"):
            raise ValueError(f"unknown update rule {self.rule!r}")


class NonFiniteGradientError(FloatingPointError):
    pass


def apply_update(net, grads, opt):
    """Descend along ``grads`` (loss-gradient convention) in place; returns ``net``."""
    named = net.named_params()
    for name, g in grads.items():
        if name not in named:
            raise KeyError(f"unknown parameter {name!r}")
        if g.shape != named[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient in layer {name.split('.')[0]}")
    opt.step += 1
    if opt.rule == "sgd":
        for name, g in grads.items():
            named[name] -= (opt.lr * g).astype(named[name].dtype)
        return net
    b1, b2 = opt.beta1, opt.beta2
    corr1 = 1.0 - b1 ** opt.step
    corr2 = 1.0 - b2 ** opt.step
    for name, g in grads.items():
        p = named[name]
        m = opt.m.setdefault(name, np.zeros_like(p))
        v = opt.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (opt.lr * (m / corr1) / (np.sqrt(v / corr2) + opt.eps)).astype(p.dtype)
    return net


def save(net, path):
    """Write a checkpoint and a ``<path>.txt`` layer summary next to it."""
    path = Path(path)
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    buf += struct.pack("<3I", *net.input_shape)
    buf += struct.pack("<I", len(net.layers))
    for layer in net.layers:
        dims = layer.dims
        buf += struct.pack("<BB", layer.kind, len(dims))
        buf += struct.pack(f"<{len(dims)}I", *dims)
    for p in net.params():
        buf += np.ascontiguousarray(p, dtype="<f4").tobytes()
    path.write_bytes(bytes(buf))
    path.with_name(path.name + ".txt").write_text(net.summary())
    return path


def load(path):
    data = Path(path).read_bytes()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a Q-network checkpoint")
    pos = len(MAGIC)
    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    input_shape = take("<3I")
    (n_layers,) = take("<I")
    layers = []
    for _ in range(n_layers):
        kind, n_dims = take("<BB")
        layers.append((kind, take(f"<{n_dims}I")))
    convs = tuple((d[1], d[2], d[3]) for k, d in layers if k == _KIND_CONV)
    dense = [d for k, d in layers if k == _KIND_DENSE]
    if len(dense) != 2 or len(convs) + 2 != n_layers:
        raise CheckpointError("unexpected layer table")
    arch = Architecture(input_shape=tuple(input_shape), conv=convs,
                        hidden=dense[0][1], n_actions=dense[1][1])
    net = QNetwork(arch)
    for p in net.params():
        nbytes = p.size * 4
        if pos + nbytes > len(data):
            raise CheckpointError("truncated checkpoint")
        p[...] = np.frombuffer(data, dtype="<f4", count=p.size,
                               offset=pos).reshape(p.shape)
        pos += nbytes
    if pos != len(data):
        raise CheckpointError("trailing bytes after parameters")
    return net
