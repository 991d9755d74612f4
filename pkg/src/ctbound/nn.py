"""Neural-network building blocks on top of torch tensors.

torch supplies the tensor type and reverse-mode differentiation.  This module
adds shape-checked functional ops, the self-attention encoder, the 2D
sinusoidal positional encoding, a plain Adam implementation and the
checkpoint file format.

Image tensors are channels-first, ``(batch, channels, height, width)``.
"""
from __future__ import annotations

import ast
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, DimensionError, ImageIOError, TrainingError

# ---------------------------------------------------------------- functional ops


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Zero-padded cross-correlation; output size ``(in + 2*pad - kernel) // stride + 1``."""
    if x.dim() != 4 or weight.dim() != 4:
        raise DimensionError(
            f"conv2d expects 4-d input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"conv2d: input channels (axis 1) = {x.shape[1]} but weight in-channels "
            f"(axis 1) = {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"conv2d: bias shape {tuple(bias.shape)} does not match out-channels "
            f"(weight axis 0) = {weight.shape[0]}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d: need stride >= 1 and pad >= 0, got {stride}, {pad}")
    for axis in (2, 3):
        if x.shape[axis] + 2 * pad < weight.shape[axis]:
            raise DimensionError(
                f"conv2d: padded input axis {axis} ({x.shape[axis]} + 2*{pad}) is smaller "
                f"than kernel axis {axis} ({weight.shape[axis]})")
    return F.conv2d(x, weight, bias, stride=stride, padding=pad)


def maxpool2d(x, kernel, stride):
    if x.dim() != 4:
        raise DimensionError(f"maxpool2d expects 4-d input, got {tuple(x.shape)}")
    if kernel > x.shape[2] or kernel > x.shape[3]:
        raise DimensionError(
            f"maxpool2d: kernel {kernel} larger than input spatial axes "
            f"(2, 3) = {tuple(x.shape[2:])}")
    return F.max_pool2d(x, kernel, stride)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input last axis = {x.shape[-1]} but weight axis 1 = {weight.shape[1]}")
    return F.linear(x, weight, bias)


def relu(x):
    return torch.relu(x)


def layer_norm(x, gain, bias, eps=1e-5):
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm: gain/bias shapes {tuple(gain.shape)}, {tuple(bias.shape)} "
            f"do not match last axis {x.shape[-1]}")
    return F.layer_norm(x, x.shape[-1:], gain, bias, eps)


def softmax(x, axis=-1):
    return torch.softmax(x, dim=axis)


# -------------------------------------------------------------------- layers


class Linear(nn.Module):
    def __init__(self, n_in, n_out, bias=True):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = nn.Parameter(torch.empty(n_out, n_in).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(n_out).uniform_(-bound, bound)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class Conv2d(nn.Module):
    def __init__(self, c_in, c_out, kernel, stride=1, pad=0):
        super().__init__()
        fan_in = c_in * kernel * kernel
        # He initialization; every conv is followed by a ReLU
        std = math.sqrt(2.0 / fan_in)
        self.weight = nn.Parameter(torch.randn(c_out, c_in, kernel, kernel) * std)
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.stride, self.pad = stride, pad

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)


class MaxPool2d(nn.Module):
    def __init__(self, kernel, stride):
        super().__init__()
        self.kernel, self.stride = kernel, stride

    def forward(self, x):
        return maxpool2d(x, self.kernel, self.stride)


class LayerNorm(nn.Module):
    def __init__(self, d, eps=1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention without masking.

    Accepts ``(n, d)`` or ``(batch, n, d)``.
    """

    def __init__(self, d, heads):
        super().__init__()
        if d % heads:
            raise ConfigurationError(f"model dimension {d} is not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q = Linear(d, d)
        self.k = Linear(d, d)
        self.v = Linear(d, d)
        self.out = Linear(d, d)

    def forward(self, x):
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        B, n, d = x.shape
        if d != self.d:
            raise DimensionError(f"attention: token width (axis 2) = {d}, expected {self.d}")
        h, dh = self.heads, d // self.heads

        def split(t):
            return t.reshape(B, n, h, dh).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        attn = softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), axis=-1)
        y = (attn @ v).transpose(1, 2).reshape(B, n, d)
        y = self.out(y)
        return y[0] if squeeze else y


class EncoderLayer(nn.Module):
    """Pre-norm block: ``x + attn(ln(x))`` then ``x + ff(ln(x))``."""

    def __init__(self, d, heads, d_ff):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, heads)
        self.ln2 = LayerNorm(d)
        self.ff1 = Linear(d, d_ff)
        self.ff2 = Linear(d_ff, d)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ff2(relu(self.ff1(self.ln2(x))))


class TransformerEncoder(nn.Module):
    def __init__(self, d=128, layers=8, heads=8, d_ff=256):
        super().__init__()
        self.d, self.n_layers, self.heads, self.d_ff = d, layers, heads, d_ff
        self.layers = nn.ModuleList(EncoderLayer(d, heads, d_ff) for _ in range(layers))
        self.ln = LayerNorm(d)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return self.ln(x)


# ------------------------------------------------------- positional encoding


def positional_encoding_2d(m, n, d):
    """2D sinusoidal encoding of grid position ``(m, n)`` as a length-``d`` vector.

    The first half holds interleaved ``sin/cos(m * w_i)``, the second half the
    same for ``n``, with ``w_i = 10000 ** (-4 i / d)`` for pair index ``i``.
    """
    if d % 2:
        raise ConfigurationError(f"positional encoding needs an even dimension, got {d}")
    return positional_encoding_grid(np.array([m]), np.array([n]), d)[0]


def positional_encoding_grid(rows, cols, d):
    """Encodings for paired index arrays ``rows`` and ``cols``; returns ``(len, d)`` float64."""
    if d % 2:
        raise ConfigurationError(f"positional encoding needs an even dimension, got {d}")
    rows = np.asarray(rows, dtype=np.float64).reshape(-1)
    cols = np.asarray(cols, dtype=np.float64).reshape(-1)
    half = d // 2
    pairs = np.arange((half + 1) // 2)
    freq = 10000.0 ** (-4.0 * pairs / d)
    out = np.zeros((rows.size, d))
    for offset, pos in ((0, rows), (half, cols)):
        arg = pos[:, None] * freq[None, :]
        sin_idx = offset + 2 * pairs
        cos_idx = sin_idx + 1
        keep = cos_idx < offset + half
        out[:, sin_idx] = np.sin(arg)
        out[:, cos_idx[keep]] = np.cos(arg[:, keep])
    return out


# ------------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state, names=None):
    """One bias-corrected Adam update, applied in place to ``params``.

    ``params`` and ``grads`` are matching sequences of tensors.  A non-finite
    gradient raises :class:`TrainingError` before anything is modified.
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    names = names or [f"param{i}" for i in range(len(params))]
    for name, p, g in zip(names, params, grads):
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient {tuple(g.shape)} vs parameter {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name}", param_name=name)
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return state


class Adam:
    """Adam over a module's named parameters; ``lr`` may be changed between steps."""

    def __init__(self, named_parameters, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        named = [(n, p) for n, p in named_parameters if p.requires_grad]
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        adam_step(self.params, grads, self.state, self.names)

    def reset(self):
        self.state = AdamState(lr=self.state.lr, beta1=self.state.beta1,
                               beta2=self.state.beta2, eps=self.state.eps)


# ------------------------------------------------------------------ checkpoints

CHECKPOINT_SCHEMA = "ctbound-checkpoint/1"
_END = b"end\n"


def save_checkpoint(path, tensors, hparams=None):
    """Write a text manifest followed by one little-endian float32 blob.

    The manifest is ``key = value`` lines (``schema``, hyperparameters as
    ``hparam.<name>``) and one ``param <name> <shape> <offset> <count>`` line
    per tensor, terminated by a line ``end``.  Offsets are bytes into the blob.
    """
    lines = [f"schema = {CHECKPOINT_SCHEMA}"]
    for key, value in sorted((hparams or {}).items()):
        lines.append(f"hparam.{key} = {value!r}")
    blobs, offset = [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(_as_numpy(t), dtype="<f4")
        shape = ",".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"param {name} {shape} {offset} {arr.size}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = ("\n".join(lines) + "\n").encode("utf-8") + _END
    Path(path).write_bytes(header + b"".join(blobs))


def load_checkpoint(path):
    """Return ``(hparams, tensors)`` where tensors are float32 NumPy arrays."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageIOError(path, f"cannot read checkpoint ({exc.strerror})") from exc
    split = raw.find(b"\n" + _END)
    if split < 0 or not raw.startswith(b"schema = "):
        raise ImageIOError(path, "not a ctbound checkpoint")
    header = raw[:split + 1].decode("utf-8")
    blob = raw[split + 1 + len(_END):]
    hparams, tensors = {}, {}
    for line in header.splitlines():
        if line.startswith("schema = "):
            schema = line.split("=", 1)[1].strip()
            if schema != CHECKPOINT_SCHEMA:
                raise ImageIOError(path, f"unsupported checkpoint schema {schema!r}")
        elif line.startswith("hparam."):
            key, value = line[len("hparam."):].split(" = ", 1)
            hparams[key] = ast.literal_eval(value)
        elif line.startswith("param "):
            _, name, shape, offset, count = line.split()
            shape = () if shape == "scalar" else tuple(int(s) for s in shape.split(","))
            offset, count = int(offset), int(count)
            if offset + 4 * count > len(blob):
                raise ImageIOError(path, f"truncated data for parameter {name}")
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=count,
                                          offset=offset).reshape(shape).copy()
    return hparams, tensors


def _as_numpy(t):
    if isinstance(t, torch.Tensor):
        return t.detach().cpu().numpy()
    return np.asarray(t)


def checkpoint_digest(path):
    """SHA-256 of a checkpoint file."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
