"""Parameterized building blocks shared by the ASR model, the critic and the LM."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor

MASK_NEG = -1e30


class Module:
    """Minimal parameter container.

    Parameters are trainable tensors stored as attributes; buffers are plain
    numpy arrays listed in ``_buffers``.  Iteration follows attribute
    declaration order, which fixes the checkpoint layout.
    """

    _buffers: tuple = ()

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, v.data) for k, v in self.named_parameters())
        state.update((k, np.asarray(v)) for k, v in self.named_buffers())
        return state

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        buffers = {k for k, _ in self.named_buffers()}
        missing = (set(params) | buffers) - set(state)
        if missing:
            raise KeyError(f"missing entries: {sorted(missing)}")
        for name, value in state.items():
            if name in params:
                if params[name].shape != value.shape:
                    raise ShapeError("load", f"{name}: {value.shape} != {params[name].shape}")
                params[name].data = np.array(value, dtype=np.float64)
            elif name in buffers:
                owner, attr = self._resolve(name)
                setattr(owner, attr, np.array(value, dtype=np.float64))

    def _resolve(self, dotted: str):
        obj = self
        *path, attr = dotted.split(".")
        for part in path:
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        return obj, attr

    def zero_(self):
        for p in self.parameters():
            p.data = np.zeros_like(p.data)
        return self

    def eval(self):
        for m in self.modules():
            if isinstance(m, BatchNorm):
                m.training = False
        return self

    def train(self):
        for m in self.modules():
            if isinstance(m, BatchNorm):
                m.training = True
        return self

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, value in self.state_dict().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(value).tobytes())
        return h.hexdigest()


def param(rng: np.random.Generator, shape, scale: float) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    """y = x W^T + b, applied over the last axis."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param(rng, (n_out, n_in), 1.0 / np.sqrt(n_in))
        self.bias = zeros_param((n_out,)) if bias else None

    def __call__(self, x):
        x = ad.as_tensor(x)
        n_out, n_in = self.weight.shape
        if x.shape[-1] != n_in:
            raise ShapeError("linear", f"input width {x.shape[-1]} != {n_in}")
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else ad.reshape(x, (-1 if lead else 1, n_in))
        y = ad.matmul(flat, ad.transpose(self.weight))
        if self.bias is not None:
            y = y + self.bias
        return y if x.ndim == 2 else ad.reshape(y, lead + (n_out,))


class Conv1d(Module):
    """Valid 1-D convolution over (B, T, C) sequences."""

    def __init__(self, c_in: int, c_out: int, window: int, rng: np.random.Generator,
                 stride: int = 1):
        if window < 1 or stride < 1:
            raise ContractError("conv1d: window and stride must be positive")
        self.kernel = param(rng, (c_out, c_in, window), 1.0 / np.sqrt(c_in * window))
        self.bias = zeros_param((c_out,))
        self.stride = stride

    @property
    def window(self) -> int:
        return self.kernel.shape[2]

    def out_length(self, length):
        return (np.asarray(length) - self.window) // self.stride + 1

    def __call__(self, x):
        return ad.conv1d(x, self.kernel, self.bias, self.stride)


class BatchNorm(Module):
    """Per-channel normalization over the leading axes of (..., C) input.

    ``mask`` (shape of the leading axes) excludes padded positions from the
    batch statistics.  Running statistics follow
    ``running = momentum * running + (1 - momentum) * batch``.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = zeros_param((channels,))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.training = True

    def __call__(self, x, mask=None):
        x = ad.as_tensor(x)
        if not self.training:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            return (x - self.running_mean) * (inv * self.gamma) + self.beta
        m = np.ones(x.shape[:-1]) if mask is None else np.asarray(mask, dtype=np.float64)
        count = m.sum()
        if count < 2:
            raise ContractError("batchnorm: training mode needs at least 2 samples per channel")
        m = m[..., None]
        axes = tuple(range(x.ndim - 1))
        mu = ad.sum_(x * m, axis=axes) * (1.0 / count)
        centered = (x - mu) * m
        var = ad.sum_(centered * centered, axis=axes) * (1.0 / count)
        xhat = centered * ad.power(var + self.eps, -0.5)
        self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mu.data
        self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var.data
        return xhat * self.gamma + self.beta


class LSTMCell(Module):
    """Standard LSTM cell; gate order in the stacked weight is i, f, o, g."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        scale = 1.0 / np.sqrt(hidden)
        self.weight = param(rng, (n_in + hidden, 4 * hidden), scale)
        self.bias = zeros_param((4 * hidden,))
        self.hidden = hidden

    def initial_state(self, batch: int):
        z = Tensor(np.zeros((batch, self.hidden)))
        return z, z

    def __call__(self, x, h_prev, c_prev):
        x, h_prev, c_prev = ad.as_tensor(x), ad.as_tensor(h_prev), ad.as_tensor(c_prev)
        H = self.hidden
        if h_prev.shape[-1] != H or c_prev.shape[-1] != H:
            raise ShapeError("lstm", f"state width must be {H}")
        if x.shape[-1] + H != self.weight.shape[0]:
            raise ShapeError("lstm", f"input width {x.shape[-1]} != {self.weight.shape[0] - H}")
        gates = ad.matmul(ad.concatenate([x, h_prev], axis=-1), self.weight) + self.bias
        ifo = ad.sigmoid(gates[:, :3 * H])
        g = ad.tanh(gates[:, 3 * H:])
        c = ifo[:, H:2 * H] * c_prev + ifo[:, :H] * g
        h = ifo[:, 2 * H:] * ad.tanh(c)
        return h, c


def reverse_valid(x: Tensor, lengths) -> Tensor:
    """Reverse each sequence of (B, T, D) within its valid length; padding stays put."""
    B, T = x.shape[:2]
    lengths = np.asarray(lengths)
    t = np.arange(T)[None, :]
    idx = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    return x[np.arange(B)[:, None], idx]


def run_lstm(cell: LSTMCell, x: Tensor):
    B, T = x.shape[:2]
    h, c = cell.initial_state(B)
    outs = []
    for t in range(T):
        h, c = cell(x[:, t, :], h, c)
        outs.append(h)
    return ad.stack(outs, axis=1)


def bidirectional_apply(fwd: LSTMCell, bwd: LSTMCell, x, lengths=None) -> Tensor:
    """Concatenate forward and backward LSTM passes per step: (B, T, 2H)."""
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[1] == 0:
        raise ContractError("bidirectional: empty sequence")
    B, T = x.shape[:2]
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    forward = run_lstm(fwd, x)
    backward = reverse_valid(run_lstm(bwd, reverse_valid(x, lengths)), lengths)
    return ad.concatenate([forward, backward], axis=-1)


class BiLSTM(Module):
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.fwd = LSTMCell(n_in, hidden, rng)
        self.bwd = LSTMCell(n_in, hidden, rng)

    def __call__(self, x, lengths=None):
        return bidirectional_apply(self.fwd, self.bwd, x, lengths)


class LocationAttention(Module):
    """Location-aware content attention.

    score[t] = v . tanh(W_q q + W_h H[t] + W_f f[t]) where f is a
    same-length convolution of the previous alignment.
    """

    def __init__(self, enc_dim: int, query_dim: int, att_dim: int, rng: np.random.Generator,
                 filters: int = 8, width: int = 5):
        if width % 2 != 1:
            raise ContractError("attention: location filter width must be odd")
        self.query = Linear(query_dim, att_dim, rng, bias=False)
        self.key = Linear(enc_dim, att_dim, rng)
        self.loc_kernel = param(rng, (filters, 1, width), 1.0 / np.sqrt(width))
        self.loc_proj = Linear(filters, att_dim, rng, bias=False)
        self.score = param(rng, (att_dim, 1), 1.0 / np.sqrt(att_dim))

    def precompute(self, H) -> Tensor:
        return self.key(H)

    def __call__(self, H, q_prev, a_prev, mask=None, keys=None):
        H, a_prev = ad.as_tensor(H), ad.as_tensor(a_prev)
        B, T, _ = H.shape
        if a_prev.shape != (B, T):
            raise ShapeError("attention", f"alignment {a_prev.shape} vs encoder {(B, T)}")
        keys = self.precompute(H) if keys is None else keys
        half = self.loc_kernel.shape[2] // 2
        padded = ad.pad_time(ad.reshape(a_prev, (B, T, 1)), half, half, axis=1)
        loc = self.loc_proj(ad.conv1d(padded, self.loc_kernel))
        q = ad.reshape(self.query(q_prev), (B, 1, -1))
        energy = ad.matmul(ad.tanh(keys + q + loc), self.score)
        scores = ad.reshape(energy, (B, T))
        if mask is not None:
            scores = scores + (1.0 - np.asarray(mask, dtype=np.float64)) * MASK_NEG
        align = ad.softmax(scores, axis=-1)
        context = ad.reshape(ad.matmul(ad.reshape(align, (B, 1, T)), H), (B, -1))
        return context, align


def location_attention(att: LocationAttention, H, q_prev, a_prev, mask=None):
    return att(H, q_prev, a_prev, mask)
