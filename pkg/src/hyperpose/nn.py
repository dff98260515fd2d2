"""Layers and the Transformer-Encoder shared by the main network and the hypernetwork."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within two standard deviations.

    Drawn directly in the default dtype so very wide generator layers do not
    need a 64-bit temporary.
    """
    dtype = T.get_default_dtype()
    out = rng.standard_normal(size=shape, dtype=dtype)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()), dtype=dtype)
        bad = np.abs(out) > 2.0
    out *= dtype.type(std)
    return out


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=T.get_default_dtype()), requires_grad=True, name=name)


class Module:
    """Parameter container.  Children are discovered from instance attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used to run gradient checks at 64-bit)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        for val in vars(self).values():
            if isinstance(val, Tensor) and not val.requires_grad:
                val.data = val.data.astype(dtype)
        for child in self._children():
            child._cast_buffers(dtype)

    def _children(self) -> Iterator["Module"]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield val
            elif isinstance(val, (list, tuple)):
                yield from (v for v in val if isinstance(v, Module))
            elif isinstance(val, dict):
                yield from (v for v in val.values() if isinstance(v, Module))

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` of shape [in, out]."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, std: float | None = 0.02, bias: bool = True):
        std = std if std is not None else 1.0 / np.sqrt(c_in)
        self.weight = param(trunc_normal(rng, (c_in, c_out), std))
        self.bias = param(np.zeros(c_out)) if bias else None

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError("linear", x.shape, self.weight.shape)
        y = T.matmul(x, self.weight) if x.ndim >= 2 else T.matmul(x.reshape(1, -1), self.weight).reshape(-1)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, std: float | None = None):
        # He-normal by default; backbone convs must keep signal alive from scratch.
        std = std if std is not None else np.sqrt(2.0 / (c_in * k * k))
        self.weight = param(trunc_normal(rng, (c_out, c_in, k, k), std))
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.stride, self.padding)
        b = self.bias.reshape(-1, 1, 1)
        return y + b

    def out_extent(self, size: int) -> int:
        return T.conv_out_extent(size, self.weight.shape[2], self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        self.gain = param(np.ones(c))
        self.bias = param(np.zeros(c))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"head count {heads} must divide model dim {dim}")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        n, s, c = x.shape
        return T.transpose(x.reshape(n, s, self.heads, c // self.heads), (0, 2, 1, 3))

    def weights(self, q_in: Tensor, k_in: Tensor) -> Tensor:
        """Attention weights [N, heads, S_q, S_k]; every row sums to one."""
        q, k = self._split(self.q(q_in)), self._split(self.k(k_in))
        d = q.shape[-1]
        scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / np.sqrt(d))
        return T.softmax(scores, axis=-1)

    def __call__(self, q_in: Tensor, k_in: Tensor | None = None, v_in: Tensor | None = None) -> Tensor:
        k_in = q_in if k_in is None else k_in
        v_in = q_in if v_in is None else v_in
        squeeze = q_in.ndim == 2
        if squeeze:
            q_in, k_in, v_in = (t.reshape(1, *t.shape) for t in (q_in, k_in, v_in))
        attn = self.weights(q_in, k_in)
        v = self._split(self.v(v_in))
        ctx = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
        n, s = ctx.shape[:2]
        out = self.o(ctx.reshape(n, s, -1))
        return out.reshape(s, -1) if squeeze else out


class EncoderBlock(Module):
    """Pre-LN block: x + drop(MHA(LN(x))), then x + drop(MLP(LN(x))) with a Swish MLP."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.1,
                 pe_mode: str = "input", eps: float = 1e-5):
        self.ln1 = LayerNorm(dim, eps)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim, eps)
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)
        self.p = dropout
        self.pe_mode = pe_mode

    def __call__(self, x: Tensor, pe: Tensor | None, training: bool) -> Tensor:
        if pe is not None and self.pe_mode == "input":
            x = x + pe
        h = self.ln1(x)
        if pe is not None and self.pe_mode == "qk":
            qk = h + pe
            a = self.attn(qk, qk, h)
        else:
            a = self.attn(h)
        x = x + T.dropout(a, self.p, training)
        h = T.dropout(T.swish(self.fc1(self.ln2(x))), self.p, training)
        return x + T.dropout(self.fc2(h), self.p, training)


@dataclass
class ActivationSeq:
    tokens: Tensor  # [N, H*W+1, C]
    tap: str = ""

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]


class TransformerEncoder(Module):
    """N encoder blocks, a learned per-slot positional table and a learned task token."""

    def __init__(self, dim: int, seq_len: int, rng: np.random.Generator, layers: int = 6, heads: int = 4,
                 dropout: float = 0.1, pe_mode: str = "input", eps: float = 1e-5):
        if pe_mode not in ("input", "qk"):
            raise ValueError(f"pe_mode must be 'input' or 'qk', got {pe_mode!r}")
        self.dim = dim
        self.seq_len = seq_len
        self.token = param(np.zeros(dim))
        self.pos = param(trunc_normal(rng, (seq_len, dim)))
        self.pos.data[0] = 0.0
        mask = np.ones((seq_len, 1))
        mask[0] = 0.0
        self._pe_mask = Tensor(mask)
        self.blocks = [EncoderBlock(dim, heads, rng, dropout, pe_mode, eps) for _ in range(layers)]
        self.norm = LayerNorm(dim, eps)

    def positional(self) -> Tensor:
        # Masking keeps the token slot at zero and its gradient at zero.
        mask = self._pe_mask
        if mask.dtype != self.pos.dtype:
            mask = Tensor(mask.data.astype(self.pos.dtype))
        return self.pos * mask

    def __call__(self, seq: ActivationSeq | Tensor, training: bool = False) -> Tensor:
        return encode(seq, self, training)


def build_sequence(fmap: Tensor, proj: Conv2d, token: Tensor, tap: str = "") -> ActivationSeq:
    """Project an activation map [N, C_in, H, W] with a 1x1 conv and prepend the task token.

    Rows 1..H*W follow row-major (H then W) order of the map.
    """
    squeeze = fmap.ndim == 3
    if squeeze:
        fmap = fmap.reshape(1, *fmap.shape)
    if proj.weight.shape[1] != fmap.shape[1]:
        raise ShapeError("build_sequence", fmap.shape, proj.weight.shape)
    m = proj(fmap)
    n, c, h, w = m.shape
    if token.shape != (c,):
        raise ShapeError("build_sequence", token.shape, (c,), detail="token width must match projection")
    rows = T.transpose(m.reshape(n, c, h * w), (0, 2, 1))
    tok = T.broadcast_to(token.reshape(1, 1, c), (n, 1, c))
    seq = T.concat([tok, rows], axis=1)
    return ActivationSeq(seq[0] if squeeze else seq, tap)


def encode(seq: ActivationSeq | Tensor, enc: TransformerEncoder, training: bool = False) -> Tensor:
    """Run the encoder and return the final-LN output at the token slot ([N, C] or [C])."""
    x = seq.tokens if isinstance(seq, ActivationSeq) else seq
    if x.shape[-2] != enc.seq_len or x.shape[-1] != enc.dim:
        raise ShapeError("encode", x.shape, (enc.seq_len, enc.dim), detail="sequence length/width vs positional table")
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    pe = enc.positional()
    for block in enc.blocks:
        x = block(x, pe, training)
    out = enc.norm(x[:, 0, :])
    return out[0] if squeeze else out
