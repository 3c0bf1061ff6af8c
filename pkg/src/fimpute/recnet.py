"""Differentiable network primitives and parameter persistence.

The building blocks are small ``torch.nn.Module`` subclasses; reverse-mode
gradients come from ``torch.autograd``. Everything here is dtype-agnostic so the
finite-difference checks can run in float64 while training runs in float32.
"""
from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

FIMW_MAGIC = b"FIMW"
FIMW_VERSION = 1


@dataclass
class NetConfig:
    embed_dim: int = 32
    ffn_layers: int = 2
    ffn_width: int = 64
    seq_hidden: int = 32
    attn_layers: int = 2
    attn_heads: int = 2
    attn_dim: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("embed_dim", "ffn_layers", "ffn_width", "seq_hidden",
                     "attn_layers", "attn_heads", "attn_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.attn_dim % self.attn_heads:
            raise ValueError("attn_dim must be divisible by attn_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def full_scale(cls) -> "NetConfig":
        return cls(embed_dim=512, ffn_layers=4, ffn_width=1024, seq_hidden=512,
                   attn_layers=4, attn_heads=8, attn_dim=512)


class TimeEmbedding(nn.Module):
    """Learnable embedding: dimension 0 is ``w0 t + b0``, the rest ``sin(w_i t + b_i)``."""

    def __init__(self, dim: int):
        super().__init__()
        self.w = nn.Parameter(torch.empty(dim))
        self.b = nn.Parameter(torch.empty(dim))
        nn.init.normal_(self.w, 0.0, 5.0)
        nn.init.uniform_(self.b, 0.0, 2 * math.pi)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        z = t.unsqueeze(-1) * self.w + self.b
        return torch.cat([z[..., :1], torch.sin(z[..., 1:])], dim=-1)


class FFN(nn.Module):
    """``layers`` hidden affine+SeLU+dropout blocks followed by an affine output."""

    def __init__(self, d_in: int, d_out: int, layers: int, width: int, dropout: float = 0.0):
        super().__init__()
        dims = [d_in] + [width] * layers
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(dims[-1], d_out)
        self.dropout = dropout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for lin in self.hidden:
            x = nn.functional.selu(lin(x))
            if self.dropout > 0:
                x = nn.functional.dropout(x, self.dropout, self.training)
        return self.out(x)


class SeqEncoder(nn.Module):
    """Bidirectional LSTM summarised by concatenating both final hidden states."""

    def __init__(self, d_in: int, hidden: int):
        super().__init__()
        self.lstm = nn.LSTM(d_in, hidden, batch_first=True, bidirectional=True)
        self.out_dim = 2 * hidden

    def forward(self, seq: torch.Tensor, lengths=None) -> torch.Tensor:
        """``seq`` is ``(B, T, d_in)``; ``lengths`` gives valid prefix lengths."""
        if seq.shape[1] == 0:
            raise ValueError("empty sequence")
        if lengths is None:
            _, (h, _) = self.lstm(seq)
        else:
            lengths = torch.as_tensor(lengths, dtype=torch.int64).cpu()
            if int(lengths.min()) < 1:
                raise ValueError("empty sequence")
            packed = pack_padded_sequence(seq, lengths, batch_first=True, enforce_sorted=False)
            _, (h, _) = self.lstm(packed)
        return torch.cat([h[0], h[1]], dim=-1)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_weights = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        hd = D // self.heads
        q, k, v = self.qkv(x).view(B, T, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        self.last_weights = att.detach()
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(y)


class AttnBlock(nn.Module):
    def __init__(self, dim: int, heads: int, width: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FFN(dim, dim, 1, width, dropout)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class AttnEncoder(nn.Module):
    """Pre-norm self-attention stack with learned positional encodings over ``max_len`` slots."""

    def __init__(self, dim: int, heads: int, layers: int, width: int, max_len: int,
                 dropout: float = 0.0):
        super().__init__()
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.blocks = nn.ModuleList(AttnBlock(dim, heads, width, dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.pos[: x.shape[1]]
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def attention_weights(self) -> list:
        return [blk.attn.last_weights for blk in self.blocks]


# ---------------------------------------------------------------- parameters

class ParameterStore:
    """Ordered name -> tensor mapping with flatten/unflatten and FIMW persistence."""

    def __init__(self, entries=None, config: dict | None = None):
        self.entries: OrderedDict[str, torch.Tensor] = OrderedDict(entries or {})
        self.config = dict(config or {})

    @classmethod
    def from_module(cls, module: nn.Module, config: dict | None = None) -> "ParameterStore":
        return cls(((k, v) for k, v in module.state_dict().items()), config)

    def __getitem__(self, name):
        return self.entries[name]

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def items(self):
        return self.entries.items()

    @property
    def total_count(self) -> int:
        return sum(t.numel() for t in self.entries.values())

    def flatten(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(0)
        return np.concatenate([t.detach().cpu().reshape(-1).double().numpy()
                               for t in self.entries.values()])

    def unflatten(self, flat) -> "ParameterStore":
        flat = np.asarray(flat)
        if flat.shape != (self.total_count,):
            raise ValueError(f"expected {self.total_count} values, got {flat.shape}")
        out, pos = OrderedDict(), 0
        for name, t in self.entries.items():
            n = t.numel()
            out[name] = torch.as_tensor(flat[pos:pos + n], dtype=t.dtype).reshape(t.shape)
            pos += n
        return ParameterStore(out, self.config)

    def load_into(self, module: nn.Module) -> None:
        module.load_state_dict(self.entries)

    def equal(self, other: "ParameterStore") -> bool:
        if list(self.entries) != list(other.entries):
            return False
        return all(torch.equal(a, other.entries[k]) for k, a in self.entries.items())

    def save(self, path) -> None:
        from .datasets import atomic_path

        header = {
            "names": list(self.entries),
            "shapes": [list(t.shape) for t in self.entries.values()],
            "dtype": "float32",
            "config": self.config,
        }
        hb = json.dumps(header, sort_keys=True).encode()
        payload = b"".join(t.detach().cpu().to(torch.float32).contiguous().numpy()
                           .astype("<f4").tobytes() for t in self.entries.values())
        with atomic_path(path) as tmp:
            Path(tmp).write_bytes(FIMW_MAGIC + bytes([FIMW_VERSION])
                                  + struct.pack("<I", len(hb)) + hb + payload)

    @classmethod
    def load(cls, path) -> "ParameterStore":
        buf = Path(path).read_bytes()
        if buf[:4] != FIMW_MAGIC:
            raise ValueError(f"{path}: not a FIMW weight file")
        if buf[4] != FIMW_VERSION:
            raise ValueError(f"{path}: unsupported FIMW version {buf[4]}")
        (hlen,) = struct.unpack_from("<I", buf, 5)
        header = json.loads(buf[9:9 + hlen])
        data = np.frombuffer(buf[9 + hlen:], dtype="<f4")
        entries, pos = OrderedDict(), 0
        for name, shape in zip(header["names"], header["shapes"]):
            n = int(np.prod(shape)) if shape else 1
            entries[name] = torch.from_numpy(data[pos:pos + n].copy()).reshape(shape)
            pos += n
        if pos != data.shape[0]:
            raise ValueError(f"{path}: payload length does not match header")
        return cls(entries, header.get("config"))


def grad(loss_fn, params) -> ParameterStore:
    """Reverse-mode gradient of the scalar ``loss_fn()`` w.r.t. every parameter.

    ``params`` is an ``nn.Module`` or a mapping of leaf tensors with
    ``requires_grad``. Parameters that do not influence the loss get zeros.
    """
    if isinstance(params, nn.Module):
        named = list(params.named_parameters())
    else:
        named = list(params.items())
    loss = loss_fn()
    if not torch.is_tensor(loss) or loss.numel() != 1:
        raise ValueError("loss must be a scalar")
    tensors = [t for _, t in named]
    if loss.requires_grad:
        grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    else:
        grads = [None] * len(tensors)
    return ParameterStore((n, g if g is not None else torch.zeros_like(t))
                          for (n, t), g in zip(named, grads))


def config_dict(cfg: NetConfig) -> dict:
    return asdict(cfg)
