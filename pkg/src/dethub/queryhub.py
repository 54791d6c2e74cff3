"""Query adaptation on a dataset embedding and per-query dynamic convolution.

The shared learnable queries attend to a dataset's frozen prompt embedding
(cross-attention), interact with each other through multi-head
self-attention, and are turned into a pair of bottlenecked convolution
kernels per query by linear generators.

Tensors follow torch layout throughout: feature maps are ``[..., C, H, W]``
and a kernel is ``[C_out, C_in, k, k]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError


class MultiHeadAttention(nn.Module):
    """Plain scaled dot-product attention with separate q/k/v/out projections.

    Keys and values may come from a space of different width (``kdim``).
    """

    def __init__(self, d_model: int, heads: int = 8, kdim: int | None = None):
        super().__init__()
        if d_model % heads:
            raise ConfigError(f"d_model={d_model} not divisible by heads={heads}")
        kdim = kdim or d_model
        self.heads = heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(kdim, d_model)
        self.v_proj = nn.Linear(kdim, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, query, key, value, key_mask=None):
        # query [B, N, d]; key/value [B, T, kdim]; key_mask [B, T] True = attend
        b, n, d = query.shape
        t = key.shape[1]
        h, dh = self.heads, d // self.heads
        q = self.q_proj(query).view(b, n, h, dh).transpose(1, 2)
        k = self.k_proj(key).view(b, t, h, dh).transpose(1, 2)
        v = self.v_proj(value).view(b, t, h, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = logits.softmax(-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out_proj(out)


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    return (x, False) if x.dim() == 3 else (x.unsqueeze(0), True)


class DetectionHub(nn.Module):
    """Cross-attention of the queries onto a dataset embedding."""

    def __init__(self, d_q: int, embed_dim: int, heads: int = 8):
        super().__init__()
        self.embed_dim = embed_dim
        self.attn = MultiHeadAttention(d_q, heads, kdim=embed_dim)

    def forward(self, Q: torch.Tensor, E: torch.Tensor, valid_mask: torch.Tensor | None = None):
        return hub_adapt(Q, E, self, valid_mask)


def hub_adapt(Q: torch.Tensor, E: torch.Tensor, hub: DetectionHub,
              valid_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Adapted queries ``Q'``: queries from ``Q``, keys and values from ``E``.

    Accepts unbatched ``Q [N_q, d_q]`` / ``E [T, e]`` or batched inputs; a
    shared ``Q`` is broadcast over a batch of embeddings.
    """
    E, squeeze = _batched(E)
    if E.shape[1] == 0 or (valid_mask is not None and not bool(valid_mask.any())):
        raise DataError("empty dataset embedding")
    if E.shape[-1] != hub.embed_dim:
        raise ConfigError(f"embedding width {E.shape[-1]} != hub embed_dim {hub.embed_dim}")
    if Q.dim() == 2:
        Q = Q.unsqueeze(0).expand(E.shape[0], -1, -1)
    mask = None
    if valid_mask is not None:
        mask = valid_mask if valid_mask.dim() == 2 else valid_mask.unsqueeze(0)
        if not bool(mask.any(-1).all()):
            raise DataError("empty dataset embedding")
    out = hub.attn(Q, E, E, key_mask=mask)
    return out[0] if squeeze else out


class QueryInteraction(nn.Module):
    """Pre-norm multi-head self-attention block followed by a feed-forward block."""

    def __init__(self, d_q: int, heads: int = 8, ffn_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_q)
        self.attn = MultiHeadAttention(d_q, heads)
        self.norm2 = nn.LayerNorm(d_q)
        ffn_dim = ffn_dim or 4 * d_q
        self.ffn = nn.Sequential(nn.Linear(d_q, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, d_q))

    def forward(self, q_prime: torch.Tensor) -> torch.Tensor:
        x, squeeze = _batched(q_prime)
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        x = x + self.ffn(self.norm2(x))
        return x[0] if squeeze else x


def interact(q_prime: torch.Tensor, block: QueryInteraction) -> torch.Tensor:
    return block(q_prime)


@dataclass
class DynamicKernel:
    """Generated kernel pair for one query, torch layout.

    ``K1`` is ``[c_mid, c_in, k, k]`` and ``K2`` is ``[c_out, c_mid, k, k]``.
    """

    K1: torch.Tensor
    K2: torch.Tensor

    @property
    def k(self) -> int:
        return self.K1.shape[-1]

    @property
    def c_mid(self) -> int:
        return self.K1.shape[0]


def check_kernel_config(k: int, c_in: int, c_mid: int, c_out: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"kernel size must be odd and >= 1, got {k}")
    if not 0 < c_mid < min(c_in, c_out):
        raise ConfigError(f"bottleneck needs 0 < c_mid < min(c_in, c_out), got c_mid={c_mid}")


class KernelGenerator(nn.Module):
    """Two shared linear layers mapping each query row to its K1 and K2."""

    def __init__(self, d_q: int, c_in: int, c_mid: int, c_out: int, k: int = 3):
        super().__init__()
        check_kernel_config(k, c_in, c_mid, c_out)
        self.k, self.c_in, self.c_mid, self.c_out = k, c_in, c_mid, c_out
        self.to_k1 = nn.Linear(d_q, k * k * c_in * c_mid)
        self.to_k2 = nn.Linear(d_q, k * k * c_mid * c_out)

    @property
    def kernel_numel(self) -> int:
        return self.to_k1.out_features + self.to_k2.out_features

    def forward(self, q_star: torch.Tensor):
        """Return batched ``(K1, K2)`` with a leading ``[..., N_q]`` shape."""
        lead = q_star.shape[:-1]
        k1 = self.to_k1(q_star).view(*lead, self.c_mid, self.c_in, self.k, self.k)
        k2 = self.to_k2(q_star).view(*lead, self.c_out, self.c_mid, self.k, self.k)
        return k1, k2


def generate_kernels(q_star: torch.Tensor, generator: KernelGenerator) -> list[DynamicKernel]:
    k1, k2 = generator(q_star)
    return [DynamicKernel(a, b) for a, b in zip(k1, k2)]


def _grouped_conv(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    # x [G, c_in, H, W], w [G, c_out, c_in, k, k] -> [G, c_out, H, W]
    g, c_in, hgt, wid = x.shape
    c_out, k = w.shape[1], w.shape[-1]
    if w.shape[2] != c_in:
        raise ValueError(f"kernel expects {w.shape[2]} input channels, feature map has {c_in}")
    y = F.conv2d(x.reshape(1, g * c_in, hgt, wid), w.reshape(g * c_out, c_in, k, k),
                 padding=k // 2, groups=g)
    return y.view(g, c_out, hgt, wid)


class DyConv(nn.Module):
    """Applies per-query kernels as conv -> norm -> ReLU -> conv.

    With ``linear_test_mode`` the norm and activation are identities and the
    op is two stacked same-padding convolutions.
    """

    def __init__(self, c_mid: int, linear_test_mode: bool = False, groups: int | None = None):
        super().__init__()
        self.linear_test_mode = linear_test_mode
        groups = groups or math.gcd(c_mid, 8)
        self.norm = nn.GroupNorm(groups, c_mid)

    def forward(self, x: torch.Tensor, k1: torch.Tensor, k2: torch.Tensor) -> torch.Tensor:
        return dyconv(x, k1, k2, norm=None if self.linear_test_mode else self.norm)


def dyconv(x: torch.Tensor, k1: torch.Tensor, k2: torch.Tensor,
           norm: nn.Module | None = None) -> torch.Tensor:
    """Bottlenecked dynamic convolution for one or many queries.

    ``x`` is ``[..., c_in, H, W]`` with the same leading shape as the kernels
    ``k1 [..., c_mid, c_in, k, k]`` and ``k2 [..., c_out, c_mid, k, k]``.
    ``norm=None`` is linear test mode.
    """
    single = k1.dim() == 4
    if single:
        x, k1, k2 = x.unsqueeze(0), k1.unsqueeze(0), k2.unsqueeze(0)
    lead = k1.shape[:-4]
    if x.shape[:-3] != lead:
        raise ValueError(f"feature map batch {tuple(x.shape[:-3])} != kernel batch {tuple(lead)}")
    if x.shape[-3] != k1.shape[-3]:
        raise ValueError(f"stage K1: kernel expects {k1.shape[-3]} channels, input has {x.shape[-3]}")
    if k2.shape[-3] != k1.shape[-4]:
        raise ValueError(f"stage K2: kernel expects {k2.shape[-3]} channels, K1 emits {k1.shape[-4]}")
    hw = x.shape[-2:]
    g = math.prod(lead)
    h = _grouped_conv(x.reshape(g, -1, *hw), k1.reshape(g, *k1.shape[-4:]))
    if norm is not None:
        h = F.relu(norm(h))
    y = _grouped_conv(h, k2.reshape(g, *k2.shape[-4:]))
    y = y.view(*lead, *y.shape[1:])
    return y[0] if single else y
