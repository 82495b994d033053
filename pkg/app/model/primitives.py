"""
网络基础模块: 卷积 / 线性 / 归一化 / GRU / RoPE 多头注意力。

梯度由 torch autograd 反向累积得到；参数初始化沿用 torch 默认的
U(-1/sqrt(fan_in), 1/sqrt(fan_in))，通过 seeded() 保证可复现。
"""

import math
from collections import OrderedDict
from contextlib import contextmanager

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from app.core.exceptions import ArgumentError, ConfigError, ShapeError


@contextmanager
def seeded(seed: int):
    """在隔离的 RNG 状态下执行 (不影响调用方的全局随机状态)。"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class ParameterStore:
    """模块可训练参数的有序视图 (name -> tensor) 以及优化器状态。"""

    def __init__(self, module: nn.Module):
        self.module = module
        self.optimizer_state: dict[str, Tensor] = OrderedDict()
        self.optimizer_step: int = 0

    @property
    def parameters(self) -> "OrderedDict[str, nn.Parameter]":
        return OrderedDict(
            (name, p) for name, p in self.module.named_parameters() if p.requires_grad
        )

    @property
    def total_count(self) -> int:
        return sum(p.numel() for p in self.parameters.values())

    def gradients(self) -> dict[str, Tensor | None]:
        return {name: p.grad for name, p in self.parameters.items()}

    def zero_grad(self) -> None:
        self.module.zero_grad(set_to_none=True)


def count_trainable(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


# ===================================================================
# 函数式算子
# ===================================================================


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
) -> Tensor:
    """互相关约定的 2-D 卷积，H' = (H + 2p_h - k_h) // s_h + 1。"""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {tuple(x.shape)} / {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    for extent, pad, k in zip(x.shape[2:], padding, weight.shape[2:]):
        if extent + 2 * pad < k:
            raise ShapeError(f"padded extent {extent + 2 * pad} is smaller than kernel {k}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects last dim {weight.shape[-1]}, got {x.shape[-1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {tuple(bias.shape)} does not match {weight.shape[0]} outputs")
    return F.linear(x, weight, bias)


def group_norm(
    x: Tensor,
    groups: int,
    weight: Tensor | None = None,
    bias: Tensor | None = None,
    eps: float = 1e-5,
) -> Tensor:
    if groups < 1 or x.shape[1] % groups:
        raise ConfigError(f"{x.shape[1]} channels are not divisible into {groups} groups")
    return F.group_norm(x, groups, weight, bias, eps)


def gelu(x: Tensor) -> Tensor:
    """gelu(x) = x·Φ(x) (erf 精确形式)。"""
    return F.gelu(x)


def dropout(x: Tensor, p: float, train_mode: bool) -> Tensor:
    return F.dropout(x, p=p, training=train_mode)


def rope_rotate(x: Tensor, base: float = 10000.0, positions: Tensor | None = None) -> Tensor:
    """
    旋转位置编码: 位置 m 上的特征对 (x_2i, x_2i+1) 旋转 m·θ_i，θ_i = base^(-2i/head_dim)。

    x 的形状为 (..., seq, head_dim)；positions 缺省为 0..seq-1。
    """
    head_dim = x.shape[-1]
    if head_dim % 2:
        raise ArgumentError(f"RoPE needs an even head_dim, got {head_dim}")
    if positions is None:
        positions = torch.arange(x.shape[-2], device=x.device)
    positions = positions.to(dtype=x.dtype, device=x.device)

    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=x.dtype, device=x.device) / head_dim)
    angles = positions[:, None] * inv_freq[None, :]
    cos, sin = angles.cos(), angles.sin()

    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack((x_even * cos - x_odd * sin, x_even * sin + x_odd * cos), dim=-1)
    return rotated.flatten(-2)


# ===================================================================
# 模块
# ===================================================================


class MultiHeadAttention(nn.Module):
    """softmax(QKᵀ/√d)V，Q/K 可选 RoPE；dropout 作用在注意力权重上。"""

    def __init__(
        self,
        dim: int,
        n_heads: int,
        use_rope: bool = True,
        dropout: float = 0.0,
        rope_base: float = 10000.0,
    ):
        super().__init__()
        if n_heads < 1 or dim % n_heads:
            raise ConfigError(f"dim {dim} is not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        if use_rope and self.head_dim % 2:
            raise ConfigError(f"RoPE needs an even head dim, got {self.head_dim}")
        self.use_rope = use_rope
        self.dropout = dropout
        self.rope_base = rope_base

        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: Tensor, return_weights: bool = False):
        b, n, d = x.shape
        if d != self.dim:
            raise ShapeError(f"attention expects dim {self.dim}, got {d}")
        q, k, v = self._heads(self.q_proj(x)), self._heads(self.k_proj(x)), self._heads(self.v_proj(x))
        if self.use_rope:
            q = rope_rotate(q, self.rope_base)
            k = rope_rotate(k, self.rope_base)

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = scores.softmax(dim=-1)
        attended = dropout(weights, self.dropout, self.training) @ v
        out = self.out_proj(attended.transpose(1, 2).reshape(b, n, d))
        return (out, weights) if return_weights else out


class BiRNN(nn.Module):
    """双向 GRU，前后向输出按时间步拼接 -> (B, seq, 2·hidden)，初始状态为零。"""

    def __init__(self, input_size: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.gru = nn.GRU(input_size, hidden, batch_first=True, bidirectional=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] < 1:
            raise ShapeError(f"BiRNN expects (batch, seq>=1, dim), got {tuple(x.shape)}")
        out, _ = self.gru(x)
        return out


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim * mult),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(dim * mult, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class TransformerLayer(nn.Module):
    """Pre-LN Transformer 层: x + Attn(LN(x))，再 x + FFN(LN(x))。"""

    def __init__(self, dim: int, n_heads: int, ff_mult: int = 4, dropout: float = 0.0, rope_base: float = 10000.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, use_rope=True, dropout=dropout, rope_base=rope_base)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult, dropout)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))
