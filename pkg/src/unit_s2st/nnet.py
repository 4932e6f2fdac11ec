"""Shared differentiable building blocks.

Everything accepts either [T, dim] or [B, T, dim] inputs and is
length-preserving. Blocks use pre-norm residuals. Attention masks are boolean
with True meaning "may attend".
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfigError, InvalidInputError


@dataclass(frozen=True)
class BlockConfig:
    hidden: int = 512
    heads: int = 8
    dropout: float = 0.1
    conv_kernel: int = 31
    ffn_mult: int = 4

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise InvalidConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.conv_kernel % 2 != 1:
            raise InvalidConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if not (0.0 <= self.dropout < 1.0):
            raise InvalidConfigError(f"dropout must be in [0, 1), got {self.dropout}")


def sinusoidal_positions(n: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Parameter-free positional table [n, dim]."""
    position = torch.arange(n, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: dim // 2])
    return pe.to(dtype)


def causal_mask(n: int) -> torch.Tensor:
    """[n, n] boolean mask allowing attention to self and the past."""
    return torch.tril(torch.ones(n, n, dtype=torch.bool))


def _promote(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 2:
        return x.unsqueeze(0), True
    if x.dim() == 3:
        return x, False
    raise InvalidInputError(f"expected rank 2 or 3 tensor, got shape {tuple(x.shape)}")


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over `heads` heads with output projection."""

    def __init__(self, dim: int, heads: int, out_bias: bool = True):
        super().__init__()
        if dim % heads != 0:
            raise InvalidConfigError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim, bias=out_bias)

    def forward(self, q, k, v, mask: torch.Tensor | None = None, return_weights: bool = False):
        q, squeeze = _promote(q)
        k, _ = _promote(k)
        v, _ = _promote(v)
        if q.shape[-1] != self.dim or k.shape[-1] != self.dim or v.shape[-1] != self.dim:
            raise InvalidInputError(
                f"feature dim must be {self.dim}, got q={q.shape[-1]} k={k.shape[-1]} v={v.shape[-1]}"
            )
        if k.shape[1] != v.shape[1]:
            raise InvalidInputError(f"key length {k.shape[1]} != value length {v.shape[1]}")
        b, tq, _ = q.shape
        tk = k.shape[1]

        def split(x):
            return x.view(b, -1, self.heads, self.head_dim).transpose(1, 2)

        qh, kh, vh = split(self.q_proj(q)), split(self.k_proj(k)), split(self.v_proj(v))
        scores = qh @ kh.transpose(-2, -1) / math.sqrt(self.head_dim)
        if mask is not None:
            if mask.shape != (tq, tk):
                raise InvalidInputError(f"mask shape {tuple(mask.shape)} != ({tq}, {tk})")
            scores = scores.masked_fill(~mask.to(scores.device), float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ vh).transpose(1, 2).reshape(b, tq, self.dim)
        out = self.out_proj(out)
        if squeeze:
            out = out.squeeze(0)
            weights = weights.squeeze(0)
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4, dropout: float = 0.0, activation: str = "relu"):
        super().__init__()
        act = nn.ReLU() if activation == "relu" else nn.SiLU()
        self.net = nn.Sequential(
            nn.Linear(dim, mult * dim), act, nn.Dropout(dropout), nn.Linear(mult * dim, dim)
        )

    def forward(self, x):
        return self.net(x)


class TransformerEncoderBlock(nn.Module):
    """Pre-norm self-attention + feed-forward; output shape equals input shape."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        self.norm_attn = nn.LayerNorm(cfg.hidden)
        self.attn = MultiHeadAttention(cfg.hidden, cfg.heads)
        self.norm_ffn = nn.LayerNorm(cfg.hidden)
        self.ffn = FeedForward(cfg.hidden, cfg.ffn_mult, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask: torch.Tensor | None = None):
        if x.shape[-1] != self.cfg.hidden:
            raise InvalidInputError(f"feature dim {x.shape[-1]} != hidden {self.cfg.hidden}")
        h = self.norm_attn(x)
        x = x + self.drop(self.attn(h, h, h, mask=mask))
        x = x + self.drop(self.ffn(self.norm_ffn(x)))
        return x


class TransformerDecoderBlock(nn.Module):
    """Pre-norm causal self-attention, cross-attention over memory, feed-forward."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        self.norm_self = nn.LayerNorm(cfg.hidden)
        self.self_attn = MultiHeadAttention(cfg.hidden, cfg.heads)
        self.norm_cross = nn.LayerNorm(cfg.hidden)
        self.cross_attn = MultiHeadAttention(cfg.hidden, cfg.heads)
        self.norm_ffn = nn.LayerNorm(cfg.hidden)
        self.ffn = FeedForward(cfg.hidden, cfg.ffn_mult, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, self_mask: torch.Tensor | None = None):
        if x.shape[-1] != self.cfg.hidden or memory.shape[-1] != self.cfg.hidden:
            raise InvalidInputError("decoder block: feature dims must equal cfg.hidden")
        t = x.shape[-2]
        if self_mask is None:
            self_mask = causal_mask(t)
        h = self.norm_self(x)
        x = x + self.drop(self.self_attn(h, h, h, mask=self_mask))
        h = self.norm_cross(x)
        x = x + self.drop(self.cross_attn(h, memory, memory))
        x = x + self.drop(self.ffn(self.norm_ffn(x)))
        return x


class ConformerConvModule(nn.Module):
    def __init__(self, dim: int, kernel: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Conv1d(dim, 2 * dim, kernel_size=1)
        self.depthwise = nn.Conv1d(dim, dim, kernel_size=kernel, padding=kernel // 2, groups=dim)
        self.norm_mid = nn.LayerNorm(dim)
        self.pointwise_out = nn.Conv1d(dim, dim, kernel_size=1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        h = self.norm(x).transpose(1, 2)
        h = F.glu(self.pointwise_in(h), dim=1)
        h = self.depthwise(h).transpose(1, 2)
        h = F.silu(self.norm_mid(h)).transpose(1, 2)
        h = self.pointwise_out(h).transpose(1, 2)
        return self.drop(h)


class ConformerBlock(nn.Module):
    """Macaron block: half-FFN, self-attention, depthwise conv, half-FFN, final norm."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        self.norm_ffn1 = nn.LayerNorm(cfg.hidden)
        self.ffn1 = FeedForward(cfg.hidden, cfg.ffn_mult, cfg.dropout, activation="silu")
        self.norm_attn = nn.LayerNorm(cfg.hidden)
        self.attn = MultiHeadAttention(cfg.hidden, cfg.heads)
        self.conv = ConformerConvModule(cfg.hidden, cfg.conv_kernel, cfg.dropout)
        self.norm_ffn2 = nn.LayerNorm(cfg.hidden)
        self.ffn2 = FeedForward(cfg.hidden, cfg.ffn_mult, cfg.dropout, activation="silu")
        self.norm_out = nn.LayerNorm(cfg.hidden)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask: torch.Tensor | None = None):
        if x.shape[-1] != self.cfg.hidden:
            raise InvalidInputError(f"feature dim {x.shape[-1]} != hidden {self.cfg.hidden}")
        x3, squeeze = _promote(x)
        x3 = x3 + 0.5 * self.drop(self.ffn1(self.norm_ffn1(x3)))
        h = self.norm_attn(x3)
        x3 = x3 + self.drop(self.attn(h, h, h, mask=mask))
        x3 = x3 + self.conv(x3)
        x3 = x3 + 0.5 * self.drop(self.ffn2(self.norm_ffn2(x3)))
        x3 = self.norm_out(x3)
        return x3.squeeze(0) if squeeze else x3


def ctc_loss(log_probs: torch.Tensor, targets, blank: int = 0) -> torch.Tensor:
    """Negative log-probability of all alignments collapsing to `targets`.

    log_probs is [T, V] with log-distribution rows; targets are labels over
    V without the blank (index 0 by convention). Returns +inf when no valid
    alignment exists (targets longer than T allows), never raises for that.
    """
    if log_probs.dim() != 2:
        raise InvalidInputError(f"log_probs must be [T, V], got {tuple(log_probs.shape)}")
    t_len, vocab = log_probs.shape
    targets = [int(x) for x in targets]
    if any(x == blank or not (0 <= x < vocab) for x in targets):
        raise InvalidInputError(f"targets must lie in [0, {vocab}) and exclude blank {blank}")

    # no valid alignment exists when the labels (plus forced blanks between
    # adjacent repeats) cannot fit into T frames
    repeats = sum(1 for i in range(1, len(targets)) if targets[i] == targets[i - 1])
    if len(targets) + repeats > t_len:
        return torch.tensor(float("inf"), device=log_probs.device, dtype=log_probs.dtype)

    device, dtype = log_probs.device, log_probs.dtype
    ext = [blank]
    for label in targets:
        ext.extend([label, blank])
    s_len = len(ext)
    ext_t = torch.tensor(ext, device=device)
    # large finite sentinel: exact under logsumexp, but avoids the NaN
    # gradients that all-(-inf) reductions produce in backward
    neg = torch.tensor(-1e30, device=device, dtype=dtype)

    # position s may arrive from s-2 when its label is not blank and differs
    # from the label two slots back
    can_skip = torch.zeros(s_len, dtype=torch.bool, device=device)
    for s in range(2, s_len):
        can_skip[s] = ext[s] != blank and ext[s] != ext[s - 2]

    alpha = torch.full((s_len,), -1e30, device=device, dtype=dtype)
    alpha[0] = log_probs[0, ext[0]]
    if s_len > 1:
        alpha[1] = log_probs[0, ext[1]]
    for t in range(1, t_len):
        stay = alpha
        step = torch.cat([neg.view(1), alpha])[:s_len]
        skip = torch.cat([neg.view(1).expand(2), alpha])[:s_len]
        skip = torch.where(can_skip, skip, neg)
        alpha = log_probs[t, ext_t] + torch.logsumexp(torch.stack([stay, step, skip]), dim=0)
    terminal = alpha[-1:] if s_len == 1 else alpha[-2:]
    return -torch.logsumexp(terminal, dim=0)


def grad_check(fn, inputs, eps: float = 1e-5, params=()) -> float:
    """Worst relative error between autograd and central-difference gradients.

    `inputs` are passed to fn positionally; `params` are extra leaf tensors
    used inside fn (e.g. module weights). Relative error for one coordinate is
    |a - n| / max(1, |a|, |n|). Run in double precision.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    wrt = list(inputs) + list(params)
    out = fn(*inputs)
    if out.dim() != 0:
        raise InvalidInputError("grad_check requires a scalar-valued fn")
    analytic = torch.autograd.grad(out, wrt, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for tensor, grad in zip(wrt, analytic):
            grad = torch.zeros_like(tensor) if grad is None else grad
            flat = tensor.view(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(fn(*inputs))
                flat[i] = orig - eps
                lo = float(fn(*inputs))
                flat[i] = orig
                numeric = (hi - lo) / (2 * eps)
                a = float(gflat[i])
                rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, rel)
    return worst
