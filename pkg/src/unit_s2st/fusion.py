"""Three strategies for merging content features with a speaker feature.

All strategies map (content [T, dim], speaker [dim]) -> [T, dim] and are
length-preserving. The speaker feature is the projected embedding; it is
constant over time within one utterance.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import InvalidConfigError, InvalidInputError
from .nnet import MultiHeadAttention

FUSION_KINDS = ("simple_ffn", "glu", "cross_attention")


def _check_shapes(content: torch.Tensor, speaker: torch.Tensor, dim: int):
    if content.dim() != 2 or content.shape[1] != dim:
        raise InvalidInputError(f"content must be [T, {dim}], got {tuple(content.shape)}")
    if content.shape[0] < 1:
        raise InvalidInputError("content must have at least one frame")
    if speaker.shape != (dim,):
        raise InvalidInputError(f"speaker must be [{dim}], got {tuple(speaker.shape)}")


class SimpleFFNFusion(nn.Module):
    """Add the speaker feature to every frame, then a two-layer feed-forward.

    Projects dim -> 2*dim with ReLU and back to dim. No residual path: with
    all-zero weights the output is exactly zero.
    """

    def __init__(self, dim: int = 512):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, 2 * dim)
        self.fc2 = nn.Linear(2 * dim, dim)

    def forward(self, content: torch.Tensor, speaker: torch.Tensor) -> torch.Tensor:
        _check_shapes(content, speaker, self.dim)
        h = content + speaker.unsqueeze(0)
        return self.fc2(torch.relu(self.fc1(h)))


class GLUFusion(nn.Module):
    """Speaker-gated content: (W_c content_t) * sigmoid(W_s speaker + b_s).

    The gate is computed solely from the speaker feature, so it is constant
    over time; the content path is a bias-free linear transform.
    """

    def __init__(self, dim: int = 512):
        super().__init__()
        self.dim = dim
        self.content_proj = nn.Linear(dim, dim, bias=False)
        self.gate_proj = nn.Linear(dim, dim)

    def forward(self, content: torch.Tensor, speaker: torch.Tensor) -> torch.Tensor:
        _check_shapes(content, speaker, self.dim)
        gate = torch.sigmoid(self.gate_proj(speaker))
        return self.content_proj(content) * gate.unsqueeze(0)


class CrossAttentionFusion(nn.Module):
    """content + MHA(query=content, key=value=speaker as a length-1 memory).

    With a single memory slot the attention weights are exactly 1, so the
    added vector is identical at every position; the residual keeps the
    content path intact. The output projection carries no bias so a zero
    value path leaves content untouched.
    """

    def __init__(self, dim: int = 512, heads: int = 8):
        super().__init__()
        self.dim = dim
        self.attn = MultiHeadAttention(dim, heads, out_bias=False)

    def forward(self, content: torch.Tensor, speaker: torch.Tensor) -> torch.Tensor:
        _check_shapes(content, speaker, self.dim)
        memory = speaker.unsqueeze(0)  # [1, dim]
        return content + self.attn(content, memory, memory)


def make_fusion(kind: str, dim: int = 512, heads: int = 8) -> nn.Module:
    if kind == "simple_ffn":
        return SimpleFFNFusion(dim)
    if kind == "glu":
        return GLUFusion(dim)
    if kind == "cross_attention":
        return CrossAttentionFusion(dim, heads)
    raise InvalidConfigError(f"fusion must be one of {FUSION_KINDS}, got {kind!r}")
