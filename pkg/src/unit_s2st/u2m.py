"""Unit-to-mel generation with speaker conditioning.

The model is non-autoregressive and strictly length-preserving: a sequence of
T discrete units always decodes to exactly T mel frames (no duration model,
no stop token). Speaker identity enters through a fused, projected embedding
computed by the speaker adapter from reference mel frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .audio import MelConfig, MelSpectrogram, Waveform, mel_spectrogram
from .errors import InvalidInputError
from .fusion import make_fusion
from .nnet import BlockConfig, ConformerBlock, TransformerEncoderBlock, sinusoidal_positions
from .quantizer import UnitSequence
from .speaker import AdapterConfig, EmbeddingProjector, SpeakerAdapter


@dataclass(frozen=True)
class U2mConfig:
    codebook_size: int = 100
    encoder_blocks: int = 6
    decoder_blocks: int = 6
    hidden: int = 512
    heads: int = 8
    encoder_kernel: int = 31
    dropout: float = 0.1
    ffn_mult: int = 4
    n_mels: int = 80
    fusion: str = "cross_attention"
    adapter: AdapterConfig = field(default_factory=AdapterConfig)

    def encoder_block_config(self) -> BlockConfig:
        return BlockConfig(hidden=self.hidden, heads=self.heads, dropout=self.dropout,
                           conv_kernel=self.encoder_kernel, ffn_mult=self.ffn_mult)

    def decoder_block_config(self) -> BlockConfig:
        return BlockConfig(hidden=self.hidden, heads=self.heads, dropout=self.dropout,
                           ffn_mult=self.ffn_mult)


class UnitEncoder(nn.Module):
    """Unit embeddings + sinusoidal positions -> conformer stack."""

    def __init__(self, cfg: U2mConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.codebook_size, cfg.hidden)
        self.blocks = nn.ModuleList(
            ConformerBlock(cfg.encoder_block_config()) for _ in range(cfg.encoder_blocks)
        )

    def forward(self, units: torch.Tensor) -> torch.Tensor:
        if units.dim() != 1:
            raise InvalidInputError(f"units must be 1-D, got shape {tuple(units.shape)}")
        if len(units) == 0:
            raise InvalidInputError("cannot encode an empty unit sequence")
        if units.min() < 0 or units.max() >= self.cfg.codebook_size:
            raise InvalidInputError(
                f"units must lie in [0, {self.cfg.codebook_size}), got "
                f"[{int(units.min())}, {int(units.max())}]"
            )
        dtype = self.embedding.weight.dtype
        x = self.embedding(units) + sinusoidal_positions(len(units), self.cfg.hidden, dtype)
        for block in self.blocks:
            x = block(x)
        return x


class MelDecoder(nn.Module):
    """Self-attention stack + linear head; T inputs give exactly T mel frames."""

    def __init__(self, cfg: U2mConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(
            TransformerEncoderBlock(cfg.decoder_block_config()) for _ in range(cfg.decoder_blocks)
        )
        self.norm = nn.LayerNorm(cfg.hidden)
        self.head = nn.Linear(cfg.hidden, cfg.n_mels)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        if fused.dim() != 2 or fused.shape[1] != self.cfg.hidden:
            raise InvalidInputError(
                f"fused features must be [T, {self.cfg.hidden}], got {tuple(fused.shape)}"
            )
        x = fused
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x))


class SRU2M(nn.Module):
    """Speaker-conditioned unit-to-mel model with named parameter groups."""

    def __init__(self, cfg: U2mConfig | None = None):
        super().__init__()
        self.cfg = cfg or U2mConfig()
        self.unit_encoder = UnitEncoder(self.cfg)
        self.fusion = make_fusion(self.cfg.fusion, dim=self.cfg.hidden, heads=self.cfg.heads)
        self.mel_decoder = MelDecoder(self.cfg)
        self.speaker_adapter = SpeakerAdapter(self.cfg.adapter, n_mels=self.cfg.n_mels)
        self.speaker_projector = EmbeddingProjector(self.cfg.adapter.embed_dim, self.cfg.hidden)

    def parameter_groups(self) -> dict[str, nn.Module]:
        """Checkpoint groups; the projector travels with the adapter."""
        return {
            "unit_encoder": self.unit_encoder,
            "mel_decoder": self.mel_decoder,
            "fusion": self.fusion,
            "speaker_adapter": nn.ModuleDict(
                {"adapter": self.speaker_adapter, "projector": self.speaker_projector}
            ),
        }

    def speaker_feature(self, speaker_mel: torch.Tensor) -> torch.Tensor:
        return self.speaker_projector(self.speaker_adapter(speaker_mel))

    def forward(self, units: torch.Tensor, speaker_mel: torch.Tensor | None = None,
                speaker_embedding: torch.Tensor | None = None) -> torch.Tensor:
        """(units [T], conditioning) -> predicted mel [T, n_mels].

        Conditioning is either reference mel frames for the internal adapter
        or a precomputed embedding (e.g. from an external verification
        encoder), which is projected by the same linear map.
        """
        if (speaker_mel is None) == (speaker_embedding is None):
            raise InvalidInputError("provide exactly one of speaker_mel / speaker_embedding")
        content = self.unit_encoder(units)
        if speaker_mel is not None:
            speaker = self.speaker_feature(speaker_mel)
        else:
            speaker = self.speaker_projector(speaker_embedding)
        fused = self.fusion(content, speaker)
        return self.mel_decoder(fused)


def units_to_tensor(units: UnitSequence | torch.Tensor | np.ndarray) -> torch.Tensor:
    if isinstance(units, UnitSequence):
        return torch.as_tensor(units.units, dtype=torch.long)
    return torch.as_tensor(units, dtype=torch.long)


def sr_u2m_forward(units: UnitSequence, speaker_src: Waveform, model: SRU2M,
                   mel_cfg: MelConfig | None = None) -> MelSpectrogram:
    """Full conditioned generation: units + source-speaker audio -> mel frames."""
    mel_cfg = mel_cfg or MelConfig(n_mels=model.cfg.n_mels)
    speaker_mel = mel_spectrogram(speaker_src, mel_cfg)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        pred = model(
            units_to_tensor(units),
            torch.as_tensor(speaker_mel.frames, dtype=dtype),
        )
    return MelSpectrogram(frames=pred.double().numpy(), hop_seconds=mel_cfg.hop / speaker_src.rate)


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all entries; shapes must match exactly."""
    if pred.shape != target.shape:
        raise InvalidInputError(
            f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}"
        )
    return (pred - target).abs().mean()


def reconstruction_loss_mel(pred: MelSpectrogram, target: MelSpectrogram) -> float:
    return float(
        reconstruction_loss(torch.as_tensor(pred.frames), torch.as_tensor(target.frames))
    )
