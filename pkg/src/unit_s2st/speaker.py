"""Speaker identity encoders and scoring.

Two encoders produce fixed-length voice embeddings from mel frames: a
trainable dilated-conv adapter with attentive statistics pooling (trained
inside the pipeline), and a compact recurrent encoder trained with the
generalized end-to-end loss (the reproducible stand-in for an external
pre-trained verifier; precomputed embedding files are also accepted).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .audio import MelSpectrogram
from .errors import InvalidConfigError, InvalidInputError, MissingFileError


@dataclass(frozen=True)
class AdapterConfig:
    channels: tuple[int, ...] = (1024, 1024, 1024, 1024, 3072)
    kernels: tuple[int, ...] = (5, 3, 3, 3, 1)
    dilations: tuple[int, ...] = (1, 2, 3, 4, 1)
    groups: tuple[int, ...] = (1, 1, 1, 1, 1)
    attention_channels: int = 128
    embed_dim: int = 192

    def __post_init__(self):
        lengths = {len(self.channels), len(self.kernels), len(self.dilations), len(self.groups)}
        if len(lengths) != 1:
            raise InvalidConfigError("channels/kernels/dilations/groups must have equal length")
        if any(k % 2 == 0 for k in self.kernels):
            raise InvalidConfigError(f"kernels must be odd, got {self.kernels}")

    @property
    def min_frames(self) -> int:
        """Receptive field of the conv stack; shorter inputs are rejected."""
        return 1 + sum((k - 1) * d for k, d in zip(self.kernels, self.dilations))


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray
    source_tag: str = "adapter"

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.vector)):
            raise InvalidInputError("embedding contains non-finite values")
        if float(np.linalg.norm(self.vector)) == 0.0:
            raise InvalidInputError("embedding must have nonzero norm")


@dataclass(frozen=True)
class Ge2eConfig:
    hidden: int = 256
    embed: int = 256
    layers: int = 3

    def __post_init__(self):
        if min(self.hidden, self.embed, self.layers) <= 0:
            raise InvalidConfigError("ge2e config values must be positive")


class SpeakerAdapter(nn.Module):
    """Dilated conv stack + attentive statistics pooling -> fixed embedding."""

    def __init__(self, cfg: AdapterConfig | None = None, n_mels: int = 80):
        super().__init__()
        self.cfg = cfg or AdapterConfig()
        self.n_mels = n_mels
        convs = []
        in_ch = n_mels
        for ch, k, d, g in zip(self.cfg.channels, self.cfg.kernels, self.cfg.dilations,
                               self.cfg.groups):
            convs.append(nn.Conv1d(in_ch, ch, kernel_size=k, dilation=d, groups=g,
                                   padding=(k - 1) * d // 2))
            in_ch = ch
        self.convs = nn.ModuleList(convs)
        self.attention = nn.Sequential(
            nn.Conv1d(in_ch, self.cfg.attention_channels, kernel_size=1),
            nn.Tanh(),
            nn.Conv1d(self.cfg.attention_channels, in_ch, kernel_size=1),
        )
        self.out = nn.Linear(2 * in_ch, self.cfg.embed_dim)

    def forward(self, mel_frames: torch.Tensor) -> torch.Tensor:
        """[T, n_mels] -> [embed_dim]; T must reach the conv receptive field."""
        if mel_frames.dim() != 2 or mel_frames.shape[1] != self.n_mels:
            raise InvalidInputError(
                f"expected [T, {self.n_mels}] mel frames, got {tuple(mel_frames.shape)}"
            )
        if mel_frames.shape[0] < self.cfg.min_frames:
            raise InvalidInputError(
                f"adapter needs at least {self.cfg.min_frames} frames, got {mel_frames.shape[0]}"
            )
        h = mel_frames.t().unsqueeze(0)  # [1, n_mels, T]
        for conv in self.convs:
            h = torch.relu(conv(h))
        weights = torch.softmax(self.attention(h), dim=-1)
        mean = (h * weights).sum(dim=-1)
        var = (h.pow(2) * weights).sum(dim=-1) - mean.pow(2)
        std = torch.sqrt(torch.clamp(var, min=1e-9))
        return self.out(torch.cat([mean, std], dim=-1)).squeeze(0)


class Ge2eEncoder(nn.Module):
    """Recurrent utterance encoder with L2-normalized output."""

    def __init__(self, cfg: Ge2eConfig | None = None, n_mels: int = 80):
        super().__init__()
        self.cfg = cfg or Ge2eConfig()
        self.n_mels = n_mels
        self.rnn = nn.LSTM(n_mels, self.cfg.hidden, num_layers=self.cfg.layers, batch_first=True)
        self.out = nn.Linear(self.cfg.hidden, self.cfg.embed)

    def forward(self, mel_frames: torch.Tensor) -> torch.Tensor:
        """[T, n_mels] or [B, T, n_mels] -> L2-normalized [embed] or [B, embed]."""
        squeeze = mel_frames.dim() == 2
        if squeeze:
            mel_frames = mel_frames.unsqueeze(0)
        if mel_frames.shape[-1] != self.n_mels:
            raise InvalidInputError(
                f"expected {self.n_mels} mel bands, got {mel_frames.shape[-1]}"
            )
        if mel_frames.shape[1] < 1:
            raise InvalidInputError("ge2e encoder needs at least 1 frame")
        _, (hidden, _) = self.rnn(mel_frames)
        emb = self.out(hidden[-1])
        emb = emb / torch.clamp(emb.norm(dim=-1, keepdim=True), min=1e-12)
        return emb.squeeze(0) if squeeze else emb


def adapter_embed(m: MelSpectrogram, adapter: SpeakerAdapter) -> SpeakerEmbedding:
    with torch.no_grad():
        vec = adapter(torch.as_tensor(m.frames, dtype=next(adapter.parameters()).dtype))
    return SpeakerEmbedding(vector=vec.numpy(), source_tag="adapter")


def ge2e_embed(m: MelSpectrogram, encoder: Ge2eEncoder) -> SpeakerEmbedding:
    with torch.no_grad():
        vec = encoder(torch.as_tensor(m.frames, dtype=next(encoder.parameters()).dtype))
    return SpeakerEmbedding(vector=vec.numpy(), source_tag="ge2e")


def ge2e_loss(embeddings: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Softmax-variant loss over similarity-to-centroid with self-exclusion.

    embeddings: [n_speakers, m_utts, dim], rows L2-normalized. For each
    embedding, the similarity to its own speaker's centroid excludes itself;
    the loss is mean cross-entropy of picking the own speaker.
    """
    if embeddings.dim() != 3:
        raise InvalidInputError(f"expected [N, M, D], got {tuple(embeddings.shape)}")
    n_spk, m_utt, _ = embeddings.shape
    if n_spk < 2:
        raise InvalidInputError(f"need at least 2 speakers, got {n_spk}")
    if m_utt < 2:
        raise InvalidInputError(f"need at least 2 utterances per speaker, got {m_utt}")

    centroids = embeddings.mean(dim=1)  # [N, D]
    centroids_n = centroids / torch.clamp(centroids.norm(dim=-1, keepdim=True), min=1e-12)
    # exclusive centroid for each (speaker, utterance)
    sums = embeddings.sum(dim=1, keepdim=True)  # [N, 1, D]
    excl = (sums - embeddings) / (m_utt - 1)  # [N, M, D]
    excl_n = excl / torch.clamp(excl.norm(dim=-1, keepdim=True), min=1e-12)

    sim = torch.einsum("nmd,kd->nmk", embeddings, centroids_n)  # vs all centroids
    own = (embeddings * excl_n).sum(dim=-1)  # vs own exclusive centroid
    idx = torch.arange(n_spk)
    sim = sim.clone()
    sim[idx, :, idx] = own
    logits = w * sim + b
    log_probs = torch.log_softmax(logits, dim=-1)
    return -log_probs[idx, :, idx].mean()


class Ge2eLossModule(nn.Module):
    """ge2e_loss with its learnable scale and bias (init 10, -5)."""

    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(10.0))
        self.b = nn.Parameter(torch.tensor(-5.0))

    def forward(self, embeddings):
        return ge2e_loss(embeddings, torch.clamp(self.w, min=1e-3), self.b)


def cosine(a, b) -> float:
    """Cosine similarity in [-1, 1]; accepts SpeakerEmbedding or arrays."""
    va = a.vector if isinstance(a, SpeakerEmbedding) else np.asarray(a, dtype=np.float64)
    vb = b.vector if isinstance(b, SpeakerEmbedding) else np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise InvalidInputError("cosine undefined for zero vectors")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


class EmbeddingProjector(nn.Module):
    """Single affine map from speaker-embedding space into model space."""

    def __init__(self, embed_dim: int = 192, hidden: int = 512):
        super().__init__()
        self.proj = nn.Linear(embed_dim, hidden)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        if embedding.shape[-1] != self.proj.in_features:
            raise InvalidInputError(
                f"expected dim {self.proj.in_features}, got {embedding.shape[-1]}"
            )
        return self.proj(embedding)


def project_embedding(e: SpeakerEmbedding, projector: EmbeddingProjector) -> np.ndarray:
    with torch.no_grad():
        dtype = next(projector.parameters()).dtype
        return projector(torch.as_tensor(e.vector, dtype=dtype)).numpy()


def equal_error_rate(scores: np.ndarray, labels: np.ndarray) -> float:
    """EER for same-speaker (label 1) vs different-speaker (label 0) trials."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or (~labels).all():
        raise InvalidInputError("need both same and different trials")
    thresholds = np.unique(scores)
    best = 1.0
    for t in thresholds:
        far = float(np.mean(scores[~labels] >= t))
        frr = float(np.mean(scores[labels] < t))
        best = min(best, max(far, frr))
    return best


def train_ge2e(
    encoder: Ge2eEncoder,
    mels_by_speaker: dict[str, list[np.ndarray]],
    steps: int = 200,
    n_speakers: int = 4,
    m_utts: int = 3,
    crop_frames: int = 40,
    lr: float = 1e-3,
    seed: int = 0,
) -> list[float]:
    """Train the recurrent encoder with the end-to-end speaker loss.

    Batches sample n_speakers speakers with m_utts random crops each.
    Returns the per-step loss history.
    """
    speaker_ids = sorted(k for k, v in mels_by_speaker.items() if len(v) >= m_utts)
    if len(speaker_ids) < n_speakers:
        raise InvalidInputError(
            f"need {n_speakers} speakers with >= {m_utts} utterances, got {len(speaker_ids)}"
        )
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    loss_mod = Ge2eLossModule()
    opt = torch.optim.Adam(list(encoder.parameters()) + list(loss_mod.parameters()), lr=lr)
    history = []
    encoder.train()
    for _ in range(steps):
        chosen = rng.choice(len(speaker_ids), size=n_speakers, replace=False)
        batch = []
        for si in chosen:
            utts = mels_by_speaker[speaker_ids[si]]
            picks = rng.choice(len(utts), size=m_utts, replace=len(utts) < m_utts)
            crops = []
            for ui in picks:
                mel = utts[ui]
                if len(mel) <= crop_frames:
                    crop = np.pad(mel, ((0, crop_frames - len(mel)), (0, 0)), mode="edge")
                else:
                    start = int(rng.integers(0, len(mel) - crop_frames + 1))
                    crop = mel[start : start + crop_frames]
                crops.append(crop)
            batch.append(np.stack(crops))
        x = torch.as_tensor(np.stack(batch), dtype=torch.float32)  # [N, M, T, C]
        n, m, t, c = x.shape
        emb = encoder(x.view(n * m, t, c)).view(n, m, -1)
        loss = loss_mod(emb)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    encoder.eval()
    return history


def save_embeddings(path: str | Path, embeddings: dict[str, SpeakerEmbedding]) -> None:
    """Text format: utterance id followed by the embedding values, one per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, emb in embeddings.items():
            values = " ".join(f"{v:.8e}" for v in emb.vector)
            f.write(f"{utt_id} {values}\n")


def load_embeddings(path: str | Path, source_tag: str = "external") -> dict[str, SpeakerEmbedding]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(str(path))
    out: dict[str, SpeakerEmbedding] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError:
                raise InvalidInputError(f"{path}: line {line_no}: non-numeric value") from None
            out[parts[0]] = SpeakerEmbedding(vector=vec, source_tag=source_tag)
    return out
