"""Source-speech-to-target-unit translation.

A conformer acoustic encoder (over mel frames or precomputed external feature
files) feeds an autoregressive transformer unit decoder. An auxiliary CTC head
on an intermediate decoder layer predicts the target-language transcript
characters during training only; inference is pure unit decoding.

Unit vocabulary layout: the K cluster ids occupy [0, K), followed by pad,
bos and eos, giving K + 3 output neurons.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidConfigError, InvalidInputError, MissingFileError
from .nnet import (
    BlockConfig,
    ConformerBlock,
    TransformerDecoderBlock,
    causal_mask,
    ctc_loss,
    sinusoidal_positions,
)
from .quantizer import UnitSequence


@dataclass(frozen=True)
class S2utConfig:
    codebook_size: int = 100
    encoder_blocks: int = 6
    decoder_blocks: int = 6
    hidden: int = 512
    heads: int = 8
    dropout: float = 0.1
    encoder_kernel: int = 31
    ffn_mult: int = 4
    input_dim: int = 80  # mel bands, or the dim of external feature files
    subsample: int = 1  # 1 keeps T, 2 halves it (ceil)
    ctc_layer: int = 3
    ctc_weight: float = 0.3
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.subsample not in (1, 2):
            raise InvalidConfigError(f"subsample must be 1 or 2, got {self.subsample}")
        if not (1 <= self.ctc_layer <= self.decoder_blocks):
            raise InvalidConfigError(
                f"ctc_layer must lie in [1, {self.decoder_blocks}], got {self.ctc_layer}"
            )
        if not (0.0 <= self.label_smoothing < 1.0):
            raise InvalidConfigError("label_smoothing must be in [0, 1)")

    @property
    def pad_id(self) -> int:
        return self.codebook_size

    @property
    def bos_id(self) -> int:
        return self.codebook_size + 1

    @property
    def eos_id(self) -> int:
        return self.codebook_size + 2

    @property
    def unit_vocab(self) -> int:
        return self.codebook_size + 3

    def encoder_block_config(self) -> BlockConfig:
        return BlockConfig(hidden=self.hidden, heads=self.heads, dropout=self.dropout,
                           conv_kernel=self.encoder_kernel, ffn_mult=self.ffn_mult)

    def decoder_block_config(self) -> BlockConfig:
        return BlockConfig(hidden=self.hidden, heads=self.heads, dropout=self.dropout,
                           ffn_mult=self.ffn_mult)


@dataclass
class CharVocab:
    """Character inventory for the auxiliary CTC head; blank sits at index 0."""

    symbols: list[str]
    BLANK = "<blank>"

    def __post_init__(self):
        if not self.symbols or self.symbols[0] != self.BLANK:
            raise InvalidConfigError("char vocab must start with the blank symbol")
        if len(set(self.symbols)) != len(self.symbols):
            raise InvalidConfigError("char vocab has duplicates")

    @classmethod
    def from_transcripts(cls, transcripts) -> "CharVocab":
        chars = sorted({c for tokens in transcripts for c in " ".join(tokens)})
        return cls(symbols=[cls.BLANK] + chars)

    def __len__(self):
        return len(self.symbols)

    def encode(self, tokens: list[str]) -> list[int]:
        text = " ".join(tokens)
        index = {c: i for i, c in enumerate(self.symbols)}
        unknown = sorted({c for c in text if c not in index})
        if unknown:
            raise InvalidInputError(f"characters outside vocabulary: {unknown}")
        return [index[c] for c in text]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CharVocab":
        path = Path(path)
        if not path.exists():
            raise MissingFileError(str(path))
        return cls(symbols=path.read_text(encoding="utf-8").splitlines())


@dataclass
class TranslationHypothesis:
    units: UnitSequence
    score: float  # length-normalized log-probability
    truncated: bool = False


class AcousticEncoder(nn.Module):
    """Input projection, optional stride-2 subsampling, conformer stack."""

    def __init__(self, cfg: S2utConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.input_dim, cfg.hidden)
        self.subsampler = (
            nn.Conv1d(cfg.hidden, cfg.hidden, kernel_size=3, stride=2, padding=1)
            if cfg.subsample == 2
            else None
        )
        self.blocks = nn.ModuleList(
            ConformerBlock(cfg.encoder_block_config()) for _ in range(cfg.encoder_blocks)
        )

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.dim() != 2 or feats.shape[1] != self.cfg.input_dim:
            raise InvalidInputError(
                f"expected [T, {self.cfg.input_dim}] features, got {tuple(feats.shape)}"
            )
        if feats.shape[0] < 1:
            raise InvalidInputError("need at least one input frame")
        x = self.input_proj(feats)
        if self.subsampler is not None:
            x = self.subsampler(x.t().unsqueeze(0)).squeeze(0).t()
        x = x + sinusoidal_positions(x.shape[0], self.cfg.hidden, x.dtype)
        for block in self.blocks:
            x = block(x)
        return x


class UnitDecoder(nn.Module):
    """Autoregressive transformer decoder over the unit vocabulary."""

    def __init__(self, cfg: S2utConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.unit_vocab, cfg.hidden)
        self.blocks = nn.ModuleList(
            TransformerDecoderBlock(cfg.decoder_block_config()) for _ in range(cfg.decoder_blocks)
        )
        self.norm = nn.LayerNorm(cfg.hidden)
        self.out = nn.Linear(cfg.hidden, cfg.unit_vocab)

    def forward(self, tokens: torch.Tensor, memory: torch.Tensor):
        """Returns (logits [T, vocab], intermediate states [T, hidden] at ctc_layer)."""
        if tokens.dim() != 1:
            raise InvalidInputError(f"tokens must be 1-D, got {tuple(tokens.shape)}")
        x = self.embedding(tokens) + sinusoidal_positions(
            len(tokens), self.cfg.hidden, self.embedding.weight.dtype
        )
        mask = causal_mask(len(tokens))
        intermediate = None
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, memory, self_mask=mask)
            if i == self.cfg.ctc_layer:
                intermediate = x
        return self.out(self.norm(x)), intermediate


class S2UT(nn.Module):
    def __init__(self, cfg: S2utConfig | None = None, char_vocab_size: int = 28):
        super().__init__()
        self.cfg = cfg or S2utConfig()
        self.encoder = AcousticEncoder(self.cfg)
        self.decoder = UnitDecoder(self.cfg)
        self.ctc_head = nn.Linear(self.cfg.hidden, char_vocab_size)

    def parameter_groups(self) -> dict[str, nn.Module]:
        return {
            "s2ut_encoder": self.encoder,
            "s2ut_decoder": self.decoder,
            "s2ut_ctc_head": self.ctc_head,
        }


def label_smoothed_ce(
    logits: torch.Tensor, targets: torch.Tensor, smoothing: float, pad_id: int | None = None
) -> torch.Tensor:
    """Cross-entropy against (1 - eps) one-hot + eps uniform; pad rows are masked out."""
    if logits.dim() != 2 or targets.dim() != 1 or logits.shape[0] != targets.shape[0]:
        raise InvalidInputError(
            f"logits [T, V] and targets [T] required, got {tuple(logits.shape)} and "
            f"{tuple(targets.shape)}"
        )
    log_probs = torch.log_softmax(logits, dim=-1)
    nll = -log_probs.gather(1, targets.clamp(min=0).unsqueeze(1)).squeeze(1)
    uniform = -log_probs.mean(dim=-1)
    per_token = (1.0 - smoothing) * nll + smoothing * uniform
    if pad_id is not None:
        keep = targets != pad_id
        if not bool(keep.any()):
            raise InvalidInputError("all target positions are padding")
        per_token = per_token[keep]
    return per_token.mean()


def smoothed_ce_floor(vocab: int, smoothing: float) -> float:
    """Minimum achievable smoothed CE: the entropy of the smoothed target."""
    on = (1.0 - smoothing) + smoothing / vocab
    off = smoothing / vocab
    return float(-(on * np.log(on) + (vocab - 1) * off * np.log(off)))


def s2ut_loss(model: S2UT, items, char_vocab: CharVocab):
    """Mean (ce, ctc, total) over (features, target units, transcript) items.

    Target units are wrapped bos ... eos for teacher forcing; the CTC loss is
    computed from the decoder's intermediate states against the transcript
    characters. total = ce + ctc_weight * ctc.
    """
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    ce_sum, ctc_sum = None, None
    for feats, target_units, transcript in items:
        units = torch.as_tensor(
            target_units.units if isinstance(target_units, UnitSequence) else target_units,
            dtype=torch.long,
        )
        if len(units) == 0:
            raise InvalidInputError("empty target unit sequence")
        memory = model.encoder(torch.as_tensor(feats, dtype=dtype))
        tokens_in = torch.cat([torch.tensor([cfg.bos_id]), units])
        tokens_out = torch.cat([units, torch.tensor([cfg.eos_id])])
        logits, intermediate = model.decoder(tokens_in, memory)
        ce = label_smoothed_ce(logits, tokens_out, cfg.label_smoothing, pad_id=cfg.pad_id)
        char_ids = char_vocab.encode(transcript)
        if not char_ids:
            raise InvalidInputError("transcript required for the CTC objective")
        ctc_log_probs = torch.log_softmax(model.ctc_head(intermediate), dim=-1)
        ctc = ctc_loss(ctc_log_probs, char_ids, blank=0)
        ce_sum = ce if ce_sum is None else ce_sum + ce
        ctc_sum = ctc if ctc_sum is None else ctc_sum + ctc
    n = len(items)
    ce_mean, ctc_mean = ce_sum / n, ctc_sum / n
    return ce_mean, ctc_mean, ce_mean + cfg.ctc_weight * ctc_mean


def _decode_scores(model: S2UT, tokens: list[int], memory: torch.Tensor) -> torch.Tensor:
    """Log-probs over the next token given a prefix; pad and bos are barred."""
    logits, _ = model.decoder(torch.tensor(tokens, dtype=torch.long), memory)
    step = logits[-1]
    step = step.clone()
    step[model.cfg.pad_id] = float("-inf")
    step[model.cfg.bos_id] = float("-inf")
    return torch.log_softmax(step, dim=-1)


def _greedy(model: S2UT, memory: torch.Tensor, max_len: int):
    cfg = model.cfg
    tokens = [cfg.bos_id]
    total = 0.0
    truncated = True
    for _ in range(max_len):
        log_probs = _decode_scores(model, tokens, memory)
        nxt = int(torch.argmax(log_probs))
        total += float(log_probs[nxt])
        if nxt == cfg.eos_id:
            truncated = False
            break
        tokens.append(nxt)
    units = tokens[1:]
    score = total / max(len(units) + (0 if truncated else 1), 1)
    return units, score, truncated


def translate_units(
    src_feats,
    model: S2UT,
    mode: str = "greedy",
    beam_width: int = 4,
    max_len: int = 400,
) -> TranslationHypothesis:
    """Decode target units from source features (mel frames or external).

    Greedy by default; beam keeps `beam_width` prefixes ranked by cumulative
    log-probability and reports the best finished hypothesis under length
    normalization. The beam candidate pool always contains the greedy
    hypothesis, so widening the beam never lowers the reported score.
    """
    if mode not in ("greedy", "beam"):
        raise InvalidConfigError(f"mode must be greedy or beam, got {mode!r}")
    cfg = model.cfg
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            memory = model.encoder(torch.as_tensor(src_feats, dtype=dtype))
            g_units, g_score, g_trunc = _greedy(model, memory, max_len)
            best = (g_units, g_score, g_trunc)
            if mode == "beam" and beam_width > 1:
                finished = []
                beams = [([cfg.bos_id], 0.0)]
                for _ in range(max_len):
                    candidates = []
                    for tokens, total in beams:
                        log_probs = _decode_scores(model, tokens, memory)
                        top = torch.topk(log_probs, k=min(beam_width, len(log_probs)))
                        for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                            candidates.append((tokens + [tok], total + lp))
                    next_beams = []
                    for tokens, total in sorted(candidates, key=lambda c: -c[1]):
                        if tokens[-1] == cfg.eos_id:
                            norm = total / max(len(tokens) - 1, 1)
                            finished.append((tokens[1:-1], norm, False))
                        else:
                            next_beams.append((tokens, total))
                        if len(next_beams) >= beam_width:
                            break
                    beams = next_beams
                    if not beams:
                        break
                for tokens, total in beams:
                    units = tokens[1:]
                    finished.append((units, total / max(len(units), 1), True))
                for cand in finished:
                    if cand[1] > best[1]:
                        best = cand
    finally:
        if was_training:
            model.train()
    units, score, truncated = best
    return TranslationHypothesis(
        units=UnitSequence(units=np.array(units, dtype=np.int64), codebook_size=cfg.codebook_size),
        score=score,
        truncated=truncated,
    )


def teacher_forced_accuracy(model: S2UT, items) -> float:
    """Fraction of next-unit argmax matches under teacher forcing (eos included)."""
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    hits, total = 0, 0
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for feats, target_units, _ in items:
            units = torch.as_tensor(
                target_units.units if isinstance(target_units, UnitSequence) else target_units,
                dtype=torch.long,
            )
            memory = model.encoder(torch.as_tensor(feats, dtype=dtype))
            tokens_in = torch.cat([torch.tensor([cfg.bos_id]), units])
            tokens_out = torch.cat([units, torch.tensor([cfg.eos_id])])
            logits, _ = model.decoder(tokens_in, memory)
            logits[:, cfg.pad_id] = float("-inf")
            logits[:, cfg.bos_id] = float("-inf")
            pred = logits.argmax(dim=-1)
            hits += int((pred == tokens_out).sum())
            total += len(tokens_out)
    if was_training:
        model.train()
    return hits / max(total, 1)


def save_hypotheses(path: str | Path, hyps: dict[str, TranslationHypothesis]) -> None:
    """One line per utterance: id, tab, score, tab, space-separated units."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, hyp in hyps.items():
            units = " ".join(str(int(u)) for u in hyp.units.units)
            f.write(f"{utt_id}\t{hyp.score:.6f}\t{units}\n")
