"""Stage orchestration: two self-supervised pre-training stages, the joint
fine-tune, and translation-model training. Owns checkpoints, seeds and logs.

Stage protocol:
  pretrain_a  single-speaker target-language utterances, split in half; the
              first half feeds the speaker adapter, units from the second
              half feed the unit encoder, and the decoder reconstructs the
              second half's mel. Trains encoder/decoder/fusion (the adapter
              trains too but is not carried forward).
  pretrain_b  the same split-utterance objective on multi-speaker
              source-language utterances; its product is the speaker adapter.
  finetune    initializes from both checkpoints (encoder/decoder/fusion from
              pretrain_a, adapter from pretrain_b) and jointly trains on
              multi-speaker target utterances, units and embedding both from
              the same full utterance. Nothing is frozen.
  s2ut        supervised translation training on parallel pairs with
              single-speaker targets and auxiliary transcript CTC.

Every stage is a pure function of (config, manifests, seed): repeated runs
agree on losses and emitted files.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .audio import MelConfig, mel_spectrogram, read_wav
from .corpus import load_manifest, load_pairs, split_halves
from .errors import InvalidConfigError, InvalidInputError, MissingFileError, SkipUtterance
from .quantizer import Codebook, encode, fit_kmeans
from .s2ut import CharVocab, S2UT, S2utConfig, s2ut_loss, teacher_forced_accuracy
from .u2m import SRU2M, U2mConfig, reconstruction_loss

STAGES = ("pretrain_a", "pretrain_b", "finetune", "s2ut")


@dataclass
class StageConfig:
    stage: str
    manifest: str = ""  # utterance manifest (self-supervised stages)
    src_manifest: str = ""  # s2ut only
    tgt_manifest: str = ""  # s2ut only
    dev_src_manifest: str = ""
    dev_tgt_manifest: str = ""
    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    warmup: int = 400
    seed: int = 0
    init_from: tuple[str, ...] = ()
    codebook: str = ""  # codebook file path, fit once and shared by stages
    min_split_seconds: float = 1.0
    data_fraction: float = 1.0  # finetune uses a reduced slice by default
    grad_clip: float = 1.0
    log_every: int = 50
    eval_every: int = 0  # s2ut: dev accuracy cadence (0 = off)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise InvalidConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.stage == "finetune" and self.init_from and len(self.init_from) != 2:
            raise InvalidConfigError("finetune requires exactly two init_from checkpoints")
        if not (0.0 < self.data_fraction <= 1.0):
            raise InvalidConfigError("data_fraction must be in (0, 1]")


@dataclass
class Checkpoint:
    stage: str
    step: int
    seed: int
    config: dict
    groups: dict[str, dict]
    shapes: dict[str, dict[str, tuple]]
    optimizer: dict | None = None


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Single-file binary checkpoint, written atomically (temp then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(
        {
            "stage": ckpt.stage,
            "step": ckpt.step,
            "seed": ckpt.seed,
            "config": ckpt.config,
            "groups": ckpt.groups,
            "shapes": ckpt.shapes,
            "optimizer": ckpt.optimizer,
        },
        tmp,
    )
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(str(path))
    blob = torch.load(path, map_location="cpu", weights_only=False)
    return Checkpoint(**blob)


def _snapshot(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _shapes(groups: dict[str, dict]) -> dict[str, dict[str, tuple]]:
    return {g: {k: tuple(v.shape) for k, v in sd.items()} for g, sd in groups.items()}


def make_checkpoint(stage: str, model, step: int, seed: int, config: dict,
                    optimizer=None) -> Checkpoint:
    groups = {name: _snapshot(mod) for name, mod in model.parameter_groups().items()}
    return Checkpoint(
        stage=stage,
        step=step,
        seed=seed,
        config=config,
        groups=groups,
        shapes=_shapes(groups),
        optimizer=optimizer.state_dict() if optimizer is not None else None,
    )


def inverse_sqrt_lr(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup to base_lr, then 1/sqrt decay."""
    s = step + 1
    if s < warmup:
        return base_lr * s / warmup
    return base_lr * (warmup / s) ** 0.5


@dataclass
class SelfSupExample:
    utt_id: str
    speaker_id: str
    speaker_mel: np.ndarray  # feeds the adapter
    units: np.ndarray  # feeds the unit encoder
    target_mel: np.ndarray  # reconstruction target


@dataclass
class PreparedData:
    examples: list
    processed: int
    skipped: int


def load_codebook_file(path: str | Path) -> Codebook:
    from .quantizer import load_codebook

    return load_codebook(path)


def fit_codebook(
    manifest_path: str | Path,
    mel_cfg: MelConfig | None = None,
    k: int = 100,
    seed: int = 0,
    max_frames: int = 50000,
) -> Codebook:
    """Fit the shared unit codebook on a manifest's mel frames (one fit, reused
    by every stage so all stages live in one unit space)."""
    mel_cfg = mel_cfg or MelConfig()
    rows = load_manifest(manifest_path, require_audio=True)
    if not rows:
        raise InvalidInputError(f"{manifest_path}: empty manifest")
    chunks = []
    total = 0
    for row in rows:
        frames = mel_spectrogram(read_wav(row.wav_path), mel_cfg).frames
        chunks.append(frames)
        total += len(frames)
        if total >= max_frames:
            break
    frames = np.concatenate(chunks)[:max_frames]
    return fit_kmeans(frames, k=k, seed=seed, feature_tag=f"logmel{mel_cfg.n_mels}")


def prepare_split_examples(
    manifest_path: str | Path,
    codebook: Codebook,
    mel_cfg: MelConfig,
    min_split_seconds: float,
    min_adapter_frames: int,
) -> PreparedData:
    """Split-utterance examples for the pre-training stages; short utterances
    are skipped and counted, never fatal."""
    rows = load_manifest(manifest_path, require_audio=True)
    examples, skipped = [], 0
    for row in rows:
        wav = read_wav(row.wav_path)
        try:
            first, second = split_halves(wav, min_seconds=min_split_seconds)
        except SkipUtterance:
            skipped += 1
            continue
        speaker_mel = mel_spectrogram(first, mel_cfg)
        if speaker_mel.n_frames < min_adapter_frames:
            skipped += 1
            continue
        target = mel_spectrogram(second, mel_cfg)
        units = encode(target, codebook)
        examples.append(
            SelfSupExample(
                utt_id=row.id,
                speaker_id=row.speaker_id,
                speaker_mel=speaker_mel.frames.astype(np.float32),
                units=units.units,
                target_mel=target.frames.astype(np.float32),
            )
        )
    return PreparedData(examples=examples, processed=len(examples), skipped=skipped)


def prepare_full_examples(
    manifest_path: str | Path,
    codebook: Codebook,
    mel_cfg: MelConfig,
    min_adapter_frames: int,
    fraction: float = 1.0,
) -> PreparedData:
    """Whole-utterance examples for fine-tuning: units and speaker embedding
    both come from the same utterance."""
    rows = load_manifest(manifest_path, require_audio=True)
    if fraction < 1.0:
        rows = rows[: max(1, int(np.ceil(len(rows) * fraction)))]
    examples, skipped = [], 0
    for row in rows:
        mel = mel_spectrogram(read_wav(row.wav_path), mel_cfg)
        if mel.n_frames < min_adapter_frames:
            skipped += 1
            continue
        units = encode(mel, codebook)
        examples.append(
            SelfSupExample(
                utt_id=row.id,
                speaker_id=row.speaker_id,
                speaker_mel=mel.frames.astype(np.float32),
                units=units.units,
                target_mel=mel.frames.astype(np.float32),
            )
        )
    return PreparedData(examples=examples, processed=len(examples), skipped=skipped)


def evaluate_reconstruction(model: SRU2M, examples, limit: int = 50) -> float:
    """Mean reconstruction L1 over up to `limit` examples (eval mode)."""
    was_training = model.training
    model.eval()
    losses = []
    with torch.no_grad():
        for ex in examples[:limit]:
            pred = model(torch.as_tensor(ex.units), torch.as_tensor(ex.speaker_mel))
            losses.append(float(reconstruction_loss(pred, torch.as_tensor(ex.target_mel))))
    if was_training:
        model.train()
    return float(np.mean(losses))


def _train_reconstruction(
    model: SRU2M,
    data: PreparedData,
    cfg: StageConfig,
    log: list[dict],
) -> torch.optim.Optimizer:
    if not data.examples:
        raise InvalidInputError(f"{cfg.stage}: no usable training examples")
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    model.train()
    start = time.monotonic()
    for step in range(cfg.steps):
        lr = inverse_sqrt_lr(step, cfg.lr, cfg.warmup)
        for group in opt.param_groups:
            group["lr"] = lr
        picks = rng.integers(0, len(data.examples), size=cfg.batch_size)
        opt.zero_grad()
        total = 0.0
        for idx in picks:
            ex = data.examples[int(idx)]
            pred = model(torch.as_tensor(ex.units), torch.as_tensor(ex.speaker_mel))
            loss = reconstruction_loss(pred, torch.as_tensor(ex.target_mel)) / cfg.batch_size
            loss.backward()
            total += float(loss.detach()) * cfg.batch_size
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        mean_loss = total / cfg.batch_size
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.append({"step": step, "loss": mean_loss, "lr": lr,
                        "wall": time.monotonic() - start})
    model.eval()
    return opt


def _stage_seed(cfg: StageConfig) -> None:
    torch.manual_seed(cfg.seed)


def pretrain_a(
    cfg: StageConfig,
    u2m_cfg: U2mConfig,
    mel_cfg: MelConfig | None = None,
    out_dir: str | Path | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Stage A: single-speaker split-utterance reconstruction."""
    if cfg.stage != "pretrain_a":
        raise InvalidConfigError(f"expected stage pretrain_a, got {cfg.stage}")
    mel_cfg = mel_cfg or MelConfig(n_mels=u2m_cfg.n_mels)
    codebook = load_codebook_file(cfg.codebook)
    _stage_seed(cfg)
    model = SRU2M(u2m_cfg)
    data = prepare_split_examples(cfg.manifest, codebook, mel_cfg,
                                  cfg.min_split_seconds, u2m_cfg.adapter.min_frames)
    log: list[dict] = []
    opt = _train_reconstruction(model, data, cfg, log)
    ckpt = make_checkpoint("pretrain_a", model, cfg.steps, cfg.seed,
                           {"stage_config": asdict(cfg), "u2m_config": _cfgdict(u2m_cfg),
                            "processed": data.processed, "skipped": data.skipped},
                           optimizer=opt)
    _maybe_save(ckpt, log, out_dir, "pretrain_a")
    return ckpt, log


def pretrain_b(
    cfg: StageConfig,
    u2m_cfg: U2mConfig,
    mel_cfg: MelConfig | None = None,
    out_dir: str | Path | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Stage B: the same objective on multi-speaker source speech; the product
    is the speaker adapter group."""
    if cfg.stage != "pretrain_b":
        raise InvalidConfigError(f"expected stage pretrain_b, got {cfg.stage}")
    rows = load_manifest(cfg.manifest)
    if len({r.speaker_id for r in rows}) < 2:
        raise InvalidInputError("pretrain_b needs at least 2 distinct speakers")
    mel_cfg = mel_cfg or MelConfig(n_mels=u2m_cfg.n_mels)
    codebook = load_codebook_file(cfg.codebook)
    _stage_seed(cfg)
    model = SRU2M(u2m_cfg)
    data = prepare_split_examples(cfg.manifest, codebook, mel_cfg,
                                  cfg.min_split_seconds, u2m_cfg.adapter.min_frames)
    log: list[dict] = []
    opt = _train_reconstruction(model, data, cfg, log)
    ckpt = make_checkpoint("pretrain_b", model, cfg.steps, cfg.seed,
                           {"stage_config": asdict(cfg), "u2m_config": _cfgdict(u2m_cfg),
                            "processed": data.processed, "skipped": data.skipped},
                           optimizer=opt)
    _maybe_save(ckpt, log, out_dir, "pretrain_b")
    return ckpt, log


def init_finetune_model(cfg: StageConfig, u2m_cfg: U2mConfig) -> SRU2M:
    """Build the fine-tune model with bit-exact initialization from the two
    pre-training checkpoints (encoder/decoder/fusion from A, adapter from B)."""
    if len(cfg.init_from) != 2:
        raise InvalidConfigError("finetune requires exactly two init_from checkpoints")
    ckpts = [load_checkpoint(p) for p in cfg.init_from]
    by_stage = {c.stage: c for c in ckpts}
    if set(by_stage) != {"pretrain_a", "pretrain_b"}:
        raise InvalidConfigError(
            f"finetune needs one pretrain_a and one pretrain_b checkpoint, got stages "
            f"{sorted(c.stage for c in ckpts)}"
        )
    model = SRU2M(u2m_cfg)
    groups = model.parameter_groups()
    wanted = {"unit_encoder": "pretrain_a", "mel_decoder": "pretrain_a",
              "fusion": "pretrain_a", "speaker_adapter": "pretrain_b"}
    for group_name, stage in wanted.items():
        source = by_stage[stage]
        if group_name not in source.groups:
            raise InvalidInputError(f"checkpoint {stage} is missing group {group_name!r}")
        groups[group_name].load_state_dict(source.groups[group_name])
    return model


def finetune(
    cfg: StageConfig,
    u2m_cfg: U2mConfig,
    mel_cfg: MelConfig | None = None,
    out_dir: str | Path | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Joint fine-tuning on multi-speaker target utterances; nothing frozen."""
    if cfg.stage != "finetune":
        raise InvalidConfigError(f"expected stage finetune, got {cfg.stage}")
    mel_cfg = mel_cfg or MelConfig(n_mels=u2m_cfg.n_mels)
    codebook = load_codebook_file(cfg.codebook)
    _stage_seed(cfg)
    model = init_finetune_model(cfg, u2m_cfg)
    data = prepare_full_examples(cfg.manifest, codebook, mel_cfg,
                                 u2m_cfg.adapter.min_frames, fraction=cfg.data_fraction)
    log: list[dict] = []
    opt = _train_reconstruction(model, data, cfg, log)
    ckpt = make_checkpoint("finetune", model, cfg.steps, cfg.seed,
                           {"stage_config": asdict(cfg), "u2m_config": _cfgdict(u2m_cfg),
                            "processed": data.processed, "skipped": data.skipped},
                           optimizer=opt)
    _maybe_save(ckpt, log, out_dir, "finetune")
    return ckpt, log


def prepare_s2ut_items(
    src_manifest: str | Path,
    tgt_manifest: str | Path,
    codebook: Codebook,
    mel_cfg: MelConfig,
) -> list[tuple]:
    """(source mel, target units, target transcript) triples from a pair of
    manifests zipped on pair_id."""
    pairs = load_pairs(src_manifest, tgt_manifest)
    items = []
    for pair in pairs:
        src_mel = mel_spectrogram(read_wav(pair.source.wav_path), mel_cfg)
        tgt_mel = mel_spectrogram(read_wav(pair.target.wav_path), mel_cfg)
        units = encode(tgt_mel, codebook)
        items.append((src_mel.frames.astype(np.float32), units, list(pair.target.transcript)))
    return items


def train_s2ut(
    cfg: StageConfig,
    s2ut_cfg: S2utConfig,
    mel_cfg: MelConfig | None = None,
    out_dir: str | Path | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Supervised translation training on parallel pairs."""
    if cfg.stage != "s2ut":
        raise InvalidConfigError(f"expected stage s2ut, got {cfg.stage}")
    mel_cfg = mel_cfg or MelConfig()
    codebook = load_codebook_file(cfg.codebook)
    if codebook.k != s2ut_cfg.codebook_size:
        raise InvalidConfigError(
            f"codebook has K={codebook.k} but model expects {s2ut_cfg.codebook_size}"
        )
    items = prepare_s2ut_items(cfg.src_manifest, cfg.tgt_manifest, codebook, mel_cfg)
    if not items:
        raise InvalidInputError("no parallel training pairs")
    char_vocab = CharVocab.from_transcripts([t for _, _, t in items])
    dev_items = None
    if cfg.dev_src_manifest and cfg.dev_tgt_manifest:
        dev_items = prepare_s2ut_items(cfg.dev_src_manifest, cfg.dev_tgt_manifest,
                                       codebook, mel_cfg)

    _stage_seed(cfg)
    model = S2UT(s2ut_cfg, char_vocab_size=len(char_vocab))
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    log: list[dict] = []
    model.train()
    start = time.monotonic()
    for step in range(cfg.steps):
        lr = inverse_sqrt_lr(step, cfg.lr, cfg.warmup)
        for group in opt.param_groups:
            group["lr"] = lr
        picks = rng.integers(0, len(items), size=cfg.batch_size)
        batch = [items[int(i)] for i in picks]
        ce, ctc, total = s2ut_loss(model, batch, char_vocab)
        opt.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            record = {
                "step": step,
                "loss": float(total.detach()),
                "ce": float(ce.detach()),
                "ctc": float(ctc.detach()),
                "lr": lr,
                "wall": time.monotonic() - start,
            }
            if dev_items and cfg.eval_every and (
                step % cfg.eval_every == 0 or step == cfg.steps - 1
            ):
                record["dev_unit_accuracy"] = teacher_forced_accuracy(model, dev_items[:32])
            log.append(record)
    model.eval()
    ckpt = make_checkpoint(
        "s2ut", model, cfg.steps, cfg.seed,
        {"stage_config": asdict(cfg), "s2ut_config": _cfgdict(s2ut_cfg),
         "char_vocab": char_vocab.symbols},
        optimizer=opt,
    )
    _maybe_save(ckpt, log, out_dir, "s2ut")
    return ckpt, log


def restore_sru2m(ckpt: Checkpoint, u2m_cfg: U2mConfig) -> SRU2M:
    """Instantiate an SR-U2M model from any stage checkpoint that carries the
    four generation groups."""
    model = SRU2M(u2m_cfg)
    groups = model.parameter_groups()
    for name, module in groups.items():
        if name not in ckpt.groups:
            raise InvalidInputError(f"checkpoint missing group {name!r}")
        module.load_state_dict(ckpt.groups[name])
    model.eval()
    return model


def restore_s2ut(ckpt: Checkpoint, s2ut_cfg: S2utConfig) -> tuple[S2UT, CharVocab]:
    char_vocab = CharVocab(symbols=list(ckpt.config["char_vocab"]))
    model = S2UT(s2ut_cfg, char_vocab_size=len(char_vocab))
    groups = model.parameter_groups()
    for name, module in groups.items():
        if name not in ckpt.groups:
            raise InvalidInputError(f"checkpoint missing group {name!r}")
        module.load_state_dict(ckpt.groups[name])
    model.eval()
    return model, char_vocab


def _cfgdict(cfg) -> dict:
    d = asdict(cfg)
    return d


def _maybe_save(ckpt: Checkpoint, log: list[dict], out_dir, name: str) -> None:
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    save_checkpoint(out_dir / f"{name}.ckpt", ckpt)
    with open(out_dir / f"{name}.log.jsonl", "w", encoding="utf-8") as f:
        for record in log:
            f.write(json.dumps(record) + "\n")
