"""Manifest handling, the synthetic parallel toy corpus, and waveform splitting.

The toy task is a symbol-level bijection: every source utterance is a sequence
of spoken syllable symbols, and its translation is the mapped symbol sequence.
Translation quality therefore has an exact oracle. Each synthetic speaker is a
harmonic source (controllable F0) shaped by speaker formants and a spectral
tilt; each symbol perturbs the formants in a deterministic, symbol-specific
way so frames cluster by symbol.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .audio import Waveform, write_wav
from .errors import InvalidConfigError, InvalidInputError, ManifestError, SkipUtterance

REQUIRED_FIELDS = ("id", "wav_path", "rate", "speaker_id", "transcript", "language")


@dataclass
class Utterance:
    """One corpus record; `extras` preserves unknown manifest fields."""

    id: str
    wav_path: str
    rate: int
    speaker_id: str
    transcript: list[str]
    language: str
    pair_id: str | None = None
    extras: dict = field(default_factory=dict)

    def to_row(self) -> dict:
        row = {
            "id": self.id,
            "wav_path": self.wav_path,
            "rate": self.rate,
            "speaker_id": self.speaker_id,
            "transcript": list(self.transcript),
            "language": self.language,
        }
        if self.pair_id is not None:
            row["pair_id"] = self.pair_id
        row.update(self.extras)
        return row

    @classmethod
    def from_row(cls, row: dict) -> "Utterance":
        missing = [k for k in REQUIRED_FIELDS if k not in row]
        if missing:
            raise InvalidInputError(f"missing fields {missing}")
        known = {k: row[k] for k in REQUIRED_FIELDS}
        known["transcript"] = list(known["transcript"])
        extras = {k: v for k, v in row.items() if k not in REQUIRED_FIELDS and k != "pair_id"}
        return cls(pair_id=row.get("pair_id"), extras=extras, **known)


@dataclass
class ParallelPair:
    source: Utterance
    target: Utterance
    pair_id: str

    def __post_init__(self):
        if self.source.language == self.target.language:
            raise InvalidInputError(
                f"pair {self.pair_id}: source and target share language {self.source.language}"
            )


@dataclass
class SpeakerParams:
    """Synthetic voice: pitch base/jitter, three formants, spectral tilt."""

    f0_base: float
    f0_jitter: float = 0.02
    formants: tuple[float, float, float] = (700.0, 1200.0, 2600.0)
    tilt: float = -6.0  # dB per octave

    def __post_init__(self):
        if not (60.0 <= self.f0_base <= 400.0):
            raise InvalidConfigError(f"f0_base must be in [60, 400], got {self.f0_base}")
        if not (self.formants[0] < self.formants[1] < self.formants[2]):
            raise InvalidConfigError(f"formants must be strictly increasing, got {self.formants}")


DEFAULT_VOCAB_SRC = ("ba", "de", "gi", "ko", "lu", "me", "na", "po", "ri", "su", "ta", "vo")
DEFAULT_VOCAB_TGT = ("zu", "wa", "ne", "fo", "hi", "ka", "pe", "ro", "si", "tu", "va", "yo")


@dataclass
class ToyCorpusSpec:
    """Recipe for one reproducible toy corpus (pure function of its fields)."""

    n_speakers: int = 20
    n_pairs: int = 200
    dev_pairs: int = 20
    test_pairs: int = 20
    vocab_src: tuple[str, ...] = DEFAULT_VOCAB_SRC
    vocab_tgt: tuple[str, ...] = DEFAULT_VOCAB_TGT
    mapping: dict[str, str] | None = None  # None: seeded bijection
    symbols_per_utt: tuple[int, int] = (6, 10)
    symbol_dur: tuple[float, float] = (0.16, 0.22)  # seconds
    seed: int = 0
    rate: int = 16000
    source_language: str = "src"
    target_language: str = "tgt"

    def __post_init__(self):
        if len(self.vocab_src) != len(self.vocab_tgt):
            raise InvalidConfigError("vocab_src and vocab_tgt must have equal size")
        if len(set(self.vocab_src)) != len(self.vocab_src):
            raise InvalidConfigError("vocab_src has duplicate symbols")
        if len(set(self.vocab_tgt)) != len(self.vocab_tgt):
            raise InvalidConfigError("vocab_tgt has duplicate symbols")
        if self.n_speakers < 2:
            raise InvalidConfigError("toy corpus needs at least 2 speakers for speaker contrast")
        if self.mapping is not None:
            if sorted(self.mapping) != sorted(self.vocab_src) or sorted(
                self.mapping.values()
            ) != sorted(self.vocab_tgt):
                raise InvalidConfigError("mapping must be a bijection vocab_src -> vocab_tgt")

    def resolved_mapping(self) -> dict[str, str]:
        if self.mapping is not None:
            return dict(self.mapping)
        rng = np.random.default_rng(self.seed + 0x5A11AD)
        tgt = list(self.vocab_tgt)
        rng.shuffle(tgt)
        return dict(zip(self.vocab_src, tgt))


# three-level grid of formant multipliers, ordered so small vocabularies get
# maximally separated timbres (corners first); mixtures of two symbols land
# off-grid, which keeps transition frames from imitating a third symbol
_TIMBRE_GRID = [
    (0.70, 0.70, 0.70), (1.40, 1.40, 1.40), (0.70, 1.40, 1.40), (1.40, 0.70, 0.70),
    (1.40, 0.70, 1.40), (0.70, 1.40, 0.70), (1.40, 1.40, 0.70), (0.70, 0.70, 1.40),
    (1.05, 1.05, 0.70), (0.70, 1.05, 1.05), (1.05, 0.70, 1.05), (1.05, 1.05, 1.40),
    (1.40, 1.05, 1.05), (1.05, 1.40, 1.05), (0.70, 1.05, 0.70), (1.05, 0.70, 0.70),
    (0.70, 0.70, 1.05), (1.40, 1.40, 1.05), (1.05, 1.40, 1.40), (1.40, 1.05, 1.40),
    (0.70, 1.40, 1.05), (1.40, 0.70, 1.05), (1.05, 0.70, 1.40), (1.05, 1.40, 0.70),
    (0.70, 1.05, 1.40), (1.40, 1.05, 0.70), (1.05, 1.05, 1.05),
]


def _symbol_timbre(symbol: str, index: int | None = None) -> np.ndarray:
    """Formant multipliers for one symbol.

    With a vocabulary index (corpus generation) the multipliers come from the
    separated grid above; without one they fall back to a string hash.
    """
    if index is not None:
        return np.asarray(_TIMBRE_GRID[index % len(_TIMBRE_GRID)])
    h = zlib.crc32(symbol.encode("utf-8"))
    rng = np.random.default_rng(h)
    return rng.uniform(0.65, 1.45, size=3)


FRAME_SECONDS = 0.020  # the pipeline-wide analysis stride


def _symbol_duration(symbol: str, index: int | None, symbol_dur: tuple[float, float]) -> float:
    """Deterministic per-symbol duration, a whole number of 20 ms frames.

    Fixed per-symbol durations keep unit run lengths predictable, and
    frame-aligned segment boundaries keep every rendition of a symbol on the
    same analysis grid, so its frames (hence units) repeat exactly across
    utterances. Golden-ratio spacing spreads the vocabulary over the range.
    """
    if index is not None:
        frac = (index * 0.618034) % 1.0
    else:
        frac = (zlib.crc32(symbol.encode("utf-8")) % 1000) / 999.0
    lo = max(1, round(symbol_dur[0] / FRAME_SECONDS))
    hi = max(lo, round(symbol_dur[1] / FRAME_SECONDS))
    frames = lo + int(frac * (hi - lo + 1) * 0.999999)
    return frames * FRAME_SECONDS


def synthesize_symbol_speech(
    symbols: list[str],
    sp: SpeakerParams,
    seed: int,
    vocab: tuple[str, ...] | None = None,
    rate: int = 16000,
    symbol_dur: tuple[float, float] = (0.16, 0.22),
) -> Waveform:
    """Render a symbol sequence as speech-like audio for one synthetic speaker.

    Each symbol becomes a harmonic segment at the speaker's (jittered) F0,
    filtered by the speaker formants scaled by the symbol's own multipliers.
    Bit-identical output for identical (symbols, sp, seed).
    """
    w, _ = synthesize_symbol_segments(symbols, sp, seed, vocab=vocab, rate=rate,
                                      symbol_dur=symbol_dur)
    return w


def synthesize_symbol_segments(
    symbols: list[str],
    sp: SpeakerParams,
    seed: int,
    vocab: tuple[str, ...] | None = None,
    rate: int = 16000,
    symbol_dur: tuple[float, float] = (0.16, 0.22),
) -> tuple[Waveform, list[tuple[int, int]]]:
    """As synthesize_symbol_speech, also returning per-symbol sample spans
    [start, end) — the exact alignments used for transcription calibration."""
    if len(symbols) == 0:
        raise InvalidInputError("cannot synthesize an empty symbol sequence")
    if vocab is not None:
        unknown = [s for s in symbols if s not in vocab]
        if unknown:
            raise InvalidInputError(f"symbols not in vocabulary: {unknown}")
    rng = np.random.default_rng(seed)
    index_of = {s: i for i, s in enumerate(vocab)} if vocab is not None else {}
    segments = []
    for symbol in symbols:
        dur = _symbol_duration(symbol, index_of.get(symbol), symbol_dur)
        f0 = sp.f0_base * (1.0 + sp.f0_jitter * rng.uniform(-1.0, 1.0))
        n = int(round(dur * rate))
        t = np.arange(n) / rate
        formants = np.asarray(sp.formants) * _symbol_timbre(symbol, index_of.get(symbol))
        bandwidths = np.array([90.0, 120.0, 170.0])
        gains = np.array([1.0, 0.7, 0.45])
        x = np.zeros(n)
        h = 1
        while h * f0 < 0.475 * rate:
            fh = h * f0
            resonance = float(np.sum(gains / (1.0 + ((fh - formants) / bandwidths) ** 2)))
            tilt_gain = 10.0 ** (sp.tilt * np.log2(h) / 20.0)
            x += (0.08 + resonance) * tilt_gain * np.sin(2.0 * np.pi * fh * t)
            h += 1
        fade = min(int(0.005 * rate), n // 4)
        if fade > 0:
            ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
            x[:fade] *= ramp
            x[-fade:] *= ramp[::-1]
        # per-segment normalization: a symbol's audio must not depend on which
        # other symbols happen to share the utterance
        peak = float(np.max(np.abs(x)))
        if peak > 0:
            x = 0.45 * x / peak
        segments.append(x)
    out = np.concatenate(segments)
    spans = []
    offset = 0
    for seg in segments:
        spans.append((offset, offset + len(seg)))
        offset += len(seg)
    return Waveform(samples=out, rate=rate), spans


def split_halves(w: Waveform, min_seconds: float = 1.0) -> tuple[Waveform, Waveform]:
    """Split at the sample midpoint; signals shorter than min_seconds are skipped."""
    n = len(w.samples)
    if n < min_seconds * w.rate:
        raise SkipUtterance(f"{n / w.rate:.3f}s is shorter than the {min_seconds}s split minimum")
    mid = n // 2
    return (
        Waveform(samples=w.samples[:mid].copy(), rate=w.rate),
        Waveform(samples=w.samples[mid:].copy(), rate=w.rate),
    )


def save_manifest(rows: list[Utterance], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for u in rows:
            f.write(json.dumps(u.to_row(), sort_keys=True) + "\n")


def load_manifest(path: str | Path, require_audio: bool = False) -> list[Utterance]:
    """Parse a JSONL manifest; errors carry the 1-based offending line number."""
    path = Path(path)
    rows: list[Utterance] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(line_no, f"invalid JSON ({e.msg})") from None
            try:
                u = Utterance.from_row(raw)
            except InvalidInputError as e:
                raise ManifestError(line_no, str(e)) from None
            if u.id in seen:
                raise ManifestError(line_no, f"duplicate utterance id {u.id!r}")
            seen.add(u.id)
            if require_audio and not Path(u.wav_path).exists():
                raise ManifestError(line_no, f"missing audio file {u.wav_path}")
            rows.append(u)
    return rows


def load_pairs(src_manifest: str | Path, tgt_manifest: str | Path) -> list[ParallelPair]:
    """Zip a source-side and a target-side manifest on pair_id."""
    sources = load_manifest(src_manifest)
    targets = {u.pair_id: u for u in load_manifest(tgt_manifest)}
    pairs = []
    for s in sources:
        if s.pair_id is None or s.pair_id not in targets:
            raise InvalidInputError(f"source utterance {s.id} has no target for pair {s.pair_id}")
        pairs.append(ParallelPair(source=s, target=targets[s.pair_id], pair_id=s.pair_id))
    return pairs


REFERENCE_SPEAKER_ID = "ref"


def reference_speaker() -> SpeakerParams:
    """Fixed single voice for C-style targets.

    Zero jitter: reference renditions of a symbol are bit-identical across
    utterances, so target unit sequences are deterministic given the symbols.
    """
    return SpeakerParams(f0_base=170.0, f0_jitter=0.0, formants=(700.0, 1200.0, 2600.0), tilt=-6.0)


def sample_speakers(spec: ToyCorpusSpec) -> dict[str, SpeakerParams]:
    """Deterministic speaker inventory spread over pitch and timbre."""
    rng = np.random.default_rng(spec.seed + 0x5EA4E2)
    speakers = {}
    f0s = np.geomspace(100.0, 300.0, spec.n_speakers)
    for i in range(spec.n_speakers):
        mult = rng.uniform(0.85, 1.15, size=3)
        base = np.array([700.0, 1200.0, 2600.0]) * mult
        base.sort()
        speakers[f"spk{i:02d}"] = SpeakerParams(
            f0_base=float(f0s[i] * rng.uniform(0.97, 1.03)),
            f0_jitter=0.02,
            formants=(float(base[0]), float(base[1]), float(base[2])),
            tilt=float(rng.uniform(-9.0, -3.0)),
        )
    return speakers


def generate_toy_corpus(spec: ToyCorpusSpec, out_dir: str | Path) -> dict[str, Path]:
    """Generate audio and manifests for train/dev/test splits.

    Per pair: a source utterance spoken by a sampled speaker, a C-style target
    (mapped symbols, fixed reference voice) and a T-style target (mapped
    symbols, the source speaker's voice). Returns manifest paths keyed by
    '<split>_src', '<split>_tgt_c', '<split>_tgt_t'.
    """
    out_dir = Path(out_dir)
    speakers = sample_speakers(spec)
    speaker_ids = sorted(speakers)
    mapping = spec.resolved_mapping()
    ref = reference_speaker()
    rng = np.random.default_rng(spec.seed)
    manifests: dict[str, Path] = {}

    split_sizes = {"train": spec.n_pairs, "dev": spec.dev_pairs, "test": spec.test_pairs}
    for split, n in split_sizes.items():
        src_rows, tgt_c_rows, tgt_t_rows = [], [], []
        wav_dir = out_dir / "corpus" / split
        for i in range(n):
            pair_id = f"{split}_{i:05d}"
            speaker_id = speaker_ids[int(rng.integers(len(speaker_ids)))]
            n_symbols = int(rng.integers(spec.symbols_per_utt[0], spec.symbols_per_utt[1] + 1))
            symbols: list[str] = []
            for _ in range(n_symbols):
                choices = [s for s in spec.vocab_src if not symbols or s != symbols[-1]]
                symbols.append(choices[int(rng.integers(len(choices)))])
            tgt_symbols = [mapping[s] for s in symbols]
            seeds = rng.integers(0, 2**31 - 1, size=3)

            def _emit(suffix, syms, speaker_key, params, vocab, language, seed, rows):
                utt_id = f"{pair_id}_{suffix}"
                wav_path = wav_dir / f"{utt_id}.wav"
                w, spans = synthesize_symbol_segments(
                    syms, params, int(seed), vocab=vocab, rate=spec.rate,
                    symbol_dur=spec.symbol_dur,
                )
                write_wav(wav_path, w)
                rows.append(
                    Utterance(
                        id=utt_id, wav_path=str(wav_path), rate=spec.rate,
                        speaker_id=speaker_key, transcript=list(syms),
                        language=language, pair_id=pair_id,
                        extras={"symbol_spans": [[int(a), int(b)] for a, b in spans]},
                    )
                )

            _emit("src", symbols, speaker_id, speakers[speaker_id], spec.vocab_src,
                  spec.source_language, seeds[0], src_rows)
            _emit("tgtc", tgt_symbols, REFERENCE_SPEAKER_ID, ref, spec.vocab_tgt,
                  spec.target_language, seeds[1], tgt_c_rows)
            _emit("tgtt", tgt_symbols, speaker_id, speakers[speaker_id], spec.vocab_tgt,
                  spec.target_language, seeds[2], tgt_t_rows)

        for tag, rows in (("src", src_rows), ("tgt_c", tgt_c_rows), ("tgt_t", tgt_t_rows)):
            manifest_path = out_dir / "manifests" / f"{split}_{tag}.jsonl"
            save_manifest(rows, manifest_path)
            manifests[f"{split}_{tag}"] = manifest_path

    meta = {
        "spec": {**asdict(spec), "mapping": mapping},
        "speakers": {k: asdict(v) for k, v in speakers.items()},
        "reference_speaker": asdict(ref),
    }
    meta_path = out_dir / "manifests" / "corpus_meta.json"
    with open(meta_path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    manifests["meta"] = meta_path
    return manifests
