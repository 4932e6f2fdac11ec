"""Waveform I/O, log-mel analysis, Griffin-Lim inversion and autocorrelation F0.

All functions here are pure and deterministic: no global state, no RNG.
Frame geometry is shared by every consumer: a signal of N samples always
yields ceil(N / hop) frames (reflect-padded, center-aligned), so mel frames
and discrete units line up 1:1 at the 20 ms stride by construction.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, MissingFileError

DEFAULT_RATE = 16000


@dataclass
class Waveform:
    """Mono audio: float samples in [-1, 1] plus sample rate."""

    samples: np.ndarray
    rate: int = DEFAULT_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInputError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.rate <= 0:
            raise InvalidInputError(f"sample rate must be positive, got {self.rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate


@dataclass(frozen=True)
class MelConfig:
    """Geometry of the log-mel front end (hop 320 = 20 ms at 16 kHz)."""

    n_fft: int = 1024
    hop: int = 320
    win: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if not (0 < self.hop <= self.win <= self.n_fft):
            raise InvalidConfigError(
                f"need 0 < hop <= win <= n_fft, got hop={self.hop} win={self.win} n_fft={self.n_fft}"
            )
        if self.n_mels < 1:
            raise InvalidConfigError(f"n_mels must be >= 1, got {self.n_mels}")
        if not (0 <= self.fmin < self.fmax):
            raise InvalidConfigError(f"need 0 <= fmin < fmax, got fmin={self.fmin} fmax={self.fmax}")
        if self.log_floor <= 0:
            raise InvalidConfigError("log_floor must be positive")


@dataclass
class MelSpectrogram:
    """Log-amplitude mel frames, shape [T, n_mels]."""

    frames: np.ndarray
    hop_seconds: float = 0.020

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise InvalidInputError(f"mel frames must be 2-D, got shape {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_edges_hz(cfg: MelConfig) -> np.ndarray:
    """The n_mels + 2 corner frequencies of the triangular filters."""
    mels = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(cfg: MelConfig, rate: int) -> np.ndarray:
    """Unit-height triangular mel filters sampled at the rFFT bin grid.

    Returns [n_mels, n_fft // 2 + 1]. Peak response of each filter is 1, so
    the argmax band for a pure tone is the filter whose center is nearest in
    mel scale.
    """
    if cfg.fmax > rate / 2:
        raise InvalidConfigError(f"fmax={cfg.fmax} above Nyquist for rate {rate}")
    edges = mel_filter_edges_hz(cfg)
    bins_hz = np.arange(cfg.n_fft // 2 + 1) * (rate / cfg.n_fft)
    fb = np.zeros((cfg.n_mels, len(bins_hz)))
    for j in range(cfg.n_mels):
        lo, center, hi = edges[j], edges[j + 1], edges[j + 2]
        rising = (bins_hz - lo) / max(center - lo, 1e-12)
        falling = (hi - bins_hz) / max(hi - center, 1e-12)
        fb[j] = np.clip(np.minimum(rising, falling), 0.0, 1.0)
    return fb


def _reflect_indices(n: int, start: int, stop: int) -> np.ndarray:
    """Indices implementing reflect padding (no edge repeat) for any n >= 1."""
    idx = np.arange(start, stop)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx < n, idx, period - idx)


def frame_count(n_samples: int, hop: int) -> int:
    return int(np.ceil(n_samples / hop))


def _frame_signal(x: np.ndarray, frame_len: int, hop: int, n_frames: int) -> np.ndarray:
    """Center-aligned frames [n_frames, frame_len]; frame t is centered at t*hop."""
    half = frame_len // 2
    start = -half
    stop = (n_frames - 1) * hop - half + frame_len
    padded = x[_reflect_indices(len(x), start, stop)]
    offsets = np.arange(n_frames) * hop
    return padded[offsets[:, None] + np.arange(frame_len)[None, :]]


def _window(cfg: MelConfig) -> np.ndarray:
    # periodic Hann, zero-padded to n_fft if win < n_fft
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(cfg.win) / cfg.win)
    if cfg.win < cfg.n_fft:
        pad = cfg.n_fft - cfg.win
        w = np.pad(w, (pad // 2, pad - pad // 2))
    return w


def stft_magnitude(w: Waveform, cfg: MelConfig) -> np.ndarray:
    """Linear magnitude spectrogram [T, n_fft//2 + 1] with T = ceil(N/hop)."""
    if len(w.samples) == 0:
        raise InvalidInputError("empty waveform")
    if not np.all(np.isfinite(w.samples)):
        raise InvalidInputError("waveform contains non-finite samples")
    n_frames = frame_count(len(w.samples), cfg.hop)
    frames = _frame_signal(w.samples, cfg.n_fft, cfg.hop, n_frames)
    return np.abs(np.fft.rfft(frames * _window(cfg), axis=1))


def mel_spectrogram(w: Waveform, cfg: MelConfig | None = None) -> MelSpectrogram:
    """Natural-log mel magnitudes floored at cfg.log_floor, shape [ceil(N/hop), n_mels]."""
    cfg = cfg or MelConfig()
    spec = stft_magnitude(w, cfg)
    mel = spec @ mel_filterbank(cfg, w.rate).T
    frames = np.log(np.maximum(mel, cfg.log_floor))
    return MelSpectrogram(frames=frames, hop_seconds=cfg.hop / w.rate)


def _istft(spec: np.ndarray, cfg: MelConfig, n_samples: int) -> np.ndarray:
    """Weighted overlap-add inverse of the centered STFT; returns n_samples samples."""
    n_frames = spec.shape[0]
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1)
    win = _window(cfg)
    half = cfg.n_fft // 2
    total = (n_frames - 1) * cfg.hop + cfg.n_fft
    num = np.zeros(total)
    den = np.zeros(total)
    for t in range(n_frames):
        sl = slice(t * cfg.hop, t * cfg.hop + cfg.n_fft)
        num[sl] += frames[t] * win
        den[sl] += win * win
    out = num / np.maximum(den, 1e-10)
    return out[half : half + n_samples]


def griffin_lim(m: MelSpectrogram, cfg: MelConfig | None = None, iters: int = 60,
                rate: int = DEFAULT_RATE) -> Waveform:
    """Invert a log-mel spectrogram to a waveform of exactly T * hop samples.

    The linear spectrogram is seeded from the pseudo-inverse of the mel
    filterbank; each iteration re-estimates phase from the current signal and
    rescales bin magnitudes so the mel projection keeps matching the input.
    Deterministic (zero initial phase).
    """
    cfg = cfg or MelConfig()
    if iters < 1:
        raise InvalidInputError(f"iters must be >= 1, got {iters}")
    if m.n_mels != cfg.n_mels:
        raise InvalidInputError(f"mel has {m.n_mels} bands, config expects {cfg.n_mels}")
    fb = mel_filterbank(cfg, rate)
    mel_mag = np.exp(m.frames)  # [T, n_mels]
    n_samples = m.n_frames * cfg.hop

    # distribute per-band corrections over the bins each filter covers
    col = fb.sum(axis=0)
    spread = fb / np.maximum(col, 1e-10)[None, :]

    mag = np.clip(mel_mag @ np.linalg.pinv(fb).T, 0.0, None)  # [T, n_bins]
    spec = mag.astype(np.complex128)
    x = _istft(spec, cfg, n_samples)
    for _ in range(iters):
        est = np.fft.rfft(_frame_signal(x, cfg.n_fft, cfg.hop, m.n_frames) * _window(cfg), axis=1)
        est_mag = np.abs(est)
        phase = np.where(est_mag > 0, est / np.maximum(est_mag, 1e-30), 1.0)
        ratio = mel_mag / np.maximum(est_mag @ fb.T, 1e-10)  # [T, n_mels]
        mag = est_mag * (ratio @ spread)
        x = _istft(mag * phase, cfg, n_samples)
    return Waveform(samples=np.clip(x, -1.0, 1.0), rate=rate)


def f0_autocorr(w: Waveform, frame_seconds: float = 0.040, hop_seconds: float = 0.020,
                fmin: float = 60.0, fmax: float = 400.0,
                voicing_threshold: float = 0.5) -> np.ndarray:
    """Per-frame F0 in Hz via biased autocorrelation; unvoiced frames are NaN.

    Frames are centered at t * hop like the mel front end, so the contour
    overlays mel frames index-for-index. Peak lag is refined by parabolic
    interpolation.
    """
    if not (fmin < fmax < w.rate / 2):
        raise InvalidConfigError(f"need fmin < fmax < rate/2, got {fmin}, {fmax}, rate {w.rate}")
    frame_len = int(round(frame_seconds * w.rate))
    if frame_len < 2 * w.rate / fmin:
        raise InvalidConfigError(
            f"frame of {frame_len} samples holds fewer than two periods at fmin={fmin} Hz"
        )
    if len(w.samples) == 0:
        raise InvalidInputError("empty waveform")
    hop = int(round(hop_seconds * w.rate))
    n_frames = frame_count(len(w.samples), hop)
    frames = _frame_signal(w.samples, frame_len, hop, n_frames)
    frames = frames - frames.mean(axis=1, keepdims=True)

    lag_min = max(int(np.floor(w.rate / fmax)), 1)
    lag_max = min(int(np.ceil(w.rate / fmin)), frame_len - 2)
    out = np.full(n_frames, np.nan)
    for t in range(n_frames):
        x = frames[t]
        r0 = float(np.dot(x, x))
        if r0 < 1e-12:
            continue
        # biased autocorrelation: later multiples of the period score lower
        full = np.correlate(x, x, mode="full")[frame_len - 1 :]
        r = full / r0
        seg = r[lag_min : lag_max + 1]
        k = int(np.argmax(seg)) + lag_min
        if r[k] < voicing_threshold:
            continue
        lag = float(k)
        if 1 <= k < len(r) - 1:
            denom = r[k - 1] - 2.0 * r[k] + r[k + 1]
            if abs(denom) > 1e-12:
                delta = 0.5 * (r[k - 1] - r[k + 1]) / denom
                lag = k + float(np.clip(delta, -0.5, 0.5))
        out[t] = w.rate / lag
    return out


def read_wav(path: str | Path) -> Waveform:
    """Read mono 16-bit PCM WAV into floats in [-1, 1]."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(str(path))
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise InvalidInputError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise InvalidInputError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, rate=rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.rate)
        f.writeframes(pcm.tobytes())


def write_mel(path: str | Path, m: MelSpectrogram) -> None:
    """Binary mel file: uint32 T, uint32 n_mels, then T*n_mels little-endian f32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack("<II", m.n_frames, m.n_mels))
        f.write(m.frames.astype("<f4").tobytes())


def read_mel(path: str | Path) -> MelSpectrogram:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(str(path))
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) != 8:
            raise InvalidInputError(f"{path}: truncated mel header")
        t, n_mels = struct.unpack("<II", header)
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != t * n_mels:
        raise InvalidInputError(f"{path}: expected {t * n_mels} values, found {data.size}")
    return MelSpectrogram(frames=data.reshape(t, n_mels).astype(np.float64))
