"""Log-mel spectrogram features and audio/feature file IO."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import InputError

LOG_FLOOR = 1e-5


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    n_fft: int = 2048
    hop_length: int = 320
    fmin: float = 20.0
    fmax: float = 7600.0
    n_mels: int = 512
    log_floor: float = LOG_FLOOR

    @property
    def hop_seconds(self) -> float:
        return self.hop_length / self.sample_rate


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not self.sample_rate > 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("audio contains non-finite samples")


def resample(audio: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Linear-interpolation resampling; output length is ``round(n * target / source)``."""
    if not target_rate > 0:
        raise InputError(f"target_rate must be positive, got {target_rate}")
    if target_rate == audio.sample_rate:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate)
    n = len(audio.samples)
    if n == 0:
        return AudioBuffer(np.zeros(0), target_rate)
    n_out = int(round(n * target_rate / audio.sample_rate))
    t = np.arange(n_out) * (audio.sample_rate / target_rate)
    src = np.arange(n)
    return AudioBuffer(np.interp(t, src, audio.samples), target_rate)


# ---------------------------------------------------------------------------
# mel filterbank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax) -> np.ndarray:
    """Triangular HTK-scale filters, each scaled to unit area in Hz.

    Returns an ``[n_mels, n_fft // 2 + 1]`` matrix.
    """
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise InputError(f"need 0 <= fmin < fmax <= nyquist, got {fmin}, {fmax}")
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lower) / (center - lower)
    falling = (upper - fft_freqs) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= 2.0 / (upper - lower)
    return weights


def hann_window(n: int) -> np.ndarray:
    # periodic Hann, the usual STFT choice
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Center-padded (reflect) framing; ``len(x) // hop + 1`` frames."""
    pad = n_fft // 2
    mode = "reflect" if len(x) > 1 else "constant"
    padded = np.pad(x, pad, mode=mode)
    n_frames = len(x) // hop + 1
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def power_spectrogram(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    frames = frame_signal(x, n_fft, hop) * hann_window(n_fft)
    spec = np.fft.rfft(frames, n=n_fft, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def mel_spectrogram(audio: AudioBuffer, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Log-mel features of shape ``[T, n_mels]`` with ``T = n // hop + 1``."""
    if audio.sample_rate != cfg.sample_rate:
        raise InputError(
            f"audio is {audio.sample_rate} Hz, expected {cfg.sample_rate}; resample first")
    power = power_spectrogram(audio.samples, cfg.n_fft, cfg.hop_length)
    fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    return np.log(power @ fb.T + cfg.log_floor)


class LogMelSpectrogram(TransformerMixin, BaseEstimator):
    """Audio-to-features transformer.

    ``transform`` takes a list of 1-D sample arrays (or ``AudioBuffer``)
    and returns a list of ``[T, n_mels]`` arrays. Plain arrays are assumed
    to be at ``input_rate``.
    """

    def __init__(self, sample_rate=16000, n_fft=2048, hop_length=320, fmin=20.0,
                 fmax=7600.0, n_mels=512, input_rate=None):
        self.sample_rate = sample_rate
        self.n_fft = n_fft
        self.hop_length = hop_length
        self.fmin = fmin
        self.fmax = fmax
        self.n_mels = n_mels
        self.input_rate = input_rate

    def _config(self):
        return FrontendConfig(self.sample_rate, self.n_fft, self.hop_length,
                              self.fmin, self.fmax, self.n_mels)

    def fit(self, X=None, y=None):
        self.filterbank_ = mel_filterbank(self.sample_rate, self.n_fft, self.n_mels,
                                          self.fmin, self.fmax)
        return self

    def transform(self, X):
        cfg = self._config()
        out = []
        for item in X:
            if not isinstance(item, AudioBuffer):
                item = AudioBuffer(item, self.input_rate or self.sample_rate)
            out.append(mel_spectrogram(resample(item, cfg.sample_rate), cfg))
        return out

    def __sklearn_is_fitted__(self):
        return True


# ---------------------------------------------------------------------------
# file formats


def read_wav(path) -> AudioBuffer:
    """Read 16-bit PCM WAV; multichannel files keep the first channel."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getsampwidth() != 2:
                raise InputError(f"{path}: only 16-bit PCM is supported")
            n_ch = w.getnchannels()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise InputError(f"{path}: not a PCM WAV file ({e})") from None
    data = np.frombuffer(raw, dtype="<i2").reshape(-1, n_ch)[:, 0]
    return AudioBuffer(data.astype(np.float64) / 32768.0, rate)


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(audio.sample_rate))
        w.writeframes(pcm.tobytes())


def write_features(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise InputError(f"features must be 2-D, got shape {frames.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", *frames.shape))
        f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise InputError(f"{path}: truncated feature header")
    t, m = struct.unpack_from("<II", raw)
    body = raw[8:]
    if len(body) != 4 * t * m:
        raise InputError(f"{path}: expected {t}x{m} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(t, m).copy()
