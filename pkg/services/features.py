"""
Feature Service — STFT / log-mel front end and embedding pooling

Two named presets reproduce the encoder input shapes:
  - ASR_PRESET:        400-sample Hann window, hop 160, 80 mels  -> 80 x 3000 for 30 s
  - SOUNDSCAPE_PRESET: 2048-sample Hann window, hop 512, 128 mels -> 128 x 251 for 8 s

Frames are reflect-centred, giving floor(N / hop) + 1 frames; the ASR preset
drops the final frame so a 30 s clip yields exactly 3000 columns.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import librosa
import numpy as np

from core.binary import read_framed, write_framed
from core.config import POOL_SIZE, SAMPLE_RATE_HZ
from core.errors import ConfigError, EmptySignalError, SampleRateMismatchError, ShapeMismatchError
from services.synthesis import Waveform

logger = logging.getLogger(__name__)

MATRIX_MAGIC = b"OTML"
_MATRIX_HEADER_FMT = "<4sII"
_MATRIX_HEADER_SIZE = struct.calcsize(_MATRIX_HEADER_FMT)


@dataclass(frozen=True)
class MelConfig:
    win_length: int
    hop_length: int
    n_fft: int
    n_mels: int
    sample_rate_hz: int = SAMPLE_RATE_HZ
    eps: float = 1e-10
    f_min: float = 0.0
    f_max: float = 8000.0
    drop_last_frame: bool = False
    name: str = "custom"

    def __post_init__(self):
        if not 1 <= self.hop_length <= self.win_length <= self.n_fft:
            raise ConfigError(
                f"Need hop <= win <= n_fft, got hop={self.hop_length} win={self.win_length} n_fft={self.n_fft}")
        if self.n_mels < 1:
            raise ConfigError(f"n_mels must be >= 1, got {self.n_mels}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate_hz / 2:
            raise ConfigError(
                f"Invalid mel band [{self.f_min}, {self.f_max}] for {self.sample_rate_hz} Hz")

    def n_frames(self, n_samples: int) -> int:
        frames = n_samples // self.hop_length + 1
        return frames - 1 if self.drop_last_frame else frames


ASR_PRESET = MelConfig(win_length=400, hop_length=160, n_fft=400, n_mels=80,
                       drop_last_frame=True, name="asr")
SOUNDSCAPE_PRESET = MelConfig(win_length=2048, hop_length=512, n_fft=2048, n_mels=128,
                              name="soundscape")
PRESETS = {"asr": ASR_PRESET, "soundscape": SOUNDSCAPE_PRESET}


def preset(name: str) -> MelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"Unknown feature preset {name!r}; expected one of {sorted(PRESETS)}")


@dataclass
class MelSpectrogram:
    values: np.ndarray
    config: MelConfig

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def _check_input(w: Waveform, cfg: MelConfig) -> None:
    if w.sample_rate_hz != cfg.sample_rate_hz:
        raise SampleRateMismatchError(
            f"Waveform at {w.sample_rate_hz} Hz, features configured for {cfg.sample_rate_hz} Hz")
    if len(w) == 0:
        raise EmptySignalError("Cannot compute features of an empty waveform")


def stft(w: Waveform, cfg: MelConfig) -> np.ndarray:
    """Hann-windowed, reflect-centred STFT, shape [n_fft/2+1 x n_frames]."""
    _check_input(w, cfg)
    spec = librosa.stft(w.samples, n_fft=cfg.n_fft, hop_length=cfg.hop_length,
                        win_length=cfg.win_length, window="hann", center=True, pad_mode="reflect")
    if cfg.drop_last_frame:
        spec = spec[:, :-1]
    return spec


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """
    Triangular (Slaney) mel filters, shape [n_mels x n_fft/2+1].

    Bins in [f_min, f_max] that fall on a triangle foot (DC and f_max with the
    default band) join the filter with the nearest centre, at that filter's
    smallest non-zero weight, so every in-band bin reaches the log-mel.
    """
    fb = librosa.filters.mel(sr=cfg.sample_rate_hz, n_fft=cfg.n_fft, n_mels=cfg.n_mels,
                             fmin=cfg.f_min, fmax=cfg.f_max, dtype=np.float64)
    freqs = librosa.fft_frequencies(sr=cfg.sample_rate_hz, n_fft=cfg.n_fft)
    centres = librosa.mel_frequencies(n_mels=cfg.n_mels + 2, fmin=cfg.f_min, fmax=cfg.f_max)[1:-1]
    live = np.flatnonzero(fb.sum(axis=1) > 0)
    if live.size == 0:
        raise ConfigError(f"n_fft={cfg.n_fft} is too coarse for {cfg.n_mels} mel bands")
    in_band = (freqs >= cfg.f_min) & (freqs <= cfg.f_max)
    for k in np.flatnonzero(in_band & (fb.sum(axis=0) == 0)):
        j = live[np.argmin(np.abs(centres[live] - freqs[k]))]
        fb[j, k] = fb[j][fb[j] > 0].min()
    return fb


def log_mel(w: Waveform, cfg: MelConfig) -> MelSpectrogram:
    power = np.abs(stft(w, cfg)) ** 2
    values = np.log(mel_filterbank(cfg) @ power + cfg.eps)
    return MelSpectrogram(values, cfg)


def adaptive_avg_pool(m: np.ndarray, pool_size: int = POOL_SIZE) -> np.ndarray:
    """
    Pools [T x D] to [pool_size x D] with contiguous span means.

    When T >= pool_size the spans floor(i*T/P)..floor((i+1)*T/P) partition the
    rows; otherwise each output uses floor(i*T/P)..ceil((i+1)*T/P) (spans repeat).
    """
    if pool_size < 1:
        raise ConfigError(f"pool_size must be >= 1, got {pool_size}")
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ShapeMismatchError(f"Expected a non-empty [T x D] matrix, got {m.shape}")
    t = m.shape[0]
    idx = np.arange(pool_size)
    starts = (idx * t) // pool_size
    if t >= pool_size:
        ends = ((idx + 1) * t) // pool_size
    else:
        ends = -((-(idx + 1) * t) // pool_size)
    return np.stack([m[s:e].mean(axis=0) for s, e in zip(starts, ends)])


# ──────────────────────────────────────────────
# OTML matrix files
# ──────────────────────────────────────────────

def save_matrix(matrix: np.ndarray, path: Path) -> Path:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ShapeMismatchError(f"Only 2-D matrices can be stored, got {matrix.shape}")
    rows, cols = matrix.shape
    payload = struct.pack(_MATRIX_HEADER_FMT, MATRIX_MAGIC, rows, cols)
    payload += np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    write_framed(Path(path), payload)
    logger.debug(f"Saved {rows}x{cols} matrix to {path}")
    return Path(path)


def load_matrix(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) >= _MATRIX_HEADER_SIZE:
        _, rows, cols = struct.unpack(_MATRIX_HEADER_FMT, data[:_MATRIX_HEADER_SIZE])
        expected = _MATRIX_HEADER_SIZE + rows * cols * 4
    else:
        rows = cols = 0
        expected = _MATRIX_HEADER_SIZE
    payload = read_framed(path, MATRIX_MAGIC, expected)
    return np.frombuffer(payload[_MATRIX_HEADER_SIZE:], dtype="<f4").reshape(rows, cols).astype(np.float32)
