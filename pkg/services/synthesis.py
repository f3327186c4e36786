"""
Synthesis Service — signal operations behind the spatial speech datasets

Resampling, convolution with the direction bank, multi-speaker mixing,
energy normalization, duration fitting and noise / room augmentation, plus
the ClipRecord ground-truth type written to dataset manifests.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal

from core.config import MAX_SPEAKERS, MIN_SEPARATION_DEG, NUM_ANGLES, SAMPLE_RATE_HZ, TARGET_ENERGY
from core.errors import (ConfigError, CountMismatchError, EmptySignalError,
                         MissingFieldError, SampleRateMismatchError, SeparationError, SilentSignalError,
                         ValidationError)
from core.utils import check_angle, min_pairwise_separation

from services.impulse_bank import ImpulseBank

logger = logging.getLogger(__name__)


@dataclass
class Waveform:
    """Mono signal. Zero-length waveforms are allowed as placeholders only."""
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValidationError(f"Waveform must be mono (1-D), got shape {self.samples.shape}")
        if self.sample_rate_hz <= 0:
            raise ConfigError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("Waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    @property
    def energy(self) -> float:
        return float(np.sum(self.samples ** 2))


@dataclass
class SourceSpec:
    source_id: str
    transcript: str
    doa_deg: int
    gain: float = 1.0

    def validate(self) -> "SourceSpec":
        check_angle(self.doa_deg)
        if not self.gain > 0:
            raise ValidationError(f"Source {self.source_id}: gain must be > 0, got {self.gain}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {"source_id": self.source_id, "transcript": self.transcript,
                "doa_deg": int(self.doa_deg), "gain": float(self.gain)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SourceSpec":
        missing = [k for k in ("source_id", "transcript", "doa_deg") if k not in data]
        if missing:
            raise MissingFieldError(f"Source entry missing fields: {missing}")
        return cls(str(data["source_id"]), str(data["transcript"]), int(data["doa_deg"]),
                   float(data.get("gain", 1.0)))


@dataclass
class ClipRecord:
    """Ground truth for one generated clip (one manifest line)."""
    clip_id: str
    clip_path: str
    duration_s: float
    n_speakers: int
    doas_deg: List[int]
    sources: List[SourceSpec]
    augmentation: Dict[str, Any] = field(default_factory=lambda: {"snr_db": None, "rir_id": None})
    seed: int = 0
    sample_rate_hz: int = SAMPLE_RATE_HZ
    sha256: Optional[str] = None
    reference_path: Optional[str] = None

    def validate(self) -> "ClipRecord":
        if not 1 <= self.n_speakers <= MAX_SPEAKERS:
            raise CountMismatchError(f"{self.clip_id}: n_speakers {self.n_speakers} outside 1..{MAX_SPEAKERS}")
        if not self.n_speakers == len(self.doas_deg) == len(self.sources):
            raise CountMismatchError(
                f"{self.clip_id}: n_speakers={self.n_speakers}, {len(self.doas_deg)} DoAs, "
                f"{len(self.sources)} sources")
        for doa in self.doas_deg:
            check_angle(doa)
        if any(b <= a for a, b in zip(self.doas_deg, self.doas_deg[1:])):
            raise ValidationError(f"{self.clip_id}: DoAs not strictly ascending: {self.doas_deg}")
        if self.n_speakers > 1 and min_pairwise_separation(self.doas_deg) < MIN_SEPARATION_DEG:
            raise SeparationError(
                f"{self.clip_id}: DoAs {self.doas_deg} closer than {MIN_SEPARATION_DEG} deg")
        if sorted(s.doa_deg for s in self.sources) != list(self.doas_deg):
            raise ValidationError(f"{self.clip_id}: source DoAs do not match doas_deg")
        for source in self.sources:
            source.validate()
        if not self.duration_s > 0:
            raise ValidationError(f"{self.clip_id}: duration_s must be positive")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValidationError(f"{self.clip_id}: seed is not a u64")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "clip_id": self.clip_id,
            "clip_path": self.clip_path,
            "duration_s": float(self.duration_s),
            "n_speakers": int(self.n_speakers),
            "doas_deg": [int(d) for d in self.doas_deg],
            "sources": [s.to_dict() for s in self.sources],
            "augmentation": dict(self.augmentation),
            "seed": int(self.seed),
            "sample_rate_hz": int(self.sample_rate_hz),
            "sha256": self.sha256,
            "reference_path": self.reference_path,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ClipRecord":
        required = ("clip_id", "clip_path", "duration_s", "n_speakers", "doas_deg", "sources")
        missing = [k for k in required if k not in data]
        if missing:
            raise MissingFieldError(f"Clip record missing fields: {missing}")
        return cls(
            clip_id=str(data["clip_id"]),
            clip_path=str(data["clip_path"]),
            duration_s=float(data["duration_s"]),
            n_speakers=int(data["n_speakers"]),
            doas_deg=[int(d) for d in data["doas_deg"]],
            sources=[SourceSpec.from_dict(s) for s in data["sources"]],
            augmentation=dict(data.get("augmentation") or {"snr_db": None, "rir_id": None}),
            seed=int(data.get("seed", 0)),
            sample_rate_hz=int(data.get("sample_rate_hz", SAMPLE_RATE_HZ)),
            sha256=data.get("sha256"),
            reference_path=data.get("reference_path"),
        )


# ──────────────────────────────────────────────
# Signal operations
# ──────────────────────────────────────────────

def _require_samples(w: Waveform, what: str = "input") -> None:
    if len(w) == 0:
        raise EmptySignalError(f"Empty {what} waveform")


def resample(w: Waveform, target_hz: int) -> Waveform:
    """Polyphase windowed-sinc resampling to `target_hz`."""
    if target_hz <= 0:
        raise ConfigError(f"target_hz must be positive, got {target_hz}")
    _require_samples(w)
    if w.sample_rate_hz == target_hz:
        return Waveform(w.samples.copy(), target_hz)
    g = math.gcd(int(w.sample_rate_hz), int(target_hz))
    up, down = int(target_hz) // g, int(w.sample_rate_hz) // g
    out = signal.resample_poly(w.samples, up, down)
    logger.debug(f"Resampled {len(w)} samples {w.sample_rate_hz} -> {target_hz} Hz ({out.size} samples)")
    return Waveform(out, target_hz)


def convolve(w: Waveform, ir: Sequence[float]) -> Waveform:
    """Full linear convolution via overlap-add FFT blocks."""
    ir = np.asarray(ir, dtype=np.float64)
    if ir.size == 0:
        raise EmptySignalError("Empty impulse response")
    _require_samples(w)
    return Waveform(signal.oaconvolve(w.samples, ir, mode="full"), w.sample_rate_hz)


def spatialize(w: Waveform, theta_deg, bank: ImpulseBank) -> Waveform:
    theta = check_angle(theta_deg)
    if w.sample_rate_hz != bank.sample_rate_hz:
        raise SampleRateMismatchError(
            f"Waveform at {w.sample_rate_hz} Hz, bank at {bank.sample_rate_hz} Hz")
    out = convolve(w, bank.ir(theta))
    return Waveform(out.samples[:len(w)], w.sample_rate_hz)


def mix(sources: Sequence[Tuple[Waveform, int]], bank: ImpulseBank) -> Waveform:
    """Sums spatialized sources aligned at t=0; length is the longest source."""
    if not 1 <= len(sources) <= MAX_SPEAKERS:
        raise CountMismatchError(f"mix needs 1..{MAX_SPEAKERS} sources, got {len(sources)}")
    angles = [check_angle(theta) for _, theta in sources]
    if len(angles) > 1:
        sep = min_pairwise_separation(angles)
        if sep < MIN_SEPARATION_DEG:
            raise SeparationError(f"Sources at {angles} are {sep:g} deg apart (< {MIN_SEPARATION_DEG})")

    length = max(len(w) for w, _ in sources)
    out = np.zeros(length)
    for w, theta in sources:
        y = spatialize(w, theta, bank).samples
        out[:y.size] += y
    return Waveform(out, bank.sample_rate_hz)


def normalize_energy(w: Waveform, target_energy: float = TARGET_ENERGY) -> Waveform:
    _require_samples(w)
    energy = w.energy
    if energy <= 0:
        raise SilentSignalError("Cannot normalize an all-zero waveform")
    return Waveform(w.samples * np.sqrt(target_energy / energy), w.sample_rate_hz)


def fit_duration(w: Waveform, seconds: float) -> Waveform:
    """Truncates or zero-pads at the end to exactly seconds * sample_rate samples."""
    if not seconds > 0:
        raise ConfigError(f"Duration must be positive, got {seconds}")
    n = int(round(seconds * w.sample_rate_hz))
    out = np.zeros(n)
    keep = min(n, len(w))
    out[:keep] = w.samples[:keep]
    return Waveform(out, w.sample_rate_hz)


def add_noise(w: Waveform, snr_db: Optional[float], seed: int) -> Waveform:
    """
    Adds white Gaussian noise rescaled so the realized energy ratio hits
    `snr_db` exactly. `None` or +inf disables the augmentation.
    """
    if snr_db is None or snr_db == math.inf:
        return Waveform(w.samples.copy(), w.sample_rate_hz)
    _require_samples(w)
    signal_energy = w.energy
    if signal_energy <= 0:
        raise SilentSignalError("Cannot set an SNR against a silent waveform")
    noise = np.random.default_rng(seed).standard_normal(len(w))
    target = signal_energy / (10.0 ** (snr_db / 10.0))
    noise *= np.sqrt(target / np.sum(noise ** 2))
    return Waveform(w.samples + noise, w.sample_rate_hz)


def apply_rir(w: Waveform, rir: Waveform, resample_rir: bool = False,
              preserve_energy: bool = False) -> Waveform:
    """Room reverberation: convolve with `rir` and trim back to len(w)."""
    if rir.sample_rate_hz != w.sample_rate_hz:
        if not resample_rir:
            raise SampleRateMismatchError(
                f"RIR at {rir.sample_rate_hz} Hz, signal at {w.sample_rate_hz} Hz")
        rir = resample(rir, w.sample_rate_hz)
    out = convolve(w, rir.samples).samples[:len(w)]
    if preserve_energy:
        out_energy = np.sum(out ** 2)
        if out_energy > 0:
            out = out * np.sqrt(w.energy / out_energy)
    return Waveform(out, w.sample_rate_hz)


def sample_separated_doas(rng: np.random.Generator, n: int,
                          min_separation: float = MIN_SEPARATION_DEG,
                          max_tries: int = 10000) -> List[int]:
    """Uniform DoAs in 1..360 with circular pairwise separation, ascending."""
    if not 1 <= n <= MAX_SPEAKERS:
        raise CountMismatchError(f"Cannot place {n} speakers (1..{MAX_SPEAKERS})")
    for _ in range(max_tries):
        doas = rng.choice(np.arange(1, NUM_ANGLES + 1), size=n, replace=False)
        if n == 1 or min_pairwise_separation(doas) >= min_separation:
            return sorted(int(d) for d in doas)
    raise SeparationError(f"Could not place {n} sources {min_separation} deg apart")
