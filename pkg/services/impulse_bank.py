"""
Impulse Bank Service — direction-dependent microstructure responses

Holds the 360-angle frequency response bank H(ω, θ) that imprints direction on
a single microphone channel, converts it to time-domain impulse responses and
persists it in the "OTBK" container.

The default bank is a parametric surrogate for a one-time hardware calibration:
  - angle-modulated resonances and notches whose centre frequencies sweep with θ
  - two capillary comb ripples whose spacing follows sin θ and cos θ
The magnitude is designed in the log domain and made minimum-phase by folding
the real cepstrum, so the impulse response is causal and front-loaded.
Real calibrations load through the same file format or `import_impulse_files`.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from core.binary import check_framed, unpack_header, write_framed
from core.config import (BANK_FFT_SIZE, BANK_MIN_DISTANCE, BANK_NUM_RESONANCES, BANK_Q_RANGE,
                         DEFAULT_SEED, IMAG_RESIDUAL_LIMIT, IR_ENERGY_BAND, IR_LENGTH_SAMPLES,
                         IR_TAPER_SAMPLES, NUM_ANGLES, SAMPLE_RATE_HZ)
from core.errors import (ConfigError, FormatError, IndistinguishableBankError, ShapeMismatchError,
                         SymmetryError, ValidationError, VersionMismatchError)
from core.utils import check_angle, read_audio

logger = logging.getLogger(__name__)

BANK_MAGIC = b"OTBK"
BANK_FORMAT_VERSION = 1
_HEADER_FMT = "<4sIIII"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)

# Capillary comb ripple (log-magnitude amplitude in nepers, delays in seconds)
COMB_DEPTH = 0.35
COMB_BASE_DELAY_S = 0.4e-3
COMB_DELAY_SPAN_S = 1.0e-3

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class BankParams:
    num_resonances: int = BANK_NUM_RESONANCES
    q_range: Tuple[float, float] = BANK_Q_RANGE
    seed: int = DEFAULT_SEED
    allow_flat: bool = False
    min_distance: float = BANK_MIN_DISTANCE


@dataclass(eq=False)
class FreqResponseBank:
    """Full complex spectra, one row per degree 1..num_angles."""
    sample_rate_hz: int
    fft_size: int
    spectra: np.ndarray
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.spectra = np.asarray(self.spectra, dtype=np.complex128)
        if self.spectra.ndim != 2 or self.spectra.shape[1] != self.fft_size:
            raise ShapeMismatchError(
                f"Spectra shape {self.spectra.shape} does not match fft_size {self.fft_size}")
        if self.spectra.shape[0] != NUM_ANGLES:
            raise ShapeMismatchError(f"Bank needs {NUM_ANGLES} angle rows, got {self.spectra.shape[0]}")
        if self.fft_size % 2:
            raise ConfigError(f"fft_size must be even, got {self.fft_size}")

    @property
    def num_angles(self) -> int:
        return self.spectra.shape[0]

    @property
    def angles(self) -> np.ndarray:
        return np.arange(1, self.num_angles + 1)

    @property
    def frequencies_hz(self) -> np.ndarray:
        return np.fft.rfftfreq(self.fft_size, d=1.0 / self.sample_rate_hz)

    def spectrum(self, theta_deg) -> np.ndarray:
        return self.spectra[check_angle(theta_deg) - 1]

    def half_spectra(self) -> np.ndarray:
        return self.spectra[:, :self.fft_size // 2 + 1]

    def log_magnitude(self) -> np.ndarray:
        return np.log(np.maximum(np.abs(self.half_spectra()), LOG_FLOOR))

    def symmetry_residual(self) -> float:
        """Max |H[k] - conj(H[N-k])| relative to the peak magnitude."""
        mirrored = np.conj(np.roll(self.spectra[:, ::-1], 1, axis=1))
        peak = max(np.abs(self.spectra).max(), LOG_FLOOR)
        return float(np.abs(self.spectra - mirrored).max() / peak)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FreqResponseBank):
            return NotImplemented
        return (self.sample_rate_hz == other.sample_rate_hz
                and self.fft_size == other.fft_size
                and self.spectra.shape == other.spectra.shape
                and self.spectra.tobytes() == other.spectra.tobytes())


@dataclass(eq=False)
class ImpulseBank:
    """Real time-domain impulse responses h_θ(t), one row per degree."""
    sample_rate_hz: int
    irs: np.ndarray

    def __post_init__(self):
        self.irs = np.asarray(self.irs, dtype=np.float64)
        if self.irs.ndim != 2 or self.irs.shape[1] < 1:
            raise ShapeMismatchError(f"IR matrix must be 2-D and non-empty, got {self.irs.shape}")
        if self.irs.shape[0] != NUM_ANGLES:
            raise ShapeMismatchError(f"Impulse bank needs {NUM_ANGLES} angle rows, got {self.irs.shape[0]}")
        if not np.all(np.isfinite(self.irs)):
            raise ValidationError("Impulse responses contain non-finite samples")

    @property
    def ir_length_samples(self) -> int:
        return self.irs.shape[1]

    @property
    def num_angles(self) -> int:
        return self.irs.shape[0]

    def ir(self, theta_deg) -> np.ndarray:
        return self.irs[check_angle(theta_deg) - 1]

    def energies(self) -> np.ndarray:
        return np.sum(self.irs ** 2, axis=1)


# ──────────────────────────────────────────────
# Construction
# ──────────────────────────────────────────────

def _check_fft_size(fft_size: int) -> None:
    if not isinstance(fft_size, (int, np.integer)) or fft_size < 256 or fft_size % 2:
        raise ConfigError(f"fft_size must be an even integer >= 256, got {fft_size}")


def _full_from_half(half: np.ndarray, fft_size: int) -> np.ndarray:
    """Mirrors a one-sided spectrum into an exactly conjugate-symmetric full one."""
    half = np.array(half, dtype=np.complex128)
    half[:, 0] = half[:, 0].real
    half[:, -1] = half[:, -1].real
    full = np.empty((half.shape[0], fft_size), dtype=np.complex128)
    full[:, :fft_size // 2 + 1] = half
    full[:, fft_size // 2 + 1:] = np.conj(half[:, 1:fft_size // 2][:, ::-1])
    return full


def minimum_phase_from_log_magnitude(log_mag: np.ndarray, fft_size: int) -> np.ndarray:
    """One-sided minimum-phase spectra whose log-magnitude equals `log_mag` exactly."""
    cepstrum = np.fft.irfft(log_mag, n=fft_size, axis=-1)
    fold = np.zeros(fft_size)
    fold[0] = 1.0
    fold[1:fft_size // 2] = 2.0
    fold[fft_size // 2] = 1.0
    return np.exp(np.fft.rfft(cepstrum * fold, axis=-1))


def _mean_power(log_mag: np.ndarray) -> np.ndarray:
    """Mean |H|^2 over the full two-sided spectrum (Parseval energy of h)."""
    weights = np.full(log_mag.shape[-1], 2.0)
    weights[0] = weights[-1] = 1.0
    return np.sum(np.exp(2 * log_mag) * weights, axis=-1) / np.sum(weights)


def flat_bank(sample_rate_hz: int = SAMPLE_RATE_HZ, fft_size: int = BANK_FFT_SIZE) -> FreqResponseBank:
    """Identity bank: every angle has an all-ones spectrum (unit impulse)."""
    _check_fft_size(fft_size)
    spectra = np.ones((NUM_ANGLES, fft_size), dtype=np.complex128)
    return FreqResponseBank(sample_rate_hz, fft_size, spectra,
                            params={"source": "flat", "flat": True})


def synth_bank(params: BankParams = BankParams(),
               sample_rate_hz: int = SAMPLE_RATE_HZ,
               fft_size: int = BANK_FFT_SIZE) -> FreqResponseBank:
    """Synthesizes the surrogate microstructure bank, deterministic in `params.seed`."""
    _check_fft_size(fft_size)
    if sample_rate_hz <= 0:
        raise ConfigError(f"sample_rate_hz must be positive, got {sample_rate_hz}")
    q_min, q_max = params.q_range
    if not 0 < q_min <= q_max:
        raise ConfigError(f"Invalid q_range {params.q_range}")
    if params.num_resonances < 0:
        raise ConfigError(f"num_resonances must be >= 0, got {params.num_resonances}")
    if params.num_resonances == 0:
        if not params.allow_flat:
            raise ConfigError("num_resonances=0 would give a flat bank; pass allow_flat=True to accept it")
        logger.warning("num_resonances=0: falling back to the flat identity bank")
        return flat_bank(sample_rate_hz, fft_size)

    rng = np.random.default_rng(params.seed)
    nyquist = sample_rate_hz / 2.0
    freqs = np.fft.rfftfreq(fft_size, d=1.0 / sample_rate_hz)
    theta = np.deg2rad(np.arange(1, NUM_ANGLES + 1, dtype=np.float64))[:, None]

    log_mag = np.zeros((NUM_ANGLES, freqs.size))
    for r in range(params.num_resonances):
        phase = 2 * np.pi * r / params.num_resonances + rng.uniform(-0.3, 0.3)
        span = rng.uniform(0.08, 0.15) * nyquist
        base = rng.uniform(0.1 * nyquist + span, 0.9 * nyquist - span)
        q = rng.uniform(q_min, q_max)
        depth = rng.uniform(0.6, 1.4)
        sign = -1.0 if r % 3 == 2 else 1.0
        amp_phase = rng.uniform(0.0, 2 * np.pi)

        centre = base + span * np.sin(theta + phase)
        sigma = centre / q / 2.0
        amplitude = sign * depth * (1.0 + 0.4 * np.cos(theta + amp_phase))
        log_mag += amplitude * np.exp(-0.5 * ((freqs - centre) / sigma) ** 2)

    for trig in (np.sin, np.cos):
        delay = COMB_BASE_DELAY_S + COMB_DELAY_SPAN_S * (1.0 + trig(theta)) / 2.0
        log_mag += COMB_DEPTH * np.cos(2 * np.pi * freqs * delay)

    # unit mean power gain per angle
    log_mag -= 0.5 * np.log(_mean_power(log_mag))[:, None]

    spectra = _full_from_half(minimum_phase_from_log_magnitude(log_mag, fft_size), fft_size)
    bank = FreqResponseBank(sample_rate_hz, fft_size, spectra, params={
        "source": "surrogate",
        "num_resonances": params.num_resonances,
        "q_min": float(q_min),
        "q_max": float(q_max),
        "seed": int(params.seed),
        "allow_flat": bool(params.allow_flat),
        "min_distance": float(params.min_distance),
        "flat": False,
    })
    check_distinguishable(bank, params.min_distance)
    logger.info(f"Synthesized surrogate bank: {NUM_ANGLES} angles, fft_size={fft_size}, "
                f"{params.num_resonances} resonances, seed={params.seed}")
    return bank


def import_impulse_files(directory: Path,
                         fft_size: int = BANK_FFT_SIZE,
                         sample_rate_hz: int = SAMPLE_RATE_HZ,
                         min_distance: float = BANK_MIN_DISTANCE) -> FreqResponseBank:
    """Builds a bank from a measured calibration stored as ir_001.wav .. ir_360.wav."""
    from services.synthesis import Waveform, resample

    _check_fft_size(fft_size)
    directory = Path(directory)
    rows = np.zeros((NUM_ANGLES, fft_size))
    for theta in range(1, NUM_ANGLES + 1):
        path = directory / f"ir_{theta:03d}.wav"
        if not path.exists():
            raise FormatError(f"Calibration directory {directory} is missing {path.name}")
        samples, sr = read_audio(path)
        if sr != sample_rate_hz:
            samples = resample(Waveform(samples, sr), sample_rate_hz).samples
        if samples.size > fft_size:
            logger.warning(f"{path.name}: {samples.size} samples truncated to fft_size={fft_size}")
            samples = samples[:fft_size]
        rows[theta - 1, :samples.size] = samples
    half = np.fft.rfft(rows, axis=1)
    bank = FreqResponseBank(sample_rate_hz, fft_size, _full_from_half(half, fft_size),
                            params={"source": "import", "directory": str(directory), "flat": False})
    check_distinguishable(bank, min_distance)
    logger.info(f"Imported calibration bank from {directory}")
    return bank


# ──────────────────────────────────────────────
# Analysis
# ──────────────────────────────────────────────

def spectral_distance_matrix(bank: FreqResponseBank) -> np.ndarray:
    """Pairwise L2 distance between per-angle log-magnitude responses."""
    lm = bank.log_magnitude()
    sq = np.sum(lm ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (lm @ lm.T)
    return np.sqrt(np.maximum(d2, 0.0))


def check_distinguishable(bank: FreqResponseBank, min_distance: float = BANK_MIN_DISTANCE) -> float:
    dist = spectral_distance_matrix(bank)
    np.fill_diagonal(dist, np.inf)
    idx = np.unravel_index(np.argmin(dist), dist.shape)
    closest = float(dist[idx])
    if closest <= min_distance:
        raise IndistinguishableBankError(
            f"Angles {idx[0] + 1} and {idx[1] + 1} are only {closest:.3g} apart "
            f"(threshold {min_distance})")
    return closest


def check_angular_smoothness(bank: FreqResponseBank) -> bool:
    """True when every angle is closer to its 1° neighbour than to the angle 90° away."""
    dist = spectral_distance_matrix(bank)
    idx = np.arange(bank.num_angles)
    near = dist[idx, (idx + 1) % bank.num_angles]
    far = dist[idx, (idx + 90) % bank.num_angles]
    return bool(np.all(near < far))


def inspect_bank(bank: FreqResponseBank, ir_length_samples: int = IR_LENGTH_SAMPLES) -> Dict[str, Any]:
    dist = spectral_distance_matrix(bank)
    np.fill_diagonal(dist, np.inf)
    irs = to_time_domain(bank, min(ir_length_samples, bank.fft_size), energy_band=None)
    energies = irs.energies()
    return {
        "sample_rate_hz": bank.sample_rate_hz,
        "fft_size": bank.fft_size,
        "num_angles": bank.num_angles,
        "params": dict(bank.params),
        "min_pairwise_distance": float(dist.min()),
        "angular_smoothness": check_angular_smoothness(bank) if not bank.params.get("flat") else None,
        "symmetry_residual": bank.symmetry_residual(),
        "ir_energy_min": float(energies.min()),
        "ir_energy_max": float(energies.max()),
    }


# ──────────────────────────────────────────────
# Time domain
# ──────────────────────────────────────────────

def to_time_domain(bank: FreqResponseBank,
                   ir_length_samples: int = IR_LENGTH_SAMPLES,
                   taper_samples: int = IR_TAPER_SAMPLES,
                   energy_band: Optional[Tuple[float, float]] = IR_ENERGY_BAND) -> ImpulseBank:
    """
    Per-angle IFFT, truncated to `ir_length_samples` with a half-Hann fade over
    the last `taper_samples`. Rejects spectra whose IFFT is not real.
    """
    if not 1 <= ir_length_samples <= bank.fft_size:
        raise ConfigError(f"ir_length_samples must be in 1..{bank.fft_size}, got {ir_length_samples}")
    raw = np.fft.ifft(bank.spectra, axis=1)
    peak = np.maximum(np.abs(raw.real).max(axis=1), LOG_FLOOR)
    residual = np.abs(raw.imag).max(axis=1) / peak
    worst = int(np.argmax(residual))
    if residual[worst] >= IMAG_RESIDUAL_LIMIT:
        raise SymmetryError(
            f"Spectrum at {worst + 1} deg is not conjugate-symmetric "
            f"(imaginary residual {residual[worst]:.3g} of peak)")

    irs = raw.real[:, :ir_length_samples].copy()
    if 0 < taper_samples < ir_length_samples:
        fade = np.hanning(2 * taper_samples + 1)[taper_samples + 1:]
        irs[:, -taper_samples:] *= fade

    bank_ir = ImpulseBank(bank.sample_rate_hz, irs)
    if energy_band is not None:
        energies = bank_ir.energies()
        lo, hi = energy_band
        bad = np.flatnonzero((energies < lo) | (energies > hi))
        if bad.size:
            raise ValidationError(
                f"IR energy outside [{lo}, {hi}] at {bad.size} angles "
                f"(first: {bad[0] + 1} deg, energy {energies[bad[0]]:.3g})")
    return bank_ir


# ──────────────────────────────────────────────
# Persistence
# ──────────────────────────────────────────────

def manifest_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def save_bank(bank: FreqResponseBank, path: Path) -> Path:
    """Writes the OTBK container plus a key=value sidecar manifest."""
    path = Path(path)
    header = struct.pack(_HEADER_FMT, BANK_MAGIC, BANK_FORMAT_VERSION,
                         bank.sample_rate_hz, bank.fft_size, bank.num_angles)
    payload = header + np.ascontiguousarray(bank.spectra, dtype="<c16").tobytes()
    write_framed(path, payload)

    lines = [f"format_version={BANK_FORMAT_VERSION}",
             f"sample_rate_hz={bank.sample_rate_hz}",
             f"fft_size={bank.fft_size}",
             f"num_angles={bank.num_angles}"]
    lines += [f"{k}={v}" for k, v in sorted(bank.params.items())]
    manifest_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Saved bank to {path}")
    return path


def _parse_manifest_value(raw: str):
    if raw in ("True", "False"):
        return raw == "True"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def _read_manifest(path: Path) -> Dict[str, Any]:
    sidecar = manifest_path(path)
    if not sidecar.exists():
        return {}
    fixed = {"format_version", "sample_rate_hz", "fft_size", "num_angles"}
    params = {}
    for line in sidecar.read_text(encoding="utf-8").splitlines():
        if "=" not in line:
            continue
        key, raw = line.split("=", 1)
        if key not in fixed:
            params[key.strip()] = _parse_manifest_value(raw.strip())
    return params


def load_bank(path: Path) -> FreqResponseBank:
    path = Path(path)
    data = path.read_bytes()
    if data[:len(BANK_MAGIC)] != BANK_MAGIC:
        raise FormatError(f"{path}: not a bank file (bad magic)")
    _, version, sample_rate, fft_size, num_angles = unpack_header(data, _HEADER_FMT, path)
    if version != BANK_FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: bank format version {version}, expected {BANK_FORMAT_VERSION}")
    if num_angles != NUM_ANGLES:
        raise FormatError(f"{path}: bank holds {num_angles} angles, expected {NUM_ANGLES}")
    payload = check_framed(data, path, _HEADER_SIZE + num_angles * fft_size * 16)
    spectra = np.frombuffer(payload[_HEADER_SIZE:], dtype="<c16").reshape(num_angles, fft_size)
    return FreqResponseBank(int(sample_rate), int(fft_size), spectra.astype(np.complex128),
                            params=_read_manifest(path))
