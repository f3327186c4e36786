"""
Oracle Service — training-free DoA estimation by spectral matching

A spatialized flat-spectrum source carries |H(ω, θ)|² as its long-term power
spectrum, so comparing the clip's Welch spectrum with every bank row recovers
θ without any learned model. Used as ground truth for the synthesis pipeline
and as the classical baseline in robustness sweeps.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, signal

from core.config import MIN_SEPARATION_DEG, ORACLE_BAND_HZ, PAIR_GRID_STEP_DEG, WHITENING_BINS
from core.errors import (ConfigError, OmniTalkError, SampleRateMismatchError, SilentSignalError,
                         ValidationError)
from core.utils import circular_distance, read_audio
from services.dataset import load_manifest, resolve_clip_path
from services.impulse_bank import FreqResponseBank, ImpulseBank, to_time_domain
from services.synthesis import Waveform, add_noise, apply_rir, spatialize

logger = logging.getLogger(__name__)

PROBE_MODES = ("flat", "whitened")
MIN_DURATION_S = 0.5
PROBE_DURATION_S = 2.0
_POWER_FLOOR = 1e-30


@dataclass
class SpectralTemplate:
    """Per-angle templates on the bank's analysis grid, restricted to the oracle band."""
    frequencies_hz: np.ndarray
    magnitude: np.ndarray
    log_templates: np.ndarray
    probe_mode: str


def _band_mask(bank: FreqResponseBank, band_hz: Tuple[float, float]) -> np.ndarray:
    freqs = bank.frequencies_hz
    mask = (freqs >= band_hz[0]) & (freqs <= band_hz[1])
    if not mask.any():
        raise ConfigError(f"Band {band_hz} contains no analysis bins")
    return mask


def _whiten(log_spectrum: np.ndarray) -> np.ndarray:
    """Removes a smoothed spectral envelope (running mean over WHITENING_BINS bins)."""
    return log_spectrum - ndimage.uniform_filter1d(log_spectrum, size=WHITENING_BINS, axis=-1, mode="nearest")


def _center_unit(rows: np.ndarray) -> np.ndarray:
    centered = rows - rows.mean(axis=-1, keepdims=True)
    norms = np.linalg.norm(centered, axis=-1, keepdims=True)
    return centered / np.maximum(norms, _POWER_FLOOR)


def build_template(bank: FreqResponseBank, probe_mode: str = "flat",
                   band_hz: Tuple[float, float] = ORACLE_BAND_HZ) -> SpectralTemplate:
    if probe_mode not in PROBE_MODES:
        raise ConfigError(f"Unknown probe mode {probe_mode!r}; expected one of {PROBE_MODES}")
    mask = _band_mask(bank, band_hz)
    magnitude = np.abs(bank.half_spectra()[:, mask])
    magnitude = magnitude / np.maximum(np.linalg.norm(magnitude, axis=1, keepdims=True), _POWER_FLOOR)
    log_mag = bank.log_magnitude()[:, mask]
    if probe_mode == "whitened":
        log_mag = _whiten(log_mag)
    return SpectralTemplate(bank.frequencies_hz[mask], magnitude, _center_unit(log_mag), probe_mode)


def long_term_spectrum(w: Waveform, fft_size: int) -> np.ndarray:
    """Welch power spectrum (Hann, 50% overlap) on the rfft grid of `fft_size`."""
    _, psd = signal.welch(w.samples, fs=w.sample_rate_hz, window="hann", nperseg=fft_size,
                          noverlap=fft_size // 2, detrend=False, scaling="density")
    return psd


def _check_clip(w: Waveform, bank: FreqResponseBank) -> None:
    if w.sample_rate_hz != bank.sample_rate_hz:
        raise SampleRateMismatchError(f"Clip at {w.sample_rate_hz} Hz, bank at {bank.sample_rate_hz} Hz")
    if w.duration_s < MIN_DURATION_S:
        raise ValidationError(f"Clip is {w.duration_s:.3f} s; the oracle needs at least {MIN_DURATION_S} s")
    if w.energy <= 0:
        raise SilentSignalError("Cannot estimate a direction from a silent clip")


def matched_filter_doa(w: Waveform, bank: FreqResponseBank, probe_mode: str = "flat",
                       template: Optional[SpectralTemplate] = None) -> Tuple[int, np.ndarray]:
    """
    Returns (theta_hat, scores) where scores[θ-1] is the cosine similarity
    between the clip's centred log spectrum and the centred log|H(·, θ)|.
    """
    _check_clip(w, bank)
    template = template or build_template(bank, probe_mode)
    mask = _band_mask(bank, (template.frequencies_hz[0], template.frequencies_hz[-1]))
    psd = long_term_spectrum(w, bank.fft_size)
    observed = 0.5 * np.log(np.maximum(psd[mask], _POWER_FLOOR))
    if template.probe_mode == "whitened":
        observed = _whiten(observed)
    scores = template.log_templates @ _center_unit(observed)
    theta_hat = int(np.argmax(scores)) + 1
    logger.debug(f"Matched filter: {theta_hat} deg (score {scores[theta_hat - 1]:.4f})")
    return theta_hat, scores


def score_margin(scores: np.ndarray, theta: int) -> float:
    """Score at `theta` minus the best score at any other angle."""
    others = np.delete(scores, theta - 1)
    return float(scores[theta - 1] - others.max())


def pair_search_doa(w: Waveform, bank: FreqResponseBank, step_deg: int = PAIR_GRID_STEP_DEG,
                    min_separation: float = MIN_SEPARATION_DEG,
                    band_hz: Tuple[float, float] = ORACLE_BAND_HZ) -> Tuple[List[int], float]:
    """
    Exhaustive two-source search on a `step_deg` grid: minimizes the spread of
    log(observed) - log(|H1|² + |H2|²) after removing the best constant offset.
    Returns the ascending pair and its residual.
    """
    _check_clip(w, bank)
    if not 1 <= step_deg <= 180:
        raise ConfigError(f"step_deg must be in 1..180, got {step_deg}")
    mask = _band_mask(bank, band_hz)
    observed = np.log(np.maximum(long_term_spectrum(w, bank.fft_size)[mask], _POWER_FLOOR))
    grid = np.arange(step_deg, 361, step_deg)
    power = np.abs(bank.half_spectra()[grid - 1][:, mask]) ** 2

    best = (np.inf, None)
    for i in range(len(grid) - 1):
        partners = np.arange(i + 1, len(grid))
        partners = partners[circular_distance(grid[i], grid[partners]) >= min_separation]
        if partners.size == 0:
            continue
        diff = observed - np.log(power[i] + power[partners])
        residual = np.sum((diff - diff.mean(axis=1, keepdims=True)) ** 2, axis=1)
        j = int(np.argmin(residual))
        if residual[j] < best[0]:
            best = (float(residual[j]), (int(grid[i]), int(grid[partners[j]])))
    if best[1] is None:
        raise ConfigError(f"No angle pairs on a {step_deg} deg grid are {min_separation} deg apart")
    return sorted(best[1]), best[0]


# ──────────────────────────────────────────────
# Batch runs and sweeps
# ──────────────────────────────────────────────

def run_batch(manifest_path: Path, bank: FreqResponseBank, probe_mode: str = "flat",
              step_deg: int = PAIR_GRID_STEP_DEG) -> Dict[str, Any]:
    """
    Oracle predictions for every 1- and 2-source clip of a built dataset, in
    the prediction format `eval` reads. Clips it cannot handle are reported.

    The oracle does not count speakers: the manifest's `n_speakers` picks the
    single-source matched filter or the pair search, so the predicted count
    always equals the true one and only the DoA errors are informative.
    """
    template = build_template(bank, probe_mode)
    predictions, errors = [], []
    for record in load_manifest(manifest_path):
        try:
            samples, sr = read_audio(resolve_clip_path(manifest_path, record.clip_path))
            clip = Waveform(samples, sr)
            if record.n_speakers == 1:
                theta, _ = matched_filter_doa(clip, bank, probe_mode, template)
                doas = [theta]
            elif record.n_speakers == 2:
                doas, _ = pair_search_doa(clip, bank, step_deg)
            else:
                raise ValidationError(f"oracle handles 1 or 2 sources, clip has {record.n_speakers}")
            predictions.append({"clip_id": record.clip_id, "n_speakers": len(doas),
                                "doas_deg": [float(d) for d in doas]})
        except (OmniTalkError, OSError) as e:
            logger.error(f"Oracle failed on {record.clip_id}: {e}")
            errors.append({"clip_id": record.clip_id, "error": f"{type(e).__name__}: {e}"})
    logger.info(f"Oracle batch: {len(predictions)} predictions, {len(errors)} skipped")
    return {"success": not errors, "predictions": predictions, "errors": errors}


def white_noise_probe(seed: int, duration_s: float = PROBE_DURATION_S,
                      sample_rate_hz: int = 16000) -> Waveform:
    rng = np.random.default_rng(seed)
    return Waveform(rng.standard_normal(int(round(duration_s * sample_rate_hz))), sample_rate_hz)


def noise_robustness_sweep(bank: FreqResponseBank, angles: Sequence[int], snrs_db: Sequence[Optional[float]],
                           trials: int = 20, seed: int = 0, rir: Optional[Waveform] = None,
                           probe_mode: str = "flat", irs: Optional[ImpulseBank] = None,
                           duration_s: float = PROBE_DURATION_S) -> List[Dict[str, Any]]:
    """
    Oracle error per SNR condition. Each trial reuses one probe and one noise
    draw across all SNRs so conditions differ only in the noise level.
    """
    if trials < 1 or not angles:
        raise ConfigError("sweep needs at least one trial and one angle")
    irs = irs or to_time_domain(bank)
    template = build_template(bank, probe_mode)
    errors = {snr: [] for snr in snrs_db}
    for t in range(trials):
        for k, theta in enumerate(angles):
            trial_seed = int(np.random.SeedSequence([seed, t, k]).generate_state(1)[0])
            clip = spatialize(white_noise_probe(trial_seed, duration_s, bank.sample_rate_hz), theta, irs)
            if rir is not None:
                clip = apply_rir(clip, rir, resample_rir=True)
            for snr in snrs_db:
                noisy = add_noise(clip, snr, trial_seed + 1)
                theta_hat, _ = matched_filter_doa(noisy, bank, probe_mode, template)
                errors[snr].append(circular_distance(theta_hat, theta))

    rows = []
    for snr in snrs_db:
        e = np.asarray(errors[snr])
        rows.append({"snr_db": snr, "rir": rir is not None, "trials": int(e.size),
                     "mae": float(e.mean()), "median": float(np.median(e)),
                     "exact_fraction": float(np.mean(e == 0))})
        logger.info(f"SNR {snr} dB: MAE {e.mean():.2f} deg over {e.size} probes")
    return rows
