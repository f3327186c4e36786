import numpy as np
import pytest
from scipy.signal import get_window

from core.errors import (ConfigError, EmptySignalError, FormatError, SampleRateMismatchError,
                         ShapeMismatchError, TruncatedFileError)
from services.features import (ASR_PRESET, SOUNDSCAPE_PRESET, MelConfig, adaptive_avg_pool, load_matrix,
                               log_mel, mel_filterbank, preset, save_matrix, stft)
from services.synthesis import Waveform

SR = 16000


def test_asr_preset_shape_on_30_seconds(rng):
    mel = log_mel(Waveform(rng.standard_normal(30 * SR), SR), ASR_PRESET)
    assert mel.values.shape == (80, 3000)


def test_soundscape_preset_shape_on_8_seconds(rng):
    mel = log_mel(Waveform(rng.standard_normal(8 * SR), SR), SOUNDSCAPE_PRESET)
    assert mel.values.shape == (128, 251)


def test_frame_count_formula():
    assert SOUNDSCAPE_PRESET.n_frames(8 * SR) == 251
    assert ASR_PRESET.n_frames(30 * SR) == 3000
    cfg = MelConfig(win_length=400, hop_length=160, n_fft=512, n_mels=40)
    assert cfg.n_frames(1000) == 1000 // 160 + 1


def test_sine_peaks_in_its_bin():
    n_fft = SOUNDSCAPE_PRESET.n_fft
    k = 64
    t = np.arange(SR) / SR
    spec = np.abs(stft(Waveform(np.sin(2 * np.pi * k * SR / n_fft * t), SR), SOUNDSCAPE_PRESET))
    assert np.argmax(spec[:, spec.shape[1] // 2]) == k


def test_constant_signal_concentrates_at_dc():
    spec = np.abs(stft(Waveform(np.ones(SR), SR), SOUNDSCAPE_PRESET))
    assert np.argmax(spec[:, spec.shape[1] // 2]) == 0


def test_stft_interior_frame_matches_naive_dft(rng):
    cfg = MelConfig(win_length=256, hop_length=64, n_fft=256, n_mels=20)
    x = rng.standard_normal(2048)
    spec = stft(Waveform(x, SR), cfg)
    j = 10
    start = j * cfg.hop_length - cfg.n_fft // 2
    frame = x[start:start + cfg.n_fft] * get_window("hann", cfg.n_fft, fftbins=True)
    n = np.arange(cfg.n_fft)
    bins = np.arange(cfg.n_fft // 2 + 1)
    naive = np.exp(-2j * np.pi * np.outer(bins, n) / cfg.n_fft) @ frame
    np.testing.assert_allclose(spec[:, j], naive, atol=1e-9)


def test_mel_filterbank_shape_and_sign():
    fb = mel_filterbank(SOUNDSCAPE_PRESET)
    assert fb.shape == (128, 1025)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0)


@pytest.mark.parametrize("cfg", [ASR_PRESET, SOUNDSCAPE_PRESET], ids=["asr", "soundscape"])
def test_mel_filterbank_covers_every_band_bin(cfg):
    fb = mel_filterbank(cfg)
    freqs = np.fft.rfftfreq(cfg.n_fft, d=1.0 / cfg.sample_rate_hz)
    in_band = (freqs >= cfg.f_min) & (freqs <= cfg.f_max)
    assert in_band[0] and in_band[-1]
    assert np.all(fb[:, in_band].sum(axis=0) > 0)


def test_adjacent_mel_filters_overlap():
    fb = mel_filterbank(SOUNDSCAPE_PRESET)
    assert all(fb[j] @ fb[j + 1] > 0 for j in range(fb.shape[0] - 1))


def test_log_mel_never_decreases_under_gain(rng):
    x = rng.standard_normal(SR)
    quiet = log_mel(Waveform(x, SR), SOUNDSCAPE_PRESET).values
    for g in (1.5, 4.0):
        loud = log_mel(Waveform(g * x, SR), SOUNDSCAPE_PRESET).values
        assert np.all(loud >= quiet - 1e-12)


def test_silence_hits_the_log_floor():
    mel = log_mel(Waveform(np.zeros(SR), SR), SOUNDSCAPE_PRESET)
    np.testing.assert_allclose(mel.values, np.log(SOUNDSCAPE_PRESET.eps))


def test_input_errors(rng):
    with pytest.raises(SampleRateMismatchError):
        log_mel(Waveform(rng.standard_normal(8000), 8000), SOUNDSCAPE_PRESET)
    with pytest.raises(EmptySignalError):
        log_mel(Waveform(np.zeros(0), SR), SOUNDSCAPE_PRESET)
    with pytest.raises(ConfigError):
        preset("podcast")
    with pytest.raises(ConfigError):
        MelConfig(win_length=512, hop_length=160, n_fft=400, n_mels=80)


def test_pool_partitions_long_sequences(rng):
    m = rng.standard_normal((3000, 4))
    pooled = adaptive_avg_pool(m, 128)
    assert pooled.shape == (128, 4)
    np.testing.assert_allclose(pooled[0], m[0:23].mean(axis=0))
    np.testing.assert_allclose(pooled[-1], m[(127 * 3000) // 128:].mean(axis=0))


def test_pool_exact_division_and_short_input():
    m = np.arange(12, dtype=float).reshape(12, 1)
    np.testing.assert_allclose(adaptive_avg_pool(m, 4)[:, 0], [1, 4, 7, 10])
    short = np.array([[0.0], [10.0]])
    np.testing.assert_allclose(adaptive_avg_pool(short, 3)[:, 0], [0.0, 5.0, 10.0])
    with pytest.raises(ShapeMismatchError):
        adaptive_avg_pool(np.zeros((0, 3)), 4)


def test_pool_keeps_column_means_on_exact_division(rng):
    m = rng.standard_normal((128 * 6, 16))
    pooled = adaptive_avg_pool(m, 128)
    np.testing.assert_allclose(pooled.mean(axis=0), m.mean(axis=0), atol=1e-9)


def test_matrix_round_trip_and_errors(tmp_path, rng):
    m = rng.standard_normal((128, 251))
    path = save_matrix(m, tmp_path / "mel.otml")
    back = load_matrix(path)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, m.astype(np.float32))

    good = path.read_bytes()
    path.write_bytes(good[:100])
    with pytest.raises(TruncatedFileError):
        load_matrix(path)
    path.write_bytes(b"ABCD" + good[4:])
    with pytest.raises(FormatError):
        load_matrix(path)
