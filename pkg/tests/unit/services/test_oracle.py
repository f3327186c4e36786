import numpy as np
import pytest

from core.errors import ConfigError, SampleRateMismatchError, SilentSignalError, ValidationError
from core.utils import circular_distance
from services.dataset import DatasetConfig, dataset_service
from services.oracle import (build_template, matched_filter_doa, noise_robustness_sweep, pair_search_doa,
                             run_batch, score_margin, white_noise_probe)
from services.synthesis import Waveform, mix, spatialize

SR = 16000


@pytest.mark.parametrize("theta", [1, 90, 181, 360])
def test_matched_filter_recovers_angle(default_bank, default_irs, theta):
    clip = spatialize(white_noise_probe(seed=theta), theta, default_irs)
    theta_hat, scores = matched_filter_doa(clip, default_bank)
    assert theta_hat == theta
    assert scores.shape == (360,)
    assert score_margin(scores, theta) > 0


def test_template_reuse_matches_fresh_template(default_bank, default_irs):
    clip = spatialize(white_noise_probe(seed=5), 123, default_irs)
    template = build_template(default_bank)
    a = matched_filter_doa(clip, default_bank, template=template)
    b = matched_filter_doa(clip, default_bank)
    assert a[0] == b[0]
    np.testing.assert_allclose(a[1], b[1])


def test_whitened_probe_mode_scores_every_angle(default_bank, default_irs):
    clip = spatialize(white_noise_probe(seed=9), 250, default_irs)
    template = build_template(default_bank, "whitened")
    assert template.probe_mode == "whitened"
    theta_hat, scores = matched_filter_doa(clip, default_bank, "whitened")
    assert scores.shape == (360,)
    assert theta_hat == int(np.argmax(scores)) + 1
    assert np.all(np.abs(scores) <= 1 + 1e-9)


def test_matched_filter_rejects_bad_clips(default_bank):
    with pytest.raises(ValidationError):
        matched_filter_doa(white_noise_probe(seed=0, duration_s=0.2), default_bank)
    with pytest.raises(SilentSignalError):
        matched_filter_doa(Waveform(np.zeros(SR), SR), default_bank)
    with pytest.raises(SampleRateMismatchError):
        matched_filter_doa(white_noise_probe(seed=0, sample_rate_hz=8000), default_bank)
    with pytest.raises(ConfigError):
        build_template(default_bank, "pink")


def test_pair_search_finds_both_sources(default_bank, default_irs, rng):
    a = Waveform(rng.standard_normal(4 * SR), SR)
    b = Waveform(rng.standard_normal(4 * SR), SR)
    pair, residual = pair_search_doa(mix([(a, 45), (b, 200)], default_irs), default_bank)
    assert pair == sorted(pair)
    assert circular_distance(pair[0], 45) <= 5
    assert circular_distance(pair[1], 200) <= 5
    assert residual >= 0


def test_pair_search_config_errors(default_bank):
    clip = white_noise_probe(seed=1)
    with pytest.raises(ConfigError):
        pair_search_doa(clip, default_bank, step_deg=0)
    with pytest.raises(ConfigError):
        pair_search_doa(clip, default_bank, step_deg=180, min_separation=200)


def test_run_batch_skips_crowded_clips(tmp_path, noise_corpus, default_bank, default_irs):
    build = dataset_service.build(noise_corpus, default_irs,
                                  DatasetConfig(n_clips=5, duration_s=1.0, progress=False), tmp_path / "ds")
    result = run_batch(build["manifest_path"], default_bank)
    assert not result["success"]
    assert sorted(p["n_speakers"] for p in result["predictions"]) == [1, 2]
    assert len(result["errors"]) == 3
    truth = {r.clip_id: r.n_speakers for r in build["records"]}
    for p in result["predictions"]:
        assert p["n_speakers"] == truth[p["clip_id"]]
        assert all(1 <= d <= 360 for d in p["doas_deg"])


def test_noise_sweep_rows_and_determinism(default_bank, default_irs):
    kwargs = dict(angles=[30, 250], snrs_db=[None, 0.0], trials=2, seed=4, irs=default_irs)
    rows = noise_robustness_sweep(default_bank, **kwargs)
    assert [r["snr_db"] for r in rows] == [None, 0.0]
    assert all(r["trials"] == 4 and r["rir"] is False for r in rows)
    assert rows[0]["mae"] == 0.0 and rows[0]["exact_fraction"] == 1.0
    assert noise_robustness_sweep(default_bank, **kwargs) == rows
    with pytest.raises(ConfigError):
        noise_robustness_sweep(default_bank, [], [None], irs=default_irs)
