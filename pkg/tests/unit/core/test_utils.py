import json

import numpy as np
import pytest

from core.errors import AngleRangeError, FormatError
from core.utils import (check_angle, circular_distance, min_pairwise_separation, read_audio, read_jsonl,
                        sha256_samples, write_audio, write_jsonl, write_stamp)


def test_check_angle_bounds():
    assert check_angle(1) == 1
    assert check_angle(360) == 360
    assert check_angle(np.int64(45)) == 45
    for bad in (0, 361, -5, 45.5, "north"):
        with pytest.raises(AngleRangeError):
            check_angle(bad)


def test_circular_distance():
    assert circular_distance(350, 10) == 20
    assert circular_distance(1, 181) == 180
    assert circular_distance(90, 90) == 0
    np.testing.assert_array_equal(circular_distance(np.array([5, 355]), 0), [5, 5])


def test_min_pairwise_separation():
    assert min_pairwise_separation([10]) == 360.0
    assert min_pairwise_separation([5, 100, 355]) == 10


def test_audio_round_trip_is_float32_exact(tmp_path, rng):
    samples = rng.standard_normal(1000) * 3.0
    path = tmp_path / "a.wav"
    write_audio(path, samples, 16000)
    back, sr = read_audio(path)
    assert sr == 16000
    np.testing.assert_array_equal(back, samples.astype(np.float32).astype(np.float64))
    assert sha256_samples(back) == sha256_samples(samples.astype(np.float32))


def test_jsonl_round_trip_and_errors(tmp_path):
    path = tmp_path / "rows.jsonl"
    assert write_jsonl(path, [{"a": 1}, {"b": "ü"}]) == 2
    assert list(read_jsonl(path)) == [{"a": 1}, {"b": "ü"}]
    path.write_text('{"a": 1}\n{broken\n')
    with pytest.raises(FormatError):
        list(read_jsonl(path))


def test_write_stamp(tmp_path):
    path = write_stamp(tmp_path / "out", ["bank", "synth"], {"seed": 3, "options": {"x": 1}})
    stamp = json.loads(path.read_text())
    assert path.name == "run_stamp.json"
    assert stamp["seed"] == 3
    assert stamp["command"] == ["bank", "synth"]
    assert "numpy" in stamp["versions"] and "python" in stamp["versions"]

    named = write_stamp(tmp_path, ["eval"], {"seed": 0}, filename="report.json.stamp.json")
    assert named.name == "report.json.stamp.json"
