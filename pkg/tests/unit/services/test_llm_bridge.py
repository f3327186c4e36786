from pathlib import Path

import numpy as np
import pytest

from core.errors import ConfigError, CountMismatchError, FormatError, MissingFieldError, ShapeMismatchError
from core.utils import write_jsonl
from services.encoders import build_nspk_encoder, save_model
from services.llm_bridge import (TASK_TYPES, Projection, build_llm_prefix, export_jsonl, export_projection,
                                 format_degrees, init_projection, load_projection, load_qa_jsonl, make_qa_pair,
                                 make_qa_pairs, project)
from services.synthesis import ClipRecord, SourceSpec

GOLDEN_DIR = Path(__file__).resolve().parents[2] / "golden"


def _record(clip_id, doas, transcripts):
    return ClipRecord(clip_id, f"clips/{clip_id}.wav", 8.0, len(doas), doas,
                      [SourceSpec(f"utt_{i}", t, d) for i, (d, t) in enumerate(zip(doas, transcripts))])


ONE = _record("clip_000001", [45], ["turn on the light"])
TWO = _record("clip_000002", [300], ["where is the kitchen"])
CROWD = _record("clip_000003", [39, 120, 300], ["a", "b", "c"])
MOAN = _record("clip_000004", [217], ["A low, deep moan broke from him."])
PAIR = _record("clip_000005", [39, 101], ["a", "b"])
SOLO = _record("clip_000006", [77], ["a"])
GOLDEN_RECORDS = {"asr": [ONE, TWO], "spatial_asr": [ONE, TWO, MOAN], "doa": [ONE, TWO],
                  "nspk": [ONE, CROWD], "multi_doa": [SOLO, PAIR, CROWD]}


@pytest.mark.parametrize("task_type", TASK_TYPES)
def test_qa_export_matches_golden_file(tmp_path, task_type):
    out = tmp_path / f"qa_{task_type}.jsonl"
    records = GOLDEN_RECORDS[task_type]
    assert export_jsonl(make_qa_pairs(records, task_type), out) == len(records)
    assert out.read_bytes() == (GOLDEN_DIR / f"qa_{task_type}.jsonl").read_bytes()


def test_format_degrees_rounds_half_up():
    assert format_degrees(44.5, "integer") == "45"
    assert format_degrees(45.49, "integer") == "45"
    assert format_degrees(39, "decimal1") == "39.0"
    assert format_degrees(0.05, "decimal1") == "0.1"
    with pytest.raises(ConfigError):
        format_degrees(10, "radians")


def test_doa_format_override():
    assert make_qa_pair(ONE, "doa", "decimal1").response == "The speech is coming from 45.0 degrees."


def test_qa_pair_errors():
    with pytest.raises(CountMismatchError):
        make_qa_pair(CROWD, "doa")
    with pytest.raises(MissingFieldError):
        make_qa_pair(_record("clip_9", [10], [""]), "asr")
    with pytest.raises(ConfigError):
        make_qa_pair(ONE, "emotion")


def test_qa_jsonl_round_trip_and_missing_fields(tmp_path):
    pairs = make_qa_pairs([ONE, CROWD], "multi_doa")
    export_jsonl(pairs, tmp_path / "qa.jsonl")
    assert load_qa_jsonl(tmp_path / "qa.jsonl") == pairs
    write_jsonl(tmp_path / "bad.jsonl", [{"task_type": "doa", "system": "s", "user": "u"}])
    with pytest.raises(MissingFieldError):
        load_qa_jsonl(tmp_path / "bad.jsonl")


def test_projection_shapes(rng):
    p = init_projection(3072)
    assert p.weight.shape == (3072, 1024) and p.bias.shape == (3072,)
    bound = 1 / np.sqrt(1024)
    assert np.all(np.abs(p.weight) <= bound)
    z = rng.standard_normal(1024)
    np.testing.assert_allclose(project(p, z), p.weight @ z + p.bias)
    assert project(p, rng.standard_normal((3, 1024))).shape == (3, 3072)
    assert init_projection(16, 8, bias=False).bias is None
    with pytest.raises(ShapeMismatchError):
        project(p, np.zeros(512))


def test_llm_prefix_layout(rng):
    spatial_proj = init_projection(64, 1024, seed=1)
    speech_proj = init_projection(64, 32, seed=2)
    spatial = rng.standard_normal(1024)
    speech = rng.standard_normal((128, 32))
    prefix = build_llm_prefix(spatial, speech, spatial_proj, speech_proj)
    assert prefix.shape == (129, 64)
    np.testing.assert_allclose(prefix[0], project(spatial_proj, spatial))
    np.testing.assert_allclose(prefix[1:], project(speech_proj, speech))
    with pytest.raises(ShapeMismatchError):
        build_llm_prefix(spatial, speech, spatial_proj, init_projection(32, 32))


def test_projection_checkpoint_round_trip(tmp_path):
    p = init_projection(48, 1024, seed=3)
    back = load_projection(export_projection(p, tmp_path / "proj.otnn"))
    np.testing.assert_array_equal(back.weight, p.weight)
    np.testing.assert_array_equal(back.bias, p.bias)
    unbiased = load_projection(export_projection(init_projection(8, 4, bias=False), tmp_path / "nobias.otnn"))
    assert unbiased.bias is None

    save_model(build_nspk_encoder((16, 16), channels=(2, 2, 2)), tmp_path / "nspk.otnn")
    with pytest.raises(FormatError):
        load_projection(tmp_path / "nspk.otnn")


def test_projection_validation():
    with pytest.raises(ConfigError):
        init_projection(0)
    with pytest.raises(ConfigError):
        Projection(np.array([[np.inf]]))
    with pytest.raises(ShapeMismatchError):
        Projection(np.zeros((2, 3)), np.zeros(3))


def test_project_is_linear_without_bias(rng):
    p = init_projection(32, 1024, bias=False, seed=4)
    x, y = rng.standard_normal(1024), rng.standard_normal(1024)
    np.testing.assert_allclose(project(p, 2.0 * x - 0.5 * y), 2.0 * project(p, x) - 0.5 * project(p, y),
                               atol=1e-9)
