import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from core.utils import write_audio, write_jsonl

SR = 16000


@pytest.fixture(scope="session")
def default_bank():
    """The default surrogate bank (seed 0, 8 resonances, 1024-point FFT)."""
    from services.impulse_bank import BankParams, synth_bank
    return synth_bank(BankParams(seed=0))


@pytest.fixture(scope="session")
def default_irs(default_bank):
    from services.impulse_bank import to_time_domain
    return to_time_domain(default_bank)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_noise_corpus(directory: Path, n_utterances: int = 4, duration_s: float = 1.5, seed: int = 7) -> Path:
    """Writes white-noise utterances plus a corpus JSONL and returns the manifest path."""
    gen = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_utterances):
        path = directory / f"utt_{i}.wav"
        write_audio(path, 0.1 * gen.standard_normal(int(duration_s * SR)), SR)
        rows.append({"id": f"utt_{i}", "audio_path": path.name,
                     "transcript": f"utterance number {i} is here", "sample_rate": SR})
    manifest = directory / "corpus.jsonl"
    write_jsonl(manifest, rows)
    return manifest


@pytest.fixture(scope="session")
def noise_corpus(tmp_path_factory):
    return make_noise_corpus(tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="session")
def bank_file(tmp_path_factory, default_bank):
    from services.impulse_bank import save_bank
    return save_bank(default_bank, tmp_path_factory.mktemp("bank") / "default.otbk")


@pytest.fixture
def corpus_factory():
    return make_noise_corpus
