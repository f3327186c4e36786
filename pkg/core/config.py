import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from .errors import ConfigError

# Project Root (omnitalk-studio/)
PROJECT_ROOT = Path(__file__).resolve().parent.parent

# Default output locations
ARTIFACTS_DIR = PROJECT_ROOT / "artifacts"
STAMP_FILENAME = "run_stamp.json"

# Signal conventions
SAMPLE_RATE_HZ = 16000
NUM_ANGLES = 360
MIN_SEPARATION_DEG = 10
MAX_SPEAKERS = 5
TARGET_ENERGY = 1.0

# Impulse bank
BANK_FFT_SIZE = 1024
IR_LENGTH_SAMPLES = 512
IR_TAPER_SAMPLES = 32
BANK_NUM_RESONANCES = 8
BANK_Q_RANGE = (2.0, 6.0)
BANK_MIN_DISTANCE = 1e-3
IR_ENERGY_BAND = (1e-2, 1e2)
IMAG_RESIDUAL_LIMIT = 1e-9

# Dataset durations (seconds) per build mode
MODE_DURATIONS = {"asr": 30.0, "soundscape": 8.0}

# Encoders
EMBED_DIM = 512
CONV_CHANNELS = (16, 32, 64)
DROPOUT_P = 0.5

# Whisper-shaped pooling
POOL_SIZE = 128

# Oracle
ORACLE_BAND_HZ = (100.0, 7800.0)
WHITENING_BINS = 40
PAIR_GRID_STEP_DEG = 5

# Seeds and parallelism
DEFAULT_SEED = 0
SEED_ENV_VAR = "OMNITALK_SEED"
WORKERS_ENV_VAR = "OMNITALK_WORKERS"


def get_default_seed() -> int:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or raw.strip() == "":
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}")


def get_default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV_VAR)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV_VAR} must be an integer, got {raw!r}")
    return os.cpu_count() or 1


@dataclass
class RunConfig:
    """Fully resolved configuration of one CLI invocation."""
    subcommand: str
    options: Dict[str, Any] = field(default_factory=dict)
    seed: int = DEFAULT_SEED
    workers: int = 1
    config_path: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "subcommand": self.subcommand,
            "options": self.options,
            "seed": self.seed,
            "workers": self.workers,
            "config_path": self.config_path,
        }


def load_config_file(path: Optional[Path]) -> Dict[str, Any]:
    """Reads a JSON config file mapping subcommand names to option objects."""
    if path is None:
        return {}
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a JSON object")
    return data


def resolve_run_config(subcommand: str,
                       defaults: Mapping[str, Any],
                       file_config: Mapping[str, Any],
                       explicit: Mapping[str, Any],
                       config_path: Optional[str] = None,
                       workers: Optional[int] = None) -> RunConfig:
    """
    Merges options with precedence flags > config file > defaults.

    `file_config` is the whole parsed config file; the section named after the
    subcommand (e.g. "dataset build") is applied, with a top-level "seed" as a
    fallback for every section.
    """
    options = dict(defaults)
    section = file_config.get(subcommand, {})
    if not isinstance(section, dict):
        raise ConfigError(f"Config section {subcommand!r} must be an object")
    unknown = set(section) - set(defaults)
    if unknown:
        raise ConfigError(f"Unknown options in config section {subcommand!r}: {sorted(unknown)}")
    options.update(section)
    options.update({k: v for k, v in explicit.items()})

    if "seed" in explicit:
        seed = explicit["seed"]
    elif "seed" in section:
        seed = section["seed"]
    elif "seed" in file_config:
        seed = file_config["seed"]
    else:
        seed = get_default_seed()
    options["seed"] = int(seed)

    return RunConfig(
        subcommand=subcommand,
        options=options,
        seed=int(seed),
        workers=workers if workers is not None else get_default_workers(),
        config_path=str(config_path) if config_path else None,
    )
