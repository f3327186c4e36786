import hashlib
import json
import logging
import platform
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Tuple

import numpy as np
import soundfile as sf

from .config import NUM_ANGLES, STAMP_FILENAME
from .errors import AngleRangeError, EmptySignalError, FormatError

logger = logging.getLogger(__name__)

STAMPED_PACKAGES = ("numpy", "scipy", "librosa", "soundfile", "click", "rapidfuzz")


# ──────────────────────────────────────────────
# Angles
# ──────────────────────────────────────────────

def check_angle(theta_deg) -> int:
    """Validates an integer direction in 1..360 and returns it as int."""
    try:
        theta = int(theta_deg)
    except (TypeError, ValueError):
        raise AngleRangeError(f"Angle must be an integer degree, got {theta_deg!r}")
    if theta != theta_deg or not 1 <= theta <= NUM_ANGLES:
        raise AngleRangeError(f"Angle {theta_deg} outside 1..{NUM_ANGLES}")
    return theta


def circular_distance(a_deg, b_deg):
    """Shortest angular distance on the circle, in [0, 180]. Works on arrays."""
    d = np.mod(np.abs(np.asarray(a_deg, dtype=np.float64) - np.asarray(b_deg, dtype=np.float64)), 360.0)
    out = np.minimum(d, 360.0 - d)
    return float(out) if np.ndim(out) == 0 else out


def min_pairwise_separation(angles: Iterable[float]) -> float:
    angles = list(angles)
    if len(angles) < 2:
        return 360.0
    return min(circular_distance(a, b) for i, a in enumerate(angles) for b in angles[i + 1:])


# ──────────────────────────────────────────────
# Audio I/O
# ──────────────────────────────────────────────

def read_audio(path: Path) -> Tuple[np.ndarray, int]:
    """Reads WAV/FLAC as float64 mono (channels are averaged)."""
    data, sr = sf.read(str(path), dtype="float64", always_2d=True)
    if data.shape[0] == 0:
        raise EmptySignalError(f"{path}: audio file has no samples")
    if data.shape[1] > 1:
        logger.debug(f"Downmixing {data.shape[1]} channels in {path}")
    return data.mean(axis=1), int(sr)


def write_audio(path: Path, samples: np.ndarray, sample_rate_hz: int) -> None:
    """Writes mono 32-bit float WAV (no clipping after energy normalization)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), np.asarray(samples, dtype=np.float32), sample_rate_hz, subtype="FLOAT")


def sha256_samples(samples: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(samples, dtype="<f4").tobytes()).hexdigest()


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ──────────────────────────────────────────────
# JSONL
# ──────────────────────────────────────────────

def read_jsonl(path: Path) -> Iterator[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{line_no}: invalid JSON ({e})")


def write_jsonl(path: Path, rows: Iterable[Dict[str, Any]]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False))
            f.write("\n")
            count += 1
    return count


# ──────────────────────────────────────────────
# Reproducibility stamp
# ──────────────────────────────────────────────

def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in STAMPED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "missing"
    return versions


def write_stamp(out_dir: Path, command: List[str], run_config: Dict[str, Any],
                filename: str = STAMP_FILENAME) -> Path:
    """Writes the reproducibility stamp (config + seed + versions) beside a run's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = {
        "command": command,
        "config": run_config,
        "seed": run_config.get("seed"),
        "versions": package_versions(),
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    path = out_dir / filename
    with open(path, "w", encoding="utf-8") as f:
        json.dump(stamp, f, indent=2, sort_keys=True, default=str)
    return path
