"""
Dataset Service — builds and validates spatial speech datasets

Two build modes:
  - asr:        every corpus utterance convolved at every angle of an angle grid
                (one speaker per clip), plus a dry reference clip for the speech channel
  - soundscape: 1..5 simultaneous speakers at random directions at least 10° apart,
                speaker counts balanced across the dataset

Each clip draws from its own RNG stream derived from (seed, clip index), so the
output is identical for any worker count.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from tqdm import tqdm

from core.config import (MAX_SPEAKERS, MODE_DURATIONS, NUM_ANGLES, SAMPLE_RATE_HZ, TARGET_ENERGY)
from core.errors import ConfigError, MissingFieldError, OmniTalkError, ValidationError
from core.utils import read_audio, read_jsonl, sha256_samples, write_audio, write_jsonl
from services.impulse_bank import ImpulseBank
from services.synthesis import (ClipRecord, SourceSpec, Waveform, add_noise, apply_rir, fit_duration, mix,
                                normalize_energy, resample, sample_separated_doas)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
CLIPS_DIR = "clips"
REFS_DIR = "refs"
BUILD_MODES = ("asr", "soundscape")
AUDIO_SUFFIXES = (".wav", ".flac")
BALANCE_TOLERANCE = 0.1


@dataclass
class CorpusEntry:
    id: str
    audio_path: Path
    transcript: str
    sample_rate: Optional[int] = None


@dataclass
class DatasetConfig:
    mode: str = "soundscape"
    n_clips: Optional[int] = None
    angle_set: Optional[List[int]] = None
    n_speaker_distribution: Optional[List[float]] = None
    duration_s: Optional[float] = None
    seed: int = 0
    snr_db: Optional[float] = None
    rir_path: Optional[Path] = None
    per_source_normalize: bool = False
    target_energy: float = TARGET_ENERGY
    workers: int = 1
    progress: bool = True

    def __post_init__(self):
        if self.mode not in BUILD_MODES:
            raise ConfigError(f"Unknown dataset mode {self.mode!r}; expected one of {BUILD_MODES}")
        if self.duration_s is None:
            self.duration_s = MODE_DURATIONS[self.mode]
        if not self.duration_s > 0:
            raise ConfigError(f"duration_s must be positive, got {self.duration_s}")
        if self.n_clips is not None and self.n_clips < 1:
            raise ConfigError(f"n_clips must be >= 1, got {self.n_clips}")
        if self.mode == "soundscape" and self.n_clips is None:
            raise ConfigError("soundscape mode needs n_clips")
        if self.angle_set is not None:
            bad = [a for a in self.angle_set if not 1 <= int(a) <= NUM_ANGLES]
            if bad or not self.angle_set:
                raise ConfigError(f"angle_set must be non-empty within 1..{NUM_ANGLES}, got {bad or 'empty'}")
        if self.n_speaker_distribution is not None:
            p = np.asarray(self.n_speaker_distribution, dtype=np.float64)
            if p.shape != (MAX_SPEAKERS,) or np.any(p < 0) or p.sum() <= 0:
                raise ConfigError(f"n_speaker_distribution needs {MAX_SPEAKERS} non-negative weights")


@dataclass
class _ClipJob:
    index: int
    source_indices: List[int]
    doas: List[int]
    clip_seed: int
    rir_index: Optional[int] = None
    noise_seed: int = 0


def clip_seed(dataset_seed: int, index: int) -> int:
    """u64 seed of clip `index`, independent of generation order."""
    state = np.random.SeedSequence([int(dataset_seed), int(index)]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def resolve_clip_path(manifest_path: Path, relative: str) -> Path:
    path = Path(relative)
    return path if path.is_absolute() else Path(manifest_path).parent / path


def load_manifest(manifest_path: Path) -> List[ClipRecord]:
    return [ClipRecord.from_dict(row) for row in read_jsonl(manifest_path)]


class DatasetService:
    def __init__(self, sample_rate_hz: int = SAMPLE_RATE_HZ):
        self.sample_rate_hz = sample_rate_hz

    # ──────────────────────────────────────────────
    # Corpus
    # ──────────────────────────────────────────────

    def load_corpus(self, corpus_manifest: Path) -> List[CorpusEntry]:
        """Reads {id, audio_path, transcript, sample_rate} JSONL; paths resolve against the manifest."""
        corpus_manifest = Path(corpus_manifest)
        entries = []
        for row in read_jsonl(corpus_manifest):
            missing = [k for k in ("id", "audio_path", "transcript") if k not in row]
            if missing:
                raise MissingFieldError(f"{corpus_manifest}: corpus entry missing {missing}")
            entries.append(CorpusEntry(
                id=str(row["id"]),
                audio_path=resolve_clip_path(corpus_manifest, row["audio_path"]),
                transcript=str(row["transcript"]),
                sample_rate=row.get("sample_rate"),
            ))
        if not entries:
            raise ValidationError(f"Corpus {corpus_manifest} is empty")
        logger.info(f"Loaded corpus of {len(entries)} utterances from {corpus_manifest}")
        return entries

    def _load_waveform(self, path: Path) -> Waveform:
        samples, sr = read_audio(path)
        return resample(Waveform(samples, sr), self.sample_rate_hz)

    def _load_rirs(self, rir_path: Optional[Path]) -> List[tuple]:
        if rir_path is None:
            return []
        rir_path = Path(rir_path)
        files = ([rir_path] if rir_path.is_file() else
                 sorted(p for p in rir_path.iterdir() if p.suffix.lower() in AUDIO_SUFFIXES))
        if not files:
            raise ValidationError(f"No RIR audio found at {rir_path}")
        return [(p.stem, self._load_waveform(p)) for p in files]

    # ──────────────────────────────────────────────
    # Planning
    # ──────────────────────────────────────────────

    def _plan(self, cfg: DatasetConfig, n_corpus: int, n_rirs: int) -> List[_ClipJob]:
        jobs = []
        if cfg.mode == "asr":
            angles = [int(a) for a in (cfg.angle_set or range(1, NUM_ANGLES + 1))]
            pairs = [(s, a) for s in range(n_corpus) for a in angles]
            if cfg.n_clips is not None:
                pairs = pairs[:cfg.n_clips]
            for idx, (source, angle) in enumerate(pairs):
                jobs.append(_ClipJob(idx, [source], [angle], clip_seed(cfg.seed, idx)))
        else:
            plan_rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 2 ** 32]))
            if cfg.n_speaker_distribution is None:
                counts = np.array([(i % MAX_SPEAKERS) + 1 for i in range(cfg.n_clips)])
                plan_rng.shuffle(counts)
            else:
                p = np.asarray(cfg.n_speaker_distribution, dtype=np.float64)
                counts = plan_rng.choice(np.arange(1, MAX_SPEAKERS + 1), size=cfg.n_clips, p=p / p.sum())
            for idx, n in enumerate(counts):
                seed = clip_seed(cfg.seed, idx)
                rng = np.random.default_rng(seed)
                doas = sample_separated_doas(rng, int(n))
                sources = rng.choice(n_corpus, size=int(n), replace=int(n) > n_corpus)
                jobs.append(_ClipJob(idx, [int(s) for s in sources], doas, seed))

        for job in jobs:
            rng = np.random.default_rng(np.random.SeedSequence([job.clip_seed, 1]))
            job.noise_seed = int(rng.integers(2 ** 63))
            if n_rirs:
                job.rir_index = int(rng.integers(n_rirs))
        return jobs

    # ──────────────────────────────────────────────
    # Rendering
    # ──────────────────────────────────────────────

    def _render(self, job: _ClipJob, cfg: DatasetConfig, corpus: List[CorpusEntry],
                audio: Dict[str, Waveform], bank: ImpulseBank, rirs: List[tuple],
                out_dir: Path) -> ClipRecord:
        inputs = []
        for source_idx, doa in zip(job.source_indices, job.doas):
            w = audio[corpus[source_idx].id]
            if cfg.per_source_normalize:
                w = normalize_energy(w, cfg.target_energy)
            inputs.append((w, doa))

        clip = fit_duration(mix(inputs, bank), cfg.duration_s)
        rir_id = None
        if job.rir_index is not None:
            rir_id, rir = rirs[job.rir_index]
            clip = apply_rir(clip, rir)
        clip = add_noise(clip, cfg.snr_db, job.noise_seed)
        if not cfg.per_source_normalize:
            clip = normalize_energy(clip, cfg.target_energy)

        clip_rel = f"{CLIPS_DIR}/clip_{job.index:06d}.wav"
        samples = clip.samples.astype(np.float32)
        write_audio(out_dir / clip_rel, samples, clip.sample_rate_hz)

        reference_rel = None
        if cfg.mode == "asr":
            dry = audio[corpus[job.source_indices[0]].id]
            reference = normalize_energy(fit_duration(dry, cfg.duration_s), cfg.target_energy)
            reference_rel = f"{REFS_DIR}/ref_{job.index:06d}.wav"
            write_audio(out_dir / reference_rel, reference.samples, reference.sample_rate_hz)

        specs = sorted((SourceSpec(corpus[s].id, corpus[s].transcript, d)
                        for s, d in zip(job.source_indices, job.doas)), key=lambda s: s.doa_deg)
        record = ClipRecord(
            clip_id=f"clip_{job.index:06d}",
            clip_path=clip_rel,
            duration_s=float(cfg.duration_s),
            n_speakers=len(job.doas),
            doas_deg=sorted(job.doas),
            sources=specs,
            augmentation={"snr_db": cfg.snr_db, "rir_id": rir_id},
            seed=job.clip_seed,
            sample_rate_hz=clip.sample_rate_hz,
            sha256=sha256_samples(samples),
            reference_path=reference_rel,
        )
        return record.validate()

    def build(self, corpus_manifest: Path, bank: ImpulseBank, cfg: DatasetConfig,
              out_dir: Path) -> Dict[str, Any]:
        """Writes clips/, refs/ (asr) and manifest.jsonl under `out_dir`."""
        if bank.sample_rate_hz != self.sample_rate_hz:
            raise ConfigError(f"Bank sample rate {bank.sample_rate_hz} Hz, dataset rate {self.sample_rate_hz} Hz")
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        corpus = self.load_corpus(corpus_manifest)
        audio = {entry.id: self._load_waveform(entry.audio_path) for entry in corpus}
        rirs = self._load_rirs(cfg.rir_path)
        jobs = self._plan(cfg, len(corpus), len(rirs))
        logger.info(f"Building {cfg.mode} dataset: {len(jobs)} clips, {cfg.duration_s:g} s, "
                    f"seed={cfg.seed}, workers={cfg.workers}")

        with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as executor:
            results = executor.map(
                lambda job: self._render(job, cfg, corpus, audio, bank, rirs, out_dir), jobs)
            records = list(tqdm(results, total=len(jobs), desc="clips", disable=not cfg.progress))

        manifest_path = out_dir / MANIFEST_NAME
        write_jsonl(manifest_path, (r.to_dict() for r in records))
        logger.info(f"Wrote {len(records)} clips and {manifest_path}")
        return {
            "success": True,
            "manifest_path": manifest_path,
            "n_clips": len(records),
            "records": records,
            "errors": [],
        }

    # ──────────────────────────────────────────────
    # Validation
    # ──────────────────────────────────────────────

    def validate(self, manifest_path: Path, check_audio: bool = True,
                 energy_tolerance: Optional[float] = 1e-6,
                 balance_tolerance: Optional[float] = BALANCE_TOLERANCE) -> Dict[str, Any]:
        """
        Checks every record's invariants and, with `check_audio`, the stored
        clip (rate, exact length, content hash) and that all clips share one
        energy within `energy_tolerance` (relative; None skips it, as for
        per-source normalized builds).

        Multi-speaker manifests must also spread clips evenly over 1..5
        speakers: no bin may stray from the uniform share by more than
        `balance_tolerance` (relative) or one clip, whichever is larger. None
        skips it, as for builds with an explicit speaker distribution.
        Failures are collected, not raised.
        """
        manifest_path = Path(manifest_path)
        errors = []
        histogram = {n: 0 for n in range(1, MAX_SPEAKERS + 1)}
        energies = []
        rows = list(read_jsonl(manifest_path))
        for line_no, row in enumerate(rows, start=1):
            clip_id = row.get("clip_id", f"line {line_no}")
            try:
                record = ClipRecord.from_dict(row).validate()
                histogram[record.n_speakers] += 1
                if check_audio:
                    energies.append(self._check_clip_audio(manifest_path, record))
            except (OmniTalkError, OSError) as e:
                logger.error(f"Invalid clip {clip_id}: {e}")
                errors.append({"clip_id": clip_id, "error": f"{type(e).__name__}: {e}"})

        if not rows:
            errors.append({"clip_id": None, "error": "manifest has no records"})
        report = {
            "success": not errors,
            "n_records": len(rows),
            "errors": errors,
            "speaker_histogram": histogram,
        }
        if balance_tolerance is not None and any(histogram[n] for n in range(2, MAX_SPEAKERS + 1)):
            balance = speaker_count_balance(histogram)
            report["speaker_balance"] = balance
            if balance > max(balance_tolerance, MAX_SPEAKERS / sum(histogram.values())):
                errors.append({"clip_id": None,
                               "error": f"speaker counts {histogram} deviate {balance:.1%} from uniform"})
                report["success"] = False
        if energies:
            low, high = float(min(energies)), float(max(energies))
            report["energy_min"], report["energy_max"] = low, high
            if energy_tolerance is not None and high - low > energy_tolerance * high:
                errors.append({"clip_id": None, "error": f"clip energies span {low:.8g}..{high:.8g}"})
                report["success"] = False
        return report

    def _check_clip_audio(self, manifest_path: Path, record: ClipRecord) -> float:
        samples, sr = read_audio(resolve_clip_path(manifest_path, record.clip_path))
        if sr != record.sample_rate_hz:
            raise ValidationError(f"stored at {sr} Hz, record says {record.sample_rate_hz} Hz")
        expected = int(round(record.duration_s * record.sample_rate_hz))
        if samples.size != expected:
            raise ValidationError(f"{samples.size} samples, expected {expected}")
        if record.sha256 is not None and sha256_samples(samples) != record.sha256:
            raise ValidationError("content hash does not match manifest")
        return float(np.sum(samples ** 2))


dataset_service = DatasetService()


def speaker_count_balance(histogram: Dict[int, int]) -> float:
    """Largest relative deviation of any speaker-count bin from the uniform share."""
    counts = np.array([histogram.get(n, 0) for n in range(1, MAX_SPEAKERS + 1)], dtype=np.float64)
    expected = counts.sum() / MAX_SPEAKERS
    return float(np.max(np.abs(counts - expected)) / expected) if expected else float("inf")
