"""
LLM Bridge Service — projection into the language-model embedding space and
instruction-tuning QA pairs

The projection is a single linear map W (+ optional bias) from the 1024-d
spatial embedding to a configurable LLM hidden size. QA pairs fill fixed
system / user prompts per task with ground truth from dataset manifests.
"""

import logging
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from core.binary import read_tensor_file, write_tensor_file
from core.config import EMBED_DIM
from core.errors import ConfigError, CountMismatchError, FormatError, MissingFieldError, ShapeMismatchError
from core.utils import read_jsonl, write_jsonl
from services.synthesis import ClipRecord

logger = logging.getLogger(__name__)

SPATIAL_DIM = 2 * EMBED_DIM

# ──────────────────────────────────────────────
# Prompt templates
# ──────────────────────────────────────────────

TEMPLATES = {
    "asr": {
        "system": "You are an assistant that provides the summarization of the speech. "
                  "Respond with the the correct summarization.",
        "user": "What is the summarization of the speech?",
    },
    "spatial_asr": {
        "system": "You are an assistant that provides the direction of the speech in degrees and a "
                  "summarization of the speech. Respond with the exact angle in degrees and the "
                  "correct summarization.",
        "user": "What is the direction of speech in degrees and summarization of the speech?",
    },
    "doa": {
        "system": "You are an assistant that identifies the direction of sound. "
                  "Respond with the exact angle in degrees.",
        "user": "What is the direction of the speech source?",
    },
    "nspk": {
        "system": "You are an assistant that identifies how many people are speaking at the same time. "
                  "Respond with the exact numbers.",
        "user": "How many people are speaking?",
    },
    "multi_doa": {
        "system": "You are an assistant that identifies how many people are speaking at the same time "
                  "and the directions of speech. Respond with the exact angle in degrees.",
        "user": "How many people are speaking? What are the directions of the sound sources?",
    },
}
TASK_TYPES = tuple(TEMPLATES)

# "integer" -> 45, "decimal1" -> 39.0
DOA_FORMATS = ("integer", "decimal1")
DEFAULT_DOA_FORMAT = {"doa": "integer", "spatial_asr": "integer", "multi_doa": "decimal1"}
_SINGLE_SOURCE_TASKS = ("asr", "spatial_asr", "doa")


def format_degrees(value: float, style: str) -> str:
    """Half-up rounding to an integer or one decimal."""
    if style not in DOA_FORMATS:
        raise ConfigError(f"Unknown DoA format {style!r}; expected one of {DOA_FORMATS}")
    quantum = Decimal("1") if style == "integer" else Decimal("0.1")
    return str(Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP))


def _count_sentence(n: int) -> str:
    return "There is one speech source." if n == 1 else f"There are {n} speech sources."


def _multi_doa_response(doas: Sequence[float], style: str) -> str:
    angles = [format_degrees(d, style) for d in sorted(doas)]
    if len(angles) == 1:
        return f"{_count_sentence(1)} The speech source's degree of arrival is {angles[0]} degrees."
    items = [f"{'Speech' if k == 1 else 'speech'} source {k}'s degree of arrival is {a} degrees"
             for k, a in enumerate(angles, start=1)]
    listing = ", ".join(items[:-1]) + ", and " + items[-1]
    return f"{_count_sentence(len(angles))} {listing}."


@dataclass
class QAPair:
    task_type: str
    system: str
    user: str
    response: str
    clip: str

    def to_dict(self) -> Dict[str, str]:
        return {"task_type": self.task_type, "system": self.system, "user": self.user,
                "response": self.response, "clip": self.clip}


def _transcript(record: ClipRecord) -> str:
    text = record.sources[0].transcript if record.sources else ""
    if not text:
        raise MissingFieldError(f"{record.clip_id}: no transcript for a speech task")
    return text


def make_qa_pair(record: ClipRecord, task_type: str, doa_format: Optional[str] = None) -> QAPair:
    if task_type not in TEMPLATES:
        raise ConfigError(f"Unknown task type {task_type!r}; expected one of {TASK_TYPES}")
    if task_type in _SINGLE_SOURCE_TASKS and record.n_speakers != 1:
        raise CountMismatchError(f"{record.clip_id}: {task_type} needs a single-speaker clip, "
                                 f"got {record.n_speakers}")
    if not record.doas_deg and task_type != "asr":
        raise MissingFieldError(f"{record.clip_id}: no DoA ground truth")
    style = doa_format or DEFAULT_DOA_FORMAT.get(task_type, "integer")

    if task_type == "asr":
        response = _transcript(record)
    elif task_type == "spatial_asr":
        response = (f"The speaker is speaking approximately at angle "
                    f"{format_degrees(record.doas_deg[0], style)} degrees. "
                    f"The speech says: {_transcript(record)}")
    elif task_type == "doa":
        response = f"The speech is coming from {format_degrees(record.doas_deg[0], style)} degrees."
    elif task_type == "nspk":
        response = _count_sentence(record.n_speakers)
    else:
        response = _multi_doa_response(record.doas_deg, style)

    template = TEMPLATES[task_type]
    return QAPair(task_type, template["system"], template["user"], response, record.clip_id)


def make_qa_pairs(records: Sequence[ClipRecord], task_type: str,
                  doa_format: Optional[str] = None) -> List[QAPair]:
    pairs = [make_qa_pair(r, task_type, doa_format) for r in records]
    logger.info(f"Generated {len(pairs)} {task_type} QA pairs")
    return pairs


def export_jsonl(pairs: Sequence[QAPair], path: Path) -> int:
    return write_jsonl(Path(path), (p.to_dict() for p in pairs))


def load_qa_jsonl(path: Path) -> List[QAPair]:
    pairs = []
    for row in read_jsonl(Path(path)):
        missing = [k for k in ("task_type", "system", "user", "response", "clip") if k not in row]
        if missing:
            raise MissingFieldError(f"{path}: QA entry missing {missing}")
        pairs.append(QAPair(row["task_type"], row["system"], row["user"], row["response"], row["clip"]))
    return pairs


# ──────────────────────────────────────────────
# Projection
# ──────────────────────────────────────────────

@dataclass
class Projection:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeMismatchError(f"Projection weight must be 2-D, got {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.llm_dim,):
                raise ShapeMismatchError(f"Bias shape {self.bias.shape} != ({self.llm_dim},)")
        if not np.all(np.isfinite(self.weight)) or (self.bias is not None and not np.all(np.isfinite(self.bias))):
            raise ConfigError("Projection parameters must be finite")

    @property
    def llm_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


def init_projection(llm_dim: int, in_dim: int = SPATIAL_DIM, seed: int = 0, bias: bool = True) -> Projection:
    """Uniform(-1/sqrt(in_dim), 1/sqrt(in_dim)) init, float32-representable."""
    if llm_dim < 1 or in_dim < 1:
        raise ConfigError(f"Projection dims must be positive, got {llm_dim}x{in_dim}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(in_dim)
    weight = rng.uniform(-bound, bound, (llm_dim, in_dim)).astype(np.float32)
    b = rng.uniform(-bound, bound, llm_dim).astype(np.float32) if bias else None
    return Projection(weight, b)


def project(p: Projection, z: np.ndarray) -> np.ndarray:
    """W z (+ b) for a vector or a [N x in_dim] batch."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != p.in_dim:
        raise ShapeMismatchError(f"Projection expects {p.in_dim}-d input, got {z.shape}")
    out = z @ p.weight.T
    return out + p.bias if p.bias is not None else out


def build_llm_prefix(spatial: np.ndarray, speech_pooled: np.ndarray,
                     spatial_proj: Projection, speech_proj: Projection) -> np.ndarray:
    """[1 + POOL_SIZE, llm_dim] input prefix: projected spatial token, then projected speech tokens."""
    if spatial_proj.llm_dim != speech_proj.llm_dim:
        raise ShapeMismatchError(
            f"Projections disagree on llm_dim ({spatial_proj.llm_dim} vs {speech_proj.llm_dim})")
    speech_pooled = np.asarray(speech_pooled, dtype=np.float64)
    if speech_pooled.ndim != 2:
        raise ShapeMismatchError(f"Pooled speech embedding must be [tokens x hidden], got {speech_pooled.shape}")
    spatial_token = project(spatial_proj, np.asarray(spatial).reshape(1, -1))
    return np.vstack([spatial_token, project(speech_proj, speech_pooled)])


def export_projection(p: Projection, path: Path) -> Path:
    meta = {"kind": "projection", "in_dim": p.in_dim, "llm_dim": p.llm_dim, "has_bias": p.bias is not None}
    arrays = [("weight", p.weight)] + ([("bias", p.bias)] if p.bias is not None else [])
    write_tensor_file(Path(path), meta, arrays)
    logger.info(f"Saved {p.llm_dim}x{p.in_dim} projection to {path}")
    return Path(path)


def load_projection(path: Path) -> Projection:
    meta, arrays = read_tensor_file(Path(path))
    if meta.get("kind") != "projection" or "weight" not in arrays:
        raise FormatError(f"{path}: not a projection checkpoint")
    return Projection(arrays["weight"], arrays.get("bias") if meta.get("has_bias") else None)
