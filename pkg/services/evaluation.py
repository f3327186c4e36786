"""
Evaluation Service — DoA, speaker-count and transcript metrics

Joins prediction JSONL ({clip_id, doas_deg, n_speakers?, transcript?}) with a
dataset manifest and produces an EvalReport: MAE / median / MSE, MEEM, a
per-source-count breakdown, CDF points, the speaker-count confusion matrix
and corpus WER when transcripts are predicted.
"""

import csv
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from rapidfuzz.distance import Levenshtein
from scipy.optimize import linear_sum_assignment

from core.config import MAX_SPEAKERS
from core.errors import ConfigError, CountMismatchError, MissingFieldError, ValidationError
from core.utils import circular_distance, read_jsonl
from services.dataset import load_manifest
from services.synthesis import ClipRecord

logger = logging.getLogger(__name__)

ERROR_MODES = ("circular", "linear")
MATCHING_MODES = ("sorted", "optimal")
MEEM_BASES = ("mae", "mse")


# ──────────────────────────────────────────────
# Angular errors
# ──────────────────────────────────────────────

def circular_abs_error(a_deg, b_deg):
    return circular_distance(a_deg, b_deg)


def _pair_errors(a: np.ndarray, b: np.ndarray, mode: str) -> np.ndarray:
    if mode == "circular":
        return np.asarray(circular_distance(a, b), dtype=np.float64)
    return np.abs(a - b)


def doa_errors(pred: Sequence[float], truth: Sequence[float], mode: str = "circular",
               matching: str = "sorted") -> np.ndarray:
    """Per-source errors after sorted-index pairing or minimum-cost assignment."""
    if mode not in ERROR_MODES:
        raise ConfigError(f"Unknown error mode {mode!r}")
    if matching not in MATCHING_MODES:
        raise ConfigError(f"Unknown matching {matching!r}")
    if len(pred) != len(truth):
        raise CountMismatchError(f"{len(pred)} predicted DoAs vs {len(truth)} true DoAs")
    p = np.sort(np.asarray(pred, dtype=np.float64))
    t = np.sort(np.asarray(truth, dtype=np.float64))
    if matching == "sorted" or p.size == 0:
        return _pair_errors(p, t, mode)
    cost = _pair_errors(p[:, None], t[None, :], mode)
    rows, cols = linear_sum_assignment(cost)
    errors = np.empty(t.size)
    errors[cols] = cost[rows, cols]
    return errors


def meem(error: float, n_mics: int) -> float:
    """Error scaled by the microphone count (MAE x mics by default)."""
    if n_mics < 1:
        raise ConfigError(f"n_mics must be >= 1, got {n_mics}")
    return float(error) * n_mics


# ──────────────────────────────────────────────
# Text
# ──────────────────────────────────────────────

_PUNCT = re.compile(r"[^\w\s']")
_LOOSE_APOSTROPHE = re.compile(r"(?<!\w)'|'(?!\w)")


def normalize_text(text: str) -> List[str]:
    """Case-folds, strips punctuation (keeping in-word apostrophes), splits on whitespace."""
    text = _PUNCT.sub(" ", text.casefold())
    return _LOOSE_APOSTROPHE.sub(" ", text).split()


def word_error_counts(ref_text: str, hyp_text: str) -> Dict[str, int]:
    ref, hyp = normalize_text(ref_text), normalize_text(hyp_text)
    counts = {"substitutions": 0, "deletions": 0, "insertions": 0, "ref_words": len(ref)}
    for op in Levenshtein.editops(ref, hyp):
        if op.tag == "replace":
            counts["substitutions"] += 1
        elif op.tag == "delete":
            counts["deletions"] += 1
        elif op.tag == "insert":
            counts["insertions"] += 1
    return counts


def wer(ref_text: str, hyp_text: str) -> float:
    """Word error rate in percent; may exceed 100 with many insertions."""
    ref, hyp = normalize_text(ref_text), normalize_text(hyp_text)
    if not ref:
        if hyp:
            raise ValidationError("WER is undefined for an empty reference with a non-empty hypothesis")
        return 0.0
    return 100.0 * Levenshtein.distance(ref, hyp) / len(ref)


# ──────────────────────────────────────────────
# Counts and distributions
# ──────────────────────────────────────────────

def confusion_matrix(preds: Sequence[int], labels: Sequence[int],
                     n_classes: int = MAX_SPEAKERS) -> Tuple[np.ndarray, List[int]]:
    """Row-normalized P(pred=j | label=i) over classes 1..n_classes, plus the unsupported labels."""
    preds, labels = np.asarray(preds, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise CountMismatchError(f"{preds.size} predictions vs {labels.size} labels")
    for name, values in (("prediction", preds), ("label", labels)):
        bad = values[(values < 1) | (values > n_classes)]
        if bad.size:
            raise ValidationError(f"{name} class {int(bad[0])} outside 1..{n_classes}")
    counts = np.zeros((n_classes, n_classes))
    np.add.at(counts, (labels - 1, preds - 1), 1.0)
    support = counts.sum(axis=1, keepdims=True)
    matrix = np.divide(counts, support, out=np.zeros_like(counts), where=support > 0)
    unsupported = [i + 1 for i in range(n_classes) if support[i, 0] == 0]
    return matrix, unsupported


def cdf(errors: Sequence[float]) -> Tuple[List[Tuple[float, float]], float, float]:
    """Empirical CDF points (error, i/n) plus mean and median."""
    e = np.sort(np.asarray(errors, dtype=np.float64))
    if e.size == 0:
        raise ValidationError("CDF of an empty error set")
    fractions = np.arange(1, e.size + 1) / e.size
    return [(float(x), float(f)) for x, f in zip(e, fractions)], float(e.mean()), float(np.median(e))


# ──────────────────────────────────────────────
# Reports
# ──────────────────────────────────────────────

@dataclass
class EvalReport:
    mae_deg: float
    median_deg: float
    mse_deg2: float
    meem: float
    meem_basis: str
    n_mics: int
    n_clips: int
    per_clip: List[Dict[str, Any]]
    cdf_points: List[Tuple[float, float]]
    per_count: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    count_errors: List[Dict[str, Any]] = field(default_factory=list)
    count_accuracy: Optional[float] = None
    confusion: Optional[List[List[float]]] = None
    confusion_unsupported: List[int] = field(default_factory=list)
    missing_predictions: List[str] = field(default_factory=list)
    wer: Optional[float] = None
    error_mode: str = "circular"
    matching: str = "sorted"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _summary(errors: np.ndarray) -> Dict[str, Any]:
    points, mean, median = cdf(errors)
    return {"n_errors": int(errors.size), "mae_deg": mean, "median_deg": median,
            "mse_deg2": float(np.mean(errors ** 2)), "cdf_points": points}


class EvaluationService:
    def evaluate(self, predictions: Sequence[Dict[str, Any]], truth: Sequence[ClipRecord],
                 n_mics: int = 1, error_mode: str = "circular", matching: str = "sorted",
                 meem_basis: str = "mae") -> EvalReport:
        if meem_basis not in MEEM_BASES:
            raise ConfigError(f"Unknown MEEM basis {meem_basis!r}")
        by_id = {}
        for p in predictions:
            if "clip_id" not in p or "doas_deg" not in p:
                raise MissingFieldError(f"Prediction entry needs clip_id and doas_deg: {p}")
            by_id[str(p["clip_id"])] = p

        per_clip, count_errors, missing = [], [], []
        pred_counts, true_counts = [], []
        by_count: Dict[int, List[float]] = {}
        ref_words = edits = 0
        has_text = False
        for record in truth:
            pred = by_id.get(record.clip_id)
            if pred is None:
                missing.append(record.clip_id)
                continue
            n_pred = int(pred.get("n_speakers", len(pred["doas_deg"])))
            if not 1 <= n_pred <= MAX_SPEAKERS:
                logger.warning(f"{record.clip_id}: predicted speaker count {n_pred} outside 1..{MAX_SPEAKERS}")
                count_errors.append({"clip_id": record.clip_id, "predicted": n_pred,
                                     "truth": record.n_speakers})
                continue
            pred_counts.append(n_pred)
            true_counts.append(record.n_speakers)

            if "transcript" in pred:
                has_text = True
                reference = " ".join(s.transcript for s in record.sources)
                counts = word_error_counts(reference, str(pred["transcript"]))
                ref_words += counts["ref_words"]
                edits += counts["substitutions"] + counts["deletions"] + counts["insertions"]

            if len(pred["doas_deg"]) != record.n_speakers:
                count_errors.append({"clip_id": record.clip_id, "predicted": len(pred["doas_deg"]),
                                     "truth": record.n_speakers})
                continue
            errors = doa_errors(pred["doas_deg"], record.doas_deg, error_mode, matching)
            per_clip.append({"clip_id": record.clip_id, "n_speakers": record.n_speakers,
                             "errors_deg": [float(e) for e in errors]})
            by_count.setdefault(record.n_speakers, []).extend(float(e) for e in errors)

        if missing:
            logger.warning(f"{len(missing)} clips have no prediction (first: {missing[0]})")
        if not per_clip:
            raise ValidationError("No clip could be scored (all predictions missing or count-mismatched)")

        all_errors = np.array([e for clip in per_clip for e in clip["errors_deg"]])
        overall = _summary(all_errors)
        per_count = {str(n): _summary(np.array(e))
                     for n, e in sorted(by_count.items())}
        per_count["all"] = dict(overall)
        matrix, unsupported = confusion_matrix(pred_counts, true_counts)
        basis = overall["mae_deg"] if meem_basis == "mae" else overall["mse_deg2"]
        if ref_words == 0 and edits > 0:
            raise ValidationError("WER is undefined: references are empty but hypotheses are not")
        corpus_wer = (100.0 * edits / ref_words if ref_words else 0.0) if has_text else None

        report = EvalReport(
            mae_deg=overall["mae_deg"],
            median_deg=overall["median_deg"],
            mse_deg2=overall["mse_deg2"],
            meem=meem(basis, n_mics),
            meem_basis=meem_basis,
            n_mics=n_mics,
            n_clips=len(per_clip),
            per_clip=per_clip,
            cdf_points=overall["cdf_points"],
            per_count=per_count,
            count_errors=count_errors,
            count_accuracy=float(np.mean(np.array(pred_counts) == np.array(true_counts))),
            confusion=matrix.tolist(),
            confusion_unsupported=unsupported,
            missing_predictions=missing,
            wer=corpus_wer,
            error_mode=error_mode,
            matching=matching,
        )
        logger.info(f"Evaluated {report.n_clips} clips: MAE {report.mae_deg:.2f} deg, "
                    f"median {report.median_deg:.2f} deg, {len(count_errors)} count errors")
        return report

    def evaluate_files(self, pred_path: Path, truth_path: Path, **kwargs) -> EvalReport:
        return self.evaluate(list(read_jsonl(pred_path)), load_manifest(truth_path), **kwargs)

    def write_report(self, report: EvalReport, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2)
        return path

    def write_cdf_csv(self, points: Sequence[Tuple[float, float]], path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["error_deg", "cum_fraction"])
            for error, fraction in points:
                writer.writerow([f"{error:.6f}", f"{fraction:.6f}"])
        return path


evaluation_service = EvaluationService()
