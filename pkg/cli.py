import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
from click.core import ParameterSource

# Add project root to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from core.config import (BANK_FFT_SIZE, BANK_MIN_DISTANCE, BANK_NUM_RESONANCES, BANK_Q_RANGE,
                         IR_LENGTH_SAMPLES, PAIR_GRID_STEP_DEG, RunConfig, SAMPLE_RATE_HZ,
                         load_config_file, resolve_run_config)
from core.errors import OmniTalkError, StorageError, ValidationError
from core.utils import read_audio, read_jsonl, write_jsonl, write_stamp

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
_DEFAULT_SOURCES = (ParameterSource.DEFAULT, ParameterSource.DEFAULT_MAP)


# ──────────────────────────────────────────────
# Helpers
# ──────────────────────────────────────────────

def _resolve(ctx: click.Context, subcommand: str, defaults: Dict[str, Any]) -> RunConfig:
    """Flags given on the command line win over the config file section, which wins over defaults."""
    explicit = {name: value for name, value in ctx.params.items()
                if name in defaults and ctx.get_parameter_source(name) not in _DEFAULT_SOURCES}
    return resolve_run_config(subcommand, defaults, ctx.obj["config"], explicit,
                              config_path=ctx.obj["config_path"], workers=ctx.obj["workers"])


def _require(options: Dict[str, Any], *names: str) -> None:
    for name in names:
        if options.get(name) is None:
            raise click.UsageError(f"Missing option '--{name.replace('_', '-')}'")


def _int_list(value) -> Optional[List[int]]:
    if value is None or isinstance(value, (list, tuple)):
        return None if value is None else [int(v) for v in value]
    return [int(v) for v in str(value).split(",") if v.strip()]


def _snr_list(value) -> List[Optional[float]]:
    items = value if isinstance(value, (list, tuple)) else str(value).split(",")
    snrs = []
    for item in items:
        text = str(item).strip().lower()
        snrs.append(None if text in ("inf", "clean", "none") else float(text))
    return snrs


def _stamp(ctx: click.Context, rc: RunConfig, out: Path, is_dir: bool = False) -> Path:
    out = Path(out)
    if is_dir:
        return write_stamp(out, ctx.obj["argv"], rc.to_dict())
    return write_stamp(out.parent, ctx.obj["argv"], rc.to_dict(), filename=f"{out.name}.stamp.json")


def _load_waveform(path: Path):
    from services.synthesis import Waveform
    samples, sr = read_audio(Path(path))
    return Waveform(samples, sr)


# ──────────────────────────────────────────────
# Root group
# ──────────────────────────────────────────────

@click.group()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False, path_type=Path), default=None,
              help='JSON config file with one section per subcommand.')
@click.option('--workers', type=int, default=None, help='Worker threads (default: available cores).')
@click.option('--verbose/--quiet', default=None, help='DEBUG or WARNING logging.')
@click.option('--progress/--no-progress', default=True, help='Show progress bars.')
@click.pass_context
def cli(ctx, config_path, workers, verbose, progress):
    """OmniTalk monaural spatial-audio toolkit."""
    level = logging.INFO if verbose is None else (logging.DEBUG if verbose else logging.WARNING)
    logging.basicConfig(level=level, format=LOG_FORMAT)
    logging.getLogger().setLevel(level)
    ctx.ensure_object(dict)
    ctx.obj.setdefault("argv", sys.argv[1:])
    ctx.obj.update(config=load_config_file(config_path), config_path=config_path,
                   workers=workers, progress=progress)


# ──────────────────────────────────────────────
# bank
# ──────────────────────────────────────────────

@cli.group()
def bank():
    """Direction-dependent frequency response banks."""


@bank.command("synth")
@click.option('--out', type=click.Path(path_type=Path), default=None, help='Bank file to write.')
@click.option('--num-resonances', type=int, default=BANK_NUM_RESONANCES)
@click.option('--q-min', type=float, default=BANK_Q_RANGE[0])
@click.option('--q-max', type=float, default=BANK_Q_RANGE[1])
@click.option('--fft-size', type=int, default=BANK_FFT_SIZE)
@click.option('--sample-rate', type=int, default=SAMPLE_RATE_HZ)
@click.option('--allow-flat', is_flag=True, default=False, help='Permit an all-flat bank (0 resonances).')
@click.option('--min-distance', type=float, default=BANK_MIN_DISTANCE)
@click.option('--seed', type=int, default=None)
@click.pass_context
def bank_synth(ctx, **_):
    """Synthesizes the surrogate microstructure bank."""
    from services.impulse_bank import BankParams, save_bank, synth_bank

    rc = _resolve(ctx, "bank synth", {
        "out": None, "num_resonances": BANK_NUM_RESONANCES, "q_min": BANK_Q_RANGE[0],
        "q_max": BANK_Q_RANGE[1], "fft_size": BANK_FFT_SIZE, "sample_rate": SAMPLE_RATE_HZ,
        "allow_flat": False, "min_distance": BANK_MIN_DISTANCE, "seed": None,
    })
    o = rc.options
    _require(o, "out")
    params = BankParams(int(o["num_resonances"]), (float(o["q_min"]), float(o["q_max"])), rc.seed,
                        bool(o["allow_flat"]), float(o["min_distance"]))
    out = save_bank(synth_bank(params, int(o["sample_rate"]), int(o["fft_size"])), Path(o["out"]))
    _stamp(ctx, rc, out)
    click.echo(f"Wrote bank {out}")


@bank.command("inspect")
@click.option('--bank', 'bank_path', type=click.Path(path_type=Path), required=True)
@click.option('--ir-length', type=int, default=IR_LENGTH_SAMPLES)
def bank_inspect(bank_path, ir_length):
    """Prints a JSON summary of a bank (distinguishability, smoothness, IR energies)."""
    from services.impulse_bank import inspect_bank, load_bank

    summary = inspect_bank(load_bank(bank_path), ir_length)
    click.echo(json.dumps(summary, indent=2, sort_keys=True, default=str))


@bank.command("import")
@click.option('--dir', 'directory', type=click.Path(path_type=Path), default=None,
              help='Directory holding ir_001.wav .. ir_360.wav.')
@click.option('--out', type=click.Path(path_type=Path), default=None)
@click.option('--fft-size', type=int, default=BANK_FFT_SIZE)
@click.option('--sample-rate', type=int, default=SAMPLE_RATE_HZ)
@click.option('--min-distance', type=float, default=BANK_MIN_DISTANCE)
@click.pass_context
def bank_import(ctx, **_):
    """Builds a bank from measured per-degree impulse responses."""
    from services.impulse_bank import import_impulse_files, save_bank

    rc = _resolve(ctx, "bank import", {
        "directory": None, "out": None, "fft_size": BANK_FFT_SIZE,
        "sample_rate": SAMPLE_RATE_HZ, "min_distance": BANK_MIN_DISTANCE, "seed": None,
    })
    o = rc.options
    _require(o, "directory", "out")
    imported = import_impulse_files(Path(o["directory"]), int(o["fft_size"]), int(o["sample_rate"]),
                                    float(o["min_distance"]))
    out = save_bank(imported, Path(o["out"]))
    _stamp(ctx, rc, out)
    click.echo(f"Wrote bank {out}")


# ──────────────────────────────────────────────
# dataset
# ──────────────────────────────────────────────

@cli.group()
def dataset():
    """Synthetic spatial speech datasets."""


@dataset.command("build")
@click.option('--mode', type=click.Choice(["asr", "soundscape"]), default="soundscape")
@click.option('--bank', 'bank_path', type=click.Path(path_type=Path), default=None)
@click.option('--corpus', type=click.Path(path_type=Path), default=None, help='Corpus JSONL manifest.')
@click.option('--out', type=click.Path(path_type=Path), default=None, help='Output directory.')
@click.option('--clips', type=int, default=None)
@click.option('--duration', type=float, default=None, help='Clip length in seconds (mode default).')
@click.option('--angles', default=None, help='Comma-separated angle grid, e.g. 90,180.')
@click.option('--snr', type=float, default=None, help='Additive noise SNR in dB.')
@click.option('--rir', type=click.Path(path_type=Path), default=None, help='RIR file or directory.')
@click.option('--per-source-normalize', is_flag=True, default=False)
@click.option('--seed', type=int, default=None)
@click.pass_context
def dataset_build(ctx, **_):
    """Renders clips and writes manifest.jsonl."""
    from services.dataset import DatasetConfig, dataset_service
    from services.impulse_bank import load_bank, to_time_domain

    rc = _resolve(ctx, "dataset build", {
        "mode": "soundscape", "bank_path": None, "corpus": None, "out": None, "clips": None,
        "duration": None, "angles": None, "snr": None, "rir": None, "per_source_normalize": False,
        "speaker_distribution": None, "seed": None,
    })
    o = rc.options
    _require(o, "bank_path", "corpus", "out")
    cfg = DatasetConfig(
        mode=o["mode"],
        n_clips=o["clips"],
        angle_set=_int_list(o["angles"]),
        n_speaker_distribution=o["speaker_distribution"],
        duration_s=o["duration"],
        seed=rc.seed,
        snr_db=o["snr"],
        rir_path=Path(o["rir"]) if o["rir"] else None,
        per_source_normalize=bool(o["per_source_normalize"]),
        workers=rc.workers,
        progress=ctx.obj["progress"],
    )
    irs = to_time_domain(load_bank(Path(o["bank_path"])))
    result = dataset_service.build(Path(o["corpus"]), irs, cfg, Path(o["out"]))
    _stamp(ctx, rc, Path(o["out"]), is_dir=True)
    click.echo(f"Wrote {result['n_clips']} clips to {result['manifest_path']}")


@dataset.command("validate")
@click.option('--data', type=click.Path(path_type=Path), required=True, help='Dataset manifest.jsonl.')
@click.option('--skip-audio', is_flag=True, default=False, help='Check records only.')
@click.option('--skip-energy', is_flag=True, default=False,
              help='Allow unequal clip energies (per-source normalized builds).')
@click.option('--skip-balance', is_flag=True, default=False,
              help='Allow uneven speaker counts (builds with a speaker_distribution config).')
def dataset_validate(data, skip_audio, skip_energy, skip_balance):
    """Checks every record and stored clip; exits 4 when anything is invalid."""
    from services.dataset import BALANCE_TOLERANCE, dataset_service

    report = dataset_service.validate(data, check_audio=not skip_audio,
                                     energy_tolerance=None if skip_energy else 1e-6,
                                     balance_tolerance=None if skip_balance else BALANCE_TOLERANCE)
    click.echo(json.dumps(report, indent=2, default=str))
    if not report["success"]:
        raise ValidationError(f"{len(report['errors'])} invalid records in {data}")


# ──────────────────────────────────────────────
# features
# ──────────────────────────────────────────────

@cli.group()
def features():
    """Log-mel feature extraction."""


@features.command("extract")
@click.option('--preset', 'preset_name', type=click.Choice(["asr", "soundscape"]), default="soundscape")
@click.option('--in', 'in_path', type=click.Path(path_type=Path), default=None, help='Input WAV.')
@click.option('--out', type=click.Path(path_type=Path), default=None, help='Matrix file to write.')
@click.pass_context
def features_extract(ctx, **_):
    """Writes the log-mel matrix of one clip."""
    from services.features import log_mel, preset, save_matrix
    from services.synthesis import resample

    rc = _resolve(ctx, "features extract", {"preset_name": "soundscape", "in_path": None, "out": None,
                                            "seed": None})
    o = rc.options
    _require(o, "in_path", "out")
    cfg = preset(o["preset_name"])
    clip = _load_waveform(Path(o["in_path"]))
    if clip.sample_rate_hz != cfg.sample_rate_hz:
        logger.info(f"Resampling {o['in_path']} from {clip.sample_rate_hz} Hz to {cfg.sample_rate_hz} Hz")
        clip = resample(clip, cfg.sample_rate_hz)
    mel = log_mel(clip, cfg)
    out = save_matrix(mel.values, Path(o["out"]))
    _stamp(ctx, rc, out)
    click.echo(f"Wrote {mel.values.shape[0]}x{mel.values.shape[1]} log-mel to {out}")


# ──────────────────────────────────────────────
# train / predict
# ──────────────────────────────────────────────

_TRAIN_DEFAULTS = {
    "data": None, "out": None, "preset_name": "soundscape", "epochs": 20, "batch_size": 32,
    "lr": 1e-3, "patience": 5, "val_fraction": 0.2, "scheduler": "reduce_on_plateau",
    "freeze_norm_stats": False, "seed": None,
}


def _train_options(f):
    for decorator in reversed([
        click.option('--data', type=click.Path(path_type=Path), default=None, help='Dataset manifest.jsonl.'),
        click.option('--out', type=click.Path(path_type=Path), default=None, help='Checkpoint to write.'),
        click.option('--preset', 'preset_name', type=click.Choice(["asr", "soundscape"]), default="soundscape"),
        click.option('--epochs', type=int, default=20),
        click.option('--batch-size', type=int, default=32),
        click.option('--lr', type=float, default=1e-3),
        click.option('--patience', type=int, default=5),
        click.option('--val-fraction', type=float, default=0.2),
        click.option('--scheduler', type=click.Choice(["reduce_on_plateau", "none"]), default="reduce_on_plateau"),
        click.option('--freeze-norm-stats', is_flag=True, default=False),
        click.option('--seed', type=int, default=None),
    ]):
        f = decorator(f)
    return f


def _fit(ctx: click.Context, rc: RunConfig, model, n_sources: Optional[int]) -> None:
    from services.encoders import TrainConfig, load_feature_set, save_model, train

    o = rc.options
    data = load_feature_set(Path(o["data"]), o["preset_name"], n_sources, progress=ctx.obj["progress"])
    cfg = TrainConfig(batch_size=int(o["batch_size"]), epochs=int(o["epochs"]), lr=float(o["lr"]),
                      patience=int(o["patience"]), scheduler=o["scheduler"], seed=rc.seed,
                      val_fraction=float(o["val_fraction"]), freeze_norm_stats=bool(o["freeze_norm_stats"]),
                      progress=ctx.obj["progress"])
    result = train(model(data.features.shape[1:]), data, cfg)
    out = save_model(result.model, Path(o["out"]))
    history_path = out.parent / f"{out.name}.history.json"
    with open(history_path, "w", encoding="utf-8") as f:
        json.dump(result.history, f, indent=2)
    _stamp(ctx, rc, out)
    best = result.history[result.best_epoch - 1] if result.history else {}
    click.echo(f"Wrote {out} (best epoch {result.best_epoch}, val loss {best.get('val_loss', float('nan')):.4f})")


@cli.group("train")
def train_group():
    """Encoder training."""


@train_group.command("doa")
@click.option('--sources', type=int, default=1, help='Number of sources the encoder regresses.')
@click.option('--target-encoding', type=click.Choice(["linear", "sincos"]), default="linear")
@_train_options
@click.pass_context
def train_doa(ctx, **_):
    """Trains a DoA regression encoder on clips with exactly --sources speakers."""
    from services.encoders import build_doa_encoder

    rc = _resolve(ctx, "train doa", dict(_TRAIN_DEFAULTS, sources=1, target_encoding="linear"))
    o = rc.options
    _require(o, "data", "out")
    n = int(o["sources"])
    _fit(ctx, rc, lambda shape: build_doa_encoder(n, shape, rc.seed, target_encoding=o["target_encoding"]), n)


@train_group.command("nspk")
@_train_options
@click.pass_context
def train_nspk(ctx, **_):
    """Trains the speaker-count classifier."""
    from services.encoders import build_nspk_encoder

    rc = _resolve(ctx, "train nspk", dict(_TRAIN_DEFAULTS))
    _require(rc.options, "data", "out")
    _fit(ctx, rc, lambda shape: build_nspk_encoder(shape, rc.seed), None)


@cli.command()
@click.option('--model', 'model_path', type=click.Path(path_type=Path), required=True)
@click.option('--in', 'in_path', type=click.Path(path_type=Path), required=True, help='Input WAV.')
def predict(model_path, in_path):
    """Prints predicted DoAs (DoA model) or the speaker count (count model)."""
    from services.encoders import load_model, predict_doa, predict_nspk
    from services.features import PRESETS, log_mel

    model = load_model(model_path)
    matching = [cfg for cfg in PRESETS.values() if cfg.n_mels == model.input_shape[0]]
    if not matching:
        raise ValidationError(f"No feature preset has {model.input_shape[0]} mel bands")
    mel = log_mel(_load_waveform(in_path), matching[0])
    if model.task == "nspk":
        n, probs = predict_nspk(model, mel)
        click.echo(json.dumps({"n_speakers": n, "probabilities": [float(p) for p in probs]}))
    else:
        doas = predict_doa(model, mel)
        click.echo(json.dumps({"n_speakers": len(doas), "doas_deg": doas}))


# ──────────────────────────────────────────────
# oracle
# ──────────────────────────────────────────────

@cli.group()
def oracle():
    """Training-free spectral matching."""


@oracle.command("doa")
@click.option('--bank', 'bank_path', type=click.Path(path_type=Path), required=True)
@click.option('--in', 'in_path', type=click.Path(path_type=Path), required=True, help='Input WAV.')
@click.option('--probe-mode', type=click.Choice(["flat", "whitened"]), default="flat")
@click.option('--pair', is_flag=True, default=False, help='Two-source grid search instead.')
@click.option('--step', type=int, default=PAIR_GRID_STEP_DEG, help='Pair search grid in degrees.')
def oracle_doa(bank_path, in_path, probe_mode, pair, step):
    """Prints the estimate and score table as CSV on stdout."""
    from services.impulse_bank import load_bank
    from services.oracle import matched_filter_doa, pair_search_doa

    fr_bank = load_bank(bank_path)
    clip = _load_waveform(in_path)
    if pair:
        doas, residual = pair_search_doa(clip, fr_bank, step)
        click.echo("source,doa_deg,residual")
        for k, theta in enumerate(doas, start=1):
            click.echo(f"{k},{theta},{residual:.6f}")
        return
    theta_hat, scores = matched_filter_doa(clip, fr_bank, probe_mode)
    click.echo("angle_deg,score,selected")
    for theta, score in enumerate(scores, start=1):
        click.echo(f"{theta},{score:.6f},{int(theta == theta_hat)}")


@oracle.command("batch")
@click.option('--bank', 'bank_path', type=click.Path(path_type=Path), default=None)
@click.option('--data', type=click.Path(path_type=Path), default=None, help='Dataset manifest.jsonl.')
@click.option('--out', type=click.Path(path_type=Path), default=None, help='Prediction JSONL.')
@click.option('--probe-mode', type=click.Choice(["flat", "whitened"]), default="flat")
@click.option('--step', type=int, default=PAIR_GRID_STEP_DEG)
@click.pass_context
def oracle_batch(ctx, **_):
    """Oracle predictions for every 1- and 2-source clip of a dataset."""
    from services.impulse_bank import load_bank
    from services.oracle import run_batch

    rc = _resolve(ctx, "oracle batch", {"bank_path": None, "data": None, "out": None,
                                        "probe_mode": "flat", "step": PAIR_GRID_STEP_DEG, "seed": None})
    o = rc.options
    _require(o, "bank_path", "data", "out")
    result = run_batch(Path(o["data"]), load_bank(Path(o["bank_path"])), o["probe_mode"], int(o["step"]))
    n = write_jsonl(Path(o["out"]), result["predictions"])
    _stamp(ctx, rc, Path(o["out"]))
    click.echo(f"Wrote {n} predictions to {o['out']} ({len(result['errors'])} clips skipped)")


@oracle.command("sweep")
@click.option('--bank', 'bank_path', type=click.Path(path_type=Path), default=None)
@click.option('--out', type=click.Path(path_type=Path), default=None, help='Condition table CSV.')
@click.option('--angles', default="30,120,250")
@click.option('--snrs', default="inf,60,50,40,30", help='SNRs in dB; inf means clean.')
@click.option('--trials', type=int, default=20)
@click.option('--rir', type=click.Path(path_type=Path), default=None)
@click.option('--probe-mode', type=click.Choice(["flat", "whitened"]), default="flat")
@click.option('--seed', type=int, default=None)
@click.pass_context
def oracle_sweep(ctx, **_):
    """Oracle error per noise / reverberation condition."""
    from services.impulse_bank import load_bank
    from services.oracle import noise_robustness_sweep

    rc = _resolve(ctx, "oracle sweep", {"bank_path": None, "out": None, "angles": "30,120,250",
                                        "snrs": "inf,60,50,40,30", "trials": 20, "rir": None,
                                        "probe_mode": "flat", "seed": None})
    o = rc.options
    _require(o, "bank_path", "out")
    rir = _load_waveform(Path(o["rir"])) if o["rir"] else None
    rows = noise_robustness_sweep(load_bank(Path(o["bank_path"])), _int_list(o["angles"]),
                                  _snr_list(o["snrs"]), int(o["trials"]), rc.seed, rir, o["probe_mode"])
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["snr_db", "rir", "trials", "mae", "median", "exact_fraction"])
        writer.writeheader()
        for row in rows:
            writer.writerow(dict(row, snr_db="clean" if row["snr_db"] is None else row["snr_db"]))
    _stamp(ctx, rc, out)
    click.echo(f"Wrote {len(rows)} conditions to {out}")


# ──────────────────────────────────────────────
# eval
# ──────────────────────────────────────────────

@cli.command("eval")
@click.option('--pred', type=click.Path(path_type=Path), default=None, help='Prediction JSONL.')
@click.option('--truth', type=click.Path(path_type=Path), default=None, help='Dataset manifest.jsonl.')
@click.option('--out', type=click.Path(path_type=Path), default=None, help='Report JSON.')
@click.option('--cdf', 'cdf_path', type=click.Path(path_type=Path), default=None, help='Optional CDF CSV.')
@click.option('--n-mics', type=int, default=1)
@click.option('--error-mode', type=click.Choice(["circular", "linear"]), default="circular")
@click.option('--matching', type=click.Choice(["sorted", "optimal"]), default="sorted")
@click.option('--meem-basis', type=click.Choice(["mae", "mse"]), default="mae")
@click.pass_context
def eval_command(ctx, **_):
    """Scores predictions against a dataset manifest."""
    from services.evaluation import evaluation_service

    rc = _resolve(ctx, "eval", {"pred": None, "truth": None, "out": None, "cdf_path": None, "n_mics": 1,
                                "error_mode": "circular", "matching": "sorted", "meem_basis": "mae",
                                "seed": None})
    o = rc.options
    _require(o, "pred", "truth", "out")
    report = evaluation_service.evaluate_files(Path(o["pred"]), Path(o["truth"]), n_mics=int(o["n_mics"]),
                                               error_mode=o["error_mode"], matching=o["matching"],
                                               meem_basis=o["meem_basis"])
    out = evaluation_service.write_report(report, Path(o["out"]))
    if o["cdf_path"]:
        evaluation_service.write_cdf_csv(report.cdf_points, Path(o["cdf_path"]))
    _stamp(ctx, rc, out)
    click.echo(f"MAE {report.mae_deg:.2f} deg, median {report.median_deg:.2f} deg, "
               f"MEEM {report.meem:.2f} over {report.n_clips} clips")


# ──────────────────────────────────────────────
# qa
# ──────────────────────────────────────────────

@cli.group()
def qa():
    """Instruction-tuning data and projection checkpoints."""


@qa.command("export")
@click.option('--data', type=click.Path(path_type=Path), default=None, help='Dataset manifest.jsonl.')
@click.option('--task', type=click.Choice(["asr", "spatial_asr", "doa", "nspk", "multi_doa"]), default=None)
@click.option('--out', type=click.Path(path_type=Path), default=None, help='QA JSONL.')
@click.option('--doa-format', type=click.Choice(["integer", "decimal1"]), default=None)
@click.pass_context
def qa_export(ctx, **_):
    """Writes QA pairs for one task type."""
    from services.dataset import load_manifest
    from services.llm_bridge import export_jsonl, make_qa_pairs

    rc = _resolve(ctx, "qa export", {"data": None, "task": None, "out": None, "doa_format": None,
                                     "seed": None})
    o = rc.options
    _require(o, "data", "task", "out")
    pairs = make_qa_pairs(load_manifest(Path(o["data"])), o["task"], o["doa_format"])
    n = export_jsonl(pairs, Path(o["out"]))
    _stamp(ctx, rc, Path(o["out"]))
    click.echo(f"Wrote {n} {o['task']} pairs to {o['out']}")


@qa.command("projection")
@click.option('--out', type=click.Path(path_type=Path), default=None, help='Projection checkpoint.')
@click.option('--llm-dim', type=int, default=3072)
@click.option('--in-dim', type=int, default=1024)
@click.option('--bias/--no-bias', default=True)
@click.option('--seed', type=int, default=None)
@click.pass_context
def qa_projection(ctx, **_):
    """Writes an initialized projection into the LLM embedding space."""
    from services.llm_bridge import export_projection, init_projection

    rc = _resolve(ctx, "qa projection", {"out": None, "llm_dim": 3072, "in_dim": 1024, "bias": True,
                                         "seed": None})
    o = rc.options
    _require(o, "out")
    out = export_projection(init_projection(int(o["llm_dim"]), int(o["in_dim"]), rc.seed, bool(o["bias"])),
                            Path(o["out"]))
    _stamp(ctx, rc, out)
    click.echo(f"Wrote {o['llm_dim']}x{o['in_dim']} projection to {out}")


# ──────────────────────────────────────────────
# Entry point
# ──────────────────────────────────────────────

def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Runs one command and returns its exit code (0 ok, 2 usage, 3 I/O, 4 validation, 1 other)."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        rv = cli.main(args=argv, prog_name="omnitalk", standalone_mode=False, obj={"argv": argv})
        return rv if isinstance(rv, int) else 0
    except click.UsageError as e:
        e.show()
        return 2
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.Abort:
        click.echo("error: Aborted", err=True)
        return 1
    except ValidationError as e:
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        return 4
    except (StorageError, OSError) as e:
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        return 3
    except OmniTalkError as e:
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(dispatch())
