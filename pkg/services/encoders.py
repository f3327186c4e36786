"""
Encoder Service — DoA and speaker-count CNNs on log-mel input

Both encoders share one trunk:
    [conv3x3 -> batchnorm -> relu -> maxpool2x2] x 3 -> flatten
    -> linear(512) -> relu (embedding tap) -> dropout -> linear(head)
The DoA encoder regresses k ascending angles (k = 1..5, one model per count),
the speaker-count encoder classifies 1..5 speakers. Their 512-d embeddings
concatenate into the spatial embedding handed to the language model.
"""

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from core.binary import read_tensor_file, write_tensor_file
from core.config import CONV_CHANNELS, DROPOUT_P, EMBED_DIM, MAX_SPEAKERS, NUM_ANGLES
from core.errors import (ConfigError, FormatError, ShapeMismatchError, TrainingDivergedError,
                         ValidationError)
from core.utils import read_audio
from services.dataset import load_manifest, resolve_clip_path
from services.features import MelConfig, MelSpectrogram, log_mel, preset
from services.layers import (Adam, BatchNorm2d, Conv2d, Dropout, Flatten, Linear, MaxPool2d,
                             ReduceLROnPlateau, ReLU, Sequential, build_layer, cross_entropy_loss,
                             mse_loss, softmax)
from services.synthesis import Waveform

logger = logging.getLogger(__name__)

TARGET_ENCODINGS = ("linear", "sincos")
MelInput = Union[np.ndarray, MelSpectrogram]


@dataclass
class CnnModel:
    net: Sequential
    head: str
    n_outputs: int
    input_shape: Tuple[int, int]
    embed_index: int
    embed_dim: int = EMBED_DIM
    target_encoding: str = "linear"
    input_mean: float = 0.0
    input_std: float = 1.0
    task: str = "doa"

    def _prepare(self, mel: MelInput) -> np.ndarray:
        x = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeMismatchError(f"Model expects mel of shape {tuple(self.input_shape)}, got {x.shape}")
        return ((x - self.input_mean) / self.input_std)[:, None, :, :]

    def forward(self, mel: MelInput, training: bool = False) -> np.ndarray:
        self.net.train(training)
        return self.net.forward(self._prepare(mel))

    def embed_batch(self, mel: MelInput) -> np.ndarray:
        self.net.eval()
        return self.net.forward(self._prepare(mel), upto=self.embed_index + 1)

    def batchnorm_layers(self) -> List[BatchNorm2d]:
        return [layer for layer in self.net.layers if isinstance(layer, BatchNorm2d)]

    def num_parameters(self) -> int:
        return sum(layer.params[name].size for layer, name in self.net.parameters())


def _trunk(input_shape: Tuple[int, int], channels: Sequence[int], rng: np.random.Generator,
           dropout_seed: int) -> Tuple[List, int]:
    h, w = input_shape
    if h < 2 ** len(channels) or w < 2 ** len(channels):
        raise ShapeMismatchError(
            f"Input {input_shape} too small for {len(channels)} pooling stages")
    layers = []
    in_ch = 1
    for out_ch in channels:
        layers += [Conv2d(in_ch, out_ch, 3, rng=rng), BatchNorm2d(out_ch), ReLU(), MaxPool2d(2)]
        in_ch = out_ch
        h, w = h // 2, w // 2
    layers += [Flatten(), Linear(in_ch * h * w, EMBED_DIM, rng=rng), ReLU()]
    embed_index = len(layers) - 1
    layers.append(Dropout(DROPOUT_P, seed=dropout_seed))
    return layers, embed_index


def _check_input_shape(input_shape) -> Tuple[int, int]:
    if len(input_shape) != 2 or min(input_shape) < 1:
        raise ShapeMismatchError(f"input_shape must be (n_mels, n_frames), got {input_shape}")
    return int(input_shape[0]), int(input_shape[1])


def build_doa_encoder(n_outputs: int, input_shape: Tuple[int, int], seed: int = 0,
                      channels: Sequence[int] = CONV_CHANNELS,
                      target_encoding: str = "linear") -> CnnModel:
    if not 1 <= n_outputs <= MAX_SPEAKERS:
        raise ConfigError(f"DoA encoder supports 1..{MAX_SPEAKERS} outputs, got {n_outputs}")
    if target_encoding not in TARGET_ENCODINGS:
        raise ConfigError(f"Unknown target encoding {target_encoding!r}")
    input_shape = _check_input_shape(input_shape)
    rng = np.random.default_rng(seed)
    layers, embed_index = _trunk(input_shape, channels, rng, seed + 1)
    width = 2 * n_outputs if target_encoding == "sincos" else n_outputs
    layers.append(Linear(EMBED_DIM, width, rng=rng))
    return CnnModel(Sequential(layers), "regression", n_outputs, input_shape, embed_index,
                    target_encoding=target_encoding, task="doa")


def build_nspk_encoder(input_shape: Tuple[int, int], seed: int = 0,
                       channels: Sequence[int] = CONV_CHANNELS) -> CnnModel:
    input_shape = _check_input_shape(input_shape)
    rng = np.random.default_rng(seed)
    layers, embed_index = _trunk(input_shape, channels, rng, seed + 1)
    layers.append(Linear(EMBED_DIM, MAX_SPEAKERS, rng=rng))
    return CnnModel(Sequential(layers), "classification", MAX_SPEAKERS, input_shape, embed_index,
                    task="nspk")


# ──────────────────────────────────────────────
# Targets
# ──────────────────────────────────────────────

def encode_doa_targets(doas: np.ndarray, encoding: str = "linear") -> np.ndarray:
    """Ascending angle lists [N x k] -> regression targets (θ/360, or interleaved sin/cos)."""
    doas = np.sort(np.asarray(doas, dtype=np.float64), axis=1)
    if encoding == "linear":
        return doas / NUM_ANGLES
    rad = np.deg2rad(doas)
    return np.stack([np.sin(rad), np.cos(rad)], axis=2).reshape(doas.shape[0], -1)


def decode_doa_output(raw: np.ndarray, encoding: str = "linear") -> np.ndarray:
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    if encoding == "linear":
        return raw * NUM_ANGLES
    pairs = raw.reshape(raw.shape[0], -1, 2)
    degrees = np.rad2deg(np.arctan2(pairs[..., 0], pairs[..., 1])) % NUM_ANGLES
    return np.where(degrees == 0, float(NUM_ANGLES), degrees)


def postprocess_angles(raw_degrees: Sequence[float]) -> List[float]:
    """Clamps to [1, 360] and sorts ascending."""
    clamped = np.clip(np.asarray(raw_degrees, dtype=np.float64), 1.0, float(NUM_ANGLES))
    return [float(v) for v in np.sort(clamped)]


# ──────────────────────────────────────────────
# Feature sets
# ──────────────────────────────────────────────

@dataclass
class FeatureSet:
    features: np.ndarray
    n_speakers: np.ndarray
    doas: List[List[int]]
    clip_ids: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx: Sequence[int]) -> "FeatureSet":
        idx = list(idx)
        return FeatureSet(self.features[idx], self.n_speakers[idx], [self.doas[i] for i in idx],
                          [self.clip_ids[i] for i in idx] if self.clip_ids else [])


def load_feature_set(manifest_path: Path, mel_config: Union[str, MelConfig] = "soundscape",
                     n_sources: Optional[int] = None, progress: bool = False) -> FeatureSet:
    """Log-mel features and labels for a built dataset, optionally only clips with `n_sources` speakers."""
    cfg = preset(mel_config) if isinstance(mel_config, str) else mel_config
    records = [r for r in load_manifest(manifest_path) if n_sources is None or r.n_speakers == n_sources]
    if not records:
        raise ValidationError(f"No clips in {manifest_path}" + (f" with {n_sources} sources" if n_sources else ""))
    mels = []
    for record in tqdm(records, desc="features", disable=not progress):
        samples, sr = read_audio(resolve_clip_path(manifest_path, record.clip_path))
        mels.append(log_mel(Waveform(samples, sr), cfg).values)
    logger.info(f"Extracted {cfg.name} features for {len(records)} clips from {manifest_path}")
    return FeatureSet(np.stack(mels), np.array([r.n_speakers for r in records]),
                      [list(r.doas_deg) for r in records], [r.clip_id for r in records])


# ──────────────────────────────────────────────
# Training
# ──────────────────────────────────────────────

@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 20
    lr: float = 1e-3
    patience: int = 5
    loss: Optional[str] = None
    optimizer: str = "adam"
    scheduler: str = "reduce_on_plateau"
    seed: int = 0
    val_fraction: float = 0.2
    freeze_norm_stats: bool = False
    progress: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, epochs and patience must be positive")
        if self.patience > self.epochs:
            raise ConfigError(f"patience {self.patience} exceeds epochs {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.loss not in (None, "mse", "cross_entropy"):
            raise ConfigError(f"Unknown loss {self.loss!r}")
        if self.optimizer != "adam":
            raise ConfigError(f"Only the adam optimizer is available, got {self.optimizer!r}")
        if self.scheduler not in ("reduce_on_plateau", "none"):
            raise ConfigError(f"Unknown scheduler {self.scheduler!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


@dataclass
class TrainResult:
    model: CnnModel
    history: List[Dict[str, float]]
    best_epoch: int


def _targets(model: CnnModel, data: FeatureSet) -> np.ndarray:
    if model.head == "classification":
        return data.n_speakers.astype(np.int64) - 1
    bad = [i for i, d in enumerate(data.doas) if len(d) != model.n_outputs]
    if bad:
        raise ShapeMismatchError(
            f"{len(bad)} clips do not have {model.n_outputs} DoAs (first index {bad[0]})")
    return encode_doa_targets(np.array(data.doas), model.target_encoding)


def _loss(model: CnnModel, name: Optional[str], out: np.ndarray, y: np.ndarray):
    name = name or ("cross_entropy" if model.head == "classification" else "mse")
    if name == "cross_entropy":
        return cross_entropy_loss(out, y)
    return mse_loss(out, y)


def _snapshot(model: CnnModel) -> List[Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]]:
    return [(copy.deepcopy(layer.params), copy.deepcopy(layer.buffers)) for layer in model.net.layers]


def _restore(model: CnnModel, snapshot) -> None:
    for layer, (params, buffers) in zip(model.net.layers, snapshot):
        layer.params = copy.deepcopy(params)
        layer.buffers = copy.deepcopy(buffers)
        layer.zero_grad()


def _evaluate_loss(model: CnnModel, loss_name, x: np.ndarray, y: np.ndarray, batch_size: int) -> float:
    total = 0.0
    for start in range(0, len(x), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        loss, _ = _loss(model, loss_name, model.forward(xb, training=False), yb)
        total += loss * len(xb)
    return total / len(x)


def train(model: CnnModel, dataset: FeatureSet, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """
    Adam + ReduceLROnPlateau on the validation loss, early stopping after
    `patience` epochs without improvement. The returned model carries the
    parameters of the best validation epoch.
    """
    if len(dataset) == 0:
        raise ValidationError("Cannot train on an empty dataset")
    if tuple(dataset.features.shape[1:]) != tuple(model.input_shape):
        raise ShapeMismatchError(
            f"Features {dataset.features.shape[1:]} do not match model input {model.input_shape}")
    y_all = _targets(model, dataset)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(dataset))
    n_val = int(round(len(dataset) * cfg.val_fraction))
    if n_val >= len(dataset):
        n_val = len(dataset) - 1
    val_idx, train_idx = order[:n_val], order[n_val:]
    if n_val == 0:
        val_idx = train_idx
    x_train, y_train = dataset.features[train_idx], y_all[train_idx]
    x_val, y_val = dataset.features[val_idx], y_all[val_idx]

    model.input_mean = float(x_train.mean())
    model.input_std = float(max(x_train.std(), 1e-8))
    for bn in model.batchnorm_layers():
        bn.freeze_stats = cfg.freeze_norm_stats

    optimizer = Adam(model.net.parameters(), lr=cfg.lr)
    scheduler = ReduceLROnPlateau(optimizer) if cfg.scheduler == "reduce_on_plateau" else None
    history = []
    best_loss, best_epoch, best_state = np.inf, 0, _snapshot(model)
    bad_epochs = 0
    logger.info(f"Training {model.task} encoder: {len(train_idx)} train / {len(val_idx)} val clips, "
                f"batch {cfg.batch_size}, lr {cfg.lr}, seed {cfg.seed}")

    for epoch in tqdm(range(1, cfg.epochs + 1), desc="epochs", disable=not cfg.progress):
        perm = rng.permutation(len(x_train))
        losses = []
        for b, start in enumerate(range(0, len(perm), cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2:
                logger.debug(f"Epoch {epoch}: skipping trailing batch of size {len(idx)}")
                continue
            model.net.zero_grad()
            out = model.forward(x_train[idx], training=True)
            loss, grad = _loss(model, cfg.loss, out, y_train[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"Loss became {loss} at epoch {epoch}, batch {b}",
                                            epoch=epoch, batch=b)
            model.net.backward(grad)
            optimizer.step()
            losses.append(loss)

        val_loss = _evaluate_loss(model, cfg.loss, x_val, y_val, cfg.batch_size)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"Validation loss became {val_loss} at epoch {epoch}", epoch=epoch)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": optimizer.lr})
        logger.info(f"Epoch {epoch}: train {train_loss:.5f}, val {val_loss:.5f}, lr {optimizer.lr:.2e}")

        if val_loss < best_loss:
            best_loss, best_epoch, best_state = val_loss, epoch, _snapshot(model)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                logger.info(f"Early stopping at epoch {epoch} (best epoch {best_epoch})")
                break
        if scheduler is not None:
            scheduler.step(val_loss)

    _restore(model, best_state)
    for bn in model.batchnorm_layers():
        bn.freeze_stats = False
    model.net.eval()
    return TrainResult(model, history, best_epoch)


# ──────────────────────────────────────────────
# Inference
# ──────────────────────────────────────────────

def predict_doa(model: CnnModel, mel: MelInput) -> List[float]:
    if model.head != "regression":
        raise ConfigError("predict_doa needs a regression (DoA) model")
    raw = model.forward(mel, training=False)
    if raw.shape[0] != 1:
        raise ShapeMismatchError("predict_doa takes a single mel spectrogram")
    return postprocess_angles(decode_doa_output(raw, model.target_encoding)[0])


def predict_nspk(model: CnnModel, mel: MelInput) -> Tuple[int, np.ndarray]:
    """Speaker count (argmax + 1) and the class probabilities."""
    if model.head != "classification":
        raise ConfigError("predict_nspk needs a classification (speaker-count) model")
    probs = softmax(model.forward(mel, training=False))[0]
    return int(np.argmax(probs)) + 1, probs


def embed(model: CnnModel, mel: MelInput) -> np.ndarray:
    """Post-ReLU activation of the 512-unit layer, eval mode."""
    out = model.embed_batch(mel)
    if out.shape[0] != 1:
        raise ShapeMismatchError("embed takes a single mel spectrogram")
    return out[0]


@dataclass
class SpatialEmbedding:
    values: np.ndarray
    nspk_dim: int
    doa_dim: int
    n_speakers: int = 0
    doas_deg: List[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.values) != self.nspk_dim + self.doa_dim:
            raise ShapeMismatchError(
                f"Embedding length {len(self.values)} != {self.nspk_dim} + {self.doa_dim}")


def spatial_embedding(mel: MelInput, nspk_model: CnnModel,
                      doa_models: Dict[int, CnnModel]) -> SpatialEmbedding:
    """Concat(speaker-count embedding, DoA embedding of the model for the predicted count)."""
    n, _ = predict_nspk(nspk_model, mel)
    doa_model = doa_models.get(n)
    if doa_model is None:
        raise ConfigError(f"No DoA model for {n} speakers (have {sorted(doa_models)})")
    z_nspk = embed(nspk_model, mel)
    z_doa = embed(doa_model, mel)
    return SpatialEmbedding(np.concatenate([z_nspk, z_doa]), z_nspk.size, z_doa.size,
                            n_speakers=n, doas_deg=predict_doa(doa_model, mel))


# ──────────────────────────────────────────────
# Checkpoints
# ──────────────────────────────────────────────

def save_model(model: CnnModel, path: Path) -> Path:
    meta = {
        "kind": "cnn",
        "task": model.task,
        "head": model.head,
        "n_outputs": model.n_outputs,
        "input_shape": list(model.input_shape),
        "embed_index": model.embed_index,
        "embed_dim": model.embed_dim,
        "target_encoding": model.target_encoding,
        "input_mean": model.input_mean,
        "input_std": model.input_std,
        "topology": [layer.descriptor() for layer in model.net.layers],
    }
    arrays = []
    for i, layer in enumerate(model.net.layers):
        arrays += [(f"{i}.{name}", value) for name, value in layer.params.items()]
        arrays += [(f"{i}.{name}", value) for name, value in layer.buffers.items()]
    write_tensor_file(Path(path), meta, arrays)
    logger.info(f"Saved {model.task} model ({model.num_parameters()} parameters) to {path}")
    return Path(path)


def load_model(path: Path) -> CnnModel:
    meta, arrays = read_tensor_file(Path(path))
    if meta.get("kind") != "cnn":
        raise FormatError(f"{path}: not an encoder checkpoint")
    layers = [build_layer(d) for d in meta["topology"]]
    for i, layer in enumerate(layers):
        for store in (layer.params, layer.buffers):
            for name in store:
                key = f"{i}.{name}"
                if key not in arrays:
                    raise FormatError(f"{path}: missing tensor {key}")
                if arrays[key].shape != store[name].shape:
                    raise FormatError(f"{path}: tensor {key} has shape {arrays[key].shape}, "
                                      f"topology expects {store[name].shape}")
                store[name] = arrays[key].astype(np.float64)
        layer.zero_grad()
    model = CnnModel(Sequential(layers), meta["head"], int(meta["n_outputs"]),
                     tuple(meta["input_shape"]), int(meta["embed_index"]), int(meta["embed_dim"]),
                     meta["target_encoding"], float(meta["input_mean"]), float(meta["input_std"]),
                     meta["task"])
    model.net.eval()
    return model
