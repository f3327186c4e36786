"""
Layer Suite — numpy forward/backward building blocks for the encoders

Tensors are NCHW float64. Every layer keeps what its backward pass needs from
the most recent forward call, exposes trainable arrays in `params` and their
gradients in `grads` (same keys), and describes itself with `config()` so a
checkpoint can rebuild it through `build_layer`.
"""

import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import ConfigError, ShapeMismatchError, ValidationError

logger = logging.getLogger(__name__)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.training = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def config(self) -> Dict[str, Any]:
        return {}

    def descriptor(self) -> Dict[str, Any]:
        return {"kind": self.kind, **self.config()}

    def zero_grad(self) -> None:
        for name, value in self.params.items():
            self.grads[name] = np.zeros_like(value)


# ──────────────────────────────────────────────
# Convolution blocks
# ──────────────────────────────────────────────

class Conv2d(Layer):
    """k x k convolution, zero padding, computed as a sum over kernel positions."""
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1,
                 padding: Optional[int] = None, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if kernel < 1 or stride < 1:
            raise ConfigError(f"Invalid conv kernel={kernel} stride={stride}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride = kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.params["weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                           (out_channels, in_channels, kernel, kernel))
        self.params["bias"] = np.zeros(out_channels)
        self.zero_grad()
        self._cache = None

    def config(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding}

    def _out_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernel) // self.stride + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatchError(f"conv2d expects (N, {self.in_channels}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        oh, ow = self._out_size(h), self._out_size(w)
        if oh < 1 or ow < 1:
            raise ShapeMismatchError(f"conv2d input {h}x{w} too small for kernel {self.kernel}")
        p, s = self.padding, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        weight = self.params["weight"]
        out = np.zeros((n, self.out_channels, oh, ow))
        for ki in range(self.kernel):
            for kj in range(self.kernel):
                patch = xp[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s]
                out += np.einsum("nihw,oi->nohw", patch, weight[:, :, ki, kj], optimize=True)
        out += self.params["bias"][None, :, None, None]
        self._cache = (x.shape, xp)
        return out

    def backward(self, dout):
        x_shape, xp = self._cache
        p, s = self.padding, self.stride
        _, _, oh, ow = dout.shape
        weight = self.params["weight"]
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(weight)
        for ki in range(self.kernel):
            for kj in range(self.kernel):
                sl = (slice(None), slice(None), slice(ki, ki + s * oh, s), slice(kj, kj + s * ow, s))
                dw[:, :, ki, kj] = np.einsum("nohw,nihw->oi", dout, xp[sl], optimize=True)
                dxp[sl] += np.einsum("nohw,oi->nihw", dout, weight[:, :, ki, kj], optimize=True)
        self.grads["weight"] += dw
        self.grads["bias"] += dout.sum(axis=(0, 2, 3))
        h, w = x_shape[2], x_shape[3]
        return dxp[:, :, p:p + h, p:p + w]


class BatchNorm2d(Layer):
    """
    Per-channel normalization over (N, H, W). Running statistics follow the
    exponential update with `momentum` and the unbiased batch variance.
    With `freeze_stats` the running statistics are used in training as well.
    """
    kind = "batchnorm2d"

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.num_features, self.momentum, self.eps = num_features, momentum, eps
        self.params["gamma"] = np.ones(num_features)
        self.params["beta"] = np.zeros(num_features)
        self.buffers["running_mean"] = np.zeros(num_features)
        self.buffers["running_var"] = np.ones(num_features)
        self.freeze_stats = False
        self.zero_grad()
        self._cache = None

    def config(self):
        return {"num_features": self.num_features, "momentum": self.momentum, "eps": self.eps}

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.num_features:
            raise ShapeMismatchError(f"batchnorm2d expects (N, {self.num_features}, H, W), got {x.shape}")
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        batch_stats = self.training and not self.freeze_stats
        if batch_stats:
            if x.shape[0] == 1:
                raise ValidationError("batchnorm2d needs more than one sample per batch in training mode")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            self.buffers["running_mean"] = (1 - self.momentum) * self.buffers["running_mean"] + self.momentum * mean
            self.buffers["running_var"] = ((1 - self.momentum) * self.buffers["running_var"]
                                           + self.momentum * var * m / max(m - 1, 1))
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, batch_stats)
        return gamma * xhat + beta

    def backward(self, dout):
        xhat, inv_std, batch_stats = self._cache
        self.grads["gamma"] += np.sum(dout * xhat, axis=(0, 2, 3))
        self.grads["beta"] += dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.params["gamma"][None, :, None, None]
        scale = inv_std[None, :, None, None]
        if not batch_stats:
            return dxhat * scale
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dxhat_xhat = np.sum(dxhat * xhat, axis=(0, 2, 3), keepdims=True)
        return scale / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class MaxPool2d(Layer):
    """Non-overlapping k x k max pooling; trailing rows/cols that do not fill a window are dropped."""
    kind = "maxpool2d"

    def __init__(self, kernel: int = 2):
        super().__init__()
        self.kernel = kernel

    def config(self):
        return {"kernel": self.kernel}

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.kernel
        oh, ow = h // k, w // k
        if oh < 1 or ow < 1:
            raise ShapeMismatchError(f"maxpool2d input {h}x{w} smaller than kernel {k}")
        windows = (x[:, :, :oh * k, :ow * k]
                   .reshape(n, c, oh, k, ow, k)
                   .transpose(0, 1, 2, 4, 3, 5)
                   .reshape(n, c, oh, ow, k * k))
        self._argmax = windows.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(windows, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        n, c, h, w = self._shape
        k = self.kernel
        oh, ow = dout.shape[2], dout.shape[3]
        routed = np.zeros((n, c, oh, ow, k * k))
        np.put_along_axis(routed, self._argmax[..., None], dout[..., None], axis=-1)
        dx = np.zeros(self._shape)
        dx[:, :, :oh * k, :ow * k] = (routed.reshape(n, c, oh, ow, k, k)
                                      .transpose(0, 1, 2, 4, 3, 5)
                                      .reshape(n, c, oh * k, ow * k))
        return dx


# ──────────────────────────────────────────────
# Dense blocks
# ──────────────────────────────────────────────

class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = rng.normal(0.0, np.sqrt(2.0 / in_features), (in_features, out_features))
        self.params["bias"] = np.zeros(out_features)
        self.zero_grad()

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatchError(f"linear expects (N, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dout):
        self.grads["weight"] += self._x.T @ dout
        self.grads["bias"] += dout.sum(axis=0)
        return dout @ self.params["weight"].T


class Dropout(Layer):
    """Inverted dropout. `fixed_mask`, when set, replaces the random draw."""
    kind = "dropout"

    def __init__(self, p: float = 0.5, seed: int = 0):
        super().__init__()
        if not 0 <= p < 1:
            raise ConfigError(f"Dropout p must be in [0, 1), got {p}")
        self.p = p
        self.rng = np.random.default_rng(seed)
        self.fixed_mask: Optional[np.ndarray] = None
        self._mask = None

    def config(self):
        return {"p": self.p}

    def forward(self, x):
        if not self.training or self.p == 0:
            self._mask = None
            return x
        if self.fixed_mask is not None:
            keep = self.fixed_mask
        else:
            keep = self.rng.random(x.shape) >= self.p
        self._mask = keep / (1.0 - self.p)
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


LAYER_TYPES = {cls.kind: cls for cls in (Conv2d, BatchNorm2d, ReLU, MaxPool2d, Flatten, Linear, Dropout)}


def build_layer(descriptor: Dict[str, Any], rng: Optional[np.random.Generator] = None) -> Layer:
    spec = dict(descriptor)
    kind = spec.pop("kind", None)
    if kind not in LAYER_TYPES:
        raise ConfigError(f"Unknown layer kind {kind!r}")
    if kind in ("conv2d", "linear"):
        spec["rng"] = rng
    return LAYER_TYPES[kind](**spec)


class Sequential:
    def __init__(self, layers: Sequence[Layer]):
        self.layers: List[Layer] = list(layers)

    def forward(self, x: np.ndarray, upto: Optional[int] = None) -> np.ndarray:
        for layer in self.layers[:upto]:
            x = layer.forward(x)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def train(self, mode: bool = True) -> "Sequential":
        for layer in self.layers:
            layer.training = mode
        return self

    def eval(self) -> "Sequential":
        return self.train(False)

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def parameters(self) -> List[Tuple[Layer, str]]:
        return [(layer, name) for layer in self.layers for name in layer.params]


# ──────────────────────────────────────────────
# Losses
# ──────────────────────────────────────────────

def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean negative log-likelihood of integer `labels` (0-based) under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatchError(f"cross_entropy_loss: logits {logits.shape} vs labels {labels.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(np.mean(log_probs[np.arange(n), labels]))
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ──────────────────────────────────────────────
# Optimization
# ──────────────────────────────────────────────

class Adam:
    def __init__(self, parameters: List[Tuple[Layer, str]], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.parameters = parameters
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(layer.params[name]) for layer, name in parameters]
        self.v = [np.zeros_like(layer.params[name]) for layer, name in parameters]

    def step(self) -> None:
        self.t += 1
        bias1 = 1 - self.beta1 ** self.t
        bias2 = 1 - self.beta2 ** self.t
        for i, (layer, name) in enumerate(self.parameters):
            g = layer.grads[name]
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            layer.params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class ReduceLROnPlateau:
    """Multiplies the optimizer lr by `factor` after `patience` epochs without relative improvement."""

    def __init__(self, optimizer: Adam, factor: float = 0.1, patience: int = 2,
                 threshold: float = 1e-4, min_lr: float = 0.0):
        self.optimizer = optimizer
        self.factor, self.patience = factor, patience
        self.threshold, self.min_lr = threshold, min_lr
        self.best = np.inf
        self.num_bad_epochs = 0

    def step(self, metric: float) -> bool:
        improved = not np.isfinite(self.best) or metric < self.best * (1 - self.threshold)
        if improved:
            self.best = metric
            self.num_bad_epochs = 0
            return False
        self.num_bad_epochs += 1
        if self.num_bad_epochs > self.patience:
            new_lr = max(self.optimizer.lr * self.factor, self.min_lr)
            if new_lr < self.optimizer.lr:
                logger.info(f"Reducing learning rate {self.optimizer.lr:.3g} -> {new_lr:.3g}")
            self.optimizer.lr = new_lr
            self.num_bad_epochs = 0
            return True
        return False
