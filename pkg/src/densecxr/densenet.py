"""Densely connected convolutional classifier with a sigmoid multi-label head."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, InvalidShapeError
from .fileio import atomic_write_bytes

WEIGHT_MAGIC = b"DCXW"
WEIGHT_FORMAT_VERSION = 1
DENSENET121_LAYOUT = (6, 12, 24, 16)


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 1
    input_size: tuple[int, int] = (32, 32)
    initial_channels: int = 16
    growth_rate: int = 8
    block_layout: tuple[int, ...] = (2, 2, 2)
    num_classes: int = 14
    dropout_rate: float = 0.10
    use_batch_norm: bool = True
    bottleneck_factor: int = 4
    compression: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "block_layout", tuple(int(v) for v in self.block_layout))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["block_layout"] = list(self.block_layout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def validate(self) -> None:
        if self.input_channels < 1 or self.initial_channels < 1 or self.growth_rate < 1:
            raise ConfigError("channel counts and growth rate must be positive integers")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if self.bottleneck_factor < 1:
            raise ConfigError("bottleneck_factor must be positive")
        if not 0.0 < self.compression <= 1.0:
            raise ConfigError(f"compression must be in (0, 1], got {self.compression}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not self.block_layout or any(n < 1 for n in self.block_layout):
            raise ConfigError(f"block_layout must be non-empty with entries >= 1, got {self.block_layout}")
        h, w = self.input_size
        if h < 1 or w < 1:
            raise ConfigError(f"input_size must be positive, got {self.input_size}")
        for b in range(len(self.block_layout) - 1):
            if h % 2 or w % 2 or h < 2 or w < 2:
                raise ConfigError(
                    f"spatial size {h}x{w} entering the transition after block {b + 1} "
                    f"cannot be halved; too many blocks for input_size {self.input_size}")
            h, w = h // 2, w // 2


def channel_plan(config: ModelConfig) -> list[tuple[int, int]]:
    """(channels entering, channels leaving) for every dense block."""
    plan = []
    c = config.initial_channels
    for b, n_layers in enumerate(config.block_layout):
        out = c + n_layers * config.growth_rate
        plan.append((c, out))
        c = out
        if b < len(config.block_layout) - 1:
            c = int(np.floor(c * config.compression))
    return plan


def feature_size(config: ModelConfig) -> tuple[int, int]:
    h, w = config.input_size
    k = len(config.block_layout) - 1
    return h >> k, w >> k


def count_weight_layers(config: ModelConfig) -> int:
    """Layers carrying convolution or dense weights (normalization layers excluded)."""
    return 1 + 2 * sum(config.block_layout) + (len(config.block_layout) - 1) + 1


class Model:
    """Parameter container plus forward pass.

    ``params`` holds trainable tensors keyed by name; ``buffers`` holds batch-norm
    running statistics, which are saved with the weights but never trained.
    """

    def __init__(self, config: ModelConfig, params: dict[str, T.Tensor],
                 buffers: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.training = True

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    @property
    def mode(self) -> str:
        return "training" if self.training else "evaluation"

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.buffers)
        return out

    def logits(self, batch: T.Tensor, rng: np.random.Generator | None = None,
               capture: dict | None = None) -> T.Tensor:
        return model_logits(self, batch, rng=rng, capture=capture)

    def __call__(self, batch: T.Tensor, rng: np.random.Generator | None = None) -> T.Tensor:
        return model_forward(self, batch, rng=rng)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Initialize every parameter deterministically from ``seed``.

    Convolution kernels use He fan-in scaling; normalization scales start at 1,
    shifts at 0, and the sigmoid head at exactly 0 so an untrained model scores
    every class 0.5.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, T.Tensor] = {}
    buffers: dict[str, np.ndarray] = {}

    def kernel(name, c_out, c_in, k):
        std = np.sqrt(2.0 / (c_in * k * k))
        params[name] = T.parameter(rng.normal(0.0, std, size=(c_out, c_in, k, k)), name)

    def norm(prefix, c):
        if not config.use_batch_norm:
            return
        params[f"{prefix}.gamma"] = T.parameter(np.ones(c), f"{prefix}.gamma")
        params[f"{prefix}.beta"] = T.parameter(np.zeros(c), f"{prefix}.beta")
        buffers[f"{prefix}.running_mean"] = np.zeros(c)
        buffers[f"{prefix}.running_var"] = np.ones(c)

    g = config.growth_rate
    bottleneck = config.bottleneck_factor * g
    kernel("stem.conv", config.initial_channels, config.input_channels, 3)
    plan = channel_plan(config)
    for b, (n_layers, (c_in, c_out)) in enumerate(zip(config.block_layout, plan), start=1):
        for layer in range(n_layers):
            c = c_in + layer * g
            pre = f"block{b}.layer{layer + 1}"
            norm(f"{pre}.norm1", c)
            kernel(f"{pre}.conv1", bottleneck, c, 1)
            norm(f"{pre}.norm2", bottleneck)
            kernel(f"{pre}.conv2", g, bottleneck, 3)
        assert c_in + n_layers * g == c_out
        if b < len(config.block_layout):
            c_next = plan[b][0]
            norm(f"transition{b}.norm", c_out)
            kernel(f"transition{b}.conv", c_next, c_out, 1)
    c_final = plan[-1][1]
    norm("final.norm", c_final)
    params["head.weight"] = T.parameter(np.zeros((config.num_classes, c_final)), "head.weight")
    params["head.bias"] = T.parameter(np.zeros(config.num_classes), "head.bias")
    return Model(config, params, buffers)


def _norm_relu(model: Model, x: T.Tensor, prefix: str) -> T.Tensor:
    if model.config.use_batch_norm:
        x = T.batch_norm(x, model.params[f"{prefix}.gamma"], model.params[f"{prefix}.beta"],
                         model.buffers[f"{prefix}.running_mean"],
                         model.buffers[f"{prefix}.running_var"], training=model.training)
    return T.relu(x)


def dense_block_forward(model: Model, x: T.Tensor, block: int) -> T.Tensor:
    """Run dense block ``block`` (1-based); output has C + L*growth channels."""
    c_in, c_out = channel_plan(model.config)[block - 1]
    if x.ndim != 4 or x.shape[1] != c_in:
        raise InvalidShapeError(
            f"block {block} expects {c_in} input channels, got input of shape {x.shape}")
    features = x
    for layer in range(model.config.block_layout[block - 1]):
        pre = f"block{block}.layer{layer + 1}"
        h = _norm_relu(model, features, f"{pre}.norm1")
        h = T.conv2d(h, model.params[f"{pre}.conv1"])
        h = _norm_relu(model, h, f"{pre}.norm2")
        h = T.conv2d(h, model.params[f"{pre}.conv2"], padding=1)
        features = T.concat([features, h], axis=1)
    return features


def transition_forward(model: Model, x: T.Tensor, index: int) -> T.Tensor:
    """Compress channels with a 1x1 convolution and halve H and W by 2x2 average pooling."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise InvalidShapeError(f"transition {index} needs even spatial dims, got {x.shape}")
    h = _norm_relu(model, x, f"transition{index}.norm")
    h = T.conv2d(h, model.params[f"transition{index}.conv"])
    return T.avg_pool2d(h, 2)


def _check_batch(model: Model, batch: T.Tensor) -> None:
    cfg = model.config
    expected = (cfg.input_channels, *cfg.input_size)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
        raise InvalidShapeError(
            f"batch shape {batch.shape} does not match model input (N, {expected[0]}, "
            f"{expected[1]}, {expected[2]})")


def model_logits(model: Model, batch: T.Tensor, rng: np.random.Generator | None = None,
                 capture: dict | None = None) -> T.Tensor:
    """Pre-sigmoid scores of shape (N, num_classes).

    When ``capture`` is a dict, the final dense block's output is stored under
    ``"block_output"`` and its normalized, rectified form (the map that feeds
    global pooling) under ``"features"``, both with gradients retained.
    """
    _check_batch(model, batch)
    x = T.conv2d(batch, model.params["stem.conv"], padding=1)
    n_blocks = len(model.config.block_layout)
    for b in range(1, n_blocks + 1):
        x = dense_block_forward(model, x, b)
        if b < n_blocks:
            x = transition_forward(model, x, b)
    if capture is not None:
        capture["block_output"] = x.retain_grad()
    x = _norm_relu(model, x, "final.norm")
    if capture is not None:
        capture["features"] = x.retain_grad()
    pooled = T.global_avg_pool(x)
    pooled = T.dropout(pooled, model.config.dropout_rate, model.training, rng)
    return T.linear(pooled, model.params["head.weight"], model.params["head.bias"])


def model_forward(model: Model, batch: T.Tensor, rng: np.random.Generator | None = None) -> T.Tensor:
    """Independent per-class probabilities, each strictly inside (0, 1)."""
    return T.sigmoid(model_logits(model, batch, rng=rng))


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------

def save_weights(model: Model, path: str | Path) -> None:
    """Write a little-endian weight file: header, config echo, manifest, float64 payload."""
    arrays = model.state_arrays()
    manifest = []
    offset = 0
    for name, arr in arrays.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    config_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    manifest_blob = json.dumps(manifest).encode()
    parts = [WEIGHT_MAGIC, struct.pack("<III", WEIGHT_FORMAT_VERSION, len(config_blob),
                                      len(manifest_blob)), config_blob, manifest_blob]
    parts += [np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in arrays.values()]
    atomic_write_bytes(path, b"".join(parts))


def load_weights(path: str | Path, expected: ModelConfig | None = None) -> Model:
    """Rebuild a model from a weight file; raise ConfigError if ``expected`` differs."""
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHT_MAGIC:
        raise ConfigError(f"{path} is not a weight file")
    version, n_config, n_manifest = struct.unpack_from("<III", raw, 4)
    if version != WEIGHT_FORMAT_VERSION:
        raise ConfigError(f"unsupported weight format version {version}")
    pos = 16
    config = ModelConfig.from_dict(json.loads(raw[pos:pos + n_config]))
    pos += n_config
    manifest = json.loads(raw[pos:pos + n_manifest])
    pos += n_manifest
    if expected is not None and expected != config:
        raise ConfigError(f"weight file config {config} does not match expected {expected}")
    model = build_model(config, seed=0)
    targets = model.state_arrays()
    if sorted(targets) != sorted(m["name"] for m in manifest):
        raise ConfigError("weight file parameter manifest does not match its config")
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = pos + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape)
        dest = targets[entry["name"]]
        if dest.shape != shape:
            raise ConfigError(f"parameter {entry['name']} has shape {shape}, expected {dest.shape}")
        dest[...] = arr
    return model
