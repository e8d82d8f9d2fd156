"""Bi-directional transformer encoder regressing per-note performance values.

Raw token values (scaled to roughly [0, 1]) are projected straight into the
hidden space without embedding tables.  After the encoder stack, a one-hot
pianist vector is appended to every position and three linear heads predict
velocity, duration deviation and inter-onset interval, each squashed into
its configured range.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .features import INPUT_FEATURES, TARGET_FEATURES, WINDOW_SIZE, ModelIO, PianistId
from .numerics import nn
from .numerics.tensor import Tensor, add, concat, mul, relu, scaled_sigmoid, scaled_tanh, tanh
from .tokenizer import BAR_VOCAB, DURATION_VOCAB, PITCH_VOCAB, POSITION_VOCAB, VELOCITY_VOCAB

IOI_SCALE = 6144
# Divisors for (pitch, velocity, duration, bar, position, ioi).
INPUT_SCALES = np.array(
    [PITCH_VOCAB, VELOCITY_VOCAB, DURATION_VOCAB, BAR_VOCAB, POSITION_VOCAB, IOI_SCALE], dtype=np.float64)
HEADS = ("velocity", "dd", "ioi")
_HEAD_KEYS = {"velocity": "v", "dd": "dd", "ioi": "ioi"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    hidden_dim: int = 128
    ff_dim: int = 512
    num_pianists: int = 6
    window: int = WINDOW_SIZE
    input_feature_count: int = len(INPUT_FEATURES)
    velocity_range: tuple[float, float] = (0.0, 63.0)
    dd_range: tuple[float, float] = (-4608.0, 4608.0)
    ioi_range: tuple[float, float] = (0.0, 6144.0)
    positional_encoding: bool = False
    activation: str = "relu"
    dropout: float = 0.0
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        for name in ("velocity_range", "dd_range", "ioi_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        if min(self.num_layers, self.num_heads, self.hidden_dim, self.ff_dim, self.num_pianists, self.window) < 1:
            raise ConfigError(f"model sizes must be positive: {self}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if self.input_feature_count != len(INPUT_FEATURES):
            raise ConfigError(f"input_feature_count must be {len(INPUT_FEATURES)}")
        for name in ("velocity_range", "dd_range", "ioi_range"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ConfigError(f"{name} must be finite with lo < hi, got {(lo, hi)}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    def output_range(self, head: str) -> tuple[float, float]:
        return getattr(self, f"{head}_range")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


ACTIVATIONS = {"relu": relu, "tanh": tanh}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name with its shape, in initialization order."""
    h, f = config.hidden_dim, config.ff_dim
    shapes: dict[str, tuple[int, ...]] = {
        "in_w": (config.input_feature_count, h),
        "in_b": (h,),
    }
    for i in range(config.num_layers):
        p = f"layer{i}."
        for name in ("q", "k", "v", "o"):
            shapes[p + name + "_w"] = (h, h)
            shapes[p + name + "_b"] = (h,)
        shapes[p + "ln1_g"] = (h,)
        shapes[p + "ln1_b"] = (h,)
        shapes[p + "ff1_w"] = (h, f)
        shapes[p + "ff1_b"] = (f,)
        shapes[p + "ff2_w"] = (f, h)
        shapes[p + "ff2_b"] = (h,)
        shapes[p + "ln2_g"] = (h,)
        shapes[p + "ln2_b"] = (h,)
    for head in HEADS:
        shapes[f"head_{_HEAD_KEYS[head]}_w"] = (h + config.num_pianists, 1)
        shapes[f"head_{_HEAD_KEYS[head]}_b"] = (1,)
    return shapes


def shared_layer_name(config: ModelConfig) -> str:
    """The last shared weight matrix, used to measure per-task gradient norms."""
    return f"layer{config.num_layers - 1}.ff2_w"


def init_params(config: ModelConfig) -> dict[str, Tensor]:
    config.validate()
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 2:
            data = nn.xavier_uniform(rng, shape[0], shape[1], dtype)
        elif name.endswith("_g"):
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def count_params(params: dict[str, Tensor]) -> int:
    return sum(p.size for p in params.values())


def normalize_inputs(inputs) -> np.ndarray:
    """Scale raw token columns by their vocabulary/range sizes."""
    if isinstance(inputs, ModelIO):
        inputs = inputs.inputs
    return np.asarray(inputs, dtype=np.float64) / INPUT_SCALES


def _bounded(z: Tensor, lo: float, hi: float) -> Tensor:
    if lo == -hi:
        return scaled_tanh(z, hi)
    return scaled_sigmoid(z, lo, hi)


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1 - rate)
    return mul(x, keep)


def forward_batch(params: dict[str, Tensor], config: ModelConfig, inputs: np.ndarray,
                  mask: np.ndarray, pianists, rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """Run the encoder on a batch.

    inputs: (batch, window, 6) raw token values; mask: (batch, window);
    pianists: (batch,) indices.  Returns one (batch, window) Tensor per head.
    ``rng`` enables dropout when the config asks for it.
    """
    inputs = np.asarray(inputs)
    if inputs.ndim == 2:
        inputs = inputs[None]
    batch, seq, nfeat = inputs.shape
    if seq != config.window:
        raise ValueError(f"window length {seq} does not match configured window {config.window}")
    if nfeat != config.input_feature_count:
        raise ValueError(f"expected {config.input_feature_count} input features, got {nfeat}")
    mask = np.asarray(mask).reshape(batch, seq)
    pianists = np.atleast_1d(np.asarray(pianists, dtype=np.int64))
    if pianists.shape != (batch,):
        raise ValueError(f"need one pianist per window, got {pianists.shape} for batch {batch}")
    if pianists.min() < 0 or pianists.max() >= config.num_pianists:
        raise ValueError(f"pianist index out of range 0..{config.num_pianists - 1}: {pianists.tolist()}")

    dtype = np.dtype(config.dtype)
    act = ACTIVATIONS[config.activation]
    x = Tensor(normalize_inputs(inputs).astype(dtype))
    h = nn.linear(x, params["in_w"], params["in_b"])
    if config.positional_encoding:
        h = add(h, nn.sinusoidal_positions(seq, config.hidden_dim, dtype))
    for i in range(config.num_layers):
        h = _dropout(h, config.dropout, rng)
        h = nn.encoder_layer(h, params, f"layer{i}.", config.num_heads, mask, act)

    onehot = np.zeros((batch, seq, config.num_pianists), dtype=dtype)
    onehot[np.arange(batch), :, pianists] = 1
    h = concat([h, Tensor(onehot)], axis=-1)

    out = {}
    for head in HEADS:
        key = _HEAD_KEYS[head]
        z = nn.linear(h, params[f"head_{key}_w"], params[f"head_{key}_b"])
        z = z.reshape(batch, seq)
        out[head] = _bounded(z, *config.output_range(head))
    return out


def forward(params: dict[str, Tensor], config: ModelConfig, io: ModelIO,
            pianist: PianistId | int) -> dict[str, np.ndarray]:
    """Predictions for a single window as plain arrays of length ``window``."""
    index = pianist.index if isinstance(pianist, PianistId) else int(pianist)
    out = forward_batch(params, config, io.inputs[None], io.mask[None], [index])
    return {k: v.data[0] for k, v in out.items()}


__all__ = [
    "ModelConfig", "ConfigError", "init_params", "param_shapes", "count_params", "normalize_inputs",
    "forward", "forward_batch", "shared_layer_name", "HEADS", "TARGET_FEATURES",
]
