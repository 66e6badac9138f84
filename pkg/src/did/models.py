"""Sequence classifiers: transformer encoder with statistics pooling, and a
stacked 1-D convolution baseline with a short receptive field.

Both consume a per-utterance feature matrix and emit one logit vector.
The transformer takes stacked/downsampled features (input projection to
d_model, sinusoidal position encoding added unscaled, post-norm encoder
layers, mean+std pooling, a two-layer FC head); the CNN takes raw
filterbank frames (valid convolutions over time, channels over the
feature axis, global mean pooling, FC head).
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, InputError
from .tensor import (
    Tensor,
    add,
    concat,
    conv1d,
    layer_norm,
    matmul,
    mean,
    relu,
    reshape,
    scale,
    softmax,
    std,
    transpose,
)


@dataclass
class TransformerConfig:
    num_layers: int = 4
    num_heads: int = 8
    d_model: int = 512
    d_inner: int = 2048
    input_dim: int = 320
    fc_dims: tuple = (512, 64)
    num_classes: int = 17
    max_len: int = 4096
    pooling: str = "mean_std"  # or "mean"

    def __post_init__(self):
        self.fc_dims = tuple(self.fc_dims)
        if self.d_model % self.num_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.d_model % 2 != 0:
            raise ConfigError(f"d_model must be even for sinusoidal encoding, "
                              f"got {self.d_model}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.fc_dims) != 2:
            raise ConfigError(f"fc_dims must have exactly 2 entries, got {self.fc_dims}")
        if self.max_len < 1 or self.num_layers < 1:
            raise ConfigError("max_len and num_layers must be positive")
        if self.pooling not in ("mean_std", "mean"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads

    @property
    def pooled_dim(self) -> int:
        return 2 * self.d_model if self.pooling == "mean_std" else self.d_model


@dataclass
class CnnConfig:
    channels: tuple = (256, 256, 256, 512)
    kernels: tuple = (7, 3, 3, 3)
    strides: tuple = (1, 1, 1, 1)
    input_dim: int = 80
    head_dims: tuple = (64,)
    num_classes: int = 17
    pooling: str = "mean"

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.kernels = tuple(self.kernels)
        self.strides = tuple(self.strides)
        self.head_dims = tuple(self.head_dims)
        if not (len(self.channels) == len(self.kernels) == len(self.strides)):
            raise ConfigError("channels/kernels/strides must have equal length")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.pooling != "mean":
            raise ConfigError(f"unknown pooling {self.pooling!r}")

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k, s in zip(self.kernels, self.strides):
            rf += (k - 1) * jump
            jump *= s
        return rf


def positional_encoding(seq_len: int, d_model: int) -> Tensor:
    """Sinusoidal position table: sin at even dims, cos at odd dims, both at
    angular frequency 1/10000^(2i/d_model)."""
    if seq_len < 1:
        raise ConfigError(f"seq_len must be >= 1, got {seq_len}")
    if d_model % 2 != 0:
        raise ConfigError(f"d_model must be even, got {d_model}")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    inv_freq = 10000.0 ** (-np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    angles = pos * inv_freq[None, :]
    pe = np.empty((seq_len, d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return Tensor(pe)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class EncoderLayerParams:
    """Per-head Q/K/V projections, output projection, FFN, two layer norms."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        d, dk, h = cfg.d_model, cfg.d_k, cfg.num_heads
        self.wq = [Tensor(_uniform(rng, (d, dk), d), requires_grad=True) for _ in range(h)]
        self.wk = [Tensor(_uniform(rng, (d, dk), d), requires_grad=True) for _ in range(h)]
        self.wv = [Tensor(_uniform(rng, (d, dk), d), requires_grad=True) for _ in range(h)]
        self.wo = Tensor(_uniform(rng, (d, d), d), requires_grad=True)
        self.w1 = Tensor(_uniform(rng, (d, cfg.d_inner), d), requires_grad=True)
        self.b1 = Tensor(np.zeros(cfg.d_inner), requires_grad=True)
        self.w2 = Tensor(_uniform(rng, (cfg.d_inner, d), cfg.d_inner), requires_grad=True)
        self.b2 = Tensor(np.zeros(d), requires_grad=True)
        self.ln1_g = Tensor(np.ones(d), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(d), requires_grad=True)
        self.ln2_g = Tensor(np.ones(d), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(d), requires_grad=True)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (q, k, v) in enumerate(zip(self.wq, self.wk, self.wv)):
            out[f"{prefix}.head{i}.wq"] = q
            out[f"{prefix}.head{i}.wk"] = k
            out[f"{prefix}.head{i}.wv"] = v
        out.update({f"{prefix}.wo": self.wo,
                    f"{prefix}.ffn.w1": self.w1, f"{prefix}.ffn.b1": self.b1,
                    f"{prefix}.ffn.w2": self.w2, f"{prefix}.ffn.b2": self.b2,
                    f"{prefix}.ln1.gain": self.ln1_g, f"{prefix}.ln1.bias": self.ln1_b,
                    f"{prefix}.ln2.gain": self.ln2_g, f"{prefix}.ln2.bias": self.ln2_b})
        return out


def mha(x: Tensor, params: EncoderLayerParams, num_heads: int,
        return_weights: bool = False):
    """Multi-head scaled dot-product self-attention over a T x d_model input."""
    d_k = params.wq[0].shape[1]
    inv_sqrt_dk = 1.0 / math.sqrt(d_k)
    heads, weights = [], []
    for i in range(num_heads):
        q = matmul(x, params.wq[i])
        k = matmul(x, params.wk[i])
        v = matmul(x, params.wv[i])
        scores = scale(matmul(q, transpose(k)), inv_sqrt_dk)
        attn = softmax(scores, axis=1)
        if return_weights:
            weights.append(attn.data.copy())
        heads.append(matmul(attn, v))
    out = matmul(concat(heads, axis=1) if num_heads > 1 else heads[0], params.wo)
    return (out, weights) if return_weights else out


def feed_forward(x: Tensor, params: EncoderLayerParams) -> Tensor:
    hidden = relu(add(matmul(x, params.w1), params.b1))
    return add(matmul(hidden, params.w2), params.b2)


def encoder_layer(x: Tensor, params: EncoderLayerParams, num_heads: int) -> Tensor:
    """Post-norm sublayers: layer_norm(x + sublayer(x)) for MHA then FFN."""
    attended = layer_norm(add(x, mha(x, params, num_heads)), params.ln1_g, params.ln1_b)
    return layer_norm(add(attended, feed_forward(attended, params)),
                      params.ln2_g, params.ln2_b)


def stats_pool(h: Tensor, pooling: str = "mean_std") -> Tensor:
    """Collapse T x d to per-dimension statistics (population std)."""
    if pooling == "mean":
        return mean(h, axis=0)
    return concat([mean(h, axis=0), std(h, axis=0)], axis=0)


class TransformerModel:
    """Encoder classifier over stacked/downsampled features."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator | int = 0):
        if isinstance(rng, int):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.w_in = Tensor(_uniform(rng, (cfg.input_dim, cfg.d_model), cfg.input_dim),
                           requires_grad=True)
        self.b_in = Tensor(np.zeros(cfg.d_model), requires_grad=True)
        self.layers = [EncoderLayerParams(cfg, rng) for _ in range(cfg.num_layers)]
        self.pe = positional_encoding(cfg.max_len, cfg.d_model)
        dims = [cfg.pooled_dim, cfg.fc_dims[0], cfg.fc_dims[1], cfg.num_classes]
        self.fc_w = [Tensor(_uniform(rng, (a, b), a), requires_grad=True)
                     for a, b in zip(dims[:-1], dims[1:])]
        self.fc_b = [Tensor(np.zeros(b), requires_grad=True) for b in dims[1:]]

    def parameters(self) -> dict[str, Tensor]:
        out = {"input.w": self.w_in, "input.b": self.b_in}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"enc{i}"))
        for i, (w, b) in enumerate(zip(self.fc_w, self.fc_b)):
            out[f"fc{i}.w"] = w
            out[f"fc{i}.b"] = b
        return out

    def forward(self, feats: np.ndarray) -> Tensor:
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.cfg.input_dim:
            raise ConfigError(
                f"expected T x {self.cfg.input_dim} features, got {feats.shape}")
        t = feats.shape[0]
        if t > self.cfg.max_len:
            raise ConfigError(f"sequence length {t} exceeds max_len {self.cfg.max_len}")
        x = add(matmul(Tensor(feats), self.w_in), self.b_in)
        x = add(x, Tensor(self.pe.data[:t]))
        for layer in self.layers:
            x = encoder_layer(x, layer, self.cfg.num_heads)
        pooled = reshape(stats_pool(x, self.cfg.pooling), (1, self.cfg.pooled_dim))
        z = relu(add(matmul(pooled, self.fc_w[0]), self.fc_b[0]))
        z = relu(add(matmul(z, self.fc_w[1]), self.fc_b[1]))
        logits = add(matmul(z, self.fc_w[2]), self.fc_b[2])
        return reshape(logits, (self.cfg.num_classes,))


class CnnModel:
    """Valid 1-D convolutions over time, global mean pooling, FC head."""

    def __init__(self, cfg: CnnConfig, rng: np.random.Generator | int = 0):
        if isinstance(rng, int):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.conv_w, self.conv_b = [], []
        c_in = cfg.input_dim
        for c_out, k in zip(cfg.channels, cfg.kernels):
            self.conv_w.append(Tensor(_uniform(rng, (k, c_in, c_out), k * c_in),
                                      requires_grad=True))
            self.conv_b.append(Tensor(np.zeros(c_out), requires_grad=True))
            c_in = c_out
        dims = [c_in, *cfg.head_dims, cfg.num_classes]
        self.fc_w = [Tensor(_uniform(rng, (a, b), a), requires_grad=True)
                     for a, b in zip(dims[:-1], dims[1:])]
        self.fc_b = [Tensor(np.zeros(b), requires_grad=True) for b in dims[1:]]

    @property
    def receptive_field(self) -> int:
        return self.cfg.receptive_field

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"conv{i}.w"] = w
            out[f"conv{i}.b"] = b
        for i, (w, b) in enumerate(zip(self.fc_w, self.fc_b)):
            out[f"fc{i}.w"] = w
            out[f"fc{i}.b"] = b
        return out

    def forward(self, feats: np.ndarray) -> Tensor:
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.cfg.input_dim:
            raise ConfigError(
                f"expected T x {self.cfg.input_dim} features, got {feats.shape}")
        if feats.shape[0] < self.receptive_field:
            raise InputError(
                f"utterance of {feats.shape[0]} frames is shorter than the "
                f"receptive field of {self.receptive_field}")
        x = Tensor(feats)
        for w, b, stride in zip(self.conv_w, self.conv_b, self.cfg.strides):
            x = relu(add(conv1d(x, w, stride=stride, padding=0), b))
        x = mean(x, axis=0)
        x = reshape(x, (1, x.shape[0]))
        for w, b in zip(self.fc_w[:-1], self.fc_b[:-1]):
            x = relu(add(matmul(x, w), b))
        logits = add(matmul(x, self.fc_w[-1]), self.fc_b[-1])
        return reshape(logits, (self.cfg.num_classes,))


# ---------------------------------------------------------------------------
# Checkpoints: "DIDM" | version u16 | config block | named tensors
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"DIDM"
CKPT_VERSION = 1

_TUPLE_FIELDS = {"fc_dims", "channels", "kernels", "strides", "head_dims"}


def _config_to_lines(kind: str, cfg, class_names) -> str:
    pairs = [("model", kind)]
    if class_names:
        pairs.append(("classes", ",".join(class_names)))
    for name, value in vars(cfg).items():
        if isinstance(value, tuple):
            pairs.append((name, ",".join(str(v) for v in value)))
        else:
            pairs.append((name, str(value)))
    return "".join(f"{k}={v}\n" for k, v in pairs)


def _config_from_lines(text: str):
    fields = {}
    for line in text.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        fields[key] = value
    kind = fields.pop("model")
    class_names = fields.pop("classes", "")
    class_names = class_names.split(",") if class_names else None
    cls = TransformerConfig if kind == "transformer" else CnnConfig
    kwargs = {}
    for key, value in fields.items():
        if key in _TUPLE_FIELDS:
            kwargs[key] = tuple(int(v) for v in value.split(","))
        elif value in ("True", "False"):
            kwargs[key] = value == "True"
        elif key in ("pooling",):
            kwargs[key] = value
        else:
            kwargs[key] = int(value)
    return kind, cls(**kwargs), class_names


def save_checkpoint(path, kind: str, cfg, params: dict[str, Tensor],
                    class_names: list[str] | None = None) -> None:
    from .tensor import write_tensor
    config_block = _config_to_lines(kind, cfg, class_names).encode("utf-8")
    with open(f"{path}.tmp", "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(struct.pack("<I", len(config_block)))
        fh.write(config_block)
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            write_tensor(fh, tensor)
    import os
    os.replace(f"{path}.tmp", path)


def load_checkpoint(path):
    """Returns (kind, config, {name: Tensor}, class_names or None)."""
    import os
    if not os.path.exists(path):
        raise InputError(f"checkpoint not found: {path}")
    from .tensor import read_tensor
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise InputError(f"{path}: not a model checkpoint")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CKPT_VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        (config_len,) = struct.unpack("<I", fh.read(4))
        kind, cfg, class_names = _config_from_lines(fh.read(config_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            params[name] = read_tensor(fh)
    return kind, cfg, params, class_names


def build_model(kind: str, cfg, rng: np.random.Generator | int = 0):
    if kind == "transformer":
        return TransformerModel(cfg, rng)
    if kind == "cnn":
        return CnnModel(cfg, rng)
    raise ConfigError(f"unknown model kind {kind!r}")


def load_model(path):
    """Rebuild a model from a checkpoint, binding the stored parameters.

    Returns (kind, model, class_names or None).
    """
    kind, cfg, stored, class_names = load_checkpoint(path)
    model = build_model(kind, cfg)
    params = model.parameters()
    if set(params) != set(stored):
        missing = sorted(set(params) ^ set(stored))
        raise InputError(f"{path}: parameter set mismatch: {missing[:5]}")
    for name, tensor in params.items():
        if tensor.shape != stored[name].shape:
            raise DimensionError(
                f"{path}: {name} has shape {stored[name].shape}, expected {tensor.shape}")
        tensor.data[...] = stored[name].data
    return kind, model, class_names
