"""Two-branch fused multi-stage causal TCN for per-second phase recognition."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from enum import Enum

import numpy as np

from . import tensor as tc
from .tensor import ContractError, DimensionError, ParameterError, Tensor

CHECKPOINT_MAGIC = b"PCKP"
CHECKPOINT_VERSION = 1


class AlignmentError(DimensionError):
    """Feature branches disagree on the number of frames."""


class TemporalMode(str, Enum):
    PLAIN = "plain"
    POSITIONAL = "positional"
    DELAYED = "delayed"


@dataclass
class ModelConfig:
    audio_dim: int = 32
    audio_channels: int = 3
    visual_dim: int = 32
    hidden_dim: int = 32
    num_classes: int = 8
    num_stages: int = 2
    num_blocks: int = 4
    kernel_size: int = 3
    dropout_p: float = 0.0
    temporal_mode: TemporalMode = TemporalMode.PLAIN

    def __post_init__(self):
        self.temporal_mode = TemporalMode(self.temporal_mode)
        self.validate()

    def validate(self):
        for name in ("audio_dim", "audio_channels", "visual_dim", "num_stages", "num_blocks", "kernel_size", "num_classes"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim < self.num_classes:
            raise ParameterError(f"hidden_dim ({self.hidden_dim}) must be >= num_classes ({self.num_classes})")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.temporal_mode is TemporalMode.POSITIONAL and self.hidden_dim % 2:
            raise ParameterError("positional encodings need an even hidden_dim")

    @property
    def input_dim(self) -> int:
        return self.audio_channels * self.audio_dim + self.visual_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["temporal_mode"] = self.temporal_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


def full_scale_config(temporal_mode: TemporalMode | str = TemporalMode.DELAYED) -> ModelConfig:
    """Approximate full-size configuration (1024-d backbone features, N=10 blocks).

    The hidden width was chosen so the analytic parameter count lands near
    2.8 M; the original width and block count are not published.
    """
    return ModelConfig(
        audio_dim=1024, audio_channels=3, visual_dim=1024, hidden_dim=160,
        num_classes=8, num_stages=2, num_blocks=10, kernel_size=3,
        dropout_p=0.5, temporal_mode=TemporalMode(temporal_mode),
    )


@dataclass
class DelayedMemory:
    """Detached summary of the previous batch's phase probabilities.

    ``summary`` is the mean softmax column (length num_classes) or None at the
    start of an operation. The learned projection lives in the model, so the
    memory itself never holds a graph.
    """

    summary: np.ndarray | None = None

    def reset(self):
        self.summary = None


@dataclass
class Model:
    config: ModelConfig
    parameters: dict[str, Tensor] = field(default_factory=dict)
    memory: DelayedMemory = field(default_factory=DelayedMemory)

    @property
    def initialized(self) -> bool:
        return bool(self.parameters)

    def zero_grad(self):
        for p in self.parameters.values():
            p.zero_grad()

    def reset_memory(self):
        self.memory.reset()

    def memory_vector(self) -> np.ndarray:
        """Current delayed-estimation feature (hidden_dim); zeros when empty."""
        if self.memory.summary is None:
            return np.zeros(self.config.hidden_dim)
        return self.parameters["delayed.weight"].data @ self.memory.summary

    def copy(self) -> Model:
        return Model(
            config=ModelConfig.from_dict(self.config.to_dict()),
            parameters={k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.parameters.items()},
        )


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in a fixed order."""
    h, c, k = config.hidden_dim, config.num_classes, config.kernel_size
    shapes: dict[str, tuple[int, ...]] = {
        "fusion.weight": (h, config.input_dim),
        "fusion.bias": (h,),
    }
    if config.temporal_mode is TemporalMode.DELAYED:
        shapes["delayed.weight"] = (h, c)
    for s in range(config.num_stages):
        if s > 0:
            shapes[f"stage{s}.in.weight"] = (h, c)
            shapes[f"stage{s}.in.bias"] = (h,)
        for b in range(config.num_blocks):
            shapes[f"stage{s}.block{b}.dilated.weight"] = (h, h, k)
            shapes[f"stage{s}.block{b}.dilated.bias"] = (h,)
            shapes[f"stage{s}.block{b}.pointwise.weight"] = (h, h)
            shapes[f"stage{s}.block{b}.pointwise.bias"] = (h,)
        shapes[f"stage{s}.out.weight"] = (c, h)
        shapes[f"stage{s}.out.bias"] = (c,)
    return shapes


def _fan_in(name: str, shapes: dict[str, tuple[int, ...]]) -> int:
    weight = shapes[name.rsplit(".", 1)[0] + ".weight"]
    return int(np.prod(weight[1:]))


def init_model(config: ModelConfig, seed: int) -> Model:
    """Uniform(-a, a) init with a = sqrt(1 / fan_in), drawn in parameter order."""
    rng = np.random.default_rng(seed)
    shapes = parameter_shapes(config)
    params = {}
    for name, shape in shapes.items():
        a = math.sqrt(1.0 / _fan_in(name, shapes))
        params[name] = Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)
    return Model(config=config, parameters=params)


def parameter_count(config: ModelConfig) -> int:
    h, c, k, n = config.hidden_dim, config.num_classes, config.kernel_size, config.num_blocks
    fusion = config.input_dim * h + h
    block = (h * h * k + h) + (h * h + h)
    head = h * c + c
    stage_in = c * h + h
    total = fusion + config.num_stages * (n * block + head) + (config.num_stages - 1) * stage_in
    if config.temporal_mode is TemporalMode.DELAYED:
        total += h * c
    return total


def receptive_field(config: ModelConfig) -> int:
    per_stage = 1 + (config.kernel_size - 1) * (2 ** config.num_blocks - 1)
    return config.num_stages * (per_stage - 1) + 1


def positional_encoding(start_pos: int, T: int, d: int) -> Tensor:
    """Sinusoidal encodings for absolute positions start_pos .. start_pos+T-1 (d x T)."""
    if d % 2:
        raise ParameterError(f"positional encoding width must be even, got {d}")
    if start_pos < 0:
        raise ParameterError("start_pos must be nonnegative")
    pos = np.arange(start_pos, start_pos + T, dtype=np.float64)
    i = np.arange(0, d, 2, dtype=np.float64)
    angle = pos[None, :] / np.power(10000.0, i / d)[:, None]
    pe = np.empty((d, T))
    pe[0::2] = np.sin(angle)
    pe[1::2] = np.cos(angle)
    return Tensor(pe)


def fuse_features(audio: Tensor, visual: Tensor, model: Model) -> Tensor:
    cfg = model.config
    if audio.shape[1] != visual.shape[1]:
        raise AlignmentError(f"audio has {audio.shape[1]} frames, visual has {visual.shape[1]}")
    if audio.shape[0] != cfg.audio_channels * cfg.audio_dim or visual.shape[0] != cfg.visual_dim:
        raise DimensionError(
            f"expected audio rows {cfg.audio_channels * cfg.audio_dim} and visual rows {cfg.visual_dim}, "
            f"got {audio.shape[0]} and {visual.shape[0]}"
        )
    _require_init(model)
    stacked = concat_rows(audio, visual)
    return tc.linear(stacked, model.parameters["fusion.weight"], model.parameters["fusion.bias"])


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    na = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)

    def _backward(g):
        a.accumulate(g[:na])
        b.accumulate(g[na:])

    return tc._node(out, (a, b), "concat", _backward)


def update_delayed_memory(prev_stage_output: Tensor, model: Model) -> DelayedMemory:
    """Store the detached mean probability column of the batch just finished."""
    probs = prev_stage_output.data
    if probs.ndim != 2 or probs.shape[0] != model.config.num_classes:
        raise DimensionError(f"expected [{model.config.num_classes}, T] probabilities, got {list(probs.shape)}")
    model.memory.summary = probs.mean(axis=1).copy()
    return model.memory


def _require_init(model: Model):
    if not model.initialized:
        raise ContractError("model parameters are not initialized")


def _stage(model: Model, s: int, x: Tensor, train: bool, rng) -> Tensor:
    p = model.parameters
    cfg = model.config
    if s > 0:
        x = tc.linear(x, p[f"stage{s}.in.weight"], p[f"stage{s}.in.bias"])
    for b in range(cfg.num_blocks):
        pre = f"stage{s}.block{b}"
        out = tc.conv1d_causal(x, p[f"{pre}.dilated.weight"], p[f"{pre}.dilated.bias"], dilation=2 ** b)
        out = tc.relu(out)
        out = tc.linear(out, p[f"{pre}.pointwise.weight"], p[f"{pre}.pointwise.bias"])
        out = tc.dropout(out, cfg.dropout_p, train, rng)
        x = tc.add(x, out)
    return tc.linear(x, p[f"stage{s}.out.weight"], p[f"stage{s}.out.bias"])


def forward(model: Model, fused: Tensor, start_pos: int = 0, train: bool = False,
            rng: np.random.Generator | None = None) -> list[Tensor]:
    """Per-stage logits (num_classes x T) for one contiguous batch of frames."""
    _require_init(model)
    cfg = model.config
    if fused.data.ndim != 2 or fused.shape[0] != cfg.hidden_dim:
        raise DimensionError(f"expected fused features [{cfg.hidden_dim}, T], got {list(fused.shape)}")
    x = fused
    if cfg.temporal_mode is TemporalMode.POSITIONAL:
        x = tc.add(x, positional_encoding(start_pos, fused.shape[1], cfg.hidden_dim))
    elif cfg.temporal_mode is TemporalMode.DELAYED and model.memory.summary is not None:
        summary = Tensor(model.memory.summary[:, None])
        mem = tc.linear(summary, model.parameters["delayed.weight"])
        x = tc.add_columns(x, _column(mem))
    outputs = []
    for s in range(cfg.num_stages):
        logits = _stage(model, s, x, train, rng)
        outputs.append(logits)
        x = tc.softmax_cols(logits)
    return outputs


def _column(m: Tensor) -> Tensor:
    """Reshape a D x 1 tensor to a length-D vector."""
    def _backward(g):
        m.accumulate(g[:, None])

    return tc._node(m.data[:, 0], (m,), "column", _backward)


def run_batch(model: Model, audio: Tensor, visual: Tensor, start_pos: int = 0,
              train: bool = False, rng=None) -> list[Tensor]:
    return forward(model, fuse_features(audio, visual, model), start_pos, train=train, rng=rng)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model: Model, extra: dict | None = None) -> bytes:
    header = {"format_version": CHECKPOINT_VERSION, "config": model.config.to_dict()}
    if extra:
        header["meta"] = extra
    js = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(js)), js,
           struct.pack("<I", len(model.parameters))]
    for name, t in model.parameters.items():
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(tc.serialize(t))
    return b"".join(out)


def model_from_bytes(buf: bytes) -> tuple[Model, dict]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise tc.FormatError("not a checkpoint file (bad magic)")
    version, n_js = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise tc.FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[12: 12 + n_js].decode("utf-8"))
    offset = 12 + n_js
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    params = {}
    for _ in range(count):
        (n_name,) = struct.unpack_from("<I", buf, offset)
        name = buf[offset + 4: offset + 4 + n_name].decode("utf-8")
        t, offset = tc.deserialize(buf, offset + 4 + n_name)
        params[name] = Tensor(t.data, requires_grad=True)
    if offset != len(buf):
        raise tc.FormatError("trailing bytes after checkpoint records")
    config = ModelConfig.from_dict(header["config"])
    expected = parameter_shapes(config)
    if list(expected) != list(params) or any(params[k].shape != s for k, s in expected.items()):
        raise tc.FormatError("checkpoint parameters do not match its config")
    return Model(config=config, parameters=params), header.get("meta", {})


def save_checkpoint(model: Model, path, extra: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, extra))


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
